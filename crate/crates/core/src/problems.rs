//! Finite-volume demo problems.
//!
//! All operators are assembled in cell-integrated form: each row is the
//! balance over the control volume of its node, so diffusion rows carry
//! face-length/spacing weights and right-hand sides carry cell areas.

use std::f64::consts::PI;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{contraction_bound, DependenceGraph};
use crate::driver::{CoupledProblem, RigorousConstants};
use crate::numerics::{Matrix, Vector};

pub const GRAVITY: f64 = 9.81;
/// Required distance of the temperature from the viscosity pole.
pub const VISCOSITY_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("diffusion coefficient must be positive, found {0}")]
    NonPositiveDiffusion(f64),
    #[error("temperature {theta} too close to the viscosity pole (need > {limit})")]
    ViscosityOutOfRange { theta: f64, limit: f64 },
    #[error("derivative bounds are not available")]
    MissingDerivativeBounds,
    #[error("invalid problem configuration: {0}")]
    ConfigError(String),
}

/// Uniform node grid on `[0, width] × [0, height]` with `nx × ny` interior nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub width: f64,
    pub height: f64,
    pub hx: f64,
    pub hy: f64,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, width: f64, height: f64) -> Result<Self, ProblemError> {
        if nx < 3 || ny < 3 {
            return Err(ProblemError::ConfigError(format!("grid needs at least 3×3 nodes, got {nx}×{ny}")));
        }
        if !(width > 0.0 && height > 0.0) {
            return Err(ProblemError::ConfigError(format!("domain extents must be positive: {width}×{height}")));
        }
        Ok(Self {
            nx,
            ny,
            width,
            height,
            hx: width / (nx + 1) as f64,
            hy: height / (ny + 1) as f64,
        })
    }

    pub fn unit_square(n: usize) -> Result<Self, ProblemError> {
        Self::new(n, n, 1.0, 1.0)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major index of interior node `(i, j)`, both 0-based.
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Coordinates of interior node `(i, j)`.
    pub fn point(&self, i: usize, j: usize) -> (f64, f64) {
        ((i + 1) as f64 * self.hx, (j + 1) as f64 * self.hy)
    }

    /// Poincaré constant of the rectangle, `1 / (π √(1/W² + 1/H²))`.
    pub fn poincare_constant(&self) -> f64 {
        1.0 / (PI * (1.0 / (self.width * self.width) + 1.0 / (self.height * self.height)).sqrt())
    }

    /// Smallest eigenvalue of the cell-integrated Dirichlet Laplacian.
    pub fn laplacian_min_eigenvalue(&self) -> f64 {
        let sx = (PI * self.hx / (2.0 * self.width)).sin();
        let sy = (PI * self.hy / (2.0 * self.height)).sin();
        4.0 * sx * sx * self.hy / self.hx + 4.0 * sy * sy * self.hx / self.hy
    }
}

/// Nodal field on a rectangular node set, for plain-text dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub name: String,
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub values: Vec<f64>,
}

impl Field {
    /// Header `nx ny hx hy`, then one value per line in row-major order.
    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{} {} {:e} {:e}", self.nx, self.ny, self.hx, self.hy)?;
        for v in &self.values {
            writeln!(out, "{v:e}")?;
        }
        Ok(())
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// `D(x, y) = base · (1 + variation · sin(πx/W) sin(πy/H))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionField {
    pub base: f64,
    #[serde(default)]
    pub variation: f64,
}

impl DiffusionField {
    pub fn constant(d: f64) -> Self {
        Self { base: d, variation: 0.0 }
    }

    fn at(&self, grid: &Grid2D, x: f64, y: f64) -> f64 {
        self.base * (1.0 + self.variation * (PI * x / grid.width).sin() * (PI * y / grid.height).sin())
    }

    /// Lower bound over the closed domain.
    pub fn min_value(&self) -> f64 {
        self.base * (1.0 + self.variation.min(0.0))
    }
}

/// `f(y1, y2) = source · s(x, y) + lin·(y1, y2) + tanh·(tanh y1, tanh y2)`,
/// with `s` the first Dirichlet eigenfunction of the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactionTerm {
    pub source: f64,
    #[serde(default)]
    pub lin: [f64; 2],
    #[serde(default)]
    pub tanh: [f64; 2],
}

impl ReactionTerm {
    fn eval(&self, s: f64, y1: f64, y2: f64) -> f64 {
        self.source * s + self.lin[0] * y1 + self.lin[1] * y2 + self.tanh[0] * y1.tanh() + self.tanh[1] * y2.tanh()
    }

    /// `sup |∂f/∂y1|`, `sup |∂f/∂y2|`.
    pub fn derivative_bounds(&self) -> [f64; 2] {
        [
            self.lin[0].abs() + self.tanh[0].abs(),
            self.lin[1].abs() + self.tanh[1].abs(),
        ]
    }
}

/// Two diffusion equations coupled through their reaction terms, homogeneous
/// Dirichlet data, solved alternately: `y1` from the lagged pair, `y2` from
/// the fresh `y1` and lagged `y2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactionDiffusionPair {
    pub grid: Grid2D,
    pub d1: DiffusionField,
    pub d2: DiffusionField,
    pub f1: ReactionTerm,
    pub f2: ReactionTerm,
    /// Whether `f1`, `f2` derivative bounds may be trusted.
    #[serde(default = "yes")]
    pub bounds_known: bool,
}

fn yes() -> bool {
    true
}

impl ReactionDiffusionPair {
    /// The demo configuration: 32×32 unit square, mildly varying diffusion,
    /// linear and saturating couplings.
    pub fn demo() -> Self {
        Self {
            grid: Grid2D::unit_square(32).expect("valid demo grid"),
            d1: DiffusionField { base: 1.0, variation: 0.3 },
            d2: DiffusionField { base: 1.2, variation: 0.0 },
            f1: ReactionTerm {
                source: 10.0,
                lin: [4.5, -3.0],
                tanh: [3.0, 1.5],
            },
            f2: ReactionTerm {
                source: 4.0,
                lin: [9.0, 3.0],
                tanh: [1.5, 1.5],
            },
            bounds_known: true,
        }
    }

    fn validate(&self) -> Result<(), ProblemError> {
        for d in [self.d1, self.d2] {
            if !(d.min_value() > 0.0) {
                return Err(ProblemError::NonPositiveDiffusion(d.min_value()));
            }
        }
        Ok(())
    }

    fn n(&self) -> usize {
        self.grid.len()
    }

    fn diffusion(&self, which: usize) -> &DiffusionField {
        if which == 1 {
            &self.d1
        } else {
            &self.d2
        }
    }

    fn reaction(&self, which: usize) -> &ReactionTerm {
        if which == 1 {
            &self.f1
        } else {
            &self.f2
        }
    }

    /// `‖A_i⁻¹‖` bound: `1 / (min D · λ_min(Laplacian))`.
    pub fn inverse_norm_bound(&self, which: usize) -> f64 {
        1.0 / (self.diffusion(which).min_value() * self.grid.laplacian_min_eigenvalue())
    }

    pub fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        x.split_at(self.n())
    }
}

/// Cell-integrated `−∇·(D∇y) = f(y1, y2)` for `which ∈ {1, 2}`.
pub fn assemble_rd_system(
    pair: &ReactionDiffusionPair,
    which: usize,
    y1: &[f64],
    y2: &[f64],
) -> Result<(Matrix, Vector), ProblemError> {
    pair.validate()?;
    let g = &pair.grid;
    let n = g.len();
    if y1.len() != n || y2.len() != n {
        return Err(ProblemError::ConfigError(format!("fields must have {n} entries")));
    }
    if which != 1 && which != 2 {
        return Err(ProblemError::ConfigError(format!("system index {which} not in {{1, 2}}")));
    }
    let field = pair.diffusion(which);
    let reaction = pair.reaction(which);
    let d_at = |i: isize, j: isize| {
        let x = (i + 1) as f64 * g.hx;
        let y = (j + 1) as f64 * g.hy;
        field.at(g, x, y)
    };
    let wx = g.hy / g.hx;
    let wy = g.hx / g.hy;
    let area = g.hx * g.hy;
    let mut a = Matrix::zeros(n, n);
    let mut f = Vector::zeros(n);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let row = g.index(i, j);
            let (ii, jj) = (i as isize, j as isize);
            let dp = d_at(ii, jj);
            let neighbours = [(ii - 1, jj, wx), (ii + 1, jj, wx), (ii, jj - 1, wy), (ii, jj + 1, wy)];
            for (ni, nj, w) in neighbours {
                let coef = w * harmonic(dp, d_at(ni, nj));
                a.add_to(row, row, coef);
                let inside = ni >= 0 && nj >= 0 && (ni as usize) < g.nx && (nj as usize) < g.ny;
                if inside {
                    a.add_to(row, g.index(ni as usize, nj as usize), -coef);
                }
            }
            let (x, y) = g.point(i, j);
            let s = (PI * x / g.width).sin() * (PI * y / g.height).sin();
            f[row] = area * reaction.eval(s, y1[row], y2[row]);
        }
    }
    Ok((a, f))
}

/// `C_P² Σ sup|∂f_j/∂y_i| / min(min D1, min D2)`.
pub fn kappa_analytic(pair: &ReactionDiffusionPair) -> Result<f64, ProblemError> {
    if !pair.bounds_known {
        return Err(ProblemError::MissingDerivativeBounds);
    }
    pair.validate()?;
    let cp = pair.grid.poincare_constant();
    let total: f64 = pair.f1.derivative_bounds().iter().chain(&pair.f2.derivative_bounds()).sum();
    Ok(cp * cp * total / pair.d1.min_value().min(pair.d2.min_value()))
}

impl ReactionDiffusionPair {
    fn bound_graph(&self) -> DependenceGraph {
        let area = self.grid.hx * self.grid.hy;
        let [b11, b12] = self.f1.derivative_bounds();
        let [b21, b22] = self.f2.derivative_bounds();
        let m1 = self.inverse_norm_bound(1);
        let m2 = self.inverse_norm_bound(2);
        let mut g = DependenceGraph::picard_solver(2).expect("p = 2");
        g.set_k(1, 0, m1 * area * b11.hypot(b12)).expect("finite bound");
        g.set_k(2, 0, m2 * area * b22).expect("finite bound");
        g.set_k(2, 1, m2 * area * b21).expect("finite bound");
        g
    }
}

impl CoupledProblem for ReactionDiffusionPair {
    fn name(&self) -> &str {
        "rd"
    }

    fn block_dims(&self) -> Vec<usize> {
        vec![self.n(), self.n()]
    }

    fn state_dim(&self) -> usize {
        2 * self.n()
    }

    fn initial_state(&self) -> Vector {
        Vector::zeros(self.state_dim())
    }

    fn assemble(&self, i: usize, x: &Vector, upstream: &[Vector]) -> Result<(Matrix, Vector), ProblemError> {
        let (y1, y2) = self.split(x);
        match i {
            1 => assemble_rd_system(self, 1, y1, y2),
            _ => assemble_rd_system(self, 2, &upstream[0], y2),
        }
    }

    fn combine(&self, _x: &Vector, ys: &[Vector]) -> Vector {
        Vector::concat(ys.iter())
    }

    fn dependence(&self) -> DependenceGraph {
        self.bound_graph()
    }

    fn rigorous_constants(&self) -> Option<RigorousConstants> {
        if !self.bounds_known {
            return None;
        }
        let graph = self.bound_graph();
        Some(RigorousConstants {
            inv_norms: vec![self.inverse_norm_bound(1), self.inverse_norm_bound(2)],
            lipschitz: contraction_bound(&graph),
            graph,
        })
    }

    fn fields(&self, x: &Vector) -> Vec<Field> {
        let (y1, y2) = self.split(x);
        [("y1", y1), ("y2", y2)]
            .into_iter()
            .map(|(name, v)| Field {
                name: name.to_string(),
                nx: self.grid.nx,
                ny: self.grid.ny,
                hx: self.grid.hx,
                hy: self.grid.hy,
                values: v.to_vec(),
            })
            .collect()
    }
}

/// Channel flow heated from the side walls, in a scalar-velocity form:
/// vertical velocity `u` driven by the inlet profile and buoyancy with a
/// temperature-dependent viscosity, temperature `θ` advected by `u`.
///
/// Velocity nodes: `i = 1..=nx` across (walls carry `u = 0`), `j = 1..=ny+1`
/// along the channel (inlet `j = 0` prescribed, outlet `j = ny+1` free).
/// Temperature nodes additionally include both walls (`i = 0, nx+1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThermalFlowSurrogate {
    pub nx: usize,
    pub ny: usize,
    pub width: f64,
    pub height: f64,
    pub beta: f64,
    pub visc_a: f64,
    pub visc_b: f64,
    pub visc_c: f64,
    pub k_t: f64,
    /// Peak scale of the inlet profile `u_in(x) = inlet_scale · x (W − x)`.
    pub inlet_scale: f64,
    /// Outward normal temperature gradient at the walls.
    pub theta_wall: f64,
    pub theta_in: f64,
}

impl Default for ThermalFlowSurrogate {
    fn default() -> Self {
        Self {
            nx: 16,
            ny: 48,
            width: 2.0,
            height: 6.0,
            beta: 0.1,
            visc_a: 0.005,
            visc_b: 20.0,
            visc_c: -9.0,
            k_t: 0.04,
            inlet_scale: 1.8,
            theta_wall: 0.12,
            theta_in: 0.0,
        }
    }
}

impl ThermalFlowSurrogate {
    pub fn grid(&self) -> Grid2D {
        Grid2D::new(self.nx, self.ny, self.width, self.height).expect("validated grid")
    }

    fn validate(&self) -> Result<(), ProblemError> {
        Grid2D::new(self.nx, self.ny, self.width, self.height)?;
        if !(self.k_t > 0.0) {
            return Err(ProblemError::NonPositiveDiffusion(self.k_t));
        }
        if !(self.visc_a > 0.0) {
            return Err(ProblemError::NonPositiveDiffusion(self.visc_a));
        }
        Ok(())
    }

    /// Number of rows of the velocity/temperature node sets.
    fn rows(&self) -> usize {
        self.ny + 1
    }

    pub fn velocity_len(&self) -> usize {
        self.nx * self.rows()
    }

    pub fn temperature_len(&self) -> usize {
        (self.nx + 2) * self.rows()
    }

    fn u_index(&self, i: usize, j: usize) -> usize {
        (j - 1) * self.nx + (i - 1)
    }

    fn t_index(&self, i: usize, j: usize) -> usize {
        (j - 1) * (self.nx + 2) + i
    }

    pub fn inlet_velocity(&self, x: f64) -> f64 {
        self.inlet_scale * x * (self.width - x)
    }

    /// `ν(θ) = a · exp(b / (θ − c))`.
    pub fn viscosity(&self, theta: f64) -> Result<f64, ProblemError> {
        let limit = self.visc_c + VISCOSITY_MARGIN;
        if !(theta > limit) {
            return Err(ProblemError::ViscosityOutOfRange { theta, limit });
        }
        Ok(self.visc_a * (self.visc_b / (theta - self.visc_c)).exp())
    }

    /// Temperature at node `(i, j)` of the full temperature lattice, inlet included.
    fn theta_at(&self, theta: &[f64], i: usize, j: usize) -> f64 {
        if j == 0 {
            self.theta_in
        } else {
            theta[self.t_index(i, j)]
        }
    }
}

/// Cell-integrated `−∇·(ν(θ)∇u) = βgθ` on the velocity nodes.
pub fn assemble_flow(s: &ThermalFlowSurrogate, theta: &[f64]) -> Result<(Matrix, Vector), ProblemError> {
    s.validate()?;
    if theta.len() != s.temperature_len() {
        return Err(ProblemError::ConfigError(format!(
            "temperature field must have {} entries",
            s.temperature_len()
        )));
    }
    let g = s.grid();
    let rows = s.rows();
    // viscosity on the whole temperature lattice including the inlet row
    let mut nu = vec![0.0; (s.nx + 2) * (rows + 1)];
    let nu_index = |i: usize, j: usize| j * (s.nx + 2) + i;
    for j in 0..=rows {
        for i in 0..s.nx + 2 {
            nu[nu_index(i, j)] = s.viscosity(s.theta_at(theta, i, j))?;
        }
    }
    let n = s.velocity_len();
    let mut a = Matrix::zeros(n, n);
    let mut f = Vector::zeros(n);
    for j in 1..=rows {
        let outlet = j == rows;
        let cell_h = if outlet { 0.5 * g.hy } else { g.hy };
        for i in 1..=s.nx {
            let row = s.u_index(i, j);
            let nu_p = nu[nu_index(i, j)];
            let x = i as f64 * g.hx;
            // west and east faces; wall nodes hold u = 0
            for ni in [i - 1, i + 1] {
                let coef = harmonic(nu_p, nu[nu_index(ni, j)]) * cell_h / g.hx;
                a.add_to(row, row, coef);
                if (1..=s.nx).contains(&ni) {
                    a.add_to(row, s.u_index(ni, j), -coef);
                }
            }
            let south = harmonic(nu_p, nu[nu_index(i, j - 1)]) * g.hx / g.hy;
            a.add_to(row, row, south);
            if j == 1 {
                f[row] += south * s.inlet_velocity(x);
            } else {
                a.add_to(row, s.u_index(i, j - 1), -south);
            }
            if !outlet {
                let north = harmonic(nu_p, nu[nu_index(i, j + 1)]) * g.hx / g.hy;
                a.add_to(row, row, north);
                a.add_to(row, s.u_index(i, j + 1), -north);
            }
            f[row] += g.hx * cell_h * s.beta * GRAVITY * s.theta_at(theta, i, j);
        }
    }
    Ok((a, f))
}

/// Cell-integrated `−k_T Δθ + u ∂θ/∂y = 0` with first-order upwinding.
pub fn assemble_heat(s: &ThermalFlowSurrogate, u: &[f64]) -> Result<(Matrix, Vector), ProblemError> {
    s.validate()?;
    if u.len() != s.velocity_len() {
        return Err(ProblemError::ConfigError(format!(
            "velocity field must have {} entries",
            s.velocity_len()
        )));
    }
    if let Some(bad) = u.iter().find(|v| !v.is_finite()) {
        return Err(ProblemError::ConfigError(format!("non-finite velocity {bad}")));
    }
    let g = s.grid();
    let rows = s.rows();
    let n = s.temperature_len();
    let mut a = Matrix::zeros(n, n);
    let mut f = Vector::zeros(n);
    let kt = s.k_t;
    for j in 1..=rows {
        let outlet = j == rows;
        let cell_h = if outlet { 0.5 * g.hy } else { g.hy };
        for i in 0..s.nx + 2 {
            let row = s.t_index(i, j);
            let wall = i == 0 || i == s.nx + 1;
            let cell_w = if wall { 0.5 * g.hx } else { g.hx };
            // horizontal diffusion to the existing neighbours
            for ni in [i.wrapping_sub(1), i + 1] {
                if ni < s.nx + 2 {
                    let coef = kt * cell_h / g.hx;
                    a.add_to(row, row, coef);
                    a.add_to(row, s.t_index(ni, j), -coef);
                }
            }
            if wall {
                f[row] += kt * s.theta_wall * cell_h;
            }
            let vertical = kt * cell_w / g.hy;
            a.add_to(row, row, vertical);
            if j == 1 {
                f[row] += vertical * s.theta_in;
            } else {
                a.add_to(row, s.t_index(i, j - 1), -vertical);
            }
            if !outlet {
                a.add_to(row, row, vertical);
                a.add_to(row, s.t_index(i, j + 1), -vertical);
            }
            let vel = if wall { 0.0 } else { u[s.u_index(i, j)] };
            let adv = vel.abs() * cell_w * cell_h / g.hy;
            if vel > 0.0 {
                a.add_to(row, row, adv);
                if j == 1 {
                    f[row] += adv * s.theta_in;
                } else {
                    a.add_to(row, s.t_index(i, j - 1), -adv);
                }
            } else if vel < 0.0 && !outlet {
                a.add_to(row, row, adv);
                a.add_to(row, s.t_index(i, j + 1), -adv);
            }
        }
    }
    Ok((a, f))
}

impl CoupledProblem for ThermalFlowSurrogate {
    fn name(&self) -> &str {
        "thermal"
    }

    fn block_dims(&self) -> Vec<usize> {
        vec![self.velocity_len(), self.temperature_len()]
    }

    fn state_dim(&self) -> usize {
        self.velocity_len() + self.temperature_len()
    }

    fn initial_state(&self) -> Vector {
        Vector::zeros(self.state_dim())
    }

    fn assemble(&self, i: usize, x: &Vector, upstream: &[Vector]) -> Result<(Matrix, Vector), ProblemError> {
        match i {
            1 => assemble_flow(self, &x[self.velocity_len()..]),
            _ => assemble_heat(self, &upstream[0]),
        }
    }

    fn combine(&self, _x: &Vector, ys: &[Vector]) -> Vector {
        Vector::concat(ys.iter())
    }

    fn dependence(&self) -> DependenceGraph {
        DependenceGraph::linear_chain(&[1.0, 1.0], vec![0.0, 1.0, 1.0]).expect("p = 2")
    }

    fn fields(&self, x: &Vector) -> Vec<Field> {
        let g = self.grid();
        let (u, theta) = x.split_at(self.velocity_len());
        vec![
            Field {
                name: "u".into(),
                nx: self.nx,
                ny: self.rows(),
                hx: g.hx,
                hy: g.hy,
                values: u.to_vec(),
            },
            Field {
                name: "theta".into(),
                nx: self.nx + 2,
                ny: self.rows(),
                hx: g.hx,
                hy: g.hy,
                values: theta.to_vec(),
            },
        ]
    }
}

/// `G(x) = l · x + offset` on `R^dim`, one trivial system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalarToy {
    pub l: f64,
    pub offset: f64,
    pub dim: usize,
    pub x0: f64,
}

impl Default for ScalarToy {
    fn default() -> Self {
        Self {
            l: 0.9,
            offset: 0.0,
            dim: 1,
            x0: 1.0,
        }
    }
}

impl CoupledProblem for ScalarToy {
    fn name(&self) -> &str {
        "scalar"
    }

    fn block_dims(&self) -> Vec<usize> {
        vec![self.dim]
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn initial_state(&self) -> Vector {
        Vector::from_fn(self.dim, |_| self.x0)
    }

    fn assemble(&self, _i: usize, x: &Vector, _upstream: &[Vector]) -> Result<(Matrix, Vector), ProblemError> {
        Ok((
            Matrix::identity(self.dim),
            Vector::from_fn(self.dim, |k| self.l * x[k] + self.offset),
        ))
    }

    fn combine(&self, _x: &Vector, ys: &[Vector]) -> Vector {
        ys[0].clone()
    }

    fn dependence(&self) -> DependenceGraph {
        let mut g = DependenceGraph::picard_solver(1).expect("p = 1");
        g.set_k(1, 0, self.l.abs()).expect("finite slope");
        g
    }

    fn rigorous_constants(&self) -> Option<RigorousConstants> {
        Some(RigorousConstants {
            inv_norms: vec![1.0],
            graph: self.dependence(),
            lipschitz: self.l.abs(),
        })
    }

    fn fields(&self, x: &Vector) -> Vec<Field> {
        vec![Field {
            name: "x".into(),
            nx: self.dim,
            ny: 1,
            hx: 1.0,
            hy: 1.0,
            values: x.to_vec(),
        }]
    }
}

/// Problem selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Rd(ReactionDiffusionPair),
    Thermal(ThermalFlowSurrogate),
    Scalar(ScalarToy),
}

impl ProblemSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemSpec::Rd(_) => "rd",
            ProblemSpec::Thermal(_) => "thermal",
            ProblemSpec::Scalar(_) => "scalar",
        }
    }

    /// Default parameters for a problem name.
    pub fn by_name(name: &str) -> Result<Self, ProblemError> {
        match name {
            "rd" => Ok(ProblemSpec::Rd(ReactionDiffusionPair::demo())),
            "thermal" => Ok(ProblemSpec::Thermal(ThermalFlowSurrogate::default())),
            "scalar" => Ok(ProblemSpec::Scalar(ScalarToy::default())),
            other => Err(ProblemError::ConfigError(format!("unknown problem {other:?}"))),
        }
    }
}

pub fn make_coupled_problem(spec: &ProblemSpec) -> Result<Box<dyn CoupledProblem>, ProblemError> {
    Ok(match spec {
        ProblemSpec::Rd(p) => {
            p.validate()?;
            Box::new(p.clone())
        }
        ProblemSpec::Thermal(p) => {
            p.validate()?;
            Box::new(p.clone())
        }
        ProblemSpec::Scalar(p) => {
            if p.dim == 0 {
                return Err(ProblemError::ConfigError("scalar problem needs dim ≥ 1".into()));
            }
            Box::new(p.clone())
        }
    })
}
