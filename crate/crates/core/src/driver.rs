//! Exact and inexact fixed-point steps and the accelerated iteration.
//!
//! The accelerated loop alternates between full-order evaluations of the
//! map `G` and reduced evaluations `G_k` built from a window of recent
//! solutions. A propagated error estimate decides when a reduced step is
//! acceptable; rejected steps leave the iterate unchanged and force a
//! full-order refinement of the reduced models.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{
    amplification_factor, ConstantsLedger, CouplingError, DependenceGraph, ExactSample,
    DEFAULT_LEDGER_WINDOW, MAX_SYSTEMS,
};
use crate::numerics::{LuFactorization, Matrix, NumericsError, Vector};
use crate::pod_rom::{build_basis, rom_solve, BasisMethod, PodError, ReducedBasis, SnapshotWindow};
use crate::problems::{Field, ProblemError};

/// A fixed-point map `G(x) = φ(x, y_1, …, y_p)` where each `y_i` solves a
/// linear system assembled from `x` and the upstream solutions.
pub trait CoupledProblem {
    fn name(&self) -> &str {
        "problem"
    }

    /// Sizes `n_1 … n_p` of the auxiliary systems.
    fn block_dims(&self) -> Vec<usize>;

    fn num_systems(&self) -> usize {
        self.block_dims().len()
    }

    fn state_dim(&self) -> usize;

    fn initial_state(&self) -> Vector;

    /// `(A_i, F_i)` for system `i` (1-based) given `x` and `y_1 … y_{i-1}`.
    fn assemble(
        &self,
        i: usize,
        x: &Vector,
        upstream: &[Vector],
    ) -> Result<(Matrix, Vector), ProblemError>;

    fn combine(&self, x: &Vector, ys: &[Vector]) -> Vector;

    /// Combiner constants and the pattern of couplings. Nonzero `K` entries
    /// mark declared dependencies; their values are only used as bounds when
    /// no online estimate is wanted.
    fn dependence(&self) -> DependenceGraph;

    /// Proven bounds, when the problem can supply them.
    fn rigorous_constants(&self) -> Option<RigorousConstants> {
        None
    }

    /// Named nodal fields of a state, for dumps.
    fn fields(&self, _x: &Vector) -> Vec<Field> {
        Vec::new()
    }
}

/// Proven constants for the error estimators.
#[derive(Debug, Clone)]
pub struct RigorousConstants {
    /// `‖A_i⁻¹‖` bound per system.
    pub inv_norms: Vec<f64>,
    /// Coupling bounds and combiner constants.
    pub graph: DependenceGraph,
    /// Lipschitz constant of `G`.
    pub lipschitz: f64,
}

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("system {system}: {source}")]
    SingularMatrix {
        system: usize,
        source: NumericsError,
    },
    #[error("system {system}: assembly failed: {source}")]
    Assembly {
        system: usize,
        source: ProblemError,
    },
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("constant {0} not yet estimated")]
    MissingConstants(&'static str),
    #[error(transparent)]
    Pod(#[from] PodError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Accept when the reduced residual is below a tolerance.
    Residual,
    /// Accept when the single-step bound `δ^k` is below `ε`.
    UpperBound,
    /// Accept on the asymptotic residual budget of the alternating scheme.
    Asymptotic,
    /// Accept while `δ^k + L·err ≤ ε`.
    #[default]
    Propagation,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::Residual,
        Criterion::UpperBound,
        Criterion::Asymptotic,
        Criterion::Propagation,
    ];
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Residual => "residual",
            Criterion::UpperBound => "upper_bound",
            Criterion::Asymptotic => "asymptotic",
            Criterion::Propagation => "propagation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Relaxation {
    #[default]
    Picard,
    /// `(1 − λ) x + λ G(x)`.
    Krasnoselskij { lambda: f64 },
    /// `λ_n = lambda0 · (n + 1)^(−exponent)`, `n` counting advancing steps.
    Mann { lambda0: f64, exponent: f64 },
}

impl Relaxation {
    pub fn weight(&self, n: usize) -> f64 {
        match *self {
            Relaxation::Picard => 1.0,
            Relaxation::Krasnoselskij { lambda } => lambda,
            Relaxation::Mann { lambda0, exponent } => lambda0 * ((n + 1) as f64).powf(-exponent),
        }
    }

    fn validate(&self) -> Result<(), DriverError> {
        let ok = match *self {
            Relaxation::Picard => true,
            Relaxation::Krasnoselskij { lambda } => lambda > 0.0 && lambda <= 1.0,
            Relaxation::Mann { lambda0, exponent } => {
                lambda0 > 0.0 && lambda0 <= 1.0 && (0.0..=1.0).contains(&exponent)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(DriverError::InvalidConfig(format!("relaxation weights must lie in (0, 1]: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstantsSource {
    /// Ratios of successive exact evaluations.
    #[default]
    Online,
    /// Bounds supplied by the problem.
    Rigorous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub eps: f64,
    pub k_max: usize,
    pub n_b: usize,
    pub eps_rb: f64,
    /// 1-based indices of the systems replaced by reduced models.
    pub rom_set: Vec<usize>,
    pub criterion: Criterion,
    /// Residual criterion tolerance; `eps` when absent.
    pub residual_tol: Option<f64>,
    pub basis_method: BasisMethod,
    pub relaxation: Relaxation,
    pub validation_loop: bool,
    pub constants: ConstantsSource,
    pub ledger_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            eps: 1e-8,
            k_max: 1000,
            n_b: 5,
            eps_rb: 1e-7,
            rom_set: vec![1],
            criterion: Criterion::Propagation,
            residual_tol: None,
            basis_method: BasisMethod::Svd,
            relaxation: Relaxation::Picard,
            validation_loop: true,
            constants: ConstantsSource::Online,
            ledger_window: DEFAULT_LEDGER_WINDOW,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, p: usize) -> Result<(), DriverError> {
        let bad = |msg: String| Err(DriverError::InvalidConfig(msg));
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.n_b < 2 {
            return bad(format!("n_b must be at least 2, got {}", self.n_b));
        }
        if !(self.eps_rb > 0.0 && self.eps_rb < 1.0) {
            return bad(format!("eps_rb must lie in (0, 1), got {}", self.eps_rb));
        }
        if p == 0 || p > MAX_SYSTEMS {
            return bad(format!("number of systems must be in 1..={MAX_SYSTEMS}, got {p}"));
        }
        let mut seen = vec![false; p + 1];
        for &i in &self.rom_set {
            if i == 0 || i > p {
                return bad(format!("ROM system {i} outside 1..={p}"));
            }
            if std::mem::replace(&mut seen[i], true) {
                return bad(format!("ROM system {i} listed twice"));
            }
        }
        if let Some(tol) = self.residual_tol {
            if !(tol > 0.0) {
                return bad(format!("residual_tol must be positive, got {tol}"));
            }
        }
        if self.ledger_window == 0 {
            return bad("ledger_window must be positive".into());
        }
        self.relaxation.validate()
    }

    /// The ROM set sorted ascending.
    fn sorted_rom_set(&self) -> Vec<usize> {
        let mut s = self.rom_set.clone();
        s.sort_unstable();
        s
    }
}

/// Variables of the accelerated iteration.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub k: usize,
    pub x: Vector,
    pub err: f64,
    pub recompute: bool,
    pub converged: bool,
    pub last_step_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepEvent {
    Fom,
    Rom,
    Reject,
    Refine,
    Validate,
}

impl StepEvent {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepEvent::Fom => "FOM",
            StepEvent::Rom => "ROM",
            StepEvent::Reject => "reject",
            StepEvent::Refine => "refine",
            StepEvent::Validate => "validate",
        }
    }

    /// Whether the iterate moved (rejections and validations do not).
    pub fn advances(&self) -> bool {
        matches!(self, StepEvent::Fom | StepEvent::Rom | StepEvent::Refine)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub k: usize,
    /// Propagated error after the step (`inf` when unknown).
    pub err: f64,
    pub delta_k: Option<f64>,
    /// `‖x^{k+1} − x^k‖`, or `‖G(x) − x‖` for validation rows.
    pub step_norm: f64,
    pub event: StepEvent,
    /// Lipschitz estimate in effect for this step.
    pub l_est: Option<f64>,
    /// Hash of the iterate after the step.
    pub x_hash: u64,
}

/// Bitwise hash of a state vector.
pub fn state_hash(x: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in x {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub problem: String,
    pub converged: bool,
    pub iterations: usize,
    pub fom_solves: Vec<usize>,
    /// Reduced solves used by accepted inexact steps.
    pub rom_solves: Vec<usize>,
    /// Calls to the reduced solver, including rejected and trial ones.
    pub projections: Vec<usize>,
    pub assemblies: Vec<usize>,
    pub svd_count: Vec<usize>,
    pub basis_sizes: Vec<usize>,
    pub rejected_steps: usize,
    pub validations: usize,
    pub validation_failures: usize,
    pub final_err: f64,
    /// The criterion's own error indicator at the last reduced evaluation:
    /// `Σ‖r‖` (residual), `δ^k` (upper bound), `Σ‖r‖/factor` (asymptotic)
    /// or the propagated error.
    pub final_estimate: f64,
    pub final_step_norm: f64,
    pub l_est: Option<f64>,
    pub contraction_warning: bool,
    pub error_vs_reference: Option<f64>,
    #[serde(skip)]
    pub final_state: Vector,
    pub trace: Vec<TraceEntry>,
}

impl RunReport {
    fn new(problem: &str, p: usize, x: Vector) -> Self {
        Self {
            problem: problem.to_string(),
            converged: false,
            iterations: 0,
            fom_solves: vec![0; p],
            rom_solves: vec![0; p],
            projections: vec![0; p],
            assemblies: vec![0; p],
            svd_count: vec![0; p],
            basis_sizes: vec![0; p],
            rejected_steps: 0,
            validations: 0,
            validation_failures: 0,
            final_err: f64::INFINITY,
            final_estimate: f64::INFINITY,
            final_step_norm: f64::INFINITY,
            l_est: None,
            contraction_warning: false,
            error_vs_reference: None,
            final_state: x,
            trace: Vec::new(),
        }
    }

    pub fn total_fom_solves(&self) -> usize {
        self.fom_solves.iter().sum()
    }
}

/// One system solution produced while evaluating `G` or `G_k`.
struct Evaluation {
    gx: Vector,
    ys: Vec<Vector>,
    rhs_norms: Vec<f64>,
    /// Reduced residual norms for the ROM systems, in ROM-set order.
    residuals: Vec<f64>,
}

/// Counters shared by exact and inexact evaluations.
struct Counters<'a> {
    fom: &'a mut [usize],
    projections: &'a mut [usize],
    assemblies: &'a mut [usize],
}

enum Solved {
    Ok(Evaluation),
    /// A reduced system was singular; the caller must use the full model.
    ReducedFailure(PodError),
}

fn evaluate<P: CoupledProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    roms: &[(usize, &ReducedBasis)],
    counters: &mut Counters<'_>,
) -> Result<Solved, DriverError> {
    let p = problem.num_systems();
    let mut ys: Vec<Vector> = Vec::with_capacity(p);
    let mut rhs_norms = Vec::with_capacity(p);
    let mut residuals = Vec::with_capacity(roms.len());
    for i in 1..=p {
        let (a, f) = problem
            .assemble(i, x, &ys)
            .map_err(|source| DriverError::Assembly { system: i, source })?;
        counters.assemblies[i - 1] += 1;
        rhs_norms.push(f.norm2());
        if let Some((_, basis)) = roms.iter().find(|(s, _)| *s == i) {
            counters.projections[i - 1] += 1;
            match rom_solve(basis, &a, &f) {
                Ok(sol) => {
                    residuals.push(sol.residual_norm);
                    ys.push(sol.full_field);
                }
                Err(e @ PodError::SingularReducedSystem(_)) => return Ok(Solved::ReducedFailure(e)),
                Err(e) => return Err(e.into()),
            }
        } else {
            let y = LuFactorization::new(&a)
                .and_then(|lu| lu.solve(&f))
                .map_err(|source| DriverError::SingularMatrix { system: i, source })?;
            counters.fom[i - 1] += 1;
            ys.push(y);
        }
    }
    let gx = problem.combine(x, &ys);
    Ok(Solved::Ok(Evaluation {
        gx,
        ys,
        rhs_norms,
        residuals,
    }))
}

fn scratch_counters(p: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    (vec![0; p], vec![0; p], vec![0; p])
}

/// Result of one full-order application of `G`.
#[derive(Debug, Clone)]
pub struct ExactStep {
    pub x_next: Vector,
    pub ys: Vec<Vector>,
    pub rhs_norms: Vec<f64>,
}

/// `G(x)` with every system solved by the full model, in order.
pub fn exact_step<P: CoupledProblem + ?Sized>(problem: &P, x: &Vector) -> Result<ExactStep, DriverError> {
    let (mut a, mut b, mut c) = scratch_counters(problem.num_systems());
    let mut counters = Counters {
        fom: &mut a,
        projections: &mut b,
        assemblies: &mut c,
    };
    match evaluate(problem, x, &[], &mut counters)? {
        Solved::Ok(ev) => Ok(ExactStep {
            x_next: ev.gx,
            ys: ev.ys,
            rhs_norms: ev.rhs_norms,
        }),
        Solved::ReducedFailure(_) => unreachable!("no reduced systems requested"),
    }
}

/// `(1 − λ) x + λ y`.
fn blend(x: &Vector, y: &Vector, lambda: f64) -> Vector {
    if lambda == 1.0 {
        return y.clone();
    }
    Vector::from_fn(x.len(), |i| (1.0 - lambda) * x[i] + lambda * y[i])
}

/// `(1 − λ) x + λ G(x)`.
pub fn relaxed_step<P: CoupledProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    lambda: f64,
) -> Result<Vector, DriverError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(DriverError::InvalidConfig(format!("relaxation weight {lambda} outside (0, 1]")));
    }
    Ok(blend(x, &exact_step(problem, x)?.x_next, lambda))
}

/// Constants entering `δ^k`.
#[derive(Debug, Clone)]
pub struct DeltaConstants {
    pub graph: DependenceGraph,
    /// `‖A_i⁻¹‖` estimate per system (index `i - 1`).
    pub inv_norms: Vec<f64>,
}

impl DeltaConstants {
    fn delta(&self, rom_set: &[usize], residuals: &[f64]) -> Result<f64, DriverError> {
        let mut total = 0.0;
        for (&i, &r) in rom_set.iter().zip(residuals) {
            if r != 0.0 {
                total += amplification_factor(&self.graph, i)? * self.inv_norms[i - 1] * r;
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone)]
pub struct InexactStep {
    pub x_next: Vector,
    /// `δ^k`, or `inf` when constants are unavailable.
    pub delta_k: f64,
    /// Reduced residual norms at the mixed parameters, in ROM-set order.
    pub residual_norms: Vec<f64>,
    pub ys: Vec<Vector>,
}

/// `G_k(x)`: systems in `rom_set` use their reduced basis, downstream
/// assemblers see the reduced solutions.
pub fn inexact_step<P: CoupledProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    rom_set: &[usize],
    bases: &[ReducedBasis],
    constants: Option<&DeltaConstants>,
) -> Result<InexactStep, DriverError> {
    let (mut a, mut b, mut c) = scratch_counters(problem.num_systems());
    let mut counters = Counters {
        fom: &mut a,
        projections: &mut b,
        assemblies: &mut c,
    };
    inexact_counted(problem, x, rom_set, bases, constants, &mut counters)
}

fn inexact_counted<P: CoupledProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    rom_set: &[usize],
    bases: &[ReducedBasis],
    constants: Option<&DeltaConstants>,
    counters: &mut Counters<'_>,
) -> Result<InexactStep, DriverError> {
    assert_eq!(rom_set.len(), bases.len(), "one basis per ROM system");
    let roms: Vec<(usize, &ReducedBasis)> = rom_set.iter().copied().zip(bases).collect();
    match evaluate(problem, x, &roms, counters)? {
        Solved::Ok(ev) => {
            let delta_k = match constants {
                Some(c) => c.delta(rom_set, &ev.residuals)?,
                None if rom_set.is_empty() => 0.0,
                None => f64::INFINITY,
            };
            Ok(InexactStep {
                x_next: ev.gx,
                delta_k,
                residual_norms: ev.residuals,
                ys: ev.ys,
            })
        }
        Solved::ReducedFailure(e) => Err(e.into()),
    }
}

/// `Σ_{i=0}^{m-1} L^i δ_{m-1-i}` for `deltas = (δ_0, …, δ_{m-1})`, oldest
/// first, evaluated by Horner's rule.
pub fn propagation_bound(l_est: f64, deltas: &[f64]) -> f64 {
    deltas.iter().fold(0.0, |acc, &d| acc * l_est + d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Refine,
}

/// Quantities a quality criterion may consult.
#[derive(Debug, Clone, Copy)]
pub struct CriterionInputs {
    pub delta_k: f64,
    pub err: f64,
    pub l_est: f64,
    pub eps: f64,
    /// Sum of reduced residual norms over the ROM set.
    pub residual_norm: f64,
    pub residual_tol: f64,
    pub k21: Option<f64>,
    pub k12: Option<f64>,
    pub m: Option<f64>,
}

/// `(1 − K21·K12) / (K21·(1 + K21)·M)`.
pub fn asymptotic_factor(k21: f64, k12: f64, m: f64) -> f64 {
    (1.0 - k21 * k12) / (k21 * (1.0 + k21) * m)
}

pub fn evaluate_criterion(kind: Criterion, inputs: &CriterionInputs) -> Result<Decision, DriverError> {
    let accept = match kind {
        Criterion::Residual => inputs.residual_norm <= inputs.residual_tol,
        Criterion::UpperBound => inputs.delta_k <= inputs.eps,
        Criterion::Asymptotic => {
            let k21 = inputs.k21.ok_or(DriverError::MissingConstants("K21"))?;
            let k12 = inputs.k12.ok_or(DriverError::MissingConstants("K12"))?;
            let m = inputs.m.ok_or(DriverError::MissingConstants("M"))?;
            let factor = asymptotic_factor(k21, k12, m);
            factor > 0.0 && inputs.residual_norm <= factor * inputs.eps
        }
        Criterion::Propagation => propagation_bound(inputs.l_est, &[inputs.err, inputs.delta_k]) <= inputs.eps,
    };
    Ok(if accept { Decision::Accept } else { Decision::Refine })
}

/// Error indicator the criterion bases its decision on; `None` when the
/// required constants are unavailable.
pub fn quality_index(kind: Criterion, inputs: &CriterionInputs) -> Option<f64> {
    match kind {
        Criterion::Residual => Some(inputs.residual_norm),
        Criterion::UpperBound => Some(inputs.delta_k),
        Criterion::Asymptotic => {
            let factor = asymptotic_factor(inputs.k21?, inputs.k12?, inputs.m?);
            (factor > 0.0).then(|| inputs.residual_norm / factor)
        }
        Criterion::Propagation => Some(propagation_bound(inputs.l_est, &[inputs.err, inputs.delta_k])),
    }
}

/// What the observer of [`accelerated_run_observed`] sees after each step.
pub struct StepRecord<'a> {
    pub k: usize,
    pub event: StepEvent,
    /// Relaxation weight applied on advancing steps.
    pub lambda: f64,
    pub x_before: &'a Vector,
    pub x_after: &'a Vector,
}

pub fn accelerated_run<P: CoupledProblem + ?Sized>(problem: &P, config: &RunConfig) -> Result<RunReport, DriverError> {
    accelerated_run_observed(problem, config, |_| {})
}

/// Working data of one accelerated run.
struct Engine<'p, P: CoupledProblem + ?Sized> {
    problem: &'p P,
    config: &'p RunConfig,
    rom_set: Vec<usize>,
    template: DependenceGraph,
    rigorous: Option<RigorousConstants>,
    ledger: ConstantsLedger,
    windows: Vec<SnapshotWindow>,
    bases: Vec<Option<ReducedBasis>>,
    report: RunReport,
    warned_expansive: bool,
}

impl<'p, P: CoupledProblem + ?Sized> Engine<'p, P> {
    fn counters(&mut self) -> Counters<'_> {
        Counters {
            fom: &mut self.report.fom_solves,
            projections: &mut self.report.projections,
            assemblies: &mut self.report.assemblies,
        }
    }

    fn exact(&mut self, x: &Vector) -> Result<Evaluation, DriverError> {
        let problem = self.problem;
        let mut counters = self.counters();
        let ev = match evaluate(problem, x, &[], &mut counters)? {
            Solved::Ok(ev) => ev,
            Solved::ReducedFailure(_) => unreachable!("no reduced systems requested"),
        };
        self.ledger.record(ExactSample {
            x: x.clone(),
            gx: ev.gx.clone(),
            ys: ev.ys.clone(),
            rhs_norms: ev.rhs_norms.clone(),
        });
        Ok(ev)
    }

    fn bases_ready(&self) -> bool {
        self.bases.iter().all(Option::is_some)
    }

    fn delta_constants(&self) -> Option<DeltaConstants> {
        let p = self.problem.num_systems();
        match (&self.config.constants, &self.rigorous) {
            (ConstantsSource::Rigorous, Some(r)) => Some(DeltaConstants {
                graph: r.graph.clone(),
                inv_norms: r.inv_norms.clone(),
            }),
            _ => {
                let graph = self.ledger.estimated_graph(&self.template)?;
                let m = self.ledger.m_est()?;
                Some(DeltaConstants {
                    graph,
                    inv_norms: vec![m; p],
                })
            }
        }
    }

    /// Lipschitz constant of `G`, before relaxation.
    fn lipschitz(&mut self) -> Option<f64> {
        let l = match (&self.config.constants, &self.rigorous) {
            (ConstantsSource::Rigorous, Some(r)) => Some(r.lipschitz),
            _ => self.ledger.l_est(),
        };
        if let Some(l) = l {
            if l >= 1.0 && !self.warned_expansive {
                log::debug!("transient Lipschitz estimate {l:.4} ≥ 1");
                self.warned_expansive = true;
            }
        }
        l
    }

    /// Lipschitz constant of the relaxed map; 1 when unknown.
    fn relaxed_lipschitz(&mut self, lambda: f64) -> f64 {
        let l = self.lipschitz().unwrap_or_else(|| {
            log::debug!("no Lipschitz estimate yet, assuming a nonexpansive map");
            1.0
        });
        (1.0 - lambda) + lambda * l
    }

    /// Trial reduced evaluation; `None` when a reduced system is singular.
    fn trial(&mut self, x: &Vector) -> Result<Option<InexactStep>, DriverError> {
        let constants = self.delta_constants();
        let bases: Vec<ReducedBasis> = self.bases.iter().map(|b| b.clone().expect("bases ready")).collect();
        let problem = self.problem;
        let rom_set = self.rom_set.clone();
        let mut counters = self.counters();
        match inexact_counted(problem, x, &rom_set, &bases, constants.as_ref(), &mut counters) {
            Ok(step) => Ok(Some(step)),
            Err(DriverError::Pod(e @ PodError::SingularReducedSystem(_))) => {
                log::debug!("reduced solve failed: {e}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn push_snapshots(&mut self, ys: &[Vector]) -> Result<(), DriverError> {
        for (slot, &i) in self.rom_set.iter().enumerate() {
            let window = &mut self.windows[slot];
            window.push(ys[i - 1].clone())?;
            if window.is_full() {
                let basis = build_basis(window, self.config.basis_method, self.config.eps_rb)?;
                self.report.svd_count[i - 1] += 1;
                self.report.basis_sizes[i - 1] = basis.dim();
                self.bases[slot] = Some(basis);
            }
        }
        Ok(())
    }

    fn criterion_inputs(&self, step: &InexactStep, err: f64, l: f64) -> CriterionInputs {
        CriterionInputs {
            delta_k: step.delta_k,
            err,
            l_est: l,
            eps: self.config.eps,
            residual_norm: step.residual_norms.iter().sum(),
            residual_tol: self.config.residual_tol.unwrap_or(self.config.eps),
            k21: self.ledger.k21_est(),
            k12: self.ledger.k12_est(),
            m: self.ledger.m_est(),
        }
    }
}

/// Accelerated run that reports every step to `observer`.
pub fn accelerated_run_observed<P, F>(problem: &P, config: &RunConfig, mut observer: F) -> Result<RunReport, DriverError>
where
    P: CoupledProblem + ?Sized,
    F: FnMut(&StepRecord<'_>),
{
    let p = problem.num_systems();
    config.validate(p)?;
    let x0 = problem.initial_state();
    if x0.len() != problem.state_dim() {
        return Err(DriverError::InvalidConfig(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            problem.state_dim()
        )));
    }
    let template = problem.dependence();
    let rigorous = problem.rigorous_constants();
    if config.constants == ConstantsSource::Rigorous && rigorous.is_none() {
        return Err(DriverError::InvalidConfig(format!(
            "problem {} has no rigorous constants",
            problem.name()
        )));
    }
    let rom_set = config.sorted_rom_set();
    let mut eng = Engine {
        problem,
        config,
        ledger: ConstantsLedger::new(&template, config.ledger_window),
        windows: rom_set.iter().map(|_| SnapshotWindow::new(config.n_b)).collect(),
        bases: vec![None; rom_set.len()],
        rom_set,
        template,
        rigorous,
        report: RunReport::new(problem.name(), p, x0.clone()),
        warned_expansive: false,
    };
    let eps = config.eps;
    let propagation = config.criterion == Criterion::Propagation;

    let mut state = IterationState {
        k: 0,
        x: x0,
        err: f64::INFINITY,
        recompute: false,
        converged: false,
        last_step_norm: f64::INFINITY,
    };
    // Reduced evaluation at the current iterate with the current bases.
    let mut cached: Option<InexactStep> = None;
    let mut advancing = 0usize;
    let mut last_quality = f64::INFINITY;

    while state.k < config.k_max && !state.converged {
        let lambda = config.relaxation.weight(advancing);
        let needs_full = state.recompute
            || state.k < config.n_b
            || !eng.bases_ready()
            || if propagation { state.err > eps } else { state.err.is_infinite() };

        let (x_next, event, delta_k, l_used);
        if needs_full {
            cached = None;
            let ev = eng.exact(&state.x)?;
            x_next = blend(&state.x, &ev.gx, lambda);
            eng.push_snapshots(&ev.ys)?;
            let l = eng.relaxed_lipschitz(lambda);
            l_used = Some(l);
            if state.recompute {
                state.err = propagation_bound(l, &[state.err, 0.0]);
                state.recompute = false;
                event = StepEvent::Refine;
                delta_k = None;
            } else {
                event = StepEvent::Fom;
                if eng.bases_ready() && !eng.rom_set.is_empty() {
                    let trial = eng.trial(&x_next)?;
                    let d = trial.as_ref().map_or(f64::INFINITY, |t| lambda * t.delta_k);
                    state.err = d;
                    delta_k = Some(d);
                    cached = trial;
                } else {
                    state.err = f64::INFINITY;
                    delta_k = None;
                }
            }
        } else {
            let trial = match cached.take() {
                Some(t) => Some(t),
                None => eng.trial(&state.x)?,
            };
            let l = eng.relaxed_lipschitz(lambda);
            l_used = Some(l);
            let accepted = match &trial {
                Some(t) if t.delta_k.is_finite() => {
                    let mut inputs = eng.criterion_inputs(t, state.err, l);
                    inputs.delta_k *= lambda;
                    if let Some(q) = quality_index(config.criterion, &inputs) {
                        last_quality = q;
                    }
                    match evaluate_criterion(config.criterion, &inputs) {
                        Ok(d) => d == Decision::Accept,
                        Err(DriverError::MissingConstants(name)) => {
                            log::debug!("{name} unavailable, refining");
                            false
                        }
                        Err(e) => return Err(e),
                    }
                }
                _ => false,
            };
            delta_k = trial.as_ref().map(|t| lambda * t.delta_k);
            if accepted {
                let t = trial.expect("accepted step has a trial");
                state.err = propagation_bound(l, &[state.err, lambda * t.delta_k]);
                for &i in &eng.rom_set {
                    eng.report.rom_solves[i - 1] += 1;
                }
                x_next = blend(&state.x, &t.x_next, lambda);
                event = StepEvent::Rom;
            } else {
                x_next = state.x.clone();
                state.recompute = true;
                eng.report.rejected_steps += 1;
                event = StepEvent::Reject;
            }
        }

        let step = x_next.distance(&state.x);
        observer(&StepRecord {
            k: state.k,
            event,
            lambda,
            x_before: &state.x,
            x_after: &x_next,
        });
        if event.advances() {
            advancing += 1;
        }
        state.x = x_next;
        state.last_step_norm = step;
        eng.report.trace.push(TraceEntry {
            k: state.k,
            err: state.err,
            delta_k,
            step_norm: step,
            event,
            l_est: l_used,
            x_hash: state_hash(&state.x),
        });

        if step < eps && !state.recompute {
            if config.validation_loop {
                cached = None;
                let ev = eng.exact(&state.x)?;
                let residual = ev.gx.distance(&state.x);
                eng.report.validations += 1;
                if residual < eps {
                    state.converged = true;
                } else {
                    eng.report.validation_failures += 1;
                    state.err = f64::INFINITY;
                }
                let l_now = eng.lipschitz();
                observer(&StepRecord {
                    k: state.k,
                    event: StepEvent::Validate,
                    lambda,
                    x_before: &state.x,
                    x_after: &state.x,
                });
                eng.report.trace.push(TraceEntry {
                    k: state.k,
                    err: state.err,
                    delta_k: None,
                    step_norm: residual,
                    event: StepEvent::Validate,
                    l_est: l_now,
                    x_hash: state_hash(&state.x),
                });
            } else {
                state.converged = true;
            }
        }
        state.k += 1;
    }

    let mut report = eng.report;
    report.l_est = match (&config.constants, &eng.rigorous) {
        (ConstantsSource::Rigorous, Some(r)) => Some(r.lipschitz),
        _ => eng.ledger.l_est(),
    };
    if let Some(l) = report.l_est.filter(|&l| l >= 1.0) {
        report.contraction_warning = true;
        log::warn!("estimated Lipschitz constant {l:.4} ≥ 1: error propagation guarantees do not hold");
    }
    report.converged = state.converged;
    report.iterations = state.k;
    report.final_err = state.err;
    report.final_estimate = if propagation { state.err } else { last_quality };
    report.final_step_norm = state.last_step_norm;
    report.final_state = state.x;
    if !report.converged {
        log::warn!("{}: no convergence after {} iterations", report.problem, report.iterations);
    }
    Ok(report)
}

/// Distances between the accelerated iterates and an exact sequence
/// advanced in lockstep from the same starting point.
#[derive(Debug, Clone)]
pub struct LockstepResult {
    /// Maximum over accepted inexact iterates.
    pub max_accepted: f64,
    /// Maximum over all advancing steps.
    pub max_all: f64,
    pub report: RunReport,
}

pub fn lockstep_verify<P: CoupledProblem + ?Sized>(problem: &P, config: &RunConfig) -> Result<LockstepResult, DriverError> {
    let mut exact = problem.initial_state();
    let mut max_accepted: f64 = 0.0;
    let mut max_all: f64 = 0.0;
    let mut failure: Option<DriverError> = None;
    let report = accelerated_run_observed(problem, config, |rec| {
        if failure.is_some() || !rec.event.advances() {
            return;
        }
        match relaxed_step(problem, &exact, rec.lambda) {
            Ok(next) => exact = next,
            Err(e) => {
                failure = Some(e);
                return;
            }
        }
        let d = rec.x_after.distance(&exact);
        max_all = max_all.max(d);
        if rec.event == StepEvent::Rom {
            max_accepted = max_accepted.max(d);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(LockstepResult {
        max_accepted,
        max_all,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `y_i = A_i⁻¹ (B_i x + C_i y_{i-1} + c_i)` with a Picard combiner.
    struct AffineChain {
        a: Vec<Matrix>,
        b: Vec<Matrix>,
        c: Vec<Option<Matrix>>,
        offset: Vec<Vector>,
        x0: Vector,
    }

    impl AffineChain {
        fn dims(&self) -> Vec<usize> {
            self.a.iter().map(|a| a.rows()).collect()
        }
    }

    impl CoupledProblem for AffineChain {
        fn block_dims(&self) -> Vec<usize> {
            self.dims()
        }

        fn state_dim(&self) -> usize {
            self.dims().iter().sum()
        }

        fn initial_state(&self) -> Vector {
            self.x0.clone()
        }

        fn assemble(&self, i: usize, x: &Vector, upstream: &[Vector]) -> Result<(Matrix, Vector), ProblemError> {
            let mut f = self.b[i - 1].matvec(x).add(&self.offset[i - 1]);
            if let Some(c) = &self.c[i - 1] {
                f = f.add(&c.matvec(&upstream[i - 2]));
            }
            Ok((self.a[i - 1].clone(), f))
        }

        fn combine(&self, _x: &Vector, ys: &[Vector]) -> Vector {
            Vector::concat(ys.iter())
        }

        fn dependence(&self) -> DependenceGraph {
            let mut g = DependenceGraph::picard_solver(self.a.len()).unwrap();
            for i in 1..=self.a.len() {
                g.set_k(i, 0, 1.0).unwrap();
                if self.c[i - 1].is_some() {
                    g.set_k(i, i - 1, 1.0).unwrap();
                }
            }
            g
        }
    }

    fn scalar(l: f64) -> AffineChain {
        AffineChain {
            a: vec![Matrix::identity(1)],
            b: vec![Matrix::from_diagonal(&[l])],
            c: vec![None],
            offset: vec![Vector::zeros(1)],
            x0: Vector::new(vec![1.0]).unwrap(),
        }
    }

    #[test]
    fn exact_step_scalar_contraction() {
        let prob = scalar(0.5);
        let x = Vector::new(vec![3.0]).unwrap();
        assert_eq!(exact_step(&prob, &x).unwrap().x_next.as_slice(), &[1.5]);
    }

    #[test]
    fn exact_step_decoupled_pair() {
        let prob = AffineChain {
            a: vec![Matrix::from_diagonal(&[2.0, 4.0]), Matrix::from_diagonal(&[5.0])],
            b: vec![Matrix::zeros(2, 3), Matrix::zeros(1, 3)],
            c: vec![None, None],
            offset: vec![Vector::new(vec![2.0, 8.0]).unwrap(), Vector::new(vec![10.0]).unwrap()],
            x0: Vector::zeros(3),
        };
        let step = exact_step(&prob, &prob.x0).unwrap();
        assert_eq!(step.x_next.as_slice(), &[1.0, 2.0, 2.0]);
        assert_eq!(step.rhs_norms.len(), 2);
    }

    #[test]
    fn relaxation_examples() {
        let x = Vector::new(vec![2.5]).unwrap();
        let neg = scalar(-1.0);
        assert_eq!(relaxed_step(&neg, &x, 0.5).unwrap().as_slice(), &[0.0]);
        let half = scalar(0.5);
        assert_eq!(relaxed_step(&half, &x, 1.0).unwrap(), exact_step(&half, &x).unwrap().x_next);

        let expansive = scalar(-1.5);
        let mut z = Vector::new(vec![1.0]).unwrap();
        for _ in 0..60 {
            z = relaxed_step(&expansive, &z, 0.2).unwrap();
        }
        // factor |1 − 0.2 − 0.3| = 0.5
        assert!((z[0] - 0.5f64.powi(60)).abs() < 1e-30);
        assert!(relaxed_step(&half, &x, 0.0).is_err());
    }

    #[test]
    fn propagation_bound_examples() {
        assert!((propagation_bound(0.5, &[0.1, 0.2]) - 0.25).abs() < 1e-16);
        assert_eq!(propagation_bound(0.7, &[0.0; 5]), 0.0);
        assert_eq!(propagation_bound(1.0, &[0.25; 8]), 2.0);
        assert_eq!(propagation_bound(0.3, &[]), 0.0);
    }

    fn inputs(delta_k: f64, err: f64) -> CriterionInputs {
        CriterionInputs {
            delta_k,
            err,
            l_est: 0.9,
            eps: 1e-6,
            residual_norm: 1e-7,
            residual_tol: 1e-6,
            k21: Some(2.0),
            k12: Some(0.6),
            m: Some(1.0),
        }
    }

    #[test]
    fn criterion_decisions() {
        assert_eq!(evaluate_criterion(Criterion::Propagation, &inputs(0.0, 1e-6)).unwrap(), Decision::Accept);
        assert_eq!(evaluate_criterion(Criterion::Propagation, &inputs(2e-7, 1e-6)).unwrap(), Decision::Refine);
        // K21·K12 = 1.2 ≥ 1 makes the budget nonpositive
        assert_eq!(evaluate_criterion(Criterion::Asymptotic, &inputs(0.0, 0.0)).unwrap(), Decision::Refine);
        let mut i = inputs(0.0, 0.0);
        i.k12 = None;
        assert!(matches!(
            evaluate_criterion(Criterion::Asymptotic, &i),
            Err(DriverError::MissingConstants("K12"))
        ));
        assert_eq!(evaluate_criterion(Criterion::Residual, &inputs(1.0, 1.0)).unwrap(), Decision::Accept);
        assert_eq!(evaluate_criterion(Criterion::UpperBound, &inputs(2e-6, 0.0)).unwrap(), Decision::Refine);
        // tie accepted
        let mut tie = inputs(0.5, 0.0);
        tie.eps = 0.5;
        assert_eq!(evaluate_criterion(Criterion::Propagation, &tie).unwrap(), Decision::Accept);
    }

    #[test]
    fn asymptotic_accepts_small_residual() {
        let mut i = inputs(0.0, 0.0);
        i.k21 = Some(0.5);
        i.k12 = Some(0.5);
        i.m = Some(2.0);
        // factor = 0.75 / (0.5 · 1.5 · 2) = 0.5
        i.residual_norm = 0.5e-6;
        assert_eq!(evaluate_criterion(Criterion::Asymptotic, &i).unwrap(), Decision::Accept);
        i.residual_norm = 0.51e-6;
        assert_eq!(evaluate_criterion(Criterion::Asymptotic, &i).unwrap(), Decision::Refine);
    }

    #[test]
    fn empty_rom_set_is_plain_picard() {
        let prob = scalar(0.9);
        let config = RunConfig {
            eps: 1e-10,
            rom_set: vec![],
            validation_loop: false,
            ..RunConfig::default()
        };
        let report = accelerated_run(&prob, &config).unwrap();
        assert!(report.converged);
        let mut x = 1.0f64;
        for entry in &report.trace {
            x *= 0.9;
            assert_eq!(entry.event, StepEvent::Fom);
            assert_eq!(entry.x_hash, state_hash(&[x]));
        }
        assert_eq!(report.rejected_steps, 0);
        assert_eq!(report.projections, vec![0]);
        assert_eq!(report.fom_solves, vec![report.iterations]);
    }

    #[test]
    fn inexact_with_empty_set_matches_exact() {
        let prob = scalar(0.3);
        let x = Vector::new(vec![2.0]).unwrap();
        let step = inexact_step(&prob, &x, &[], &[], None).unwrap();
        assert_eq!(step.delta_k, 0.0);
        assert_eq!(step.x_next, exact_step(&prob, &x).unwrap().x_next);
    }

    #[test]
    fn inexact_exact_when_solution_manifold_is_spanned() {
        // y1 does not depend on x, so any window of its solutions spans it
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a1 = Matrix::from_fn(n, n, |i, j| if i == j { 4.0 } else { rng.gen_range(-0.3..0.3) });
        let a2 = Matrix::from_fn(n, n, |i, j| if i == j { 3.0 } else { rng.gen_range(-0.3..0.3) });
        let prob = AffineChain {
            a: vec![a1, a2],
            b: vec![Matrix::zeros(n, 2 * n), Matrix::from_fn(n, 2 * n, |i, j| if j == n + i { 0.5 } else { 0.0 })],
            c: vec![None, Some(Matrix::identity(n))],
            offset: vec![Vector::from_fn(n, |i| i as f64 + 1.0), Vector::zeros(n)],
            x0: Vector::zeros(2 * n),
        };
        let y1 = exact_step(&prob, &prob.x0).unwrap().ys[0].clone();
        let mut w = SnapshotWindow::new(3);
        for t in [0.0, 1.0, -1.0] {
            w.push(Vector::from_fn(n, |i| y1[i] + t * (i as f64))).unwrap();
        }
        let basis = build_basis(&w, BasisMethod::Svd, 1e-9).unwrap();
        let constants = DeltaConstants {
            graph: prob.dependence(),
            inv_norms: vec![1.0, 1.0],
        };
        let x = Vector::from_fn(2 * n, |i| (i as f64).cos());
        let step = inexact_step(&prob, &x, &[1], &[basis], Some(&constants)).unwrap();
        assert!(step.delta_k <= 1e-9);
        assert!(step.x_next.distance(&exact_step(&prob, &x).unwrap().x_next) <= 1e-9);
    }

    #[test]
    fn config_validation() {
        let ok = RunConfig::default();
        assert!(ok.validate(2).is_ok());
        for bad in [
            RunConfig { eps: 0.0, ..ok.clone() },
            RunConfig { n_b: 1, ..ok.clone() },
            RunConfig { eps_rb: 1.0, ..ok.clone() },
            RunConfig { rom_set: vec![3], ..ok.clone() },
            RunConfig { rom_set: vec![1, 1], ..ok.clone() },
            RunConfig {
                relaxation: Relaxation::Krasnoselskij { lambda: 1.5 },
                ..ok.clone()
            },
        ] {
            assert!(bad.validate(2).is_err(), "{bad:?}");
        }
        assert!(ok.validate(MAX_SYSTEMS + 1).is_err());
    }

    #[test]
    fn mann_schedule() {
        let r = Relaxation::Mann { lambda0: 1.0, exponent: 0.5 };
        assert_eq!(r.weight(0), 1.0);
        assert!((r.weight(3) - 0.5).abs() < 1e-15);
    }
}
