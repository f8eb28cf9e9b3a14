//! Dependence structure between the auxiliary systems, contraction bounds,
//! per-step ROM error estimators and online estimation of their constants.
//!
//! Indices follow the convention `0 = x`, `1..=p` = systems. `K[i][j]` for
//! `j < i` bounds how strongly `y_i` reacts to `y_j` (or to `x` when `j = 0`),
//! and `L_0..L_p` are the Lipschitz constants of the combiner in each argument.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Vector;

/// Largest number of systems accepted by run configurations.
pub const MAX_SYSTEMS: usize = 6;
/// Ratio estimators skip samples whose denominator is below this relative scale.
pub const RATIO_GUARD: f64 = 1e-14;
pub const DEFAULT_LEDGER_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CouplingError {
    #[error("invalid index range i={i}, j={j} for p={p}")]
    InvalidRange { i: usize, j: usize, p: usize },
    #[error("invalid constant {name}: {value}")]
    InvalidConstant { name: String, value: f64 },
    #[error("expected {expected} combiner constants, got {found}")]
    CombinerLength { expected: usize, found: usize },
}

/// Weighted DAG of Lipschitz couplings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceGraph {
    p: usize,
    /// Row `i` holds `K[i][0..i]`; row 0 is empty.
    k: Vec<Vec<f64>>,
    l: Vec<f64>,
}

impl DependenceGraph {
    /// All couplings zero, combiner constants as given (`p + 1` entries).
    pub fn new(p: usize, l: Vec<f64>) -> Result<Self, CouplingError> {
        if p == 0 {
            return Err(CouplingError::InvalidRange { i: 0, j: 0, p });
        }
        if l.len() != p + 1 {
            return Err(CouplingError::CombinerLength {
                expected: p + 1,
                found: l.len(),
            });
        }
        for (idx, &v) in l.iter().enumerate() {
            check_constant(&format!("L_{idx}"), v)?;
        }
        Ok(Self {
            p,
            k: (0..=p).map(|i| vec![0.0; i]).collect(),
            l,
        })
    }

    /// Combiner returning every solution: `L_0 = 0`, `L_i = 1`.
    pub fn picard_solver(p: usize) -> Result<Self, CouplingError> {
        let mut l = vec![1.0; p + 1];
        l[0] = 0.0;
        Self::new(p, l)
    }

    /// Combiner returning only the last solution: `L_p = 1`, others 0.
    pub fn weak_picard_solver(p: usize) -> Result<Self, CouplingError> {
        let mut l = vec![0.0; p + 1];
        l[p] = 1.0;
        Self::new(p, l)
    }

    /// Every coupling equal to `kappa` and every combiner constant `lambda`.
    pub fn uniform(p: usize, kappa: f64, lambda: f64) -> Result<Self, CouplingError> {
        let mut g = Self::new(p, vec![lambda; p + 1])?;
        for i in 1..=p {
            for j in 0..i {
                g.set_k(i, j, kappa)?;
            }
        }
        Ok(g)
    }

    /// Subdiagonal couplings only, `K[i][i-1] = chain[i-1]`.
    pub fn linear_chain(chain: &[f64], l: Vec<f64>) -> Result<Self, CouplingError> {
        let mut g = Self::new(chain.len(), l)?;
        for (idx, &v) in chain.iter().enumerate() {
            g.set_k(idx + 1, idx, v)?;
        }
        Ok(g)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self, i: usize, j: usize) -> f64 {
        assert!(j < i && i <= self.p, "K[{i}][{j}] out of range for p={}", self.p);
        self.k[i][j]
    }

    pub fn set_k(&mut self, i: usize, j: usize, value: f64) -> Result<(), CouplingError> {
        if !(j < i && i <= self.p) {
            return Err(CouplingError::InvalidRange { i: j, j: i, p: self.p });
        }
        check_constant(&format!("K_{i},{j}"), value)?;
        self.k[i][j] = value;
        Ok(())
    }

    pub fn l(&self, i: usize) -> f64 {
        self.l[i]
    }

    pub fn l_consts(&self) -> &[f64] {
        &self.l
    }

    /// Declared couplings `(i, j)` with nonzero `K`, row by row.
    pub fn couplings(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 1..=self.p {
            for j in 0..i {
                if self.k[i][j] > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn max_k(&self) -> f64 {
        self.k.iter().flatten().fold(0.0, |a, &b| a.max(b))
    }

    pub fn max_l(&self) -> f64 {
        self.l.iter().fold(0.0, |a, &b| a.max(b))
    }

    pub fn is_picard_solver(&self) -> bool {
        self.l[0] == 0.0 && self.l[1..].iter().all(|&v| v == 1.0)
    }

    pub fn is_weak_picard_solver(&self) -> bool {
        self.l[self.p] == 1.0 && self.l[..self.p].iter().all(|&v| v == 0.0)
    }

    /// `K[i][j] > 0` exactly when `j = i - 1`.
    pub fn is_linearly_structured(&self) -> bool {
        (1..=self.p).all(|i| (0..i).all(|j| (self.k[i][j] > 0.0) == (j + 1 == i)))
    }

    fn check_range(&self, i: usize, j: usize) -> Result<(), CouplingError> {
        if i > j || j > self.p {
            return Err(CouplingError::InvalidRange { i, j, p: self.p });
        }
        Ok(())
    }
}

fn check_constant(name: &str, value: f64) -> Result<(), CouplingError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(CouplingError::InvalidConstant {
            name: name.to_string(),
            value,
        })
    }
}

/// Strictly decreasing index sequence from `j` down to `i`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DecreasingPath {
    indices: Vec<usize>,
}

impl DecreasingPath {
    pub fn new(indices: Vec<usize>) -> Option<Self> {
        if indices.is_empty() || indices.windows(2).any(|w| w[0] <= w[1]) {
            return None;
        }
        Some(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn start(&self) -> usize {
        self.indices[0]
    }

    pub fn end(&self) -> usize {
        self.indices[self.indices.len() - 1]
    }
}

impl fmt::Display for DecreasingPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.indices.iter().map(|v| v.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Every strictly decreasing path from `j` to `i`, lexicographically ordered.
pub fn enumerate_paths(
    graph: &DependenceGraph,
    i: usize,
    j: usize,
) -> Result<Vec<DecreasingPath>, CouplingError> {
    if i >= j {
        return Err(CouplingError::InvalidRange { i, j, p: graph.p });
    }
    graph.check_range(i, j)?;
    let mut out = Vec::with_capacity(path_count(i, j)? as usize);
    let mut prefix = vec![j];
    extend_paths(i, &mut prefix, &mut out);
    Ok(out)
}

fn extend_paths(target: usize, prefix: &mut Vec<usize>, out: &mut Vec<DecreasingPath>) {
    let last = prefix[prefix.len() - 1];
    if last == target {
        out.push(DecreasingPath {
            indices: prefix.clone(),
        });
        return;
    }
    for next in target..last {
        prefix.push(next);
        extend_paths(target, prefix, out);
        prefix.pop();
    }
}

/// `|d_{i,j}|`: 1 when `i = j`, `2^(j-i-1)` otherwise.
pub fn path_count(i: usize, j: usize) -> Result<u64, CouplingError> {
    if j < i || j - i > 64 {
        return Err(CouplingError::InvalidRange { i, j, p: j });
    }
    Ok(if j == i { 1 } else { 1u64 << (j - i - 1) })
}

/// Product of `K` along consecutive pairs of the path.
pub fn path_weight(graph: &DependenceGraph, path: &DecreasingPath) -> f64 {
    path.indices
        .windows(2)
        .map(|w| graph.k(w[0], w[1]))
        .product()
}

/// `Σ_{σ ∈ d_{i,j}} ∏ K` for every `j ≥ i`, by the recurrence
/// `W(i,i) = 1`, `W(i,j) = Σ_{i≤m<j} K[j][m] W(i,m)`.
fn path_sums_from(graph: &DependenceGraph, i: usize) -> Vec<f64> {
    let mut w = vec![0.0; graph.p + 1];
    w[i] = 1.0;
    for j in i + 1..=graph.p {
        w[j] = (i..j).map(|m| graph.k[j][m] * w[m]).sum();
    }
    w
}

/// Summed path weight over `d_{i,j}`.
pub fn path_sum(graph: &DependenceGraph, i: usize, j: usize) -> Result<f64, CouplingError> {
    graph.check_range(i, j)?;
    Ok(path_sums_from(graph, i)[j])
}

/// Upper bound on the Lipschitz constant of the fixed-point map.
pub fn contraction_bound(graph: &DependenceGraph) -> f64 {
    let w = path_sums_from(graph, 0);
    graph.l[0] + (1..=graph.p).map(|j| graph.l[j] * w[j]).sum::<f64>()
}

/// Error amplification of a perturbation introduced in system `i`.
pub fn amplification_factor(graph: &DependenceGraph, i: usize) -> Result<f64, CouplingError> {
    if i == 0 || i > graph.p {
        return Err(CouplingError::InvalidRange { i, j: i, p: graph.p });
    }
    let w = path_sums_from(graph, i);
    Ok(graph.l[i] + (i + 1..=graph.p).map(|j| graph.l[j] * w[j]).sum::<f64>())
}

/// Bound on `‖G(x) − G_k(x)‖` when system `i` is replaced by a ROM.
pub fn delta_single(
    graph: &DependenceGraph,
    i: usize,
    inv_norm: f64,
    residual_norm: f64,
) -> Result<f64, CouplingError> {
    if residual_norm == 0.0 {
        return Ok(0.0);
    }
    Ok(amplification_factor(graph, i)? * inv_norm * residual_norm)
}

/// Sum of [`delta_single`] over the ROM set; residuals are taken at the
/// mixed parameters seen by each reduced system.
pub fn delta_multi(
    graph: &DependenceGraph,
    rom_set: &[usize],
    per_system: &[(f64, f64)],
) -> Result<f64, CouplingError> {
    assert_eq!(rom_set.len(), per_system.len(), "one (inv_norm, residual) per ROM system");
    rom_set
        .iter()
        .zip(per_system)
        .map(|(&i, &(m, r))| delta_single(graph, i, m, r))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConditionCheck {
    pub applicable: bool,
    pub satisfied: bool,
}

impl ConditionCheck {
    fn when(applicable: bool, satisfied: impl FnOnce() -> bool) -> Self {
        Self {
            applicable,
            satisfied: applicable && satisfied(),
        }
    }
}

/// The five sufficient contraction conditions, evaluated with
/// `κ = max K` and `λ = max L`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficientConditions {
    pub kappa: f64,
    pub lambda: f64,
    pub conditions: [ConditionCheck; 5],
}

impl SufficientConditions {
    pub fn any_satisfied(&self) -> bool {
        self.conditions.iter().any(|c| c.satisfied)
    }
}

pub fn sufficient_conditions(graph: &DependenceGraph) -> SufficientConditions {
    let p = graph.p as i32;
    let kappa = graph.max_k();
    let lambda = graph.max_l();
    let picard = graph.is_picard_solver();
    let linear = graph.is_linearly_structured();
    // Σ_{j=1..p} κ^j, the division-free form of (κ^{p+1} − κ)/(κ − 1)
    let geometric: f64 = (1..=p).map(|e| kappa.powi(e)).sum();
    let conditions = [
        ConditionCheck::when(true, || lambda * (kappa + 1.0).powi(p) < 1.0),
        ConditionCheck::when(picard, || kappa < 2f64.powf(1.0 / p as f64) - 1.0),
        ConditionCheck::when(linear, || lambda == 0.0 || geometric < (1.0 - lambda) / lambda),
        ConditionCheck::when(picard && linear, || {
            kappa < 1.0 && kappa.powi(p + 1) - 2.0 * kappa + 1.0 > 0.0
        }),
        ConditionCheck::when(graph.is_weak_picard_solver() && linear, || {
            (1..=graph.p).map(|i| graph.k[i][i - 1]).product::<f64>() < 1.0
        }),
    ];
    SufficientConditions {
        kappa,
        lambda,
        conditions,
    }
}

/// Sliding-window running maximum of nonnegative samples.
#[derive(Debug, Clone)]
struct RunningMax {
    window: usize,
    values: VecDeque<f64>,
}

impl RunningMax {
    fn new(window: usize) -> Self {
        Self {
            window,
            values: VecDeque::with_capacity(window + 1),
        }
    }

    fn push(&mut self, v: f64) {
        self.values.push_back(v);
        if self.values.len() > self.window {
            self.values.pop_front();
        }
    }

    fn get(&self) -> Option<f64> {
        self.values.iter().copied().reduce(f64::max)
    }
}

/// One exact application of the fixed-point map.
#[derive(Debug, Clone)]
pub struct ExactSample {
    pub x: Vector,
    pub gx: Vector,
    pub ys: Vec<Vector>,
    pub rhs_norms: Vec<f64>,
}

/// `num / den`, or `None` when the denominator is negligible.
fn guarded_ratio(num: f64, den: f64, scale: f64) -> Option<f64> {
    let floor = RATIO_GUARD * num.max(scale);
    if den <= floor || den == 0.0 {
        log::trace!("ratio skipped: {num:e} / {den:e}");
        return None;
    }
    Some(num / den)
}

/// Online estimates of the constants used by the error estimators.
///
/// Every estimate compares consecutive exact evaluations and keeps the
/// maximum over the last `window` samples.
#[derive(Debug, Clone)]
pub struct ConstantsLedger {
    window: usize,
    p: usize,
    couplings: Vec<(usize, usize)>,
    previous: Option<ExactSample>,
    /// `‖Δy_2‖` between the previous pair of samples.
    previous_dy2: Option<f64>,
    l: RunningMax,
    m: Vec<RunningMax>,
    k: Vec<RunningMax>,
    k12: RunningMax,
    l2prime: RunningMax,
}

impl ConstantsLedger {
    /// `structure` supplies `p` and which couplings to estimate.
    pub fn new(structure: &DependenceGraph, window: usize) -> Self {
        assert!(window >= 1, "ledger window must be positive");
        let couplings = structure.couplings();
        Self {
            window,
            p: structure.p,
            k: couplings.iter().map(|_| RunningMax::new(window)).collect(),
            couplings,
            previous: None,
            previous_dy2: None,
            l: RunningMax::new(window),
            m: (0..structure.p).map(|_| RunningMax::new(window)).collect(),
            k12: RunningMax::new(window),
            l2prime: RunningMax::new(window),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Fold one exact evaluation into the estimates.
    pub fn record(&mut self, sample: ExactSample) {
        assert_eq!(sample.ys.len(), self.p, "one solution per system");
        for (i, (y, &f)) in sample.ys.iter().zip(&sample.rhs_norms).enumerate() {
            let ny = y.norm2();
            if let Some(r) = guarded_ratio(ny, f, 0.0) {
                self.m[i].push(r);
            }
        }
        if let Some(prev) = self.previous.take() {
            let dx = sample.x.distance(&prev.x);
            let dgx = sample.gx.distance(&prev.gx);
            let x_scale = sample.x.norm2().max(prev.x.norm2());
            if let Some(r) = guarded_ratio(dgx, dx, x_scale) {
                self.l.push(r);
            }
            let dy: Vec<f64> = sample
                .ys
                .iter()
                .zip(&prev.ys)
                .map(|(a, b)| a.distance(b))
                .collect();
            let y_scale: Vec<f64> = sample
                .ys
                .iter()
                .zip(&prev.ys)
                .map(|(a, b)| a.norm2().max(b.norm2()))
                .collect();
            for (slot, &(i, j)) in self.couplings.iter().enumerate() {
                let (den, scale) = if j == 0 {
                    (dx, x_scale)
                } else {
                    (dy[j - 1], y_scale[j - 1])
                };
                if let Some(r) = guarded_ratio(dy[i - 1], den, scale) {
                    self.k[slot].push(r);
                }
            }
            if self.p == 2 {
                if let Some(old_dy2) = self.previous_dy2 {
                    if let Some(l2) = guarded_ratio(dy[1], old_dy2, y_scale[1]) {
                        self.l2prime.push(l2);
                        if let Some(r) = guarded_ratio(dy[0], old_dy2, y_scale[1]) {
                            self.k12.push(l2 * r);
                        }
                    }
                }
                self.previous_dy2 = Some(dy[1]);
            }
        }
        self.previous = Some(sample);
    }

    pub fn l_est(&self) -> Option<f64> {
        self.l.get()
    }

    /// Uniform inverse-norm bound, the maximum over systems.
    pub fn m_est(&self) -> Option<f64> {
        self.m.iter().filter_map(|m| m.get()).reduce(f64::max)
    }

    pub fn m_est_system(&self, i: usize) -> Option<f64> {
        self.m.get(i.checked_sub(1)?)?.get()
    }

    pub fn k_est(&self, i: usize, j: usize) -> Option<f64> {
        let slot = self.couplings.iter().position(|&c| c == (i, j))?;
        self.k[slot].get()
    }

    pub fn k21_est(&self) -> Option<f64> {
        self.k_est(2, 1)
    }

    pub fn k12_est(&self) -> Option<f64> {
        self.k12.get()
    }

    pub fn l2prime_est(&self) -> Option<f64> {
        self.l2prime.get()
    }

    /// Copy of `template` with every declared coupling replaced by its
    /// estimate; `None` while any of them is still unknown.
    pub fn estimated_graph(&self, template: &DependenceGraph) -> Option<DependenceGraph> {
        let mut g = template.clone();
        for &(i, j) in &self.couplings {
            g.k[i][j] = self.k_est(i, j)?;
        }
        Some(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p2(k10: f64, k20: f64, k21: f64) -> DependenceGraph {
        let mut g = DependenceGraph::picard_solver(2).unwrap();
        g.set_k(1, 0, k10).unwrap();
        g.set_k(2, 0, k20).unwrap();
        g.set_k(2, 1, k21).unwrap();
        g
    }

    fn paths_as_vecs(g: &DependenceGraph, i: usize, j: usize) -> Vec<Vec<usize>> {
        enumerate_paths(g, i, j)
            .unwrap()
            .into_iter()
            .map(|p| p.indices().to_vec())
            .collect()
    }

    #[test]
    fn small_path_sets() {
        let g = DependenceGraph::uniform(4, 0.5, 1.0).unwrap();
        assert_eq!(paths_as_vecs(&g, 0, 1), vec![vec![1, 0]]);
        assert_eq!(paths_as_vecs(&g, 0, 2), vec![vec![2, 0], vec![2, 1, 0]]);
        assert_eq!(enumerate_paths(&g, 0, 4).unwrap().len(), 8);
    }

    #[test]
    fn paths_are_sorted_and_distinct() {
        let g = DependenceGraph::uniform(6, 0.5, 1.0).unwrap();
        let paths = enumerate_paths(&g, 1, 6).unwrap();
        assert!(paths.windows(2).all(|w| w[0] < w[1]));
        assert!(paths.iter().all(|p| p.start() == 6 && p.end() == 1));
    }

    #[test]
    fn invalid_ranges() {
        let g = DependenceGraph::uniform(3, 0.5, 1.0).unwrap();
        assert!(enumerate_paths(&g, 2, 2).is_err());
        assert!(enumerate_paths(&g, 0, 4).is_err());
        assert!(path_count(3, 2).is_err());
        assert!(amplification_factor(&g, 0).is_err());
        assert!(amplification_factor(&g, 4).is_err());
    }

    #[test]
    fn counts() {
        assert_eq!(path_count(3, 3).unwrap(), 1);
        assert_eq!(path_count(0, 5).unwrap(), 16);
    }

    #[test]
    fn weights() {
        let g = p2(0.3, 0.2, 0.4);
        let p = DecreasingPath::new(vec![2, 1, 0]).unwrap();
        assert!((path_weight(&g, &p) - 0.12).abs() < 1e-15);
        let p = DecreasingPath::new(vec![1, 0]).unwrap();
        assert_eq!(path_weight(&g, &p), 0.3);
        let p = DecreasingPath::new(vec![2]).unwrap();
        assert_eq!(path_weight(&g, &p), 1.0);
        assert!(DecreasingPath::new(vec![1, 2]).is_none());

        let u = DependenceGraph::uniform(5, 0.7, 1.0).unwrap();
        let p = DecreasingPath::new(vec![5, 3, 2, 0]).unwrap();
        assert!((path_weight(&u, &p) - 0.7f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn contraction_bound_examples() {
        assert!((contraction_bound(&p2(0.3, 0.2, 0.4)) - 0.62).abs() < 1e-14);
        let g = DependenceGraph::new(3, vec![0.25, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(contraction_bound(&g), 0.25);
        let u = DependenceGraph::uniform(4, 0.3, 0.2).unwrap();
        assert!((contraction_bound(&u) - 0.2 * 1.3f64.powi(4)).abs() < 1e-14);
    }

    #[test]
    fn amplification_special_cases() {
        let mut g1 = DependenceGraph::new(1, vec![0.0, 0.7]).unwrap();
        g1.set_k(1, 0, 0.5).unwrap();
        assert_eq!(amplification_factor(&g1, 1).unwrap(), 0.7);

        let mut g = DependenceGraph::new(2, vec![0.0, 0.8, 0.6]).unwrap();
        g.set_k(2, 1, 0.4).unwrap();
        assert!((amplification_factor(&g, 1).unwrap() - (0.8 + 0.6 * 0.4)).abs() < 1e-15);
        assert_eq!(amplification_factor(&g, 2).unwrap(), 0.6);
    }

    #[test]
    fn delta_examples() {
        let g = p2(0.3, 0.2, 0.4);
        assert_eq!(delta_single(&g, 1, 2.0, 0.0).unwrap(), 0.0);
        assert!((delta_single(&g, 1, 2.0, 0.1).unwrap() - 0.28).abs() < 1e-15);
        assert_eq!(
            delta_multi(&g, &[1], &[(2.0, 0.1)]).unwrap(),
            delta_single(&g, 1, 2.0, 0.1).unwrap()
        );
        let m = 3.0;
        let both = delta_multi(&g, &[1, 2], &[(m, 0.1), (m, 0.05)]).unwrap();
        assert!((both - ((1.0 + 0.4) * m * 0.1 + m * 0.05)).abs() < 1e-14);
        assert_eq!(delta_multi(&g, &[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn golden_ratio_condition() {
        let at = |kappa: f64| {
            let g = DependenceGraph::linear_chain(&[kappa, kappa], vec![0.0, 1.0, 1.0]).unwrap();
            sufficient_conditions(&g).conditions[3]
        };
        assert_eq!(at(0.6), ConditionCheck { applicable: true, satisfied: true });
        assert!(at(0.45).satisfied);
        assert!(at(0.61).satisfied);
        assert!(!at(0.63).satisfied);
        assert!(at(0.63).applicable);
    }

    #[test]
    fn weak_picard_product_condition() {
        let g = DependenceGraph::linear_chain(&[1.5, 0.6], vec![0.0, 0.0, 1.0]).unwrap();
        let report = sufficient_conditions(&g);
        assert!(report.conditions[4].applicable && report.conditions[4].satisfied);
        assert!(!report.conditions[1].applicable);
        assert!(!report.conditions[3].applicable);
    }

    #[test]
    fn premise_failure_is_not_applicable() {
        let report = sufficient_conditions(&p2(0.1, 0.1, 0.1));
        assert!(!report.conditions[2].applicable);
        assert!(!report.conditions[3].applicable);
        assert!(!report.conditions[4].applicable);
        assert!(report.conditions[1].applicable);
    }

    #[test]
    fn ledger_geometric_sequence() {
        let g = DependenceGraph::picard_solver(1).unwrap();
        let mut ledger = ConstantsLedger::new(&g, 10);
        for k in 0..30 {
            let x = 0.9f64.powi(k);
            ledger.record(ExactSample {
                x: Vector::new(vec![x]).unwrap(),
                gx: Vector::new(vec![0.9 * x]).unwrap(),
                ys: vec![Vector::new(vec![0.9 * x]).unwrap()],
                rhs_norms: vec![0.9 * x],
            });
        }
        assert!((ledger.l_est().unwrap() - 0.9).abs() < 1e-12);
        assert!((ledger.m_est().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ledger_k21_from_proportional_solutions() {
        let mut g = DependenceGraph::picard_solver(2).unwrap();
        g.set_k(2, 1, 1.0).unwrap();
        let mut ledger = ConstantsLedger::new(&g, 10);
        assert!(ledger.k21_est().is_none());
        for k in 0..5 {
            let y1 = Vector::from_fn(3, |i| (k * 3 + i) as f64 * 0.5);
            let y2 = Vector::from_fn(3, |i| 2.0 * y1[i]);
            ledger.record(ExactSample {
                x: Vector::from_fn(6, |i| (k + i) as f64),
                gx: Vector::concat([&y1, &y2]),
                ys: vec![y1, y2],
                rhs_norms: vec![1.0, 1.0],
            });
        }
        assert!((ledger.k21_est().unwrap() - 2.0).abs() < 1e-12);
        assert!(ledger.estimated_graph(&g).is_some());
        assert!(ledger.k12_est().is_some());
    }

    #[test]
    fn ledger_skips_stagnation() {
        let g = DependenceGraph::picard_solver(1).unwrap();
        let mut ledger = ConstantsLedger::new(&g, 4);
        let s = ExactSample {
            x: Vector::new(vec![1.0]).unwrap(),
            gx: Vector::new(vec![1.0]).unwrap(),
            ys: vec![Vector::new(vec![1.0]).unwrap()],
            rhs_norms: vec![0.0],
        };
        ledger.record(s.clone());
        ledger.record(s);
        assert!(ledger.l_est().is_none());
        assert!(ledger.m_est().is_none());
    }

    fn brute_path_sum(g: &DependenceGraph, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        enumerate_paths(g, i, j).unwrap().iter().map(|p| path_weight(g, p)).sum()
    }

    proptest! {
        #[test]
        fn recurrence_matches_enumeration(
            p in 1usize..=6,
            seed in proptest::collection::vec(0.0f64..1.5, 21),
            ls in proptest::collection::vec(0.0f64..1.0, 7),
        ) {
            let mut g = DependenceGraph::new(p, ls[..=p].to_vec()).unwrap();
            let mut idx = 0;
            for i in 1..=p {
                for j in 0..i {
                    g.set_k(i, j, seed[idx]).unwrap();
                    idx += 1;
                }
            }
            let direct: f64 = g.l(0) + (1..=p).map(|j| g.l(j) * brute_path_sum(&g, 0, j)).sum::<f64>();
            let fast = contraction_bound(&g);
            prop_assert!((direct - fast).abs() <= 1e-12 * direct.max(1.0));
            for i in 1..=p {
                let direct: f64 = g.l(i) + (i + 1..=p).map(|j| g.l(j) * brute_path_sum(&g, i, j)).sum::<f64>();
                let fast = amplification_factor(&g, i).unwrap();
                prop_assert!((direct - fast).abs() <= 1e-12 * direct.max(1.0));
            }
            prop_assert_eq!(amplification_factor(&g, p).unwrap(), g.l(p));
        }

        #[test]
        fn linear_chain_has_single_path(chain in proptest::collection::vec(0.01f64..2.0, 1..7)) {
            let p = chain.len();
            let g = DependenceGraph::linear_chain(&chain, vec![1.0; p + 1]).unwrap();
            prop_assert!(g.is_linearly_structured());
            for j in 1..=p {
                let product: f64 = chain[..j].iter().product();
                prop_assert_eq!(path_sum(&g, 0, j).unwrap(), product);
            }
        }

        #[test]
        fn ledger_estimates_nonnegative_finite(
            xs in proptest::collection::vec(-10.0f64..10.0, 4..20),
        ) {
            let g = DependenceGraph::picard_solver(1).unwrap();
            let mut ledger = ConstantsLedger::new(&g, 3);
            for w in xs.windows(2) {
                ledger.record(ExactSample {
                    x: Vector::new(vec![w[0]]).unwrap(),
                    gx: Vector::new(vec![w[1]]).unwrap(),
                    ys: vec![Vector::new(vec![w[1]]).unwrap()],
                    rhs_norms: vec![1.0],
                });
                if let Some(l) = ledger.l_est() {
                    prop_assert!(l.is_finite() && l >= 0.0);
                }
            }
        }
    }
}
