//! The reaction-diffusion fixed point against a damped Newton solve of the
//! monolithic discrete system.

use picard_rom::driver::{accelerated_run, CoupledProblem, RunConfig};
use picard_rom::numerics::Vector;
use picard_rom::problems::{assemble_rd_system, ReactionDiffusionPair, ReactionTerm};

/// Banded matrix with `kl` sub- and `ku` super-diagonals, room for the
/// fill-in of partial pivoting.
struct Banded {
    n: usize,
    kl: usize,
    ku: usize,
    /// `rows[i]` holds columns `i - kl ..= i + kl + ku`.
    rows: Vec<Vec<f64>>,
}

impl Banded {
    fn new(n: usize, kl: usize, ku: usize) -> Self {
        Self {
            n,
            kl,
            ku,
            rows: vec![vec![0.0; 2 * kl + ku + 1]; n],
        }
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        assert!(j + self.kl >= i && j <= i + self.kl + self.ku, "({i},{j}) outside band");
        j + self.kl - i
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.rows[i][s] += v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.kl + self.ku {
            0.0
        } else {
            self.rows[i][self.slot(i, j)]
        }
    }

    /// Gaussian elimination with row pivoting; consumes the matrix.
    fn solve(mut self, mut b: Vec<f64>) -> Vec<f64> {
        let n = self.n;
        let width = self.kl + self.ku;
        for k in 0..n {
            let last = (k + self.kl).min(n - 1);
            let p = (k..=last)
                .max_by(|&a, &c| self.get(a, k).abs().total_cmp(&self.get(c, k).abs()))
                .unwrap();
            if p != k {
                // rows k and p; p's band starts further right, re-base both
                let cols: Vec<usize> = (k..=(k + width).min(n - 1)).collect();
                let rk: Vec<f64> = cols.iter().map(|&j| self.get(k, j)).collect();
                let rp: Vec<f64> = cols.iter().map(|&j| self.get(p, j)).collect();
                for (idx, &j) in cols.iter().enumerate() {
                    let (sk, sp) = (self.slot(k, j), self.slot(p, j));
                    self.rows[k][sk] = rp[idx];
                    self.rows[p][sp] = rk[idx];
                }
                b.swap(k, p);
            }
            let pivot = self.get(k, k);
            assert!(pivot.abs() > 1e-300, "singular Newton matrix");
            for i in k + 1..=last {
                let factor = self.get(i, k) / pivot;
                if factor == 0.0 {
                    continue;
                }
                for j in k..=(k + width).min(n - 1) {
                    let v = self.get(k, j);
                    if v != 0.0 {
                        self.add(i, j, -factor * v);
                    }
                }
                b[i] -= factor * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..=(k + width).min(n - 1) {
                s -= self.get(k, j) * x[j];
            }
            x[k] = s / self.get(k, k);
        }
        x
    }
}

fn sech2(y: f64) -> f64 {
    1.0 - y.tanh().powi(2)
}

/// Nonlinear part of `f`, excluding the source: value and partials.
fn reaction(r: &ReactionTerm, y1: f64, y2: f64) -> (f64, f64, f64) {
    (
        r.lin[0] * y1 + r.lin[1] * y2 + r.tanh[0] * y1.tanh() + r.tanh[1] * y2.tanh(),
        r.lin[0] + r.tanh[0] * sech2(y1),
        r.lin[1] + r.tanh[1] * sech2(y2),
    )
}

/// Solves `A_i y_i = F_i(y_1, y_2)`, i = 1, 2, with unknowns interleaved
/// per node. Returns `(y1, y2)` concatenated.
fn newton(pair: &ReactionDiffusionPair) -> Vec<f64> {
    let n = pair.grid.len();
    let zeros = vec![0.0; n];
    // matrices do not depend on the fields; sources are f at y = 0
    let (a1, s1) = assemble_rd_system(pair, 1, &zeros, &zeros).unwrap();
    let (a2, s2) = assemble_rd_system(pair, 2, &zeros, &zeros).unwrap();
    let area = pair.grid.hx * pair.grid.hy;
    let band = 2 * pair.grid.nx + 1;

    let residual = |y: &[f64]| -> Vec<f64> {
        let (y1, y2) = y.split_at(n);
        let ay1 = a1.matvec(&Vector::new(y1.to_vec()).unwrap());
        let ay2 = a2.matvec(&Vector::new(y2.to_vec()).unwrap());
        let mut r = vec![0.0; 2 * n];
        for k in 0..n {
            r[2 * k] = ay1[k] - s1[k] - area * reaction(&pair.f1, y1[k], y2[k]).0;
            r[2 * k + 1] = ay2[k] - s2[k] - area * reaction(&pair.f2, y1[k], y2[k]).0;
        }
        r
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut y = vec![0.0; 2 * n];
    let mut r = residual(&y);
    for _ in 0..50 {
        if norm(&r) < 1e-13 {
            break;
        }
        let mut jac = Banded::new(2 * n, band, band);
        let (y1, y2) = y.split_at(n);
        for k in 0..n {
            for m in 0..n {
                let (v1, v2) = (a1.get(k, m), a2.get(k, m));
                if v1 != 0.0 {
                    jac.add(2 * k, 2 * m, v1);
                }
                if v2 != 0.0 {
                    jac.add(2 * k + 1, 2 * m + 1, v2);
                }
            }
            let (_, d11, d12) = reaction(&pair.f1, y1[k], y2[k]);
            let (_, d21, d22) = reaction(&pair.f2, y1[k], y2[k]);
            jac.add(2 * k, 2 * k, -area * d11);
            jac.add(2 * k, 2 * k + 1, -area * d12);
            jac.add(2 * k + 1, 2 * k, -area * d21);
            jac.add(2 * k + 1, 2 * k + 1, -area * d22);
        }
        let step = jac.solve(r.iter().map(|v| -v).collect());
        // step is interleaved, y is blocked
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = (0..2 * n)
                .map(|idx| {
                    let (block, k) = (idx / n, idx % n);
                    y[idx] + t * step[2 * k + block]
                })
                .collect();
            let rt = residual(&trial);
            if norm(&rt) < norm(&r) || t < 1e-4 {
                y = trial;
                r = rt;
                break;
            }
            t *= 0.5;
        }
    }
    assert!(norm(&r) < 1e-11, "Newton did not converge: residual {:e}", norm(&r));
    y
}

#[test]
fn rd_fixed_point_matches_newton() {
    let pair = ReactionDiffusionPair::demo();
    let oracle = newton(&pair);
    assert!(oracle.iter().map(|v| v.abs()).fold(0.0, f64::max) > 1e-2, "trivial solution");
    let eps = 1e-8;
    for rom_set in [vec![], vec![1], vec![1, 2]] {
        let config = RunConfig {
            eps,
            rom_set: rom_set.clone(),
            ..RunConfig::default()
        };
        let report = accelerated_run(&pair, &config).unwrap();
        assert!(report.converged);
        let gap = report.final_state.distance(&Vector::new(oracle.clone()).unwrap());
        assert!(gap <= 10.0 * eps, "ROM set {rom_set:?}: distance to Newton solution {gap:e}");
    }
    assert_eq!(pair.state_dim(), oracle.len());
}
