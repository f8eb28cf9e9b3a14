//! On-the-fly reduced-order acceleration of fixed-point iterations.
//!
//! A fixed-point map `G(x) = φ(x, y₁, …, y_p)` depends on the solutions of
//! `p` linear systems solved in sequence. During the iteration, snapshots
//! of the full-order solutions train POD reduced models; inexact steps use
//! the reduced models whenever the propagated error bound stays below the
//! solver tolerance, and the models are refined otherwise.
//!
//! Modules:
//! - [`numerics`]: dense vectors, matrices, LU and SVD.
//! - [`pod_rom`]: snapshot windows, POD bases, projected solves, residual bounds.
//! - [`coupling`]: dependence graphs, path sums, contraction and error bounds,
//!   online constant estimation.
//! - [`driver`]: exact, relaxed and inexact steps and the accelerated loop.
//! - [`problems`]: finite-difference demo problems.
//! - [`harness`]: configuration, experiment runners, statistics and output.

pub mod coupling;
pub mod driver;
pub mod harness;
pub mod numerics;
pub mod pod_rom;
pub mod problems;
