//! The smooth operator: exact solve, fixed-point iteration, gradients, and
//! the energy-decrease bound verifier.
//!
//! The operator maps a node signal `U` to the minimizer of
//! `alpha * dirichlet_energy(G) + (1 - alpha) * ||U - G||_F^2`. The closed
//! form is `(I + gamma L)^{-1} U` with `gamma = alpha / (1 - alpha)`. The
//! iterative scheme
//! `G(0) = U; G(t) = alpha (I - L) G(t-1) + (1 - alpha) U`
//! converges to it when `L` is the normalized Laplacian and `alpha < 1`,
//! since the spectral radius of `alpha (I - L)` is then at most `alpha`.
//!
//! The operator never increases the Dirichlet energy; the contraction factor
//! is `lambda*_gamma = max over nonzero eigenvalues of (1 + gamma lambda)^-2`:
//!
//! ```
//! use smooth_mil::graph::{build_grid_graph, build_laplacian, LaplacianKind};
//! use smooth_mil::numerics::DenseMatrix;
//! use smooth_mil::smoothing::verify_energy_bound;
//!
//! let g = build_grid_graph(3, 3).unwrap();
//! let l = build_laplacian(&g, LaplacianKind::Normalized);
//! let u = DenseMatrix::from_vec(9, 1, (0..9).map(|i| (i as f64).sin()).collect());
//! let (lhs, rhs, holds) = verify_energy_bound(&u, &g, &l, 2.0).unwrap();
//! assert!(holds && lhs <= rhs);
//! ```

use crate::dirichlet::energy_value;
use crate::error::{invalid, Error, Result};
use crate::graph::{lambda_star, BagGraph, Laplacian, LaplacianKind};
use crate::numerics::{cg_solve, DenseMatrix};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoothMode {
    #[default]
    Iterative,
    Exact,
}

/// Configuration of the smooth operator inside a model.
///
/// `alpha` is kept in `(0, 1)` by a logistic reparameterization of the
/// unconstrained `alpha_param` (`rho = 0` gives `alpha = 0.5`). The exact
/// value `alpha = 0` is representable only through `use_identity`, which
/// disables the operator entirely and recovers the plain baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothConfig {
    /// Unconstrained parameter; `alpha = logistic(alpha_param)`.
    pub alpha_param: f64,
    pub trainable: bool,
    pub t_steps: usize,
    pub mode: SmoothMode,
    pub laplacian_kind: LaplacianKind,
    /// Exactly disables the operator (identity map), the `alpha = 0` baseline.
    pub use_identity: bool,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig {
            alpha_param: 0.0,
            trainable: true,
            t_steps: 10,
            mode: SmoothMode::Iterative,
            laplacian_kind: LaplacianKind::Normalized,
            use_identity: false,
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SmoothConfig {
    /// `logistic(alpha_param)`, clamped away from 1 so that
    /// `gamma = alpha / (1 - alpha)` stays finite even for extreme
    /// parameter values.
    pub fn alpha(&self) -> f64 {
        logistic(self.alpha_param).min(1.0 - 1e-12)
    }

    pub fn gamma(&self) -> f64 {
        let a = self.alpha();
        a / (1.0 - a)
    }
}

/// Exact operator output `(I + gamma L)^{-1} U` via per-column CG at
/// tolerance 1e-10. Non-convergence is an error here: exact mode is used by
/// the verification suites, which must not silently accept sloppy solves.
pub fn smooth_exact(u: &DenseMatrix, l: &Laplacian, gamma: f64) -> Result<DenseMatrix> {
    if gamma < 0.0 {
        return Err(invalid("gamma must be nonnegative"));
    }
    if u.rows() != l.n_nodes() {
        return Err(invalid("signal rows must equal node count"));
    }
    if gamma == 0.0 {
        return Ok(u.clone());
    }
    let max_iter = 4 * l.n_nodes() + 50;
    let (x, report) = cg_solve(l.matrix(), gamma, u, 1e-10, max_iter)?;
    if !report.converged {
        return Err(Error::NoConvergence {
            iterations: report.iterations,
            residual: report.final_residual,
        });
    }
    Ok(x)
}

fn check_iterative_preconditions(
    l: &Laplacian,
    alpha: f64,
    allow_unnormalized: bool,
) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must be in [0, 1), got {alpha}")));
    }
    if l.kind() != LaplacianKind::Normalized && !allow_unnormalized {
        return Err(invalid(
            "iterative smoothing requires the normalized Laplacian; \
             pass allow_unnormalized to override",
        ));
    }
    Ok(())
}

fn iterate_step(u: &DenseMatrix, g_prev: &DenseMatrix, l: &Laplacian, alpha: f64) -> DenseMatrix {
    // G = alpha * (G_prev - L G_prev) + (1 - alpha) * U
    let lg = l.matrix().matmul_dense(g_prev);
    let mut out = DenseMatrix::zeros(u.rows(), u.cols());
    let (ov, gv, lv, uv) = (
        out.values_mut(),
        g_prev.values(),
        lg.values(),
        u.values(),
    );
    for i in 0..ov.len() {
        ov[i] = alpha * (gv[i] - lv[i]) + (1.0 - alpha) * uv[i];
    }
    out
}

/// `t` applications of the fixed-point recursion; `t = 0` returns `U`.
pub fn smooth_iterative(
    u: &DenseMatrix,
    l: &Laplacian,
    alpha: f64,
    t: usize,
) -> Result<DenseMatrix> {
    smooth_iterative_with(u, l, alpha, t, false)
}

pub fn smooth_iterative_with(
    u: &DenseMatrix,
    l: &Laplacian,
    alpha: f64,
    t: usize,
    allow_unnormalized: bool,
) -> Result<DenseMatrix> {
    check_iterative_preconditions(l, alpha, allow_unnormalized)?;
    if u.rows() != l.n_nodes() {
        return Err(invalid("signal rows must equal node count"));
    }
    let mut g = u.clone();
    for _ in 0..t {
        g = iterate_step(u, &g, l, alpha);
    }
    Ok(g)
}

/// How the backward pass obtains intermediate iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardStrategy {
    /// Store all `t` forward states.
    #[default]
    StoreAll,
    /// Keep only `U` and recompute states on the fly (one extra forward
    /// sweep per backward); gradients are identical to StoreAll.
    Rematerialize,
}

/// Gradients of the unrolled `t`-step recursion with respect to the input
/// signal and `alpha`.
pub fn smooth_backward(
    u: &DenseMatrix,
    l: &Laplacian,
    alpha: f64,
    t: usize,
    grad_out: &DenseMatrix,
) -> Result<(DenseMatrix, f64)> {
    smooth_backward_with(u, l, alpha, t, grad_out, BackwardStrategy::StoreAll, false)
}

pub fn smooth_backward_with(
    u: &DenseMatrix,
    l: &Laplacian,
    alpha: f64,
    t: usize,
    grad_out: &DenseMatrix,
    strategy: BackwardStrategy,
    allow_unnormalized: bool,
) -> Result<(DenseMatrix, f64)> {
    check_iterative_preconditions(l, alpha, allow_unnormalized)?;
    if grad_out.rows() != u.rows() || grad_out.cols() != u.cols() {
        return Err(invalid("grad_out shape must match the signal"));
    }
    if t == 0 {
        return Ok((grad_out.clone(), 0.0));
    }

    // States G(0..t-1), either stored during one forward sweep or recomputed
    // from U on demand. Both routes perform the same float operations in the
    // same order, so the gradients agree bitwise.
    let stored: Option<Vec<DenseMatrix>> = match strategy {
        BackwardStrategy::StoreAll => {
            let mut states = Vec::with_capacity(t);
            let mut g = u.clone();
            states.push(g.clone());
            for _ in 1..t {
                g = iterate_step(u, &g, l, alpha);
                states.push(g.clone());
            }
            Some(states)
        }
        BackwardStrategy::Rematerialize => None,
    };
    let state_at = |s: usize| -> DenseMatrix {
        match &stored {
            Some(states) => states[s].clone(),
            None => {
                let mut g = u.clone();
                for _ in 0..s {
                    g = iterate_step(u, &g, l, alpha);
                }
                g
            }
        }
    };

    // Reverse sweep. With M = I - L (symmetric):
    //   G(s) = alpha * M G(s-1) + (1 - alpha) * U
    //   dG(s)/dalpha = M G(s-1) - U
    //   dG(s)/dG(s-1) = alpha * M
    let mut g_bar = grad_out.clone();
    let mut grad_u = DenseMatrix::zeros(u.rows(), u.cols());
    let mut grad_alpha = 0.0;
    for s in (1..=t).rev() {
        let prev = &state_at(s - 1);
        let m_prev = {
            let lp = l.matrix().matmul_dense(prev);
            prev.sub(&lp)
        };
        grad_alpha += g_bar.dot(&m_prev.sub(u));
        // grad_u += (1 - alpha) * g_bar
        for (o, &g) in grad_u.values_mut().iter_mut().zip(g_bar.values()) {
            *o += (1.0 - alpha) * g;
        }
        // g_bar = alpha * M g_bar
        let lg = l.matrix().matmul_dense(&g_bar);
        g_bar = g_bar.sub(&lg).scale(alpha);
    }
    // G(0) = U
    grad_u = grad_u.add(&g_bar);
    Ok((grad_u, grad_alpha))
}

/// Checks the energy-decrease bound `E(Sm(U)) <= lambda*_gamma * E(U)` for
/// the exact operator, returning the witness values.
pub fn verify_energy_bound(
    u: &DenseMatrix,
    g: &BagGraph,
    l: &Laplacian,
    gamma: f64,
) -> Result<(f64, f64, bool)> {
    if g.n_edges() == 0 {
        return Err(Error::DegenerateGraph("bound requires at least one edge".into()));
    }
    let smoothed = smooth_exact(u, l, gamma)?;
    let lhs = energy_value(&smoothed, g, l.kind());
    let rhs = lambda_star(l, gamma)? * energy_value(u, g, l.kind());
    let holds = lhs <= rhs + 1e-9 * rhs.max(1.0);
    Ok((lhs, rhs, holds))
}
