//! Dirichlet energy of signals on bag graphs.
//!
//! For a signal `U` (one row per node) the energy is
//! `1/2 * sum_ij A_ij * ||u_i - u_j||^2 = trace(U^T L U)`. The pairwise form
//! streams over edges and is canonical; the quadratic form is computed as a
//! cross-check at desk scale. For the normalized Laplacian the pairwise form
//! uses the degree-rescaled rows `u_i / sqrt(d_i)`, keeping both forms equal.
//!
//! The energy is zero exactly for signals constant on each connected
//! component (in the unnormalized convention):
//!
//! ```
//! use smooth_mil::dirichlet::energy_value;
//! use smooth_mil::graph::{build_chain_graph, LaplacianKind};
//! use smooth_mil::numerics::DenseMatrix;
//!
//! let g = build_chain_graph(4).unwrap();
//! let c = DenseMatrix::from_vec(4, 1, vec![2.5; 4]);
//! assert_eq!(energy_value(&c, &g, LaplacianKind::Unnormalized), 0.0);
//! ```

use crate::error::{invalid, Result};
use crate::graph::{BagGraph, Laplacian, LaplacianKind};
use crate::numerics::{largest_eigenvalue, DenseMatrix};
use serde::{Deserialize, Serialize};

pub const DENSE_CHECK_CAP: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyForm {
    Pairwise,
    Quadratic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    pub energy: f64,
    /// Energy of the per-column unit-variance rescaling of the signal,
    /// divided by `lambda_max * n * d` (the largest energy a unit-variance
    /// signal can attain). Scale- and translation-invariant; zero-variance
    /// columns contribute 0.
    pub normalized_energy: f64,
    pub form_used: EnergyForm,
}

/// Pairwise-form energy only; no report, no cross-check.
pub fn energy_value(u: &DenseMatrix, g: &BagGraph, kind: LaplacianKind) -> f64 {
    let d = u.cols();
    let deg = g.degree();
    let mut acc = 0.0;
    match kind {
        LaplacianKind::Unnormalized => {
            for &(i, j, w) in g.edges() {
                let (ri, rj) = (u.row(i), u.row(j));
                let mut s = 0.0;
                for k in 0..d {
                    let diff = ri[k] - rj[k];
                    s += diff * diff;
                }
                acc += w * s;
            }
        }
        LaplacianKind::Normalized => {
            for &(i, j, w) in g.edges() {
                let si = if deg[i] > 0.0 { 1.0 / deg[i].sqrt() } else { 0.0 };
                let sj = if deg[j] > 0.0 { 1.0 / deg[j].sqrt() } else { 0.0 };
                let (ri, rj) = (u.row(i), u.row(j));
                let mut s = 0.0;
                for k in 0..d {
                    let diff = ri[k] * si - rj[k] * sj;
                    s += diff * diff;
                }
                acc += w * s;
            }
        }
    }
    acc
}

fn quadratic_energy(u: &DenseMatrix, l: &Laplacian) -> f64 {
    let lu = l.matrix().matmul_dense(u);
    u.dot(&lu)
}

/// Computes the Dirichlet energy of `u` on the graph `g` with the metric
/// induced by `l`. Returns the pairwise-form value; the quadratic form is
/// verified against it below the dense cap.
pub fn dirichlet_energy(u: &DenseMatrix, g: &BagGraph, l: &Laplacian) -> Result<EnergyReport> {
    if u.rows() != g.n_nodes() || l.n_nodes() != g.n_nodes() {
        return Err(invalid(format!(
            "signal has {} rows but the graph has {} nodes",
            u.rows(),
            g.n_nodes()
        )));
    }
    let energy = energy_value(u, g, l.kind());
    if g.n_nodes() <= DENSE_CHECK_CAP {
        let quad = quadratic_energy(u, l);
        debug_assert!(
            (energy - quad).abs() <= 1e-9 * energy.abs().max(1.0),
            "pairwise energy {energy} disagrees with quadratic form {quad}"
        );
    }
    Ok(EnergyReport {
        energy,
        normalized_energy: normalized_energy(u, g, l),
        form_used: EnergyForm::Pairwise,
    })
}

/// The normalized diagnostic reported by the training harness. See
/// [`EnergyReport::normalized_energy`] for the convention.
pub fn normalized_energy(u: &DenseMatrix, g: &BagGraph, l: &Laplacian) -> f64 {
    let n = u.rows();
    let d = u.cols();
    if n < 2 {
        return 0.0;
    }
    let mut scaled = DenseMatrix::zeros(n, d);
    let mut live_cols = 0usize;
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| u.get(i, j)).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|i| (u.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        if var <= 0.0 {
            continue;
        }
        live_cols += 1;
        let inv_std = 1.0 / var.sqrt();
        for i in 0..n {
            scaled.set(i, j, (u.get(i, j) - mean) * inv_std);
        }
    }
    if live_cols == 0 {
        return 0.0;
    }
    let lambda_max = match l.kind() {
        LaplacianKind::Normalized => 2.0,
        LaplacianKind::Unnormalized => largest_eigenvalue(l.matrix(), 1e-10, 2000).max(1e-12),
    };
    energy_value(&scaled, g, l.kind()) / (lambda_max * n as f64 * live_cols as f64)
}
