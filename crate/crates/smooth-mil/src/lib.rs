//! Graph-Laplacian smoothing for attention-based multiple instance learning.
//!
//! The central object is the smooth operator `Sm`, which maps a signal `U`
//! defined on a bag graph to the minimizer of
//! `alpha * dirichlet_energy(G) + (1 - alpha) * ||U - G||_F^2`.
//! The exact minimizer is `(I + gamma * L)^{-1} U` with `gamma = alpha / (1 - alpha)`;
//! a fixed-point iteration approximates it in `T` steps. The crate provides:
//!
//! - [`graph`]: bag graphs (grid / chain), Laplacians, spectral quantities;
//! - [`numerics`]: dense/sparse linear algebra (CG, power iteration, eigensolve);
//! - [`dirichlet`]: the Dirichlet energy in both definitional forms;
//! - [`smoothing`]: `Sm` in exact and iterative form, with gradients and the
//!   energy-decrease bound verifier;
//! - [`neural`]: a minimal reverse-mode tape, layers, Adam, spectral
//!   normalization, and the layerwise Lipschitz-chain verifier;
//! - [`mil`]: the MIL model family (attention pooling, smoothing placement
//!   variants, transformer variants, penalty baseline) and training;
//! - [`data`]: synthetic spatially-correlated bag generation and file I/O;
//! - [`eval`]: AUROC, F1 with validation-optimal thresholds, histograms;
//! - [`verify`]: the randomized theorem-check suites behind `verify`.
//!
//! ```
//! use smooth_mil::graph::{build_chain_graph, build_laplacian, LaplacianKind};
//! use smooth_mil::numerics::DenseMatrix;
//! use smooth_mil::smoothing::smooth_exact;
//!
//! let g = build_chain_graph(2).unwrap();
//! let l = build_laplacian(&g, LaplacianKind::Normalized);
//! let u = DenseMatrix::from_vec(2, 1, vec![0.0, 1.0]);
//! let s = smooth_exact(&u, &l, 1.0).unwrap();
//! assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-9);
//! assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-9);
//! ```

pub mod data;
pub mod dirichlet;
pub mod error;
pub mod eval;
pub mod graph;
pub mod mil;
pub mod neural;
pub mod numerics;
pub mod smoothing;
pub mod verify;

pub use error::{Error, Result};
