//! Bag graphs, their Laplacians, and spectral quantities.
//!
//! Each bag is a graph whose nodes are instances and whose edges encode
//! spatial adjacency (4-connected grids for patch layouts, paths for slice
//! stacks). The unnormalized Laplacian is `L = D - A`; the normalized form
//! is `D^{-1/2} L D^{-1/2}`, whose spectrum sits in `[0, 2]`.
//!
//! `lambda_star` is the energy-contraction factor of the smooth operator,
//! the maximum of `(1 + gamma lambda)^-2` over nonzero eigenvalues. On the
//! two-node chain the only nonzero eigenvalue is 2, so at `gamma = 1` the
//! factor is exactly `1/9` — the tightness witness:
//!
//! ```
//! use smooth_mil::graph::{build_chain_graph, build_laplacian, lambda_star, LaplacianKind};
//!
//! let g = build_chain_graph(2).unwrap();
//! let l = build_laplacian(&g, LaplacianKind::Unnormalized);
//! assert!((lambda_star(&l, 1.0).unwrap() - 1.0 / 9.0).abs() < 1e-12);
//! ```

use crate::error::{invalid, Error, Result};
use crate::numerics::{symmetric_eigenvalues, CsrMatrix};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Default cap on dense eigendecompositions.
pub const DENSE_EIG_CAP: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Grid2d,
    Chain,
    Custom,
}

/// Sparse symmetric adjacency for one bag. Each undirected edge `(i, j, w)`
/// with `i < j` is stored once; the degree vector is kept consistent with
/// the stored weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize, f64)>,
    degree: Vec<f64>,
    kind: GraphKind,
}

impl BagGraph {
    /// Builds a graph from an undirected edge list. Edges are normalized to
    /// `i < j` order and sorted; weights must be strictly positive and
    /// self-loops are rejected.
    pub fn from_edges(
        n_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
        kind: GraphKind,
    ) -> Result<Self> {
        let mut normalized: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, w) in edges {
            if i == j {
                return Err(invalid(format!("self-loop at node {i}")));
            }
            if i >= n_nodes || j >= n_nodes {
                return Err(invalid(format!("edge ({i}, {j}) out of range")));
            }
            if !(w > 0.0) {
                return Err(invalid(format!("edge ({i}, {j}) has non-positive weight {w}")));
            }
            normalized.push((i.min(j), i.max(j), w));
        }
        normalized.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for pair in normalized.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(invalid(format!(
                    "duplicate edge ({}, {})",
                    pair[0].0, pair[0].1
                )));
            }
        }
        let mut degree = vec![0.0; n_nodes];
        for &(i, j, w) in &normalized {
            degree[i] += w;
            degree[j] += w;
        }
        Ok(BagGraph {
            n_nodes,
            edges: normalized,
            degree,
            kind,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges with `i < j`, sorted by `(i, j)`.
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    /// Rebuilds the graph with nodes relabeled by `perm` (node `i` becomes
    /// `perm[i]`).
    pub fn relabel(&self, perm: &[usize]) -> Result<BagGraph> {
        if perm.len() != self.n_nodes {
            return Err(invalid("permutation length must equal node count"));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(i, j, w)| (perm[i], perm[j], w));
        BagGraph::from_edges(self.n_nodes, edges, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianKind {
    Unnormalized,
    #[default]
    Normalized,
}

/// Sparse symmetric Laplacian in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    n_nodes: usize,
    kind: LaplacianKind,
    matrix: CsrMatrix,
}

impl Laplacian {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn kind(&self) -> LaplacianKind {
        self.kind
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }
}

/// 4-connected `height x width` grid with unit edge weights; node index
/// is `row * width + col`.
pub fn build_grid_graph(height: usize, width: usize) -> Result<BagGraph> {
    if height == 0 || width == 0 {
        return Err(invalid("grid dimensions must be at least 1"));
    }
    let mut edges = Vec::new();
    for r in 0..height {
        for c in 0..width {
            let idx = r * width + c;
            if c + 1 < width {
                edges.push((idx, idx + 1, 1.0));
            }
            if r + 1 < height {
                edges.push((idx, idx + width, 1.0));
            }
        }
    }
    BagGraph::from_edges(height * width, edges, GraphKind::Grid2d)
}

/// Path graph on `n` nodes with unit edge weights.
pub fn build_chain_graph(n: usize) -> Result<BagGraph> {
    if n == 0 {
        return Err(invalid("chain length must be at least 1"));
    }
    let edges = (0..n.saturating_sub(1)).map(|i| (i, i + 1, 1.0));
    BagGraph::from_edges(n, edges, GraphKind::Chain)
}

/// Builds the sparse Laplacian of the given kind. Isolated nodes get an
/// all-zero row/column in the normalized form.
pub fn build_laplacian(g: &BagGraph, kind: LaplacianKind) -> Laplacian {
    let n = g.n_nodes();
    let deg = g.degree();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(i, j, w) in g.edges() {
        let off = match kind {
            LaplacianKind::Unnormalized => -w,
            LaplacianKind::Normalized => -w * inv_sqrt[i] * inv_sqrt[j],
        };
        rows[i].push((j, off));
        rows[j].push((i, off));
    }
    for (i, row) in rows.iter_mut().enumerate() {
        let diag = match kind {
            LaplacianKind::Unnormalized => deg[i],
            LaplacianKind::Normalized => {
                if deg[i] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        };
        row.push((i, diag));
        row.sort_by_key(|&(c, _)| c);
    }
    Laplacian {
        n_nodes: n,
        kind,
        matrix: CsrMatrix::from_rows(n, rows),
    }
}

/// Eigenvalues of the Laplacian, nondecreasing, via dense Jacobi below the cap.
pub fn laplacian_eigenvalues(l: &Laplacian) -> Result<Vec<f64>> {
    laplacian_eigenvalues_capped(l, DENSE_EIG_CAP)
}

pub fn laplacian_eigenvalues_capped(l: &Laplacian, cap: usize) -> Result<Vec<f64>> {
    if l.n_nodes() > cap {
        return Err(Error::UnsupportedSize {
            n: l.n_nodes(),
            cap,
        });
    }
    symmetric_eigenvalues(&l.matrix().to_dense())
}

/// The contraction factor of the energy-decrease bound:
/// `max((1 + gamma * lambda)^{-2})` over nonzero eigenvalues, which equals
/// `(1 + gamma * lambda_min_nonzero)^{-2}` because the map is decreasing.
pub fn lambda_star(l: &Laplacian, gamma: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(invalid("gamma must be nonnegative"));
    }
    let eigs = laplacian_eigenvalues(l)?;
    let min_nonzero = eigs
        .iter()
        .copied()
        .filter(|&e| e > 1e-9)
        .fold(f64::INFINITY, f64::min);
    if !min_nonzero.is_finite() {
        return Err(Error::DegenerateGraph(
            "all Laplacian eigenvalues are zero (edgeless graph)".into(),
        ));
    }
    Ok((1.0 + gamma * min_nonzero).powi(-2))
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    kind: GraphKind,
}

/// Writes one JSONL record per graph. Edge lists are already `(i, j)`-sorted,
/// so round-trips are bit-stable.
pub fn write_graphs_jsonl<W: Write>(w: &mut W, graphs: &[BagGraph]) -> Result<()> {
    for g in graphs {
        let rec = GraphRecord {
            n: g.n_nodes(),
            edges: g.edges().to_vec(),
            kind: g.kind(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_graphs_jsonl<R: BufRead>(r: R) -> Result<Vec<BagGraph>> {
    let mut graphs = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line)?;
        graphs.push(BagGraph::from_edges(rec.n, rec.edges, rec.kind)?);
    }
    Ok(graphs)
}
