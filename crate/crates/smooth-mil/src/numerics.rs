//! Dense and sparse linear algebra primitives.
//!
//! Everything is 64-bit and deterministic. The conjugate-gradient solver
//! targets the shifted system `(I + gamma * L) x = b`, which is symmetric
//! positive definite for every Laplacian `L` and `gamma >= 0`.

use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "value length must be rows*cols");
        DenseMatrix { rows, cols, values }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        DenseMatrix::from_vec(self.rows, self.cols, values)
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        DenseMatrix::from_vec(self.rows, self.cols, values)
    }

    pub fn scale(&self, c: f64) -> DenseMatrix {
        let values = self.values.iter().map(|v| c * v).collect();
        DenseMatrix::from_vec(self.rows, self.cols, values)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Sum of elementwise products; both matrices must share a shape.
    pub fn dot(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Sparse symmetric matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row (col, value) entries; each row must be sorted by column.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(rows.len(), n);
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// y = A x for a single vector stored as a slice.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
    }

    /// Y = A X for a dense (n x d) matrix.
    pub fn matmul_dense(&self, x: &DenseMatrix) -> DenseMatrix {
        assert_eq!(x.rows(), self.n);
        let d = x.cols();
        let mut out = DenseMatrix::zeros(self.n, d);
        for i in 0..self.n {
            let out_row = &mut out.values[i * d..(i + 1) * d];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let v = self.vals[k];
                let x_row = x.row(self.col_idx[k]);
                for (o, &xv) in out_row.iter_mut().zip(x_row.iter()) {
                    *o += v * xv;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m.set(i, self.col_idx[k], self.vals[k]);
            }
        }
        m
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

/// Solves `(I + gamma * L) X = B` column by column with conjugate gradients.
///
/// The residual criterion is `||(I + gamma L) X - B||_F / max(||B||_F, 1) <= tol`.
pub fn cg_solve(
    l: &CsrMatrix,
    gamma: f64,
    b: &DenseMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<(DenseMatrix, SolveReport)> {
    if gamma < 0.0 {
        return Err(invalid("gamma must be nonnegative"));
    }
    if !b.is_finite() || !gamma.is_finite() {
        return Err(invalid("cg_solve requires finite inputs"));
    }
    if b.rows() != l.n() {
        return Err(invalid(format!(
            "rhs has {} rows but the system is {}x{}",
            b.rows(),
            l.n(),
            l.n()
        )));
    }
    let n = l.n();
    let d = b.cols();
    let b_scale = b.frobenius_norm().max(1.0);
    // Per-column absolute target chosen so the Frobenius criterion holds
    // even if every column sits at its own limit.
    let col_tol = tol * b_scale / (d.max(1) as f64).sqrt();

    let mut x = DenseMatrix::zeros(n, d);
    let mut total_iters = 0usize;
    let mut all_converged = true;

    let apply = |v: &[f64], out: &mut [f64]| {
        l.matvec(v, out);
        for (o, &vi) in out.iter_mut().zip(v.iter()) {
            *o = vi + gamma * *o;
        }
    };

    let mut scratch = vec![0.0; n];
    for j in 0..d {
        let bj: Vec<f64> = (0..n).map(|i| b.get(i, j)).collect();
        let mut xj = vec![0.0; n];
        let mut r = bj.clone();
        let mut p = r.clone();
        let mut rs_old: f64 = r.iter().map(|v| v * v).sum();
        let mut it = 0usize;
        while rs_old.sqrt() > col_tol && it < max_iter {
            apply(&p, &mut scratch);
            let p_ap: f64 = p.iter().zip(&scratch).map(|(a, b)| a * b).sum();
            let alpha = rs_old / p_ap;
            for i in 0..n {
                xj[i] += alpha * p[i];
                r[i] -= alpha * scratch[i];
            }
            let rs_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rs_new / rs_old;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rs_old = rs_new;
            it += 1;
        }
        if rs_old.sqrt() > col_tol {
            all_converged = false;
        }
        total_iters = total_iters.max(it);
        for i in 0..n {
            x.set(i, j, xj[i]);
        }
    }

    // Recompute the true Frobenius residual for the report.
    let mut res_sq = 0.0;
    for j in 0..d {
        let xj: Vec<f64> = (0..n).map(|i| x.get(i, j)).collect();
        apply(&xj, &mut scratch);
        for i in 0..n {
            let r = scratch[i] - b.get(i, j);
            res_sq += r * r;
        }
    }
    let final_residual = res_sq.sqrt() / b_scale;
    let converged = all_converged && final_residual <= tol;
    Ok((
        x,
        SolveReport {
            iterations: total_iters,
            final_residual,
            converged,
        },
    ))
}

/// Largest singular value of `w` via power iteration on `w^T w`.
///
/// The start vector is deterministic (a fixed pseudo-random direction), so
/// repeated calls return bitwise-identical results.
pub fn spectral_norm(w: &DenseMatrix, tol: f64, max_iter: usize) -> f64 {
    let (sigma, _, _) = spectral_norm_with_vectors(w, tol, max_iter);
    sigma
}

/// As [`spectral_norm`], also returning the left/right singular-vector
/// estimates `(sigma, u, v)` with `w v ~= sigma u`.
pub fn spectral_norm_with_vectors(
    w: &DenseMatrix,
    tol: f64,
    max_iter: usize,
) -> (f64, Vec<f64>, Vec<f64>) {
    let m = w.rows();
    let n = w.cols();
    if w.max_abs() == 0.0 || m == 0 || n == 0 {
        return (0.0, vec![0.0; m], vec![0.0; n]);
    }
    let mut v = deterministic_unit_vector(n);
    let mut u = vec![0.0; m];
    let mut sigma = 0.0;
    let mut prev = f64::INFINITY;
    for _ in 0..max_iter.max(1) {
        // u = W v
        for i in 0..m {
            u[i] = w.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let un = norm(&u);
        if un == 0.0 {
            // v landed in the null space; restart from a shifted direction.
            v = deterministic_unit_vector(n.max(2) + 1)[..n].to_vec();
            normalize(&mut v);
            continue;
        }
        for x in u.iter_mut() {
            *x /= un;
        }
        // v = W^T u
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..m {
                acc += w.get(i, j) * u[i];
            }
            v[j] = acc;
        }
        sigma = norm(&v);
        if sigma == 0.0 {
            return (0.0, u, v);
        }
        for x in v.iter_mut() {
            *x /= sigma;
        }
        if (sigma - prev).abs() <= tol * sigma.max(1.0) {
            break;
        }
        prev = sigma;
    }
    (sigma, u, v)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Fixed pseudo-random unit vector (splitmix64 stream, seed 0x5EED).
fn deterministic_unit_vector(n: usize) -> Vec<f64> {
    let mut state = 0x5EED_u64.wrapping_add(n as u64);
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            state = splitmix64(&mut state);
            // map to (-1, 1)
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    if norm(&v) == 0.0 {
        v[0] = 1.0;
    }
    normalize(&mut v);
    v
}

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Largest eigenvalue of a symmetric positive semidefinite sparse matrix via
/// power iteration with a deterministic start vector.
pub fn largest_eigenvalue(a: &CsrMatrix, tol: f64, max_iter: usize) -> f64 {
    let n = a.n();
    if n == 0 || a.nnz() == 0 {
        return 0.0;
    }
    let mut v = deterministic_unit_vector(n);
    let mut av = vec![0.0; n];
    let mut lambda = 0.0;
    let mut prev = f64::INFINITY;
    for _ in 0..max_iter.max(1) {
        a.matvec(&v, &mut av);
        lambda = v.iter().zip(&av).map(|(x, y)| x * y).sum();
        let nn = norm(&av);
        if nn == 0.0 {
            return 0.0;
        }
        for (x, y) in v.iter_mut().zip(&av) {
            *x = y / nn;
        }
        if (lambda - prev).abs() <= tol * lambda.abs().max(1.0) {
            break;
        }
        prev = lambda;
    }
    lambda
}

/// Solves `A X = B` for square `A` by LU with partial pivoting.
pub fn dense_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != a.cols() {
        return Err(invalid("dense_solve requires a square matrix"));
    }
    if a.rows() != b.rows() {
        return Err(invalid("dimension mismatch between A and B"));
    }
    let n = a.rows();
    let d = b.cols();
    let mut lu = a.clone();
    let mut rhs = b.clone();
    for k in 0..n {
        // pivot
        let mut p = k;
        let mut best = lu.get(k, k).abs();
        for i in (k + 1)..n {
            let v = lu.get(i, k).abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best <= 1e-12 {
            return Err(Error::SingularMatrix(best));
        }
        if p != k {
            for j in 0..n {
                let (a1, a2) = (lu.get(k, j), lu.get(p, j));
                lu.set(k, j, a2);
                lu.set(p, j, a1);
            }
            for j in 0..d {
                let (b1, b2) = (rhs.get(k, j), rhs.get(p, j));
                rhs.set(k, j, b2);
                rhs.set(p, j, b1);
            }
        }
        let pivot = lu.get(k, k);
        for i in (k + 1)..n {
            let f = lu.get(i, k) / pivot;
            if f == 0.0 {
                continue;
            }
            lu.set(i, k, f);
            for j in (k + 1)..n {
                lu.set(i, j, lu.get(i, j) - f * lu.get(k, j));
            }
            for j in 0..d {
                rhs.set(i, j, rhs.get(i, j) - f * rhs.get(k, j));
            }
        }
    }
    // back substitution
    let mut x = DenseMatrix::zeros(n, d);
    for j in 0..d {
        for i in (0..n).rev() {
            let mut acc = rhs.get(i, j);
            for k in (i + 1)..n {
                acc -= lu.get(i, k) * x.get(k, j);
            }
            x.set(i, j, acc / lu.get(i, i));
        }
    }
    Ok(x)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>> {
    if a.rows() != a.cols() {
        return Err(invalid("eigenvalues require a square matrix"));
    }
    let n = a.rows();
    let mut m = a.clone();
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(eigs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_chain_graph, build_grid_graph, build_laplacian, LaplacianKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        let values = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix::from_vec(rows, cols, values)
    }

    #[test]
    fn cg_identity_system_returns_rhs() {
        let g = build_chain_graph(4).unwrap();
        let l = build_laplacian(&g, LaplacianKind::Normalized);
        let b = DenseMatrix::from_vec(4, 1, vec![1.0, -2.0, 3.0, 0.5]);
        let (x, rep) = cg_solve(l.matrix(), 0.0, &b, 1e-12, 100).unwrap();
        assert!(rep.converged);
        assert_eq!(x, b);
    }

    #[test]
    fn cg_p2_hand_oracle() {
        // (I + L) on P2 unnormalized is [[2,-1],[-1,2]]; inverse of b=[0,1] is [1/3, 2/3].
        let g = build_chain_graph(2).unwrap();
        let l = build_laplacian(&g, LaplacianKind::Unnormalized);
        let b = DenseMatrix::from_vec(2, 1, vec![0.0, 1.0]);
        let (x, rep) = cg_solve(l.matrix(), 1.0, &b, 1e-12, 100).unwrap();
        assert!(rep.converged);
        assert!((x.get(0, 0) - 1.0 / 3.0).abs() < 1e-10);
        assert!((x.get(1, 0) - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn cg_matches_dense_solve_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = rng.gen_range(2..=16);
            let g = if trial % 2 == 0 {
                build_chain_graph(n).unwrap()
            } else {
                build_grid_graph(2, (n + 1) / 2).unwrap()
            };
            let nn = g.n_nodes();
            let l = build_laplacian(&g, LaplacianKind::Normalized);
            let gamma = rng.gen_range(0.01..5.0);
            let b = random_matrix(&mut rng, nn, 3);
            let (x, rep) = cg_solve(l.matrix(), gamma, &b, 1e-10, 4 * nn + 20).unwrap();
            assert!(rep.converged, "CG must converge on SPD shifted systems");
            let a = DenseMatrix::identity(nn).add(&l.matrix().to_dense().scale(gamma));
            let x_ref = dense_solve(&a, &b).unwrap();
            assert!(x.sub(&x_ref).frobenius_norm() < 1e-8);
        }
    }

    #[test]
    fn cg_rejects_non_finite_rhs() {
        let g = build_chain_graph(2).unwrap();
        let l = build_laplacian(&g, LaplacianKind::Normalized);
        let b = DenseMatrix::from_vec(2, 1, vec![f64::NAN, 0.0]);
        assert!(cg_solve(l.matrix(), 1.0, &b, 1e-8, 10).is_err());
    }

    #[test]
    fn spectral_norm_identity_and_diagonal() {
        assert!((spectral_norm(&DenseMatrix::identity(3), 1e-12, 500) - 1.0).abs() < 1e-10);
        let d = DenseMatrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]);
        assert!((spectral_norm(&d, 1e-12, 500) - 3.0).abs() < 1e-10);
        assert_eq!(spectral_norm(&DenseMatrix::zeros(3, 4), 1e-12, 500), 0.0);
    }

    #[test]
    fn spectral_norm_matches_gram_eigenvalue_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let w = random_matrix(&mut rng, 10, 7);
            let sigma = spectral_norm(&w, 1e-14, 10_000);
            // Independent route: largest eigenvalue of W^T W.
            let gram = w.transpose().matmul(&w);
            let eigs = symmetric_eigenvalues(&gram).unwrap();
            let sigma_ref = eigs.last().unwrap().max(0.0).sqrt();
            assert!(
                (sigma - sigma_ref).abs() <= 1e-6 * sigma_ref.max(1.0),
                "sigma {sigma} vs oracle {sigma_ref}"
            );
        }
    }

    #[test]
    fn spectral_norm_transpose_and_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let w = random_matrix(&mut rng, 6, 9);
            let s = spectral_norm(&w, 1e-12, 10_000);
            let st = spectral_norm(&w.transpose(), 1e-12, 10_000);
            assert!((s - st).abs() < 1e-8);
            let c = rng.gen_range(-3.0..3.0);
            let sc = spectral_norm(&w.scale(c), 1e-12, 10_000);
            assert!((sc - c.abs() * s).abs() < 1e-8);
        }
    }

    #[test]
    fn dense_solve_diagonal_and_identity() {
        let i = DenseMatrix::identity(3);
        let b = DenseMatrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        assert_eq!(dense_solve(&i, &b).unwrap(), b);
        let a = DenseMatrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 4.0]);
        let b = DenseMatrix::from_vec(2, 1, vec![2.0, 4.0]);
        let x = dense_solve(&a, &b).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-14);
        assert!((x.get(1, 0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dense_solve_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let mut a = random_matrix(&mut rng, 8, 8);
            for i in 0..8 {
                // diagonal dominance keeps the system well conditioned
                a.set(i, i, a.get(i, i) + 8.0);
            }
            let b = random_matrix(&mut rng, 8, 2);
            let x = dense_solve(&a, &b).unwrap();
            let res = a.matmul(&x).sub(&b).frobenius_norm() / b.frobenius_norm().max(1.0);
            assert!(res < 1e-10);
        }
    }

    #[test]
    fn dense_solve_rejects_singular() {
        let a = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        let b = DenseMatrix::from_vec(2, 1, vec![1.0, 1.0]);
        assert!(matches!(
            dense_solve(&a, &b),
            Err(Error::SingularMatrix(_))
        ));
    }

    #[test]
    fn jacobi_eigenvalues_known_spectrum() {
        // P3 unnormalized Laplacian has eigenvalues {0, 1, 3}.
        let g = build_chain_graph(3).unwrap();
        let l = build_laplacian(&g, LaplacianKind::Unnormalized);
        let eigs = symmetric_eigenvalues(&l.matrix().to_dense()).unwrap();
        for (e, want) in eigs.iter().zip([0.0, 1.0, 3.0]) {
            assert!((e - want).abs() < 1e-10, "eig {e} vs {want}");
        }
    }
}
