//! Minimal differentiable neural stack.
//!
//! A [`Tape`] records matrix-valued operations and plays them back in
//! reverse to produce exact gradients; every op carries its own backward
//! rule. Offered on top of that: linear layers, tanh/relu/sigmoid, row
//! softmax, layer norm, multi-head self-attention, the smooth operator as a
//! single tape op, spectral normalization, Adam, parameter checkpoints, and
//! the layerwise Dirichlet-energy Lipschitz verifier.

use crate::dirichlet::energy_value;
use crate::error::{invalid, Result};
use crate::graph::{BagGraph, Laplacian};
use crate::numerics::{spectral_norm, spectral_norm_with_vectors, DenseMatrix};
use crate::smoothing::{smooth_backward_with, smooth_iterative, BackwardStrategy};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&DenseMatrix) -> Vec<DenseMatrix>>;

struct Node {
    value: DenseMatrix,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    fn push(
        &mut self,
        value: DenseMatrix,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn>,
    ) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value produced on the tape");
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: DenseMatrix, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite());
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.matmul(&bv);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g.matmul(&bv.transpose()), av.transpose().matmul(g)]
            })),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.transpose()])),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).add(self.value(b));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).sub(self.value(b));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.scale(-1.0)])),
        )
    }

    /// Adds a `1 x d` bias row to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1);
        assert_eq!(av.cols(), bv.cols());
        let mut out = av.clone();
        let d = out.cols();
        for i in 0..out.rows() {
            for j in 0..d {
                out.set(i, j, out.get(i, j) + bv.get(0, j));
            }
        }
        self.push(
            out,
            vec![a, bias],
            Some(Box::new(move |g| {
                let mut gb = DenseMatrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        gb.set(0, j, gb.get(0, j) + g.get(i, j));
                    }
                }
                vec![g.clone(), gb]
            })),
        )
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).scale(c);
        self.push(out, vec![a], Some(Box::new(move |g| vec![g.scale(c)])))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        dfdy: impl Fn(f64, f64) -> f64 + 'static,
    ) -> NodeId {
        let av = self.value(a).clone();
        let mut out = av.clone();
        for v in out.values_mut() {
            *v = f(*v);
        }
        let outv = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut gx = g.clone();
                for ((gv, &x), &y) in gx
                    .values_mut()
                    .iter_mut()
                    .zip(av.values())
                    .zip(outv.values())
                {
                    *gv *= dfdy(x, y);
                }
                vec![gx]
            })),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.elementwise(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.elementwise(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.elementwise(
            a,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    /// Softmax along each row, with the usual max-shift for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = DenseMatrix::zeros(r, c);
        for i in 0..r {
            let row = av.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out.set(i, j, e);
                z += e;
            }
            for j in 0..c {
                out.set(i, j, out.get(i, j) / z);
            }
        }
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut gx = DenseMatrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: f64 = (0..g.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..g.cols() {
                        gx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Per-row layer normalization with learnable gain and bias (`1 x d`).
    pub fn layer_norm_rows(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let av = self.value(a).clone();
        let gv = self.value(gain).clone();
        let bv = self.value(bias).clone();
        let (r, d) = (av.rows(), av.cols());
        let mut xhat = DenseMatrix::zeros(r, d);
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = av.row(i);
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + EPS).sqrt();
            inv_std[i] = s;
            for j in 0..d {
                xhat.set(i, j, (row[j] - mean) * s);
            }
        }
        let mut out = DenseMatrix::zeros(r, d);
        for i in 0..r {
            for j in 0..d {
                out.set(i, j, xhat.get(i, j) * gv.get(0, j) + bv.get(0, j));
            }
        }
        let xh = xhat.clone();
        self.push(
            out,
            vec![a, gain, bias],
            Some(Box::new(move |g| {
                let (r, d) = (g.rows(), g.cols());
                let mut gx = DenseMatrix::zeros(r, d);
                let mut ggain = DenseMatrix::zeros(1, d);
                let mut gbias = DenseMatrix::zeros(1, d);
                for i in 0..r {
                    // dy/dxhat = gain; then the standard layer-norm pullback
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = g.get(i, j) * gv.get(0, j);
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh.get(i, j);
                        ggain.set(0, j, ggain.get(0, j) + g.get(i, j) * xh.get(i, j));
                        gbias.set(0, j, gbias.get(0, j) + g.get(i, j));
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let dxh = g.get(i, j) * gv.get(0, j);
                        gx.set(
                            i,
                            j,
                            inv_std[i] * (dxh - mean_dxhat - xh.get(i, j) * mean_dxhat_xhat),
                        );
                    }
                }
                vec![gx, ggain, gbias]
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = DenseMatrix::zeros(r, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..r {
                for j in 0..w {
                    out.set(i, off + j, pv.get(i, j));
                }
            }
            off += w;
        }
        let widths_cl = widths.clone();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(widths_cl.len());
                let mut off = 0;
                for &w in &widths_cl {
                    let mut gp = DenseMatrix::zeros(g.rows(), w);
                    for i in 0..g.rows() {
                        for j in 0..w {
                            gp.set(i, j, g.get(i, off + j));
                        }
                    }
                    grads.push(gp);
                    off += w;
                }
                grads
            })),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        assert!(start < end && end <= c);
        let mut out = DenseMatrix::zeros(r, end - start);
        for i in 0..r {
            for j in start..end {
                out.set(i, j - start, av.get(i, j));
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut gp = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    for j in start..end {
                        gp.set(i, j, g.get(i, j - start));
                    }
                }
                vec![gp]
            })),
        )
    }

    /// The smooth operator as one tape op: `t` steps of the fixed-point
    /// recursion, differentiable in the input signal and in `alpha` (a
    /// `1 x 1` node, typically `sigmoid` of an unconstrained parameter).
    pub fn smooth(&mut self, u: NodeId, alpha: NodeId, l: &Laplacian, t: usize) -> NodeId {
        let uv = self.value(u).clone();
        let av = self.value(alpha);
        assert_eq!((av.rows(), av.cols()), (1, 1), "alpha must be a scalar node");
        let alpha_val = av.get(0, 0);
        let out = smooth_iterative(&uv, l, alpha_val, t).expect("smooth preconditions hold");
        let l_cl = l.clone();
        self.push(
            out,
            vec![u, alpha],
            Some(Box::new(move |g| {
                let (gu, ga) = smooth_backward_with(
                    &uv,
                    &l_cl,
                    alpha_val,
                    t,
                    g,
                    BackwardStrategy::StoreAll,
                    false,
                )
                .expect("smooth backward preconditions hold");
                vec![gu, DenseMatrix::from_vec(1, 1, vec![ga])]
            })),
        )
    }

    /// Dirichlet energy of a node signal as a `1 x 1` node. The gradient of
    /// `trace(U^T L U)` is `2 L U`.
    pub fn dirichlet_energy(&mut self, u: NodeId, g: &BagGraph, l: &Laplacian) -> NodeId {
        let uv = self.value(u).clone();
        let e = energy_value(&uv, g, l.kind());
        let l_cl = l.clone();
        self.push(
            DenseMatrix::from_vec(1, 1, vec![e]),
            vec![u],
            Some(Box::new(move |grad| {
                let s = grad.get(0, 0);
                let lu = l_cl.matrix().matmul_dense(&uv);
                vec![lu.scale(2.0 * s)]
            })),
        )
    }

    /// `W / sigma` with `sigma, u, v` the dominant singular triple computed
    /// outside the tape. The backward rule uses `d sigma / d W = u v^T`.
    pub fn spectral_normalize(&mut self, w: NodeId, sigma: f64, u: &[f64], v: &[f64]) -> NodeId {
        let wv = self.value(w).clone();
        if sigma == 0.0 {
            // zero weight: pass through unchanged
            let out = wv.clone();
            return self.push(out, vec![w], Some(Box::new(move |g| vec![g.clone()])));
        }
        let out = wv.scale(1.0 / sigma);
        let uvt = {
            let mut m = DenseMatrix::zeros(wv.rows(), wv.cols());
            for i in 0..wv.rows() {
                for j in 0..wv.cols() {
                    m.set(i, j, u[i] * v[j]);
                }
            }
            m
        };
        self.push(
            out,
            vec![w],
            Some(Box::new(move |g| {
                let coeff = g.dot(&wv) / (sigma * sigma);
                vec![g.scale(1.0 / sigma).sub(&uvt.scale(coeff))]
            })),
        )
    }

    /// Weighted binary cross-entropy on a single logit, numerically stable.
    pub fn bce_with_logit(&mut self, logit: NodeId, label: f64, weight: f64) -> NodeId {
        let lv = self.value(logit);
        assert_eq!((lv.rows(), lv.cols()), (1, 1));
        let z = lv.get(0, 0);
        // log(1 + e^z) - y z, computed as max(z, 0) - y z + log(1 + e^{-|z|})
        let loss = weight * (z.max(0.0) - label * z + (-z.abs()).exp().ln_1p());
        self.push(
            DenseMatrix::from_vec(1, 1, vec![loss]),
            vec![logit],
            Some(Box::new(move |g| {
                let p = 1.0 / (1.0 + (-z).exp());
                vec![DenseMatrix::from_vec(
                    1,
                    1,
                    vec![g.get(0, 0) * weight * (p - label)],
                )]
            })),
        )
    }

    /// Reverse sweep from a `1 x 1` root. Returns one gradient slot per node.
    pub fn backward(&self, root: NodeId) -> Vec<Option<DenseMatrix>> {
        let rv = self.value(root);
        assert_eq!((rv.rows(), rv.cols()), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(DenseMatrix::from_vec(1, 1, vec![1.0]));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else { continue };
            let Some(backward) = &node.backward else { continue };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => *acc = acc.add(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        grads
    }
}

// ---------------------------------------------------------------------------
// Parameter store, Adam, checkpoints
// ---------------------------------------------------------------------------

/// Named parameter matrices, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseMatrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn get(&self, idx: usize) -> &DenseMatrix {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut DenseMatrix {
        &mut self.values[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Flat binary container: `u64` header length, JSON header (names,
    /// shapes, byte offsets), then raw little-endian `f64` payload.
    /// Round-trips are bit-exact.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            rows: usize,
            cols: usize,
            offset: usize,
        }
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for (name, m) in self.iter() {
            entries.push(Entry {
                name,
                rows: m.rows(),
                cols: m.cols(),
                offset,
            });
            offset += m.values().len() * 8;
        }
        let header = serde_json::to_vec(&entries)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for m in &self.values {
            for v in m.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            rows: usize,
            cols: usize,
            #[allow(dead_code)]
            offset: usize,
        }
        let mut len_buf = [0u8; 8];
        r.read_exact(&mut len_buf)?;
        let header_len = u64::from_le_bytes(len_buf) as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let entries: Vec<Entry> = serde_json::from_slice(&header)?;
        let mut store = ParamStore::new();
        for e in entries {
            let count = e.rows * e.cols;
            let mut bytes = vec![0u8; count * 8];
            r.read_exact(&mut bytes)?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(e.name, DenseMatrix::from_vec(e.rows, e.cols, values));
        }
        Ok(store)
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    pub skipped_steps: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let m = (0..params.len())
            .map(|i| DenseMatrix::zeros(params.get(i).rows(), params.get(i).cols()))
            .collect::<Vec<_>>();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
            skipped_steps: 0,
        }
    }
}

/// One Adam update over all parameters. `grads[i] = None` means zero
/// gradient for that parameter (moments still decay). Non-finite gradients
/// skip the whole step and bump the skip counter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<DenseMatrix>],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(invalid("learning rate must be positive"));
    }
    assert_eq!(grads.len(), params.len());
    if grads
        .iter()
        .flatten()
        .any(|g| !g.is_finite())
    {
        state.skipped_steps += 1;
        return Ok(());
    }
    state.step += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let zero;
        let g = match &grads[i] {
            Some(g) => g,
            None => {
                zero = DenseMatrix::zeros(params.get(i).rows(), params.get(i).cols());
                &zero
            }
        };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = params.get_mut(i);
        for k in 0..g.values().len() {
            let gv = g.values()[k];
            let mv = b1 * m.values()[k] + (1.0 - b1) * gv;
            let vv = b2 * v.values()[k] + (1.0 - b2) * gv * gv;
            m.values_mut()[k] = mv;
            v.values_mut()[k] = vv;
            let mhat = mv / bc1;
            let vhat = vv / bc2;
            p.values_mut()[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Spectral normalization state (training mode)
// ---------------------------------------------------------------------------

/// Persistent power-iteration state for one weight matrix. Training does one
/// iteration per step; verification iterates to convergence instead.
#[derive(Debug, Clone)]
pub struct SpectralNormState {
    u: Vec<f64>,
}

impl SpectralNormState {
    pub fn new(rows: usize) -> Self {
        // deterministic start: normalized alternating vector
        let mut u: Vec<f64> = (0..rows)
            .map(|i| if i % 2 == 0 { 1.0 } else { 0.7 })
            .collect();
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in u.iter_mut() {
            *x /= n;
        }
        SpectralNormState { u }
    }

    /// One power-iteration step on `W W^T`; returns `(sigma, u, v)`.
    pub fn step(&mut self, w: &DenseMatrix) -> (f64, Vec<f64>, Vec<f64>) {
        let (m, n) = (w.rows(), w.cols());
        assert_eq!(self.u.len(), m);
        if w.max_abs() == 0.0 {
            return (0.0, self.u.clone(), vec![0.0; n]);
        }
        // v = normalize(W^T u); u = normalize(W v); sigma = u^T W v
        let mut v = vec![0.0; n];
        for j in 0..n {
            v[j] = (0..m).map(|i| w.get(i, j) * self.u[i]).sum();
        }
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv > 0.0 {
            for x in v.iter_mut() {
                *x /= nv;
            }
        }
        let mut u = vec![0.0; m];
        for i in 0..m {
            u[i] = w.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu > 0.0 {
            for x in u.iter_mut() {
                *x /= nu;
            }
        }
        self.u = u.clone();
        let sigma: f64 = (0..m)
            .map(|i| u[i] * w.row(i).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        (sigma.max(0.0), u, v)
    }
}

/// Fully converged singular triple, for eval and verification paths.
pub fn spectral_triple_converged(w: &DenseMatrix) -> (f64, Vec<f64>, Vec<f64>) {
    spectral_norm_with_vectors(w, 1e-13, 10_000)
}

// ---------------------------------------------------------------------------
// MLP + Lipschitz verifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Lipschitz constant of the activation.
    pub fn lipschitz(&self) -> f64 {
        1.0
    }
}

/// An `L`-layer perceptron description for the Lipschitz chain verifier:
/// layer `l` maps `Y W_l + b_l` through a `K_l`-Lipschitz activation.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Weights `W_l` with shape `D_l x D_{l+1}` and bias rows `1 x D_{l+1}`.
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<DenseMatrix>,
    pub spectral_normalized: Vec<bool>,
}

impl MlpSpec {
    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    fn effective_weight(&self, l: usize) -> DenseMatrix {
        if self.spectral_normalized[l] {
            let (sigma, _, _) = spectral_triple_converged(&self.weights[l]);
            if sigma > 0.0 {
                return self.weights[l].scale(1.0 / sigma);
            }
        }
        self.weights[l].clone()
    }

    fn validate(&self, input_cols: usize) -> Result<()> {
        let l = self.n_layers();
        if self.layer_dims.len() != l + 1
            || self.weights.len() != l
            || self.biases.len() != l
            || self.spectral_normalized.len() != l
        {
            return Err(invalid("inconsistent MLP spec lengths"));
        }
        if input_cols != self.layer_dims[0] {
            return Err(invalid(format!(
                "input has {input_cols} columns, spec expects {}",
                self.layer_dims[0]
            )));
        }
        Ok(())
    }
}

/// Forward pass returning every intermediate activation `Y^0 ... Y^L`.
pub fn mlp_forward(spec: &MlpSpec, y: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
    spec.validate(y.cols())?;
    let mut outputs = vec![y.clone()];
    for l in 0..spec.n_layers() {
        let w = spec.effective_weight(l);
        let mut z = outputs[l].matmul(&w);
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                z.set(i, j, spec.activations[l].apply(z.get(i, j) + spec.biases[l].get(0, j)));
            }
        }
        outputs.push(z);
    }
    Ok(outputs)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerBound {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzReport {
    pub per_layer: Vec<LayerBound>,
    /// Telescoped product bound: energy of the output against
    /// `prod(K_l^2 ||W_l||^2)` times the input energy.
    pub telescoped: LayerBound,
}

/// Checks the layerwise energy inequality
/// `E(Y^{l+1}) <= K_l^2 ||W_l||_2^2 E(Y^l)` and the telescoped product bound.
///
/// The inequality is a statement about the combinatorial pairwise energy
/// `1/2 sum A_ij ||y_i - y_j||^2`; the degree-rescaled (normalized) form does
/// not commute with pointwise activations, so energies here are always
/// evaluated in the unnormalized form whatever `l.kind()` is.
pub fn verify_lipschitz_chain(
    spec: &MlpSpec,
    y: &DenseMatrix,
    g: &BagGraph,
    _l: &Laplacian,
) -> Result<LipschitzReport> {
    let outputs = mlp_forward(spec, y)?;
    let energies: Vec<f64> = outputs
        .iter()
        .map(|o| energy_value(o, g, crate::graph::LaplacianKind::Unnormalized))
        .collect();
    let slack = |rhs: f64| 1e-9 * rhs.max(1.0);
    let mut per_layer = Vec::new();
    let mut product = 1.0;
    for li in 0..spec.n_layers() {
        let w = spec.effective_weight(li);
        let k = spec.activations[li].lipschitz();
        let norm = spectral_norm(&w, 1e-12, 10_000);
        let factor = k * k * norm * norm;
        product *= factor;
        let lhs = energies[li + 1];
        let rhs = factor * energies[li];
        per_layer.push(LayerBound {
            lhs,
            rhs,
            holds: lhs <= rhs + slack(rhs),
        });
    }
    let lhs = *energies.last().unwrap();
    let rhs = product * energies[0];
    Ok(LipschitzReport {
        per_layer,
        telescoped: LayerBound {
            lhs,
            rhs,
            holds: lhs <= rhs + slack(rhs),
        },
    })
}

// ---------------------------------------------------------------------------
// Transformer encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Total query/key/value width across heads; must divide by `n_heads`.
    pub qkv_dim: usize,
    pub model_dim: usize,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        TransformerSpec {
            n_layers: 2,
            n_heads: 8,
            qkv_dim: 128,
            model_dim: 512,
        }
    }
}

impl TransformerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.qkv_dim % self.n_heads != 0 {
            return Err(invalid("qkv_dim must be divisible by n_heads"));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.model_dim == 0 {
            return Err(invalid("transformer dimensions must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.qkv_dim / self.n_heads
    }
}

/// Tape node ids for one encoder layer's parameters.
pub struct TransformerLayerNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln_gain: NodeId,
    pub ln_bias: NodeId,
}

/// Multi-head self-attention block output (pre-residual): softmax-scaled dot
/// product attention per head, concatenated and output-projected.
pub fn multihead_attention_block(
    tape: &mut Tape,
    spec: &TransformerSpec,
    x: NodeId,
    layer: &TransformerLayerNodes,
) -> NodeId {
    let q = tape.matmul(x, layer.wq);
    let k = tape.matmul(x, layer.wk);
    let v = tape.matmul(x, layer.wv);
    let dh = spec.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(spec.n_heads);
    for h in 0..spec.n_heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, s, e);
        let kh = tape.slice_cols(k, s, e);
        let vh = tape.slice_cols(v, s, e);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale_const(scores, scale);
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&heads);
    let proj = tape.matmul(cat, layer.wo);
    tape.add_row_broadcast(proj, layer.bo)
}

/// One full encoder layer: attention block (optionally smoothed), residual
/// connection, layer norm.
pub fn transformer_layer(
    tape: &mut Tape,
    spec: &TransformerSpec,
    x: NodeId,
    layer: &TransformerLayerNodes,
    smooth: Option<(NodeId, &Laplacian, usize)>,
) -> NodeId {
    let mut attn = multihead_attention_block(tape, spec, x, layer);
    if let Some((alpha, lap, t)) = smooth {
        attn = tape.smooth(attn, alpha, lap, t);
    }
    let res = tape.add(x, attn);
    tape.layer_norm_rows(res, layer.ln_gain, layer.ln_bias)
}
