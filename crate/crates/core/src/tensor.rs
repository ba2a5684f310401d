//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to its variables in program
//! order; [`Tape::backward`] replays the records in reverse and accumulates
//! gradients additively into every variable flagged as requiring them.
//! Tensors on the tape are immutable once created. A tape belongs to one
//! unit of work (one cell's forward/backward pass); independent tapes never
//! share state.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Plain value container: row-major data plus shape. Rank is 1 or 2 in
/// practice (scalars are `[1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in shape {:?}", shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) view; rank-1 tensors count as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// a: m×n plus row vector b: 1×n broadcast over rows.
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of primitive operations; inputs always precede outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite tensor produced by {:?}", op);
        let grad = if requires_grad {
            Some(vec![0.0; value.len()])
        } else {
            None
        };
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward`; zeros until then.
    pub fn grad(&self, v: Var) -> Result<&[f64]> {
        self.nodes[v.0]
            .grad
            .as_deref()
            .ok_or_else(|| Error::contract("gradient requested for a non-differentiable variable"))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.grad {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    // ── forward primitives ──────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2();
        let (kb, n) = self.value(b).dims2();
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, m, ka, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let src = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires_grad(a);
        self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            rg,
            Op::Transpose(a),
        )
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor { shape, data: out }, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).data.iter().map(|&x| x * c).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.requires_grad(a);
        self.push(Tensor { shape, data: out }, rg, Op::Scale(a, c))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let (bm, bn) = self.value(b).dims2();
        if bm != 1 || bn != n {
            return Err(Error::shape(format!(
                "row broadcast expects 1×{} vector, got {:?}",
                n,
                self.value(b).shape
            )));
        }
        let bd = self.value(b).data.clone();
        let out: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % n]))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, op))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, Op::AddRow(a, b), |x, y| x + y)
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, Op::MulRow(a, b), |x, y| x * y)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.requires_grad(a);
        self.push(Tensor { shape, data: out }, rg, Op::Relu(a))
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).is_finite() {
            return Err(Error::Numeric("softmax over non-finite input".into()));
        }
        let (m, n) = self.value(a).dims2();
        let src = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::SoftmaxRows(a)))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (m, n) = self.value(a).dims2();
        let src = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let rg = self.requires_grad(a);
        self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            rg,
            Op::LayerNormRows(a, eps),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.value(a).dims2();
        let (mb, nb) = self.value(b).dims2();
        if m != mb {
            return Err(Error::shape(format!(
                "concat_cols row counts disagree: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(&self.value(a).data[i * na..(i + 1) * na]);
            out.extend_from_slice(&self.value(b).data[i * nb..(i + 1) * nb]);
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, na + nb], out)?, rg, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if start >= end || end > n {
            return Err(Error::shape(format!(
                "slice_cols [{start}, {end}) out of range for {n} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.value(a).data[i * n + start..i * n + end]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(vec![m, w], out)?, rg, Op::SliceCols(a, start, end)))
    }

    /// Select rows of `a` by index, in order, with repetition allowed.
    /// Backward scatter-adds, so shared rows accumulate.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::shape(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        if indices.is_empty() {
            return Err(Error::shape("gather_rows with empty index list".to_string()));
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&self.value(a).data[i * n..(i + 1) * n]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(vec![indices.len(), n], out)?,
            rg,
            Op::GatherRows(a, indices.to_vec()),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.value(a).data.iter().sum::<f64>() / n;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulate dL/dv into every differentiable variable reachable from
    /// `loss`. Gradients add across calls; use `zero_grads` to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::contract(
                "loss does not depend on any differentiable variable",
            ));
        }
        // Local upstream buffers so leaf accumulation from previous backward
        // calls is preserved while internal nodes start fresh.
        let mut up: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        up[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            let g = match up[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Fold into the node's persistent accumulator.
            {
                let acc = self.nodes[idx].grad.as_mut().unwrap();
                for (a, &x) in acc.iter_mut().zip(&g) {
                    *a += x;
                }
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.value(a).dims2();
                    let (_, n) = self.value(b).dims2();
                    if self.requires_grad(a) {
                        // dA = dC · Bᵀ
                        let bt = transpose_raw(&self.value(b).data, k, n);
                        let da = matmul_raw(&g, &bt, m, n, k);
                        add_into(&mut up, a.0, &da);
                    }
                    if self.requires_grad(b) {
                        // dB = Aᵀ · dC
                        let at = transpose_raw(&self.value(a).data, m, k);
                        let db = matmul_raw(&at, &g, k, m, n);
                        add_into(&mut up, b.0, &db);
                    }
                }
                Op::Transpose(a) => {
                    let (n, m) = self.value(Var(idx)).dims2();
                    let da = transpose_raw(&g, n, m);
                    add_into(&mut up, a.0, &da);
                }
                Op::Add(a, b) => {
                    if self.requires_grad(a) {
                        add_into(&mut up, a.0, &g);
                    }
                    if self.requires_grad(b) {
                        add_into(&mut up, b.0, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(a) {
                        add_into(&mut up, a.0, &g);
                    }
                    if self.requires_grad(b) {
                        let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                        add_into(&mut up, b.0, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(a) {
                        let da: Vec<f64> =
                            g.iter().zip(&self.value(b).data).map(|(&x, &y)| x * y).collect();
                        add_into(&mut up, a.0, &da);
                    }
                    if self.requires_grad(b) {
                        let db: Vec<f64> =
                            g.iter().zip(&self.value(a).data).map(|(&x, &y)| x * y).collect();
                        add_into(&mut up, b.0, &db);
                    }
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|&x| x * c).collect();
                    add_into(&mut up, a.0, &da);
                }
                Op::AddRow(a, b) => {
                    let (m, n) = self.value(a).dims2();
                    if self.requires_grad(a) {
                        add_into(&mut up, a.0, &g);
                    }
                    if self.requires_grad(b) {
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += g[i * n + j];
                            }
                        }
                        add_into(&mut up, b.0, &db);
                    }
                }
                Op::MulRow(a, b) => {
                    let (m, n) = self.value(a).dims2();
                    if self.requires_grad(a) {
                        let bd = &self.value(b).data;
                        let da: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| x * bd[i % n])
                            .collect();
                        add_into(&mut up, a.0, &da);
                    }
                    if self.requires_grad(b) {
                        let ad = &self.value(a).data;
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += g[i * n + j] * ad[i * n + j];
                            }
                        }
                        add_into(&mut up, b.0, &db);
                    }
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.value(a).data)
                        .map(|(&x, &v)| if v > 0.0 { x } else { 0.0 })
                        .collect();
                    add_into(&mut up, a.0, &da);
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = self.value(Var(idx)).dims2();
                    let y = &self.value(Var(idx)).data;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let dot: f64 = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                        for j in 0..n {
                            da[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                    add_into(&mut up, a.0, &da);
                }
                Op::LayerNormRows(a, eps) => {
                    let (m, n) = self.value(a).dims2();
                    let x = &self.value(a).data;
                    let xhat = &self.value(Var(idx)).data;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &x[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = (0..n).map(|j| g[i * n + j]).sum::<f64>() / n as f64;
                        let gxhat = (0..n)
                            .map(|j| g[i * n + j] * xhat[i * n + j])
                            .sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            da[i * n + j] =
                                inv * (g[i * n + j] - gmean - xhat[i * n + j] * gxhat);
                        }
                    }
                    add_into(&mut up, a.0, &da);
                }
                Op::ConcatCols(a, b) => {
                    let (m, na) = self.value(a).dims2();
                    let (_, nb) = self.value(b).dims2();
                    let w = na + nb;
                    if self.requires_grad(a) {
                        let mut da = vec![0.0; m * na];
                        for i in 0..m {
                            da[i * na..(i + 1) * na]
                                .copy_from_slice(&g[i * w..i * w + na]);
                        }
                        add_into(&mut up, a.0, &da);
                    }
                    if self.requires_grad(b) {
                        let mut db = vec![0.0; m * nb];
                        for i in 0..m {
                            db[i * nb..(i + 1) * nb]
                                .copy_from_slice(&g[i * w + na..(i + 1) * w]);
                        }
                        add_into(&mut up, b.0, &db);
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (m, n) = self.value(a).dims2();
                    let w = end - start;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..w {
                            da[i * n + start + j] = g[i * w + j];
                        }
                    }
                    add_into(&mut up, a.0, &da);
                }
                Op::GatherRows(a, ref indices) => {
                    let (_, n) = self.value(a).dims2();
                    let rows = self.value(a).dims2().0;
                    let mut da = vec![0.0; rows * n];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..n {
                            da[i * n + j] += g[k * n + j];
                        }
                    }
                    add_into(&mut up, a.0, &da);
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.value(a).len()];
                    add_into(&mut up, a.0, &da);
                }
                Op::Mean(a) => {
                    let n = self.value(a).len();
                    let da = vec![g[0] / n as f64; n];
                    add_into(&mut up, a.0, &da);
                }
            }
        }
        Ok(())
    }
}

fn add_into(up: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut up[idx] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        None => up[idx] = Some(g.to_vec()),
    }
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// ikj loop order keeps the inner loop contiguous in both b and out.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
