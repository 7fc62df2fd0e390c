//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; a node's inputs always
//! precede it, so walking the node list backwards is a valid reverse
//! topological order. Nodes that do not depend on any gradient-requiring
//! leaf are skipped during the backward sweep.
//!
//! All reductions run left to right in a fixed order so identical inputs
//! give bit-identical outputs.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a length-`n` row to every row of an `m×n` input.
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    macs: u64,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any reached it) into `tensor.grad`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) {
        if !tensor.requires_grad() {
            return;
        }
        if let Some(g) = self.get(v) {
            tensor.accumulate_grad(g);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYERNORM_EPS: f64 = 1e-5;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            *shape.last().unwrap(),
        ),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Every output element accumulates over `k` in increasing order.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 4;
    let mut i = 0;
    while i + MR <= m {
        let ar: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..k {
                let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("NR columns");
                for r in 0..MR {
                    let av = ar[r][p];
                    for c in 0..NR {
                        acc[r][c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        for r in 0..MR {
            for jj in j..n {
                let mut s = out[(i + r) * n + jj];
                for p in 0..k {
                    s += ar[r][p] * b[p * n + jj];
                }
                out[(i + r) * n + jj] = s;
            }
        }
        i += MR;
    }
    for i in i..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose(b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; b.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = b[i * cols + j];
        }
    }
    t
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_acc(a, &bt, out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by matrix products on this tape.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    /// Clears all nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
        self.macs = 0;
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the node value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(Error::dim("constant", format!("shape {shape:?} vs {} values", values.len())));
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    /// Copy of `v` cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]: inner dimensions differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("[{m}, {k}] x [{n}, {k2}]^T: inner dimensions differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast-adds `row` (length = last axis of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a));
        if numel(self.shape(row)) != n {
            return Err(Error::dim(
                "add_row",
                format!("row {:?} does not match last axis of {:?}", self.shape(row), self.shape(a)),
            ));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(0.0, |acc, x| acc + x);
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Picks rows of a matrix (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of range for {m} rows")));
        }
        if idx.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![idx.len(), n], out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, len], out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let (_, n) = self.mat_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, n2) = self.mat_dims(p, "concat_rows")?;
            if n2 != n {
                return Err(Error::dim("concat_rows", format!("width {n2} vs {n}")));
            }
            rows += m;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (m, _) = self.mat_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m2, n) = self.mat_dims(p, "concat_cols")?;
            if m2 != m {
                return Err(Error::dim("concat_cols", format!("height {m2} vs {m}")));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Max-stabilized softmax over `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_strides(&shape, axis);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mut mx = f64::NEG_INFINITY;
                for i in 0..len {
                    mx = mx.max(x[at(i)]);
                }
                let mut z = 0.0;
                for i in 0..len {
                    let e = (x[at(i)] - mx).exp();
                    out[at(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[at(i)] /= z;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Softmax { input: a, axis }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let axis = self.shape(a).len() - 1;
        self.softmax(a, axis)
    }

    /// Per-row layer normalization with affine gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if numel(self.shape(gain)) != n || numel(self.shape(bias)) != n {
            return Err(Error::dim(
                "layernorm",
                format!(
                    "gain {:?} / bias {:?} vs last axis {n}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0; m * n];
        let mut normalized = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().fold(0.0, |s, v| s + v) / n as f64;
            let var = row.iter().fold(0.0, |s, v| s + (v - mean) * (v - mean)) / n as f64;
            let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                normalized[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg)
    }

    /// Scales every row to unit L2 norm. Zero rows are a contract violation.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a));
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let nrm = row.iter().fold(0.0, |s, v| s + v * v).sqrt();
            if nrm == 0.0 {
                return Err(Error::contract(format!("row {i} has zero norm")));
            }
            norms[i] = nrm;
            for j in 0..n {
                out[i * n + j] = row[j] / nrm;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::NormalizeRows { input: a, norms }, rg))
    }

    /// `-log softmax(logits restricted to unmasked classes)[label]`.
    ///
    /// `mask[c] == true` keeps class `c`; an empty mask keeps every class.
    pub fn cross_entropy(&mut self, logits: Var, label: usize, mask: &[bool]) -> Result<Var> {
        let c = numel(self.shape(logits));
        let mask: Vec<bool> = if mask.is_empty() { vec![true; c] } else { mask.to_vec() };
        if mask.len() != c {
            return Err(Error::dim("cross_entropy", format!("mask {} vs {c} classes", mask.len())));
        }
        if label >= c {
            return Err(Error::contract(format!("label {label} out of range for {c} classes")));
        }
        if !mask[label] {
            return Err(Error::contract(format!("label {label} is masked out")));
        }
        let z = self.value(logits);
        let mx = z
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .fold(f64::NEG_INFINITY, |a, (&v, _)| a.max(v));
        let mut probs = vec![0.0; c];
        let mut total = 0.0;
        for i in 0..c {
            if mask[i] {
                probs[i] = (z[i] - mx).exp();
                total += probs[i];
            }
        }
        for p in probs.iter_mut() {
            *p /= total;
        }
        let loss = -(z[label] - mx - total.ln());
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                label,
                mask,
                probs,
            },
            rg,
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::contract("backward called twice without reset"));
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(*a) {
                    gemm_nt_acc(g, &nodes[b.0].value, acc!(*a), m, n, k);
                }
                if wants(*b) {
                    gemm_tn_acc(&nodes[a.0].value, g, acc!(*b), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                if wants(*a) {
                    gemm_acc(g, &nodes[b.0].value, acc!(*a), m, n, k);
                }
                if wants(*b) {
                    gemm_tn_acc(g, &nodes[a.0].value, acc!(*b), m, n, k);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    for (o, x) in acc!(*a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if wants(*b) {
                    for (o, x) in acc!(*b).iter_mut().zip(g) {
                        *o += sign * x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    for ((o, x), y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    for ((o, x), y) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    for (o, x) in acc!(*a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if wants(*row) {
                    let n = nodes[row.0].value.len();
                    let r = acc!(*row);
                    for (i, x) in g.iter().enumerate() {
                        r[i % n] += x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    for (o, x) in acc!(*a).iter_mut().zip(g) {
                        *o += c * x;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    for o in acc!(*a).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    for (o, x) in acc!(*a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if wants(*a) {
                    let n = nodes[a.0].shape[1];
                    let dst = acc!(*a);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            dst[src * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let w = node.shape[1];
                    let dst = acc!(*a);
                    for i in 0..m {
                        for j in 0..w {
                            dst[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(*p) {
                        for (o, x) in acc!(*p).iter_mut().zip(&g[off..off + len]) {
                            *o += x;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    if wants(*p) {
                        let dst = acc!(*p);
                        for i in 0..m {
                            for j in 0..w {
                                dst[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Softmax { input, axis } => {
                if wants(*input) {
                    let (outer, len, inner) = axis_strides(&node.shape, *axis);
                    let y = &node.value;
                    let dst = acc!(*input);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let mut dot = 0.0;
                            for i in 0..len {
                                dot += g[at(i)] * y[at(i)];
                            }
                            for i in 0..len {
                                dst[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (m, n) = rows_cols(&node.shape);
                if wants(*gain) {
                    let dg = acc!(*gain);
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * normalized[i * n + j];
                        }
                    }
                }
                if wants(*bias) {
                    let db = acc!(*bias);
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                }
                if wants(*input) {
                    let gv = &nodes[gain.0].value;
                    let dx = acc!(*input);
                    for i in 0..m {
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..n {
                            let gh = g[i * n + j] * gv[j];
                            mean_gh += gh;
                            mean_ghx += gh * normalized[i * n + j];
                        }
                        mean_gh /= n as f64;
                        mean_ghx /= n as f64;
                        for j in 0..n {
                            let gh = g[i * n + j] * gv[j];
                            dx[i * n + j] +=
                                inv_std[i] * (gh - mean_gh - normalized[i * n + j] * mean_ghx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let xs = &nodes[a.0].value;
                    for ((o, &x), &gx) in acc!(*a).iter_mut().zip(xs).zip(g) {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *o += gx * d;
                    }
                }
            }
            Op::NormalizeRows { input, norms } => {
                if wants(*input) {
                    let (m, n) = rows_cols(&node.shape);
                    let y = &node.value;
                    let dx = acc!(*input);
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[i * n + j] * y[i * n + j];
                        }
                        for j in 0..n {
                            dx[i * n + j] += (g[i * n + j] - y[i * n + j] * dot) / norms[i];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                mask,
                probs,
            } => {
                if wants(*logits) {
                    let dz = acc!(*logits);
                    for i in 0..probs.len() {
                        if mask[i] {
                            let t = if i == *label { 1.0 } else { 0.0 };
                            dz[i] += g[0] * (probs[i] - t);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(&t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(&t2(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(&t2(&[&[1.0, 2.0]]));
        let b = tape.constant(&t2(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
        assert_eq!(tape.shape(c), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_small_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::vector(vec![0.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
        let a = tape.constant(&Tensor::vector(vec![1.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert!((tape.value(s)[0] - 0.73106).abs() < 1e-5);
        assert!((tape.value(s)[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut tape = Tape::new();
        let a = tape.constant(&t2(&[&[1.0, 5.0], &[2.0, -3.0], &[0.5, 0.0]]));
        let s = tape.softmax(a, 0).unwrap();
        let v = tape.value(s);
        for j in 0..2 {
            let col: f64 = (0..3).map(|i| v[i * 2 + j]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        assert!(tape.softmax(a, 2).is_err());
    }

    #[test]
    fn layernorm_constant_and_pair() {
        let mut tape = Tape::new();
        let g = tape.constant(&Tensor::filled(vec![4], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![4]));
        let x = tape.constant(&Tensor::filled(vec![1, 4], 5.0));
        let y = tape.layernorm(x, g, b).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-12));

        let g = tape.constant(&Tensor::filled(vec![2], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![2]));
        let x = tape.constant(&t2(&[&[1.0, -1.0]]));
        let y = tape.layernorm(x, g, b).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-2);
        assert!((tape.value(y)[1] + 1.0).abs() < 1e-2);
    }

    #[test]
    fn gelu_and_cross_entropy() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::vector(vec![0.0]));
        let y = tape.gelu(z);
        assert_eq!(tape.value(y), &[0.0]);

        let z = tape.constant(&Tensor::vector(vec![1.7, 1.7]));
        let l = tape.cross_entropy(z, 0, &[]).unwrap();
        assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // Masked class 2 must behave as if it never existed.
        let z = tape.constant(&Tensor::vector(vec![10.0, 0.0, 0.0]));
        let masked = tape.cross_entropy(z, 0, &[true, true, false]).unwrap();
        let z2 = tape.constant(&Tensor::vector(vec![10.0, 0.0]));
        let two = tape.cross_entropy(z2, 0, &[]).unwrap();
        assert_eq!(tape.value(masked), tape.value(two));

        let err = tape.cross_entropy(z, 2, &[true, true, false]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn backward_sum_and_zero_scale() {
        let w = Tensor::vector(vec![1.0, -2.0, 3.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let s = tape.sum(v);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let z = tape.scale(v, 0.0);
        let s = tape.sum(z);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_contracts() {
        let w = Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));

        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        tape.reset();
        let v = tape.leaf(&w);
        let s = tape.sum(v);
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn disconnected_leaf_gets_no_gradient() {
        let mut w = Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true);
        let mut other = Tensor::vector(vec![4.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let o = tape.leaf(&other);
        let s = tape.sum(v);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(o).is_none());
        grads.accumulate_into(v, &mut w);
        grads.accumulate_into(o, &mut other);
        assert_eq!(w.grad().unwrap(), &[1.0, 1.0]);
        assert!(other.grad().is_none());
    }

    #[test]
    fn normalize_rows_rejects_zero() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(vec![1, 3]));
        assert!(matches!(tape.normalize_rows(z), Err(Error::Contract(_))));
    }

    #[test]
    fn mac_counter_tracks_products() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![4, 5]));
        let b = tape.constant(&Tensor::zeros(vec![5, 3]));
        tape.matmul(a, b).unwrap();
        let c = tape.constant(&Tensor::zeros(vec![2, 5]));
        tape.matmul_nt(a, c).unwrap();
        assert_eq!(tape.mac_count(), 60 + 40);
    }
}
