//! Dense reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs are
//! earlier nodes, so the node vector is already in topological order and
//! [`Graph::backward`] is a single reverse sweep. Trainable tensors live in a
//! [`ParamStore`] that the graph borrows immutably; parameter leaves read their
//! values straight from the store instead of copying them onto the tape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rank-2 view of the shape: vectors are rows, scalars are 1×1.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Ok((1, 1)),
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("rank {} tensors unsupported", s.len()))),
        }
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters are skipped by the optimizer.
    pub trainable: bool,
}

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    names: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` already exists")));
        }
        let id = ParamId(self.params.len());
        self.names.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
    Tanh,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Softmax(Var),
    MaskFill(Var, Vec<bool>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
}

struct Node {
    /// Empty for parameter leaves; their values live in the store.
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op,
}

/// Gradients keyed by parameter. Parameters the loss never reached have no
/// entry; [`Gradients::get`] reports them as zero.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId, store: &ParamStore) -> Tensor {
        let shape = store.value(id).shape().to_vec();
        match &self.grads[id.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    /// Raw gradient, `None` when the parameter was not reached.
    pub fn raw(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn reached(&self, id: ParamId) -> bool {
        self.raw(id).is_some()
    }
}

/// Tape of operations recorded during one forward pass.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Below this many multiply-adds, packing overhead dominates the blocked
/// kernel and a plain row-axpy loop is faster.
const SMALL_GEMM: usize = 1 << 18;

/// `c (+)= op(a) · b` for row-major `b`, accumulating rows of `b` into rows of `c`.
#[allow(clippy::too_many_arguments)]
fn small_gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], c: &mut [f64], accumulate: bool) {
    if !accumulate {
        c[..m * n].fill(0.0);
    }
    for (i, crow) in c.chunks_exact_mut(n).take(m).enumerate() {
        for (p, brow) in b.chunks_exact(n).take(k).enumerate() {
            let aip = if a_t { a[p * m + i] } else { a[i * k + p] };
            if aip == 0.0 {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c (+)= op(a) · op(b)` with `op` an optional transpose; `a` is logically
/// m×k and `b` k×n after the transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if !b_t && m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, a_t, b, c, accumulate);
        return;
    }
    // Row/column strides of the logical operands.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn values(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.value(id).data(),
            _ => &node.value,
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Materialized value of a node as a rank-2 tensor.
    pub fn value(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor {
            shape: vec![r, c],
            data: self.values(v).to_vec(),
        }
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        let vals = self.values(v);
        (vals.len() == 1).then(|| vals[0])
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(t.data.clone(), r, c, Op::Constant, false))
    }

    pub fn constant_vec(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "{rows}×{cols} constant from {} values",
                data.len()
            )));
        }
        Ok(self.push(data, rows, cols, Op::Constant, false))
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let p = self.store.get(id);
        let (r, c) = p.value.dims2()?;
        Ok(self.push(Vec::new(), r, c, Op::Param(id), p.trainable))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.values(a);
        let out: Vec<f64> = match kind {
            Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Unary::Tanh => x.iter().map(|&v| v.tanh()).collect(),
            Unary::Exp => x.iter().map(|&v| v.exp()).collect(),
            Unary::Log => {
                if let Some(bad) = x.iter().find(|&&v| !(v > 0.0)) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                x.iter().map(|&v| v.ln()).collect()
            }
            Unary::Square => x.iter().map(|&v| v * v).collect(),
        };
        let (r, c) = self.dims(a);
        let ng = self.needs(a);
        Ok(self.push(out, r, c, Op::Unary(kind, a), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (Some(r), Some(c)) = (broadcast_dim(ar, br), broadcast_dim(ac, bc)) else {
            return Err(Error::Shape(format!(
                "cannot broadcast {ar}×{ac} with {br}×{bc}"
            )));
        };
        let xa = self.values(a);
        let xb = self.values(b);
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let mut out = Vec::with_capacity(r * c);
        if ar == br && ac == bc {
            out.extend(xa.iter().zip(xb).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..r {
                let ia = if ar == 1 { 0 } else { i };
                let ib = if br == 1 { 0 } else { i };
                for j in 0..c {
                    let ja = if ac == 1 { 0 } else { j };
                    let jb = if bc == 1 { 0 } else { j };
                    out.push(f(xa[ia * ac + ja], xb[ib * bc + jb]));
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, r, c, Op::Binary(kind, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.values(a).iter().map(|&v| v * k).collect();
        let (r, c) = self.dims(a);
        let ng = self.needs(a);
        Ok(self.push(out, r, c, Op::Scale(a, k), ng))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let one = self.constant_vec(1, 1, vec![1.0])?;
        self.sub(one, a)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.values(a).iter().map(|&v| v.clamp(lo, hi)).collect();
        let (r, c) = self.dims(a);
        let ng = self.needs(a);
        Ok(self.push(out, r, c, Op::Clamp(a, lo, hi), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}×{k} by {k2}×{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.values(a), false, self.values(b), false, &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, m, n, Op::MatMul(a, b), ng))
    }

    /// `x·W + b` with `b` broadcast across rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, out_dim) = self.dims(w);
        let (br, bc) = self.dims(b);
        if br != 1 || bc != out_dim {
            return Err(Error::Shape(format!(
                "bias {br}×{bc} does not match output width {out_dim}"
            )));
        }
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = self.values(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, c, r, Op::Transpose(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.values(a).iter().sum();
        let ng = self.needs(a);
        Ok(self.push(vec![s], 1, 1, Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.values(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let ng = self.needs(a);
        Ok(self.push(vec![s], 1, 1, Op::Mean(a), ng))
    }

    /// Column-wise mean over rows: r×c → 1×c.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = self.values(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.needs(a);
        Ok(self.push(out, 1, c, Op::MeanRows(a), ng))
    }

    /// Softmax over every element of `a`; `-inf` entries are masked to 0.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax(self.values(a))?;
        let (r, c) = self.dims(a);
        let ng = self.needs(a);
        Ok(self.push(out, r, c, Op::Softmax(a), ng))
    }

    /// Keep entries where `keep` is set, replace the rest with `-inf`.
    pub fn mask_fill(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        let x = self.values(a);
        if keep.len() != x.len() {
            return Err(Error::Shape(format!(
                "mask of {} for {} entries",
                keep.len(),
                x.len()
            )));
        }
        let out = x
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { f64::NEG_INFINITY })
            .collect();
        let (r, c) = self.dims(a);
        let ng = self.needs(a);
        Ok(self.push(out, r, c, Op::MaskFill(a, keep), ng))
    }

    /// Horizontal concatenation. Single-row parts are broadcast to the row
    /// count of the tallest part.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let rows = parts.iter().map(|&p| self.dims(p).0).max().unwrap_or(1);
        for &p in parts {
            let (r, _) = self.dims(p);
            if r != rows && r != 1 {
                return Err(Error::Shape(format!("concat rows {r} vs {rows}")));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let (r, c) = self.dims(p);
                let src = if r == 1 { 0 } else { i };
                out.extend_from_slice(&self.values(p)[src * c..(src + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, rows, cols, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Vertical stacking of parts with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat of zero tensors".into()));
        };
        let cols = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::Shape(format!("stack cols {c} vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.values(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, rows, cols, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::Shape(format!("column slice {start}..{end} of {c}")));
        }
        let x = self.values(a);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        let ng = self.needs(a);
        Ok(self.push(out, r, w, Op::SliceCols(a, start, end), ng))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}×{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match &mut out.grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                },
                Op::Unary(kind, a) => {
                    let y = &node.value;
                    let x = self.values(*a);
                    let d: Vec<f64> = match kind {
                        Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                        Unary::Relu => g
                            .iter()
                            .zip(x)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                        Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                        Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                        Unary::Square => g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                    };
                    self.accumulate(&mut grads, *a, &d);
                }
                Op::Binary(kind, a, b) => {
                    let (r, c) = (node.rows, node.cols);
                    let (ar, ac) = self.dims(*a);
                    let (br, bc) = self.dims(*b);
                    let xa = self.values(*a);
                    let xb = self.values(*b);
                    let same = ar == br && ac == bc;
                    if self.needs(*a) {
                        let mut da = vec![0.0; ar * ac];
                        for i in 0..r {
                            for j in 0..c {
                                let gij = g[i * c + j];
                                let ia = if ar == 1 { 0 } else { i };
                                let ja = if ac == 1 { 0 } else { j };
                                let contrib = match kind {
                                    Binary::Add | Binary::Sub => gij,
                                    Binary::Mul => {
                                        let ib = if br == 1 { 0 } else { i };
                                        let jb = if bc == 1 { 0 } else { j };
                                        let other = if same { xb[i * c + j] } else { xb[ib * bc + jb] };
                                        gij * other
                                    }
                                };
                                da[ia * ac + ja] += contrib;
                            }
                        }
                        self.accumulate(&mut grads, *a, &da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; br * bc];
                        for i in 0..r {
                            for j in 0..c {
                                let gij = g[i * c + j];
                                let ib = if br == 1 { 0 } else { i };
                                let jb = if bc == 1 { 0 } else { j };
                                let contrib = match kind {
                                    Binary::Add => gij,
                                    Binary::Sub => -gij,
                                    Binary::Mul => {
                                        let ia = if ar == 1 { 0 } else { i };
                                        let ja = if ac == 1 { 0 } else { j };
                                        gij * xa[ia * ac + ja]
                                    }
                                };
                                db[ib * bc + jb] += contrib;
                            }
                        }
                        self.accumulate(&mut grads, *b, &db);
                    }
                }
                Op::Scale(a, k) => {
                    let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                    self.accumulate(&mut grads, *a, &d);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.values(*a);
                    let d: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, &d);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = node.cols;
                    if self.needs(*a) {
                        // dA = G · Bᵀ
                        let slot = self.slot(&mut grads, *a);
                        gemm(m, n, k, &g, false, self.values(*b), true, slot, true);
                    }
                    if self.needs(*b) {
                        // dB = Aᵀ · G
                        let slot = self.slot(&mut grads, *b);
                        gemm(k, m, n, self.values(*a), true, &g, false, slot, true);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.rows, node.cols);
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] = g[i * c + j];
                        }
                    }
                    self.accumulate(&mut grads, *a, &d);
                }
                Op::Sum(a) => {
                    let n = self.values(*a).len();
                    self.accumulate(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.values(*a).len();
                    self.accumulate(&mut grads, *a, &vec![g[0] / n as f64; n]);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.dims(*a);
                    let inv = 1.0 / r as f64;
                    let mut d = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        d.extend(g.iter().map(|v| v * inv));
                    }
                    self.accumulate(&mut grads, *a, &d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot: f64 = y.iter().zip(&g).map(|(y, g)| y * g).sum();
                    let d: Vec<f64> = y.iter().zip(&g).map(|(y, g)| y * (g - dot)).collect();
                    self.accumulate(&mut grads, *a, &d);
                }
                Op::MaskFill(a, keep) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(keep)
                        .map(|(g, &k)| if k { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, &d);
                }
                Op::ConcatCols(parts) => {
                    let (rows, cols) = (node.rows, node.cols);
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.dims(p);
                        if self.needs(p) {
                            let mut d = vec![0.0; r * c];
                            for i in 0..rows {
                                let dst = if r == 1 { 0 } else { i };
                                for j in 0..c {
                                    d[dst * c + j] += g[i * cols + offset + j];
                                }
                            }
                            self.accumulate(&mut grads, p, &d);
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.values(p).len();
                        if self.needs(p) {
                            let d = g[offset..offset + n].to_vec();
                            self.accumulate(&mut grads, p, &d);
                        }
                        offset += n;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = self.dims(*a);
                    let w = end - start;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    self.accumulate(&mut grads, *a, &d);
                }
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = {
            let (r, c) = self.dims(v);
            r * c
        };
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(d.to_vec()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax. `-inf` entries are masked: they are left out
/// of the max subtraction and map to exactly zero.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let max = v
        .iter()
        .copied()
        .filter(|x| *x != f64::NEG_INFINITY)
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
    let Some(max) = max else {
        return Err(Error::EmptySupport);
    };
    let mut out: Vec<f64> = v
        .iter()
        .map(|&x| {
            if x == f64::NEG_INFINITY {
                0.0
            } else {
                (x - max).exp()
            }
        })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= z);
    Ok(out)
}

/// `x·W + b` evaluated outside any training graph.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let xv = g.constant(x)?;
    let wv = g.constant(w)?;
    let bv = g.constant(b)?;
    let y = g.linear(xv, wv, bv)?;
    Ok(g.value(y))
}

/// Apply one elementwise primitive outside a training graph.
pub fn elementwise_unary(kind: Unary, x: &Tensor) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let xv = g.constant(x)?;
    let y = g.unary(kind, xv)?;
    Ok(g.value(y))
}

pub fn elementwise_binary(kind: Binary, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let av = g.constant(a)?;
    let bv = g.constant(b)?;
    let y = g.binary(kind, av, bv)?;
    Ok(g.value(y))
}

/// Compares backprop gradients of `loss_fn` against central differences over
/// every trainable scalar in `store`. Returns the largest
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(store: &ParamStore, eps: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step {eps} must be positive")));
    }
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = loss_fn(&mut g)?;
        g.scalar(loss)
            .ok_or_else(|| Error::Contract("loss is not scalar".into()))
    };

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let grad = analytic.get(id, store);
        for k in 0..p.value.len() {
            let orig = p.value.data()[k];
            probe.value_mut(id).data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[k];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data()[i * k + t] * b.data()[t * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn linear_zero_input_yields_bias() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::matrix(3, 2, vec![0.3, -1.0, 2.0, 0.5, 7.0, 1.1]).unwrap();
        let b = Tensor::vector(vec![1.0, 2.0]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        assert_eq!(y.shape(), &[1, 2]);
    }

    #[test]
    fn linear_identity() {
        let x = Tensor::matrix(1, 2, vec![4.0, 5.0]).unwrap();
        let y = linear(&x, &Tensor::identity(2), &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (n, di, d_o) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
            let x = random_tensor(&mut rng, n, di);
            let w = random_tensor(&mut rng, di, d_o);
            let b = random_tensor(&mut rng, 1, d_o);
            let y = linear(&x, &w, &b).unwrap();
            let mm = naive_matmul(&x, &w);
            for i in 0..n {
                for j in 0..d_o {
                    let want = mm[i * d_o + j] + b.data()[j];
                    assert!((y.data()[i * d_o + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_shape_mismatch() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(linear(&x, &w, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn elementwise_examples() {
        let s = elementwise_unary(Unary::Sigmoid, &Tensor::scalar(0.0)).unwrap();
        assert_eq!(s.item(), Some(0.5));
        let r = elementwise_unary(Unary::Relu, &Tensor::scalar(-3.0)).unwrap();
        assert_eq!(r.item(), Some(0.0));
        let xs: Vec<f64> = (0..50).map(|i| 0.1 + i as f64 * (9.9 / 49.0)).collect();
        let x = Tensor::vector(xs.clone());
        let back = elementwise_unary(Unary::Exp, &elementwise_unary(Unary::Log, &x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(&xs) {
            assert!((a - b).abs() < 1e-12);
        }
        let err = elementwise_unary(Unary::Log, &Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(err, Err(Error::Domain(_))));
        let sum = elementwise_binary(Binary::Add, &Tensor::vector(vec![1.0, 2.0]), &Tensor::scalar(1.0)).unwrap();
        assert_eq!(sum.data(), &[2.0, 3.0]);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in u {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[2.5, f64::NEG_INFINITY]).unwrap(), vec![1.0, 0.0]);
        let p = softmax(&[3.0, 0.0]).unwrap();
        let e3 = 3f64.exp();
        assert!((p[0] - e3 / (e3 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.95257).abs() < 1e-5);
        assert!((p[1] - 0.04743).abs() < 1e-5);
        assert!(matches!(
            softmax(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            Err(Error::EmptySupport)
        ));
    }

    #[test]
    fn backward_linear_gradient() {
        // loss = sum(x·W): dL/dW[i][j] = x[i] for every output j.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()).unwrap();
        let other = store.add("unused", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(&Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        let wv = g.param(w).unwrap();
        let y = g.matmul(x, wv).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w, &store).data(), &[1.0, 1.0, -2.0, -2.0, 3.0, 3.0]);
        assert!(!grads.reached(other));
        assert_eq!(grads.get(other, &store).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    /// Every primitive through a small composite, against central differences.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", random_tensor(&mut rng, 3, 4)).unwrap();
        let b1 = store.add("b1", random_tensor(&mut rng, 1, 4)).unwrap();
        let w2 = store.add("w2", random_tensor(&mut rng, 4, 2)).unwrap();
        let v = store.add("v", random_tensor(&mut rng, 1, 6)).unwrap();
        let x = random_tensor(&mut rng, 5, 3);
        let err = finite_diff_check(&store, 1e-5, |g| {
            let xv = g.constant(&x)?;
            let w1v = g.param(w1)?;
            let b1v = g.param(b1)?;
            let h = g.linear(xv, w1v, b1v)?;
            let t = g.tanh(h)?;
            let s = g.sigmoid(h)?;
            let gated = g.mul(t, s)?;
            let r = g.relu(h)?;
            let h2 = g.add(gated, r)?;
            let w2v = g.param(w2)?;
            let o = g.matmul(h2, w2v)?;
            let ot = g.transpose(o)?;
            let pooled = g.mean_rows(o)?;
            let sq = g.square(pooled)?;
            let e = g.exp(sq)?;
            let vv = g.param(v)?;
            let sm = g.softmax(vv)?;
            let masked = g.mask_fill(vv, vec![true, false, true, true, false, true])?;
            let sm2 = g.softmax(masked)?;
            let cat = g.concat_cols(&[e, pooled])?;
            let sl = g.slice_cols(sm, 1, 5)?;
            let stacked = g.concat_rows(&[cat, sl])?;
            let cl = g.clamp(stacked, 0.0, 1.5)?;
            let pos = g.add(cl, sl)?;
            let lg = g.log(pos)?;
            let diff = g.sub(lg, sl)?;
            let a = g.sum(diff)?;
            let b = g.mean(ot)?;
            let c = g.sum(sm2)?;
            let sc = g.scale(b, 0.7)?;
            let ab = g.add(a, sc)?;
            let cm = g.mul(c, ab)?;
            g.one_minus(cm)
        })
        .unwrap();
        assert!(err < 1e-6, "finite-difference error {err}");
    }

    #[test]
    fn quadratic_and_constant_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&mut rng, 3, 3)).unwrap();
        let err = finite_diff_check(&store, 1e-5, |g| {
            let wv = g.param(w)?;
            let sq = g.square(wv)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-8);
        let zero = finite_diff_check(&store, 1e-5, |g| g.constant_vec(1, 1, vec![2.0])).unwrap();
        assert_eq!(zero, 0.0);
        assert!(finite_diff_check(&store, 0.0, |g| g.constant_vec(1, 1, vec![2.0])).is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&mut rng, 8, 8)).unwrap();
        let x = random_tensor(&mut rng, 4, 8);
        let run = || {
            let mut g = Graph::new(&store);
            let xv = g.constant(&x).unwrap();
            let wv = g.param(w).unwrap();
            let y = g.matmul(xv, wv).unwrap();
            let s = g.softmax(y).unwrap();
            g.value(s)
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_a_probability_vector(
            vals in proptest::collection::vec(-50.0f64..50.0, 1..12),
            mask in proptest::collection::vec(proptest::bool::ANY, 12),
        ) {
            let mut v = vals.clone();
            for (x, m) in v.iter_mut().zip(&mask) {
                if *m { *x = f64::NEG_INFINITY; }
            }
            match softmax(&v) {
                Ok(p) => {
                    let s: f64 = p.iter().sum();
                    proptest::prop_assert!((s - 1.0).abs() < 1e-12);
                    for (pi, vi) in p.iter().zip(&v) {
                        proptest::prop_assert!(*pi >= 0.0);
                        if *vi == f64::NEG_INFINITY { proptest::prop_assert_eq!(*pi, 0.0); }
                    }
                }
                Err(e) => {
                    proptest::prop_assert!(v.iter().all(|x| *x == f64::NEG_INFINITY));
                    proptest::prop_assert!(matches!(e, Error::EmptySupport));
                }
            }
        }
    }
}
