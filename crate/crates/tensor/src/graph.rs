//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert list: every op appends one node holding its output
//! value and the information its backward rule needs. Node indices are
//! therefore a topological order, and [`Graph::backward`] walks them in reverse
//! exactly once. Graphs are built per forward pass and then dropped.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::float::{gemm, Float};
use crate::tensor::{matrix_dims, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: T },
    Relu { x: Var },
    Gelu { x: Var },
    Tanh { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    CausalSoftmax { x: Var },
    LogSoftmax { x: Var, mask: Option<Vec<bool>> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    GatherRows { table: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    SumAll { x: Var },
    MeanAll { x: Var },
    SumAxis { x: Var, len: usize, inner: usize, mean: bool },
    L2Normalize { x: Var, norms: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    PickPerRow { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by [`Graph::backward`], if `v` requires one.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Fails with [`TensorError::NonFinite`] if `v` holds NaN or ±∞.
    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what.to_owned()))
        }
    }

    // ------------------------------------------------------------------
    // linear algebra
    // ------------------------------------------------------------------

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(TensorError::dim(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// `[g×m×k] · [g×k×n] → [g×m×n]`, or `[g×m×k] · [g×n×k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ga, m, k], &[gb, b1, b2]) = (&sa[..], &sb[..]) else {
            return Err(TensorError::dim("batch_matmul", format!("expected 3-D operands, got {sa:?} and {sb:?}")));
        };
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if ga != gb || k != kb {
            return Err(TensorError::dim("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); ga * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for g in 0..ga {
                gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..(g + 1) * m * k],
                    false,
                    &bv[g * k * n..(g + 1) * k * n],
                    trans_b,
                    &mut out[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![ga, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b, batch: ga, m, k, n },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // elementwise
    // ------------------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let vx = self.value(x);
        Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Adds a vector along the last axis: `x[..., j] + bias[j]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [cols] {
            return Err(TensorError::dim(
                "add_row",
                format!("bias {:?} does not match last axis of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let data = vx.data().chunks(cols).flat_map(|r| r.iter().zip(&bv).map(|(&a, &b)| a + b)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.map(x, |v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_A), T::from_f64_lossy(0.5));
        let out = self.map(x, |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh { x }, rg)
    }

    /// Zeroes each entry with probability `p` and rescales survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..self.value(x).numel()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    // ------------------------------------------------------------------
    // normalization
    // ------------------------------------------------------------------

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis("softmax", self.shape(x), axis)?;
        let vx = self.value(x);
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Softmax over the last axis of `[g×t×t]` scores with a strict causal mask.
    ///
    /// Entry `(q, k)` is kept when `k ≤ q` and, if `key_valid` is given,
    /// `key_valid[g·t + k]` holds. Masked entries are exactly zero, which is the
    /// limit of adding −∞ before the softmax. A query with no visible key gets
    /// an all-zero row.
    pub fn causal_softmax(&mut self, x: Var, key_valid: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [groups, tq, tk] = shape[..] else {
            return Err(TensorError::dim("causal_softmax", format!("expected [g, t, t], got {shape:?}")));
        };
        if tq != tk || tk == 0 {
            return Err(TensorError::dim("causal_softmax", format!("scores must be square and non-empty, got {shape:?}")));
        }
        if let Some(mask) = key_valid {
            if mask.len() != groups * tk {
                return Err(TensorError::dim(
                    "causal_softmax",
                    format!("key mask has {} entries, expected {}", mask.len(), groups * tk),
                ));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for g in 0..groups {
            let visible = |k: usize| key_valid.is_none_or(|m| m[g * tk + k]);
            for q in 0..tq {
                let row = (g * tq + q) * tk;
                let mut max = T::neg_infinity();
                for k in (0..=q).filter(|&k| visible(k)) {
                    max = max.max(src[row + k]);
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut total = T::zero();
                for k in (0..=q).filter(|&k| visible(k)) {
                    let e = (src[row + k] - max).exp();
                    out[row + k] = e;
                    total += e;
                }
                for v in &mut out[row..=row + q] {
                    *v /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::CausalSoftmax { x }, rg))
    }

    /// Log-softmax over the last axis.
    ///
    /// With `mask`, only entries where it is `true` take part; excluded entries
    /// are reported as `0` and receive no gradient, so callers must give them
    /// zero weight downstream.
    pub fn log_softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| TensorError::dim("log_softmax", "scalar input"))?;
        if cols == 0 {
            return Err(TensorError::dim("log_softmax", "empty axis"));
        }
        let src = self.value(x).data();
        if let Some(m) = &mask {
            if m.len() != src.len() {
                return Err(TensorError::dim("log_softmax", "mask size differs from input"));
            }
        }
        let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        let mut out = vec![T::zero(); src.len()];
        for r in 0..src.len() / cols {
            let base = r * cols;
            let max = (base..base + cols).filter(|&i| keep(i)).map(|i| src[i]).fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let total: T = (base..base + cols).filter(|&i| keep(i)).map(|i| (src[i] - max).exp()).sum();
            let lse = max + total.ln();
            for i in (base..base + cols).filter(|&i| keep(i)) {
                out[i] = src[i] - lse;
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax { x, mask }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| TensorError::dim("layer_norm", "scalar input"))?;
        if cols == 0 {
            return Err(TensorError::dim("layer_norm", "empty last axis"));
        }
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(TensorError::dim(
                "layer_norm",
                format!("gain {:?} / bias {:?} vs last axis {cols}", self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = T::from_f64_lossy(eps);
        let n = T::from_usize(cols).unwrap();
        let (src, gv, bv) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / cols;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..cols {
                let h = (row[j] - mean) * s;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Divides each last-axis vector by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| TensorError::dim("l2_normalize", "scalar input"))?;
        let floor = T::from_f64_lossy(1e-12);
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(src.len() / cols.max(1));
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(cols.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    // ------------------------------------------------------------------
    // shape manipulation
    // ------------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::dim("permute", format!("{axes:?} is not a permutation of {} axes", shape.len())));
        }
        let out = permute_data(self.value(x), axes);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Selects rows of a 2-D `table`; indices may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = matrix_dims("gather_rows", self.shape(table))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::dim("gather_rows", format!("row {bad} out of range for {rows} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(vec![idx.len(), cols], out)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows { table, idx: idx.to_vec() }, rg))
    }

    /// Stacks 2-D tensors with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::dim("concat_rows", "no inputs"))?;
        let (_, cols) = matrix_dims("concat_rows", self.shape(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.shape(p))?;
            if c != cols {
                return Err(TensorError::dim("concat_rows", format!("column mismatch {c} vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// One entry per row of a 2-D tensor: `out[r] = x[r, idx[r]]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = matrix_dims("pick_per_row", self.shape(x))?;
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(TensorError::dim("pick_per_row", format!("{} indices for [{rows}, {cols}]", idx.len())));
        }
        let src = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &c)| src[r * cols + c]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(out), Op::PickPerRow { x, idx: idx.to_vec() }, rg))
    }

    // ------------------------------------------------------------------
    // reductions
    // ------------------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll { x }, rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::dim("mean_all", "empty tensor"));
        }
        let out = Tensor::scalar(self.value(x).sum() / T::from_usize(n).unwrap());
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanAll { x }, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("reduce_axis", &shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let n = T::from_usize(len).unwrap();
            out.iter_mut().for_each(|v| *v /= n);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SumAxis { x, len, inner, mean }, rg))
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Accumulates `∂loss/∂v` into every node that requires a gradient.
    ///
    /// Leaves that require a gradient but have no path to `loss` get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            self.zero_leaf_grads();
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
        }
        self.zero_leaf_grads();
        Ok(())
    }

    fn zero_leaf_grads(&mut self) {
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let Graph { nodes, grads } = self;
        let nodes: &[Node<T>] = nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        let y = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k, n) = (shape(a)[0], shape(a)[1], shape(b)[1]);
                if let Some(buf) = grad_buf(nodes, grads, a) {
                    gemm(m, n, k, g, false, val(b), true, buf, true);
                }
                if let Some(buf) = grad_buf(nodes, grads, b) {
                    gemm(k, m, n, val(a), true, g, false, buf, true);
                }
            }
            &Op::BatchMatMul { a, b, trans_b, batch, m, k, n } => {
                if let Some(buf) = grad_buf(nodes, grads, a) {
                    let bv = val(b);
                    for s in 0..batch {
                        // dA = dC · Bᵀ, where B is k×n (stored n×k when trans_b)
                        gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..(s + 1) * m * n],
                            false,
                            &bv[s * k * n..(s + 1) * k * n],
                            !trans_b,
                            &mut buf[s * m * k..(s + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(buf) = grad_buf(nodes, grads, b) {
                    let av = val(a);
                    for s in 0..batch {
                        let (gs, as_) = (&g[s * m * n..(s + 1) * m * n], &av[s * m * k..(s + 1) * m * k]);
                        let out = &mut buf[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            // B stored n×k: dB = dCᵀ · A
                            gemm(n, m, k, gs, true, as_, false, out, true);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, out, true);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                acc_each(nodes, grads, a, |j| g[j]);
                acc_each(nodes, grads, b, |j| g[j]);
            }
            &Op::Sub { a, b } => {
                acc_each(nodes, grads, a, |j| g[j]);
                acc_each(nodes, grads, b, |j| -g[j]);
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                acc_each(nodes, grads, a, |j| g[j] * bv[j]);
                acc_each(nodes, grads, b, |j| g[j] * av[j]);
            }
            &Op::AddRow { x, bias } => {
                acc_each(nodes, grads, x, |j| g[j]);
                if let Some(buf) = grad_buf(nodes, grads, bias) {
                    let cols = buf.len();
                    for row in g.chunks(cols) {
                        for (slot, &v) in buf.iter_mut().zip(row) {
                            *slot += v;
                        }
                    }
                }
            }
            &Op::Scale { x, c } => acc_each(nodes, grads, x, |j| g[j] * c),
            &Op::Relu { x } => {
                let xv = val(x);
                acc_each(nodes, grads, x, |j| if xv[j] > T::zero() { g[j] } else { T::zero() });
            }
            &Op::Gelu { x } => {
                let xv = val(x);
                let (c, a, half) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_A), T::from_f64_lossy(0.5));
                let three = T::from_f64_lossy(3.0);
                acc_each(nodes, grads, x, |j| {
                    let v = xv[j];
                    let t = (c * (v + a * v * v * v)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                    g[j] * (half * (T::one() + t) + half * v * dt)
                });
            }
            &Op::Tanh { x } => acc_each(nodes, grads, x, |j| g[j] * (T::one() - y[j] * y[j])),
            &Op::Softmax { x, outer, len, inner } => {
                if let Some(buf) = grad_buf(nodes, grads, x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::CausalSoftmax { x } => {
                let t = *shape(x).last().unwrap();
                if let Some(buf) = grad_buf(nodes, grads, x) {
                    for ((yr, gr), br) in y.chunks(t).zip(g.chunks(t)).zip(buf.chunks_mut(t)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..t {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, mask } => {
                let cols = *shape(*x).last().unwrap();
                let keep = |j: usize| mask.as_ref().is_none_or(|m| m[j]);
                if let Some(buf) = grad_buf(nodes, grads, *x) {
                    for r in 0..y.len() / cols {
                        let base = r * cols;
                        let total: T = (base..base + cols).filter(|&j| keep(j)).map(|j| g[j]).sum();
                        for j in (base..base + cols).filter(|&j| keep(j)) {
                            buf[j] += g[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = shape(*gain)[0];
                let gv = val(*gain);
                if let Some(buf) = grad_buf(nodes, grads, *gain) {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(buf) = grad_buf(nodes, grads, *bias) {
                    for gr in g.chunks(cols) {
                        for j in 0..cols {
                            buf[j] += gr[j];
                        }
                    }
                }
                if let Some(buf) = grad_buf(nodes, grads, *x) {
                    let n = T::from_usize(cols).unwrap();
                    for (r, (gr, hr)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..cols {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        for j in 0..cols {
                            let d = gr[j] * gv[j];
                            buf[r * cols + j] += rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            &Op::Reshape { x } => acc_each(nodes, grads, x, |j| g[j]),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (o, &a) in axes.iter().enumerate() {
                    inverse[a] = o;
                }
                let gt = Tensor::new(nodes[i].value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let back = permute_data(&gt, &inverse).into_data();
                acc_each(nodes, grads, *x, |j| back[j]);
            }
            Op::GatherRows { table, idx } => {
                let cols = shape(*table)[1];
                if let Some(buf) = grad_buf(nodes, grads, *table) {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            buf[src * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    acc_each(nodes, grads, p, |j| g[offset + j]);
                    offset += n;
                }
            }
            Op::PickPerRow { x, idx } => {
                let cols = shape(*x)[1];
                if let Some(buf) = grad_buf(nodes, grads, *x) {
                    for (r, &c) in idx.iter().enumerate() {
                        buf[r * cols + c] += g[r];
                    }
                }
            }
            &Op::SumAll { x } => acc_each(nodes, grads, x, |_| g[0]),
            &Op::MeanAll { x } => {
                let n = T::from_usize(nodes[x.0].value.numel()).unwrap();
                acc_each(nodes, grads, x, |_| g[0] / n);
            }
            &Op::SumAxis { x, len, inner, mean } => {
                let scale = if mean { T::one() / T::from_usize(len).unwrap() } else { T::one() };
                acc_each(nodes, grads, x, |j| {
                    let o = j / (len * inner);
                    g[o * inner + j % inner] * scale
                });
            }
            Op::L2Normalize { x, norms } => {
                let cols = *shape(*x).last().unwrap();
                if let Some(buf) = grad_buf(nodes, grads, *x) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let base = r * cols;
                        let dot: T = (base..base + cols).map(|j| y[j] * g[j]).sum();
                        for j in base..base + cols {
                            buf[j] += (g[j] - y[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => acc_each(nodes, grads, *x, |j| g[j] * mask[j]),
        }
    }
}

fn grad_buf<'a, T: Float>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn acc_each<T: Float>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
    if let Some(buf) = grad_buf(nodes, grads, v) {
        for (j, slot) in buf.iter_mut().enumerate() {
            *slot += f(j);
        }
    }
}

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::dim(op, format!("axis {axis} invalid for shape {shape:?}")));
    }
    if shape[axis] == 0 {
        return Err(TensorError::dim(op, format!("axis {axis} of {shape:?} is empty")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn permute_data<T: Float>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    for _ in 0..src.len() {
        let offset: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        out.push(src[offset]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permuted shape")
}
