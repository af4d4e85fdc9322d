use std::collections::HashMap;

use rand::Rng;

use crate::error::{GradError, Result};
use crate::kernels::{gemm_acc, sigmoid};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization groups for [`Graph::softmax_masked`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Each column is normalized over its rows.
    Columns,
    /// Each row is normalized over its columns.
    Rows,
    /// The whole tensor is one group.
    Global,
}

/// Result of [`Graph::max_over_time`].
#[derive(Clone, Debug)]
pub struct MaxPooled {
    /// `d x 1` column of per-row maxima.
    pub value: Var,
    /// Time index of each row's maximum (lowest index on ties).
    pub argmax: Vec<usize>,
}

pub(crate) enum Op<T> {
    Leaf,
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddColBroadcast(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        input: Var,
        mask: Vec<bool>,
        axis: SoftmaxAxis,
    },
    MaxOverTime {
        input: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        input: Var,
        scale: Vec<T>,
    },
    MaskCols {
        input: Var,
        mask: Vec<bool>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    Transpose(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Unfold {
        input: Var,
        k: usize,
        left: usize,
    },
    Sum(Var),
    Cosine {
        a: Var,
        b: Var,
        degenerate: bool,
    },
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    /// `None` for parameter nodes, whose value lives in the store.
    pub(crate) value: Option<Tensor<T>>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it
/// and a reverse sweep over the node list is a valid topological order for
/// backpropagation.
pub struct Graph<'p, T: Scalar> {
    store: Option<&'p ParamStore<T>>,
    pub(crate) nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    zero_norm_events: usize,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph without parameters; gradients are only reported for leaves.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            zero_norm_events: 0,
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn store(&self) -> Option<&'p ParamStore<T>> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of cosine evaluations that hit a zero-norm operand.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .store
                .expect("parameter node without a store")
                .get(*id),
            (None, _) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        debug_assert!(
            value.is_finite() || inputs.iter().any(|&i| !self.value(i).is_finite()),
            "non-finite forward value from finite inputs"
        );
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(value),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(value),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self.store.ok_or(GradError::NoParamStore)?;
        if id.0 >= store.len() {
            return Err(GradError::IndexOutOfRange {
                index: id.0,
                rows: store.len(),
            });
        }
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(GradError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul(a, b), t, &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if self.dims(a) != self.dims(b) {
            return Err(GradError::shape(name, self.shape(a), self.shape(b)));
        }
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), t, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let t = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), t, &[a])
    }

    /// Adds the `m x 1` column `bias` to every column of the `m x n` input.
    pub fn add_col_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(bias).numel() != m {
            return Err(GradError::shape(
                "add_col_broadcast",
                self.shape(x),
                self.shape(bias),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for v in &mut data[i * n..(i + 1) * n] {
                *v += b[i];
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(Op::AddColBroadcast(x, bias), t, &[x, bias]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(T::tanh);
        self.push(Op::Tanh(a), t, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu(a), t, &[a])
    }

    /// Exponential normalization over the unmasked entries of each group.
    ///
    /// Masked entries are exactly zero. A group with no unmasked entry is an
    /// error.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool], axis: SoftmaxAxis) -> Result<Var> {
        self.softmax_impl(x, mask, axis, false)
    }

    /// Like [`Graph::softmax_masked`], but a fully masked group yields zeros
    /// instead of an error (used for padded positions).
    pub fn softmax_masked_or_zero(
        &mut self,
        x: Var,
        mask: &[bool],
        axis: SoftmaxAxis,
    ) -> Result<Var> {
        self.softmax_impl(x, mask, axis, true)
    }

    fn softmax_impl(
        &mut self,
        x: Var,
        mask: &[bool],
        axis: SoftmaxAxis,
        allow_empty: bool,
    ) -> Result<Var> {
        let (r, c) = self.dims(x);
        if mask.len() != r * c {
            return Err(GradError::shape("softmax_masked", &[r, c], &[mask.len()]));
        }
        let input = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for group in softmax_groups(r, c, axis) {
            let live: Vec<usize> = group.iter().copied().filter(|&i| mask[i]).collect();
            if live.is_empty() {
                if allow_empty {
                    continue;
                }
                return Err(GradError::degenerate(
                    "softmax_masked",
                    "normalization group has every entry masked",
                ));
            }
            let max = live
                .iter()
                .map(|&i| input[i])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for &i in &live {
                let e = (input[i] - max).exp();
                out[i] = e;
                total += e;
            }
            for &i in &live {
                out[i] = out[i] / total;
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(
            Op::Softmax {
                input: x,
                mask: mask.to_vec(),
                axis,
            },
            t,
            &[x],
        ))
    }

    /// Per-row maximum over the unmasked time steps (columns) of a `d x T`
    /// input. Ties resolve to the lowest time index.
    pub fn max_over_time(&mut self, x: Var, mask: &[bool]) -> Result<MaxPooled> {
        let (d, steps) = self.dims(x);
        if mask.len() != steps {
            return Err(GradError::shape("max_over_time", &[d, steps], &[mask.len()]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(GradError::degenerate(
                "max_over_time",
                "every time step is masked",
            ));
        }
        let data = self.value(x).data();
        let mut values = Vec::with_capacity(d);
        let mut argmax = Vec::with_capacity(d);
        for row in 0..d {
            let mut best: Option<(usize, T)> = None;
            for t in (0..steps).filter(|&t| mask[t]) {
                let v = data[row * steps + t];
                match best {
                    Some((_, b)) if v <= b => {}
                    _ => best = Some((t, v)),
                }
            }
            let (t, v) = best.expect("at least one unmasked step");
            values.push(v);
            argmax.push(t);
        }
        let t = Tensor::column(values);
        let value = self.push(
            Op::MaxOverTime {
                input: x,
                argmax: argmax.clone(),
            },
            t,
            &[x],
        );
        Ok(MaxPooled { value, argmax })
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Outside training it returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GradError::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let scale: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let (r, c) = self.dims(x);
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&scale)
            .map(|(&v, &s)| v * s)
            .collect();
        let t = Tensor::matrix(r, c, data)?;
        Ok(self.push(Op::Dropout { input: x, scale }, t, &[x]))
    }

    /// Zeroes the columns whose mask entry is false.
    pub fn mask_cols(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if mask.len() != c {
            return Err(GradError::shape("mask_cols", &[r, c], &[mask.len()]));
        }
        if mask.iter().all(|&m| m) {
            return Ok(x);
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (j, &m) in mask.iter().enumerate() {
                if !m {
                    data[i * c + j] = T::zero();
                }
            }
        }
        let t = Tensor::matrix(r, c, data)?;
        Ok(self.push(
            Op::MaskCols {
                input: x,
                mask: mask.to_vec(),
            },
            t,
            &[x],
        ))
    }

    /// Vertical stacking of inputs with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| GradError::degenerate("concat_rows", "no inputs"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let c = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(GradError::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        let t = Tensor::matrix(rows, c, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t, parts))
    }

    /// Horizontal stacking of inputs with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| GradError::degenerate("concat_cols", "no inputs"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let r = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(GradError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let t = Tensor::matrix(r, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t, parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r || len == 0 {
            return Err(GradError::shape("slice_rows", &[r, c], &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data)?;
        Ok(self.push(Op::SliceRows { input: x, start }, t, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c || len == 0 {
            return Err(GradError::shape("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::matrix(r, len, data)?;
        Ok(self.push(Op::SliceCols { input: x, start }, t, &[x]))
    }

    /// Column `j` as an `r x 1` vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        self.slice_cols(x, j, 1)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        self.push(Op::Transpose(x), t, &[x])
    }

    /// Gathers rows of a `rows x d` table into the columns of a `d x N`
    /// output. The gradient scatter-adds back into the table rows.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(GradError::IndexOutOfRange { index: bad, rows });
        }
        if ids.is_empty() {
            return Err(GradError::degenerate("embed", "empty id sequence"));
        }
        let n = ids.len();
        let src = self.value(table).data();
        let mut data = vec![T::zero(); d * n];
        for (j, &id) in ids.iter().enumerate() {
            for k in 0..d {
                data[k * n + j] = src[id * d + k];
            }
        }
        let t = Tensor::matrix(d, n, data)?;
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            t,
            &[table],
        ))
    }

    /// Unfolds a `C x T` sequence into a `(k*C) x T` matrix of windows with
    /// zero padding, `left` positions before and `k - 1 - left` after.
    /// Row `o*C + c` of column `t` holds `x[c, t + o - left]`.
    pub fn unfold(&mut self, x: Var, k: usize, left: usize) -> Result<Var> {
        let (c, steps) = self.dims(x);
        if k == 0 || left >= k {
            return Err(GradError::Config(format!(
                "invalid window: kernel {k}, left padding {left}"
            )));
        }
        let src = self.value(x).data();
        let mut data = vec![T::zero(); k * c * steps];
        for o in 0..k {
            for t in 0..steps {
                let s = t as isize + o as isize - left as isize;
                if s < 0 || s >= steps as isize {
                    continue;
                }
                let s = s as usize;
                for ch in 0..c {
                    data[(o * c + ch) * steps + t] = src[ch * steps + s];
                }
            }
        }
        let t = Tensor::matrix(k * c, steps, data)?;
        Ok(self.push(Op::Unfold { input: x, k, left }, t, &[x]))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    /// Sum of several nodes of identical shape.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = *parts
            .first()
            .ok_or_else(|| GradError::degenerate("add_n", "no inputs"))?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Cosine similarity of two equally sized tensors, as a `1 x 1` node.
    ///
    /// A zero-norm operand yields 0 with zero gradient and increments
    /// [`Graph::zero_norm_events`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(GradError::shape("cosine", self.shape(a), self.shape(b)));
        }
        let (dot, na, nb) = dot_norms(self.value(a).data(), self.value(b).data());
        let degenerate = na == T::zero() || nb == T::zero();
        let value = if degenerate {
            self.zero_norm_events += 1;
            T::zero()
        } else {
            dot / (na * nb)
        };
        Ok(self.push(
            Op::Cosine { a, b, degenerate },
            Tensor::scalar(value),
            &[a, b],
        ))
    }
}

pub(crate) fn dot_norms<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut aa = T::zero();
    let mut bb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    (dot, aa.sqrt(), bb.sqrt())
}

/// Flat indices of each normalization group of an `r x c` matrix.
pub(crate) fn softmax_groups(r: usize, c: usize, axis: SoftmaxAxis) -> Vec<Vec<usize>> {
    match axis {
        SoftmaxAxis::Columns => (0..c)
            .map(|j| (0..r).map(|i| i * c + j).collect())
            .collect(),
        SoftmaxAxis::Rows => (0..r)
            .map(|i| (0..c).map(|j| i * c + j).collect())
            .collect(),
        SoftmaxAxis::Global => vec![(0..r * c).collect()],
    }
}
