use std::collections::{BTreeMap, HashMap};

use crate::error::{GradError, Result};
use crate::graph::{dot_norms, softmax_groups, Graph, Op, Var};
use crate::kernels::{gemm_nt_acc, gemm_tn_acc};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradient of one stored parameter.
///
/// Embedding tables only receive gradient on the rows that were looked up,
/// so they are kept sparse by row until something forces a dense layout.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad<T> {
    Dense(Vec<T>),
    Rows {
        n_rows: usize,
        width: usize,
        rows: BTreeMap<usize, Vec<T>>,
    },
}

impl<T: Scalar> ParamGrad<T> {
    pub fn to_dense(&self) -> Vec<T> {
        match self {
            ParamGrad::Dense(v) => v.clone(),
            ParamGrad::Rows {
                n_rows,
                width,
                rows,
            } => {
                let mut out = vec![T::zero(); n_rows * width];
                for (&r, vals) in rows {
                    for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(vals) {
                        *o += v;
                    }
                }
                out
            }
        }
    }

    /// Visits every explicitly stored entry as `(flat index, value)`.
    pub fn for_each(&self, mut f: impl FnMut(usize, T)) {
        match self {
            ParamGrad::Dense(v) => v.iter().enumerate().for_each(|(i, &g)| f(i, g)),
            ParamGrad::Rows { width, rows, .. } => {
                for (&r, vals) in rows {
                    for (k, &g) in vals.iter().enumerate() {
                        f(r * width + k, g);
                    }
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad<T>) {
        match (&mut *self, other) {
            (ParamGrad::Dense(a), ParamGrad::Dense(b)) => {
                for (x, &y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            (ParamGrad::Dense(a), ParamGrad::Rows { width, rows, .. }) => {
                for (&r, vals) in rows {
                    for (x, &y) in a[r * width..(r + 1) * width].iter_mut().zip(vals) {
                        *x += y;
                    }
                }
            }
            (ParamGrad::Rows { rows: a, .. }, ParamGrad::Rows { rows: b, .. }) => {
                for (&r, vals) in b {
                    match a.get_mut(&r) {
                        Some(dst) => {
                            for (x, &y) in dst.iter_mut().zip(vals) {
                                *x += y;
                            }
                        }
                        None => {
                            a.insert(r, vals.clone());
                        }
                    }
                }
            }
            (ParamGrad::Rows { .. }, ParamGrad::Dense(b)) => {
                let mut dense = self.to_dense();
                for (x, &y) in dense.iter_mut().zip(b) {
                    *x += y;
                }
                *self = ParamGrad::Dense(dense);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        match self {
            ParamGrad::Dense(v) => v.iter_mut().for_each(|x| *x *= factor),
            ParamGrad::Rows { rows, .. } => rows
                .values_mut()
                .flat_map(|r| r.iter_mut())
                .for_each(|x| *x *= factor),
        }
    }

    pub fn sum_sq(&self) -> T {
        let mut s = T::zero();
        self.for_each(|_, g| s += g * g);
        s
    }

    pub fn has_non_finite(&self) -> bool {
        let mut bad = false;
        self.for_each(|_, g| bad |= !g.is_finite());
        bad
    }
}

/// Output of [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    params: Vec<Option<ParamGrad<T>>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Empty gradients sized for a parameter store.
    pub fn zeros_for(store: &ParamStore<T>) -> Self {
        Self {
            params: vec![None; store.len()],
            leaves: HashMap::new(),
        }
    }

    /// Gradient of a leaf created with [`Graph::leaf`]. Leaves that the
    /// seed does not depend on get a zero tensor.
    pub fn wrt(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&leaf)
    }

    pub fn param(&self, id: ParamId) -> Option<&ParamGrad<T>> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    /// Dense gradient of a parameter; zeros if it was not reached.
    pub fn param_dense(&self, id: ParamId, numel: usize) -> Vec<T> {
        match self.param(id) {
            Some(g) => g.to_dense(),
            None => vec![T::zero(); numel],
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Accumulates another set of parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.add_assign(src),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.params.iter_mut().flatten() {
            g.scale(factor);
        }
    }

    /// Euclidean norm over all parameter gradients.
    pub fn norm(&self) -> T {
        self.params
            .iter()
            .flatten()
            .map(ParamGrad::sum_sq)
            .sum::<T>()
            .sqrt()
    }

    pub fn has_non_finite(&self) -> bool {
        self.params.iter().flatten().any(ParamGrad::has_non_finite)
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.index()].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

impl<T: Scalar> Graph<'_, T> {
    /// Reverse-mode sweep from a scalar seed.
    pub fn backward(&self, seed: Var) -> Result<Gradients<T>> {
        let seed_value = self.value(seed);
        if seed_value.numel() != 1 {
            return Err(GradError::NonScalarSeed(seed_value.shape().to_vec()));
        }
        let n_params = self.store().map_or(0, ParamStore::len);
        let mut out = Gradients {
            params: vec![None; n_params],
            leaves: HashMap::new(),
        };
        let mut grads: Vec<Option<Vec<T>>> = vec![None; seed.index() + 1];
        grads[seed.index()] = Some(vec![T::one()]);

        for idx in (0..=seed.index()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let var = Var(idx);
            let need = |v: Var| self.nodes[v.index()].requires_grad;
            match &node.op {
                Op::Leaf => {
                    let shape = self.value(var).shape().to_vec();
                    out.leaves.insert(var, Tensor::new(shape, g)?);
                }
                Op::Constant => {}
                Op::Param(id) => {
                    let pg = ParamGrad::Dense(g);
                    match &mut out.params[id.index()] {
                        Some(existing) => existing.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.value(a);
                    let bv = self.value(b);
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    if need(a) {
                        acc(&mut grads, a, m * k, |da| {
                            gemm_nt_acc(&g, bv.data(), da, m, n, k)
                        });
                    }
                    if need(b) {
                        acc(&mut grads, b, k * n, |db| {
                            gemm_tn_acc(av.data(), &g, db, m, k, n)
                        });
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    let len = g.len();
                    if need(*a) {
                        acc(&mut grads, *a, len, |d| add_into(d, &g, T::one()));
                    }
                    if need(*b) {
                        acc(&mut grads, *b, len, |d| add_into(d, &g, sign));
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let len = g.len();
                    if need(a) {
                        let bv = self.value(b).data();
                        acc(&mut grads, a, len, |d| {
                            for ((x, &gi), &y) in d.iter_mut().zip(&g).zip(bv) {
                                *x += gi * y;
                            }
                        });
                    }
                    if need(b) {
                        let av = self.value(a).data();
                        acc(&mut grads, b, len, |d| {
                            for ((x, &gi), &y) in d.iter_mut().zip(&g).zip(av) {
                                *x += gi * y;
                            }
                        });
                    }
                }
                Op::Scale(a, factor) => {
                    let len = g.len();
                    acc(&mut grads, *a, len, |d| add_into(d, &g, *factor));
                }
                Op::AddColBroadcast(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    let (m, n) = (self.value(x).rows(), self.value(x).cols());
                    if need(x) {
                        acc(&mut grads, x, m * n, |d| add_into(d, &g, T::one()));
                    }
                    if need(bias) {
                        acc(&mut grads, bias, m, |d| {
                            for i in 0..m {
                                d[i] += g[i * n..(i + 1) * n].iter().copied().sum::<T>();
                            }
                        });
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.value(var).data();
                    acc(&mut grads, *a, g.len(), |d| {
                        for ((x, &gi), &yi) in d.iter_mut().zip(&g).zip(y) {
                            *x += gi * yi * (T::one() - yi);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = self.value(var).data();
                    acc(&mut grads, *a, g.len(), |d| {
                        for ((x, &gi), &yi) in d.iter_mut().zip(&g).zip(y) {
                            *x += gi * (T::one() - yi * yi);
                        }
                    });
                }
                Op::Relu(a) => {
                    let xin = self.value(*a).data();
                    acc(&mut grads, *a, g.len(), |d| {
                        for ((x, &gi), &xi) in d.iter_mut().zip(&g).zip(xin) {
                            if xi > T::zero() {
                                *x += gi;
                            }
                        }
                    });
                }
                Op::Softmax { input, mask, axis } => {
                    let y = self.value(var);
                    let (r, c) = (y.rows(), y.cols());
                    let y = y.data();
                    acc(&mut grads, *input, g.len(), |d| {
                        for group in softmax_groups(r, c, *axis) {
                            let inner: T = group
                                .iter()
                                .filter(|&&i| mask[i])
                                .map(|&i| g[i] * y[i])
                                .sum();
                            for &i in group.iter().filter(|&&i| mask[i]) {
                                d[i] += y[i] * (g[i] - inner);
                            }
                        }
                    });
                }
                Op::MaxOverTime { input, argmax } => {
                    let steps = self.value(*input).cols();
                    let len = self.value(*input).numel();
                    acc(&mut grads, *input, len, |d| {
                        for (row, &t) in argmax.iter().enumerate() {
                            d[row * steps + t] += g[row];
                        }
                    });
                }
                Op::Dropout { input, scale } => {
                    acc(&mut grads, *input, g.len(), |d| {
                        for ((x, &gi), &s) in d.iter_mut().zip(&g).zip(scale) {
                            *x += gi * s;
                        }
                    });
                }
                Op::MaskCols { input, mask } => {
                    let c = mask.len();
                    acc(&mut grads, *input, g.len(), |d| {
                        for (i, (x, &gi)) in d.iter_mut().zip(&g).enumerate() {
                            if mask[i % c] {
                                *x += gi;
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        if need(p) {
                            let src = &g[offset..offset + len];
                            acc(&mut grads, p, len, |d| add_into(d, src, T::one()));
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = self.value(var).cols();
                    let r = self.value(var).rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if need(p) {
                            acc(&mut grads, p, r * w, |d| {
                                for i in 0..r {
                                    let src = &g[i * total + offset..i * total + offset + w];
                                    add_into(&mut d[i * w..(i + 1) * w], src, T::one());
                                }
                            });
                        }
                        offset += w;
                    }
                }
                Op::SliceRows { input, start } => {
                    let c = self.value(*input).cols();
                    let len = self.value(*input).numel();
                    let s = *start;
                    acc(&mut grads, *input, len, |d| {
                        add_into(&mut d[s * c..s * c + g.len()], &g, T::one())
                    });
                }
                Op::SliceCols { input, start } => {
                    let (r, c) = (self.value(*input).rows(), self.value(*input).cols());
                    let w = self.value(var).cols();
                    let s = *start;
                    acc(&mut grads, *input, r * c, |d| {
                        for i in 0..r {
                            add_into(&mut d[i * c + s..i * c + s + w], &g[i * w..(i + 1) * w], T::one());
                        }
                    });
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.value(var).rows(), self.value(var).cols());
                    acc(&mut grads, *a, r * c, |d| {
                        // output is r x c, input is c x r
                        for i in 0..r {
                            for j in 0..c {
                                d[j * r + i] += g[i * c + j];
                            }
                        }
                    });
                }
                Op::Embed { table, ids } => {
                    let tv = self.value(*table);
                    let (n_rows, width) = (tv.rows(), tv.cols());
                    let n = ids.len();
                    if let Op::Param(pid) = self.nodes[table.index()].op {
                        let mut rows: BTreeMap<usize, Vec<T>> = BTreeMap::new();
                        for (j, &id) in ids.iter().enumerate() {
                            let row = rows.entry(id).or_insert_with(|| vec![T::zero(); width]);
                            for (k, x) in row.iter_mut().enumerate() {
                                *x += g[k * n + j];
                            }
                        }
                        let pg = ParamGrad::Rows {
                            n_rows,
                            width,
                            rows,
                        };
                        match &mut out.params[pid.index()] {
                            Some(existing) => existing.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    } else {
                        acc(&mut grads, *table, n_rows * width, |d| {
                            for (j, &id) in ids.iter().enumerate() {
                                for k in 0..width {
                                    d[id * width + k] += g[k * n + j];
                                }
                            }
                        });
                    }
                }
                Op::Unfold { input, k, left } => {
                    let (c, steps) = (self.value(*input).rows(), self.value(*input).cols());
                    let (k, left) = (*k, *left);
                    acc(&mut grads, *input, c * steps, |d| {
                        for o in 0..k {
                            for t in 0..steps {
                                let s = t as isize + o as isize - left as isize;
                                if s < 0 || s >= steps as isize {
                                    continue;
                                }
                                let s = s as usize;
                                for ch in 0..c {
                                    d[ch * steps + s] += g[(o * c + ch) * steps + t];
                                }
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let len = self.value(*a).numel();
                    let g0 = g[0];
                    acc(&mut grads, *a, len, |d| d.iter_mut().for_each(|x| *x += g0));
                }
                Op::Cosine { a, b, degenerate } => {
                    if *degenerate {
                        continue;
                    }
                    let (a, b) = (*a, *b);
                    let av = self.value(a).data();
                    let bv = self.value(b).data();
                    let (dot, na, nb) = dot_norms(av, bv);
                    let cos = dot / (na * nb);
                    let g0 = g[0];
                    if need(a) {
                        acc(&mut grads, a, av.len(), |d| {
                            for ((x, &ai), &bi) in d.iter_mut().zip(av).zip(bv) {
                                *x += g0 * (bi / (na * nb) - cos * ai / (na * na));
                            }
                        });
                    }
                    if need(b) {
                        acc(&mut grads, b, bv.len(), |d| {
                            for ((x, &ai), &bi) in d.iter_mut().zip(av).zip(bv) {
                                *x += g0 * (ai / (na * nb) - cos * bi / (nb * nb));
                            }
                        });
                    }
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let var = Var(idx);
                out.leaves
                    .entry(var)
                    .or_insert_with(|| Tensor::zeros(self.value(var).shape()));
            }
        }
        Ok(out)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T], factor: T) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += factor * y;
    }
}
