//! Building blocks of the scorer, written against a [`Graph`].
//!
//! Sequences are `dim x T` matrices with one column per token. A `mask`
//! marks real tokens; masked columns are zero in every layer output.

use gradkit::{Graph, MaxPooled, ParamId, Scalar, SoftmaxAxis, Tensor, Var};

use crate::config::AttentionMode;
use crate::data::vocab::{TokenKind, TokenSeq};
use crate::error::{Error, Result};

/// The twelve arrays of one LSTM direction. `P` is a [`ParamId`] in
/// storage and a [`Var`] once placed on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams<P> {
    pub w_i: P,
    pub w_f: P,
    pub w_o: P,
    pub w_c: P,
    pub u_i: P,
    pub u_f: P,
    pub u_o: P,
    pub u_c: P,
    pub b_i: P,
    pub b_f: P,
    pub b_o: P,
    pub b_c: P,
}

impl<P: Copy> LstmParams<P> {
    pub const NAMES: [&'static str; 12] = [
        "W_i", "W_f", "W_o", "W_c", "U_i", "U_f", "U_o", "U_c", "b_i", "b_f", "b_o", "b_c",
    ];

    pub fn to_array(&self) -> [P; 12] {
        [
            self.w_i, self.w_f, self.w_o, self.w_c, self.u_i, self.u_f, self.u_o, self.u_c,
            self.b_i, self.b_f, self.b_o, self.b_c,
        ]
    }

    pub fn from_array(a: [P; 12]) -> Self {
        let [w_i, w_f, w_o, w_c, u_i, u_f, u_o, u_c, b_i, b_f, b_o, b_c] = a;
        Self {
            w_i,
            w_f,
            w_o,
            w_c,
            u_i,
            u_f,
            u_o,
            u_c,
            b_i,
            b_f,
            b_o,
            b_c,
        }
    }

    pub fn try_map<Q: Copy, E>(&self, mut f: impl FnMut(P) -> std::result::Result<Q, E>) -> std::result::Result<LstmParams<Q>, E> {
        let a = self.to_array();
        let mut out = Vec::with_capacity(12);
        for p in a {
            out.push(f(p)?);
        }
        Ok(LstmParams::from_array(out.try_into().ok().expect("twelve entries")))
    }
}

impl LstmParams<ParamId> {
    pub fn bind<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<LstmParams<Var>> {
        Ok(self.try_map(|id| g.param(id))?)
    }
}

/// Gate weights stacked in `i, f, o, c` order so one product per step
/// serves all four gates.
#[derive(Clone, Copy, Debug)]
pub struct LstmStack {
    w: Var,
    u: Var,
    b: Var,
    d_c: usize,
}

impl LstmStack {
    pub fn new<T: Scalar>(g: &mut Graph<'_, T>, p: &LstmParams<Var>) -> Result<Self> {
        let d_c = g.value(p.u_i).rows();
        Ok(Self {
            w: g.concat_rows(&[p.w_i, p.w_f, p.w_o, p.w_c])?,
            u: g.concat_rows(&[p.u_i, p.u_f, p.u_o, p.u_c])?,
            b: g.concat_rows(&[p.b_i, p.b_f, p.b_o, p.b_c])?,
            d_c,
        })
    }

    pub fn cell_dim(&self) -> usize {
        self.d_c
    }

    /// `W x + b` for every column of `x` at once.
    fn input_preacts<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let wx = g.matmul(self.w, x)?;
        Ok(g.add_col_broadcast(wx, self.b)?)
    }

    /// One recurrence step given the input pre-activation `W x_t + b`.
    fn step<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        wx_t: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let d = self.d_c;
        let uh = g.matmul(self.u, h_prev)?;
        let pre = g.add(wx_t, uh)?;
        let i_pre = g.slice_rows(pre, 0, d)?;
        let f_pre = g.slice_rows(pre, d, d)?;
        let o_pre = g.slice_rows(pre, 2 * d, d)?;
        let c_pre = g.slice_rows(pre, 3 * d, d)?;
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let o = g.sigmoid(o_pre);
        let cand = g.tanh(c_pre);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(write, keep)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }
}

/// `i, f, o = σ(W x + U h + b)`, `c = i ⊙ tanh(W_c x + U_c h + b_c) + f ⊙ c_prev`,
/// `h = o ⊙ tanh(c)`. Inputs are column vectors.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmParams<Var>,
) -> Result<(Var, Var)> {
    let stack = LstmStack::new(g, p)?;
    let wx = stack.input_preacts(g, x_t)?;
    stack.step(g, wx, h_prev, c_prev)
}

/// Runs one direction over the unmasked columns of `x`, visiting them in
/// `order`. Masked steps leave the state untouched and output zeros.
fn lstm_pass<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    mask: &[bool],
    stack: &LstmStack,
    reverse: bool,
) -> Result<Var> {
    let steps = g.value(x).cols();
    let d = stack.d_c;
    let wx = stack.input_preacts(g, x)?;
    let zero = g.constant(Tensor::zeros(&[d, 1]));
    let (mut h, mut c) = (zero, zero);
    let mut outputs = vec![zero; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        if !mask[t] {
            continue;
        }
        let wx_t = g.column(wx, t)?;
        (h, c) = stack.step(g, wx_t, h, c)?;
        outputs[t] = h;
    }
    Ok(g.concat_cols(&outputs)?)
}

/// Forward states stacked over backward states, `2 d_c x T`.
pub fn bilstm_encode<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    mask: &[bool],
    fwd: &LstmStack,
    bwd: &LstmStack,
) -> Result<Var> {
    let steps = g.value(x).cols();
    if steps == 0 || !mask.iter().any(|&m| m) {
        return Err(Error::Degenerate("bilstm_encode: empty sequence".into()));
    }
    if mask.len() != steps {
        return Err(Error::Input(format!(
            "mask has {} entries for {steps} steps",
            mask.len()
        )));
    }
    let f = lstm_pass(g, x, mask, fwd, false)?;
    let b = lstm_pass(g, x, mask, bwd, true)?;
    Ok(g.concat_rows(&[f, b])?)
}

/// Looks up each position in the table its kind names; padding
/// positions are constant zero columns.
pub fn embed_tokens<T: Scalar>(
    g: &mut Graph<'_, T>,
    seq: &TokenSeq,
    words: Var,
    relations: Var,
) -> Result<Var> {
    if seq.is_empty() {
        return Err(Error::Degenerate("cannot embed an empty sequence".into()));
    }
    let d = g.value(words).cols();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < seq.len() {
        let kind = seq.kinds[start];
        let mut end = start;
        while end < seq.len() && seq.kinds[end] == kind {
            end += 1;
        }
        let ids: Vec<usize> = seq.ids[start..end].iter().map(|&i| i as usize).collect();
        let part = match kind {
            TokenKind::Word => g.embed(words, &ids),
            TokenKind::Relation => g.embed(relations, &ids),
            TokenKind::Pad => Ok(g.constant(Tensor::zeros(&[d, ids.len()]))),
        }
        .map_err(|e| match e {
            gradkit::GradError::IndexOutOfRange { index, rows } => Error::Vocabulary(format!(
                "token id {index} outside a table of {rows} rows"
            )),
            other => other.into(),
        })?;
        parts.push(part);
        start = end;
    }
    Ok(g.concat_cols(&parts)?)
}

/// `σ(W_i X) ⊙ tanh(W_u X)`.
pub fn gated_linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w_i: Var, w_u: Var) -> Result<Var> {
    let gi = g.matmul(w_i, x)?;
    let gate = g.sigmoid(gi);
    let gu = g.matmul(w_u, x)?;
    let val = g.tanh(gu);
    Ok(g.mul(gate, val)?)
}

fn pair_mask(r_mask: &[bool], q_mask: &[bool]) -> Vec<bool> {
    r_mask
        .iter()
        .flat_map(|&r| q_mask.iter().map(move |&q| r && q))
        .collect()
}

fn check_sides(q_mask: &[bool], r_mask: &[bool]) -> Result<()> {
    if !q_mask.iter().any(|&m| m) || !r_mask.iter().any(|&m| m) {
        return Err(Error::Degenerate(
            "attention needs at least one real token on each side".into(),
        ));
    }
    Ok(())
}

/// Raw compatibility scores `Rᵀ W_A Q`, `|R| x |Q|`.
pub fn attention_scores<T: Scalar>(g: &mut Graph<'_, T>, q: Var, r: Var, w_a: Var) -> Result<Var> {
    let wq = g.matmul(w_a, q)?;
    let rt = g.transpose(r);
    Ok(g.matmul(rt, wq)?)
}

#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    /// `|R| x |Q|` weights.
    pub a: Var,
    /// `R A`, one attended relation summary per question word.
    pub rhat: Var,
}

/// Normalized attention of each question word over the relation tokens.
pub fn attention_align<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    r: Var,
    w_a: Var,
    mode: AttentionMode,
    q_mask: &[bool],
    r_mask: &[bool],
) -> Result<Alignment> {
    check_sides(q_mask, r_mask)?;
    let scores = attention_scores(g, q, r, w_a)?;
    let mask = pair_mask(r_mask, q_mask);
    let a = match mode {
        AttentionMode::PerQuestionWord => g.softmax_masked_or_zero(scores, &mask, SoftmaxAxis::Columns)?,
        AttentionMode::Global => g.softmax_masked(scores, &mask, SoftmaxAxis::Global)?,
    };
    let rhat = g.matmul(r, a)?;
    Ok(Alignment { a, rhat })
}

/// Every real (relation, question) entry weighted `1 / (|R| |Q|)`.
pub fn uniform_align<T: Scalar>(
    g: &mut Graph<'_, T>,
    r: Var,
    q_mask: &[bool],
    r_mask: &[bool],
) -> Result<Alignment> {
    check_sides(q_mask, r_mask)?;
    let nq = q_mask.iter().filter(|&&m| m).count();
    let nr = r_mask.iter().filter(|&&m| m).count();
    let w = T::one() / T::from_f64_lossy((nq * nr) as f64);
    let data = pair_mask(r_mask, q_mask)
        .into_iter()
        .map(|m| if m { w } else { T::zero() })
        .collect();
    let a = g.constant(Tensor::matrix(r_mask.len(), q_mask.len(), data)?);
    let rhat = g.matmul(r, a)?;
    Ok(Alignment { a, rhat })
}

/// `M = [Q; R̂]`.
pub fn build_interactions<T: Scalar>(g: &mut Graph<'_, T>, q: Var, rhat: Var) -> Result<Var> {
    Ok(g.concat_rows(&[q, rhat])?)
}

/// A bank of `n` filters of width `k` over `C` channels, stored as an
/// `n x (k C)` matrix whose column `o C + c` weights channel `c` at
/// window offset `o`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock<P> {
    pub k: usize,
    pub filters: P,
    pub bias: P,
}

impl ConvBlock<ParamId> {
    pub fn bind<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<ConvBlock<Var>> {
        Ok(ConvBlock {
            k: self.k,
            filters: g.param(self.filters)?,
            bias: g.param(self.bias)?,
        })
    }
}

/// Left padding that keeps a width-`k` convolution length preserving.
pub fn left_pad(k: usize) -> usize {
    (k - 1) / 2
}

/// Same-length convolution followed by relu, `n x T`.
pub fn conv_relu<T: Scalar>(g: &mut Graph<'_, T>, x: Var, block: &ConvBlock<Var>) -> Result<Var> {
    let windows = g.unfold(x, block.k, left_pad(block.k))?;
    let lin = g.matmul(block.filters, windows)?;
    let biased = g.add_col_broadcast(lin, block.bias)?;
    Ok(g.relu(biased))
}

/// Multi-kernel convolution used as a sequence encoder: block outputs
/// stacked in the given order, masked columns zeroed.
pub fn conv_same<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    blocks: &[ConvBlock<Var>],
    mask: &[bool],
) -> Result<Var> {
    let mut outs = Vec::with_capacity(blocks.len());
    for b in blocks {
        outs.push(conv_relu(g, x, b)?);
    }
    let stacked = g.concat_rows(&outs)?;
    Ok(g.mask_cols(stacked, mask)?)
}

pub struct Compared {
    /// Pooled features, `d_f |blocks| x 1`.
    pub features: Var,
    /// One pooling record per block, in block order.
    pub pooled: Vec<MaxPooled>,
}

/// Convolution, relu and masked max-over-time per block; features are
/// concatenated in block order (blocks are kept in ascending kernel size).
pub fn conv_compare<T: Scalar>(
    g: &mut Graph<'_, T>,
    m: Var,
    blocks: &[ConvBlock<Var>],
    mask: &[bool],
) -> Result<Compared> {
    let mut pooled = Vec::with_capacity(blocks.len());
    for b in blocks {
        let c = conv_relu(g, m, b)?;
        pooled.push(g.max_over_time(c, mask)?);
    }
    let parts: Vec<Var> = pooled.iter().map(|p| p.value).collect();
    let features = g.concat_rows(&parts)?;
    Ok(Compared { features, pooled })
}

/// `o = w_oᵀ f` for a `1 x F` weight row.
pub fn score_linear<T: Scalar>(g: &mut Graph<'_, T>, f: Var, w_o: Var) -> Result<Var> {
    Ok(g.matmul(w_o, f)?)
}
