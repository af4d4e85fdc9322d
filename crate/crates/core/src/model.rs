//! Parameter layout and the scoring variants.

use gradkit::{Graph, ParamId, ParamStore, Scalar, SoftmaxAxis, Tensor, Var};
use rand::{Rng, RngCore};

use crate::config::{EncodingPool, ModelConfig, Preprocessing, Variant};
use crate::data::embeddings::EmbeddingTables;
use crate::data::vocab::TokenSeq;
use crate::error::{Error, Result};
use crate::layers::{
    attention_align, attention_scores, bilstm_encode, build_interactions, conv_compare, conv_same,
    embed_tokens, gated_linear, score_linear, uniform_align, ConvBlock, LstmParams, LstmStack,
};

pub const WORD_EMBEDDING: &str = "embedding.word";
pub const RELATION_EMBEDDING: &str = "embedding.relation";
pub const ATTENTION: &str = "attention.W_A";
pub const OUTPUT: &str = "output.w_o";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Question,
    Relation,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Question => "question",
            Side::Relation => "relation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// `U(-0.25, 0.25)`, or copied from the provided embedding tables.
    Embedding,
    Glorot,
    Zero,
}

/// Name and shape of one stored array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn spec(name: impl Into<String>, shape: [usize; 2], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

/// Filter counts of the convolutional encoder: `width` filters split as
/// evenly as possible over the kernel sizes, earlier blocks taking the
/// remainder.
pub fn cnn_split(width: usize, n_kernels: usize) -> Vec<usize> {
    (0..n_kernels)
        .map(|i| width / n_kernels + usize::from(i < width % n_kernels))
        .collect()
}

fn lstm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_c: usize) {
    for (i, name) in LstmParams::<()>::NAMES.iter().enumerate() {
        let (shape, init) = match i {
            0..=3 => ([d_c, d_in], Init::Glorot),
            4..=7 => ([d_c, d_c], Init::Glorot),
            _ => ([d_c, 1], Init::Zero),
        };
        out.push(spec(format!("{prefix}.{name}"), shape, init));
    }
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, kernels: &[usize], filters: &[usize], channels: usize) {
    for (&k, &n) in kernels.iter().zip(filters) {
        out.push(spec(format!("{prefix}.k{k}.filters"), [n, k * channels], Init::Glorot));
        out.push(spec(format!("{prefix}.k{k}.bias"), [n, 1], Init::Zero));
    }
}

/// Every array the configuration calls for, in storage order.
pub fn param_specs(config: &ModelConfig, n_words: usize, n_relations: usize) -> Vec<ParamSpec> {
    let mut out = vec![
        spec(WORD_EMBEDDING, [n_words, config.d], Init::Embedding),
        spec(RELATION_EMBEDDING, [n_relations, config.d], Init::Embedding),
    ];
    let (q_dim, r_dim) = config.encoder_dims();
    match config.preprocessing {
        Preprocessing::BiLstm => {
            for (side, d_c) in [(Side::Question, config.d_q), (Side::Relation, config.d_r)] {
                for dir in ["fwd", "bwd"] {
                    lstm_specs(&mut out, &format!("{}.lstm.{dir}", side.name()), config.d, d_c);
                }
            }
        }
        Preprocessing::None => {}
        Preprocessing::GatedLinear => {
            let w = config.gated_width();
            out.push(spec("preprocess.gated.W_i", [w, config.d], Init::Glorot));
            out.push(spec("preprocess.gated.W_u", [w, config.d], Init::Glorot));
        }
        Preprocessing::FullyCnn => {
            for (side, width) in [(Side::Question, q_dim), (Side::Relation, r_dim)] {
                let split = cnn_split(width, config.kernel_sizes.len());
                conv_specs(&mut out, &format!("{}.cnn", side.name()), &config.kernel_sizes, &split, config.d);
            }
        }
    }
    if matches!(config.variant, Variant::Abwim | Variant::EncCmpBiatt) {
        out.push(spec(ATTENTION, [r_dim, q_dim], Init::Glorot));
    }
    if matches!(config.variant, Variant::Abwim | Variant::WliNoAtt) {
        let filters = vec![config.d_f; config.kernel_sizes.len()];
        conv_specs(&mut out, "compare.conv", &config.kernel_sizes, &filters, q_dim + r_dim);
        out.push(spec(OUTPUT, [1, config.feature_dim()], Init::Glorot));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderParams {
    BiLstm {
        fwd: LstmParams<ParamId>,
        bwd: LstmParams<ParamId>,
    },
    Identity,
    /// Shared between the question and relation sides.
    Gated { w_i: ParamId, w_u: ParamId },
    Cnn(Vec<ConvBlock<ParamId>>),
}

/// Where each array lives in the parameter store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub word_embedding: ParamId,
    pub relation_embedding: ParamId,
    pub question: EncoderParams,
    pub relation: EncoderParams,
    pub attention: Option<ParamId>,
    /// Comparison blocks in ascending kernel size; empty for cosine variants.
    pub compare: Vec<ConvBlock<ParamId>>,
    pub output: Option<ParamId>,
}

impl Layout {
    /// Finds every array the configuration needs and checks its shape.
    pub fn resolve<T: Scalar>(config: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let n_words = store.id(WORD_EMBEDDING).map_or(0, |id| store.get(id).rows());
        let n_rel = store.id(RELATION_EMBEDDING).map_or(0, |id| store.get(id).rows());
        let specs = param_specs(config, n_words, n_rel);
        for s in &specs {
            let id = store.id(&s.name).ok_or_else(|| Error::Incompatible {
                name: s.name.clone(),
                detail: "is missing".into(),
            })?;
            if store.get(id).shape() != s.shape.as_slice() {
                return Err(Error::Incompatible {
                    name: s.name.clone(),
                    detail: format!(
                        "has shape {:?}, configuration expects {:?}",
                        store.get(id).shape(),
                        s.shape
                    ),
                });
            }
        }
        if let Some((_, name, _)) = store
            .iter()
            .find(|(_, name, _)| !specs.iter().any(|s| s.name == *name))
        {
            return Err(Error::Incompatible {
                name: name.to_string(),
                detail: "is not used by this configuration".into(),
            });
        }
        let id = |name: &str| store.id(name).expect("checked above");
        let lstm = |prefix: String| {
            let names = LstmParams::<()>::NAMES.map(|n| id(&format!("{prefix}.{n}")));
            LstmParams::from_array(names)
        };
        let conv = |prefix: &str| {
            config
                .kernel_sizes
                .iter()
                .map(|&k| ConvBlock {
                    k,
                    filters: id(&format!("{prefix}.k{k}.filters")),
                    bias: id(&format!("{prefix}.k{k}.bias")),
                })
                .collect::<Vec<_>>()
        };
        let encoder = |side: Side| match config.preprocessing {
            Preprocessing::BiLstm => EncoderParams::BiLstm {
                fwd: lstm(format!("{}.lstm.fwd", side.name())),
                bwd: lstm(format!("{}.lstm.bwd", side.name())),
            },
            Preprocessing::None => EncoderParams::Identity,
            Preprocessing::GatedLinear => EncoderParams::Gated {
                w_i: id("preprocess.gated.W_i"),
                w_u: id("preprocess.gated.W_u"),
            },
            Preprocessing::FullyCnn => EncoderParams::Cnn(conv(&format!("{}.cnn", side.name()))),
        };
        let has_compare = matches!(config.variant, Variant::Abwim | Variant::WliNoAtt);
        Ok(Self {
            word_embedding: id(WORD_EMBEDDING),
            relation_embedding: id(RELATION_EMBEDDING),
            question: encoder(Side::Question),
            relation: encoder(Side::Relation),
            attention: store.id(ATTENTION),
            compare: if has_compare { conv("compare.conv") } else { Vec::new() },
            output: store.id(OUTPUT),
        })
    }
}

/// Dropout context: inference never drops; training draws masks from the
/// supplied generator.
pub enum Mode<'r> {
    Infer,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// An encoded sequence together with its real-token mask.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub rep: Var,
    pub mask: Vec<bool>,
}

/// Graph nodes of one scored pair.
pub struct Scored {
    pub score: Var,
    /// `|R| x |Q|` attention weights, when the path has any.
    pub attention: Option<Var>,
    /// Pooling records per comparison block.
    pub pooled: Vec<gradkit::MaxPooled>,
}

/// Values exported for inspection of one (question, relation) pair.
#[derive(Clone, Debug)]
pub struct Inspection<T> {
    pub score: T,
    pub attention: Option<Tensor<T>>,
    /// Pooled feature values in block order.
    pub features: Vec<T>,
    /// Argmax time step per pooled feature.
    pub argmax: Vec<usize>,
    /// Kernel size each feature came from.
    pub kernel_of: Vec<usize>,
}

/// Learnable arrays with their configuration.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layout: Layout,
}

fn glorot<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f32> {
    let (rows, cols) = (shape[0], shape[1]);
    let limit = (6.0 / (rows + cols) as f64).sqrt() as f32;
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

impl ModelParams<f32> {
    /// Fresh parameters: embeddings from `tables`, weight matrices Glorot
    /// uniform, biases zero.
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        tables: EmbeddingTables,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if tables.words.cols() != config.d || tables.relations.cols() != config.d {
            return Err(Error::Config(format!(
                "embedding tables have width {}, configuration says d = {}",
                tables.words.cols(),
                config.d
            )));
        }
        let specs = param_specs(config, tables.words.rows(), tables.relations.rows());
        let mut store = ParamStore::new();
        let mut tables = Some(tables);
        for s in &specs {
            let value = match s.init {
                Init::Embedding if s.name == WORD_EMBEDDING => tables.as_ref().expect("tables").words.clone(),
                Init::Embedding => tables.take().expect("tables").relations,
                Init::Glorot => glorot(&s.shape, rng),
                Init::Zero => Tensor::zeros(&s.shape),
            };
            store.add(s.name.clone(), value);
        }
        Self::from_store(config.clone(), store)
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &store)?;
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn dropout(&self, g: &mut Graph<'_, T>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match mode {
            Mode::Infer => Ok(x),
            Mode::Train(rng) => Ok(g.dropout(x, self.config.dropout, true, &mut **rng)?),
        }
    }

    /// The configured context encoder applied to an embedded sequence.
    pub fn preprocess(
        &self,
        g: &mut Graph<'_, T>,
        side: Side,
        x: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let enc = match side {
            Side::Question => &self.layout.question,
            Side::Relation => &self.layout.relation,
        };
        match enc {
            EncoderParams::BiLstm { fwd, bwd } => {
                let f = fwd.bind(g)?;
                let b = bwd.bind(g)?;
                let f = LstmStack::new(g, &f)?;
                let b = LstmStack::new(g, &b)?;
                bilstm_encode(g, x, mask, &f, &b)
            }
            EncoderParams::Identity => Ok(x),
            EncoderParams::Gated { w_i, w_u } => {
                let wi = g.param(*w_i)?;
                let wu = g.param(*w_u)?;
                let out = gated_linear(g, x, wi, wu)?;
                Ok(g.mask_cols(out, mask)?)
            }
            EncoderParams::Cnn(blocks) => {
                let bound = blocks.iter().map(|b| b.bind(g)).collect::<Result<Vec<_>>>()?;
                conv_same(g, x, &bound, mask)
            }
        }
    }

    /// Embedding, dropout and the context encoder.
    pub fn encode(
        &self,
        g: &mut Graph<'_, T>,
        side: Side,
        seq: &TokenSeq,
        mode: &mut Mode<'_>,
    ) -> Result<Encoded> {
        let mask = seq.mask();
        if !mask.iter().any(|&m| m) {
            return Err(Error::Degenerate(format!("{} has no real token", side.name())));
        }
        let words = g.param(self.layout.word_embedding)?;
        let rels = g.param(self.layout.relation_embedding)?;
        let x = embed_tokens(g, seq, words, rels)?;
        let x = self.dropout(g, x, mode)?;
        let rep = self.preprocess(g, side, x, &mask)?;
        Ok(Encoded { rep, mask })
    }

    pub fn encode_question(&self, g: &mut Graph<'_, T>, q: &TokenSeq, mode: &mut Mode<'_>) -> Result<Encoded> {
        self.encode(g, Side::Question, q, mode)
    }

    pub fn encode_relation(&self, g: &mut Graph<'_, T>, r: &TokenSeq, mode: &mut Mode<'_>) -> Result<Encoded> {
        self.encode(g, Side::Relation, r, mode)
    }

    fn unsupported(&self, what: &str) -> Error {
        Error::Unsupported {
            variant: self.config.variant.to_string(),
            what: what.to_string(),
        }
    }

    /// Interaction matrix, convolution comparison and linear output. With
    /// `learned` false the alignment is uniform and `W_A` is not used.
    fn interaction_path(
        &self,
        g: &mut Graph<'_, T>,
        q: &Encoded,
        r: &Encoded,
        learned: bool,
        mode: &mut Mode<'_>,
    ) -> Result<Scored> {
        let w_o = self.layout.output.ok_or_else(|| self.unsupported("word-level comparison"))?;
        let align = if learned {
            let w_a = self.layout.attention.ok_or_else(|| self.unsupported("attention"))?;
            let w_a = g.param(w_a)?;
            attention_align(g, q.rep, r.rep, w_a, self.config.attention, &q.mask, &r.mask)?
        } else {
            uniform_align(g, r.rep, &q.mask, &r.mask)?
        };
        let m = build_interactions(g, q.rep, align.rhat)?;
        let m = self.dropout(g, m, mode)?;
        let blocks = self
            .layout
            .compare
            .iter()
            .map(|b| b.bind(g))
            .collect::<Result<Vec<_>>>()?;
        let cmp = conv_compare(g, m, &blocks, &q.mask)?;
        let f = self.dropout(g, cmp.features, mode)?;
        let w_o = g.param(w_o)?;
        let score = score_linear(g, f, w_o)?;
        Ok(Scored {
            score,
            attention: Some(align.a),
            pooled: cmp.pooled,
        })
    }

    fn pool_encoding(&self, g: &mut Graph<'_, T>, e: &Encoded) -> Result<Var> {
        let last = e.mask.iter().rposition(|&m| m).expect("non-empty mask");
        match self.config.encoding_pool {
            EncodingPool::LastToken => Ok(g.column(e.rep, last)?),
            EncodingPool::BothEnds => {
                let first = e.mask.iter().position(|&m| m).expect("non-empty mask");
                let half = g.value(e.rep).rows() / 2;
                let l = g.column(e.rep, last)?;
                let f = g.column(e.rep, first)?;
                let fwd = g.slice_rows(l, 0, half)?;
                let bwd = g.slice_rows(f, half, half)?;
                Ok(g.concat_rows(&[fwd, bwd])?)
            }
            EncodingPool::MaxPool => Ok(g.max_over_time(e.rep, &e.mask)?.value),
        }
    }

    fn cosine_path(&self, g: &mut Graph<'_, T>, q: &Encoded, r: &Encoded, mode: &mut Mode<'_>) -> Result<Scored> {
        let qv = self.pool_encoding(g, q)?;
        let rv = self.pool_encoding(g, r)?;
        let qv = self.dropout(g, qv, mode)?;
        let rv = self.dropout(g, rv, mode)?;
        Ok(Scored {
            score: g.cosine(qv, rv)?,
            attention: None,
            pooled: Vec::new(),
        })
    }

    /// Question weights from the best relation match of each question word,
    /// relation weights from the best question match of each relation
    /// token, both softmax normalized; the score is the cosine of the two
    /// weighted sums. Weights are taken from the raw bilinear scores.
    fn biatt_path(&self, g: &mut Graph<'_, T>, q: &Encoded, r: &Encoded, mode: &mut Mode<'_>) -> Result<Scored> {
        let w_a = self.layout.attention.ok_or_else(|| self.unsupported("attention"))?;
        let w_a = g.param(w_a)?;
        let s = attention_scores(g, q.rep, r.rep, w_a)?;
        let st = g.transpose(s);
        let q_best = g.max_over_time(st, &r.mask)?.value;
        let alpha = g.softmax_masked(q_best, &q.mask, SoftmaxAxis::Columns)?;
        let r_best = g.max_over_time(s, &q.mask)?.value;
        let beta = g.softmax_masked(r_best, &r.mask, SoftmaxAxis::Columns)?;
        let q_hat = g.matmul(q.rep, alpha)?;
        let r_hat = g.matmul(r.rep, beta)?;
        let q_hat = self.dropout(g, q_hat, mode)?;
        let r_hat = self.dropout(g, r_hat, mode)?;
        Ok(Scored {
            score: g.cosine(q_hat, r_hat)?,
            attention: None,
            pooled: Vec::new(),
        })
    }

    /// Scores an encoded pair with the configured variant.
    pub fn compare(&self, g: &mut Graph<'_, T>, q: &Encoded, r: &Encoded, mode: &mut Mode<'_>) -> Result<Scored> {
        match self.config.variant {
            Variant::Abwim => self.interaction_path(g, q, r, true, mode),
            Variant::WliNoAtt => self.interaction_path(g, q, r, false, mode),
            Variant::EncCmp => self.cosine_path(g, q, r, mode),
            Variant::EncCmpBiatt => self.biatt_path(g, q, r, mode),
        }
    }

    /// Builds the full scoring graph for one pair.
    pub fn score_graph(
        &self,
        g: &mut Graph<'_, T>,
        q: &TokenSeq,
        r: &TokenSeq,
        mode: &mut Mode<'_>,
    ) -> Result<Scored> {
        let qe = self.encode_question(g, q, mode)?;
        let re = self.encode_relation(g, r, mode)?;
        self.compare(g, &qe, &re, mode)
    }

    fn infer_with(
        &self,
        q: &TokenSeq,
        r: &TokenSeq,
        path: impl FnOnce(&Self, &mut Graph<'_, T>, &Encoded, &Encoded, &mut Mode<'_>) -> Result<Scored>,
    ) -> Result<T> {
        let mut g = Graph::with_params(&self.store);
        let mut mode = Mode::Infer;
        let qe = self.encode_question(&mut g, q, &mut mode)?;
        let re = self.encode_relation(&mut g, r, &mut mode)?;
        let s = path(self, &mut g, &qe, &re, &mut mode)?;
        Ok(g.value(s.score).item())
    }

    /// Inference score with the configured variant.
    pub fn score(&self, q: &TokenSeq, r: &TokenSeq) -> Result<T> {
        self.infer_with(q, r, |m, g, qe, re, mode| m.compare(g, qe, re, mode))
    }

    /// Attention, interaction, convolution and linear output.
    pub fn score_abwim(&self, q: &TokenSeq, r: &TokenSeq) -> Result<T> {
        self.infer_with(q, r, |m, g, qe, re, mode| m.interaction_path(g, qe, re, true, mode))
    }

    /// The interaction path with uniform attention.
    pub fn score_wli_no_attention(&self, q: &TokenSeq, r: &TokenSeq) -> Result<T> {
        self.infer_with(q, r, |m, g, qe, re, mode| m.interaction_path(g, qe, re, false, mode))
    }

    /// Cosine of the pooled encodings.
    pub fn score_encoding_comparing(&self, q: &TokenSeq, r: &TokenSeq) -> Result<T> {
        self.infer_with(q, r, |m, g, qe, re, mode| m.cosine_path(g, qe, re, mode))
    }

    /// Cosine of the attention-pooled encodings.
    pub fn score_biatt(&self, q: &TokenSeq, r: &TokenSeq) -> Result<T> {
        self.infer_with(q, r, |m, g, qe, re, mode| m.biatt_path(g, qe, re, mode))
    }

    /// Inference scores of several candidates for one question, encoding
    /// the question once.
    pub fn score_candidates(&self, q: &TokenSeq, candidates: &[TokenSeq]) -> Result<Vec<T>> {
        let mut g = Graph::with_params(&self.store);
        let mut mode = Mode::Infer;
        let qe = self.encode_question(&mut g, q, &mut mode)?;
        candidates
            .iter()
            .map(|r| {
                let re = self.encode_relation(&mut g, r, &mut mode)?;
                let s = self.compare(&mut g, &qe, &re, &mut mode)?;
                Ok(g.value(s.score).item())
            })
            .collect()
    }

    /// Candidate indices with scores, best first.
    pub fn rank_candidates(&self, q: &TokenSeq, candidates: &[TokenSeq]) -> Result<Vec<(usize, T)>> {
        if candidates.is_empty() {
            return Err(Error::Degenerate("no candidate relations to rank".into()));
        }
        let scores = self.score_candidates(q, candidates)?;
        Ok(rank_scores(&scores))
    }

    /// Attention weights and pooling positions for one pair.
    pub fn inspect(&self, q: &TokenSeq, r: &TokenSeq) -> Result<Inspection<T>> {
        let mut g = Graph::with_params(&self.store);
        let s = self.score_graph(&mut g, q, r, &mut Mode::Infer)?;
        let mut features = Vec::new();
        let mut argmax = Vec::new();
        let mut kernel_of = Vec::new();
        for (p, b) in s.pooled.iter().zip(&self.layout.compare) {
            features.extend_from_slice(g.value(p.value).data());
            argmax.extend_from_slice(&p.argmax);
            kernel_of.extend(std::iter::repeat_n(b.k, p.argmax.len()));
        }
        Ok(Inspection {
            score: g.value(s.score).item(),
            attention: s.attention.map(|a| g.value(a).clone()),
            features,
            argmax,
            kernel_of,
        })
    }
}

/// Indices sorted by descending score; equal scores keep index order.
pub fn rank_scores<T: Scalar>(scores: &[T]) -> Vec<(usize, T)> {
    let mut ranked: Vec<(usize, T)> = scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    ranked
}
