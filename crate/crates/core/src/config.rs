//! Model and training configuration, with `key=value` text round trips.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($(#[$vmeta:meta])* $variant:ident => $kw:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($(#[$vmeta])* $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn keyword(self) -> &'static str {
                match self {
                    $($name::$variant => $kw),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.keyword())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($kw => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($name),
                        other,
                        [$($kw),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(
    /// Scoring architecture.
    Variant {
        Abwim => "abwim",
        EncCmp => "enc_cmp",
        EncCmpBiatt => "enc_cmp_biatt",
        WliNoAtt => "wli_no_att",
    }
);

keyword_enum!(
    /// Context encoder applied to embedded sequences.
    Preprocessing {
        BiLstm => "bilstm",
        None => "none",
        GatedLinear => "gated",
        FullyCnn => "cnn",
    }
);

keyword_enum!(
    /// Normalization of the attention score matrix.
    AttentionMode {
        /// Each question word's column sums to one over relation tokens.
        PerQuestionWord => "per_word",
        /// The whole matrix sums to one.
        Global => "global",
    }
);

keyword_enum!(
    /// How the cosine baseline reduces an encoded sequence to one vector.
    EncodingPool {
        /// Encoder output column at the last real token.
        LastToken => "last",
        /// Forward half at the last real token, backward half at the first.
        BothEnds => "both_ends",
        /// Max over real positions.
        MaxPool => "max",
    }
);

impl Variant {
    pub fn uses_cosine(self) -> bool {
        matches!(self, Variant::EncCmp | Variant::EncCmpBiatt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Word and relation embedding width.
    pub d: usize,
    /// Question LSTM cell width.
    pub d_q: usize,
    /// Relation LSTM cell width.
    pub d_r: usize,
    /// Convolution window sizes, kept ascending.
    pub kernel_sizes: Vec<usize>,
    /// Filters per window size.
    pub d_f: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub preprocessing: Preprocessing,
    pub attention: AttentionMode,
    pub encoding_pool: EncodingPool,
    /// Output width of the gated linear encoder; `None` means `2 * d_q`.
    pub gated_dim: Option<usize>,
    pub max_question_len: usize,
    pub max_relation_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::simple_questions()
    }
}

impl ModelConfig {
    /// Hyper-parameters used for the single-relation benchmark.
    pub fn simple_questions() -> Self {
        Self {
            d: 300,
            d_q: 150,
            d_r: 150,
            kernel_sizes: vec![1, 3, 5],
            d_f: 150,
            dropout: 0.35,
            variant: Variant::Abwim,
            preprocessing: Preprocessing::BiLstm,
            attention: AttentionMode::PerQuestionWord,
            encoding_pool: EncodingPool::LastToken,
            gated_dim: None,
            max_question_len: 36,
            max_relation_tokens: 12,
            seed: 1,
        }
    }

    /// Hyper-parameters used for the multi-relation benchmark.
    pub fn web_questions() -> Self {
        Self {
            d_q: 100,
            d_r: 100,
            d_f: 100,
            ..Self::simple_questions()
        }
    }

    pub fn gated_width(&self) -> usize {
        self.gated_dim.unwrap_or(2 * self.d_q)
    }

    /// Row counts of the encoded question and relation matrices.
    pub fn encoder_dims(&self) -> (usize, usize) {
        match self.preprocessing {
            Preprocessing::BiLstm | Preprocessing::FullyCnn => (2 * self.d_q, 2 * self.d_r),
            Preprocessing::None => (self.d, self.d),
            Preprocessing::GatedLinear => (self.gated_width(), self.gated_width()),
        }
    }

    /// Length of the pooled comparison feature vector.
    pub fn feature_dim(&self) -> usize {
        self.d_f * self.kernel_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d_q == 0 || self.d_r == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        let needs_conv = matches!(self.variant, Variant::Abwim | Variant::WliNoAtt)
            || self.preprocessing == Preprocessing::FullyCnn;
        if needs_conv {
            if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
                return bad("kernel_sizes must be non-empty positive integers".into());
            }
            if self.kernel_sizes.windows(2).any(|w| w[0] >= w[1]) {
                return bad("kernel_sizes must be strictly ascending".into());
            }
        }
        if matches!(self.variant, Variant::Abwim | Variant::WliNoAtt) && self.d_f == 0 {
            return bad("d_f must be positive".into());
        }
        if self.preprocessing == Preprocessing::FullyCnn
            && 2 * self.d_q.min(self.d_r) < self.kernel_sizes.len()
        {
            return bad("convolutional encoder needs at least one filter per kernel size".into());
        }
        if self.preprocessing == Preprocessing::GatedLinear && self.gated_width() == 0 {
            return bad("gated_dim must be positive".into());
        }
        if self.variant.uses_cosine() {
            let (q, r) = self.encoder_dims();
            if q != r {
                return bad(format!(
                    "cosine variants need equal question/relation encoder widths, got {q} and {r}"
                ));
            }
        }
        if self.encoding_pool == EncodingPool::BothEnds
            && self.preprocessing != Preprocessing::BiLstm
        {
            return bad("both_ends pooling requires the bilstm encoder".into());
        }
        if self.max_question_len == 0 || self.max_relation_tokens < 2 {
            return bad("max_question_len must be >= 1 and max_relation_tokens >= 2".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d" => self.d = parse(key, value)?,
            "d_q" => self.d_q = parse(key, value)?,
            "d_r" => self.d_r = parse(key, value)?,
            "kernel_sizes" => self.kernel_sizes = parse_list(key, value)?,
            "d_f" => self.d_f = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "preprocess" => self.preprocessing = value.parse()?,
            "attention" => self.attention = value.parse()?,
            "encoding_pool" => self.encoding_pool = value.parse()?,
            "gated_dim" => {
                self.gated_dim = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "max_question_len" => self.max_question_len = parse(key, value)?,
            "max_relation_tokens" => self.max_relation_tokens = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d", self.d.to_string()),
            ("d_q", self.d_q.to_string()),
            ("d_r", self.d_r.to_string()),
            ("kernel_sizes", join_list(&self.kernel_sizes)),
            ("d_f", self.d_f.to_string()),
            ("dropout", self.dropout.to_string()),
            ("variant", self.variant.to_string()),
            ("preprocess", self.preprocessing.to_string()),
            ("attention", self.attention.to_string()),
            ("encoding_pool", self.encoding_pool.to_string()),
            (
                "gated_dim",
                self.gated_dim.map_or_else(|| "auto".to_string(), |v| v.to_string()),
            ),
            ("max_question_len", self.max_question_len.to_string()),
            ("max_relation_tokens", self.max_relation_tokens.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Cap on sampled negatives per question; `None` uses all of them.
    pub negatives_per_question: Option<usize>,
    pub rho: f64,
    pub eps: f64,
    /// Global multiplier on the Adadelta update (1.0 is plain Adadelta).
    pub lr_scale: f64,
    pub max_grad_norm: Option<f64>,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            patience: 5,
            batch_size: 256,
            negatives_per_question: Some(50),
            rho: 0.95,
            eps: 1e-6,
            lr_scale: 1.0,
            max_grad_norm: None,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) || self.eps <= 0.0 {
            return Err(Error::Config("rho must be in [0, 1) and eps > 0".into()));
        }
        if self.negatives_per_question == Some(0) {
            return Err(Error::Config(
                "negatives_per_question must be >= 1 or `all`".into(),
            ));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "negatives_per_question" => {
                self.negatives_per_question = match value {
                    "all" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "rho" => self.rho = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "lr_scale" => self.lr_scale = parse(key, value)?,
            "max_grad_norm" => {
                self.max_grad_norm = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "min_count" => self.min_count = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            (
                "negatives_per_question",
                self.negatives_per_question
                    .map_or_else(|| "all".to_string(), |v| v.to_string()),
            ),
            ("rho", self.rho.to_string()),
            ("eps", self.eps.to_string()),
            ("lr_scale", self.lr_scale.to_string()),
            (
                "max_grad_norm",
                self.max_grad_norm
                    .map_or_else(|| "none".to_string(), |v| v.to_string()),
            ),
            ("min_count", self.min_count.to_string()),
        ]
    }
}

/// Parses `key=value` lines (blank lines and `#` comments skipped).
pub fn parse_pairs(text: &str, source_name: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies `key=value` overrides to both configurations. Unknown keys
/// are an error.
pub fn apply_overrides(
    pairs: &[(String, String)],
    model: &mut ModelConfig,
    train: &mut TrainConfig,
) -> Result<()> {
    for (k, v) in pairs {
        if !model.set(k, v)? && !train.set(k, v)? {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
    }
    Ok(())
}

pub fn load_overrides(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, &path.display().to_string())
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
