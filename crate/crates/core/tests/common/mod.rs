#![allow(dead_code)]

use abwim::data::dataset::{RawInstance, RelationChain};
use abwim::data::embeddings::EmbeddingTables;
use abwim::data::vocab::{TokenKind, TokenSeq};
use abwim::model::ModelParams;
use abwim::{ModelConfig, Variant};
use gradkit::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_WORDS: usize = 12;
pub const N_RELATIONS: usize = 5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The small shapes used for finite-difference checks.
pub fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d: 8,
        d_q: 5,
        d_r: 5,
        kernel_sizes: vec![1, 3],
        d_f: 4,
        dropout: 0.0,
        variant,
        ..ModelConfig::default()
    }
}

pub fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Parameters for `config` with every entry (biases included) drawn at random.
pub fn random_params(config: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut r = rng(seed);
    let tables = EmbeddingTables {
        words: Tensor::zeros(&[N_WORDS, config.d]),
        relations: Tensor::zeros(&[N_RELATIONS, config.d]),
        pretrained_hits: 0,
    };
    let base = ModelParams::init(config, tables, &mut r).unwrap().cast::<f64>();
    let mut store = ParamStore::new();
    for (_, name, t) in base.store.iter() {
        store.add(name, uniform(t.shape(), 0.5, &mut r));
    }
    ModelParams::from_store(config.clone(), store).unwrap()
}

pub fn word_seq(ids: &[u32]) -> TokenSeq {
    TokenSeq::words(ids.to_vec())
}

/// Word tokens followed by relation-level tokens.
pub fn relation_seq(words: &[u32], rels: &[u32]) -> TokenSeq {
    let mut ids = words.to_vec();
    ids.extend_from_slice(rels);
    let mut kinds = vec![TokenKind::Word; words.len()];
    kinds.extend(std::iter::repeat_n(TokenKind::Relation, rels.len()));
    TokenSeq { ids, kinds }
}

pub fn random_question(len: usize, rng: &mut ChaCha8Rng) -> TokenSeq {
    word_seq(&(0..len).map(|_| rng.gen_range(1..N_WORDS as u32)).collect::<Vec<_>>())
}

pub fn random_relation(words: usize, rels: usize, rng: &mut ChaCha8Rng) -> TokenSeq {
    let w: Vec<u32> = (0..words).map(|_| rng.gen_range(1..N_WORDS as u32)).collect();
    let r: Vec<u32> = (0..rels).map(|_| rng.gen_range(0..N_RELATIONS as u32)).collect();
    relation_seq(&w, &r)
}

pub fn chain(text: &str) -> RelationChain {
    RelationChain::parse(text).unwrap()
}

pub fn raw(question: &str, gold: &str, negatives: &[&str]) -> RawInstance {
    RawInstance {
        question: question.split(' ').map(str::to_string).collect(),
        gold: chain(gold),
        negatives: negatives.iter().map(|n| chain(n)).collect(),
    }
}

/// Twenty templated questions over four relations, four candidates each.
pub fn toy_corpus() -> Vec<RawInstance> {
    let rels = [
        ("/people/person/place_of_birth", ["where was ⟨e⟩ born", "what is the birth place of ⟨e⟩", "which place was ⟨e⟩ born in", "birth place of ⟨e⟩", "where is the place of birth of ⟨e⟩"]),
        ("/film/film/directed_by", ["who directed ⟨e⟩", "who is the director of ⟨e⟩", "⟨e⟩ was directed by whom", "which director made ⟨e⟩", "director of the film ⟨e⟩"]),
        ("/music/artist/genre", ["what genre is ⟨e⟩", "what music genre does ⟨e⟩ play", "genre of ⟨e⟩", "which genre is ⟨e⟩ known for", "what is the genre of ⟨e⟩"]),
        ("/book/written_work/author", ["who is the author of ⟨e⟩", "which author wrote ⟨e⟩", "author of the book ⟨e⟩", "⟨e⟩ was written by which author", "name the author of ⟨e⟩"]),
    ];
    let mut out = Vec::new();
    for t in 0..5 {
        for (i, (gold, templates)) in rels.iter().enumerate() {
            let negatives: Vec<&str> = rels
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, (r, _))| *r)
                .collect();
            out.push(raw(templates[t], gold, &negatives));
        }
    }
    out
}

/// Lifts a crate error into the gradient library's error type so layer
/// calls can run inside finite-difference closures.
pub fn lift<T>(r: abwim::Result<T>) -> gradkit::Result<T> {
    r.map_err(|e| gradkit::GradError::Config(e.to_string()))
}

/// One LSTM direction as plain arithmetic: weights in `i, f, o, c` order,
/// `w[g]` is `d_c x d_in` row-major, `u[g]` is `d_c x d_c`, `b[g]` has `d_c`.
pub struct LstmOracle {
    pub d_in: usize,
    pub d_c: usize,
    pub w: [Vec<f64>; 4],
    pub u: [Vec<f64>; 4],
    pub b: [Vec<f64>; 4],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmOracle {
    pub fn random(d_in: usize, d_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-0.6..0.6)).collect::<Vec<f64>>();
        let w = [draw(d_c * d_in), draw(d_c * d_in), draw(d_c * d_in), draw(d_c * d_in)];
        let u = [draw(d_c * d_c), draw(d_c * d_c), draw(d_c * d_c), draw(d_c * d_c)];
        let b = [draw(d_c), draw(d_c), draw(d_c), draw(d_c)];
        Self { d_in, d_c, w, u, b }
    }

    /// Tensors in `W_i .. W_c, U_i .. U_c, b_i .. b_c` order.
    pub fn tensors(&self) -> Vec<Tensor<f64>> {
        let mut out = Vec::new();
        for w in &self.w {
            out.push(Tensor::from_f64(&[self.d_c, self.d_in], w).unwrap());
        }
        for u in &self.u {
            out.push(Tensor::from_f64(&[self.d_c, self.d_c], u).unwrap());
        }
        for b in &self.b {
            out.push(Tensor::from_f64(&[self.d_c, 1], b).unwrap());
        }
        out
    }

    pub fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre = |g: usize, r: usize| {
            let mut s = self.b[g][r];
            for k in 0..self.d_in {
                s += self.w[g][r * self.d_in + k] * x[k];
            }
            for k in 0..self.d_c {
                s += self.u[g][r * self.d_c + k] * h[k];
            }
            s
        };
        let mut h2 = vec![0.0; self.d_c];
        let mut c2 = vec![0.0; self.d_c];
        for r in 0..self.d_c {
            let i = sigmoid(pre(0, r));
            let f = sigmoid(pre(1, r));
            let o = sigmoid(pre(2, r));
            let cand = pre(3, r).tanh();
            c2[r] = i * cand + f * c[r];
            h2[r] = o * c2[r].tanh();
        }
        (h2, c2)
    }

    /// Hidden states over `xs` visited in the given order, indexed by position.
    pub fn run(&self, xs: &[Vec<f64>], order: impl Iterator<Item = usize>) -> Vec<Vec<f64>> {
        let mut h = vec![0.0; self.d_c];
        let mut c = vec![0.0; self.d_c];
        let mut out = vec![Vec::new(); xs.len()];
        for t in order {
            let (h2, c2) = self.step(&xs[t], &h, &c);
            h = h2;
            c = c2;
            out[t] = h.clone();
        }
        out
    }
}
