mod common;

use abwim::data::vocab::TokenSeq;
use abwim::model::{param_specs, rank_scores, Mode, ModelParams, Side, ATTENTION, OUTPUT, WORD_EMBEDDING, RELATION_EMBEDDING};
use abwim::training::question_loss;
use abwim::{AttentionMode, EncodingPool, Error, ModelConfig, Preprocessing, Variant};
use common::{lift, random_params, random_question, random_relation, relation_seq, rng, toy_config, word_seq, LstmOracle};
use gradkit::gradcheck::check_params;
use gradkit::{Graph, ParamStore, Tensor};
use rand::Rng;

const VARIANTS: [Variant; 4] = [Variant::Abwim, Variant::EncCmp, Variant::EncCmpBiatt, Variant::WliNoAtt];
const PREPROCESSING: [Preprocessing; 4] = [
    Preprocessing::BiLstm,
    Preprocessing::None,
    Preprocessing::GatedLinear,
    Preprocessing::FullyCnn,
];

fn config(variant: Variant, preprocessing: Preprocessing) -> ModelConfig {
    ModelConfig {
        preprocessing,
        ..toy_config(variant)
    }
}

fn set(params: &mut ModelParams<f64>, name: &str, value: Tensor<f64>) {
    let id = params.store.id(name).unwrap();
    *params.store.get_mut(id) = value;
}

fn get<'a>(params: &'a ModelParams<f64>, name: &str) -> &'a Tensor<f64> {
    params.store.get(params.store.id(name).unwrap())
}

fn toy_pair() -> (TokenSeq, TokenSeq) {
    (word_seq(&[3, 2, 7]), relation_seq(&[4, 5, 9], &[1]))
}

#[test]
fn inference_is_deterministic_for_every_variant() {
    for v in VARIANTS {
        let p = random_params(&toy_config(v), 1);
        let (q, r) = toy_pair();
        let a = p.score(&q, &r).unwrap();
        let b = p.score(&q, &r).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "{v}");
    }
}

#[test]
fn zero_output_weights_give_zero_score() {
    let mut p = random_params(&toy_config(Variant::Abwim), 2);
    let shape = get(&p, OUTPUT).shape().to_vec();
    set(&mut p, OUTPUT, Tensor::zeros(&shape));
    let mut r = rng(3);
    for _ in 0..5 {
        let q = random_question(4, &mut r);
        let rel = random_relation(3, 1, &mut r);
        assert_eq!(p.score(&q, &rel).unwrap(), 0.0);
    }
}

fn copy_question_encoder_to_relation(p: &mut ModelParams<f64>) {
    let names: Vec<String> = p.store.iter().map(|(_, n, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| n.starts_with("question.")) {
        let value = get(p, n).clone();
        set(p, &n.replacen("question.", "relation.", 1), value);
    }
}

#[test]
fn identical_sequences_with_shared_encoders_have_cosine_one() {
    let mut p = random_params(&toy_config(Variant::EncCmp), 4);
    copy_question_encoder_to_relation(&mut p);
    let q = word_seq(&[3, 6, 2, 8]);
    let s = p.score_encoding_comparing(&q, &q).unwrap();
    assert!((s - 1.0).abs() < 1e-6);
}

#[test]
fn antiparallel_vectors_have_cosine_minus_one() {
    let cfg = ModelConfig {
        preprocessing: Preprocessing::None,
        ..toy_config(Variant::EncCmp)
    };
    let mut p = random_params(&cfg, 5);
    let row = get(&p, WORD_EMBEDDING).row_values(6).to_vec();
    let mut rels = get(&p, RELATION_EMBEDDING).clone();
    for (k, v) in row.iter().enumerate() {
        rels.set(2, k, -v);
    }
    set(&mut p, RELATION_EMBEDDING, rels);
    let s = p.score(&word_seq(&[3, 6]), &relation_seq(&[4], &[2])).unwrap();
    assert!((s + 1.0).abs() < 1e-6);
}

fn oracle_from(p: &ModelParams<f64>, prefix: &str) -> LstmOracle {
    let part = |n: &str| get(p, &format!("{prefix}.{n}")).data().to_vec();
    let w = get(p, &format!("{prefix}.W_i"));
    LstmOracle {
        d_in: w.cols(),
        d_c: w.rows(),
        w: [part("W_i"), part("W_f"), part("W_o"), part("W_c")],
        u: [part("U_i"), part("U_f"), part("U_o"), part("U_c")],
        b: [part("b_i"), part("b_f"), part("b_o"), part("b_c")],
    }
}

/// Encodes with the independent recurrence: one vector of `2 d_c` per position.
fn reference_encode(p: &ModelParams<f64>, side: &str, seq: &TokenSeq) -> Vec<Vec<f64>> {
    use abwim::data::vocab::TokenKind;
    let xs: Vec<Vec<f64>> = seq
        .ids
        .iter()
        .zip(&seq.kinds)
        .map(|(&id, kind)| {
            let table = if *kind == TokenKind::Relation { RELATION_EMBEDDING } else { WORD_EMBEDDING };
            get(p, table).row_values(id as usize).to_vec()
        })
        .collect();
    let n = xs.len();
    let f = oracle_from(p, &format!("{side}.lstm.fwd")).run(&xs, 0..n);
    let b = oracle_from(p, &format!("{side}.lstm.bwd")).run(&xs, (0..n).rev());
    f.into_iter().zip(b).map(|(a, b)| a.into_iter().chain(b).collect()).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn encoding_comparison_matches_a_reference_recomputation() {
    let p = random_params(&toy_config(Variant::EncCmp), 6);
    let (q, r) = toy_pair();
    let qe = reference_encode(&p, "question", &q);
    let re = reference_encode(&p, "relation", &r);
    let expect = cos(qe.last().unwrap(), re.last().unwrap());
    assert!((p.score(&q, &r).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn both_ends_pooling_takes_the_backward_half_from_the_first_token() {
    let cfg = ModelConfig {
        encoding_pool: EncodingPool::BothEnds,
        ..toy_config(Variant::EncCmp)
    };
    let p = random_params(&cfg, 7);
    let (q, r) = toy_pair();
    let pool = |e: &[Vec<f64>]| -> Vec<f64> {
        let d = e[0].len() / 2;
        e.last().unwrap()[..d].iter().chain(&e[0][d..]).copied().collect()
    };
    let expect = cos(&pool(&reference_encode(&p, "question", &q)), &pool(&reference_encode(&p, "relation", &r)));
    assert!((p.score(&q, &r).unwrap() - expect).abs() < 1e-12);
}

/// Attentive pooling recomputed from the encoder outputs; returns the
/// score and the question weights.
fn reference_biatt(p: &ModelParams<f64>, q: &TokenSeq, r: &TokenSeq) -> (f64, Vec<f64>) {
    let qe = reference_encode(p, "question", q);
    let re = reference_encode(p, "relation", r);
    let w = get(p, ATTENTION);
    let score = |rk: &[f64], qj: &[f64]| -> f64 {
        (0..w.rows()).map(|a| rk[a] * (0..w.cols()).map(|b| w.get(a, b) * qj[b]).sum::<f64>()).sum()
    };
    let a: Vec<Vec<f64>> = re.iter().map(|rk| qe.iter().map(|qj| score(rk, qj)).collect()).collect();
    let softmax = |v: Vec<f64>| -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    };
    let alpha = softmax((0..qe.len()).map(|j| a.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max)).collect());
    let beta = softmax(a.iter().map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect());
    let pool = |vs: &[Vec<f64>], w: &[f64]| -> Vec<f64> {
        (0..vs[0].len()).map(|i| vs.iter().zip(w).map(|(v, w)| v[i] * w).sum()).collect()
    };
    (cos(&pool(&qe, &alpha), &pool(&re, &beta)), alpha)
}

#[test]
fn attentive_pooling_matches_a_reference_recomputation() {
    let p = random_params(&toy_config(Variant::EncCmpBiatt), 8);
    let (q, r) = toy_pair();
    let (expect, alpha) = reference_biatt(&p, &q, &r);
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((p.score(&q, &r).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn zero_attention_pools_by_averaging() {
    let mut p = random_params(&toy_config(Variant::EncCmpBiatt), 9);
    set(&mut p, ATTENTION, Tensor::zeros(&[10, 10]));
    let (q, r) = toy_pair();
    let qe = reference_encode(&p, "question", &q);
    let re = reference_encode(&p, "relation", &r);
    let mean = |vs: &[Vec<f64>]| -> Vec<f64> {
        (0..vs[0].len()).map(|i| vs.iter().map(|v| v[i]).sum::<f64>() / vs.len() as f64).collect()
    };
    let expect = cos(&mean(&qe), &mean(&re));
    assert!((p.score(&q, &r).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn one_dominant_alignment_concentrates_question_weight() {
    let cfg = ModelConfig {
        preprocessing: Preprocessing::None,
        ..toy_config(Variant::EncCmpBiatt)
    };
    let mut p = random_params(&cfg, 10);
    let mut words = Tensor::zeros(&[common::N_WORDS, 8]);
    for (id, axis) in [(3, 0), (4, 1), (5, 2)] {
        words.set(id, axis, 1.0);
    }
    let mut rels = Tensor::zeros(&[common::N_RELATIONS, 8]);
    rels.set(1, 3, 1.0);
    let mut w_a = Tensor::zeros(&[8, 8]);
    w_a.set(3, 1, 20.0);
    set(&mut p, WORD_EMBEDDING, words);
    set(&mut p, RELATION_EMBEDDING, rels);
    set(&mut p, ATTENTION, w_a);
    let q = word_seq(&[3, 4, 5]);
    let r = relation_seq(&[], &[1]);
    let (expect, alpha) = {
        let qv: Vec<Vec<f64>> = q.ids.iter().map(|&i| get(&p, WORD_EMBEDDING).row_values(i as usize).to_vec()).collect();
        let rv = get(&p, RELATION_EMBEDDING).row_values(1).to_vec();
        let raw: Vec<f64> = qv.iter().map(|qj| if qj[1] == 1.0 { 20.0 * rv[3] } else { 0.0 }).collect();
        let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = raw.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let alpha: Vec<f64> = e.iter().map(|x| x / s).collect();
        let q_hat: Vec<f64> = (0..8).map(|i| qv.iter().zip(&alpha).map(|(v, a)| v[i] * a).sum()).collect();
        (cos(&q_hat, &rv), alpha)
    };
    assert!(alpha[1] > 0.95);
    assert!((p.score(&q, &r).unwrap() - expect).abs() < 1e-12);
}

fn without_attention(p: &ModelParams<f64>, variant: Variant) -> ModelParams<f64> {
    let mut store = ParamStore::new();
    for (_, name, t) in p.store.iter() {
        if name != ATTENTION {
            store.add(name, t.clone());
        }
    }
    ModelParams::from_store(ModelConfig { variant, ..p.config.clone() }, store).unwrap()
}

#[test]
fn uniform_attention_equals_global_attention_at_zero_weights() {
    let cfg = ModelConfig {
        attention: AttentionMode::Global,
        ..toy_config(Variant::Abwim)
    };
    let mut p = random_params(&cfg, 11);
    set(&mut p, ATTENTION, Tensor::zeros(&[10, 10]));
    let wli = without_attention(&p, Variant::WliNoAtt);
    let mut r = rng(12);
    for _ in 0..5 {
        let q = random_question(r.gen_range(1..6), &mut r);
        let rel = random_relation(r.gen_range(0..4), 1, &mut r);
        let a = p.score_abwim(&q, &rel).unwrap();
        let b = wli.score(&q, &rel).unwrap();
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn uniform_attention_ignores_the_attention_matrix() {
    let p = random_params(&toy_config(Variant::Abwim), 13);
    let (q, r) = toy_pair();
    let before = p.score_wli_no_attention(&q, &r).unwrap();
    let mut moved = p.clone();
    let w = get(&p, ATTENTION).map(|v| v * 3.0 + 0.7);
    set(&mut moved, ATTENTION, w);
    assert_eq!(moved.score_wli_no_attention(&q, &r).unwrap(), before);
    assert_ne!(moved.score_abwim(&q, &r).unwrap(), p.score_abwim(&q, &r).unwrap());

    let wli = without_attention(&p, Variant::WliNoAtt);
    let mut g = Graph::with_params(&wli.store);
    let s = wli.score_graph(&mut g, &q, &r, &mut Mode::Infer).unwrap();
    let grads = g.backward(s.score).unwrap();
    assert!(wli.store.id(ATTENTION).is_none());
    assert!(grads.param(wli.layout.output.unwrap()).is_some());
}

#[test]
fn preprocessing_limits_and_shapes() {
    let cnn = random_params(&config(Variant::Abwim, Preprocessing::FullyCnn), 14);
    let q = word_seq(&[3, 4, 5, 6]);
    let mut g = Graph::with_params(&cnn.store);
    let e = cnn.encode(&mut g, Side::Question, &q, &mut Mode::Infer).unwrap();
    assert_eq!(g.value(e.rep).shape(), &[10, 4]);

    let none = config(Variant::Abwim, Preprocessing::None);
    let specs = param_specs(&none, 12, 5);
    let w_a = specs.iter().find(|s| s.name == ATTENTION).unwrap();
    assert_eq!(w_a.shape, vec![8, 8]);

    let mut gated = random_params(&config(Variant::EncCmp, Preprocessing::GatedLinear), 15);
    let width = gated.config.gated_width();
    assert_eq!(width, 10);
    let mut open = Tensor::zeros(&[width, 8]);
    let mut ident = Tensor::zeros(&[width, 8]);
    for i in 0..8 {
        open.set(i, i, 1e4);
        ident.set(i, i, 1.0);
    }
    set(&mut gated, "preprocess.gated.W_i", open);
    set(&mut gated, "preprocess.gated.W_u", ident);
    let words = get(&gated, WORD_EMBEDDING).map(|v| v.abs() + 0.01);
    set(&mut gated, WORD_EMBEDDING, words.clone());
    let mut g = Graph::with_params(&gated.store);
    let x = g.param(gated.layout.word_embedding).unwrap();
    let xe = g.embed(x, &[3, 4]).unwrap();
    let out = gated.preprocess(&mut g, Side::Question, xe, &[true, true]).unwrap();
    for (j, id) in [3usize, 4].iter().enumerate() {
        for i in 0..8 {
            assert!((g.value(out).get(i, j) - words.get(*id, i).tanh()).abs() < 1e-9);
        }
        for i in 8..width {
            assert_eq!(g.value(out).get(i, j), 0.0);
        }
    }
    let shut = Tensor::full(&[width, 8], -1e4);
    set(&mut gated, "preprocess.gated.W_i", shut);
    let mut g = Graph::with_params(&gated.store);
    let x = g.param(gated.layout.word_embedding).unwrap();
    let xe = g.embed(x, &[3, 4]).unwrap();
    let out = gated.preprocess(&mut g, Side::Question, xe, &[true, true]).unwrap();
    assert!(g.value(out).data().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn ranking_contract() {
    let p = random_params(&toy_config(Variant::Abwim), 16);
    let mut r = rng(17);
    let q = random_question(4, &mut r);
    let one = vec![random_relation(2, 1, &mut r)];
    assert_eq!(p.rank_candidates(&q, &one).unwrap()[0].0, 0);
    assert!(matches!(p.rank_candidates(&q, &[]), Err(Error::Degenerate(_))));

    let cands: Vec<TokenSeq> = (0..6).map(|i| random_relation(1 + i % 3, 1 + i % 2, &mut r)).collect();
    let ranked = p.rank_candidates(&q, &cands).unwrap();
    let mut seen: Vec<usize> = ranked.iter().map(|x| x.0).collect();
    seen.sort();
    assert_eq!(seen, (0..6).collect::<Vec<_>>());
    let best = &cands[ranked[0].0];
    let mut shuffled = cands.clone();
    shuffled.reverse();
    let ranked2 = p.rank_candidates(&q, &shuffled).unwrap();
    assert_eq!(&shuffled[ranked2[0].0], best);

    let scores: Vec<f64> = ranked.iter().map(|x| x.1).collect();
    let shifted: Vec<f64> = scores.iter().map(|s| s + 123.0).collect();
    assert_eq!(
        rank_scores(&scores).iter().map(|x| x.0).collect::<Vec<_>>(),
        rank_scores(&shifted).iter().map(|x| x.0).collect::<Vec<_>>()
    );
}

#[test]
fn candidate_scores_match_pairwise_scores() {
    for v in VARIANTS {
        let p = random_params(&toy_config(v), 18);
        let mut r = rng(19);
        let q = random_question(5, &mut r);
        let cands: Vec<TokenSeq> = (0..4).map(|_| random_relation(2, 1, &mut r)).collect();
        let batch = p.score_candidates(&q, &cands).unwrap();
        for (c, s) in cands.iter().zip(batch) {
            assert_eq!(p.score(&q, c).unwrap().to_bits(), s.to_bits(), "{v}");
        }
    }
}

#[test]
fn scores_ignore_masked_padding_for_every_variant() {
    for v in VARIANTS {
        for pre in PREPROCESSING {
            let p = random_params(&config(v, pre), 20);
            let mut r = rng(21);
            for _ in 0..5 {
                let q = random_question(r.gen_range(1..6), &mut r);
                let rel = random_relation(r.gen_range(0..4), r.gen_range(1..3), &mut r);
                let base = p.score(&q, &rel).unwrap();
                let padded = p
                    .score(&q.padded(q.len() + r.gen_range(1..4)), &rel.padded(rel.len() + r.gen_range(0..4)))
                    .unwrap();
                assert!((base - padded).abs() < 1e-9, "{v} {pre}");
            }
        }
    }
}

#[test]
fn cosine_variants_stay_in_range() {
    for v in [Variant::EncCmp, Variant::EncCmpBiatt] {
        for seed in 0..20 {
            let p = random_params(&toy_config(v), seed);
            let mut r = rng(seed + 100);
            let s = p
                .score(&random_question(r.gen_range(1..7), &mut r), &random_relation(r.gen_range(0..4), 1, &mut r))
                .unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }
}

#[test]
fn every_configuration_runs_forward_and_backward() {
    for v in VARIANTS {
        for pre in PREPROCESSING {
            let mut cfg = config(v, pre);
            cfg.dropout = 0.35;
            let p = random_params(&cfg, 22).cast::<f32>();
            let mut r = rng(23);
            let q = random_question(4, &mut r);
            let pos = random_relation(3, 1, &mut r);
            let negs: Vec<TokenSeq> = (0..3).map(|_| random_relation(2, 2, &mut r)).collect();
            let mut drop_rng = rng(24);
            let (loss, grads) = question_loss(&p, &q, &pos, &negs, Some(&mut drop_rng)).unwrap().unwrap();
            assert!(loss.is_finite() && loss > 0.0, "{v} {pre}");
            assert!(!grads.has_non_finite());
            assert!(grads.norm() > 0.0, "{v} {pre}");
        }
    }
}

#[test]
fn every_configuration_passes_the_gradient_check() {
    for v in VARIANTS {
        for pre in PREPROCESSING {
            let p = random_params(&config(v, pre), 25);
            let (q, r) = toy_pair();
            let report = check_params(&p.store, None, 1e-5, |g| {
                Ok(lift(p.score_graph(g, &q, &r, &mut Mode::Infer))?.score)
            })
            .unwrap();
            assert!(report.passes(1e-4), "{v} {pre}: {report:?}");
        }
    }
}

#[test]
fn empty_sequences_are_degenerate() {
    let p = random_params(&toy_config(Variant::Abwim), 26);
    let (q, r) = toy_pair();
    assert!(matches!(p.score(&TokenSeq::words(vec![]), &r), Err(Error::Degenerate(_))));
    assert!(matches!(p.score(&q, &TokenSeq::words(vec![]).padded(2)), Err(Error::Degenerate(_))));
}

#[test]
fn arrays_outside_the_configuration_are_rejected() {
    let p = random_params(&toy_config(Variant::Abwim), 27);
    let err = ModelParams::from_store(toy_config(Variant::EncCmp), p.store.clone()).unwrap_err();
    assert!(matches!(err, Error::Incompatible { .. }));
    let bigger = ModelConfig { d_q: 6, ..toy_config(Variant::Abwim) };
    match ModelParams::from_store(bigger, p.store.clone()) {
        Err(Error::Incompatible { name, .. }) => assert!(name.starts_with("question.lstm")),
        other => panic!("expected incompatibility, got {other:?}"),
    }
}
