//! Ranking accuracy over a dataset.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::data::dataset::RelationChain;
use crate::data::vocab::QuestionInstance;
use crate::error::Result;
use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub question: String,
    pub predicted: RelationChain,
    pub gold: RelationChain,
    /// 1-based position of the gold chain in the ranking.
    pub gold_rank: usize,
    /// Gold score minus the best negative score; `None` without negatives.
    pub margin: Option<f32>,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub n: usize,
    pub n_correct: usize,
    /// One record per instance, in dataset order.
    pub records: Vec<EvalRecord>,
}

impl EvalResult {
    pub fn from_records(records: Vec<EvalRecord>) -> Self {
        let n = records.len();
        let n_correct = records.iter().filter(|r| r.correct).count();
        Self {
            accuracy: if n == 0 { 0.0 } else { n_correct as f64 / n as f64 },
            n,
            n_correct,
            records,
        }
    }
}

/// Ranks one instance's candidates (negatives first, gold last, so a tie
/// with the gold score counts against it).
pub fn evaluate_instance(params: &ModelParams<f32>, inst: &QuestionInstance) -> Result<EvalRecord> {
    let candidates = inst.candidates();
    let seqs: Vec<_> = candidates.iter().map(|c| c.seq()).collect();
    let ranked = params.rank_candidates(&inst.question_seq(), &seqs)?;
    let gold_ix = candidates.len() - 1;
    let gold_rank = ranked.iter().position(|&(i, _)| i == gold_ix).expect("gold ranked") + 1;
    let gold_score = ranked[gold_rank - 1].1;
    let best_negative = ranked.iter().find(|&&(i, _)| i != gold_ix).map(|&(_, s)| s);
    let predicted = candidates[ranked[0].0].chain.clone();
    Ok(EvalRecord {
        question: inst.text.clone(),
        correct: predicted == inst.gold.chain,
        predicted,
        gold: inst.gold.chain.clone(),
        gold_rank,
        margin: best_negative.map(|b| gold_score - b),
    })
}

pub fn evaluate(params: &ModelParams<f32>, instances: &[QuestionInstance]) -> Result<EvalResult> {
    let records = instances
        .par_iter()
        .map(|inst| evaluate_instance(params, inst))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_records(records))
}

/// Accuracy of always choosing the candidate whose chain was most often
/// gold in `train` (earlier candidates win ties, gold last).
pub fn majority_baseline(train: &[QuestionInstance], eval: &[QuestionInstance]) -> f64 {
    let mut freq: HashMap<&RelationChain, usize> = HashMap::new();
    for inst in train {
        *freq.entry(&inst.gold.chain).or_default() += 1;
    }
    if eval.is_empty() {
        return 0.0;
    }
    let correct = eval
        .iter()
        .filter(|inst| {
            let cands = inst.candidates();
            let mut best = 0;
            for (i, c) in cands.iter().enumerate() {
                let f = freq.get(&c.chain).copied().unwrap_or(0);
                if f > freq.get(&cands[best].chain).copied().unwrap_or(0) {
                    best = i;
                }
            }
            cands[best].chain == inst.gold.chain
        })
        .count();
    correct as f64 / eval.len() as f64
}
