//! Pairwise ranking loss, Adadelta and the epoch loop.

use std::fmt::Write as _;
use std::time::Instant;

use gradkit::{Gradients, Graph, ParamStore, Scalar, Var};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::batch::{make_batches, Batch};
use crate::data::vocab::{QuestionInstance, TokenSeq};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{ModelParams, Mode};

/// RNG stream used for shuffling, sampling and dropout seeds; stream 0
/// belongs to initialization.
pub const TRAIN_STREAM: u64 = 1;

/// Questions per reduction chunk. Chunks are summed in index order, so
/// results do not depend on the number of worker threads.
const CHUNK: usize = 8;

/// `Σ σ(s_neg − s_pos)` as a graph node; `None` without negatives.
pub fn pairwise_loss<T: Scalar>(g: &mut Graph<'_, T>, s_pos: Var, s_negs: &[Var]) -> Result<Option<Var>> {
    if s_negs.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::with_capacity(s_negs.len());
    for &n in s_negs {
        let d = g.sub(n, s_pos)?;
        terms.push(g.sigmoid(d));
    }
    Ok(Some(g.add_n(&terms)?))
}

/// Value of the pairwise loss for plain scores.
pub fn pairwise_loss_value(s_pos: f64, s_negs: &[f64]) -> f64 {
    s_negs
        .iter()
        .map(|&n| 1.0 / (1.0 + (s_pos - n).exp()))
        .sum()
}

/// Per-element Adadelta accumulators.
#[derive(Clone, Debug)]
pub struct Adadelta<T> {
    pub rho: T,
    pub eps: T,
    /// Multiplier on every update; 1 is plain Adadelta.
    pub lr_scale: T,
    /// Decayed mean of squared gradients, one buffer per parameter.
    pub acc_grad: Vec<Vec<T>>,
    /// Decayed mean of squared updates.
    pub acc_delta: Vec<Vec<T>>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(store: &ParamStore<T>, rho: T, eps: T, lr_scale: T) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            rho,
            eps,
            lr_scale,
            acc_grad: zeros(),
            acc_delta: zeros(),
        }
    }

    /// One update of every parameter. Entries without gradient only decay
    /// their accumulators. Nothing is modified if a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for id in store.ids() {
            if grads.param(id).is_some_and(|g| g.has_non_finite()) {
                return Err(Error::PoisonedGradient(store.name(id).to_string()));
            }
        }
        let one = T::one();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let (eg, ed) = (&mut self.acc_grad[k], &mut self.acc_delta[k]);
            let (rho, eps, lr) = (self.rho, self.eps, self.lr_scale);
            eg.iter_mut().for_each(|x| *x *= rho);
            let Some(grad) = grads.param(id) else {
                ed.iter_mut().for_each(|x| *x *= rho);
                continue;
            };
            // E[dx^2] decays after the step that reads it; untouched entries decay too.
            let mut touched = vec![false; ed.len()];
            let values = store.get_mut(id).data_mut();
            grad.for_each(|i, g| {
                eg[i] += (one - rho) * g * g;
                let delta = -lr * ((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g;
                ed[i] = rho * ed[i] + (one - rho) * delta * delta;
                values[i] += delta;
                touched[i] = true;
            });
            for (x, t) in ed.iter_mut().zip(&touched) {
                if !t {
                    *x *= rho;
                }
            }
        }
        Ok(())
    }
}

/// Loss of one question against its negatives, with parameter gradients.
/// Dropout masks come from `rng` when it is given.
pub fn question_loss<T: Scalar>(
    params: &ModelParams<T>,
    question: &TokenSeq,
    positive: &TokenSeq,
    negatives: &[TokenSeq],
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Option<(T, Gradients<T>)>> {
    if negatives.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::with_params(&params.store);
    let mut mode = match rng {
        Some(r) => Mode::Train(r),
        None => Mode::Infer,
    };
    let qe = params.encode_question(&mut g, question, &mut mode)?;
    let score = |r: &TokenSeq, g: &mut Graph<'_, T>, mode: &mut Mode<'_>| -> Result<Var> {
        let re = params.encode_relation(g, r, mode)?;
        Ok(params.compare(g, &qe, &re, mode)?.score)
    };
    let pos = score(positive, &mut g, &mut mode)?;
    let mut negs = Vec::with_capacity(negatives.len());
    for n in negatives {
        negs.push(score(n, &mut g, &mut mode)?);
    }
    let loss = pairwise_loss(&mut g, pos, &negs)?.expect("negatives present");
    let grads = g.backward(loss)?;
    Ok(Some((g.value(loss).item(), grads)))
}

/// Mean per-question loss without dropout, over every negative.
pub fn mean_loss(params: &ModelParams<f32>, instances: &[QuestionInstance]) -> Result<f64> {
    let losses = instances
        .par_iter()
        .filter(|inst| !inst.negatives.is_empty())
        .map(|inst| {
            let q = inst.question_seq();
            let cands: Vec<TokenSeq> = inst.negatives.iter().map(|n| n.seq()).collect();
            let mut all = cands.clone();
            all.push(inst.gold.seq());
            let scores = params.score_candidates(&q, &all)?;
            let (pos, negs) = scores.split_last().expect("gold present");
            let negs: Vec<f64> = negs.iter().map(|&s| s as f64).collect();
            Ok(pairwise_loss_value(*pos as f64, &negs))
        })
        .collect::<Result<Vec<f64>>>()?;
    if losses.is_empty() {
        return Ok(0.0);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Owns the parameters, optimizer state and training RNG between epochs.
pub struct Trainer {
    pub params: ModelParams<f32>,
    pub optimizer: Adadelta<f32>,
    pub hyper: TrainConfig,
    rng: ChaCha8Rng,
    pub epochs_run: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean per-question loss over the epoch's batches.
    pub mean_loss: f64,
    pub questions: usize,
    pub skipped_no_negatives: usize,
}

impl Trainer {
    pub fn new(params: ModelParams<f32>, hyper: TrainConfig) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.config.seed);
        rng.set_stream(TRAIN_STREAM);
        let optimizer = Adadelta::new(
            &params.store,
            hyper.rho as f32,
            hyper.eps as f32,
            hyper.lr_scale as f32,
        );
        Ok(Self {
            params,
            optimizer,
            hyper,
            rng,
            epochs_run: 0,
            steps: 0,
        })
    }

    /// Mean loss and summed gradients of a batch, reduced in a fixed order.
    fn batch_gradients(&self, batch: &Batch, seeds: &[u64]) -> Result<Option<(f64, Gradients<f32>)>> {
        let params = &self.params;
        let jobs: Vec<(usize, u64)> = (0..batch.groups.len()).zip(seeds.iter().copied()).collect();
        let partials = jobs
            .par_chunks(CHUNK)
            .map(|chunk| -> Result<(f64, usize, Gradients<f32>)> {
                let mut total = Gradients::zeros_for(&params.store);
                let mut loss = 0.0;
                let mut n = 0;
                for &(gi, seed) in chunk {
                    let group = &batch.groups[gi];
                    let q = batch.questions[group.question].trimmed();
                    let pos = batch.relations[group.positive].trimmed();
                    let negs: Vec<TokenSeq> =
                        group.negatives.iter().map(|&r| batch.relations[r].trimmed()).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    if let Some((l, g)) = question_loss(params, &q, &pos, &negs, Some(&mut rng))? {
                        loss += l as f64;
                        n += 1;
                        total.accumulate(&g);
                    }
                }
                Ok((loss, n, total))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Gradients::zeros_for(&params.store);
        let (mut loss, mut n) = (0.0, 0);
        for (l, k, g) in &partials {
            loss += l;
            n += k;
            grads.accumulate(g);
        }
        if n == 0 {
            return Ok(None);
        }
        grads.scale(1.0 / n as f32);
        Ok(Some((loss / n as f64, grads)))
    }

    /// Forward, backward and one optimizer step for a batch.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<Option<f64>> {
        let seeds: Vec<u64> = batch.groups.iter().map(|_| self.rng.gen()).collect();
        let Some((loss, mut grads)) = self.batch_gradients(batch, &seeds)? else {
            return Ok(None);
        };
        if !loss.is_finite() {
            return Err(Error::PoisonedGradient("loss".into()));
        }
        if let Some(max) = self.hyper.max_grad_norm {
            let norm = grads.norm() as f64;
            if norm > max {
                grads.scale((max / norm) as f32);
            }
        }
        self.optimizer.step(&mut self.params.store, &grads)?;
        self.steps += 1;
        Ok(Some(loss))
    }

    /// Shuffles, batches and trains over the whole training set once.
    pub fn train_epoch(&mut self, train: &[QuestionInstance]) -> Result<EpochStats> {
        let (batches, stats) = make_batches(
            train,
            self.hyper.batch_size,
            self.hyper.negatives_per_question,
            &mut self.rng,
        )?;
        let mut total = 0.0;
        let mut questions = 0;
        for batch in &batches {
            if let Some(loss) = self.train_batch(batch)? {
                total += loss * batch.groups.len() as f64;
                questions += batch.groups.len();
            }
        }
        self.epochs_run += 1;
        Ok(EpochStats {
            mean_loss: if questions == 0 { 0.0 } else { total / questions as f64 },
            questions,
            skipped_no_negatives: stats.no_negatives,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EpochLimit,
    Patience,
    Diverged,
}

impl StopReason {
    pub fn keyword(self) -> &'static str {
        match self {
            StopReason::EpochLimit => "epoch_limit",
            StopReason::Patience => "patience",
            StopReason::Diverged => "diverged",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
    /// Message of the error that stopped a diverged run.
    pub divergence: Option<String>,
    pub hyper: TrainConfig,
}

impl TrainReport {
    pub fn best_dev_accuracy(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e - 1].dev_accuracy)
    }

    /// Equality of everything except wall-clock times.
    pub fn same_trajectory(&self, other: &TrainReport) -> bool {
        self.best_epoch == other.best_epoch
            && self.stop == other.stop
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.dev_accuracy.to_bits() == b.dev_accuracy.to_bits()
            })
    }

    /// `key=value` lines: hyper-parameters, then one group per epoch.
    pub fn to_text(&self, model: &crate::config::ModelConfig) -> String {
        let mut out = String::new();
        for (k, v) in model.to_pairs() {
            let _ = writeln!(out, "config.{k}={v}");
        }
        for (k, v) in self.hyper.to_pairs() {
            let _ = writeln!(out, "train.{k}={v}");
        }
        for e in &self.epochs {
            let _ = writeln!(out, "epoch.{}.train_loss={}", e.epoch, e.train_loss);
            let _ = writeln!(out, "epoch.{}.dev_accuracy={}", e.epoch, e.dev_accuracy);
            let _ = writeln!(out, "epoch.{}.seconds={:.3}", e.epoch, e.seconds);
        }
        if let Some(b) = self.best_epoch {
            let _ = writeln!(out, "best_epoch={b}");
            let _ = writeln!(out, "best_dev_accuracy={}", self.epochs[b - 1].dev_accuracy);
        }
        let _ = writeln!(out, "stop={}", self.stop.keyword());
        if let Some(d) = &self.divergence {
            let _ = writeln!(out, "divergence={d}");
        }
        out
    }
}

pub struct TrainOutcome {
    /// Parameters of the best dev epoch (the initial ones if no epoch finished).
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Trains from `initial`, keeping the parameters with the best dev
/// accuracy and stopping after `patience` epochs without improvement.
/// A non-finite loss or gradient ends the run with the best parameters so far.
pub fn train(
    initial: Checkpoint,
    train: &[QuestionInstance],
    dev: &[QuestionInstance],
    hyper: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Input("training and dev sets must be non-empty".into()));
    }
    let vocab = initial.vocab;
    let mut trainer = Trainer::new(initial.params, hyper.clone())?;
    let mut best = trainer.params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        stop: StopReason::EpochLimit,
        divergence: None,
        hyper: hyper.clone(),
    };
    let mut since_best = 0;
    for epoch in 1..=hyper.epochs {
        let start = Instant::now();
        let stats = match trainer.train_epoch(train) {
            Ok(s) => s,
            Err(e @ Error::PoisonedGradient(_)) => {
                warn!("epoch {epoch}: {e}; keeping the best parameters so far");
                report.stop = StopReason::Diverged;
                report.divergence = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let acc = evaluate(&trainer.params, dev)?.accuracy;
        let seconds = start.elapsed().as_secs_f64();
        info!(
            "epoch {epoch}: loss {:.5}, dev accuracy {:.4} ({seconds:.1}s)",
            stats.mean_loss, acc
        );
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            dev_accuracy: acc,
            seconds,
        });
        if acc > best_acc {
            best_acc = acc;
            best = trainer.params.clone();
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                report.stop = StopReason::Patience;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            vocab,
            params: best,
        },
        report,
    })
}
