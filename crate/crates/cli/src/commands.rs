use std::fmt;
use std::path::{Path, PathBuf};

use abwim::config::{apply_overrides, load_overrides, parse_pairs};
use abwim::data::convert::convert_released_files;
use abwim::data::dataset::{format_instance, load_dataset, RawInstance, RelationChain};
use abwim::data::vocab::{relation_words, QuestionInstance, ENTITY_TOKEN};
use abwim::eval::evaluate;
use abwim::model::Inspection;
use abwim::training::{train as run_training, StopReason};
use abwim::{Checkpoint, ModelConfig, TrainConfig, Variant};
use clap::Args;
use log::{info, warn};

use crate::Shared;

pub enum CliError {
    /// Bad arguments, unreadable or malformed inputs, incompatible files.
    Input(String),
    /// Failures after the inputs were accepted.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<abwim::Error> for CliError {
    fn from(e: abwim::Error) -> Self {
        use abwim::Error as E;
        match e {
            E::Tensor(_) | E::PoisonedGradient(_) => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

fn write_output(path: &Path, bytes: &[u8]) -> CliResult {
    std::fs::write(path, bytes).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

/// Fails early when `path` could not be created, so no command writes a
/// partial set of outputs.
fn check_writable(path: &Path) -> CliResult {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(input(format!("{}: output directory does not exist", path.display())));
    }
    Ok(())
}

impl Shared {
    fn overrides(&self) -> CliResult<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(path) => load_overrides(path)?,
            None => Vec::new(),
        };
        pairs.extend(parse_pairs(&self.set.join("\n"), "--set")?);
        Ok(pairs)
    }

    fn apply_flags(&self, model: &mut ModelConfig) {
        if let Some(s) = self.seed {
            model.seed = s;
        }
        if let Some(v) = self.variant {
            model.variant = v;
        }
        if let Some(p) = self.preprocess {
            model.preprocessing = p;
        }
        if let Some(a) = self.attention {
            model.attention = a;
        }
    }

    /// Configurations for a fresh model.
    fn configs(&self) -> CliResult<(ModelConfig, TrainConfig)> {
        let mut model = ModelConfig::default();
        let mut hyper = TrainConfig::default();
        apply_overrides(&self.overrides()?, &mut model, &mut hyper)?;
        self.apply_flags(&mut model);
        model.validate()?;
        hyper.validate()?;
        Ok((model, hyper))
    }

    /// Loads a checkpoint, applying any configuration overrides to its
    /// stored configuration; the arrays must fit the result.
    fn load(&self, path: &Path) -> CliResult<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        let stored = Checkpoint::from_bytes(&bytes)?;
        let mut model = stored.config().clone();
        let mut hyper = TrainConfig::default();
        apply_overrides(&self.overrides()?, &mut model, &mut hyper)?;
        self.apply_flags(&mut model);
        if &model == stored.config() {
            return Ok(stored);
        }
        model.validate()?;
        Ok(Checkpoint::from_bytes_for(&bytes, &model)?)
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Canonical training TSV.
    #[arg(long)]
    train: PathBuf,
    /// Canonical dev TSV used for early stopping.
    #[arg(long)]
    dev: PathBuf,
    /// Checkpoint to write.
    #[arg(long, short)]
    out: PathBuf,
    /// Report to write; defaults to the checkpoint path with `.report` appended.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Pretrained word vectors, one `token v1 .. vd` line per word.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    shared: Shared,
}

fn read_dataset(path: &Path) -> CliResult<Vec<RawInstance>> {
    let ds = load_dataset(path)?;
    if ds.instances.is_empty() {
        return Err(input(format!("{}: no instances", path.display())));
    }
    Ok(ds.instances)
}

pub fn train(a: TrainArgs) -> CliResult {
    let (model, mut hyper) = a.shared.configs()?;
    if let Some(e) = a.epochs {
        hyper.epochs = e;
        hyper.validate()?;
    }
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".report");
        PathBuf::from(p)
    });
    check_writable(&a.out)?;
    check_writable(&report_path)?;
    let train_raw = read_dataset(&a.train)?;
    let dev_raw = read_dataset(&a.dev)?;
    let init = Checkpoint::initialize(&model, &train_raw, hyper.min_count, a.embeddings.as_deref())?;
    let (train_set, train_stats) = init.vocab.encode_all(&train_raw, &model);
    let (dev_set, dev_stats) = init.vocab.encode_all(&dev_raw, &model);
    info!(
        "{} training and {} dev questions; {} words, {} relations; {} unknown dev words",
        train_set.len(),
        dev_set.len(),
        init.vocab.n_words(),
        init.vocab.n_relations(),
        dev_stats.unknown_words
    );
    if train_stats.truncated_questions + dev_stats.truncated_questions > 0 {
        warn!(
            "{} questions truncated to {} tokens",
            train_stats.truncated_questions + dev_stats.truncated_questions,
            model.max_question_len
        );
    }
    let out = run_training(init, &train_set, &dev_set, &hyper)?;
    write_output(&a.out, &out.checkpoint.to_bytes())?;
    write_output(&report_path, out.report.to_text(out.checkpoint.config()).as_bytes())?;
    match out.report.best_dev_accuracy() {
        Some(acc) => println!("best_dev_accuracy={acc}"),
        None => println!("best_dev_accuracy=none"),
    }
    if out.report.stop == StopReason::Diverged {
        return Err(CliError::Internal(format!(
            "training diverged ({}); the best parameters so far were written",
            out.report.divergence.as_deref().unwrap_or("non-finite values")
        )));
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, short)]
    checkpoint: PathBuf,
    /// Canonical TSV to rank.
    #[arg(long)]
    data: PathBuf,
    /// Per-instance CSV to write.
    #[arg(long)]
    records: Option<PathBuf>,
    #[command(flatten)]
    shared: Shared,
}

fn encode(ckpt: &Checkpoint, raw: &[RawInstance]) -> Vec<QuestionInstance> {
    ckpt.vocab.encode_all(raw, ckpt.config()).0
}

pub fn eval(a: EvalArgs) -> CliResult {
    if let Some(p) = &a.records {
        check_writable(p)?;
    }
    let ckpt = a.shared.load(&a.checkpoint)?;
    let data = encode(&ckpt, &load_dataset(&a.data)?.instances);
    let result = evaluate(&ckpt.params, &data)?;
    if let Some(path) = &a.records {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Internal(e.to_string());
        w.write_record(["question", "predicted", "gold", "gold_rank", "margin", "correct"])
            .map_err(csv_err)?;
        for r in &result.records {
            let margin = r.margin.map(|m| m.to_string()).unwrap_or_default();
            w.write_record([
                r.question.as_str(),
                &r.predicted.to_string(),
                &r.gold.to_string(),
                &r.gold_rank.to_string(),
                &margin,
                if r.correct { "1" } else { "0" },
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
        write_output(path, &bytes)?;
    }
    println!("accuracy={}", result.accuracy);
    println!("n={}", result.n);
    println!("n_correct={}", result.n_correct);
    Ok(())
}

/// Whitespace tokens of a question that mentions the topic entity once.
fn question_tokens(text: &str) -> CliResult<Vec<String>> {
    let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let n = tokens.iter().filter(|t| *t == ENTITY_TOKEN).count();
    if n != 1 {
        return Err(input(format!(
            "the question must contain the entity token {ENTITY_TOKEN} exactly once, found {n}"
        )));
    }
    Ok(tokens)
}

fn parse_chain(text: &str) -> CliResult<RelationChain> {
    Ok(RelationChain::parse(text.trim())?)
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long, short)]
    checkpoint: PathBuf,
    /// Question with the topic entity replaced by `⟨e⟩`.
    #[arg(long, short)]
    question: String,
    /// Candidate relation chain (identifiers separated by a space); repeat per candidate.
    #[arg(long = "candidate", required = true)]
    candidates: Vec<String>,
    #[command(flatten)]
    shared: Shared,
}

pub fn predict(a: PredictArgs) -> CliResult {
    let question = question_tokens(&a.question)?;
    let mut chains: Vec<RelationChain> = Vec::new();
    for c in &a.candidates {
        let chain = parse_chain(c)?;
        if chains.contains(&chain) {
            warn!("duplicate candidate `{chain}` ignored");
            continue;
        }
        chains.push(chain);
    }
    let ckpt = a.shared.load(&a.checkpoint)?;
    let raw = RawInstance {
        question,
        gold: chains[0].clone(),
        negatives: chains[1..].to_vec(),
    };
    let inst = &encode(&ckpt, std::slice::from_ref(&raw))[0];
    // Encoding puts the first chain in the gold slot; restore input order.
    let mut seqs = vec![inst.gold.seq()];
    seqs.extend(inst.negatives.iter().map(|n| n.seq()));
    let ranked = ckpt.params.rank_candidates(&inst.question_seq(), &seqs)?;
    for (i, score) in ranked {
        println!("{}\t{score}", chains[i]);
    }
    Ok(())
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long, short)]
    checkpoint: PathBuf,
    /// Question with the topic entity replaced by `⟨e⟩`.
    #[arg(long, short)]
    question: String,
    /// Relation chain to align against.
    #[arg(long, short)]
    relation: String,
    /// CSV file to write.
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    shared: Shared,
}

struct Inspected {
    question: Vec<String>,
    relation: Vec<String>,
    inspection: Inspection<f32>,
}

fn inspect(a: &InspectArgs) -> CliResult<(Checkpoint, Inspected)> {
    check_writable(&a.out)?;
    let question = question_tokens(&a.question)?;
    let chain = parse_chain(&a.relation)?;
    let ckpt = a.shared.load(&a.checkpoint)?;
    let raw = RawInstance {
        question: question.clone(),
        gold: chain.clone(),
        negatives: Vec::new(),
    };
    let inst = &encode(&ckpt, std::slice::from_ref(&raw))[0];
    let inspection = ckpt.params.inspect(&inst.question_seq(), &inst.gold.seq())?;
    // Token labels in model order, cut to what survived truncation.
    let mut relation: Vec<String> = chain.ids().iter().flat_map(|id| relation_words(id)).collect();
    relation.truncate(inst.gold.word_ids.len());
    relation.extend(chain.ids().iter().cloned());
    let mut question = question;
    question.truncate(inst.question.len());
    Ok((
        ckpt,
        Inspected {
            question,
            relation,
            inspection,
        },
    ))
}

fn unsupported(variant: Variant, what: &str) -> CliError {
    input(format!("variant `{variant}` does not support {what}"))
}

fn csv_bytes(rows: Vec<Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

pub fn inspect_attention(a: InspectArgs) -> CliResult {
    let (ckpt, x) = inspect(&a)?;
    let Some(att) = &x.inspection.attention else {
        return Err(unsupported(ckpt.config().variant, "attention inspection"));
    };
    let mut header = vec!["relation_token".to_string()];
    header.extend(x.question.iter().cloned());
    let mut rows = vec![header];
    for (i, tok) in x.relation.iter().enumerate() {
        let mut row = vec![tok.clone()];
        row.extend(att.row_values(i).iter().map(|v| v.to_string()));
        rows.push(row);
    }
    write_output(&a.out, &csv_bytes(rows)?)
}

pub fn inspect_maxpool(a: InspectArgs) -> CliResult {
    let (ckpt, x) = inspect(&a)?;
    let ins = &x.inspection;
    if ins.features.is_empty() {
        return Err(unsupported(ckpt.config().variant, "max-pooling inspection"));
    }
    let mut order: Vec<usize> = (0..ins.features.len()).collect();
    order.sort_by_key(|&i| (ins.kernel_of[i], i));
    let mut rows = vec![["feature", "kernel_size", "position", "question_token", "value"]
        .map(String::from)
        .to_vec()];
    for i in order {
        let pos = ins.argmax[i];
        rows.push(vec![
            i.to_string(),
            ins.kernel_of[i].to_string(),
            pos.to_string(),
            x.question.get(pos).cloned().unwrap_or_default(),
            ins.features[i].to_string(),
        ]);
    }
    write_output(&a.out, &csv_bytes(rows)?)
}

#[derive(Args)]
pub struct ConvertArgs {
    /// Released relation list, one relation per line.
    #[arg(long)]
    relations: PathBuf,
    /// Released data file referencing the relation list.
    #[arg(long)]
    data: PathBuf,
    /// Canonical TSV to write.
    #[arg(long, short)]
    out: PathBuf,
}

pub fn convert(a: ConvertArgs) -> CliResult {
    check_writable(&a.out)?;
    let (instances, stats) = convert_released_files(&a.relations, &a.data)?;
    let mut text = String::new();
    for inst in &instances {
        text.push_str(&format_instance(inst));
        text.push('\n');
    }
    write_output(&a.out, text.as_bytes())?;
    info!(
        "{} instances written; {} lines without an entity placeholder skipped; {} lines listed several gold relations",
        instances.len(),
        stats.skipped_no_entity,
        stats.multiple_gold
    );
    Ok(())
}
