//! Canonical tab-separated dataset format.
//!
//! One instance per line, three tab-separated fields:
//!
//! 1. question tokens separated by single spaces, topic entity already
//!    replaced by `⟨e⟩`;
//! 2. gold relation chain, one or two identifiers separated by a space;
//! 3. negative chains separated by `|` (identifiers within a chain by a
//!    space); may be empty.

use std::fmt;
use std::io::Write;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

/// One or two relation identifiers forming a path from the topic entity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationChain(Vec<String>);

impl RelationChain {
    pub fn new<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Result<Self> {
        let ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        if ids.is_empty() || ids.len() > 2 {
            return Err(Error::Format(format!(
                "a relation chain has 1 or 2 identifiers, got {}",
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|s| s.is_empty() || s.contains(char::is_whitespace)) {
            return Err(Error::Format(format!("invalid relation identifier `{bad}`")));
        }
        Ok(Self(ids))
    }

    /// Parses identifiers separated by single spaces.
    pub fn parse(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Format("empty relation chain".into()));
        }
        Self::new(text.split(' '))
    }

    pub fn ids(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for RelationChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

/// A dataset line before vocabulary lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawInstance {
    pub question: Vec<String>,
    pub gold: RelationChain,
    pub negatives: Vec<RelationChain>,
}

impl RawInstance {
    pub fn question_text(&self) -> String {
        self.question.join(" ")
    }

    /// Candidates in evaluation order: negatives first, gold last.
    pub fn candidates(&self) -> Vec<&RelationChain> {
        self.negatives.iter().chain(std::iter::once(&self.gold)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadDiagnostics {
    /// Negatives dropped because they repeated the gold chain or another negative.
    pub deduplicated_negatives: usize,
    /// Lines skipped because their gold field was empty.
    pub skipped_no_gold: usize,
    pub blank_lines: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub instances: Vec<RawInstance>,
    pub diagnostics: LoadDiagnostics,
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn parse_dataset(text: &str, source_name: &str) -> Result<Dataset> {
    let mut out = Dataset::default();
    let n_lines = text.split('\n').count();
    for (i, raw_line) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if line.trim().is_empty() {
            if line_no != n_lines {
                out.diagnostics.blank_lines += 1;
            }
            continue;
        }
        let err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let question: Vec<String> = fields[0].split_whitespace().map(str::to_string).collect();
        if question.is_empty() {
            return Err(err("empty question".into()));
        }
        if fields[1].trim().is_empty() {
            warn!("{source_name}:{line_no}: no gold relation, instance skipped");
            out.diagnostics.skipped_no_gold += 1;
            continue;
        }
        let gold = RelationChain::parse(fields[1]).map_err(|e| err(e.to_string()))?;
        let mut negatives: Vec<RelationChain> = Vec::new();
        let mut removed = 0;
        if !fields[2].is_empty() {
            for chain in fields[2].split('|') {
                let chain = RelationChain::parse(chain).map_err(|e| err(e.to_string()))?;
                if chain == gold || negatives.contains(&chain) {
                    removed += 1;
                    continue;
                }
                negatives.push(chain);
            }
        }
        if removed > 0 {
            warn!("{source_name}:{line_no}: {removed} duplicate or gold-equal negatives removed");
            out.diagnostics.deduplicated_negatives += removed;
        }
        out.instances.push(RawInstance {
            question,
            gold,
            negatives,
        });
    }
    Ok(out)
}

/// Renders one instance as a canonical line (without the newline).
pub fn format_instance(inst: &RawInstance) -> String {
    let negs: Vec<String> = inst.negatives.iter().map(ToString::to_string).collect();
    format!("{}\t{}\t{}", inst.question_text(), inst.gold, negs.join("|"))
}

pub fn write_dataset<W: Write>(instances: &[RawInstance], mut w: W) -> std::io::Result<()> {
    for inst in instances {
        writeln!(w, "{}", format_instance(inst))?;
    }
    Ok(())
}

pub fn save_dataset(instances: &[RawInstance], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(instances, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
