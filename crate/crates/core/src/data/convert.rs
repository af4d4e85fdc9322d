//! Import of the publicly released relation-detection files.
//!
//! Those files reference relations by 1-based line number into a separate
//! relation list. A data line is `gold_ids \t negative_ids \t question`,
//! where id lists are space-separated, a missing negative list is written
//! `noNegativeAnswer`, and the topic entity is `#head_entity#`. Two-hop
//! chains in the relation list are joined by `..`, with the second hop
//! written dotted (`education.education.institution`).

use std::path::Path;

use log::warn;

use crate::data::dataset::{RawInstance, RelationChain};
use crate::data::vocab::ENTITY_TOKEN;
use crate::error::{Error, Result};

const RELEASED_ENTITY: &str = "#head_entity#";
const NO_NEGATIVES: &str = "noNegativeAnswer";

/// Turns one relation-list entry into a chain.
pub fn parse_released_relation(entry: &str) -> Result<RelationChain> {
    let parts = entry.trim().split("..").map(|p| {
        if p.starts_with('/') {
            p.to_string()
        } else {
            format!("/{}", p.replace('.', "/"))
        }
    });
    RelationChain::new(parts)
}

pub fn parse_relation_list(text: &str) -> Result<Vec<RelationChain>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_released_relation)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConvertStats {
    /// Lines whose gold field listed more than one relation; the first is kept.
    pub multiple_gold: usize,
    pub skipped_no_entity: usize,
}

/// Converts released data lines to canonical instances.
pub fn convert_released(
    relations: &[RelationChain],
    text: &str,
    source_name: &str,
) -> Result<(Vec<RawInstance>, ConvertStats)> {
    let mut stats = ConvertStats::default();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let lookup = |tok: &str| -> Result<RelationChain> {
            let id: usize = tok.parse().map_err(|_| err(format!("bad relation id `{tok}`")))?;
            id.checked_sub(1)
                .and_then(|k| relations.get(k))
                .cloned()
                .ok_or_else(|| err(format!("relation id {id} not in the relation list")))
        };
        let gold_ids: Vec<&str> = fields[0].split_whitespace().collect();
        let Some(first) = gold_ids.first() else {
            return Err(err("empty gold field".into()));
        };
        if gold_ids.len() > 1 {
            stats.multiple_gold += 1;
        }
        let gold = lookup(first)?;
        let mut negatives = Vec::new();
        if fields[1].trim() != NO_NEGATIVES {
            for tok in fields[1].split_whitespace() {
                let chain = lookup(tok)?;
                if chain != gold && !negatives.contains(&chain) {
                    negatives.push(chain);
                }
            }
        }
        let question: Vec<String> = fields[2]
            .split_whitespace()
            .map(|t| if t == RELEASED_ENTITY { ENTITY_TOKEN.to_string() } else { t.to_string() })
            .collect();
        if !question.iter().any(|t| t == ENTITY_TOKEN) {
            warn!("{source_name}:{}: no topic entity placeholder, line skipped", i + 1);
            stats.skipped_no_entity += 1;
            continue;
        }
        out.push(RawInstance {
            question,
            gold,
            negatives,
        });
    }
    Ok((out, stats))
}

pub fn convert_released_files(
    relation_list: &Path,
    data: &Path,
) -> Result<(Vec<RawInstance>, ConvertStats)> {
    let rels = std::fs::read_to_string(relation_list).map_err(|e| Error::io(relation_list, e))?;
    let relations = parse_relation_list(&rels)?;
    let text = std::fs::read_to_string(data).map_err(|e| Error::io(data, e))?;
    convert_released(&relations, &text, &data.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn released_lines_become_canonical_instances() {
        let rels = parse_relation_list(
            "/people/person/place_of_birth\n/people/person/nationality\n/people/person/education..education.education.institution\n",
        )
        .unwrap();
        assert_eq!(
            rels[2].ids(),
            ["/people/person/education", "/education/education/institution"]
        );
        let text = "1\t2 1 3\twhere was #head_entity# born\n3\tnoNegativeAnswer\twhere did #head_entity# study\n";
        let (inst, stats) = convert_released(&rels, text, "t").unwrap();
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].negatives.len(), 2);
        assert_eq!(inst[0].question[2], ENTITY_TOKEN);
        assert!(inst[1].negatives.is_empty());
        assert_eq!(stats, ConvertStats::default());
        assert!(convert_released(&rels, "9\t1\tq #head_entity#\n", "t").is_err());
    }
}
