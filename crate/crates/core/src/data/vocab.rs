use std::collections::HashMap;

use crate::config::ModelConfig;
use crate::data::dataset::{RawInstance, RelationChain};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const ENTITY: u32 = 2;
pub const UNK_RELATION: u32 = 0;

/// Placeholder that replaces the topic entity mention in questions.
pub const ENTITY_TOKEN: &str = "⟨e⟩";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_RELATION_TOKEN: &str = "<unk_relation>";

/// Word tokens of one relation identifier: the last `/`-separated path
/// segment split on `_`, lowercased. Empty pieces are dropped.
pub fn relation_words(identifier: &str) -> Vec<String> {
    let segment = identifier.rsplit('/').next().unwrap_or(identifier);
    segment
        .split('_')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Lowercases a question token; the entity placeholder is kept verbatim.
pub fn normalize_word(token: &str) -> String {
    if token == ENTITY_TOKEN {
        token.to_string()
    } else {
        token.to_lowercase()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    /// Index into the word table.
    Word,
    /// Index into the relation table.
    Relation,
    Pad,
}

/// A possibly padded id sequence; each id indexes the table named by its kind.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub kinds: Vec<TokenKind>,
}

impl TokenSeq {
    pub fn words(ids: Vec<u32>) -> Self {
        let kinds = vec![TokenKind::Word; ids.len()];
        Self { ids, kinds }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.kinds.iter().map(|&k| k != TokenKind::Pad).collect()
    }

    pub fn real_len(&self) -> usize {
        self.kinds.iter().filter(|&&k| k != TokenKind::Pad).count()
    }

    /// The sequence without its padding positions.
    pub fn trimmed(&self) -> Self {
        let (ids, kinds) = self
            .ids
            .iter()
            .zip(&self.kinds)
            .filter(|(_, &k)| k != TokenKind::Pad)
            .map(|(&i, &k)| (i, k))
            .unzip();
        Self { ids, kinds }
    }

    /// Appends padding up to `len` positions.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(PAD);
            out.kinds.push(TokenKind::Pad);
        }
        out
    }
}

/// A candidate chain as word tokens followed by one relation-level token
/// per chain element.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RelationTokens {
    pub chain: RelationChain,
    pub word_ids: Vec<u32>,
    pub rel_ids: Vec<u32>,
}

impl RelationTokens {
    pub fn seq(&self) -> TokenSeq {
        let mut ids = self.word_ids.clone();
        ids.extend_from_slice(&self.rel_ids);
        let mut kinds = vec![TokenKind::Word; self.word_ids.len()];
        kinds.extend(std::iter::repeat_n(TokenKind::Relation, self.rel_ids.len()));
        TokenSeq { ids, kinds }
    }

    pub fn len(&self) -> usize {
        self.word_ids.len() + self.rel_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A question with vocabulary ids and its candidate relations.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionInstance {
    pub text: String,
    pub question: Vec<u32>,
    pub gold: RelationTokens,
    pub negatives: Vec<RelationTokens>,
}

impl QuestionInstance {
    pub fn question_seq(&self) -> TokenSeq {
        TokenSeq::words(self.question.clone())
    }

    /// Candidates in evaluation order: negatives first, gold last.
    pub fn candidates(&self) -> Vec<&RelationTokens> {
        self.negatives.iter().chain(std::iter::once(&self.gold)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodeStats {
    pub truncated_questions: usize,
    pub truncated_relations: usize,
    pub unknown_words: usize,
    pub unknown_relations: usize,
}

/// Word and relation id maps. Word ids 0, 1, 2 are padding, unknown and
/// the entity placeholder; relation id 0 is the unknown relation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    word_ix: HashMap<String, u32>,
    relations: Vec<String>,
    relation_ix: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::empty()
    }
}

impl Vocabulary {
    pub fn empty() -> Self {
        let mut v = Self {
            words: Vec::new(),
            word_ix: HashMap::new(),
            relations: Vec::new(),
            relation_ix: HashMap::new(),
        };
        for w in [PAD_TOKEN, UNK_TOKEN, ENTITY_TOKEN] {
            v.push_word(w);
        }
        v.push_relation(UNK_RELATION_TOKEN);
        v
    }

    /// Rebuilds a vocabulary from id-ordered token lists; the reserved
    /// entries must be in place.
    pub fn from_tokens(words: Vec<String>, relations: Vec<String>) -> Result<Self> {
        let reserved_ok = words.len() >= 3
            && words[0] == PAD_TOKEN
            && words[1] == UNK_TOKEN
            && words[2] == ENTITY_TOKEN
            && relations.first().map(String::as_str) == Some(UNK_RELATION_TOKEN);
        if !reserved_ok {
            return Err(Error::Vocabulary("reserved tokens missing or out of place".into()));
        }
        let mut v = Self {
            words: Vec::new(),
            word_ix: HashMap::new(),
            relations: Vec::new(),
            relation_ix: HashMap::new(),
        };
        for w in words {
            if v.word_ix.contains_key(&w) {
                return Err(Error::Vocabulary(format!("duplicate word `{w}`")));
            }
            v.push_word(&w);
        }
        for r in relations {
            if v.relation_ix.contains_key(&r) {
                return Err(Error::Vocabulary(format!("duplicate relation `{r}`")));
            }
            v.push_relation(&r);
        }
        Ok(v)
    }

    fn push_word(&mut self, w: &str) -> u32 {
        let id = self.words.len() as u32;
        self.words.push(w.to_string());
        self.word_ix.insert(w.to_string(), id);
        id
    }

    fn push_relation(&mut self, r: &str) -> u32 {
        let id = self.relations.len() as u32;
        self.relations.push(r.to_string());
        self.relation_ix.insert(r.to_string(), id);
        id
    }

    /// Words with frequency at least `min_count` get ids in first-seen
    /// order; every relation identifier seen gets a relation id.
    pub fn build(instances: &[RawInstance], min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        let mut relation_order: Vec<String> = Vec::new();
        let mut seen_relations: HashMap<String, ()> = HashMap::new();
        let mut see = |w: String, counts: &mut HashMap<String, usize>| {
            let c = counts.entry(w.clone()).or_insert(0);
            if *c == 0 {
                order.push(w);
            }
            *c += 1;
        };
        for inst in instances {
            for tok in &inst.question {
                see(normalize_word(tok), &mut counts);
            }
            for chain in std::iter::once(&inst.gold).chain(&inst.negatives) {
                for id in chain.ids() {
                    for w in relation_words(id) {
                        see(w, &mut counts);
                    }
                    if seen_relations.insert(id.clone(), ()).is_none() {
                        relation_order.push(id.clone());
                    }
                }
            }
        }
        let mut v = Self::empty();
        for w in order {
            if counts[&w] >= min_count.max(1) && !v.word_ix.contains_key(&w) {
                v.push_word(&w);
            }
        }
        for r in relation_order {
            if !v.relation_ix.contains_key(&r) {
                v.push_relation(&r);
            }
        }
        v
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn word_id(&self, token: &str) -> u32 {
        self.word_ix.get(token).copied().unwrap_or(UNK)
    }

    pub fn lookup_word(&self, token: &str) -> Option<u32> {
        self.word_ix.get(token).copied()
    }

    pub fn relation_id(&self, identifier: &str) -> u32 {
        self.relation_ix.get(identifier).copied().unwrap_or(UNK_RELATION)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn relation(&self, id: u32) -> Option<&str> {
        self.relations.get(id as usize).map(String::as_str)
    }

    pub fn tokenize_relation(&self, chain: &RelationChain) -> RelationTokens {
        let mut word_ids = Vec::new();
        let mut rel_ids = Vec::new();
        for id in chain.ids() {
            word_ids.extend(relation_words(id).iter().map(|w| self.word_id(w)));
            rel_ids.push(self.relation_id(id));
        }
        RelationTokens {
            chain: chain.clone(),
            word_ids,
            rel_ids,
        }
    }

    pub fn encode_question(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.word_id(&normalize_word(t))).collect()
    }

    /// Token strings for a sequence, for inspection output.
    pub fn decode(&self, seq: &TokenSeq) -> Vec<String> {
        seq.ids
            .iter()
            .zip(&seq.kinds)
            .map(|(&id, kind)| {
                let s = match kind {
                    TokenKind::Word => self.word(id),
                    TokenKind::Relation => self.relation(id),
                    TokenKind::Pad => Some(PAD_TOKEN),
                };
                s.unwrap_or(UNK_TOKEN).to_string()
            })
            .collect()
    }

    /// Maps a raw instance to ids, truncating to the configured lengths.
    /// Relation truncation drops word tokens and keeps every relation-level token.
    pub fn encode(
        &self,
        raw: &RawInstance,
        config: &ModelConfig,
        stats: &mut EncodeStats,
    ) -> QuestionInstance {
        let mut question = self.encode_question(&raw.question);
        stats.unknown_words += question.iter().filter(|&&id| id == UNK).count();
        if question.len() > config.max_question_len {
            question.truncate(config.max_question_len);
            stats.truncated_questions += 1;
        }
        let mut rel = |chain: &RelationChain| {
            let mut toks = self.tokenize_relation(chain);
            stats.unknown_relations += toks.rel_ids.iter().filter(|&&r| r == UNK_RELATION).count();
            let room = config.max_relation_tokens.saturating_sub(toks.rel_ids.len());
            if toks.word_ids.len() > room {
                toks.word_ids.truncate(room);
                stats.truncated_relations += 1;
            }
            toks
        };
        let gold = rel(&raw.gold);
        let negatives = raw.negatives.iter().map(&mut rel).collect();
        QuestionInstance {
            text: raw.question_text(),
            question,
            gold,
            negatives,
        }
    }

    pub fn encode_all(
        &self,
        raws: &[RawInstance],
        config: &ModelConfig,
    ) -> (Vec<QuestionInstance>, EncodeStats) {
        let mut stats = EncodeStats::default();
        let out = raws.iter().map(|r| self.encode(r, config, &mut stats)).collect();
        (out, stats)
    }
}
