use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::data::vocab::{QuestionInstance, TokenSeq};
use crate::error::{Error, Result};

/// One question's training pairs: the gold candidate against each sampled
/// negative. Indices point into the owning batch's rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairGroup {
    /// Index of the source instance.
    pub instance: usize,
    pub question: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Question rows padded to the longest question in the batch.
    pub questions: Vec<TokenSeq>,
    /// Candidate rows padded to the longest candidate in the batch.
    pub relations: Vec<TokenSeq>,
    pub groups: Vec<PairGroup>,
}

impl Batch {
    pub fn question_len(&self) -> usize {
        self.questions.first().map_or(0, TokenSeq::len)
    }

    pub fn relation_len(&self) -> usize {
        self.relations.first().map_or(0, TokenSeq::len)
    }

    pub fn n_pairs(&self) -> usize {
        self.groups.iter().map(|g| g.negatives.len()).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchStats {
    /// Questions left out because they had no negative candidate.
    pub no_negatives: usize,
}

/// Indices of the negatives a question trains against this epoch. With no
/// cap, or a cap at least the number of negatives, all are used in order.
pub fn sample_negatives<R: Rng + ?Sized>(n: usize, cap: Option<usize>, rng: &mut R) -> Vec<usize> {
    match cap {
        Some(cap) if cap < n => index::sample(rng, n, cap).into_vec(),
        _ => (0..n).collect(),
    }
}

/// Shuffles the instances, samples negatives and groups them into padded
/// batches of `batch_size` questions.
pub fn make_batches<R: Rng + ?Sized>(
    instances: &[QuestionInstance],
    batch_size: usize,
    negatives_per_question: Option<usize>,
    rng: &mut R,
) -> Result<(Vec<Batch>, BatchStats)> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(rng);
    let mut stats = BatchStats::default();
    let mut picked: Vec<(usize, Vec<usize>)> = Vec::with_capacity(order.len());
    for i in order {
        let n = instances[i].negatives.len();
        if n == 0 {
            stats.no_negatives += 1;
            continue;
        }
        picked.push((i, sample_negatives(n, negatives_per_question, rng)));
    }
    let batches = picked
        .chunks(batch_size)
        .map(|chunk| assemble(instances, chunk))
        .collect();
    Ok((batches, stats))
}

fn assemble(instances: &[QuestionInstance], chunk: &[(usize, Vec<usize>)]) -> Batch {
    let mut questions = Vec::with_capacity(chunk.len());
    let mut relations = Vec::new();
    let mut groups = Vec::with_capacity(chunk.len());
    for (i, negs) in chunk {
        let inst = &instances[*i];
        questions.push(inst.question_seq());
        let positive = relations.len();
        relations.push(inst.gold.seq());
        let mut negatives = Vec::with_capacity(negs.len());
        for &n in negs {
            negatives.push(relations.len());
            relations.push(inst.negatives[n].seq());
        }
        groups.push(PairGroup {
            instance: *i,
            question: questions.len() - 1,
            positive,
            negatives,
        });
    }
    let lq = questions.iter().map(TokenSeq::len).max().unwrap_or(0);
    let lr = relations.iter().map(TokenSeq::len).max().unwrap_or(0);
    Batch {
        questions: questions.iter().map(|q| q.padded(lq)).collect(),
        relations: relations.iter().map(|r| r.padded(lr)).collect(),
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::dataset::parse_dataset;
    use crate::data::vocab::{TokenKind, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus() -> Vec<QuestionInstance> {
        let text = "where was ⟨e⟩ born\tplace_of_birth\tplace_of_death|nationality|gender\n\
who directed ⟨e⟩\tdirected_by\tproduced_by\n\
what is ⟨e⟩\tgender\t\n\
what did ⟨e⟩ study at university\teducation institution\teducation degree|place_of_birth\n";
        let ds = parse_dataset(text, "t").unwrap();
        let vocab = Vocabulary::build(&ds.instances, 1);
        vocab.encode_all(&ds.instances, &ModelConfig::default()).0
    }

    #[test]
    fn masks_mark_real_tokens_and_rows_share_a_length() {
        let data = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batches, stats) = make_batches(&data, 2, None, &mut rng).unwrap();
        assert_eq!(stats.no_negatives, 1);
        assert_eq!(batches.iter().map(|b| b.groups.len()).sum::<usize>(), 3);
        for b in &batches {
            for q in &b.questions {
                assert_eq!(q.len(), b.question_len());
                let inst = &data[b.groups.iter().find(|g| b.questions[g.question] == *q).unwrap().instance];
                assert_eq!(q.real_len(), inst.question.len());
                assert_eq!(q.mask(), q.kinds.iter().map(|&k| k != TokenKind::Pad).collect::<Vec<_>>());
            }
            assert!(b.relations.iter().all(|r| r.len() == b.relation_len()));
        }
    }

    #[test]
    fn uncapped_negatives_are_all_used_in_order() {
        let data = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batches, _) = make_batches(&data, 10, Some(50), &mut rng).unwrap();
        let b = &batches[0];
        for g in &b.groups {
            let inst = &data[g.instance];
            assert_eq!(g.negatives.len(), inst.negatives.len());
            for (k, &row) in g.negatives.iter().enumerate() {
                assert_eq!(b.relations[row].trimmed(), inst.negatives[k].seq());
            }
            assert_eq!(b.relations[g.positive].trimmed(), inst.gold.seq());
        }
    }

    #[test]
    fn capped_sampling_is_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut s = sample_negatives(10, Some(4), &mut rng);
            assert_eq!(s.len(), 4);
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 4);
        }
    }

    #[test]
    fn equal_seeds_give_equal_batches() {
        let data = corpus();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_batches(&data, 2, Some(1), &mut rng).unwrap().0
        };
        assert_eq!(run(5), run(5));
        assert!(make_batches(&data, 0, None, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn default_batch_size_is_256() {
        assert_eq!(crate::config::TrainConfig::default().batch_size, 256);
    }
}
