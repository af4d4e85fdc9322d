//! Generated question/relation corpora for desk-scale experiments.
//!
//! Questions come from per-relation templates whose wording shares words
//! with the relation names. Candidate sets mix the gold chain with
//! look-alike relations (`place_of_birth` next to `date_of_birth`,
//! `directed_by` next to `produced_by`).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::{RawInstance, RelationChain};
use crate::data::vocab::ENTITY_TOKEN;

struct RelationTemplates {
    chain: &'static [&'static str],
    templates: &'static [&'static str],
    /// Indices (into `RELATIONS` or `DISTRACTORS` offset by `RELATIONS.len()`)
    /// of easily confused chains.
    confusers: &'static [usize],
}

const E: &str = "E";

const RELATIONS: &[RelationTemplates] = &[
    RelationTemplates {
        chain: &["/people/person/place_of_birth"],
        templates: &[
            "where was E born",
            "what is the place of birth of E",
            "which place was E born in",
            "where is the birth place of E",
            "what city is the birth place of E",
        ],
        confusers: &[1, 2],
    },
    RelationTemplates {
        chain: &["/people/deceased_person/place_of_death"],
        templates: &[
            "where did E die",
            "what is the place of death of E",
            "in which place did E die",
            "where was the death of E",
            "which city was the place of death of E",
        ],
        confusers: &[0, 2],
    },
    RelationTemplates {
        chain: &["/people/person/date_of_birth"],
        templates: &[
            "when was E born",
            "what is the date of birth of E",
            "on what date was E born",
            "when is the birth date of E",
            "what birth date does E have",
        ],
        confusers: &[0, 1],
    },
    RelationTemplates {
        chain: &["/people/person/nationality"],
        templates: &[
            "what nationality is E",
            "what is the nationality of E",
            "which nationality does E have",
            "E has what nationality",
            "what country gives E nationality",
        ],
        confusers: &[8, 20],
    },
    RelationTemplates {
        chain: &["/people/person/profession"],
        templates: &[
            "what profession is E",
            "what is the profession of E",
            "what profession does E have",
            "which profession does E work in",
            "E has what profession",
        ],
        confusers: &[7, 13],
    },
    RelationTemplates {
        chain: &["/film/film/directed_by"],
        templates: &[
            "who directed E",
            "who was E directed by",
            "which director made the film E",
            "E was directed by whom",
            "who is the director of the film E",
        ],
        confusers: &[6, 14],
    },
    RelationTemplates {
        chain: &["/film/film/produced_by"],
        templates: &[
            "who produced E",
            "who was E produced by",
            "which producer made the film E",
            "E was produced by whom",
            "who is the producer of the film E",
        ],
        confusers: &[5, 14],
    },
    RelationTemplates {
        chain: &["/music/artist/genre"],
        templates: &[
            "what genre is E",
            "what is the music genre of E",
            "which genre does E play",
            "what genre of music does E make",
            "E plays music of what genre",
        ],
        confusers: &[4, 21],
    },
    RelationTemplates {
        chain: &["/location/location/containedby"],
        templates: &[
            "where is E contained",
            "what location contains E",
            "E is contained by which location",
            "which place is E contained in",
            "what region is E contained by",
        ],
        confusers: &[3, 16],
    },
    RelationTemplates {
        chain: &["/book/written_work/author"],
        templates: &[
            "who is the author of E",
            "which author wrote E",
            "E was written by which author",
            "who was the author of the book E",
            "name the author of E",
        ],
        confusers: &[5, 17],
    },
    RelationTemplates {
        chain: &["/people/person/education", "/education/education/institution"],
        templates: &[
            "what education institution did E attend",
            "which institution gave E an education",
            "where did E get an education",
            "what institution did E study at",
            "which education institution did E go to",
        ],
        confusers: &[18, 0],
    },
    RelationTemplates {
        chain: &["/people/person/spouse_s", "/people/marriage/spouse"],
        templates: &[
            "who is the spouse of E",
            "who was E s spouse",
            "which person is the spouse of E",
            "E is married to which spouse",
            "name the spouse of E",
        ],
        confusers: &[19, 3],
    },
];

/// Chains that only ever appear as negatives.
const DISTRACTORS: &[&[&str]] = &[
    &["/people/person/gender"],
    &["/people/person/ethnicity"],
    &["/film/film/edited_by"],
    &["/music/artist/label"],
    &["/location/location/time_zones"],
    &["/book/written_work/subjects"],
    &["/people/person/education", "/education/education/degree"],
    &["/people/person/sibling_s", "/people/sibling_relationship/sibling"],
    &["/people/person/religion"],
    &["/film/film/genre"],
];

/// Words sprinkled before and after a template.
const FILLERS: &[&str] = &[
    "please", "tell", "me", "i", "wonder", "do", "you", "know", "quick", "question", "hey",
    "so", "actually", "really", "now", "exactly", "anyone", "remember", "curious", "about",
    "again", "today", "friend", "asked", "quiz", "trivia", "okay", "well", "then", "maybe",
    "help", "need", "answer", "fact", "check", "sure", "just", "like", "honestly", "by",
    "chance", "folks", "here", "there", "kindly", "hmm", "right", "yes", "dear", "someone",
];

/// Number of relations that appear as gold chains.
pub const N_RELATIONS: usize = RELATIONS.len();

fn chain_at(i: usize) -> RelationChain {
    let ids: &[&str] = if i < RELATIONS.len() {
        RELATIONS[i].chain
    } else {
        DISTRACTORS[i - RELATIONS.len()]
    };
    RelationChain::new(ids.iter().copied()).expect("static chain")
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    pub min_candidates: usize,
    pub max_candidates: usize,
    /// Upper bound on filler words added around each question.
    pub max_fillers: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 200,
            dev: 50,
            min_candidates: 4,
            max_candidates: 8,
            max_fillers: 2,
            seed: 7,
        }
    }
}

fn instance<R: Rng>(rel: usize, template: &str, cfg: &SynthConfig, rng: &mut R) -> RawInstance {
    let n_fill = rng.gen_range(0..=cfg.max_fillers);
    let n_prefix = rng.gen_range(0..=n_fill);
    let filler = |rng: &mut R| FILLERS.choose(rng).expect("fillers").to_string();
    let mut question: Vec<String> = (0..n_prefix).map(|_| filler(rng)).collect();
    question.extend(
        template
            .split(' ')
            .map(|w| if w == E { ENTITY_TOKEN.to_string() } else { w.to_string() }),
    );
    question.extend((n_prefix..n_fill).map(|_| filler(rng)));
    let n_cands = rng.gen_range(cfg.min_candidates..=cfg.max_candidates);
    let mut negatives: Vec<usize> = Vec::new();
    for &c in RELATIONS[rel].confusers {
        if negatives.len() + 1 < n_cands && rng.gen_bool(0.75) {
            negatives.push(c);
        }
    }
    let mut pool: Vec<usize> = (0..RELATIONS.len() + DISTRACTORS.len())
        .filter(|&i| i != rel && !negatives.contains(&i))
        .collect();
    pool.shuffle(rng);
    negatives.extend(pool.into_iter().take(n_cands - 1 - negatives.len()));
    negatives.shuffle(rng);
    RawInstance {
        question,
        gold: chain_at(rel),
        negatives: negatives.into_iter().map(chain_at).collect(),
    }
}

/// Train and dev splits. Every relation is spread evenly over both; the
/// template and candidate set of each question are drawn at random.
pub fn generate(cfg: &SynthConfig) -> (Vec<RawInstance>, Vec<RawInstance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make = |n: usize, offset: usize| -> Vec<RawInstance> {
        let mut out: Vec<RawInstance> = (0..n)
            .map(|i| {
                let rel = (i + offset) % RELATIONS.len();
                let t = RELATIONS[rel].templates.choose(&mut rng).expect("templates");
                instance(rel, t, cfg, &mut rng)
            })
            .collect();
        out.shuffle(&mut rng);
        out
    };
    let train = make(cfg.train, 0);
    let dev = make(cfg.dev, cfg.train);
    (train, dev)
}
