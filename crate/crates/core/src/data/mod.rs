//! Dataset files, relation tokenization, vocabularies, embedding tables
//! and padded training batches.

pub mod batch;
pub mod convert;
pub mod dataset;
pub mod embeddings;
pub mod vocab;

pub use batch::{make_batches, Batch, BatchStats, PairGroup};
pub use dataset::{load_dataset, parse_dataset, save_dataset, Dataset, RawInstance, RelationChain};
pub use embeddings::{init_embeddings, EmbeddingTables};
pub use vocab::{
    relation_words, EncodeStats, QuestionInstance, RelationTokens, TokenKind, TokenSeq, Vocabulary,
    ENTITY_TOKEN,
};
