//! Tokens, vocabulary and the synthetic two-domain world.
//!
//! Text is whitespace-tokenized over a closed vocabulary. The world defines a
//! general domain and a target domain that share sentence structure and
//! function words but have disjoint content words, so a model that learns the
//! structure on one domain can be tested on the other.

mod data;
mod entities;
mod vocab;
mod world;

pub use data::{
    compress_sentence, gen_nli_data, gen_raw_corpus, gen_summ_data, read_jsonl, write_jsonl,
    DatasetRecord, NliExample, NliLabel, SummExample, TaskKind, Veracity,
};
pub use entities::{find_entities, EntitySpan, Gazetteer};
pub use vocab::{Vocab, NUM_SENTINELS};
pub use world::{gen_world, Domain, DomainLexicon, Proposition, Relation, Slot, SyntheticWorldSpec, Template, WorldParams};

use thiserror::Error;

pub type Tokens = Vec<String>;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus list")]
    EmptyCorpora,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("invalid world parameters: {0}")]
    InvalidWorldParams(String),
    #[error("vocabulary budget exhausted: need {needed} words, only {available} available")]
    VocabularyBudget { needed: usize, available: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed dataset record on line {line}: {message}")]
    Record { line: usize, message: String },
}

/// Splits text on whitespace.
pub fn tokenize(text: &str) -> Tokens {
    text.split_whitespace().map(str::to_owned).collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}
