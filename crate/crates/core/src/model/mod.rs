//! Encoder-decoder transformer, reverse-mode autodiff, decoding and
//! checkpoint I/O.

mod checkpoint;
mod decode;
pub mod graph;
mod optim;
pub mod tensor;
mod transformer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use decode::{beam_search, greedy, greedy_decode, model_beam_search, score_candidates, Hypothesis, ModelScorer, StepScorer};
pub use graph::{AttnSpan, Grads, Graph, Var};
pub use optim::{Adam, Gradients};
pub use tensor::{Element, Tensor};
pub use transformer::{
    forward, nll_teacher_forced, shift_right, AttentionTrace, Decoded, Encoded, ModelConfig, Preset, Seq2SeqModel,
};

/// Reserved ids shared with the vocabulary builder.
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("source sequence consists only of padding")]
    AllPadSource,
    #[error("target sequence consists only of padding")]
    AllPadTarget,
    #[error("non-finite value in gradient or weights of parameter {param}")]
    NonFinite { param: String },
    #[error("requested {k} hypotheses from a beam of width {beam}")]
    BeamTooNarrow { k: usize, beam: usize },
    #[error("no candidates to score")]
    EmptyCandidates,
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
