//! From datasets to a scalar loss: MLM masking, prompt formatting, answer
//! mapping, batch mixing and loss composition.

mod loss;
mod mix;
mod mlm;
mod prompt;

pub use loss::{
    joint_loss, joint_loss_graph, prepare_mlm, prepare_task, task_loss, Component, LossBreakdown, LossVars,
    LossWeights, Prepared,
};
pub use mix::{mix_stream, MixItem, MixStream, MixerConfig, TaskDirections};
pub use mlm::{mask_count, mask_for_mlm, MlmConfig, MlmPair};
pub use prompt::{answer_to_label, format_prompt, label_to_answer, Direction, Task, TaskExample, TaskLabel};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("summarisation examples cannot carry the neutral label")]
    NeutralSummary,
    #[error("unknown answer {answer:?} for task {task}")]
    UnknownAnswer { task: &'static str, answer: String },
    #[error("sequence of length {n} too short to mask {masks} positions")]
    TooShort { n: usize, masks: usize },
    #[error("{masks} masks exceed the {available} available sentinels")]
    TooManyMasks { masks: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty source: {0}")]
    EmptySource(&'static str),
    #[error("empty batch")]
    EmptyBatch,
}
