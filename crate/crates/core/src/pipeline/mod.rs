//! Training procedures (continual multi-task pretraining, self-finetuning,
//! contrastive embedding finetuning) and zero-shot inference.

mod embed;
mod infer;
mod train;

use serde::{Deserialize, Serialize};

pub use embed::{
    contrastive_loss, embed, embed_batch, embed_finetune, infonce_multi, retrieval_eval, similarity_eval,
    ContrastiveConfig, RetrievalSet,
};
pub use infer::{classify_nli, evaluate_nli, summarize, NliEvaluation, ANSWER_ORDER};
pub use train::{
    continual_pretrain, base_warmup, prepare_validation, self_finetune, EpochRecord, PretrainData, RunRecord,
    WarmupConfig,
};

use crate::objectives::{LossWeights, MixerConfig, MlmConfig, TaskDirections};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty data: {0}")]
    EmptyData(&'static str),
    #[error("self-finetuning is disabled by the ablation flags")]
    SelfFinetuneDisabled,
    #[error("input does not fit: {0}")]
    TooLong(String),
}

/// Switches for the ablation study. `enable_nlu` is an addition used to
/// train generation-only models for the attention probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub enable_mlm: bool,
    pub enable_nlgu: bool,
    pub enable_self_finetune: bool,
    pub enable_nlu: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations { enable_mlm: true, enable_nlgu: true, enable_self_finetune: true, enable_nlu: true }
    }
}

impl Ablations {
    /// Task directions implied by the flags.
    pub fn directions(&self) -> Result<TaskDirections, PipelineError> {
        match (self.enable_nlgu, self.enable_nlu) {
            (true, true) => Ok(TaskDirections::both()),
            (false, true) => Ok(TaskDirections::without_nlgu()),
            (true, false) => Ok(TaskDirections::generation_only()),
            (false, false) => Err(PipelineError::InvalidConfig(
                "enable_nlu = false requires enable_nlgu (generation-only training)".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub mixer: MixerConfig,
    pub mlm: MlmConfig,
    pub ablations: Ablations,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-4,
            seed: 0,
            weights: LossWeights::default(),
            mixer: MixerConfig::default(),
            mlm: MlmConfig::default(),
            ablations: Ablations::default(),
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig("batch_size must be positive".into()).into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PipelineError::InvalidConfig("learning_rate must be finite and >= 0".into()).into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(PipelineError::InvalidConfig("grad_clip must be positive".into()).into());
            }
        }
        self.weights.validate()?;
        self.mixer.validate()?;
        self.mlm.validate()?;
        self.ablations.directions()?;
        Ok(())
    }

    /// Loss weights actually applied: without MLM the joint loss is the
    /// task loss.
    pub fn effective_weights(&self) -> LossWeights {
        if self.ablations.enable_mlm {
            self.weights
        } else {
            LossWeights { lambda: 0.0, ..self.weights }
        }
    }
}
