use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use xfer_core::experiment::ExperimentConfig;
use xfer_core::model::Preset;
use xfer_core::Error;

use crate::Overrides;

/// Effective config after flag overrides, with its hash.
#[derive(Debug, Clone, Serialize)]
pub struct Loaded {
    pub config_hash: String,
    pub config: ExperimentConfig,
}

/// Field named in a serde message such as "missing field `seed`".
fn named_field(message: &str) -> String {
    message.split('`').nth(1).unwrap_or("<root>").to_string()
}

fn config_error(field: &str, message: impl ToString) -> anyhow::Error {
    Error::Config { field: field.into(), message: message.to_string() }.into()
}

pub fn parse(text: &str) -> anyhow::Result<ExperimentConfig> {
    serde_json::from_str(text).map_err(|e| {
        let message = e.to_string();
        config_error(&named_field(&message), message)
    })
}

pub fn apply(mut cfg: ExperimentConfig, seed: Option<u64>, o: &Overrides) -> anyhow::Result<ExperimentConfig> {
    cfg = cfg.with_seed(seed.unwrap_or(cfg.seed));
    if let Some(p) = &o.preset {
        cfg.preset = p.parse::<Preset>().map_err(|e| config_error("preset", e))?;
    }
    let ab = &mut cfg.train.ablations;
    ab.enable_mlm &= !o.no_mlm;
    ab.enable_nlgu &= !o.no_nlgu;
    ab.enable_nlu &= !o.no_nlu;
    ab.enable_self_finetune &= !o.no_self_finetune;
    cfg.self_finetune.ablations.enable_self_finetune &= !o.no_self_finetune;
    if let Some(l) = o.lambda {
        cfg.train.weights.lambda = l;
    }
    if let Some(g) = o.gamma {
        cfg.train.weights.gamma = g;
    }
    if let Some(r) = o.mix_ratio {
        cfg.train.mixer.domain_task_ratio = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn hash(cfg: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn load(path: Option<&Path>, seed: Option<u64>, o: &Overrides) -> anyhow::Result<Loaded> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| xfer_core::experiment::file_error(p, e))?;
            parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    let config = apply(base, seed, o)?;
    Ok(Loaded { config_hash: hash(&config), config })
}
