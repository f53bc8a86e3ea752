#![allow(dead_code)]

use xfer_core::experiment::{build_datasets, DataSizes, Datasets, ExperimentConfig};
use xfer_core::model::{Preset, Seq2SeqModel, EOS_ID};
use xfer_core::pipeline::{TrainConfig, WarmupConfig};

/// Small preset, a few dozen examples per split, no warm-up.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let cfg = ExperimentConfig {
        preset: Preset::Small,
        sizes: DataSizes {
            general_nli: 24,
            general_summ: 12,
            general_raw: 24,
            target_raw: 24,
            target_dev: 6,
            target_test: 12,
            target_summ_test: 4,
            validation: 6,
        },
        warmup: WarmupConfig { steps: 0, ..WarmupConfig::default() },
        train: TrainConfig { epochs: 2, batch_size: 8, learning_rate: 1e-3, ..TrainConfig::default() },
        self_finetune: TrainConfig { epochs: 3, batch_size: 6, learning_rate: 1e-3, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    };
    cfg.with_seed(seed)
}

pub fn tiny_data(seed: u64) -> (ExperimentConfig, Datasets) {
    let cfg = tiny_config(seed);
    let data = build_datasets(&cfg).unwrap();
    (cfg, data)
}

pub fn fresh_model(cfg: &ExperimentConfig, data: &Datasets) -> Seq2SeqModel<f32> {
    Seq2SeqModel::new(cfg.model_config(data.vocab.len())).unwrap()
}

/// A fresh model whose output bias makes EOS unreachable, so every
/// generation runs to the length limit and is never empty.
pub fn never_stops(cfg: &ExperimentConfig, data: &Datasets) -> Seq2SeqModel<f32> {
    let mut m = fresh_model(cfg, data);
    let i = m.param_index("dec.out.bias").unwrap();
    m.params_mut()[i].values_mut()[EOS_ID as usize] = -1e4;
    m
}

pub fn same_params(a: &Seq2SeqModel<f32>, b: &Seq2SeqModel<f32>, pick: impl Fn(&str) -> bool) -> bool {
    a.param_names()
        .iter()
        .zip(a.params().iter().zip(b.params()))
        .filter(|(n, _)| pick(n))
        .all(|(_, (x, y))| x.values().iter().map(|v| v.to_bits()).eq(y.values().iter().map(|v| v.to_bits())))
}

pub type Setup = (ExperimentConfig, Datasets, Seq2SeqModel<f32>);
