//! End-to-end experiment wiring shared by the command-line tool and the
//! test suites: world and dataset construction, vocabulary, and the
//! pretrain → self-finetune → evaluate sequence with its ablations.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{build_summ_nlu_set, corpus_entities, pseudo_nli, GenConfig, GenerationReport};
use crate::metrics::zero_rule;
use crate::model::{ModelConfig, Preset, Seq2SeqModel};
use crate::objectives::{format_prompt, Direction, Task, TaskExample, TaskLabel};
use crate::pipeline::{
    continual_pretrain, base_warmup, evaluate_nli, prepare_validation, self_finetune, ContrastiveConfig,
    NliEvaluation, PretrainData, RunRecord, TrainConfig, WarmupConfig,
};
use crate::text::{
    gen_nli_data, gen_raw_corpus, gen_summ_data, gen_world, read_jsonl, tokenize, write_jsonl, DatasetRecord,
    Domain, Gazetteer, NliExample, NliLabel, SummExample, SyntheticWorldSpec, Tokens, Vocab, WorldParams,
    NUM_SENTINELS,
};
use crate::Error;

/// Example counts for every generated split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSizes {
    pub general_nli: usize,
    pub general_summ: usize,
    /// Unlabelled general documents for the base warm-up.
    pub general_raw: usize,
    pub target_raw: usize,
    pub target_dev: usize,
    pub target_test: usize,
    pub target_summ_test: usize,
    pub validation: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            general_nli: 600,
            general_summ: 300,
            general_raw: 600,
            target_raw: 600,
            target_dev: 60,
            target_test: 300,
            target_summ_test: 60,
            validation: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub world: WorldParams,
    #[serde(default)]
    pub sizes: DataSizes,
    pub preset: Preset,
    pub max_len: usize,
    /// Generic copy training applied to every fresh model before any
    /// stage, standing in for an off-the-shelf pretrained checkpoint.
    #[serde(default)]
    pub warmup: WarmupConfig,
    pub train: TrainConfig,
    pub self_finetune: TrainConfig,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            world: WorldParams::default(),
            sizes: DataSizes::default(),
            preset: Preset::Base,
            max_len: 40,
            warmup: WarmupConfig::default(),
            train: TrainConfig::default(),
            self_finetune: TrainConfig { epochs: 3, ..TrainConfig::default() },
            gen: GenConfig::default(),
            contrastive: ContrastiveConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Copy with every stage seeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.warmup.seed = seed;
        c.train.seed = seed;
        c.self_finetune.seed = seed;
        c.contrastive.seed = seed;
        c
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig::from_preset(self.preset, vocab_size, self.max_len, self.seed)
    }

    /// Checks every section; errors name the offending section.
    pub fn validate(&self) -> crate::Result<()> {
        fn field<E: std::fmt::Display>(name: &str, r: Result<(), E>) -> crate::Result<()> {
            r.map_err(|e| Error::Config { field: name.into(), message: e.to_string() })
        }
        field("world", gen_world(self.seed, &self.world).map(|_| ()))?;
        let s = &self.sizes;
        if s.general_nli < 3 || s.target_dev < 3 || s.target_test < 3 {
            return Err(Error::Config { field: "sizes".into(), message: "nli splits need at least 3 examples".into() });
        }
        if [s.general_summ, s.general_raw, s.target_raw, s.target_summ_test, s.validation].contains(&0) {
            return Err(Error::Config { field: "sizes".into(), message: "every split needs at least 1 item".into() });
        }
        if self.max_len < 8 {
            return Err(Error::Config { field: "max_len".into(), message: "must be at least 8".into() });
        }
        field("warmup", self.warmup.validate())?;
        field("train", self.train.validate())?;
        field("self_finetune", self.self_finetune.validate())?;
        field("gen", self.gen.validate())?;
        field("contrastive", self.contrastive.validate())?;
        Ok(())
    }
}

/// Every split of one experiment, generated from the config seed.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub world: SyntheticWorldSpec,
    pub vocab: Vocab,
    pub general_nli: Vec<NliExample>,
    /// Gold summaries followed by counterfactual twins.
    pub general_summ: Vec<SummExample>,
    pub general_raw: Vec<Tokens>,
    pub target_raw: Vec<Tokens>,
    pub target_dev: Vec<NliExample>,
    pub target_test: Vec<NliExample>,
    pub target_summ_test: Vec<SummExample>,
    pub val_nli: Vec<NliExample>,
    pub val_summ: Vec<SummExample>,
    pub val_raw: Vec<Tokens>,
}

const SPLITS: [&str; 10] = [
    "general_nli",
    "general_summ",
    "general_raw",
    "target_raw",
    "target_dev",
    "target_test",
    "target_summ_test",
    "val_nli",
    "val_summ",
    "val_raw",
];

fn write_records(path: &Path, records: &[DatasetRecord]) -> crate::Result<()> {
    let file = File::create(path).map_err(|e| file_error(path, e))?;
    write_jsonl(BufWriter::new(file), records).map_err(|e| file_error(path, e))
}

fn read_records(path: &Path) -> crate::Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(|e| file_error(path, e))?;
    Ok(read_jsonl(BufReader::new(file))?)
}

pub fn file_error(path: &Path, source: std::io::Error) -> Error {
    Error::File { path: path.display().to_string(), source }
}

fn bad_record(path: &Path, message: String) -> Error {
    Error::File { path: path.display().to_string(), source: std::io::Error::new(std::io::ErrorKind::InvalidData, message) }
}

impl Datasets {
    /// Writes `world.json` and one JSONL file per split under `dir/data`.
    /// Returns the written paths.
    pub fn write_dir(&self, dir: &Path) -> crate::Result<Vec<PathBuf>> {
        let data = dir.join("data");
        fs::create_dir_all(&data).map_err(|e| file_error(&data, e))?;
        let world = dir.join("world.json");
        fs::write(&world, serde_json::to_vec_pretty(&self.world)?).map_err(|e| file_error(&world, e))?;
        let mut written = vec![world];
        let nli = |v: &[NliExample], d| v.iter().map(|e| e.to_record(d)).collect::<Vec<_>>();
        let summ = |v: &[SummExample], d| v.iter().map(|e| e.to_record(d)).collect::<Vec<_>>();
        let raw = |v: &[Tokens], d| v.iter().map(|t| DatasetRecord::raw(d, t)).collect::<Vec<_>>();
        let (g, t) = (Domain::General, Domain::Target);
        let records = [
            nli(&self.general_nli, g),
            summ(&self.general_summ, g),
            raw(&self.general_raw, g),
            raw(&self.target_raw, t),
            nli(&self.target_dev, t),
            nli(&self.target_test, t),
            summ(&self.target_summ_test, t),
            nli(&self.val_nli, g),
            summ(&self.val_summ, g),
            raw(&self.val_raw, t),
        ];
        for (name, recs) in SPLITS.iter().zip(&records) {
            let path = data.join(format!("{name}.jsonl"));
            write_records(&path, recs)?;
            written.push(path);
        }
        Ok(written)
    }

    /// Reads back what [`Datasets::write_dir`] wrote.
    pub fn read_dir(dir: &Path) -> crate::Result<Datasets> {
        let world_path = dir.join("world.json");
        let text = fs::read_to_string(&world_path).map_err(|e| file_error(&world_path, e))?;
        let world: SyntheticWorldSpec = serde_json::from_str(&text)?;
        let vocab = build_vocab(&world)?;
        let path = |name: &str| dir.join("data").join(format!("{name}.jsonl"));
        let nli = |name: &str| -> crate::Result<Vec<NliExample>> {
            let p = path(name);
            read_records(&p)?.iter().map(|r| NliExample::from_record(r).map_err(|m| bad_record(&p, m))).collect()
        };
        let summ = |name: &str| -> crate::Result<Vec<SummExample>> {
            let p = path(name);
            read_records(&p)?.iter().map(|r| SummExample::from_record(r).map_err(|m| bad_record(&p, m))).collect()
        };
        let raw = |name: &str| -> crate::Result<Vec<Tokens>> {
            Ok(read_records(&path(name))?.iter().map(|r| r.x1_tokens()).collect())
        };
        Ok(Datasets {
            general_nli: nli("general_nli")?,
            general_summ: summ("general_summ")?,
            general_raw: raw("general_raw")?,
            target_raw: raw("target_raw")?,
            target_dev: nli("target_dev")?,
            target_test: nli("target_test")?,
            target_summ_test: summ("target_summ_test")?,
            val_nli: nli("val_nli")?,
            val_summ: summ("val_summ")?,
            val_raw: raw("val_raw")?,
            world,
            vocab,
        })
    }
}

/// Fixed words of every prompt template and answer set.
pub fn prompt_words() -> Vec<String> {
    let mut words = Vec::new();
    for task in [Task::Nli, Task::Summ] {
        for direction in [Direction::Nlu, Direction::Nlg] {
            for label in TaskLabel::ALL {
                let ex = TaskExample { task, direction, x1: Vec::new(), x2: Vec::new(), label };
                if let Ok((input, target)) = format_prompt(&ex) {
                    words.extend(tokenize(&input));
                    words.extend(tokenize(&target));
                }
            }
        }
    }
    words
}

/// Vocabulary over all world tokens and prompt words.
pub fn build_vocab(world: &SyntheticWorldSpec) -> crate::Result<Vocab> {
    let world_tokens: Vec<String> = world.all_tokens().into_iter().collect();
    Ok(Vocab::build(&[world_tokens, prompt_words()])?)
}

pub fn build_datasets(cfg: &ExperimentConfig) -> crate::Result<Datasets> {
    cfg.validate()?;
    let s = &cfg.sizes;
    let seed = cfg.seed;
    let world = gen_world(seed, &cfg.world)?;
    let vocab = build_vocab(&world)?;
    let general_nli = gen_nli_data(&world, Domain::General, s.general_nli, seed)?;
    let gold = gen_summ_data(&world, Domain::General, s.general_summ, seed)?;
    let gazetteer = Gazetteer::new(&world.gazetteer);
    let entities = corpus_entities(gold.iter().map(|g| &g.document), &gazetteer);
    let general_summ = build_summ_nlu_set(&gold, &gazetteer, &entities, seed);
    let general_raw = gen_raw_corpus(&world, Domain::General, s.general_raw, seed)?;
    let target_raw = gen_raw_corpus(&world, Domain::Target, s.target_raw, seed)?;
    // Distinct derived seeds keep the splits from sharing items.
    let split = |k: u64| crate::seed::derive(seed, &[crate::seed::tag("split"), k]);
    let target_dev = gen_nli_data(&world, Domain::Target, s.target_dev, split(1))?;
    let target_test = gen_nli_data(&world, Domain::Target, s.target_test, split(2))?;
    let target_summ_test = gen_summ_data(&world, Domain::Target, s.target_summ_test, split(3))?;
    let val_nli = gen_nli_data(&world, Domain::General, s.validation.max(3), split(4))?;
    let val_gold = gen_summ_data(&world, Domain::General, s.validation.max(1), split(5))?;
    let val_summ = build_summ_nlu_set(&val_gold, &gazetteer, &entities, split(6));
    let val_raw = gen_raw_corpus(&world, Domain::Target, s.validation.max(1), split(7))?;
    Ok(Datasets {
        world,
        vocab,
        general_nli,
        general_summ,
        general_raw,
        target_raw,
        target_dev,
        target_test,
        target_summ_test,
        val_nli,
        val_summ,
        val_raw,
    })
}

/// Fresh model after the base warm-up: MLM on the general raw corpus and
/// copying over every non-special token.
pub fn base_model(cfg: &ExperimentConfig, data: &Datasets) -> crate::Result<Seq2SeqModel<f32>> {
    let model = Seq2SeqModel::new(cfg.model_config(data.vocab.len()))?;
    if cfg.warmup.steps == 0 {
        return Ok(model);
    }
    let first = data.vocab.sentinel(NUM_SENTINELS - 1) + 1;
    let tokens: Vec<u32> = (first..data.vocab.len() as u32).collect();
    let corpus: Vec<Vec<u32>> = data.general_raw.iter().map(|d| data.vocab.encode(d)).collect();
    Ok(base_warmup(model, &tokens, &corpus, &cfg.warmup)?.0)
}

/// Continual pretraining under `train`, starting from `base`.
pub fn pretrain(
    base: &Seq2SeqModel<f32>,
    data: &Datasets,
    train: &TrainConfig,
) -> crate::Result<(Seq2SeqModel<f32>, RunRecord)> {
    let model = base.clone();
    let validation = prepare_validation(&data.vocab, &data.val_raw, &data.val_nli, &data.val_summ, train)?;
    let pd = PretrainData {
        vocab: &data.vocab,
        mlm_corpus: &data.target_raw,
        nli: &data.general_nli,
        summ: &data.general_summ,
        validation: &validation,
    };
    continual_pretrain(model, train, &pd)
}

/// Pseudo-NLI on the target development premises followed by
/// self-finetuning.
pub fn self_train(
    cfg: &ExperimentConfig,
    data: &Datasets,
    model: Seq2SeqModel<f32>,
) -> crate::Result<(Seq2SeqModel<f32>, Vec<f64>, GenerationReport)> {
    let premises: Vec<Tokens> = data.target_dev.iter().map(|e| e.premise.clone()).collect();
    let (pseudo, report) = pseudo_nli(&model, &data.vocab, &premises, &cfg.gen)?;
    let examples: Vec<NliExample> = pseudo.into_iter().map(|g| g.item).collect();
    let (model, losses) = self_finetune(model, &data.vocab, &examples, &cfg.self_finetune)?;
    Ok((model, losses, report))
}

pub fn evaluate_target_nli(data: &Datasets, model: &Seq2SeqModel<f32>) -> crate::Result<NliEvaluation> {
    evaluate_nli(model, &data.vocab, &data.target_test)
}

/// Majority-class accuracy on the target test set, trained on the general
/// NLI labels.
pub fn zero_rule_accuracy(data: &Datasets) -> crate::Result<f64> {
    let train: Vec<NliLabel> = data.general_nli.iter().map(|e| e.label).collect();
    let test: Vec<NliLabel> = data.target_test.iter().map(|e| e.label).collect();
    let (_, report) = zero_rule(&train, &test)?;
    Ok(report.get("accuracy").unwrap_or(0.0))
}
