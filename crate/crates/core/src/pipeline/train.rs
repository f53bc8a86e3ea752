use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, TrainConfig};
use crate::model::{Adam, Gradients, Seq2SeqModel};
use crate::objectives::{
    joint_loss, joint_loss_graph, mix_stream, prepare_mlm, prepare_task, Component, Direction, LossBreakdown,
    LossWeights, MixItem, MlmConfig, Prepared, Task, TaskExample, TaskLabel,
};
use crate::seed;
use crate::text::{NliExample, SummExample, Tokens, Vocab};

pub struct PretrainData<'a> {
    pub vocab: &'a Vocab,
    /// In-domain unlabelled documents.
    pub mlm_corpus: &'a [Tokens],
    pub nli: &'a [NliExample],
    /// Gold and counterfactual summaries.
    pub summ: &'a [SummExample],
    /// Fixed items for checkpoint selection, see [`prepare_validation`].
    pub validation: &'a [Prepared],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept; 0 when no epoch ran.
    pub selected_epoch: usize,
    pub batches_per_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl RunRecord {
    /// Loss curves as `epoch,l_mlm,l_nlu,l_nlg,l_task,l_joint,split` rows.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let row = |e: usize, b: &LossBreakdown, split: &str| {
            vec![
                e.to_string(),
                format!("{}", b.l_mlm),
                format!("{}", b.l_nlu),
                format!("{}", b.l_nlg),
                format!("{}", b.l_task),
                format!("{}", b.l_joint),
                split.to_string(),
            ]
        };
        self.epochs
            .iter()
            .flat_map(|r| [row(r.epoch, &r.train, "train"), row(r.epoch, &r.validation, "validation")])
            .collect()
    }
}

fn nli_task(ex: &NliExample, direction: Direction) -> TaskExample {
    TaskExample {
        task: Task::Nli,
        direction,
        x1: ex.premise.clone(),
        x2: ex.hypothesis.clone(),
        label: TaskLabel::from_nli(ex.label),
    }
}

fn summ_task(ex: &SummExample, direction: Direction) -> TaskExample {
    TaskExample {
        task: Task::Summ,
        direction,
        x1: ex.document.clone(),
        x2: ex.summary.clone(),
        label: TaskLabel::from_veracity(ex.veracity),
    }
}

fn dir_slot(d: Direction) -> usize {
    match d {
        Direction::Nlu => 0,
        Direction::Nlg => 1,
    }
}

/// Validation items: every task example in each direction the config
/// trains, plus one fixed masking of each document when MLM is enabled.
pub fn prepare_validation(
    vocab: &Vocab,
    mlm_corpus: &[Tokens],
    nli: &[NliExample],
    summ: &[SummExample],
    cfg: &TrainConfig,
) -> crate::Result<Vec<Prepared>> {
    let dirs = cfg.ablations.directions()?;
    let mut out = Vec::new();
    if cfg.ablations.enable_mlm {
        for (i, d) in mlm_corpus.iter().enumerate() {
            let s = seed::derive(cfg.seed, &[seed::tag("val-mask"), i as u64]);
            out.push(prepare_mlm(&vocab.encode(d), &cfg.mlm, s)?);
        }
    }
    for ex in nli {
        for &d in &dirs.nli {
            out.push(prepare_task(&nli_task(ex, d), vocab)?);
        }
    }
    for ex in summ {
        for &d in &dirs.summ {
            out.push(prepare_task(&summ_task(ex, d), vocab)?);
        }
    }
    Ok(out)
}

/// Loss breakdown over many items, evaluated in chunks. Component means are
/// recombined by item count, so the result equals a single-batch evaluation.
pub(super) fn eval_breakdown(
    model: &Seq2SeqModel<f32>,
    items: &[Prepared],
    weights: &LossWeights,
    chunk: usize,
) -> crate::Result<LossBreakdown> {
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for part in items.chunks(chunk.max(1)) {
        let b = joint_loss(model, part, weights)?;
        for (k, (c, v)) in [(Component::Mlm, b.l_mlm), (Component::Nlu, b.l_nlu), (Component::Nlg, b.l_nlg)]
            .into_iter()
            .enumerate()
        {
            let n = part.iter().filter(|p| p.component == c).count();
            sums[k] += v * n as f64;
            counts[k] += n;
        }
    }
    let mean = |k: usize| if counts[k] == 0 { 0.0 } else { sums[k] / counts[k] as f64 };
    let (l_mlm, l_nlu, l_nlg) = (mean(0), mean(1), mean(2));
    let l_task = weights.gamma * l_nlu + l_nlg;
    let l_joint = weights.lambda * l_mlm + (1.0 - weights.lambda) * l_task;
    Ok(LossBreakdown { l_mlm, l_nlu, l_nlg, l_task, l_joint })
}

/// One optimizer step on `batch`; returns the pre-step loss breakdown.
pub(super) fn train_step(
    model: &mut Seq2SeqModel<f32>,
    opt: &mut Adam,
    batch: &[Prepared],
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> crate::Result<LossBreakdown> {
    let (breakdown, grads) = {
        let mut g = model.graph();
        let vars = joint_loss_graph(model, &mut g, batch, weights)?;
        (vars.breakdown(&g), g.backward(vars.joint))
    };
    let mut acc = Gradients::new(model.params().len());
    acc.accumulate(grads);
    acc.check_finite(model.param_names())?;
    if let Some(c) = cfg.grad_clip {
        acc.clip(c);
    }
    opt.step(model.params_mut(), &acc, cfg.learning_rate);
    Ok(breakdown)
}

fn add(acc: &mut LossBreakdown, b: &LossBreakdown, scale: f64) {
    acc.l_mlm += b.l_mlm * scale;
    acc.l_nlu += b.l_nlu * scale;
    acc.l_nlg += b.l_nlg * scale;
    acc.l_task += b.l_task * scale;
    acc.l_joint += b.l_joint * scale;
}

const EVAL_CHUNK: usize = 32;

/// Continual multi-task pretraining on mixed batches of in-domain MLM and
/// general-domain task items. Keeps the weights of the epoch with the lowest
/// validation joint loss.
pub fn continual_pretrain(
    mut model: Seq2SeqModel<f32>,
    cfg: &TrainConfig,
    data: &PretrainData<'_>,
) -> crate::Result<(Seq2SeqModel<f32>, RunRecord)> {
    cfg.validate()?;
    let dirs = cfg.ablations.directions()?;
    if data.nli.is_empty() {
        return Err(PipelineError::EmptyData("nli").into());
    }
    if data.summ.is_empty() {
        return Err(PipelineError::EmptyData("summ").into());
    }
    if cfg.ablations.enable_mlm && data.mlm_corpus.is_empty() {
        return Err(PipelineError::EmptyData("mlm corpus").into());
    }
    if data.validation.is_empty() {
        return Err(PipelineError::EmptyData("validation").into());
    }
    let vocab = data.vocab;
    let mlm_ids: Vec<Vec<u32>> = if cfg.ablations.enable_mlm {
        data.mlm_corpus.iter().map(|d| vocab.encode(d)).collect()
    } else {
        Vec::new()
    };
    let cache = |task: Task, n: usize| -> crate::Result<Vec<[Option<Prepared>; 2]>> {
        let wanted = if task == Task::Nli { &dirs.nli } else { &dirs.summ };
        (0..n)
            .map(|i| {
                let mut slots = [None, None];
                for &d in wanted {
                    let ex = match task {
                        Task::Nli => nli_task(&data.nli[i], d),
                        Task::Summ => summ_task(&data.summ[i], d),
                    };
                    slots[dir_slot(d)] = Some(prepare_task(&ex, vocab)?);
                }
                Ok(slots)
            })
            .collect()
    };
    let nli_items = cache(Task::Nli, data.nli.len())?;
    let summ_items = cache(Task::Summ, data.summ.len())?;

    let mlm_len = cfg.ablations.enable_mlm.then_some(mlm_ids.len());
    let mut stream =
        mix_stream(mlm_len, data.nli.len(), data.summ.len(), &dirs, &cfg.mixer, cfg.batch_size, cfg.seed)?;
    let per_epoch = stream.batches_per_epoch();
    let weights = cfg.effective_weights();
    let mut opt = Adam::new(model.params());
    let mut record = RunRecord { batches_per_epoch: per_epoch, ..Default::default() };
    let mut best: Option<(f64, Seq2SeqModel<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut train = LossBreakdown::default();
        for b in 0..per_epoch {
            let items = stream.next().expect("endless stream");
            let batch = items
                .iter()
                .enumerate()
                .map(|(slot, it)| match *it {
                    MixItem::Mlm(i) => {
                        let s = seed::derive(cfg.seed, &[seed::tag("mask"), epoch as u64, b as u64, slot as u64]);
                        Ok(prepare_mlm(&mlm_ids[i], &cfg.mlm, s)?)
                    }
                    MixItem::Task { task, direction, index } => {
                        let src = if task == Task::Nli { &nli_items } else { &summ_items };
                        Ok(src[index][dir_slot(direction)].clone().expect("direction prepared"))
                    }
                })
                .collect::<crate::Result<Vec<_>>>()?;
            let bd = train_step(&mut model, &mut opt, &batch, &weights, cfg)?;
            add(&mut train, &bd, 1.0 / per_epoch as f64);
        }
        let validation = eval_breakdown(&model, data.validation, &weights, EVAL_CHUNK)?;
        if best.as_ref().is_none_or(|(v, _)| validation.l_joint < *v) {
            best = Some((validation.l_joint, model.clone()));
            record.selected_epoch = epoch;
        }
        record.epochs.push(EpochRecord { epoch, train, validation });
    }
    let model = best.map_or(model, |(_, m)| m);
    Ok((model, record))
}

/// Settings of [`base_warmup`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of each batch drawn from the general corpus as MLM items; the
    /// rest are copy items.
    pub mlm_share: f64,
    pub mlm: MlmConfig,
    /// Length range of the random copy strings.
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            steps: 600,
            batch_size: 16,
            learning_rate: 1e-3,
            mlm_share: 0.5,
            mlm: MlmConfig::default(),
            min_len: 3,
            max_len: 12,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(PipelineError::InvalidConfig("warmup needs batch_size > 0 and 0 < min_len <= max_len".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PipelineError::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mlm_share) {
            return Err(PipelineError::InvalidConfig("mlm_share must lie in [0, 1]".into()));
        }
        self.mlm.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// Stand-in for starting from a generic pretrained checkpoint. Mixes MLM on
/// a general-domain corpus with reproducing random strings over
/// `copy_tokens`; the strings carry no lexical relations. Returns the model
/// and the loss breakdown of every step.
pub fn base_warmup(
    mut model: Seq2SeqModel<f32>,
    copy_tokens: &[u32],
    corpus: &[Vec<u32>],
    cfg: &WarmupConfig,
) -> crate::Result<(Seq2SeqModel<f32>, Vec<LossBreakdown>)> {
    cfg.validate()?;
    let n_mlm = (cfg.batch_size as f64 * cfg.mlm_share).round() as usize;
    if n_mlm < cfg.batch_size && copy_tokens.is_empty() {
        return Err(PipelineError::EmptyData("warmup tokens").into());
    }
    if n_mlm > 0 && corpus.is_empty() {
        return Err(PipelineError::EmptyData("warmup corpus").into());
    }
    if cfg.max_len >= model.config().max_len {
        return Err(PipelineError::TooLong(format!("warmup max_len {} exceeds the model", cfg.max_len)).into());
    }
    let train = TrainConfig {
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        grad_clip: cfg.grad_clip,
        ..TrainConfig::default()
    };
    let weights = LossWeights { lambda: cfg.mlm_share, gamma: 1.0 };
    let mut opt = Adam::new(model.params());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = seed::rng(cfg.seed, &[seed::tag("warmup"), step as u64]);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..n_mlm {
            let doc = corpus.choose(&mut rng).expect("nonempty");
            batch.push(prepare_mlm(doc, &cfg.mlm, rng.random())?);
        }
        for _ in n_mlm..cfg.batch_size {
            let n = rng.random_range(cfg.min_len..=cfg.max_len);
            let src: Vec<u32> = (0..n).map(|_| *copy_tokens.choose(&mut rng).expect("nonempty")).collect();
            let mut tgt = src.clone();
            tgt.push(crate::model::EOS_ID);
            batch.push(Prepared { component: Component::Nlg, src, tgt });
        }
        losses.push(train_step(&mut model, &mut opt, &batch, &weights, &train)?);
    }
    Ok((model, losses))
}

/// Finetunes on NLI-NLU prompts built from generated examples. Returns the
/// model and the mean training loss of each epoch.
pub fn self_finetune(
    mut model: Seq2SeqModel<f32>,
    vocab: &Vocab,
    pseudo: &[NliExample],
    cfg: &TrainConfig,
) -> crate::Result<(Seq2SeqModel<f32>, Vec<f64>)> {
    cfg.validate()?;
    if !cfg.ablations.enable_self_finetune {
        return Err(PipelineError::SelfFinetuneDisabled.into());
    }
    if pseudo.is_empty() {
        return Err(PipelineError::EmptyData("pseudo examples").into());
    }
    let items: Vec<Prepared> =
        pseudo.iter().map(|ex| prepare_task(&nli_task(ex, Direction::Nlu), vocab)).collect::<Result<_, _>>()?;
    let weights = LossWeights { lambda: 0.0, gamma: 1.0 };
    let mut opt = Adam::new(model.params());
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::tag("self-finetune"), epoch as u64]));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut total = 0.0;
        for idx in &batches {
            let batch: Vec<Prepared> = idx.iter().map(|&i| items[i].clone()).collect();
            total += train_step(&mut model, &mut opt, &batch, &weights, cfg)?.l_nlu;
        }
        losses.push(total / batches.len() as f64);
    }
    Ok((model, losses))
}
