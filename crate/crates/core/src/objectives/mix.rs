use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::prompt::{Direction, Task};
use super::ObjectiveError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    /// In-domain MLM items per general-domain task item.
    pub domain_task_ratio: f64,
    /// NLI task items per summarisation task item.
    pub nli_summ_ratio: f64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig { domain_task_ratio: 1.0, nli_summ_ratio: 1.0 }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.domain_task_ratio > 0.0 && self.nli_summ_ratio > 0.0)
            || !self.domain_task_ratio.is_finite()
            || !self.nli_summ_ratio.is_finite()
        {
            return Err(ObjectiveError::InvalidConfig("mixer ratios must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Which directions each task contributes to the stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDirections {
    pub nli: Vec<Direction>,
    pub summ: Vec<Direction>,
}

impl TaskDirections {
    pub fn both() -> Self {
        TaskDirections { nli: vec![Direction::Nlu, Direction::Nlg], summ: vec![Direction::Nlu, Direction::Nlg] }
    }

    /// NLI as classification only, summarisation as generation only.
    pub fn without_nlgu() -> Self {
        TaskDirections { nli: vec![Direction::Nlu], summ: vec![Direction::Nlg] }
    }

    /// Generation only for both tasks.
    pub fn generation_only() -> Self {
        TaskDirections { nli: vec![Direction::Nlg], summ: vec![Direction::Nlg] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixItem {
    Mlm(usize),
    Task { task: Task, direction: Direction, index: usize },
}

/// Endless shuffled pass over a source's units, reshuffled on each wrap.
#[derive(Debug, Clone)]
struct Cycle {
    units: Vec<(usize, Direction)>,
    order: Vec<usize>,
    pos: usize,
    round: u64,
    seed: u64,
    tag: u64,
}

impl Cycle {
    fn new(len: usize, dirs: &[Direction], seed: u64, tag: u64) -> Self {
        let units = (0..len).flat_map(|i| dirs.iter().map(move |&d| (i, d))).collect::<Vec<_>>();
        let mut c = Cycle { order: (0..units.len()).collect(), units, pos: 0, round: 0, seed, tag };
        c.shuffle();
        c
    }

    fn shuffle(&mut self) {
        let mut rng = seed::rng(self.seed, &[self.tag, self.round]);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
        self.round += 1;
        self.pos = 0;
    }

    fn next(&mut self) -> (usize, Direction) {
        if self.pos == self.order.len() {
            self.shuffle();
        }
        let u = self.units[self.order[self.pos]];
        self.pos += 1;
        u
    }
}

/// Endless batch iterator with stratified per-batch composition.
#[derive(Debug, Clone)]
pub struct MixStream {
    mlm: Option<Cycle>,
    nli: Cycle,
    summ: Cycle,
    mlm_share: f64,
    nli_share: f64,
    batch_size: usize,
    batch: u64,
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5 + 1e-9).floor() as u64
}

impl MixStream {
    fn mlm_through(&self, b: u64) -> u64 {
        round_half_up(b as f64 * self.batch_size as f64 * self.mlm_share)
    }

    fn nli_through(&self, b: u64) -> u64 {
        let task = b * self.batch_size as u64 - self.mlm_through(b);
        round_half_up(task as f64 * self.nli_share)
    }

    /// Batches needed for every unit of the slowest-covered source to appear
    /// at least once.
    pub fn batches_per_epoch(&self) -> usize {
        let b = self.batch_size as f64;
        let task_share = 1.0 - self.mlm_share;
        let mut need = [
            self.nli.units.len() as f64 / (b * task_share * self.nli_share),
            self.summ.units.len() as f64 / (b * task_share * (1.0 - self.nli_share)),
        ]
        .into_iter()
        .fold(0.0f64, f64::max);
        if let Some(m) = &self.mlm {
            need = need.max(m.units.len() as f64 / (b * self.mlm_share));
        }
        (need - 1e-9).ceil().max(1.0) as usize
    }
}

impl Iterator for MixStream {
    type Item = Vec<MixItem>;

    fn next(&mut self) -> Option<Vec<MixItem>> {
        let b = self.batch;
        self.batch += 1;
        let n_mlm = (self.mlm_through(b + 1) - self.mlm_through(b)) as usize;
        let n_nli = (self.nli_through(b + 1) - self.nli_through(b)) as usize;
        let n_summ = self.batch_size - n_mlm - n_nli;
        let mut items = Vec::with_capacity(self.batch_size);
        if let Some(m) = &mut self.mlm {
            items.extend((0..n_mlm).map(|_| MixItem::Mlm(m.next().0)));
        }
        for _ in 0..n_nli {
            let (index, direction) = self.nli.next();
            items.push(MixItem::Task { task: Task::Nli, direction, index });
        }
        for _ in 0..n_summ {
            let (index, direction) = self.summ.next();
            items.push(MixItem::Task { task: Task::Summ, direction, index });
        }
        Some(items)
    }
}

/// Mixed batches over an optional in-domain MLM source and the two task
/// sources. Sources shorter than their share are repeated.
pub fn mix_stream(
    mlm_len: Option<usize>,
    nli_len: usize,
    summ_len: usize,
    directions: &TaskDirections,
    cfg: &MixerConfig,
    batch_size: usize,
    seed: u64,
) -> Result<MixStream, ObjectiveError> {
    cfg.validate()?;
    if batch_size == 0 {
        return Err(ObjectiveError::InvalidConfig("batch_size must be positive".into()));
    }
    if mlm_len == Some(0) {
        return Err(ObjectiveError::EmptySource("mlm"));
    }
    if nli_len == 0 || directions.nli.is_empty() {
        return Err(ObjectiveError::EmptySource("nli"));
    }
    if summ_len == 0 || directions.summ.is_empty() {
        return Err(ObjectiveError::EmptySource("summ"));
    }
    let r = cfg.domain_task_ratio;
    let s = cfg.nli_summ_ratio;
    Ok(MixStream {
        mlm: mlm_len.map(|n| Cycle::new(n, &[Direction::Nlg], seed, seed::tag("mix-mlm"))),
        nli: Cycle::new(nli_len, &directions.nli, seed, seed::tag("mix-nli")),
        summ: Cycle::new(summ_len, &directions.summ, seed, seed::tag("mix-summ")),
        mlm_share: if mlm_len.is_some() { r / (1.0 + r) } else { 0.0 },
        nli_share: s / (1.0 + s),
        batch_size,
        batch: 0,
    })
}
