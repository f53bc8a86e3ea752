use serde::{Deserialize, Serialize};

use super::mlm::{mask_for_mlm, MlmConfig};
use super::prompt::{format_prompt, Direction, TaskExample};
use super::ObjectiveError;
use crate::model::{shift_right, Element, Graph, Seq2SeqModel, Var, BOS_ID, EOS_ID};
use crate::text::{tokenize, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the in-domain MLM term against the task term.
    pub lambda: f64,
    /// Weight of the understanding direction inside the task term.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.5, gamma: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ObjectiveError::InvalidConfig(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mlm: f64,
    pub l_nlu: f64,
    pub l_nlg: f64,
    pub l_task: f64,
    pub l_joint: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Mlm,
    Nlu,
    Nlg,
}

/// A training item in id space. `tgt` ends with EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prepared {
    pub component: Component,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

pub fn prepare_task(ex: &TaskExample, vocab: &Vocab) -> Result<Prepared, ObjectiveError> {
    let (input, target) = format_prompt(ex)?;
    let mut tgt = vocab.encode(&tokenize(&target));
    tgt.push(EOS_ID);
    let component = match ex.direction {
        Direction::Nlu => Component::Nlu,
        Direction::Nlg => Component::Nlg,
    };
    Ok(Prepared { component, src: vocab.encode(&tokenize(&input)), tgt })
}

pub fn prepare_mlm(ids: &[u32], cfg: &MlmConfig, seed: u64) -> Result<Prepared, ObjectiveError> {
    let pair = mask_for_mlm(ids, cfg, seed)?;
    Ok(Prepared { component: Component::Mlm, src: pair.input, tgt: pair.target })
}

/// Loss nodes of one batch. Components absent from the batch are `None`
/// and count as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub mlm: Option<Var>,
    pub nlu: Option<Var>,
    pub nlg: Option<Var>,
    pub joint: Var,
    pub weights: LossWeights,
}

impl LossVars {
    pub fn breakdown<T: Element>(&self, g: &Graph<'_, T>) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        let (l_mlm, l_nlu, l_nlg) = (val(self.mlm), val(self.nlu), val(self.nlg));
        let l_task = self.weights.gamma * l_nlu + l_nlg;
        let l_joint = self.weights.lambda * l_mlm + (1.0 - self.weights.lambda) * l_task;
        LossBreakdown { l_mlm, l_nlu, l_nlg, l_task, l_joint }
    }
}

/// Builds the joint loss of a batch on `g`. Each component is the mean over
/// its items of the per-item token-mean NLL.
pub fn joint_loss_graph<T: Element>(
    model: &Seq2SeqModel<T>,
    g: &mut Graph<'_, T>,
    batch: &[Prepared],
    weights: &LossWeights,
) -> crate::Result<LossVars> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch.into());
    }
    let srcs: Vec<&[u32]> = batch.iter().map(|p| p.src.as_slice()).collect();
    let enc = model.encode(g, &srcs)?;
    let inputs: Vec<Vec<u32>> = batch.iter().map(|p| shift_right(BOS_ID, &p.tgt)).collect();
    let dec_batch: Vec<(&[u32], usize)> = inputs.iter().enumerate().map(|(i, s)| (s.as_slice(), i)).collect();
    let dec = model.decode(g, &enc, &dec_batch)?;
    let rows = dec.spans.last().map_or(0, |s| s.end);

    let mut component_loss = |c: Component| -> Option<Var> {
        let count = batch.iter().filter(|p| p.component == c).count();
        if count == 0 {
            return None;
        }
        let mut targets = vec![None; rows];
        let mut w = vec![0.0; rows];
        for (p, span) in batch.iter().zip(&dec.spans) {
            if p.component != c {
                continue;
            }
            let per_token = 1.0 / (p.tgt.len() as f64 * count as f64);
            for (r, &t) in span.clone().zip(&p.tgt) {
                targets[r] = Some(t);
                w[r] = per_token;
            }
        }
        Some(g.cross_entropy(dec.logits, targets, w))
    };
    let mlm = component_loss(Component::Mlm);
    let nlu = component_loss(Component::Nlu);
    let nlg = component_loss(Component::Nlg);

    let (lambda, gamma) = (weights.lambda, weights.gamma);
    let mut terms = Vec::new();
    if let Some(v) = mlm {
        terms.push((v, lambda));
    }
    if let Some(v) = nlu {
        terms.push((v, (1.0 - lambda) * gamma));
    }
    if let Some(v) = nlg {
        terms.push((v, 1.0 - lambda));
    }
    let joint = g.weighted_sum(terms);
    Ok(LossVars { mlm, nlu, nlg, joint, weights: *weights })
}

/// Forward-only loss breakdown of a mixed batch.
pub fn joint_loss<T: Element>(
    model: &Seq2SeqModel<T>,
    batch: &[Prepared],
    weights: &LossWeights,
) -> crate::Result<LossBreakdown> {
    let mut g = model.graph();
    let vars = joint_loss_graph(model, &mut g, batch, weights)?;
    Ok(vars.breakdown(&g))
}

/// `(l_task, l_nlu, l_nlg)` over the task items of `batch`; MLM items are
/// ignored.
pub fn task_loss<T: Element>(
    model: &Seq2SeqModel<T>,
    batch: &[Prepared],
    weights: &LossWeights,
) -> crate::Result<(f64, f64, f64)> {
    let task: Vec<Prepared> = batch.iter().filter(|p| p.component != Component::Mlm).cloned().collect();
    let b = joint_loss(model, &task, weights)?;
    Ok((b.l_task, b.l_nlu, b.l_nlg))
}
