use std::cmp::Ordering;

use super::graph::log_sum_exp;
use super::transformer::{shift_right, Encoded, Seq2SeqModel};
use super::{ModelError, BOS_ID, EOS_ID, PAD_ID};

/// Source of next-token distributions for autoregressive decoding.
pub trait StepScorer {
    fn eos(&self) -> u32;

    /// Log-probabilities of the next token after each prefix. Prefixes hold
    /// generated tokens only (no BOS).
    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>, ModelError>;
}

/// Decodes from a trained model given one source sequence. The encoder runs
/// once; each step re-runs the decoder over the full prefix.
pub struct ModelScorer<'m> {
    model: &'m Seq2SeqModel<f32>,
    memory: Vec<f32>,
    key_mask: Vec<bool>,
    banned: Vec<u32>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Seq2SeqModel<f32>, src_ids: &[u32]) -> Result<Self, ModelError> {
        let mut g = model.graph();
        let enc = model.encode(&mut g, &[src_ids])?;
        Ok(ModelScorer {
            model,
            memory: g.value(enc.memory).to_vec(),
            key_mask: enc.key_mask,
            banned: vec![PAD_ID, BOS_ID],
        })
    }

    /// Tokens that are never generated (PAD and BOS by default).
    pub fn with_banned(mut self, banned: Vec<u32>) -> Self {
        self.banned = banned;
        self
    }
}

impl StepScorer for ModelScorer<'_> {
    fn eos(&self) -> u32 {
        EOS_ID
    }

    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = self.model.graph();
        let d = self.model.config().d_model;
        let n = self.key_mask.len();
        let memory = g.input(n, d, self.memory.clone(), false);
        let enc = Encoded { memory, spans: vec![0..n], key_mask: self.key_mask.clone() };
        let inputs: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS_ID).chain(p.iter().copied()).collect())
            .collect();
        let batch: Vec<(&[u32], usize)> = inputs.iter().map(|s| (s.as_slice(), 0)).collect();
        let dec = self.model.decode(&mut g, &enc, &batch)?;
        let (_, vocab) = g.dims(dec.logits);
        let logits = g.value(dec.logits);
        Ok(dec
            .spans
            .iter()
            .map(|span| {
                let row = &logits[(span.end - 1) * vocab..][..vocab];
                let mut row: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                for &b in &self.banned {
                    row[b as usize] = f64::NEG_INFINITY;
                }
                let lse = log_sum_exp(row.iter().copied());
                row.iter_mut().for_each(|x| *x -= lse);
                row
            })
            .collect())
    }
}

fn argmax(xs: &[f64]) -> usize {
    // First maximum wins so ties resolve to the lowest id.
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding; the result includes the final EOS when one is produced.
pub fn greedy<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Vec<u32>, ModelError> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = scorer.next_log_probs(&[&out])?;
        let next = argmax(&lp[0]) as u32;
        out.push(next);
        if next == scorer.eos() {
            break;
        }
    }
    Ok(out)
}

pub fn greedy_decode(model: &Seq2SeqModel<f32>, src_ids: &[u32], max_len: usize) -> Result<Vec<u32>, ModelError> {
    let scorer = ModelScorer::new(model, src_ids)?;
    greedy(&scorer, max_len.min(model.config().max_len))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    /// Total log-probability.
    pub score: f64,
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search. Each step expands every live hypothesis by every token and
/// keeps the best `beam` expansions; those ending in EOS or reaching
/// `max_len` retire to the finished pool. Returns the top `k` finished
/// hypotheses by total log-probability.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    beam: usize,
    k: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>, ModelError> {
    if k == 0 || k > beam {
        return Err(ModelError::BeamTooNarrow { k, beam });
    }
    let eos = scorer.eos();
    let mut live = vec![Hypothesis { ids: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let prefixes: Vec<&[u32]> = live.iter().map(|h| h.ids.as_slice()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let mut cands = Vec::new();
        for (h, lp) in live.iter().zip(&lps) {
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut ids = h.ids.clone();
                ids.push(tok as u32);
                cands.push(Hypothesis { ids, score: h.score + l });
            }
        }
        cands.sort_by(rank);
        cands.truncate(beam);
        live = Vec::with_capacity(cands.len());
        for c in cands {
            if c.ids.last() == Some(&eos) || c.ids.len() >= max_len {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished.sort_by(rank);
    finished.truncate(k);
    Ok(finished)
}

pub fn model_beam_search(
    model: &Seq2SeqModel<f32>,
    src_ids: &[u32],
    beam: usize,
    k: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>, ModelError> {
    if k == 0 || k > beam {
        return Err(ModelError::BeamTooNarrow { k, beam });
    }
    let scorer = ModelScorer::new(model, src_ids)?;
    beam_search(&scorer, beam, k, max_len.min(model.config().max_len))
}

/// Teacher-forced total log-probability of each candidate given the source.
pub fn score_candidates(
    model: &Seq2SeqModel<f32>,
    src_ids: &[u32],
    candidates: &[Vec<u32>],
) -> Result<Vec<f64>, ModelError> {
    if candidates.is_empty() {
        return Err(ModelError::EmptyCandidates);
    }
    if candidates.iter().any(Vec::is_empty) {
        return Err(ModelError::EmptySequence);
    }
    let mut g = model.graph();
    let enc = model.encode(&mut g, &[src_ids])?;
    let inputs: Vec<Vec<u32>> = candidates.iter().map(|c| shift_right(BOS_ID, c)).collect();
    let batch: Vec<(&[u32], usize)> = inputs.iter().map(|s| (s.as_slice(), 0)).collect();
    let dec = model.decode(&mut g, &enc, &batch)?;
    let (_, vocab) = g.dims(dec.logits);
    let logits = g.value(dec.logits);
    Ok(dec
        .spans
        .iter()
        .zip(candidates)
        .map(|(span, cand)| {
            span.clone()
                .zip(cand)
                .map(|(r, &t)| {
                    let row = &logits[r * vocab..][..vocab];
                    row[t as usize] as f64 - log_sum_exp(row.iter().map(|&x| x as f64))
                })
                .sum()
        })
        .collect())
}
