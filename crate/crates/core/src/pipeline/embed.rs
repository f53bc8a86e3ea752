use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::datagen::ContrastiveSet;
use crate::metrics::{acc_at_k, pearson, spearman};
use crate::model::{graph::log_sum_exp, Adam, Element, Gradients, Graph, Seq2SeqModel, Var, PAD_ID};
use crate::seed;
use crate::text::{NliExample, NliLabel, Tokens, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { tau: 0.07, epochs: 5, learning_rate: 3e-4, seed: 0, batch_size: 8, grad_clip: Some(1.0) }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(PipelineError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PipelineError::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Unit-norm mean of final encoder states over non-PAD positions, one row
/// per sentence.
fn embed_graph<T: Element>(model: &Seq2SeqModel<T>, g: &mut Graph<'_, T>, ids: &[Vec<u32>]) -> crate::Result<Var> {
    let srcs: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
    let enc = model.encode(g, &srcs)?;
    let groups = enc
        .spans
        .iter()
        .zip(ids)
        .map(|(span, s)| span.clone().zip(s).filter(|(_, &t)| t != PAD_ID).map(|(r, _)| r).collect())
        .collect();
    let pooled = g.mean_rows(enc.memory, groups);
    Ok(g.normalize_rows(pooled))
}

pub fn embed_batch(model: &Seq2SeqModel<f32>, vocab: &Vocab, sentences: &[Tokens]) -> crate::Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(32) {
        if chunk.iter().any(Vec::is_empty) {
            return Err(PipelineError::EmptyData("sentence").into());
        }
        let ids: Vec<Vec<u32>> = chunk.iter().map(|s| vocab.encode(s)).collect();
        let mut g = model.graph();
        let e = embed_graph(model, &mut g, &ids)?;
        let d = g.dims(e).1;
        out.extend(g.value(e).chunks(d).map(<[f32]>::to_vec));
    }
    Ok(out)
}

pub fn embed(model: &Seq2SeqModel<f32>, vocab: &Vocab, sentence: &[String]) -> crate::Result<Vec<f32>> {
    Ok(embed_batch(model, vocab, &[sentence.to_vec()])?.remove(0))
}

fn unit(v: &[f64]) -> crate::Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(PipelineError::InvalidConfig("zero-norm vector".into()).into());
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `−log(Σ_P e^{cos(a,p)/τ} / (Σ_P e^{cos(a,p)/τ} + Σ_N e^{cos(a,n)/τ}))`.
pub fn infonce_multi(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], tau: f64) -> crate::Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(PipelineError::EmptyData("positives and negatives").into());
    }
    if !(tau > 0.0) {
        return Err(PipelineError::InvalidConfig("tau must be positive".into()).into());
    }
    let a = unit(anchor)?;
    let logit = |v: &Vec<f64>| -> crate::Result<f64> {
        let u = unit(v)?;
        Ok(a.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>() / tau)
    };
    let pos: Vec<f64> = positives.iter().map(logit).collect::<Result<_, _>>()?;
    let neg: Vec<f64> = negatives.iter().map(logit).collect::<Result<_, _>>()?;
    let all = log_sum_exp(pos.iter().chain(&neg).copied());
    Ok(all - log_sum_exp(pos.iter().copied()))
}

fn set_sentences(s: &ContrastiveSet) -> Vec<&Tokens> {
    std::iter::once(&s.anchor).chain(&s.positives).chain(&s.negatives).collect()
}

/// Mean multi-positive InfoNCE over the sets under the current encoder.
pub fn contrastive_loss(model: &Seq2SeqModel<f32>, vocab: &Vocab, sets: &[ContrastiveSet], tau: f64) -> crate::Result<f64> {
    if sets.is_empty() {
        return Err(PipelineError::EmptyData("contrastive sets").into());
    }
    let mut total = 0.0;
    for s in sets {
        let sents: Vec<Tokens> = set_sentences(s).into_iter().cloned().collect();
        let e: Vec<Vec<f64>> =
            embed_batch(model, vocab, &sents)?.into_iter().map(|v| v.into_iter().map(f64::from).collect()).collect();
        let p = s.positives.len();
        total += infonce_multi(&e[0], &e[1..1 + p], &e[1 + p..], tau)?;
    }
    Ok(total / sets.len() as f64)
}

/// Contrastive finetuning of the encoder. Token embeddings and the decoder
/// stay frozen. Returns the model and the mean training loss per epoch.
pub fn embed_finetune(
    mut model: Seq2SeqModel<f32>,
    vocab: &Vocab,
    sets: &[ContrastiveSet],
    cfg: &ContrastiveConfig,
) -> crate::Result<(Seq2SeqModel<f32>, Vec<f64>)> {
    cfg.validate()?;
    if sets.is_empty() {
        return Err(PipelineError::EmptyData("contrastive sets").into());
    }
    if sets.iter().any(|s| s.positives.is_empty() || s.negatives.is_empty()) {
        return Err(PipelineError::EmptyData("positives and negatives").into());
    }
    let trainable: Vec<bool> = model.param_names().iter().map(|n| n.starts_with("enc.")).collect();
    let encoded: Vec<Vec<Vec<u32>>> =
        sets.iter().map(|s| set_sentences(s).iter().map(|t| vocab.encode(t)).collect()).collect();
    let mut opt = Adam::new(model.params());
    let mut order: Vec<usize> = (0..sets.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::tag("embed-finetune"), epoch as u64]));
        let mut total = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for idx in &batches {
            let (loss, grads) = {
                let mut g = Graph::with_trainable(model.params(), &trainable);
                let mut ids = Vec::new();
                let mut layout = Vec::new();
                for &i in *idx {
                    layout.push((ids.len(), encoded[i].len(), sets[i].positives.len()));
                    ids.extend(encoded[i].iter().cloned());
                }
                let e = embed_graph(&model, &mut g, &ids)?;
                let mut terms = Vec::new();
                for (start, n, p) in layout {
                    let anchor = g.mean_rows(e, vec![vec![start]]);
                    let others = g.mean_rows(e, (start + 1..start + n).map(|r| vec![r]).collect());
                    let sims = g.matmul_t(anchor, others);
                    let logits = g.scale(sims, 1.0 / cfg.tau);
                    terms.push((g.multi_positive_nce(logits, p), 1.0 / idx.len() as f64));
                }
                let loss = g.weighted_sum(terms);
                (g.scalar(loss), g.backward(loss))
            };
            let mut acc = Gradients::new(model.params().len());
            acc.accumulate(grads);
            acc.check_finite(model.param_names())?;
            if let Some(c) = cfg.grad_clip {
                acc.clip(c);
            }
            opt.step(model.params_mut(), &acc, cfg.learning_rate);
            total += loss;
        }
        losses.push(total / batches.len() as f64);
    }
    Ok((model, losses))
}

/// Queries paired with gold candidates by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub queries: Vec<Tokens>,
    pub candidates: Vec<Tokens>,
    pub gold: Vec<usize>,
}

impl RetrievalSet {
    /// Premise → entailed hypothesis retrieval over the entailment pairs.
    pub fn from_entailments(examples: &[NliExample]) -> Self {
        let pairs: Vec<&NliExample> = examples.iter().filter(|e| e.label == NliLabel::Entailment).collect();
        RetrievalSet {
            queries: pairs.iter().map(|e| e.premise.clone()).collect(),
            candidates: pairs.iter().map(|e| e.hypothesis.clone()).collect(),
            gold: (0..pairs.len()).collect(),
        }
    }
}

/// Acc@k for each requested k.
pub fn retrieval_eval(
    model: &Seq2SeqModel<f32>,
    vocab: &Vocab,
    set: &RetrievalSet,
    ks: &[usize],
) -> crate::Result<BTreeMap<usize, f64>> {
    let q = embed_batch(model, vocab, &set.queries)?;
    let c = embed_batch(model, vocab, &set.candidates)?;
    ks.iter().map(|&k| Ok((k, acc_at_k(&q, &c, &set.gold, k.min(c.len()))?))).collect()
}

/// Pearson and Spearman correlation between embedding cosine and a graded
/// gold similarity (entailment 2, neutral 1, contradiction 0).
pub fn similarity_eval(model: &Seq2SeqModel<f32>, vocab: &Vocab, examples: &[NliExample]) -> crate::Result<(f64, f64)> {
    let a = embed_batch(model, vocab, &examples.iter().map(|e| e.premise.clone()).collect::<Vec<_>>())?;
    let b = embed_batch(model, vocab, &examples.iter().map(|e| e.hypothesis.clone()).collect::<Vec<_>>())?;
    let sims: Vec<f64> = a.iter().zip(&b).map(|(x, y)| crate::metrics::cosine(x, y)).collect();
    let gold: Vec<f64> = examples
        .iter()
        .map(|e| match e.label {
            NliLabel::Entailment => 2.0,
            NliLabel::Neutral => 1.0,
            NliLabel::Contradiction => 0.0,
        })
        .collect();
    Ok((pearson(&sims, &gold)?, spearman(&sims, &gold)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn symmetric_pair_gives_ln2() {
        let a = vec![1.0, 0.0];
        let p = vec![vec![0.6, 0.8]];
        let n = vec![vec![0.6, -0.8]];
        assert!((infonce_multi(&a, &p, &n, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_positive_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_unit(&mut rng, 6);
            let p = random_unit(&mut rng, 6);
            let negs: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, 6)).collect();
            let tau = 0.07;
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            let num = (dot(&a, &p) / tau).exp();
            let den = num + negs.iter().map(|n| (dot(&a, n) / tau).exp()).sum::<f64>();
            let direct = -(num / den).ln();
            let got = infonce_multi(&a, &[p.clone()], &negs, tau).unwrap();
            assert!((got - direct).abs() < 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn raising_a_positive_similarity_lowers_the_loss() {
        let a = vec![1.0, 0.0];
        let n = vec![vec![0.0, 1.0]];
        let mut last = f64::INFINITY;
        for c in [-0.9, -0.3, 0.2, 0.7, 0.99] {
            let p = vec![vec![c, (1.0f64 - c * c).sqrt()]];
            let l = infonce_multi(&a, &p, &n, 0.5).unwrap();
            assert!(l > 0.0 && l < last);
            last = l;
        }
    }

    #[test]
    fn zero_vectors_and_empty_sides_are_errors() {
        assert!(infonce_multi(&[0.0, 0.0], &[vec![1.0, 0.0]], &[vec![0.0, 1.0]], 1.0).is_err());
        assert!(infonce_multi(&[1.0, 0.0], &[], &[vec![0.0, 1.0]], 1.0).is_err());
    }

    #[test]
    fn anchor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, tau) = (5, 0.3);
        let anchor = random_unit(&mut rng, d);
        let pos: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, d)).collect();
        let neg: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, d)).collect();
        let others: Vec<f64> = pos.iter().chain(&neg).flatten().copied().collect();
        let params = vec![crate::model::Tensor::new(vec![1, d], anchor.clone()).unwrap()];
        let mut g = Graph::new(&params);
        let a = g.param(0);
        let an = g.normalize_rows(a);
        let o = g.input(6, d, others, false);
        let sims = g.matmul_t(an, o);
        let logits = g.scale(sims, 1.0 / tau);
        let loss = g.multi_positive_nce(logits, 3);
        assert!((g.scalar(loss) - infonce_multi(&anchor, &pos, &neg, tau).unwrap()).abs() < 1e-12);
        let grads = g.backward(loss);
        let ga = grads.param(0).unwrap();
        let h = 1e-3;
        for j in 0..d {
            let mut up = anchor.clone();
            up[j] += h;
            let mut down = anchor.clone();
            down[j] -= h;
            let numeric =
                (infonce_multi(&up, &pos, &neg, tau).unwrap() - infonce_multi(&down, &pos, &neg, tau).unwrap()) / (2.0 * h);
            let rel = (ga[j] - numeric).abs() / ga[j].abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {j}: {} vs {numeric}", ga[j]);
        }
    }
}
