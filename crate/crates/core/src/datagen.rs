//! Data manufacture: counterfactual summaries by entity swap, pseudo-NLI
//! triples for self-finetuning, and contrastive sets for embedding training.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::model::{greedy, model_beam_search, ModelScorer, Seq2SeqModel, BOS_ID, PAD_ID, UNK_ID};
use crate::objectives::{prepare_task, Direction, Task, TaskExample, TaskLabel};
use crate::seed;
use crate::text::{find_entities, Gazetteer, NliExample, SummExample, Tokens, Veracity, Vocab, NUM_SENTINELS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub beam: usize,
    pub k_pairs: usize,
    pub max_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { beam: 5, k_pairs: 3, max_len: 24 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.k_pairs == 0 || self.k_pairs > self.beam {
            return Err(DatagenError::InvalidConfig(format!(
                "need 1 <= k_pairs <= beam, got k_pairs {} and beam {}",
                self.k_pairs, self.beam
            )));
        }
        if self.max_len == 0 {
            return Err(DatagenError::InvalidConfig("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Counts of produced, dropped and padded items for one generation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationReport {
    pub produced: usize,
    pub dropped: usize,
    pub padded: usize,
}

/// A generated item with the index of the input it came from and the
/// control code used to produce it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generated<T> {
    pub source_id: usize,
    pub control_code: TaskLabel,
    pub item: T,
}

/// Tokens the generator may never emit: padding, BOS, unknown and MLM
/// sentinels.
pub fn banned_for_generation() -> Vec<u32> {
    let mut v = vec![PAD_ID, BOS_ID, UNK_ID];
    v.extend((0..NUM_SENTINELS as u32).map(|i| 4 + i));
    v
}

/// Greedy generation from a tokenized prompt; returns the generated tokens
/// without EOS.
pub fn generate(model: &Seq2SeqModel<f32>, vocab: &Vocab, prompt: &[u32], max_len: usize) -> crate::Result<Tokens> {
    let scorer = ModelScorer::new(model, prompt)?.with_banned(banned_for_generation());
    let ids = greedy(&scorer, max_len.min(model.config().max_len))?;
    Ok(vocab.decode_generated(&ids)?)
}

fn nlg_prompt(task: Task, x1: &[String], label: TaskLabel, vocab: &Vocab) -> crate::Result<Vec<u32>> {
    let ex = TaskExample { task, direction: Direction::Nlg, x1: x1.to_vec(), x2: Vec::new(), label };
    Ok(prepare_task(&ex, vocab)?.src)
}

fn is_rejected(tokens: &[String]) -> bool {
    tokens.iter().any(|t| t == "UNK" || t == "<unk>" || t.contains('#'))
}

/// Entities per category found in a corpus.
pub fn corpus_entities<'a>(
    docs: impl IntoIterator<Item = &'a Tokens>,
    gazetteer: &Gazetteer,
) -> BTreeMap<String, BTreeSet<Tokens>> {
    let mut out: BTreeMap<String, BTreeSet<Tokens>> = BTreeMap::new();
    for d in docs {
        for span in find_entities(d, gazetteer) {
            out.entry(span.category.clone()).or_default().insert(span.text(d).to_vec());
        }
    }
    out
}

/// Swaps one uniformly chosen entity of the summary for a different entity
/// of the same category. `None` when the summary has no entity, the category
/// has no alternative, or the result contains an unknown or `#` token.
pub fn counterfactual_summary(
    document: &[String],
    summary: &[String],
    gazetteer: &Gazetteer,
    corpus_entities: &BTreeMap<String, BTreeSet<Tokens>>,
    rng_seed: u64,
) -> Option<SummExample> {
    let spans = find_entities(summary, gazetteer);
    let mut rng = seed::rng(rng_seed, &[seed::tag("counterfactual")]);
    let span = spans.choose(&mut rng)?;
    let original = span.text(summary);
    let options: Vec<&Tokens> = corpus_entities
        .get(&span.category)?
        .iter()
        .filter(|e| e.as_slice() != original)
        .collect();
    let replacement = options.choose(&mut rng)?;
    let mut out = summary[..span.start].to_vec();
    out.extend(replacement.iter().cloned());
    out.extend_from_slice(&summary[span.end()..]);
    if is_rejected(&out) {
        return None;
    }
    Some(SummExample { document: document.to_vec(), summary: out, veracity: Veracity::Contradictory })
}

/// Each gold pair followed by its counterfactual twin when one exists.
pub fn build_summ_nlu_set(
    gold: &[SummExample],
    gazetteer: &Gazetteer,
    corpus_entities: &BTreeMap<String, BTreeSet<Tokens>>,
    seed: u64,
) -> Vec<SummExample> {
    let mut out = Vec::with_capacity(2 * gold.len());
    for (i, g) in gold.iter().enumerate() {
        out.push(SummExample { veracity: Veracity::Entailed, ..g.clone() });
        let s = seed::derive(seed, &[i as u64]);
        if let Some(cf) = counterfactual_summary(&g.document, &g.summary, gazetteer, corpus_entities, s) {
            out.push(cf);
        }
    }
    out
}

/// One greedy hypothesis per label for each premise, generated under that
/// label's control code. Empty generations are dropped and counted.
pub fn pseudo_nli(
    model: &Seq2SeqModel<f32>,
    vocab: &Vocab,
    premises: &[Tokens],
    cfg: &GenConfig,
) -> crate::Result<(Vec<Generated<NliExample>>, GenerationReport)> {
    cfg.validate()?;
    if premises.is_empty() {
        return Err(DatagenError::EmptyInput("premises").into());
    }
    let mut out = Vec::with_capacity(3 * premises.len());
    let mut report = GenerationReport::default();
    for (i, premise) in premises.iter().enumerate() {
        for label in TaskLabel::ALL {
            let prompt = nlg_prompt(Task::Nli, premise, label, vocab)?;
            let hypothesis = generate(model, vocab, &prompt, cfg.max_len)?;
            if hypothesis.is_empty() {
                report.dropped += 1;
                continue;
            }
            report.produced += 1;
            out.push(Generated {
                source_id: i,
                control_code: label,
                item: NliExample { premise: premise.clone(), hypothesis, label: label.to_nli() },
            });
        }
    }
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveSet {
    pub source_id: usize,
    pub anchor: Tokens,
    pub positives: Vec<Tokens>,
    pub negatives: Vec<Tokens>,
}

/// Top-k beam outputs under `label`, excluding empties and copies of the
/// anchor; short lists are padded with the last kept output.
fn beam_side(
    model: &Seq2SeqModel<f32>,
    vocab: &Vocab,
    anchor: &[String],
    label: TaskLabel,
    cfg: &GenConfig,
    report: &mut GenerationReport,
) -> crate::Result<Option<Vec<Tokens>>> {
    let prompt = nlg_prompt(Task::Nli, anchor, label, vocab)?;
    let scorer = ModelScorer::new(model, &prompt)?.with_banned(banned_for_generation());
    let max_len = cfg.max_len.min(model.config().max_len);
    let hyps = crate::model::beam_search(&scorer, cfg.beam, cfg.beam, max_len)?;
    let mut kept: Vec<Tokens> = Vec::new();
    for h in hyps {
        let toks = vocab.decode_generated(&h.ids)?;
        if toks.is_empty() || toks.as_slice() == anchor || kept.contains(&toks) {
            continue;
        }
        kept.push(toks);
        if kept.len() == cfg.k_pairs {
            break;
        }
    }
    let Some(last) = kept.last().cloned() else {
        return Ok(None);
    };
    while kept.len() < cfg.k_pairs {
        kept.push(last.clone());
        report.padded += 1;
    }
    Ok(Some(kept))
}

/// For each anchor, the top `k_pairs` beam generations under the entailed
/// control code as positives and under the contradictory one as negatives.
pub fn contrastive_pairs(
    model: &Seq2SeqModel<f32>,
    vocab: &Vocab,
    anchors: &[Tokens],
    cfg: &GenConfig,
) -> crate::Result<(Vec<ContrastiveSet>, GenerationReport)> {
    cfg.validate()?;
    if anchors.is_empty() {
        return Err(DatagenError::EmptyInput("anchors").into());
    }
    let mut report = GenerationReport::default();
    let mut out = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let pos = beam_side(model, vocab, anchor, TaskLabel::Entailed, cfg, &mut report)?;
        let neg = beam_side(model, vocab, anchor, TaskLabel::Contradictory, cfg, &mut report)?;
        match (pos, neg) {
            (Some(positives), Some(negatives)) => {
                report.produced += positives.len() + negatives.len();
                out.push(ContrastiveSet { source_id: i, anchor: anchor.clone(), positives, negatives });
            }
            _ => report.dropped += 1,
        }
    }
    Ok((out, report))
}

/// Generation for a single prompt with a given beam, for callers that need
/// the raw scored list.
pub fn beam_generate(
    model: &Seq2SeqModel<f32>,
    vocab: &Vocab,
    x1: &[String],
    label: TaskLabel,
    beam: usize,
    k: usize,
    max_len: usize,
) -> crate::Result<Vec<(Tokens, f64)>> {
    let prompt = nlg_prompt(Task::Nli, x1, label, vocab)?;
    let hyps = model_beam_search(model, &prompt, beam, k, max_len)?;
    hyps.into_iter().map(|h| Ok((vocab.decode_generated(&h.ids)?, h.score))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn gazetteer() -> (Gazetteer, BTreeMap<String, BTreeSet<Tokens>>) {
        let mut cats: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        cats.insert("PERSON".into(), ["john", "mary"].iter().map(|s| s.to_string()).collect());
        cats.insert("LOC".into(), ["paris", "rome", "new york"].iter().map(|s| s.to_string()).collect());
        cats.insert("ODD".into(), ["x#y", "solo"].iter().map(|s| s.to_string()).collect());
        let corpus: BTreeMap<String, BTreeSet<Tokens>> =
            cats.iter().map(|(k, v)| (k.clone(), v.iter().map(|e| tokenize(e)).collect())).collect();
        (Gazetteer::new(&cats), corpus)
    }

    /// All outputs reachable by swapping one entity span for another member
    /// of its category.
    fn all_single_swaps(summary: &[String], corpus: &BTreeMap<String, BTreeSet<Tokens>>, gz: &Gazetteer) -> Vec<Tokens> {
        let mut out = Vec::new();
        for span in find_entities(summary, gz) {
            for e in &corpus[&span.category] {
                if e.as_slice() == span.text(summary) {
                    continue;
                }
                let mut s = summary[..span.start].to_vec();
                s.extend(e.iter().cloned());
                s.extend_from_slice(&summary[span.end()..]);
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn swap_is_one_of_the_enumerated_outputs() {
        let (gz, corpus) = gazetteer();
        let doc = tokenize("john visited paris . it rained .");
        let summary = tokenize("john visited paris");
        let oracle = all_single_swaps(&summary, &corpus, &gz);
        let mut seen = BTreeSet::new();
        for seed in 0..50 {
            let cf = counterfactual_summary(&doc, &summary, &gz, &corpus, seed).unwrap();
            assert_eq!(cf.veracity, Veracity::Contradictory);
            assert!(oracle.contains(&cf.summary), "{:?}", cf.summary);
            seen.insert(cf.summary);
        }
        assert!(seen.contains(&tokenize("john visited rome")));
        assert!(seen.contains(&tokenize("john visited new york")));
        assert!(seen.contains(&tokenize("mary visited paris")));
    }

    #[test]
    fn no_entity_or_rejected_swap_yields_nothing() {
        let (gz, corpus) = gazetteer();
        let s = tokenize("it rained");
        assert!(counterfactual_summary(&s, &s, &gz, &corpus, 1).is_none());
        // The only alternative to "solo" contains '#'.
        let s = tokenize("solo waited");
        for seed in 0..10 {
            assert!(counterfactual_summary(&s, &s, &gz, &corpus, seed).is_none());
        }
    }

    #[test]
    fn summ_nlu_set_pairs_gold_with_twins() {
        let (gz, corpus) = gazetteer();
        let gold: Vec<SummExample> = (0..10)
            .map(|i| SummExample {
                document: tokenize(&format!("john met mary {i} .")),
                summary: tokenize("john met mary"),
                veracity: Veracity::Entailed,
            })
            .collect();
        let set = build_summ_nlu_set(&gold, &gz, &corpus, 3);
        assert_eq!(set.len(), 20);
        assert_eq!(set.iter().filter(|e| e.veracity == Veracity::Entailed).count(), 10);
        let plain: Vec<SummExample> =
            gold.iter().map(|g| SummExample { summary: tokenize("it rained"), ..g.clone() }).collect();
        let set = build_summ_nlu_set(&plain, &gz, &corpus, 3);
        assert_eq!(set.len(), 10);
        assert!(set.iter().all(|e| e.veracity == Veracity::Entailed));
        assert_eq!(build_summ_nlu_set(&gold, &gz, &corpus, 3), build_summ_nlu_set(&gold, &gz, &corpus, 3));
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig::default().validate().is_ok());
        assert!(GenConfig { beam: 2, k_pairs: 3, max_len: 5 }.validate().is_err());
        assert!(GenConfig { beam: 2, k_pairs: 0, max_len: 5 }.validate().is_err());
    }
}
