//! Classification, lexical-overlap, entity, retrieval and correlation
//! metrics, and the majority-class baseline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Display;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::text::{find_entities, Gazetteer};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
    #[error("k = {k} is invalid for {n} candidates")]
    InvalidK { k: usize, n: usize },
    #[error("gold index {index} out of range for {n} candidates")]
    GoldOutOfRange { index: usize, n: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("all values tied")]
    AllTied,
    #[error("metric {name} = {value} outside its range")]
    OutOfRange { name: String, value: f64 },
}

fn same_len(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn accuracy<L: PartialEq>(preds: &[L], golds: &[L]) -> Result<f64, MetricError> {
    same_len(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Unweighted mean of per-class F1; a class with no true positives scores 0.
pub fn macro_f1<L: PartialEq>(preds: &[L], golds: &[L], classes: &[L]) -> Result<f64, MetricError> {
    same_len(preds.len(), golds.len())?;
    if classes.is_empty() {
        return Err(MetricError::Empty);
    }
    let total: f64 = classes
        .iter()
        .map(|c| {
            let tp = preds.iter().zip(golds).filter(|(p, g)| *p == c && *g == c).count() as f64;
            let predicted = preds.iter().filter(|p| *p == c).count() as f64;
            let actual = golds.iter().filter(|g| *g == c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                let (p, r) = (tp / predicted, tp / actual);
                2.0 * p * r / (p + r)
            }
        })
        .sum();
    Ok(total / classes.len() as f64)
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-free sentence BLEU-4 with brevity penalty against the closest
/// reference length. A zero n-gram precision is replaced by
/// `1 / (2 · candidate length)`. Empty inputs score 0.
pub fn bleu4<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> f64 {
    let c = candidate.len();
    if c == 0 || references.iter().all(Vec::is_empty) {
        return 0.0;
    }
    let floor = 1.0 / (2.0 * c as f64);
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngrams(candidate, n);
        let total: usize = cand.values().sum();
        let ref_grams: Vec<_> = references.iter().map(|r| ngrams(r, n)).collect();
        let clipped: usize = cand
            .iter()
            .map(|(g, &k)| k.min(ref_grams.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
            .sum();
        let p = if clipped == 0 { floor } else { clipped as f64 / total as f64 };
        log_sum += p.ln();
    }
    let r = references
        .iter()
        .filter(|r| !r.is_empty())
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("a nonempty reference");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    (bp * (log_sum / 4.0).exp()).clamp(0.0, 1.0)
}

pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Balanced F1 of longest-common-subsequence precision and recall.
pub fn rouge_l<S: PartialEq>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / candidate.len() as f64, l / reference.len() as f64);
    2.0 * p * r / (p + r)
}

fn entity_set(tokens: &[String], gazetteer: &Gazetteer) -> HashSet<Vec<String>> {
    find_entities(tokens, gazetteer).iter().map(|s| s.text(tokens).to_vec()).collect()
}

/// Fraction of the reference's gazetteer entities found in the candidate.
/// With no reference entities: 1 if the candidate has none either, else 0.
pub fn nem(candidate: &[String], reference: &[String], gazetteer: &Gazetteer) -> f64 {
    let c = entity_set(candidate, gazetteer);
    let r = entity_set(reference, gazetteer);
    if r.is_empty() {
        return if c.is_empty() { 1.0 } else { 0.0 };
    }
    r.intersection(&c).count() as f64 / r.len() as f64
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Fraction of queries whose gold candidate is among the `k` most
/// cosine-similar candidates; equal similarities rank the lower index first.
pub fn acc_at_k(queries: &[Vec<f32>], candidates: &[Vec<f32>], gold: &[usize], k: usize) -> Result<f64, MetricError> {
    same_len(queries.len(), gold.len())?;
    let n = candidates.len();
    if k == 0 || k > n {
        return Err(MetricError::InvalidK { k, n });
    }
    let mut hits = 0;
    for (q, &g) in queries.iter().zip(gold) {
        if g >= n {
            return Err(MetricError::GoldOutOfRange { index: g, n });
        }
        let sims: Vec<f64> = candidates.iter().map(|c| cosine(q, c)).collect();
        let ahead = sims.iter().enumerate().filter(|&(i, &s)| s > sims[g] || (s == sims[g] && i < g)).count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    same_len(xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(MetricError::Empty);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    same_len(xs.len(), ys.len())?;
    let (rx, ry) = (fractional_ranks(xs), fractional_ranks(ys));
    pearson(&rx, &ry).map_err(|e| match e {
        MetricError::ZeroVariance => MetricError::AllTied,
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, f64>,
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    /// Caller-supplied; left empty so reruns stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl MetricsReport {
    pub fn new(dataset: &str, model: &str, seed: u64) -> Self {
        MetricsReport { dataset: dataset.into(), model: model.into(), seed, ..Default::default() }
    }

    pub fn insert(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Checks each metric against its range: correlations in [-1, 1],
    /// everything else in [0, 1].
    pub fn validate(&self) -> Result<(), MetricError> {
        for (name, &value) in &self.metrics {
            let lo = if name.starts_with("pearson") || name.starts_with("spearman") { -1.0 } else { 0.0 };
            if !(lo..=1.0).contains(&value) {
                return Err(MetricError::OutOfRange { name: name.clone(), value });
            }
        }
        Ok(())
    }

    /// Rows of `model,dataset,metric,value`.
    pub fn to_csv_rows(&self) -> Vec<[String; 4]> {
        self.metrics
            .iter()
            .map(|(k, v)| [self.model.clone(), self.dataset.clone(), k.clone(), format!("{v}")])
            .collect()
    }
}

/// Predicts the most frequent training label everywhere; ties go to the
/// label whose name sorts first.
pub fn zero_rule<L>(golds_train: &[L], golds_test: &[L]) -> Result<(Vec<L>, MetricsReport), MetricError>
where
    L: Clone + Eq + Hash + Display,
{
    if golds_train.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut counts: HashMap<&L, usize> = HashMap::new();
    for l in golds_train {
        *counts.entry(l).or_insert(0) += 1;
    }
    let modal = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.to_string().cmp(&a.0.to_string())))
        .map(|(l, _)| (*l).clone())
        .expect("nonempty");
    let preds = vec![modal; golds_test.len()];
    let mut classes: Vec<L> = Vec::new();
    for l in golds_train.iter().chain(golds_test) {
        if !classes.contains(l) {
            classes.push(l.clone());
        }
    }
    classes.sort_by_key(|l| l.to_string());
    let mut report = MetricsReport::new("", "zero-rule", 0);
    if !golds_test.is_empty() {
        report.insert("accuracy", accuracy(&preds, golds_test)?);
        report.insert("macro_f1", macro_f1(&preds, golds_test, &classes)?);
    }
    Ok((preds, report))
}
