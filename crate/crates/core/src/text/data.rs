use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{Domain, Proposition, SyntheticWorldSpec};
use super::{detokenize, tokenize, TextError, Tokens};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction];

    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        }
    }

    pub fn parse(s: &str) -> Option<NliLabel> {
        NliLabel::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl std::fmt::Display for NliLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Veracity {
    Entailed,
    Contradictory,
}

impl Veracity {
    pub fn as_str(self) -> &'static str {
        match self {
            Veracity::Entailed => "entailed",
            Veracity::Contradictory => "contradictory",
        }
    }

    pub fn parse(s: &str) -> Option<Veracity> {
        match s {
            "entailed" => Some(Veracity::Entailed),
            "contradictory" => Some(Veracity::Contradictory),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NliExample {
    pub premise: Tokens,
    pub hypothesis: Tokens,
    pub label: NliLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SummExample {
    pub document: Tokens,
    pub summary: Tokens,
    pub veracity: Veracity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Nli,
    Summ,
    Raw,
}

/// One JSONL line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub task: TaskKind,
    pub domain: Domain,
    pub x1: String,
    pub x2: Option<String>,
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_code: Option<String>,
}

impl DatasetRecord {
    pub fn raw(domain: Domain, text: &[String]) -> Self {
        DatasetRecord {
            task: TaskKind::Raw,
            domain,
            x1: detokenize(text),
            x2: None,
            label: None,
            source_id: None,
            control_code: None,
        }
    }

    pub fn x1_tokens(&self) -> Tokens {
        tokenize(&self.x1)
    }
}

impl NliExample {
    pub fn to_record(&self, domain: Domain) -> DatasetRecord {
        DatasetRecord {
            task: TaskKind::Nli,
            domain,
            x1: detokenize(&self.premise),
            x2: Some(detokenize(&self.hypothesis)),
            label: Some(self.label.as_str().to_owned()),
            source_id: None,
            control_code: None,
        }
    }

    pub fn from_record(r: &DatasetRecord) -> Result<Self, String> {
        if r.task != TaskKind::Nli {
            return Err("record is not an nli record".into());
        }
        let label = r.label.as_deref().ok_or("missing label")?;
        Ok(NliExample {
            premise: tokenize(&r.x1),
            hypothesis: tokenize(r.x2.as_deref().ok_or("missing x2")?),
            label: NliLabel::parse(label).ok_or_else(|| format!("unknown nli label {label:?}"))?,
        })
    }
}

impl SummExample {
    pub fn to_record(&self, domain: Domain) -> DatasetRecord {
        DatasetRecord {
            task: TaskKind::Summ,
            domain,
            x1: detokenize(&self.document),
            x2: Some(detokenize(&self.summary)),
            label: Some(self.veracity.as_str().to_owned()),
            source_id: None,
            control_code: None,
        }
    }

    pub fn from_record(r: &DatasetRecord) -> Result<Self, String> {
        if r.task != TaskKind::Summ {
            return Err("record is not a summ record".into());
        }
        let label = r.label.as_deref().unwrap_or("entailed");
        Ok(SummExample {
            document: tokenize(&r.x1),
            summary: tokenize(r.x2.as_deref().ok_or("missing x2")?),
            veracity: Veracity::parse(label).ok_or_else(|| format!("unknown veracity {label:?}"))?,
        })
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[DatasetRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>, TextError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| TextError::Record { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| TextError::Record { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

fn balanced_labels<T: Copy>(classes: &[T], n: usize, rng: &mut impl Rng) -> Vec<T> {
    let mut labels: Vec<T> = (0..n).map(|i| classes[i % classes.len()]).collect();
    labels.shuffle(rng);
    labels
}

fn pick_other<'a>(pool: &'a [String], not: &str, rng: &mut impl Rng) -> &'a String {
    let candidates: Vec<&String> = pool.iter().filter(|t| *t != not).collect();
    candidates.choose(rng).expect("pool has at least two members")
}

fn synonym_of(world: &SyntheticWorldSpec, attr: &str, rng: &mut impl Rng) -> String {
    let syns: Vec<&String> = world.synonyms[attr].iter().collect();
    (*syns.choose(rng).expect("synonym classes have >= 2 members")).clone()
}

/// Builds the hypothesis proposition for `label` under the world's rules:
/// entailment swaps in a synonym, contradiction flips negation or (for a
/// positive premise) swaps in the antonym, neutral swaps in an attribute from
/// an unrelated class (or, when no such class exists, moves the place).
fn hypothesis_for(
    world: &SyntheticWorldSpec,
    domain: Domain,
    premise: &Proposition,
    label: NliLabel,
    rng: &mut impl Rng,
) -> Proposition {
    let mut h = premise.clone();
    match label {
        NliLabel::Entailment => h.attribute = synonym_of(world, &premise.attribute, rng),
        NliLabel::Contradiction => {
            let antonym = world.antonyms.get(&premise.attribute);
            match antonym {
                Some(a) if !premise.negated && rng.random_bool(world.params.antonym_contradiction_rate) => {
                    h.attribute = a.clone()
                }
                _ => h.negated = !premise.negated,
            }
        }
        NliLabel::Neutral => {
            let lex = world.lexicon(domain);
            let (_, class) = world.class_of(&premise.attribute).expect("attribute has a class");
            let unrelated = world.unrelated_classes(domain, class);
            match unrelated.choose(rng) {
                Some(&c) => {
                    h.attribute = lex.attribute_classes[c].choose(rng).expect("class").clone();
                }
                None => {
                    let places: Vec<String> = world.entities(&lex.place_category).cloned().collect();
                    h.place = pick_other(&places, &premise.place, rng).clone();
                }
            }
        }
    }
    h
}

/// Labelled NLI pairs, balanced to within one example per class.
pub fn gen_nli_data(
    world: &SyntheticWorldSpec,
    domain: Domain,
    n: usize,
    seed: u64,
) -> Result<Vec<NliExample>, TextError> {
    if n < 3 {
        return Err(TextError::InvalidRequest(format!("need at least 3 nli examples, got {n}")));
    }
    let mut label_rng = seed::rng(seed, &[seed::tag("nli-labels"), domain as u64]);
    let labels = balanced_labels(&NliLabel::ALL, n, &mut label_rng);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = seed::rng(seed, &[seed::tag("nli"), domain as u64, i as u64]);
            let negated = rng.random_bool(world.params.negated_premise_rate);
            let p = world.random_proposition(domain, negated, &mut rng);
            let h = hypothesis_for(world, domain, &p, label, &mut rng);
            NliExample { premise: world.render(&p), hypothesis: world.render(&h), label }
        })
        .collect())
}

/// Drops attribute modifiers from a sentence.
pub fn compress_sentence(world: &SyntheticWorldSpec, sentence: &[String]) -> Tokens {
    sentence
        .iter()
        .filter(|t| world.class_of(t).is_none())
        .cloned()
        .collect()
}

/// The gold summary rule: the first sentence of the document, compressed.
pub fn summary_rule(world: &SyntheticWorldSpec, document: &[String]) -> Tokens {
    let first: Vec<String> = document.iter().take_while(|t| *t != ".").cloned().collect();
    compress_sentence(world, &first)
}

fn two_sentence_doc(world: &SyntheticWorldSpec, a: &Proposition, b: &Proposition) -> Tokens {
    let mut doc = world.render(a);
    doc.push(".".into());
    doc.extend(world.render(b));
    doc.push(".".into());
    doc
}

/// Gold (document, summary) pairs; summaries follow [`summary_rule`].
pub fn gen_summ_data(
    world: &SyntheticWorldSpec,
    domain: Domain,
    n: usize,
    seed: u64,
) -> Result<Vec<SummExample>, TextError> {
    if n == 0 {
        return Err(TextError::InvalidRequest("need at least 1 summ example".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = seed::rng(seed, &[seed::tag("summ"), domain as u64, i as u64]);
            let neg = world.params.negated_premise_rate;
            let negated = rng.random_bool(neg);
            let a = world.random_proposition(domain, negated, &mut rng);
            let negated = rng.random_bool(neg);
            let b = world.random_proposition(domain, negated, &mut rng);
            let document = two_sentence_doc(world, &a, &b);
            let summary = summary_rule(world, &document);
            SummExample { document, summary, veracity: Veracity::Entailed }
        })
        .collect())
}

/// Unlabelled two-sentence documents. The second sentence restates the first
/// with a synonym, contrasts it by negating the antonym, or states an
/// unrelated fact, in the proportions given by the world parameters.
pub fn gen_raw_corpus(
    world: &SyntheticWorldSpec,
    domain: Domain,
    n: usize,
    seed: u64,
) -> Result<Vec<Tokens>, TextError> {
    if n == 0 {
        return Err(TextError::InvalidRequest("need at least 1 raw document".into()));
    }
    let p = &world.params;
    Ok((0..n)
        .map(|i| {
            let mut rng = seed::rng(seed, &[seed::tag("raw"), domain as u64, i as u64]);
            let u: f64 = rng.random();
            let second;
            let first;
            if u < p.raw_paraphrase_rate {
                first = world.random_proposition(domain, rng.random_bool(p.negated_premise_rate), &mut rng);
                let mut s = first.clone();
                s.attribute = synonym_of(world, &first.attribute, &mut rng);
                second = s;
            } else if u < p.raw_paraphrase_rate + p.raw_contrast_rate {
                first = world.random_proposition(domain, false, &mut rng);
                let mut s = first.clone();
                match world.antonyms.get(&first.attribute) {
                    Some(a) => {
                        s.attribute = a.clone();
                        s.negated = true;
                    }
                    None => s.attribute = synonym_of(world, &first.attribute, &mut rng),
                }
                second = s;
            } else {
                first = world.random_proposition(domain, rng.random_bool(p.negated_premise_rate), &mut rng);
                second = world.random_proposition(domain, rng.random_bool(p.negated_premise_rate), &mut rng);
            }
            two_sentence_doc(world, &first, &second)
        })
        .collect())
}
