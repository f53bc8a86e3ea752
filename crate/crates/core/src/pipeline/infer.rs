use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::datagen::generate;
use crate::metrics::{accuracy, macro_f1};
use crate::model::{graph::log_sum_exp, Seq2SeqModel, BOS_ID, EOS_ID};
use crate::objectives::{answer_to_label, prepare_task, Direction, Task, TaskExample, TaskLabel};
use crate::text::{NliExample, NliLabel, Tokens, Vocab};

/// Answers in tie-breaking order: earlier wins.
pub const ANSWER_ORDER: [&str; 3] = ["True", "False", "Neither"];

fn nlu_prompt(vocab: &Vocab, premise: &[String], hypothesis: &[String]) -> crate::Result<Vec<u32>> {
    let ex = TaskExample {
        task: Task::Nli,
        direction: Direction::Nlu,
        x1: premise.to_vec(),
        x2: hypothesis.to_vec(),
        label: TaskLabel::Entailed,
    };
    Ok(prepare_task(&ex, vocab)?.src)
}

fn answer_ids(vocab: &Vocab) -> crate::Result<[u32; 3]> {
    let mut ids = [0; 3];
    for (slot, a) in ids.iter_mut().zip(ANSWER_ORDER) {
        *slot = vocab
            .id(a)
            .ok_or_else(|| PipelineError::InvalidConfig(format!("answer word {a:?} missing from vocabulary")))?;
    }
    Ok(ids)
}

/// Sequence log-probabilities of "True", "False" and "Neither" (each
/// followed by EOS) for a batch of premise/hypothesis pairs.
pub fn answer_scores(
    model: &Seq2SeqModel<f32>,
    vocab: &Vocab,
    pairs: &[(&[String], &[String])],
) -> crate::Result<Vec<[f64; 3]>> {
    let answers = answer_ids(vocab)?;
    let prompts: Vec<Vec<u32>> = pairs.iter().map(|(p, h)| nlu_prompt(vocab, p, h)).collect::<Result<_, _>>()?;
    let srcs: Vec<&[u32]> = prompts.iter().map(Vec::as_slice).collect();
    let mut g = model.graph();
    let enc = model.encode(&mut g, &srcs)?;
    let dec_inputs: Vec<[u32; 2]> = answers.iter().map(|&a| [BOS_ID, a]).collect();
    let batch: Vec<(&[u32], usize)> =
        (0..pairs.len()).flat_map(|i| dec_inputs.iter().map(move |d| (d.as_slice(), i))).collect();
    let dec = model.decode(&mut g, &enc, &batch)?;
    let (_, vocab_size) = g.dims(dec.logits);
    let logits = g.value(dec.logits);
    let log_prob = |row: usize, id: u32| {
        let r = &logits[row * vocab_size..][..vocab_size];
        r[id as usize] as f64 - log_sum_exp(r.iter().map(|&x| x as f64))
    };
    Ok((0..pairs.len())
        .map(|i| {
            let mut s = [0.0; 3];
            for (k, &a) in answers.iter().enumerate() {
                let span = &dec.spans[3 * i + k];
                s[k] = log_prob(span.start, a) + log_prob(span.start + 1, EOS_ID);
            }
            s
        })
        .collect())
}

fn pick(scores: &[f64; 3]) -> crate::Result<NliLabel> {
    let mut best = 0;
    for k in 1..3 {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    Ok(answer_to_label(Task::Nli, ANSWER_ORDER[best])?.to_nli())
}

/// Scores the three answer words under the NLI understanding prompt and
/// returns the label of the best one.
pub fn classify_nli(
    model: &Seq2SeqModel<f32>,
    vocab: &Vocab,
    premise: &[String],
    hypothesis: &[String],
) -> crate::Result<NliLabel> {
    pick(&answer_scores(model, vocab, &[(premise, hypothesis)])?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliEvaluation {
    pub predictions: Vec<NliLabel>,
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub fn evaluate_nli(model: &Seq2SeqModel<f32>, vocab: &Vocab, examples: &[NliExample]) -> crate::Result<NliEvaluation> {
    if examples.is_empty() {
        return Err(PipelineError::EmptyData("nli examples").into());
    }
    let mut predictions = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(16) {
        let pairs: Vec<(&[String], &[String])> =
            chunk.iter().map(|e| (e.premise.as_slice(), e.hypothesis.as_slice())).collect();
        for s in answer_scores(model, vocab, &pairs)? {
            predictions.push(pick(&s)?);
        }
    }
    let golds: Vec<NliLabel> = examples.iter().map(|e| e.label).collect();
    Ok(NliEvaluation {
        accuracy: accuracy(&predictions, &golds)?,
        macro_f1: macro_f1(&predictions, &golds, &NliLabel::ALL)?,
        predictions,
    })
}

/// Greedy decoding of the entailed-summary prompt.
pub fn summarize(model: &Seq2SeqModel<f32>, vocab: &Vocab, document: &[String], max_len: usize) -> crate::Result<Tokens> {
    if document.is_empty() {
        return Err(PipelineError::EmptyData("document").into());
    }
    let ex = TaskExample {
        task: Task::Summ,
        direction: Direction::Nlg,
        x1: document.to_vec(),
        x2: Vec::new(),
        label: TaskLabel::Entailed,
    };
    let prompt = prepare_task(&ex, vocab)?.src;
    generate(model, vocab, &prompt, max_len)
}
