//! Control-code attention probe.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::datagen::banned_for_generation;
use crate::model::{forward, greedy, shift_right, AttentionTrace, ModelScorer, Seq2SeqModel, BOS_ID};
use crate::objectives::{prepare_task, Direction, Task, TaskExample, TaskLabel};
use crate::seed;
use crate::text::{Tokens, Vocab};
use crate::Error;

/// Premises probed per set at most.
pub const PROBE_SAMPLE: usize = 100;

/// Largest attention mass placed on `positions` by any head of any layer at
/// any decoder step.
pub fn max_mass(trace: &AttentionTrace, positions: &[usize]) -> f64 {
    let mut best = 0.0f64;
    for layer in trace.weights.iter().flatten() {
        for row in layer {
            let mass: f64 = positions.iter().filter_map(|&p| row.get(p)).map(|&w| w as f64).sum();
            best = best.max(mass);
        }
    }
    best.min(1.0)
}

/// Positions of the label word inside an NLI generation prompt.
fn label_positions(prompt: &[u32], vocab: &Vocab, label: TaskLabel) -> crate::Result<Vec<usize>> {
    let id = vocab
        .id(label.as_str())
        .ok_or_else(|| Error::Analysis(format!("label word {:?} missing from vocabulary", label.as_str())))?;
    // The control code sits in the fixed prefix, before the premise.
    let pos = prompt
        .iter()
        .position(|&t| t == id)
        .ok_or_else(|| Error::Analysis(format!("label word {:?} not found in prompt", label.as_str())))?;
    Ok(vec![pos])
}

/// Greedily generates a hypothesis for `(premise, label)` and returns the
/// maximum cross-attention mass on the control code.
pub fn control_code_attention(
    model: &Seq2SeqModel<f32>,
    vocab: &Vocab,
    premise: &[String],
    label: TaskLabel,
) -> crate::Result<f64> {
    let ex = TaskExample { task: Task::Nli, direction: Direction::Nlg, x1: premise.to_vec(), x2: Vec::new(), label };
    let prompt = prepare_task(&ex, vocab)?.src;
    let positions = label_positions(&prompt, vocab, label)?;
    let scorer = ModelScorer::new(model, &prompt)?.with_banned(banned_for_generation());
    let ids = greedy(&scorer, model.config().max_len)?;
    let dec = if ids.is_empty() { vec![BOS_ID] } else { shift_right(BOS_ID, &ids) };
    let (_, trace) = forward(model, &prompt, &dec, true)?;
    Ok(max_mass(&trace.expect("capture requested"), &positions))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl ProbeStats {
    pub fn of(values: &[f64]) -> ProbeStats {
        let n = values.len();
        if n == 0 {
            return ProbeStats::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        ProbeStats { mean, std: var.sqrt(), n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeValue {
    /// Index into the premise list passed to [`probe_set`].
    pub premise: usize,
    pub label: TaskLabel,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub values: Vec<ProbeValue>,
    pub per_label: Vec<(TaskLabel, ProbeStats)>,
    pub overall: ProbeStats,
}

impl ProbeResult {
    fn from_values(values: Vec<ProbeValue>) -> ProbeResult {
        let per_label = TaskLabel::ALL
            .iter()
            .map(|&l| {
                let v: Vec<f64> = values.iter().filter(|p| p.label == l).map(|p| p.value).collect();
                (l, ProbeStats::of(&v))
            })
            .collect();
        let all: Vec<f64> = values.iter().map(|p| p.value).collect();
        ProbeResult { overall: ProbeStats::of(&all), per_label, values }
    }

    /// `label,mean,std,n` rows, one per label and a final `all` row.
    pub fn to_csv_rows(&self) -> Vec<[String; 4]> {
        let row = |name: &str, s: &ProbeStats| [name.to_string(), s.mean.to_string(), s.std.to_string(), s.n.to_string()];
        let mut rows: Vec<_> = self.per_label.iter().map(|(l, s)| row(l.as_str(), s)).collect();
        rows.push(row("all", &self.overall));
        rows
    }
}

/// Probes up to [`PROBE_SAMPLE`] premises, sampled without replacement,
/// under each of the three control codes.
pub fn probe_set(model: &Seq2SeqModel<f32>, vocab: &Vocab, premises: &[Tokens], seed: u64) -> crate::Result<ProbeResult> {
    if premises.is_empty() {
        return Err(Error::Analysis("no premises to probe".into()));
    }
    let mut rng = seed::rng(seed, &[seed::tag("probe")]);
    let picked = index::sample(&mut rng, premises.len(), premises.len().min(PROBE_SAMPLE));
    let mut values = Vec::with_capacity(3 * picked.len());
    for i in picked {
        for label in TaskLabel::ALL {
            let value = control_code_attention(model, vocab, &premises[i], label)?;
            values.push(ProbeValue { premise: i, label, value });
        }
    }
    Ok(ProbeResult::from_values(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Preset};
    use crate::text::tokenize;

    fn vocab() -> Vocab {
        let mut words = crate::experiment::prompt_words();
        words.extend(tokenize("there is no foo bar in baz qux"));
        Vocab::build(&[words]).unwrap()
    }

    fn model(v: &Vocab) -> Seq2SeqModel<f32> {
        Seq2SeqModel::new(ModelConfig::from_preset(Preset::Small, v.len(), 16, 3)).unwrap()
    }

    #[test]
    fn uniform_cross_attention_gives_code_share() {
        let v = vocab();
        let mut m = model(&v);
        let names: Vec<String> = m.param_names().to_vec();
        for (i, n) in names.iter().enumerate() {
            if n.contains("cross_attn.wq") {
                m.params_mut()[i].values_mut().fill(0.0);
            }
        }
        let premise = tokenize("there is foo bar in baz");
        let ex = TaskExample {
            task: Task::Nli,
            direction: Direction::Nlg,
            x1: premise.clone(),
            x2: vec![],
            label: TaskLabel::Neutral,
        };
        let len = prepare_task(&ex, &v).unwrap().src.len();
        let got = control_code_attention(&m, &v, &premise, TaskLabel::Neutral).unwrap();
        assert!((got - 1.0 / len as f64).abs() < 1e-6, "{got} vs 1/{len}");
    }

    #[test]
    fn concentrated_head_gives_one() {
        let spread = vec![0.25f32; 4];
        let focused = vec![0.0, 0.0, 1.0, 0.0];
        let trace = AttentionTrace {
            weights: vec![vec![vec![spread.clone(), spread.clone()]], vec![vec![spread, focused]]],
        };
        assert_eq!(max_mass(&trace, &[2]), 1.0);
        assert_eq!(max_mass(&trace, &[0]), 0.25);
        assert_eq!(max_mass(&trace, &[]), 0.0);
    }

    #[test]
    fn probe_values_are_bounded_and_counted() {
        let v = vocab();
        let m = model(&v);
        let premises: Vec<Tokens> = ["there is foo in baz", "there is no bar in qux", "foo is bar in baz"]
            .iter()
            .map(|s| tokenize(s))
            .collect();
        let r = probe_set(&m, &v, &premises, 1).unwrap();
        assert_eq!(r.values.len(), 9);
        assert!(r.values.iter().all(|p| (0.0..=1.0).contains(&p.value)));
        assert!(r.per_label.iter().all(|(_, s)| s.n == 3));
        assert_eq!(r.overall.n, 9);
        assert_eq!(r, probe_set(&m, &v, &premises, 1).unwrap());
        assert_eq!(r.to_csv_rows().len(), 4);
    }

    #[test]
    fn sample_is_capped() {
        let picked = index::sample(&mut seed::rng(0, &[seed::tag("probe")]), 130, PROBE_SAMPLE);
        assert_eq!(picked.len(), 100);
        // 100 sampled premises under three labels each.
        let r = ProbeResult::from_values(
            picked
                .into_iter()
                .flat_map(|i| TaskLabel::ALL.map(|label| ProbeValue { premise: i, label, value: 0.5 }))
                .collect(),
        );
        assert_eq!(r.values.len(), 300);
        assert_eq!(r.overall.std, 0.0);
    }

    #[test]
    fn missing_label_word_is_an_error() {
        let v = Vocab::build(&[tokenize("there is foo")]).unwrap();
        let m = model(&v);
        assert!(matches!(
            control_code_attention(&m, &v, &tokenize("there is foo"), TaskLabel::Entailed),
            Err(Error::Analysis(_))
        ));
    }
}
