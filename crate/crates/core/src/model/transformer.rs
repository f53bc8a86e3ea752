use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{AttnSpan, Graph, Var};
use super::tensor::{Element, Tensor};
use super::ModelError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Base,
    Large,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            "large" => Ok(Preset::Large),
            other => Err(format!("unknown preset {other:?} (expected small, base or large)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn from_preset(preset: Preset, vocab_size: usize, max_len: usize, seed: u64) -> Self {
        let (layers, d_model, heads, d_ff) = match preset {
            Preset::Small => (2, 64, 2, 128),
            Preset::Base => (3, 128, 4, 256),
            Preset::Large => (4, 256, 4, 512),
        };
        ModelConfig { preset, layers, d_model, heads, d_ff, max_len, vocab_size, seed }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad("layers, d_model, heads and d_ff must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.max_len < 2 {
            return bad("max_len must be >= 2".into());
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must cover the special tokens".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    attn_norm: Norm,
    attn: Attn,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    self_norm: Norm,
    self_attn: Attn,
    cross_norm: Norm,
    cross_attn: Attn,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    tokens: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Parameter names and shapes in canonical order, with their initialisation.
fn parameter_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    let mut specs = vec![
        ("embed.tokens".to_string(), vec![v, d], Init::Normal),
        ("enc.pos".to_string(), vec![c.max_len, d], Init::Normal),
        ("dec.pos".to_string(), vec![c.max_len, d], Init::Normal),
    ];
    let norm = |s: &mut Vec<_>, p: String| {
        s.push((format!("{p}.gain"), vec![d], Init::Ones));
        s.push((format!("{p}.bias"), vec![d], Init::Zeros));
    };
    let attn = |s: &mut Vec<_>, p: String| {
        for w in ["wq", "wk", "wv", "wo"] {
            s.push((format!("{p}.{w}"), vec![d, d], Init::Normal));
        }
    };
    let ff = |s: &mut Vec<_>, p: String| {
        s.push((format!("{p}.w1"), vec![d, f], Init::Normal));
        s.push((format!("{p}.b1"), vec![f], Init::Zeros));
        s.push((format!("{p}.w2"), vec![f, d], Init::Normal));
        s.push((format!("{p}.b2"), vec![d], Init::Zeros));
    };
    for l in 0..c.layers {
        norm(&mut specs, format!("enc.{l}.attn_norm"));
        attn(&mut specs, format!("enc.{l}.attn"));
        norm(&mut specs, format!("enc.{l}.ff_norm"));
        ff(&mut specs, format!("enc.{l}.ff"));
    }
    norm(&mut specs, "enc.final_norm".into());
    for l in 0..c.layers {
        norm(&mut specs, format!("dec.{l}.self_norm"));
        attn(&mut specs, format!("dec.{l}.self_attn"));
        norm(&mut specs, format!("dec.{l}.cross_norm"));
        attn(&mut specs, format!("dec.{l}.cross_attn"));
        norm(&mut specs, format!("dec.{l}.ff_norm"));
        ff(&mut specs, format!("dec.{l}.ff"));
    }
    norm(&mut specs, "dec.final_norm".into());
    specs.push(("dec.out.weight".into(), vec![d, v], Init::Normal));
    specs.push(("dec.out.bias".into(), vec![v], Init::Zeros));
    specs
}

fn build_layout(c: &ModelConfig) -> Layout {
    // Mirrors the order of `parameter_specs`.
    let mut i = 0;
    let mut next = || {
        i += 1;
        i - 1
    };
    let tokens = next();
    let enc_pos = next();
    let dec_pos = next();
    fn n2(n: &mut dyn FnMut() -> usize) -> Norm {
        Norm { gain: n(), bias: n() }
    }
    fn a4(n: &mut dyn FnMut() -> usize) -> Attn {
        Attn { wq: n(), wk: n(), wv: n(), wo: n() }
    }
    fn f4(n: &mut dyn FnMut() -> usize) -> FeedForward {
        FeedForward { w1: n(), b1: n(), w2: n(), b2: n() }
    }
    let enc = (0..c.layers)
        .map(|_| EncLayer { attn_norm: n2(&mut next), attn: a4(&mut next), ff_norm: n2(&mut next), ff: f4(&mut next) })
        .collect();
    let enc_norm = n2(&mut next);
    let dec = (0..c.layers)
        .map(|_| DecLayer {
            self_norm: n2(&mut next),
            self_attn: a4(&mut next),
            cross_norm: n2(&mut next),
            cross_attn: a4(&mut next),
            ff_norm: n2(&mut next),
            ff: f4(&mut next),
        })
        .collect();
    let dec_norm = n2(&mut next);
    let out_w = next();
    let out_b = next();
    Layout { tokens, enc_pos, dec_pos, enc, enc_norm, dec, dec_norm, out_w, out_b }
}

/// Encoder-decoder transformer with pre-layer-norm blocks, learned absolute
/// positions and a token embedding shared by encoder and decoder inputs.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel<T: Element = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

/// Encoder output for a packed batch of source sequences.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub memory: Var,
    pub spans: Vec<Range<usize>>,
    pub key_mask: Vec<bool>,
}

/// Decoder output for a packed batch of decoder input sequences.
#[derive(Debug, Clone)]
pub struct Decoded {
    /// `[total decoder rows, vocab]`.
    pub logits: Var,
    pub spans: Vec<Range<usize>>,
    /// One cross-attention node per decoder layer.
    pub cross_attn: Vec<Var>,
}

impl Seq2SeqModel<f32> {
    /// Fresh model: weights ~ N(0, 0.02) from `config.seed`, norm gains 1, biases 0.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, &[seed::tag("init")]);
        let normal = Normal::new(0.0f32, 0.02).expect("valid normal");
        let specs = parameter_specs(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let t = match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::filled(shape, 1.0),
                Init::Normal => {
                    let n = shape.iter().product();
                    let vals = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::new(shape, vals).expect("shape matches")
                }
            };
            names.push(name);
            params.push(t);
        }
        let layout = build_layout(&config);
        Ok(Seq2SeqModel { config, names, params, layout })
    }
}

impl<T: Element> Seq2SeqModel<T> {
    /// Assembles a model from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = parameter_specs(&config);
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = std::collections::HashMap::new();
        for (name, t) in tensors {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(ModelError::InvalidConfig(format!("duplicate tensor {name:?}")));
            }
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, _) in specs {
            let t = by_name.remove(&name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ShapeMismatch { name, expected: shape, found: t.shape().to_vec() });
            }
            names.push(name);
            params.push(t);
        }
        if let Some(extra) = by_name.into_keys().min() {
            return Err(ModelError::UnexpectedTensor(extra));
        }
        let layout = build_layout(&config);
        Ok(Seq2SeqModel { config, names, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> Seq2SeqModel<U> {
        Seq2SeqModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Fails on the first parameter holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<(), ModelError> {
        match self.params.iter().position(|p| !p.all_finite()) {
            Some(i) => Err(ModelError::NonFinite { param: self.names[i].clone() }),
            None => Ok(()),
        }
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(&self.params)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::TooLong { len: ids.len(), max: self.config.max_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::IdOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    fn embed_with_positions(&self, g: &mut Graph<'_, T>, seqs: &[&[u32]], pos_param: usize) -> Var {
        let ids: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<u32> = seqs.iter().flat_map(|s| 0..s.len() as u32).collect();
        let table = g.param(self.layout.tokens);
        let tok = g.embed(table, &ids);
        let pos_table = g.param(pos_param);
        let pos = g.embed(pos_table, &positions);
        g.add(tok, pos)
    }

    fn norm(&self, g: &mut Graph<'_, T>, x: Var, n: Norm) -> Var {
        let gain = g.param(n.gain);
        let bias = g.param(n.bias);
        g.layer_norm(x, gain, bias)
    }

    fn feed_forward(&self, g: &mut Graph<'_, T>, x: Var, f: FeedForward) -> Var {
        let (w1, b1, w2, b2) = (g.param(f.w1), g.param(f.b1), g.param(f.w2), g.param(f.b2));
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let h = g.matmul(h, w2);
        g.add_row(h, b2)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        keys: Var,
        a: Attn,
        spans: Vec<AttnSpan>,
        causal: bool,
        key_mask: Vec<bool>,
    ) -> (Var, Var) {
        let (wq, wk, wv, wo) = (g.param(a.wq), g.param(a.wk), g.param(a.wv), g.param(a.wo));
        let q = g.matmul(queries, wq);
        let k = g.matmul(keys, wk);
        let v = g.matmul(keys, wv);
        let att = g.attention(q, k, v, self.config.heads, spans, causal, key_mask);
        (g.matmul(att, wo), att)
    }

    /// Encodes a packed batch of source sequences. PAD positions are masked
    /// as attention keys.
    pub fn encode(&self, g: &mut Graph<'_, T>, srcs: &[&[u32]]) -> Result<Encoded, ModelError> {
        let pad = super::PAD_ID;
        for s in srcs {
            self.check_ids(s)?;
            if s.iter().all(|&t| t == pad) {
                return Err(ModelError::AllPadSource);
            }
        }
        let mut spans = Vec::with_capacity(srcs.len());
        let mut start = 0;
        for s in srcs {
            spans.push(start..start + s.len());
            start += s.len();
        }
        let key_mask: Vec<bool> = srcs.iter().flat_map(|s| s.iter().map(|&t| t == pad)).collect();
        let attn_spans: Vec<AttnSpan> = spans.iter().map(|r| AttnSpan { q: r.clone(), k: r.clone() }).collect();

        let mut x = self.embed_with_positions(g, srcs, self.layout.enc_pos);
        for layer in &self.layout.enc {
            let h = self.norm(g, x, layer.attn_norm);
            let (a, _) = self.attention_block(g, h, h, layer.attn, attn_spans.clone(), false, key_mask.clone());
            x = g.add(x, a);
            let h = self.norm(g, x, layer.ff_norm);
            let f = self.feed_forward(g, h, layer.ff);
            x = g.add(x, f);
        }
        let memory = self.norm(g, x, self.layout.enc_norm);
        Ok(Encoded { memory, spans, key_mask })
    }

    /// Runs the decoder over packed decoder inputs; `dec[i].1` selects the
    /// encoder span the sequence cross-attends to.
    pub fn decode(
        &self,
        g: &mut Graph<'_, T>,
        enc: &Encoded,
        dec: &[(&[u32], usize)],
    ) -> Result<Decoded, ModelError> {
        let seqs: Vec<&[u32]> = dec.iter().map(|(s, _)| *s).collect();
        for s in &seqs {
            self.check_ids(s)?;
        }
        let mut spans = Vec::with_capacity(dec.len());
        let mut start = 0;
        for s in &seqs {
            spans.push(start..start + s.len());
            start += s.len();
        }
        let self_spans: Vec<AttnSpan> = spans.iter().map(|r| AttnSpan { q: r.clone(), k: r.clone() }).collect();
        let cross_spans: Vec<AttnSpan> = spans
            .iter()
            .zip(dec)
            .map(|(r, (_, e))| AttnSpan { q: r.clone(), k: enc.spans[*e].clone() })
            .collect();
        let no_mask = vec![false; start];

        let mut x = self.embed_with_positions(g, &seqs, self.layout.dec_pos);
        let mut cross_attn = Vec::with_capacity(self.layout.dec.len());
        for layer in &self.layout.dec {
            let h = self.norm(g, x, layer.self_norm);
            let (a, _) = self.attention_block(g, h, h, layer.self_attn, self_spans.clone(), true, no_mask.clone());
            x = g.add(x, a);
            let h = self.norm(g, x, layer.cross_norm);
            let (a, probs) =
                self.attention_block(g, h, enc.memory, layer.cross_attn, cross_spans.clone(), false, enc.key_mask.clone());
            cross_attn.push(probs);
            x = g.add(x, a);
            let h = self.norm(g, x, layer.ff_norm);
            let f = self.feed_forward(g, h, layer.ff);
            x = g.add(x, f);
        }
        let h = self.norm(g, x, self.layout.dec_norm);
        let (w, b) = (g.param(self.layout.out_w), g.param(self.layout.out_b));
        let logits = g.matmul(h, w);
        let logits = g.add_row(logits, b);
        Ok(Decoded { logits, spans, cross_attn })
    }
}

/// Cross-attention weights captured during a forward pass:
/// `weights[step][layer][head]` is a distribution over source positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub weights: Vec<Vec<Vec<Vec<f32>>>>,
}

impl AttentionTrace {
    /// Extracts the trace of decoder sequence `seq` from a decoded batch.
    pub fn from_decoded<T: Element>(g: &Graph<'_, T>, dec: &Decoded, seq: usize) -> AttentionTrace {
        let steps = dec.spans[seq].len();
        let mut weights = vec![Vec::with_capacity(dec.cross_attn.len()); steps];
        for &node in &dec.cross_attn {
            let (spans, probs, heads) = g.attention_probs(node).expect("attention node");
            let offset: usize = spans[..seq].iter().map(|s| heads * s.q.len() * s.k.len()).sum();
            let (ql, kl) = (spans[seq].q.len(), spans[seq].k.len());
            for (step, per_step) in weights.iter_mut().enumerate() {
                let per_head = (0..heads)
                    .map(|h| {
                        let row = &probs[offset + (h * ql + step) * kl..][..kl];
                        row.iter().map(|p| p.as_f64() as f32).collect()
                    })
                    .collect();
                per_step.push(per_head);
            }
        }
        AttentionTrace { weights }
    }
}

/// Decoder input for teacher forcing: BOS followed by all but the last target.
pub fn shift_right(bos: u32, target: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(target.len());
    v.push(bos);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

/// Single-example forward pass. `dec_ids` are decoder inputs (BOS first).
pub fn forward(
    model: &Seq2SeqModel<f32>,
    src_ids: &[u32],
    dec_ids: &[u32],
    capture: bool,
) -> Result<(Tensor<f32>, Option<AttentionTrace>), ModelError> {
    let mut g = model.graph();
    let enc = model.encode(&mut g, &[src_ids])?;
    let dec = model.decode(&mut g, &enc, &[(dec_ids, 0)])?;
    let (rows, cols) = g.dims(dec.logits);
    let logits = Tensor::new(vec![rows, cols], g.value(dec.logits).to_vec()).expect("dims");
    let trace = capture.then(|| AttentionTrace::from_decoded(&g, &dec, 0));
    Ok((logits, trace))
}

/// Mean negative log-likelihood over non-PAD target positions.
pub fn nll_teacher_forced(logits: &Tensor<f32>, target_ids: &[u32], pad_id: u32) -> Result<f64, ModelError> {
    let (rows, cols) = logits.matrix_dims();
    if rows != target_ids.len() {
        return Err(ModelError::InvalidConfig(format!(
            "logits have {rows} rows but target has {} ids",
            target_ids.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &t) in logits.values().chunks(cols).zip(target_ids) {
        if t == pad_id {
            continue;
        }
        if t as usize >= cols {
            return Err(ModelError::IdOutOfRange { id: t, vocab: cols });
        }
        let lse = super::graph::log_sum_exp(row.iter().map(|&x| x as f64));
        total += lse - row[t as usize] as f64;
        count += 1;
    }
    if count == 0 {
        return Err(ModelError::AllPadTarget);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BOS_ID, EOS_ID, PAD_ID};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::from_preset(Preset::Small, 12, 10, 11);
        c.layers = 2;
        c.d_model = 8;
        c.heads = 2;
        c.d_ff = 12;
        c
    }

    /// Teacher-forced loss of two packed pairs, the second with padded source.
    fn loss<T: Element>(m: &Seq2SeqModel<T>, g: &mut Graph<'_, T>) -> Var {
        let srcs: [&[u32]; 2] = [&[5, 6, 7, 2], &[8, 9, PAD_ID, PAD_ID]];
        let tgts: [&[u32]; 2] = [&[6, 7, EOS_ID], &[10, 11, 4, EOS_ID]];
        let enc = m.encode(g, &srcs).unwrap();
        let ins: Vec<Vec<u32>> = tgts.iter().map(|t| shift_right(BOS_ID, t)).collect();
        let dec = m.decode(g, &enc, &[(&ins[0], 0), (&ins[1], 1)]).unwrap();
        let targets: Vec<Option<u32>> = tgts.iter().flat_map(|t| t.iter().map(|&x| Some(x))).collect();
        let n = targets.len();
        g.cross_entropy(dec.logits, targets, vec![1.0 / n as f64; n])
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let model = Seq2SeqModel::new(tiny_config()).unwrap().cast::<f64>();
        let grads = {
            let mut g = model.graph();
            let l = loss(&model, &mut g);
            g.backward(l).into_params()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = 1e-3;
        let mut perturbed = model.clone();
        let mut checked = 0;
        for p in 0..model.params().len() {
            let g = grads[p].as_ref().unwrap_or_else(|| panic!("no gradient for {}", model.param_names()[p]));
            for _ in 0..4 {
                let j = rng.random_range(0..model.params()[p].len());
                let orig = model.params()[p].values()[j];
                let mut eval = |x: f64| {
                    perturbed.params_mut()[p].values_mut()[j] = x;
                    let mut gr = perturbed.graph();
                    let l = loss(&perturbed, &mut gr);
                    gr.scalar(l)
                };
                let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
                perturbed.params_mut()[p].values_mut()[j] = orig;
                let rel = (g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-3, "{}[{j}]: analytic {} numeric {numeric}", model.param_names()[p], g[j]);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn names_are_unique_and_weights_finite() {
        let m = Seq2SeqModel::new(ModelConfig::from_preset(Preset::Small, 50, 16, 1)).unwrap();
        let set: std::collections::HashSet<_> = m.param_names().iter().collect();
        assert_eq!(set.len(), m.param_names().len());
        m.check_finite().unwrap();
        assert_eq!(m.param_index("embed.tokens"), Some(0));
        assert!(m.param_index("dec.1.cross_attn.wq").is_some());
    }

    #[test]
    fn presets_and_validation() {
        let b = ModelConfig::from_preset(Preset::Base, 100, 32, 0);
        assert_eq!((b.layers, b.d_model, b.heads, b.d_ff), (3, 128, 4, 256));
        let mut bad = b.clone();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        assert_eq!("large".parse::<Preset>(), Ok(Preset::Large));
    }

    #[test]
    fn trace_rows_sum_to_one() {
        let m = Seq2SeqModel::new(tiny_config()).unwrap();
        let (logits, trace) = forward(&m, &[5, 6, 7, PAD_ID], &[BOS_ID, 6, 7], true).unwrap();
        assert!(logits.all_finite());
        let trace = trace.unwrap();
        assert_eq!(trace.weights.len(), 3);
        for step in &trace.weights {
            assert_eq!(step.len(), 2);
            for layer in step {
                for row in layer {
                    assert_eq!(row.len(), 4);
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                    assert_eq!(row[3], 0.0);
                }
            }
        }
        assert!(forward(&m, &[5, 6], &[BOS_ID], false).unwrap().1.is_none());
    }

    #[test]
    fn pad_suffix_does_not_change_logits() {
        let m = Seq2SeqModel::new(tiny_config()).unwrap();
        let (a, _) = forward(&m, &[5, 6, 7], &[BOS_ID, 8, 9], false).unwrap();
        let (b, _) = forward(&m, &[5, 6, 7, PAD_ID, PAD_ID, PAD_ID], &[BOS_ID, 8, 9], false).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn input_bounds_are_enforced() {
        let m = Seq2SeqModel::new(tiny_config()).unwrap();
        assert!(matches!(forward(&m, &[5, 12], &[BOS_ID], false), Err(ModelError::IdOutOfRange { id: 12, .. })));
        assert!(matches!(forward(&m, &[5; 11], &[BOS_ID], false), Err(ModelError::TooLong { len: 11, max: 10 })));
        assert!(matches!(forward(&m, &[PAD_ID, PAD_ID], &[BOS_ID], false), Err(ModelError::AllPadSource)));
    }

    #[test]
    fn teacher_forced_nll_examples() {
        let uniform = Tensor::new(vec![2, 4], vec![0.0f32; 8]).unwrap();
        let l = nll_teacher_forced(&uniform, &[1, 3], PAD_ID).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 5e-5);
        let mut peaked = vec![0.0f32; 8];
        peaked[1] = 1e6;
        peaked[4 + 3] = 1e6;
        let peaked = Tensor::new(vec![2, 4], peaked).unwrap();
        assert!(nll_teacher_forced(&peaked, &[1, 3], PAD_ID).unwrap() < 1e-4);
        assert!(matches!(nll_teacher_forced(&uniform, &[PAD_ID, PAD_ID], PAD_ID), Err(ModelError::AllPadTarget)));
        // PAD positions are excluded from the mean.
        let l2 = nll_teacher_forced(&peaked, &[1, PAD_ID], PAD_ID).unwrap();
        assert!(l2 < 1e-4);
    }
}
