//! Tape-based reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Parameters are borrowed from the owning model rather than copied, and
//! [`Graph::backward`] walks the tape in reverse, producing gradients for
//! every node that (transitively) depends on a trainable input.

use std::ops::Range;

use super::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pairs a block of query rows with the block of key rows it may attend to.
/// Several query blocks may share one key block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnSpan {
    pub q: Range<usize>,
    pub k: Range<usize>,
}

struct AttnData<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    spans: Vec<AttnSpan>,
    probs: Vec<T>,
    offsets: Vec<usize>,
}

struct CeData {
    logits: Var,
    targets: Vec<Option<u32>>,
    weights: Vec<f64>,
    row_nll: Vec<f64>,
    total: f64,
}

enum Op<T> {
    Input,
    Param(usize),
    Embed { table: Var, ids: Vec<u32> },
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention(Box<AttnData<T>>),
    CrossEntropy(Box<CeData>),
    WeightedSum(Vec<(Var, f64)>),
    MeanRows { x: Var, groups: Vec<Vec<usize>> },
    NormalizeRows { x: Var, norms: Vec<T> },
    ConcatRows(Vec<Var>),
    MultiPositiveNce { logits: Var, positives: usize, p_all: Vec<f64>, p_pos: Vec<f64> },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'p, T: Element> {
    params: &'p [Tensor<T>],
    trainable: Option<&'p [bool]>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<Option<Vec<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].as_deref()
    }

    /// Gradient for parameter `index`, if it took part in the computation.
    pub fn param(&self, index: usize) -> Option<&[T]> {
        self.params.get(index).and_then(|g| g.as_deref())
    }

    pub fn into_params(self) -> Vec<Option<Vec<T>>> {
        self.params
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Graph { params, trainable: None, param_vars: vec![None; params.len()], nodes: Vec::new() }
    }

    /// Parameters whose mask entry is `false` are treated as constants.
    pub fn with_trainable(params: &'p [Tensor<T>], trainable: &'p [bool]) -> Self {
        assert_eq!(params.len(), trainable.len());
        Graph { trainable: Some(trainable), ..Graph::new(params) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let n = &self.nodes[v.0];
        match (&n.value, &n.op) {
            (Some(val), _) => val,
            (None, Op::Param(i)) => self.params[*i].values(),
            _ => unreachable!("node without value"),
        }
    }

    /// A constant (or, with `requires_grad`, differentiable) leaf.
    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<T>, requires_grad: bool) -> Var {
        assert_eq!(rows * cols, values.len(), "input shape mismatch");
        self.push(rows, cols, values, Op::Input, requires_grad)
    }

    /// Leaf for model parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let (rows, cols) = self.params[index].matrix_dims();
        let requires_grad = self.trainable.is_none_or(|m| m[index]);
        self.nodes.push(Node { rows, cols, value: None, op: Op::Param(index), requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    /// Gathers rows `ids` of `table`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let (rows, cols) = self.dims(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            let id = id as usize;
            assert!(id < rows, "embedding id {id} out of range {rows}");
            out.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        let rg = self.rg(table);
        self.push(ids.len(), cols, out, Op::Embed { table, ids: ids.to_vec() }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "add shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(a) || self.rg(b);
        self.push(r, c, out, Op::Add(a, b), rg)
    }

    /// Adds the single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(b), (1, c), "add_row shape mismatch");
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| *x + *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(r, c, out, Op::AddRow(a, b), rg)
    }

    /// `a [n,k] · b [k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, self.value(a), k, 1, self.value(b), m, 1, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(n, m, out, Op::MatMul(a, b), rg)
    }

    /// `a [n,k] · bᵀ` for `b [m,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_t inner dimension mismatch");
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, self.value(a), k, 1, self.value(b), 1, k, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(n, m, out, Op::MatMulT(a, b), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.max(T::zero())).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(a);
        self.push(r, c, out, Op::Relu(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let st = T::from_f64(s);
        let out = self.value(a).iter().map(|x| *x * st).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(a);
        self.push(r, c, out, Op::Scale(a, s), rg)
    }

    /// Row-wise layer normalisation with gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gain), (1, c));
        assert_eq!(self.dims(bias), (1, c));
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(r * c);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        for row in xv.chunks(c) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(T::from_f64(rs));
            for (j, v) in row.iter().enumerate() {
                let h = T::from_f64((v.as_f64() - mean) * rs);
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Multi-head scaled dot-product attention over `spans`.
    ///
    /// `key_mask[j] == true` excludes key row `j`. With `causal`, query `i`
    /// of a span sees only keys at relative positions `<= i`. Rows of the
    /// output not covered by any span are zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: Vec<AttnSpan>,
        causal: bool,
        key_mask: Vec<bool>,
    ) -> Var {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        assert_eq!(d, dk);
        assert_eq!(self.dims(v), (nk, d));
        assert_eq!(key_mask.len(), nk);
        assert!(heads > 0 && d % heads == 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); nq * d];
        let mut offsets = Vec::with_capacity(spans.len());
        let total: usize = spans.iter().map(|s| heads * s.q.len() * s.k.len()).sum();
        let mut probs = vec![T::zero(); total];
        let mut off = 0;
        let mut scores = Vec::new();
        for s in &spans {
            offsets.push(off);
            let (ql, kl) = (s.q.len(), s.k.len());
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..ql {
                    let qi = &qv[(s.q.start + i) * d..][cols.clone()];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..kl {
                        let kj = s.k.start + j;
                        if key_mask[kj] || (causal && j > i) {
                            scores.push(f64::NEG_INFINITY);
                            continue;
                        }
                        let kr = &kv[kj * d..][cols.clone()];
                        let dot: f64 = qi.iter().zip(kr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        let sc = dot * scale;
                        max = max.max(sc);
                        scores.push(sc);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                    let prow = &mut probs[off + (h * ql + i) * kl..][..kl];
                    let orow = &mut out[(s.q.start + i) * d..][cols.clone()];
                    for j in 0..kl {
                        let p = (scores[j] - max).exp() / z;
                        prow[j] = T::from_f64(p);
                        if p > 0.0 {
                            let pt = T::from_f64(p);
                            let vr = &vv[(s.k.start + j) * d..][cols.clone()];
                            for (o, x) in orow.iter_mut().zip(vr) {
                                *o = *o + pt * *x;
                            }
                        }
                    }
                }
            }
            off += heads * ql * kl;
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let data = AttnData { q, k, v, heads, spans, probs, offsets };
        self.push(nq, d, out, Op::Attention(Box::new(data)), rg)
    }

    /// Attention weights of an attention node, per span: `[heads][q][k]`
    /// flattened, plus the span list.
    pub fn attention_probs(&self, v: Var) -> Option<(&[AttnSpan], &[T], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention(a) => Some((&a.spans, &a.probs, a.heads)),
            _ => None,
        }
    }

    /// Weighted token cross-entropy: `Σ_r w_r · (−log softmax(logits_r)[t_r])`.
    /// Rows whose target is `None` are ignored. Accumulates in 64-bit.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<u32>>, weights: Vec<f64>) -> Var {
        let (r, c) = self.dims(logits);
        assert_eq!(targets.len(), r);
        assert_eq!(weights.len(), r);
        let lv = self.value(logits);
        let mut row_nll = vec![0.0; r];
        let mut total = 0.0;
        for (i, row) in lv.chunks(c).enumerate() {
            let Some(t) = targets[i] else { continue };
            assert!((t as usize) < c, "target id out of range");
            let lse = log_sum_exp(row.iter().map(|x| x.as_f64()));
            row_nll[i] = lse - row[t as usize].as_f64();
            total += weights[i] * row_nll[i];
        }
        let rg = self.rg(logits);
        let data = CeData { logits, targets, weights, row_nll, total };
        self.push(1, 1, vec![T::from_f64(total)], Op::CrossEntropy(Box::new(data)), rg)
    }

    /// Per-row NLL of a cross-entropy node (0 for ignored rows).
    pub fn row_nll(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy(d) => Some(&d.row_nll),
            _ => None,
        }
    }

    /// The 64-bit value of a scalar node, exact for loss nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        match &self.nodes[v.0].op {
            Op::CrossEntropy(d) => d.total,
            Op::WeightedSum(terms) => terms.iter().map(|(t, w)| w * self.scalar(*t)).sum(),
            _ => {
                assert_eq!(self.dims(v), (1, 1), "scalar() on a non-scalar node");
                self.value(v)[0].as_f64()
            }
        }
    }

    /// `Σ w_i · x_i` over same-shape nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty());
        let (r, c) = self.dims(terms[0].0);
        let mut out = vec![T::zero(); r * c];
        for (v, w) in &terms {
            assert_eq!(self.dims(*v), (r, c), "weighted_sum shape mismatch");
            let wt = T::from_f64(*w);
            for (o, x) in out.iter_mut().zip(self.value(*v)) {
                *o = *o + wt * *x;
            }
        }
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        self.push(r, c, out, Op::WeightedSum(terms), rg)
    }

    /// One output row per group: the mean of the listed rows of `x`.
    pub fn mean_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let (_, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![T::zero(); groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "mean over an empty group");
            let inv = 1.0 / rows.len() as f64;
            for j in 0..c {
                let s: f64 = rows.iter().map(|&r| xv[r * c + j].as_f64()).sum();
                out[g * c + j] = T::from_f64(s * inv);
            }
        }
        let rg = self.rg(x);
        let n = groups.len();
        self.push(n, c, out, Op::MeanRows { x, groups }, rg)
    }

    /// Scales every row to unit Euclidean norm. Panics on a zero row.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for row in xv.chunks(c) {
            let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            assert!(n > 0.0, "cannot normalise a zero vector");
            norms.push(T::from_f64(n));
            out.extend(row.iter().map(|v| T::from_f64(v.as_f64() / n)));
        }
        let rg = self.rg(x);
        self.push(r, c, out, Op::NormalizeRows { x, norms }, rg)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in &parts {
            let (r, c2) = self.dims(*p);
            assert_eq!(c, c2, "concat_rows column mismatch");
            rows += r;
            out.extend_from_slice(self.value(*p));
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(rows, c, out, Op::ConcatRows(parts), rg)
    }

    /// `−log(Σ_{j<positives} e^{l_j} / Σ_j e^{l_j})` for a single logit row.
    pub fn multi_positive_nce(&mut self, logits: Var, positives: usize) -> Var {
        let (r, n) = self.dims(logits);
        assert_eq!(r, 1, "multi_positive_nce expects one row");
        assert!(positives >= 1 && positives < n, "need >= 1 positive and >= 1 negative");
        let l: Vec<f64> = self.value(logits).iter().map(|x| x.as_f64()).collect();
        let lse_all = log_sum_exp(l.iter().copied());
        let lse_pos = log_sum_exp(l[..positives].iter().copied());
        let p_all = l.iter().map(|x| (x - lse_all).exp()).collect();
        let p_pos = l[..positives].iter().map(|x| (x - lse_pos).exp()).collect();
        let loss = lse_all - lse_pos;
        let rg = self.rg(logits);
        self.push(1, 1, vec![T::from_f64(loss)], Op::MultiPositiveNce { logits, positives, p_all, p_pos }, rg)
    }

    /// Reverse pass from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.dims(loss), (1, 1), "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut params: Vec<Option<Vec<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    params[*p] = Some(g);
                    continue;
                }
                Op::Embed { table, ids } => {
                    if self.rg(*table) {
                        let (r, c) = self.dims(*table);
                        let dst = grad_buf(&mut grads, *table, r * c);
                        for (row, &id) in ids.iter().enumerate() {
                            add_into(&mut dst[id as usize * c..(id as usize + 1) * c], &g[row * c..(row + 1) * c]);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.rg(*v) {
                            add_into(grad_buf(&mut grads, *v, g.len()), &g);
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*a) {
                        add_into(grad_buf(&mut grads, *a, g.len()), &g);
                    }
                    if self.rg(*b) {
                        let c = node.cols;
                        let dst = grad_buf(&mut grads, *b, c);
                        for row in g.chunks(c) {
                            add_into(dst, row);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (nr, k) = self.dims(*a);
                    let m = node.cols;
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        let dst = grad_buf(&mut grads, *a, nr * k);
                        // dA = dC · Bᵀ
                        T::gemm(nr, m, k, &g, m, 1, bv, 1, m, T::one(), dst);
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let dst = grad_buf(&mut grads, *b, k * m);
                        // dB = Aᵀ · dC
                        T::gemm(k, nr, m, av, 1, k, &g, m, 1, T::one(), dst);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (nr, k) = self.dims(*a);
                    let m = node.cols;
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        let dst = grad_buf(&mut grads, *a, nr * k);
                        // dA = dC · B
                        T::gemm(nr, m, k, &g, m, 1, bv, k, 1, T::one(), dst);
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let dst = grad_buf(&mut grads, *b, m * k);
                        // dB = dCᵀ · A
                        T::gemm(m, nr, k, &g, 1, m, av, k, 1, T::one(), dst);
                    }
                }
                Op::Relu(a) => {
                    if self.rg(*a) {
                        let av = self.value(*a);
                        let dst = grad_buf(&mut grads, *a, g.len());
                        for ((d, x), gi) in dst.iter_mut().zip(av).zip(&g) {
                            if *x > T::zero() {
                                *d = *d + *gi;
                            }
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if self.rg(*a) {
                        let st = T::from_f64(*s);
                        let dst = grad_buf(&mut grads, *a, g.len());
                        for (d, gi) in dst.iter_mut().zip(&g) {
                            *d = *d + st * *gi;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let c = node.cols;
                    if self.rg(*gain) {
                        let dst = grad_buf(&mut grads, *gain, c);
                        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dst[j] = dst[j] + grow[j] * hrow[j];
                            }
                        }
                    }
                    if self.rg(*bias) {
                        let dst = grad_buf(&mut grads, *bias, c);
                        for grow in g.chunks(c) {
                            add_into(dst, grow);
                        }
                    }
                    if self.rg(*x) {
                        let gv = self.value(*gain);
                        let dst = grad_buf(&mut grads, *x, g.len());
                        for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                let dh = (grow[j] * gv[j]).as_f64();
                                m1 += dh;
                                m2 += dh * hrow[j].as_f64();
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            let rs = rstd[r].as_f64();
                            let drow = &mut dst[r * c..(r + 1) * c];
                            for j in 0..c {
                                let dh = (grow[j] * gv[j]).as_f64();
                                let dx = rs * (dh - m1 - hrow[j].as_f64() * m2);
                                drow[j] = drow[j] + T::from_f64(dx);
                            }
                        }
                    }
                }
                Op::Attention(a) => self.attention_backward(a, &g, node.cols, &mut grads),
                Op::CrossEntropy(d) => {
                    if self.rg(d.logits) {
                        let (_, c) = self.dims(d.logits);
                        let lv = self.value(d.logits);
                        let up = g[0].as_f64();
                        let dst = grad_buf(&mut grads, d.logits, lv.len());
                        for (r, row) in lv.chunks(c).enumerate() {
                            let Some(t) = d.targets[r] else { continue };
                            let w = d.weights[r] * up;
                            if w == 0.0 {
                                continue;
                            }
                            let lse = log_sum_exp(row.iter().map(|x| x.as_f64()));
                            let drow = &mut dst[r * c..(r + 1) * c];
                            for j in 0..c {
                                let mut p = (row[j].as_f64() - lse).exp();
                                if j == t as usize {
                                    p -= 1.0;
                                }
                                drow[j] = drow[j] + T::from_f64(w * p);
                            }
                        }
                    }
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        if self.rg(*v) {
                            let wt = T::from_f64(*w);
                            let dst = grad_buf(&mut grads, *v, g.len());
                            for (d, gi) in dst.iter_mut().zip(&g) {
                                *d = *d + wt * *gi;
                            }
                        }
                    }
                }
                Op::MeanRows { x, groups } => {
                    if self.rg(*x) {
                        let (r, c) = self.dims(*x);
                        let dst = grad_buf(&mut grads, *x, r * c);
                        for (gi, rows) in groups.iter().enumerate() {
                            let inv = T::from_f64(1.0 / rows.len() as f64);
                            for &row in rows {
                                for j in 0..c {
                                    dst[row * c + j] = dst[row * c + j] + g[gi * c + j] * inv;
                                }
                            }
                        }
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    if self.rg(*x) {
                        let c = node.cols;
                        let y = node.value.as_ref().expect("value");
                        let dst = grad_buf(&mut grads, *x, g.len());
                        for (r, (grow, yrow)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                            let n = norms[r].as_f64();
                            for j in 0..c {
                                let dx = (grow[j].as_f64() - yrow[j].as_f64() * dot) / n;
                                dst[r * c + j] = dst[r * c + j] + T::from_f64(dx);
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.dims(*p);
                        if self.rg(*p) {
                            add_into(grad_buf(&mut grads, *p, r * c), &g[off..off + r * c]);
                        }
                        off += r * c;
                    }
                }
                Op::MultiPositiveNce { logits, positives, p_all, p_pos } => {
                    if self.rg(*logits) {
                        let up = g[0].as_f64();
                        let dst = grad_buf(&mut grads, *logits, p_all.len());
                        for j in 0..p_all.len() {
                            let pos = if j < *positives { p_pos[j] } else { 0.0 };
                            dst[j] = dst[j] + T::from_f64(up * (p_all[j] - pos));
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Grads { nodes: grads, params }
    }

    fn attention_backward(&self, a: &AttnData<T>, g: &[T], d: usize, grads: &mut [Option<Vec<T>>]) {
        let (q_rg, k_rg, v_rg) = (self.rg(a.q), self.rg(a.k), self.rg(a.v));
        let dh = d / a.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(a.q), self.value(a.k), self.value(a.v));
        let nq = self.dims(a.q).0;
        let nk = self.dims(a.k).0;
        let mut dq = vec![T::zero(); if q_rg { nq * d } else { 0 }];
        let mut dk = vec![T::zero(); if k_rg { nk * d } else { 0 }];
        let mut dv = vec![T::zero(); if v_rg { nk * d } else { 0 }];
        let mut ds = Vec::new();
        for (s, &off) in a.spans.iter().zip(&a.offsets) {
            let (ql, kl) = (s.q.len(), s.k.len());
            for h in 0..a.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..ql {
                    let qi_row = s.q.start + i;
                    let go = &g[qi_row * d..][cols.clone()];
                    let prow = &a.probs[off + (h * ql + i) * kl..][..kl];
                    ds.clear();
                    let mut sum = 0.0;
                    for j in 0..kl {
                        let p = prow[j].as_f64();
                        if p == 0.0 {
                            ds.push(0.0);
                            continue;
                        }
                        let vr = &vv[(s.k.start + j) * d..][cols.clone()];
                        let dp: f64 = go.iter().zip(vr).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                        ds.push(dp);
                        sum += p * dp;
                    }
                    for j in 0..kl {
                        let p = prow[j].as_f64();
                        if p == 0.0 {
                            continue;
                        }
                        let kj = s.k.start + j;
                        let dsj = T::from_f64(p * (ds[j] - sum) * scale);
                        if q_rg {
                            let kr = &kv[kj * d..][cols.clone()];
                            let dqr = &mut dq[qi_row * d..][cols.clone()];
                            for (x, y) in dqr.iter_mut().zip(kr) {
                                *x = *x + dsj * *y;
                            }
                        }
                        if k_rg {
                            let qr = &qv[qi_row * d..][cols.clone()];
                            let dkr = &mut dk[kj * d..][cols.clone()];
                            for (x, y) in dkr.iter_mut().zip(qr) {
                                *x = *x + dsj * *y;
                            }
                        }
                        if v_rg {
                            let pt = prow[j];
                            let dvr = &mut dv[kj * d..][cols.clone()];
                            for (x, y) in dvr.iter_mut().zip(go) {
                                *x = *x + pt * *y;
                            }
                        }
                    }
                }
            }
        }
        for (var, buf, on) in [(a.q, dq, q_rg), (a.k, dk, k_rg), (a.v, dv, v_rg)] {
            if on {
                let len = buf.len();
                add_into(grad_buf(grads, var, len), &buf);
            }
        }
    }
}

fn grad_buf<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let vals = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], vals).unwrap()
    }

    /// Compares analytic gradients with central differences (h = 1e-3) on
    /// every coordinate of every parameter.
    fn check<F>(params: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<'_, f64>) -> Var,
    {
        let h = 1e-3;
        let analytic: Vec<Vec<f64>> = {
            let mut g = Graph::new(&params);
            let loss = build(&mut g);
            let grads = g.backward(loss);
            (0..params.len())
                .map(|i| grads.param(i).map_or_else(|| vec![0.0; params[i].len()], <[f64]>::to_vec))
                .collect()
        };
        let eval = |ps: &[Tensor<f64>]| {
            let mut g = Graph::new(ps);
            let loss = build(&mut g);
            g.scalar(loss)
        };
        let mut ps = params.clone();
        for p in 0..ps.len() {
            for j in 0..ps[p].len() {
                let orig = ps[p].values()[j];
                ps[p].values_mut()[j] = orig + h;
                let up = eval(&ps);
                ps[p].values_mut()[j] = orig - h;
                let down = eval(&ps);
                ps[p].values_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[p][j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-3, "param {p} coord {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn ce_rows(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Var {
        let (r, c) = g.dims(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = (0..r).map(|_| Some(rng.random_range(0..c as u32))).collect();
        let weights = (0..r).map(|_| rng.random_range(0.2..1.0)).collect();
        g.cross_entropy(x, targets, weights)
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let params = vec![Tensor::new(vec![1, 1], vec![3.0f64]).unwrap()];
        let mut g = Graph::new(&params);
        let x = g.param(0);
        let y = g.matmul(x, x);
        let grads = g.backward(y);
        assert_eq!(grads.param(0).unwrap(), &[6.0]);
    }

    #[test]
    fn dense_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![random(3, 4, &mut rng), random(4, 5, &mut rng), random(1, 5, &mut rng), random(5, 4, &mut rng)];
        check(params, |g| {
            let (a, w, b, m) = (g.param(0), g.param(1), g.param(2), g.param(3));
            let x = g.matmul(a, w);
            let x = g.add_row(x, b);
            let x = g.relu(x);
            let y = g.matmul_t(a, m);
            let y = g.scale(y, 0.7);
            let z = g.concat_rows(vec![x, y]);
            let l1 = ce_rows(g, z, 3);
            let x2 = g.add(x, x);
            let l2 = ce_rows(g, x2, 4);
            g.weighted_sum(vec![(l1, 1.0), (l2, 0.5)])
        });
    }

    #[test]
    fn embedding_and_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gain = Tensor::new(vec![6], (0..6).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap();
        let params = vec![random(5, 6, &mut rng), gain, random(1, 6, &mut rng)];
        check(params, |g| {
            let table = g.param(0);
            let x = g.embed(table, &[0, 3, 3, 1]);
            let (gn, bs) = (g.param(1), g.param(2));
            let y = g.layer_norm(x, gn, bs);
            ce_rows(g, y, 5)
        });
    }

    #[test]
    fn attention_with_spans_causality_and_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![random(5, 8, &mut rng), random(7, 8, &mut rng), random(7, 8, &mut rng)];
        check(params, |g| {
            let (q, k, v) = (g.param(0), g.param(1), g.param(2));
            let spans = vec![AttnSpan { q: 0..2, k: 0..4 }, AttnSpan { q: 2..5, k: 4..7 }];
            let mut mask = vec![false; 7];
            mask[1] = true;
            let a = g.attention(q, k, v, 2, spans.clone(), false, mask);
            let self_spans = vec![AttnSpan { q: 0..3, k: 0..3 }, AttnSpan { q: 3..5, k: 3..5 }];
            let c = g.attention(q, q, q, 4, self_spans, true, vec![false; 5]);
            let l1 = ce_rows(g, a, 6);
            let l2 = ce_rows(g, c, 7);
            g.weighted_sum(vec![(l1, 1.0), (l2, 1.0)])
        });
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = vec![random(4, 6, &mut rng), random(5, 6, &mut rng)];
        let mut g = Graph::new(&params);
        let (q, k) = (g.param(0), g.param(1));
        let mut mask = vec![false; 5];
        mask[4] = true;
        let a = g.attention(q, k, k, 3, vec![AttnSpan { q: 0..4, k: 0..5 }], true, mask);
        let (spans, probs, heads) = g.attention_probs(a).unwrap();
        assert_eq!(heads, 3);
        assert_eq!(probs.len(), 3 * 4 * 5);
        for (i, row) in probs.chunks(5).enumerate() {
            let qi = i % 4;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().enumerate().all(|(j, &p)| (j <= qi && j != 4) || p == 0.0));
        }
        assert_eq!(spans.len(), 1);
    }

    #[test]
    fn pooling_normalisation_and_multi_positive_nce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![random(6, 4, &mut rng)];
        check(params, |g| {
            let x = g.param(0);
            let pooled = g.mean_rows(x, vec![vec![0, 1], vec![2], vec![3, 4, 5], vec![1, 5]]);
            let u = g.normalize_rows(pooled);
            let anchor = g.mean_rows(u, vec![vec![0]]);
            let others = g.mean_rows(u, vec![vec![1], vec![2], vec![3]]);
            let sims = g.matmul_t(anchor, others);
            let logits = g.scale(sims, 1.0 / 0.3);
            g.multi_positive_nce(logits, 2)
        });
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = vec![random(2, 3, &mut rng), random(3, 3, &mut rng)];
        let mask = [false, true];
        let mut g = Graph::with_trainable(&params, &mask);
        let (a, w) = (g.param(0), g.param(1));
        let y = g.matmul(a, w);
        let loss = ce_rows(&mut g, y, 1);
        let grads = g.backward(loss);
        assert!(grads.param(0).is_none());
        assert!(grads.param(1).is_some());
    }

    #[test]
    fn nce_single_positive_pair_with_equal_logits_is_ln2() {
        let params: Vec<Tensor<f64>> = vec![];
        let mut g = Graph::new(&params);
        let l = g.input(1, 2, vec![0.3, 0.3], false);
        let loss = g.multi_positive_nce(l, 1);
        assert!((g.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
