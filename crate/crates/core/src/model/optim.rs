use super::graph::Grads;
use super::tensor::{Element, Tensor};
use super::ModelError;

/// Per-parameter gradient accumulator in f64. `None` marks parameters that
/// received no gradient (frozen or unused).
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Gradients { grads: vec![None; num_params] }
    }

    pub fn accumulate<T: Element>(&mut self, grads: Grads<T>) {
        for (slot, g) in self.grads.iter_mut().zip(grads.into_params()) {
            let Some(g) = g else { continue };
            let acc = slot.get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, x) in acc.iter_mut().zip(&g) {
                *a += x.as_f64();
            }
        }
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.grads.get(index)?.as_deref()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn check_finite(&self, names: &[String]) -> Result<(), ModelError> {
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(ModelError::NonFinite { param: names[i].clone() });
                }
            }
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }
}

/// Adam with bias correction. Parameters without a gradient are left
/// untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new<T: Element>(params: &[Tensor<T>]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: vec![0; params.len()],
        }
    }

    pub fn step<T: Element>(&mut self, params: &mut [Tensor<T>], grads: &Gradients, lr: f64) {
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.values_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
    }
}
