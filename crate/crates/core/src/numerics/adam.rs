use super::{NumericsError, ParamStore};

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self::with_betas(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { learning_rate, beta1, beta2, eps, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every unfrozen parameter, then clears all gradients.
    ///
    /// Frozen parameters are skipped and left bit-identical. An unfrozen parameter
    /// without a gradient is an error and leaves the whole store untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NumericsError> {
        for (_, p) in store.iter() {
            if !p.frozen && p.tensor.grad().is_none() {
                return Err(NumericsError::MissingGrad(p.name.clone()));
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if p.frozen {
                p.tensor.zero_grad();
                continue;
            }
            let n = p.tensor.numel();
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
            for (((w, g), mi), vi) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
            p.tensor.zero_grad();
        }
        Ok(())
    }
}
