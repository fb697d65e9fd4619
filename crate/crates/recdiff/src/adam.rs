//! Adam optimizer with bias correction and decoupled weight decay.

use ndarray::Array2;

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (lambda2), applied outside the moment estimates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    /// Moment buffers are allocated to match the store's current parameters.
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.ids().map(|id| Array2::zeros(store.value(id).raw_dim())).collect();
        let v = store.ids().map(|id| Array2::zeros(store.value(id).raw_dim())).collect();
        Self { cfg, step: 0, m, v }
    }

    /// One update over all parameters using the grads currently in the store.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let g = store.grad(id).clone();
            let m = &mut self.m[id.0];
            m.zip_mut_with(&g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            let v = &mut self.v[id.0];
            v.zip_mut_with(&g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let (m, v) = (&self.m[id.0], &self.v[id.0]);
            let p = store.value_mut(id);
            ndarray::Zip::from(p.view_mut())
                .and(m)
                .and(v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                });
            if c.weight_decay != 0.0 {
                let decay = c.lr * c.weight_decay;
                store.value_mut(id).mapv_inplace(|p| p - decay * p);
            }
        }
    }

    pub(crate) fn moments(&self) -> (&[Array2<f64>], &[Array2<f64>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore_moments(&mut self, m: Vec<Array2<f64>>, v: Vec<Array2<f64>>, step: u64) {
        self.m = m;
        self.v = v;
        self.step = step;
    }
}
