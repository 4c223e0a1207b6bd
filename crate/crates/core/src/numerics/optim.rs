use crate::numerics::{ParamId, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 gradient clip; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 0.1,
        }
    }
}

/// Adam moments with weight decay applied directly to the weights rather
/// than through the gradient.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = |_| Vec::new();
        Self {
            cfg,
            step: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter and clears the
    /// accumulated gradients. `lr_scale` lets callers give parameter groups
    /// their own learning rate.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr_scale: impl Fn(&str) -> f64) {
        self.step += 1;
        let c = self.cfg;
        let ids: Vec<ParamId> = store.ids().collect();
        let mut clip = 1.0;
        if c.clip_norm > 0.0 {
            let norm: f64 = ids
                .iter()
                .filter_map(|&id| {
                    store
                        .get(id)
                        .grad()
                        .filter(|_| store.get(id).requires_grad())
                })
                .flat_map(|g| g.iter().map(|x| x.f64() * x.f64()))
                .sum::<f64>()
                .sqrt();
            if norm > c.clip_norm {
                clip = c.clip_norm / (norm + 1e-6);
            }
        }
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in ids {
            let scale = lr_scale(store.name(id));
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let n = t.numel();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.len() != n {
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            let grad: Vec<f64> = t
                .grad()
                .map(|g| g.iter().map(|x| x.f64() * clip).collect())
                .unwrap_or_else(|| vec![0.0; n]);
            let lr = c.lr * scale;
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut x = w.f64();
                x -= lr * c.weight_decay * x;
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *w = T::lit(x);
            }
            t.zero_grad();
        }
    }
}
