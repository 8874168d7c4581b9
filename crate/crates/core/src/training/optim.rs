use crate::diffmath::ParamStore;

/// Adaptive-moment optimizer with coupled weight decay and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: f64, clip: Option<f64>) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update from the gradients accumulated in `store`; returns the
    /// pre-clip gradient norm (including the decay term).
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> f64 {
        let grads: Vec<Vec<f64>> = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                let mut g = t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
                g.iter_mut().zip(t.data()).for_each(|(g, w)| *g += self.weight_decay * w);
                g
            })
            .collect();
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = store.get_mut(id).data_mut();
            for (i, g) in grads[k].iter().enumerate() {
                let g = g * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        norm
    }
}
