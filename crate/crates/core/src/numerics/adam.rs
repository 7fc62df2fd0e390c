use crate::numerics::{ParamId, ParamStore};

/// Adam with an optional per-element update mask and cosine learning-rate decay.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    total_steps: usize,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// `total_steps` drives the cosine schedule; 0 keeps the rate constant.
    pub fn new(store: &ParamStore, lr: f64, total_steps: usize) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let progress = (self.step as f64 / self.total_steps as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// `mask(id)` may return per-element flags; entries flagged `false` are
    /// left bit-for-bit untouched, and so are their moment estimates.
    pub fn step<M>(&mut self, store: &mut ParamStore, mask: M)
    where
        M: Fn(ParamId) -> Option<Vec<bool>>,
    {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let allowed = mask(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, (w, g)) in tensor.values_mut().iter_mut().zip(&grad).enumerate() {
                if allowed.as_ref().is_some_and(|a| !a[i]) {
                    continue;
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn masked_entries_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 1.0]).with_requires_grad(true));
        store.get_mut(id).accumulate_grad(&[1.0, 1.0]);
        let mut adam = Adam::new(&store, 0.1, 0);
        adam.step(&mut store, |_| Some(vec![true, false]));
        let w = store.get(id).values();
        assert!(w[0] < 1.0);
        assert_eq!(w[1], 1.0);
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let store = ParamStore::new();
        let mut adam = Adam::new(&store, 1e-3, 4);
        assert_eq!(adam.current_lr(), 1e-3);
        adam.step = 4;
        assert!(adam.current_lr().abs() < 1e-18);
    }
}
