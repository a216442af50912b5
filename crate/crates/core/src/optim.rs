//! Adam with decoupled weight decay.

use crate::nn::{Gradients, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(params: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        }
    }

    /// Updates only `ids`. Moments are kept per parameter, so parameters
    /// shared between phases (the encoder) accumulate a single history while
    /// each head's bias correction counts only its own updates.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, ids: &[ParamId]) {
        let (b1, b2) = (self.beta1, self.beta2);
        for &id in ids {
            let i = id.0;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let decay = 1.0 - self.learning_rate * self.weight_decay;
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in params
                .get_mut(id)
                .data
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = *w * decay - self.learning_rate * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::default();
        let a = store.add("a", vec![2], vec![1.0, -1.0]);
        let b = store.add("b", vec![1], vec![5.0]);
        let mut grads = store.zero_grads();
        grads.get_mut(a).copy_from_slice(&[3.0, -0.5]);
        grads.get_mut(b)[0] = 1.0;
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store, &grads, &[a]);
        let d = store.data(a);
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.data(b), &[5.0]);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut store = ParamStore::default();
        let a = store.add("a", vec![1], vec![2.0]);
        let grads = store.zero_grads();
        let mut opt = AdamW::new(&store, 0.1, 0.5);
        opt.step(&mut store, &grads, &[a]);
        assert!((store.data(a)[0] - 2.0 * 0.95).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::default();
        let a = store.add("a", vec![3], vec![4.0, -3.0, 1.0]);
        let mut opt = AdamW::new(&store, 0.05, 0.0);
        for _ in 0..2_000 {
            let mut grads = store.zero_grads();
            let g: Vec<f64> = store.data(a).iter().map(|w| 2.0 * (w - 0.5)).collect();
            grads.get_mut(a).copy_from_slice(&g);
            opt.step(&mut store, &grads, &[a]);
        }
        assert!(store.data(a).iter().all(|w| (w - 0.5).abs() < 1e-3));
    }
}
