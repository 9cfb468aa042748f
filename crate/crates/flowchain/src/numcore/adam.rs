//! Adam optimizer over a `ParamStore`.

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, learning_rate: f64) -> AdamState {
        let first_moment = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                Tensor::zeros(t.rows(), t.cols())
            })
            .collect::<Vec<_>>();
        let second_moment = first_moment.clone();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment,
            second_moment,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// One bias-corrected Adam update. Parameters without an accumulated
    /// gradient are treated as having gradient zero (their moments decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(Error::NanGradient { param: store.name(id).to_string() });
            }
        }
        self.step = self.step + 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for id in store.ids() {
            let zero;
            let g = match grads.get(id) {
                Some(g) => g,
                None => {
                    let p = store.get(id);
                    zero = Tensor::zeros(p.rows(), p.cols());
                    &zero
                }
            };
            let m = &mut self.first_moment[id.index()];
            let v = &mut self.second_moment[id.index()];
            let p = store.get_mut(id);
            for ((pv, (mv, vv)), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: &[f64]) -> (ParamStore, super::super::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("theta", Tensor::row(v));
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = single_param(&[1.0, -2.0, 0.5]);
        let mut adam = AdamState::new(&store, 1e-2);
        let grads = Gradients::zeros(&store);
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -2.0, 0.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        // With bias correction the first update is lr * g/|g| (up to epsilon),
        // i.e. lr per coordinate against the gradient sign.
        let (mut store, id) = single_param(&[0.0, 0.0]);
        let mut adam = AdamState::new(&store, 1e-3);
        let mut grads = Gradients::zeros(&store);
        grads.accumulate(id, &Tensor::row(&[4.0, -0.25]));
        adam.step(&mut store, &grads).unwrap();
        let p = store.get(id).data();
        assert!((p[0] + 1e-3).abs() < 1e-6, "got {}", p[0]);
        assert!((p[1] - 1e-3).abs() < 1e-6, "got {}", p[1]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut store, id) = single_param(&[1.0]);
        let mut adam = AdamState::new(&store, 1e-3);
        let mut grads = Gradients::zeros(&store);
        grads.accumulate(id, &Tensor::row(&[f64::NAN]));
        let err = adam.step(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
    }

    #[test]
    fn two_hundred_steps_shrink_quadratic() {
        // Minimize |theta|^2 from theta0 = 1 with lr 1e-2; oracle is the same
        // scalar recursion run independently below.
        let (mut store, id) = single_param(&[1.0]);
        let mut adam = AdamState::new(&store, 1e-2);
        let mut norms = Vec::new();
        for _ in 0..200 {
            let theta = store.get(id).data()[0];
            let mut grads = Gradients::zeros(&store);
            grads.accumulate(id, &Tensor::row(&[2.0 * theta]));
            adam.step(&mut store, &grads).unwrap();
            norms.push(store.get(id).data()[0].abs());
        }
        let final_norm = *norms.last().unwrap();
        assert!(final_norm < 0.5, "final |theta| = {final_norm}");
        // Monotone decrease after warmup.
        let warmup = 10;
        for w in norms.windows(2).skip(warmup) {
            assert!(w[1] <= w[0] + 1e-12, "not monotone after warmup: {} -> {}", w[0], w[1]);
        }

        // Independent scalar recursion oracle.
        let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((th.abs() - final_norm).abs() < 1e-12, "oracle {th} vs impl {final_norm}");
    }
}
