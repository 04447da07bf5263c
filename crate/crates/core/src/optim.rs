//! Adam over the trainable entries of a parameter store.

use std::collections::HashMap;

use ndarray::{Array2, Zip};

use crate::autodiff::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Array2<T>, Array2<T>)>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8, 0.0)
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Frozen parameters are skipped even
    /// if a gradient is present.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let step_size = T::of(lr * bc2.sqrt() / bc1);
        let eps = T::of(self.eps * bc2.sqrt());
        let wd = T::of(lr * self.weight_decay);
        for (id, g) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
            });
            let w = store.get_mut(id);
            Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= step_size * m / (v.sqrt() + eps) + wd * *w;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::array;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", array![[3.0, -2.0]]);
        let mut adam = Adam::default();
        for _ in 0..500 {
            let grads = {
                let mut tape = Tape::with_params(&store);
                let w = tape.param(id);
                let sq = tape.mul(w, w);
                let l = tape.sum_all(sq);
                tape.backward(l)
            };
            adam.step(&mut store, &grads, 0.05);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", array![[1.0]]);
        store.set_trainable(id, false);
        let mut tape_store = store.clone();
        tape_store.set_trainable(id, true);
        let grads = {
            let mut tape = Tape::with_params(&tape_store);
            let w = tape.param(id);
            let l = tape.sum_all(w);
            tape.backward(l)
        };
        Adam::default().step(&mut store, &grads, 0.1);
        assert_eq!(store.get(id)[[0, 0]], 1.0);
    }
}
