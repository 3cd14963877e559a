use crate::autodiff::{Gradients, Matrix};
use crate::model::{ParamId, ParamStore};

/// Adaptive moment estimation over a fixed set of parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    ids: Vec<ParamId>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, lr: f64) -> Self {
        let zeros: Vec<Matrix> = ids
            .iter()
            .map(|&id| Matrix::zeros(store.value(id).raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            ids,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One update; parameters absent from `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.param(id.index()) else {
                continue;
            };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let w = store.value_mut(id);
            ndarray::Zip::from(w)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::Submodule;
    use ndarray::array;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Submodule::Encoder, array![[3.0, -2.0]]);
        let mut adam = Adam::new(&store, vec![id], 0.05);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let x = store.var(&mut tape, id);
            let sq = tape.mul(x, x);
            let value = tape.value(sq).sum();
            let ones = Matrix::ones((1, 2));
            let loss = tape.scalar_fn(value, vec![(sq, ones)]);
            let grads = tape.backward(loss);
            adam.step(&mut store, &grads);
        }
        assert!(store.value(id).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Submodule::Encoder, array![[1.0]]);
        let other = store.add("y", Submodule::Adversary, array![[5.0]]);
        let mut adam = Adam::new(&store, vec![id], 1e-3);
        let mut tape = Tape::new();
        let x = store.var(&mut tape, id);
        let y = store.var(&mut tape, other);
        let s = tape.add(x, y);
        let value = tape.value(s)[[0, 0]];
        let loss = tape.scalar_fn(value, vec![(s, array![[4.0]])]);
        adam.step(&mut store, &tape.backward(loss));
        assert!((store.value(id)[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-9);
        assert_eq!(store.value(other)[[0, 0]], 5.0);
    }
}
