//! First-order optimizers over a [`ParamStore`].

use ndarray::{Array2, Zip};

use crate::tensor::{Grads, ParamId, ParamStore};

pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &Grads);
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

/// Plain gradient descent. Parameters listed in `frozen` are never touched.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub frozen: Vec<ParamId>,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr, frozen: Vec::new() }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        if self.lr == 0.0 {
            return;
        }
        for id in params.ids().collect::<Vec<_>>() {
            if self.frozen.contains(&id) {
                continue;
            }
            let g = grads.get(id);
            Zip::from(params.get_mut(id)).and(g).for_each(|p, &gv| *p -= self.lr * gv);
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub frozen: Vec<ParamId>,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = params.zero_grads().0;
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            frozen: Vec::new(),
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        if self.lr == 0.0 {
            return;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for id in params.ids().collect::<Vec<_>>() {
            if self.frozen.contains(&id) {
                continue;
            }
            Zip::from(params.get_mut(id))
                .and(grads.get(id))
                .and(&mut self.m[id.0])
                .and(&mut self.v[id.0])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Clone, Debug)]
pub struct AdaGrad {
    pub lr: f64,
    pub eps: f64,
    pub frozen: Vec<ParamId>,
    accum: Vec<Array2<f64>>,
}

impl AdaGrad {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self::with_accumulator(params, lr, 0.0)
    }

    /// Starts every squared-gradient sum at `initial`, which caps the size of the first steps.
    pub fn with_accumulator(params: &ParamStore, lr: f64, initial: f64) -> Self {
        let mut accum = params.zero_grads().0;
        for a in &mut accum {
            a.fill(initial);
        }
        Self {
            lr,
            eps: 1e-10,
            frozen: Vec::new(),
            accum,
        }
    }
}

impl Optimizer for AdaGrad {
    fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        if self.lr == 0.0 {
            return;
        }
        let (lr, eps) = (self.lr, self.eps);
        for id in params.ids().collect::<Vec<_>>() {
            if self.frozen.contains(&id) {
                continue;
            }
            Zip::from(params.get_mut(id))
                .and(grads.get(id))
                .and(&mut self.accum[id.0])
                .for_each(|p, &g, acc| {
                    *acc += g * g;
                    *p -= lr * g / (acc.sqrt() + eps);
                });
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn quadratic_grads(params: &ParamStore, id: ParamId) -> Grads {
        let mut g = params.zero_grads();
        g.0[id.0] = params.get(id) * 2.0;
        g
    }

    #[test]
    fn optimizers_descend_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", array![[3.0, -2.0]]);
        let mut opts: Vec<Box<dyn Optimizer>> = vec![
            Box::new(Sgd::new(0.1)),
            Box::new(Adam::new(&store, 0.1)),
            Box::new(AdaGrad::new(&store, 0.5)),
        ];
        for opt in opts.iter_mut() {
            let mut p = store.clone();
            for _ in 0..300 {
                let g = quadratic_grads(&p, id);
                opt.step(&mut p, &g);
            }
            assert!(p.get(id).iter().all(|v| v.abs() < 0.05), "{:?}", p.get(id));
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("x", array![[3.0, -2.0]]);
        let g = quadratic_grads(&store, id);
        let before = store.clone();
        Adam::new(&store, 0.0).step(&mut store, &g);
        AdaGrad::new(&before, 0.0).step(&mut store, &g);
        Sgd::new(0.0).step(&mut store, &g);
        assert_eq!(store, before);
    }

    #[test]
    fn frozen_parameters_stay_fixed() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0]]);
        let b = store.add("b", array![[1.0]]);
        let mut g = store.zero_grads();
        g.0[a.0].fill(1.0);
        g.0[b.0].fill(1.0);
        let mut adam = Adam::new(&store, 0.1);
        adam.frozen.push(a);
        adam.step(&mut store, &g);
        assert_eq!(store.get(a)[[0, 0]], 1.0);
        assert!(store.get(b)[[0, 0]] < 1.0);
    }
}
