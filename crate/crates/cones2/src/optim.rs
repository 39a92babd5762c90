//! Plain SGD and Adam over named parameter maps.

use crate::params::{GradMap, Params};
use crate::tensor::Tensor;
use indexmap::IndexMap;

/// Fixed-rate gradient descent, momentum 0.
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    /// `skip` names parameters to leave untouched (e.g. a frozen
    /// token-embedding table).
    pub fn step(&self, params: &mut Params, grads: &GradMap, skip: &[&str]) {
        for (name, t) in params.iter_mut() {
            if skip.contains(&name.as_str()) {
                continue;
            }
            if let Some(g) = grads.get(name) {
                t.axpy_in_place(-self.lr, g);
            }
        }
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn step(&mut self, params: &mut Params, grads: &GradMap) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, t) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(t.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(t.shape()));
            let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
            for ((p, mi), (vi, gi)) in t
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grads(params: &Params) -> GradMap {
        // f = sum(x^2), grad = 2x
        let mut g = GradMap::default();
        for (name, t) in params.iter() {
            let mut gt = t.clone();
            gt.scale_in_place(2.0);
            g.entries.insert(name.clone(), gt);
        }
        g
    }

    #[test]
    fn sgd_descends_quadratic() {
        let mut p = Params::new();
        p.insert("x", Tensor::from_vec(&[2], vec![1.0, -2.0]));
        let opt = Sgd::new(0.1);
        for _ in 0..100 {
            let g = quadratic_grads(&p);
            opt.step(&mut p, &g, &[]);
        }
        assert!(p.get("x").data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn sgd_skip_freezes_parameter() {
        let mut p = Params::new();
        p.insert("x", Tensor::from_vec(&[1], vec![1.0]));
        p.insert("frozen", Tensor::from_vec(&[1], vec![1.0]));
        let opt = Sgd::new(0.1);
        let g = quadratic_grads(&p);
        opt.step(&mut p, &g, &["frozen"]);
        assert_eq!(p.get("frozen").data()[0], 1.0);
        assert!(p.get("x").data()[0] < 1.0);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = Params::new();
        p.insert("x", Tensor::from_vec(&[2], vec![3.0, -5.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = quadratic_grads(&p);
            opt.step(&mut p, &g);
        }
        assert!(p.get("x").data().iter().all(|v| v.abs() < 1e-3));
    }
}
