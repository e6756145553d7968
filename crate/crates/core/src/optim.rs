use autodiff::ParamSet;
use serde::{Deserialize, Serialize};

/// Adam over a flat view of a [`ParamSet`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet, grad: &[f64]) {
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        for e in &mut params.entries {
            for x in e.value.data.iter_mut() {
                let gi = grad[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = self.m[i] / b1t;
                let vhat = self.v[i] / b2t;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
                i += 1;
            }
        }
    }
}

/// Plain gradient descent with L2 weight decay on every parameter.
pub fn sgd_step(params: &mut ParamSet, grad: &[f64], lr: f64, weight_decay: f64) {
    let mut i = 0;
    for e in &mut params.entries {
        for x in e.value.data.iter_mut() {
            *x -= lr * (grad[i] + weight_decay * *x);
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::Mat;

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamSet::new();
        ps.add("x", Mat::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1, 2);
        for _ in 0..500 {
            let g: Vec<f64> = ps.flat().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut ps, &g);
        }
        assert!(ps.flat().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn sgd_applies_decay() {
        let mut ps = ParamSet::new();
        ps.add("x", Mat::from_vec(1, 1, vec![1.0]));
        sgd_step(&mut ps, &[0.5], 0.1, 0.1);
        assert!((ps.flat()[0] - (1.0 - 0.1 * (0.5 + 0.1))).abs() < 1e-15);
    }
}
