//! Minimal first-order optimizers for the desk-scale training loops.

use super::matrix::Matrix;

/// Plain SGD step over parallel parameter/gradient lists.
pub fn sgd_step(params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads.iter()) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data().iter()) {
            *pv -= lr * gv;
        }
    }
}

/// Adam with bias correction; state matches the parameter list positionally.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn with_beta1(mut self, beta1: f64) -> Self {
        self.beta1 = beta1;
        self
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data().iter()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                let mh = *m / b1c;
                let vh = *v / b2c;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
