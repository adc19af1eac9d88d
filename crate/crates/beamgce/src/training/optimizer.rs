//! Root-mean-square gradient scaling and Adam over flat parameter sets.

use ndarray::prelude::*;

/// RMSProp-style update: `v = decay*v + (1-decay)*g^2`,
/// `p -= lr * g / sqrt(v + eps)`.
///
/// Epsilon sits inside the square root, so coordinates with tiny
/// accumulated curvature take steps proportional to their gradient instead
/// of fixed-magnitude sign steps. This keeps the very first updates of a
/// run well behaved.
#[derive(Debug, Clone)]
pub struct RmsProp {
    sq: Vec<ArrayD<f64>>,
    pub decay: f64,
    pub eps: f64,
}

impl RmsProp {
    pub fn new_for(params: &[ArrayViewD<'_, f64>]) -> Self {
        Self {
            sq: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            decay: 0.99,
            eps: 1e-8,
        }
    }

    /// Drop all accumulated state (the critic-optimizer reset option).
    pub fn reset(&mut self) {
        for s in &mut self.sq {
            s.fill(0.0);
        }
    }

    pub fn step(&mut self, params: &mut [ArrayViewMutD<'_, f64>], grads: &[ArrayD<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.sq.len());
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.sq) {
            ndarray::Zip::from(p)
                .and(g)
                .and(s)
                .for_each(|p, &g, s| {
                    *s = self.decay * *s + (1.0 - self.decay) * g * g;
                    *p -= lr * g / (*s + self.eps).sqrt();
                });
        }
    }
}

/// Adam with bias correction, used for LOS-predictor training.
#[derive(Debug, Clone)]
pub struct AdamOpt {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamOpt {
    pub fn new_for(params: &[ArrayViewD<'_, f64>]) -> Self {
        Self {
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [ArrayViewMutD<'_, f64>], grads: &[ArrayD<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t);
        let b2c = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= lr * (*m / b1c) / ((*v / b2c).sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_moves_against_gradient_and_resets() {
        let mut p = ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0f64);
        let g = vec![ArrayD::from_elem(ndarray::IxDyn(&[3]), 2.0f64)];
        let mut opt = RmsProp::new_for(&[p.view()]);
        let before = p[[0]];
        opt.step(&mut [p.view_mut()], &g, 0.1);
        assert!(p[[0]] < before);
        opt.reset();
        let mut opt2 = RmsProp::new_for(&[p.view()]);
        let mut p2 = p.clone();
        opt.step(&mut [p.view_mut()], &g, 0.1);
        opt2.step(&mut [p2.view_mut()], &g, 0.1);
        assert_eq!(p, p2);
    }
}
