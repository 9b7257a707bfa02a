//! First-order optimizers over flat parameter vectors.

use crate::model::OptimizerKind;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam state size");
        assert_eq!(grad.len(), params.len(), "gradient size");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Optimizer selected by [`OptimizerKind`]; always minimizes.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(Adam::new(lr, n)),
            OptimizerKind::Sgd => Self::Sgd { lr },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Self::Adam(a) => a.step(params, grad),
            Self::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
        }
    }
}

/// Projects every value onto `[0, 1]`.
pub fn project_unit(values: &mut [f64]) {
    for v in values {
        *v = v.clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g)
        let mut a = Adam::new(0.01, 2);
        let mut p = [0.5, 0.5];
        a.step(&mut p, &[3.0, -0.2]);
        assert!((p[0] - 0.49).abs() < 1e-9);
        assert!((p[1] - 0.51).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut a = Adam::new(0.05, 1);
        let mut p = [3.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            a.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}
