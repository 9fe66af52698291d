//! Gradient ascent with either a fixed step or per-parameter RMS scaling.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain stochastic gradient ascent.
    #[default]
    Sgd,
    /// Adam-style first/second moment scaling.
    Adam,
}

/// Optimizer state for one ordered list of parameter matrices.
#[derive(Clone, Debug)]
pub struct Ascent {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Ascent {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Moves each parameter along its gradient (ascent).
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) {
        assert_eq!(
            params.len(),
            grads.len(),
            "Ascent::step: parameter/gradient count"
        );
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.axpy(self.lr, g);
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads
                        .iter()
                        .map(|g| Matrix::zeros(g.rows(), g.cols()))
                        .collect();
                    self.v = self.m.clone();
                }
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let m = self.m[k].as_mut_slice();
                    let v = self.v[k].as_mut_slice();
                    for (j, (pj, &gj)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate()
                    {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        *pj += self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = Matrix::row_vector(&[1.0, -2.0]);
            let before = p.clone();
            let mut opt = Ascent::new(kind, 0.0);
            opt.step(vec![&mut p], &[Matrix::row_vector(&[3.0, 4.0])]);
            assert_eq!(p, before);
        }
    }

    #[test]
    fn ascends_a_concave_quadratic() {
        // maximize -(x - 2)^2
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut x = Matrix::scalar(-1.0);
            let mut opt = Ascent::new(kind, 0.05);
            for _ in 0..2000 {
                let g = Matrix::scalar(-2.0 * (x.item() - 2.0));
                opt.step(vec![&mut x], &[g]);
            }
            assert!((x.item() - 2.0).abs() < 1e-3, "{kind:?}: {}", x.item());
        }
    }
}
