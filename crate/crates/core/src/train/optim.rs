use serde::{Deserialize, Serialize};

use crate::tensor::{Float, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam (or plain SGD) over the trainable parameters of a store. Moment
/// buffers are kept in `f64` regardless of parameter precision.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies accumulated gradients and clears them. Parameters without a
    /// gradient (frozen or unreachable) are left alone.
    pub fn step<T: Float>(&mut self, params: &mut ParamStore<T>) {
        self.t += 1;
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let Some(g) = t.grad().map(<[T]>::to_vec) else { continue };
            if !t.trainable() {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in t.data_mut().iter_mut().zip(&g) {
                        *w = T::from_f64(w.as_f64() - self.lr * g.as_f64());
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self.moments[i].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    for (k, w) in t.data_mut().iter_mut().enumerate() {
                        let gk = g[k].as_f64();
                        m[k] = b1 * m[k] + (1.0 - b1) * gk;
                        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                        let update = self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                        *w = T::from_f64(w.as_f64() - update);
                    }
                }
            }
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::<f32>::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap().with_trainable(true));
        let before = p.digest();
        p.by_name_mut("w").unwrap().accumulate_grad(&[0.0; 3]);
        Optimizer::new(OptimizerKind::Adam, 1e-3).step(&mut p);
        assert_eq!(before, p.digest());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::<f64>::new(vec![2], vec![1.0, 1.0]).unwrap().with_trainable(true));
        p.insert("frozen", Tensor::<f64>::filled(&[2], 1.0));
        p.by_name_mut("w").unwrap().accumulate_grad(&[3.0, -0.5]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        opt.step(&mut p);
        let w = p.by_name("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
        assert!(p.by_name("w").unwrap().grad().is_none());
        assert_eq!(p.by_name("frozen").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn sgd_follows_gradient() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::<f64>::filled(&[1], 1.0).with_trainable(true));
        p.by_name_mut("w").unwrap().accumulate_grad(&[2.0]);
        Optimizer::new(OptimizerKind::Sgd, 0.25).step(&mut p);
        assert_eq!(p.by_name("w").unwrap().data(), &[0.5]);
    }
}
