//! SGD with momentum and the exponential-moving-average target update.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Heavy-ball SGD: `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

/// `target <- zeta * target + (1 - zeta) * online`, elementwise.
pub fn ema_update(target: Vec<&mut Tensor>, online: Vec<&Tensor>, zeta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::Config(format!("zeta must lie in [0, 1], got {zeta}")));
    }
    if target.len() != online.len() {
        return Err(Error::Config("online and target layouts differ".into()));
    }
    for (t, o) in target.into_iter().zip(online) {
        if t.shape() != o.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema",
                lhs: t.shape().to_vec(),
                rhs: o.shape().to_vec(),
            });
        }
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = zeta * *tv + (1.0 - zeta) * ov;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(vec![&mut p], std::slice::from_ref(&g)).unwrap();
        assert!((p.item() - 0.9).abs() < 1e-15);
        opt.step(vec![&mut p], std::slice::from_ref(&g)).unwrap();
        // v = 0.9 * 1 + 1 = 1.9
        assert!((p.item() - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let mut p = Tensor::scalar(0.3);
        let mut opt = Sgd::new(0.0, 0.9);
        for _ in 0..5 {
            opt.step(vec![&mut p], &[Tensor::scalar(2.0)]).unwrap();
        }
        assert_eq!(p.item(), 0.3);
    }

    #[test]
    fn ema_fixed_points() {
        let online = Tensor::scalar(2.0);
        let mut t = Tensor::scalar(-1.0);
        ema_update(vec![&mut t], vec![&online], 1.0).unwrap();
        assert_eq!(t.item(), -1.0);
        ema_update(vec![&mut t], vec![&online], 0.0).unwrap();
        assert_eq!(t.item(), 2.0);
        assert!(ema_update(vec![&mut t], vec![&online], 1.5).is_err());
    }
}
