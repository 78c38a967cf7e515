use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
    /// `v ← μ·v + g`, `θ ← θ − lr·v`, velocity starting at zero.
    SgdMomentum { lr: f32, momentum: f32 },
}

impl OptimizerKind {
    pub fn adam(lr: f32) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum(lr: f32, momentum: f32) -> Self {
        OptimizerKind::SgdMomentum { lr, momentum }
    }
}

/// Moment buffers for one parameter list.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            kind,
            first: zeros(),
            second,
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Velocity (SGD) or first moment (Adam) buffers.
    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    /// Updates `params` in place from `grads`. Gradients are not modified.
    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(shape_err(
                "optimizer_step",
                format!("{} moment buffers, {} params, {} grads", self.first.len(), params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(shape_err(
                    "optimizer_step",
                    format!("param {i}: {:?} vs grad {:?} vs moment {:?}", p.shape(), g.shape(), self.first[i].shape()),
                ));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, p) in params.iter_mut().enumerate() {
                    let g = grads[i].data();
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *x -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum { lr, momentum } => {
                for (i, p) in params.iter_mut().enumerate() {
                    let g = grads[i].data();
                    let vel = self.first[i].data_mut();
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        vel[j] = momentum * vel[j] + g[j];
                        *x -= lr * vel[j];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn minimize_square(kind: OptimizerKind, steps: usize) -> f32 {
        let mut x = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(kind, &[&x]);
        for _ in 0..steps {
            let g = Tensor::scalar(2.0 * x.data()[0]);
            opt.step(vec![&mut x], &[g]).unwrap();
        }
        x.data()[0]
    }

    #[test]
    fn adam_on_square_follows_the_scalar_recurrence() {
        // f64 recurrence for f(x) = x², x0 = 1, lr 1e-3: 0.560 after 500 steps,
        // 0.0207 after 2000. Adam moves about lr per step while far from the
        // optimum, so 500 steps cannot get below 0.5.
        let x500 = minimize_square(OptimizerKind::adam(1e-3), 500);
        assert!((x500 - 0.5605).abs() < 1e-3, "{x500}");
        let x2000 = minimize_square(OptimizerKind::adam(1e-3), 2000);
        assert!(x2000.abs() < 0.05, "{x2000}");
    }

    #[test]
    fn sgd_momentum_first_step() {
        let x = minimize_square(OptimizerKind::sgd_momentum(0.01, 0.9), 1);
        assert!((x - 0.98).abs() < 1e-7);
        // v2 = 0.9·2 + 1.96 = 3.76, x2 = 0.98 − 0.0376
        let x2 = minimize_square(OptimizerKind::sgd_momentum(0.01, 0.9), 2);
        assert!((x2 - 0.9424).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_for_sgd() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = OptimizerState::new(OptimizerKind::sgd_momentum(0.01, 0.9), &[&p]);
        for _ in 0..3 {
            opt.step(vec![&mut p], &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn step_counter_and_buffers() {
        let mut a = Tensor::zeros(&[2, 3]);
        let mut b = Tensor::zeros(&[4]);
        let mut opt = OptimizerState::new(OptimizerKind::adam(1e-3), &[&a, &b]);
        for n in 1..=4 {
            opt.step(vec![&mut a, &mut b], &[Tensor::full(&[2, 3], 1.0), Tensor::full(&[4], -1.0)]).unwrap();
            assert_eq!(opt.steps(), n);
        }
        assert_eq!(opt.first_moments()[0].shape(), &[2, 3]);
        assert_eq!(opt.first_moments()[1].shape(), &[4]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut a = Tensor::zeros(&[2]);
        let mut opt = OptimizerState::new(OptimizerKind::adam(1e-3), &[&a]);
        let err = opt.step(vec![&mut a], &[Tensor::zeros(&[3])]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(opt.step(vec![&mut a], &[]).is_err());
        assert_eq!(opt.steps(), 0);
    }
}
