use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← momentum·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update. `grads[i]` belongs to the i-th parameter; `frozen[i]`
    /// parameters may have no gradient and are left alone. Nothing is
    /// modified when any gradient is missing or non-finite.
    pub fn step(&mut self, params: &mut Params, grads: &[Option<Tensor>], frozen: &[bool]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::LengthMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
            match g {
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::LengthMismatch(format!(
                        "gradient {:?} for `{name}` of shape {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                Some(g) if !g.is_finite() => return Err(Error::NonFiniteGradient(name.to_string())),
                None if !frozen.get(i).copied().unwrap_or(false) => {
                    return Err(Error::MissingGradient(name.to_string()))
                }
                _ => {}
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        }
        let (lr, mu) = (self.lr, self.momentum);
        for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> Params {
        let mut p = Params::new();
        p.push("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = single(0.7);
        let mut opt = Sgd::new(0.5, 0.9).unwrap();
        opt.step(&mut p, &[Some(Tensor::scalar(0.0))], &[false]).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn one_plain_step() {
        let mut p = single(1.0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        opt.step(&mut p, &[Some(Tensor::scalar(2.0))], &[false]).unwrap();
        assert!((p.get("w").unwrap().item() - 0.8).abs() < 1e-7);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = single(0.0);
        let mut opt = Sgd::new(1.0, 0.9).unwrap();
        opt.step(&mut p, &[Some(Tensor::scalar(1.0))], &[false]).unwrap();
        assert_eq!(p.get("w").unwrap().item(), -1.0);
        assert_eq!(opt.velocity()[0].item(), 1.0);
        opt.step(&mut p, &[Some(Tensor::scalar(1.0))], &[false]).unwrap();
        assert!((opt.velocity()[0].item() - 1.9).abs() < 1e-6);
        assert!((p.get("w").unwrap().item() + 2.9).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = single(1.0);
        p.push("b", Tensor::scalar(2.0));
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        let err = opt
            .step(&mut p, &[Some(Tensor::scalar(1.0)), Some(Tensor::scalar(f32::NAN))], &[false, false])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b"));
        assert_eq!(p.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn frozen_parameters_may_lack_gradients() {
        let mut p = single(1.0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        assert!(matches!(opt.step(&mut p, &[None], &[false]), Err(Error::MissingGradient(_))));
        opt.step(&mut p, &[None], &[true]).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.5).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
        assert!(Sgd::new(0.1, -0.1).is_err());
    }
}
