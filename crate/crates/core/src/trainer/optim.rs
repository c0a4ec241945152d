use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// SGD with Nesterov momentum:
///
/// ```text
/// v ← μ·v + g
/// p ← p − lr·(g + μ·v)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct NesterovSgd<T = f32> {
    momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> NesterovSgd<T> {
    /// Zero velocity for each parameter shape.
    pub fn new(momentum: f64, params: &[Tensor<T>]) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("train.momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(NesterovSgd {
            momentum: T::from_f64_lossy(momentum),
            velocity: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        sgd_nesterov_step(params, grads, &mut self.velocity, lr, self.momentum)
    }
}

pub fn sgd_nesterov_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Contract(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Contract(format!(
                "optimizer shapes differ: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    let lr = T::from_f64_lossy(lr);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi = *pi - lr * (gi + momentum * *vi);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = NesterovSgd::new(0.0, &p).unwrap();
        opt.step(&mut p, &[Tensor::scalar(2.0)], 0.1).unwrap();
        assert_eq!(p[0].item(), 0.8);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![Tensor::<f32>::new([3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut opt = NesterovSgd::new(0.9, &p).unwrap();
        for _ in 0..10 {
            opt.step(&mut p, &[Tensor::zeros([3])], 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_matches_scalar_recurrence() {
        let (lr, mu) = (0.1, 0.9);
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = NesterovSgd::new(mu, &p).unwrap();
        let (mut x, mut v) = (1.0f64, 0.0f64);
        for _ in 0..3 {
            let g = Tensor::scalar(2.0 * p[0].item());
            opt.step(&mut p, &[g], lr).unwrap();
            let gx = 2.0 * x;
            v = mu * v + gx;
            x -= lr * (gx + mu * v);
            assert_eq!(p[0].item(), x);
        }
        // 1 → 0.62 → 0.2224 → -0.108352 by hand.
        assert!((x - -0.108352).abs() < 1e-12, "{x}");
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = vec![Tensor::<f32>::zeros([2])];
        let mut opt = NesterovSgd::new(0.9, &p).unwrap();
        assert!(matches!(opt.step(&mut p, &[Tensor::zeros([3])], 0.1), Err(Error::Contract(_))));
        assert!(matches!(opt.step(&mut p, &[], 0.1), Err(Error::Contract(_))));
    }
}
