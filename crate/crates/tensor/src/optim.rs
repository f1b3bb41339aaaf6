use crate::error::{invalid, Result};
use crate::{Scalar, Tensor};

/// Momentum SGD: `v <- m * v + g; theta <- theta - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update using each parameter's accumulated `grad`, then
    /// clears the gradients. Parameters without a gradient are left untouched
    /// (their velocity still decays).
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor<T>>,
    {
        for (i, p) in params.into_iter().enumerate() {
            if self.velocity.len() <= i {
                self.velocity.push(vec![T::zero(); p.numel()]);
            }
            let v = &mut self.velocity[i];
            if v.len() != p.numel() {
                return Err(invalid(format!(
                    "parameter {i} changed size: velocity {} vs {}",
                    v.len(),
                    p.numel()
                )));
            }
            let grad = p.grad.take();
            match &grad {
                Some(g) => v.iter_mut().zip(g).for_each(|(vi, &gi)| *vi = self.momentum * *vi + gi),
                None => v.iter_mut().for_each(|vi| *vi = self.momentum * *vi),
            }
            let lr = self.lr;
            p.data_mut().iter_mut().zip(v.iter()).for_each(|(w, &vi)| *w -= lr * vi);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classical_momentum_update() {
        let mut p = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut opt = Sgd::new(0.1, 0.9);

        p.accumulate_grad(&[1.0, -1.0]).unwrap();
        opt.step([&mut p]).unwrap();
        // v = g; theta = theta - 0.1 g
        assert!((p.data()[0] - 0.9).abs() < 1e-12);
        assert!((p.data()[1] - 2.1).abs() < 1e-12);
        assert!(p.grad.is_none());

        p.accumulate_grad(&[1.0, -1.0]).unwrap();
        opt.step([&mut p]).unwrap();
        // v = 0.9 * 1 + 1 = 1.9
        assert!((p.data()[0] - (0.9 - 0.19)).abs() < 1e-12);
        assert!((p.data()[1] - (2.1 + 0.19)).abs() < 1e-12);
    }

    #[test]
    fn gradient_descent_minimises_quadratic() {
        let mut p = Tensor::<f64>::new(&[1], vec![5.0]).unwrap().with_grad();
        let mut opt = Sgd::new(0.05, 0.5);
        for _ in 0..200 {
            let g = 2.0 * p.data()[0];
            p.accumulate_grad(&[g]).unwrap();
            opt.step([&mut p]).unwrap();
        }
        assert!(p.data()[0].abs() < 1e-6);
    }
}
