use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel parametric ReLU over the last axis of a tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PRelu<T = f32> {
    pub alpha: Tensor<T>,
}

impl<T: Real> PRelu<T> {
    pub fn new(channels: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            alpha: Tensor::full(&[channels], T::from_f64(alpha))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        let c = *x.shape().last().unwrap_or(&0);
        if c != self.channels() {
            return shape_err(format!(
                "prelu has {} slopes, input has {c} channels",
                self.channels()
            ));
        }
        Ok(c)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.check(x)?;
        let alpha = self.alpha.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= T::default() {
                    v
                } else {
                    T::from_f64(alpha[i % c].to_f64() * v.to_f64())
                }
            })
            .collect();
        Tensor::new(x.shape(), data)
    }

    /// Gradients with respect to the pre-activation input and the slopes.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<f64>)> {
        let c = self.check(x)?;
        if grad_out.shape() != x.shape() {
            return shape_err(format!("prelu grad {:?} vs input {:?}", grad_out.shape(), x.shape()));
        }
        let alpha = self.alpha.data();
        let mut ga = vec![0.0f64; c];
        let gx = x
            .data()
            .iter()
            .zip(grad_out.data())
            .enumerate()
            .map(|(i, (&v, &g))| {
                if v >= T::default() {
                    g
                } else {
                    ga[i % c] += g.to_f64() * v.to_f64();
                    T::from_f64(alpha[i % c].to_f64() * g.to_f64())
                }
            })
            .collect();
        Ok((Tensor::new(x.shape(), gx)?, Tensor::new(&[c], ga)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn forward_cases() {
        let p = PRelu::<f64>::new(1, 0.25).unwrap();
        assert_eq!(p.forward(&t(&[0.0, 1.5, 3.0])).unwrap().data(), &[0.0, 1.5, 3.0]);
        assert_eq!(p.forward(&t(&[-2.0])).unwrap().data(), &[-0.5]);
        let relu = PRelu::<f64>::new(1, 0.0).unwrap();
        assert_eq!(relu.forward(&t(&[-3.0])).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_and_channel_check() {
        let p = PRelu::<f64>::new(2, 0.25).unwrap();
        let x = Tensor::new(&[2, 2], vec![1.0, -2.0, -1.0, 3.0]).unwrap();
        let g = Tensor::new(&[2, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let (gx, ga) = p.backward(&x, &g).unwrap();
        assert_eq!(gx.data(), &[1.0, 0.25, 0.5, 2.0]);
        assert_eq!(ga.data(), &[-2.0, -2.0]);
        assert!(p.forward(&Tensor::zeros(&[2, 3]).unwrap()).is_err());
    }
}
