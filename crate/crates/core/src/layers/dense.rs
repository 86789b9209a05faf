use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::linalg::{gram_residual, orthogonal_init_with, Matrix};
use crate::scalar::Real;

/// Bias-free fully connected layer `a = W h`, `h' = σ(a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    /// `out × in`.
    pub weight: Matrix<T>,
    pub activation: Activation,
    pub dropout: f64,
    /// Set by orthogonalization, cleared by any update.
    pub orthogonalized: bool,
}

impl<T: Real> DenseLayer<T> {
    pub fn new(weight: Matrix<T>, activation: Activation) -> Self {
        DenseLayer {
            weight,
            activation,
            dropout: 0.0,
            orthogonalized: false,
        }
    }

    pub fn orthogonal<R: Rng + ?Sized>(out: usize, inp: usize, activation: Activation, rng: &mut R) -> Self {
        DenseLayer {
            weight: orthogonal_init_with(out, inp, rng),
            activation,
            dropout: 0.0,
            orthogonalized: true,
        }
    }

    /// He-normal Gaussian initialization, `N(0, 2 / in)`.
    pub fn gaussian<R: Rng + ?Sized>(out: usize, inp: usize, activation: Activation, rng: &mut R) -> Self {
        let std = T::lit((2.0 / inp as f64).sqrt());
        let weight = Array2::from_shape_fn((out, inp), |_| T::sample_normal(rng) * std);
        DenseLayer::new(weight, activation)
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    /// Linear part on a batch (rows are samples): `input · Wᵀ`.
    pub fn linear(&self, input: &Array2<T>) -> Result<Array2<T>> {
        if input.ncols() != self.in_features() {
            return Err(Error::dimension("dense_forward", input.shape(), self.weight.shape()));
        }
        Ok(input.dot(&self.weight.t()))
    }

    /// Returns `(pre, post)`; the mask, when given, multiplies the activation.
    pub fn forward(&self, input: &Array2<T>, mask: Option<&Array2<T>>) -> Result<(Array2<T>, Array2<T>)> {
        let pre = self.linear(input)?;
        let mut post = self.activation.apply(&pre);
        if let Some(m) = mask {
            if m.shape() != post.shape() {
                return Err(Error::dimension("dropout mask", m.shape(), post.shape()));
            }
            post *= m;
        }
        Ok((pre, post))
    }

    /// `Wᵀ s` per sample: `signal · W`. No activation derivative is applied.
    pub fn adjoint(&self, signal: &Array2<T>) -> Result<Array2<T>> {
        if signal.ncols() != self.out_features() {
            return Err(Error::dimension("dense_adjoint", signal.shape(), self.weight.shape()));
        }
        Ok(signal.dot(&self.weight))
    }

    /// Batch-summed outer product `Σ_b s_b x_bᵀ`.
    pub fn outer(signal: &Array2<T>, pre_synaptic: &Array2<T>) -> Array2<T> {
        signal.t().dot(pre_synaptic)
    }

    pub fn gram_residual(&self) -> T {
        gram_residual(&self.weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_passes_input() {
        let layer = DenseLayer::new(Matrix::<f64>::eye(2), Activation::Identity);
        let (pre, post) = layer.forward(&array![[1.0, 1.0]], None).unwrap();
        assert_eq!(pre, array![[1.0, 1.0]]);
        assert_eq!(post, pre);
        let layer = DenseLayer::new(Matrix::<f64>::eye(2), Activation::Relu);
        let (_, post) = layer.forward(&array![[-1.0, 2.0]], None).unwrap();
        assert_eq!(post, array![[0.0, 2.0]]);
    }

    #[test]
    fn tanh_forward_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = DenseLayer::<f64>::gaussian(4, 6, Activation::Tanh, &mut rng);
        let x = Array2::from_shape_fn((3, 6), |(b, i)| (b as f64 - 1.0) * 0.3 + i as f64 * 0.1);
        let (_, post) = layer.forward(&x, None).unwrap();
        for b in 0..3 {
            for o in 0..4 {
                let mut s = 0.0;
                for i in 0..6 {
                    s += layer.weight[[o, i]] * x[[b, i]];
                }
                assert!((post[[b, o]] - s.tanh()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_of_permutation_and_isometry() {
        let layer = DenseLayer::new(array![[0.0, 1.0], [1.0, 0.0]], Activation::Identity);
        assert_eq!(layer.adjoint(&array![[1.0, 0.0]]).unwrap(), array![[0.0, 1.0]]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = DenseLayer::<f64>::orthogonal(3, 7, Activation::Identity, &mut rng);
        let s = array![[0.4, -1.2, 2.0]];
        let back = layer.adjoint(&s).unwrap();
        let n0: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1: f64 = back.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n0 - n1).abs() < 1e-6);
    }

    #[test]
    fn adjoint_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = DenseLayer::<f64>::gaussian(5, 3, Activation::Identity, &mut rng);
        let s = Array2::from_shape_fn((2, 5), |(b, o)| (b * 5 + o) as f64 * 0.17 - 0.4);
        let got = layer.adjoint(&s).unwrap();
        for b in 0..2 {
            for i in 0..3 {
                let mut acc = 0.0;
                for o in 0..5 {
                    acc += layer.weight[[o, i]] * s[[b, o]];
                }
                assert!((got[[b, i]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let layer = DenseLayer::new(Matrix::<f64>::eye(2), Activation::Identity);
        assert!(layer.forward(&array![[1.0, 2.0, 3.0]], None).is_err());
        assert!(layer.adjoint(&array![[1.0]]).is_err());
    }
}
