use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Non-overlapping average pooling scaled by `√(ph·pw)`, so that every
/// operator row has unit norm and `P Pᵀ = I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLayer {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PoolLayer {
    pub fn new(channels: usize, height: usize, width: usize, ph: usize, pw: usize) -> Result<Self> {
        if ph == 0 || pw == 0 || channels == 0 {
            return Err(Error::Input("pooling window and channels must be positive".into()));
        }
        if height % ph != 0 || width % pw != 0 {
            return Err(Error::dimension("pool_forward", &[height, width], &[ph, pw]));
        }
        Ok(PoolLayer {
            channels,
            height,
            width,
            ph,
            pw,
        })
    }

    pub fn scale(&self) -> f64 {
        ((self.ph * self.pw) as f64).sqrt()
    }

    pub fn out_height(&self) -> usize {
        self.height / self.ph
    }

    pub fn out_width(&self) -> usize {
        self.width / self.pw
    }

    pub fn in_features(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_features(&self) -> usize {
        self.channels * self.out_height() * self.out_width()
    }

    /// Output index fed by each input index.
    fn target(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.out_height() + y / self.ph) * self.out_width() + x / self.pw
    }

    pub fn forward<T: Real>(&self, input: &Array2<T>) -> Result<Array2<T>> {
        if input.ncols() != self.in_features() {
            return Err(Error::dimension(
                "pool_forward",
                input.shape(),
                &[self.channels, self.height, self.width],
            ));
        }
        let w = T::lit(1.0 / self.scale());
        let mut out = Array2::zeros((input.nrows(), self.out_features()));
        for (src, mut dst) in input.rows().into_iter().zip(out.rows_mut()) {
            let mut i = 0;
            for c in 0..self.channels {
                for y in 0..self.height {
                    for x in 0..self.width {
                        dst[self.target(c, y, x)] += src[i] * w;
                        i += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn adjoint<T: Real>(&self, signal: &Array2<T>) -> Result<Array2<T>> {
        if signal.ncols() != self.out_features() {
            return Err(Error::dimension(
                "pool_adjoint",
                signal.shape(),
                &[self.channels, self.out_height(), self.out_width()],
            ));
        }
        let w = T::lit(1.0 / self.scale());
        let mut out = Array2::zeros((signal.nrows(), self.in_features()));
        for (src, mut dst) in signal.rows().into_iter().zip(out.rows_mut()) {
            let mut i = 0;
            for c in 0..self.channels {
                for y in 0..self.height {
                    for x in 0..self.width {
                        dst[i] = src[self.target(c, y, x)] * w;
                        i += 1;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_and_single_spike_windows() {
        let p = PoolLayer::new(1, 2, 2, 2, 2).unwrap();
        assert_eq!(p.forward(&array![[1.0, 1.0, 1.0, 1.0]]).unwrap(), array![[2.0]]);
        assert_eq!(p.forward(&array![[4.0, 0.0, 0.0, 0.0]]).unwrap(), array![[2.0]]);
    }

    #[test]
    fn non_divisible_extent_is_rejected() {
        assert!(PoolLayer::new(1, 5, 4, 2, 2).is_err());
    }

    #[test]
    fn adjoint_identity_and_row_orthogonality() {
        let p = PoolLayer::new(2, 4, 6, 2, 3).unwrap();
        let x = Array2::from_shape_fn((1, p.in_features()), |(_, i)| (i as f64 * 0.37).sin());
        let s = Array2::from_shape_fn((1, p.out_features()), |(_, i)| (i as f64 * 0.91).cos());
        let lhs = (p.forward(&x).unwrap() * &s).sum();
        let rhs = (p.adjoint(&s).unwrap() * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let round = p.forward(&p.adjoint(&s).unwrap()).unwrap();
        assert!((&round - &s).iter().all(|d| d.abs() < 1e-12));
    }
}
