//! Stride-1 2-D cross-correlation on channel-major flattened feature maps.
//!
//! Batches are `B × (C·H·W)` matrices; each row is one sample laid out as
//! `[c][y][x]`. All three linear maps (forward, input adjoint, kernel
//! adjoint) go through one patch-index table so they stay exact adjoints of
//! each other.

use ndarray::{Array2, Array4, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::bcop::Bcop;
use crate::layers::Activation;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Symmetric zero padding of the given width.
    Zero(usize),
    /// Periodic boundary; output keeps the input's spatial size.
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    /// Zero padding that preserves spatial size for odd kernels.
    pub fn same(in_ch: usize, out_ch: usize, height: usize, width: usize, k: usize) -> Self {
        ConvGeometry {
            in_ch,
            out_ch,
            height,
            width,
            kh: k,
            kw: k,
            padding: Padding::Zero(k / 2),
        }
    }

    pub fn circular(in_ch: usize, out_ch: usize, height: usize, width: usize, k: usize) -> Self {
        ConvGeometry {
            padding: Padding::Circular,
            ..Self::same(in_ch, out_ch, height, width, k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::Input(format!("degenerate convolution geometry {self:?}")));
        }
        let pad = match self.padding {
            Padding::Zero(p) => p,
            Padding::Circular => 0,
        };
        if self.height + 2 * pad < self.kh || self.width + 2 * pad < self.kw {
            return Err(Error::dimension(
                "conv_forward",
                &[self.height + 2 * pad, self.width + 2 * pad],
                &[self.kh, self.kw],
            ));
        }
        if self.padding == Padding::Circular && (self.kh > self.height || self.kw > self.width) {
            return Err(Error::Input("circular kernel larger than the feature map".into()));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        match self.padding {
            Padding::Zero(p) => self.height + 2 * p + 1 - self.kh,
            Padding::Circular => self.height,
        }
    }

    pub fn out_width(&self) -> usize {
        match self.padding {
            Padding::Zero(p) => self.width + 2 * p + 1 - self.kw,
            Padding::Circular => self.width,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    pub fn out_features(&self) -> usize {
        self.out_ch * self.out_height() * self.out_width()
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kh, self.kw]
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// `table[p * taps + t]` is the input spatial index read by output
    /// position `p` through kernel tap `t`.
    fn patch_table(&self) -> Vec<Option<usize>> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (h, w) = (self.height as isize, self.width as isize);
        let mut table = Vec::with_capacity(oh * ow * self.taps());
        for i in 0..oh {
            for j in 0..ow {
                for m in 0..self.kh {
                    for n in 0..self.kw {
                        let src = match self.padding {
                            Padding::Zero(p) => {
                                let y = (i + m) as isize - p as isize;
                                let x = (j + n) as isize - p as isize;
                                (y >= 0 && y < h && x >= 0 && x < w).then(|| (y * w + x) as usize)
                            }
                            Padding::Circular => {
                                let y = (i + m) as isize - (self.kh / 2) as isize;
                                let x = (j + n) as isize - (self.kw / 2) as isize;
                                Some((y.rem_euclid(h) * w + x.rem_euclid(w)) as usize)
                            }
                        };
                        table.push(src);
                    }
                }
            }
        }
        table
    }

    /// Patch matrix with rows `(b, p)` and columns `(c, m, n)`.
    fn im2col<T: Real>(&self, input: &ArrayView2<T>) -> Array2<T> {
        let table = self.patch_table();
        let (taps, positions, hw) = (self.taps(), self.positions(), self.height * self.width);
        let batch = input.nrows();
        let cols = self.in_ch * taps;
        let mut out = Array2::zeros((batch * positions, cols));
        for b in 0..batch {
            let row = input.row(b);
            for p in 0..positions {
                let mut dst = out.row_mut(b * positions + p);
                for t in 0..taps {
                    if let Some(src) = table[p * taps + t] {
                        for c in 0..self.in_ch {
                            dst[c * taps + t] = row[c * hw + src];
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds patch rows back into maps.
    fn col2im<T: Real>(&self, cols: &Array2<T>, batch: usize) -> Array2<T> {
        let table = self.patch_table();
        let (taps, positions, hw) = (self.taps(), self.positions(), self.height * self.width);
        let mut out = Array2::zeros((batch, self.in_features()));
        for b in 0..batch {
            let mut row = out.row_mut(b);
            for p in 0..positions {
                let src_row = cols.row(b * positions + p);
                for t in 0..taps {
                    if let Some(dst) = table[p * taps + t] {
                        for c in 0..self.in_ch {
                            row[c * hw + dst] += src_row[c * taps + t];
                        }
                    }
                }
            }
        }
        out
    }

    /// `B × (O·P)` channel-major → `(B·P) × O`.
    fn to_position_major<T: Real>(&self, signal: &Array2<T>) -> Array2<T> {
        let (positions, batch) = (self.positions(), signal.nrows());
        let mut out = Array2::zeros((batch * positions, self.out_ch));
        for b in 0..batch {
            for o in 0..self.out_ch {
                for p in 0..positions {
                    out[[b * positions + p, o]] = signal[[b, o * positions + p]];
                }
            }
        }
        out
    }

    fn to_channel_major<T: Real>(&self, rows: &Array2<T>, batch: usize) -> Array2<T> {
        let positions = self.positions();
        let mut out = Array2::zeros((batch, self.out_features()));
        for b in 0..batch {
            for o in 0..self.out_ch {
                for p in 0..positions {
                    out[[b, o * positions + p]] = rows[[b * positions + p, o]];
                }
            }
        }
        out
    }

    fn check_input<T>(&self, input: &ArrayView2<T>) -> Result<()> {
        if input.ncols() != self.in_features() {
            return Err(Error::dimension(
                "conv input",
                input.shape(),
                &[self.in_ch, self.height, self.width],
            ));
        }
        Ok(())
    }

    fn check_signal<T>(&self, signal: &ArrayView2<T>) -> Result<()> {
        if signal.ncols() != self.out_features() {
            return Err(Error::dimension(
                "conv signal",
                signal.shape(),
                &[self.out_ch, self.out_height(), self.out_width()],
            ));
        }
        Ok(())
    }

    fn kernel_matrix<T: Real>(&self, kernel: &Array4<T>) -> Result<Array2<T>> {
        if kernel.shape() != self.kernel_shape() {
            return Err(Error::dimension("conv kernel", kernel.shape(), &self.kernel_shape()));
        }
        Ok(kernel
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_ch, self.in_ch * self.taps()))
            .expect("contiguous kernel"))
    }

    /// `k ∗ x` for every sample of the batch.
    pub fn apply<T: Real>(&self, kernel: &Array4<T>, input: &Array2<T>) -> Result<Array2<T>> {
        self.check_input(&input.view())?;
        let kmat = self.kernel_matrix(kernel)?;
        let patches = self.im2col(&input.view());
        let rows = patches.dot(&kmat.t());
        Ok(self.to_channel_major(&rows, input.nrows()))
    }

    /// Transposed convolution: the adjoint of `x ↦ k ∗ x`.
    pub fn apply_adjoint<T: Real>(&self, kernel: &Array4<T>, signal: &Array2<T>) -> Result<Array2<T>> {
        self.check_signal(&signal.view())?;
        let kmat = self.kernel_matrix(kernel)?;
        let rows = self.to_position_major(signal);
        let cols = rows.dot(&kmat);
        Ok(self.col2im(&cols, signal.nrows()))
    }

    /// `conv★_x(s)`: gradient of `Σ_b ⟨s_b, k ∗ x_b⟩` with respect to `k`.
    pub fn kernel_adjoint<T: Real>(&self, input: &Array2<T>, signal: &Array2<T>) -> Result<Array4<T>> {
        self.check_input(&input.view())?;
        self.check_signal(&signal.view())?;
        if input.nrows() != signal.nrows() {
            return Err(Error::dimension("conv_adjoint batch", input.shape(), signal.shape()));
        }
        let patches = self.im2col(&input.view());
        let rows = self.to_position_major(signal);
        let grad = rows.t().dot(&patches);
        Ok(grad
            .into_shape_with_order(self.kernel_shape())
            .expect("kernel-shaped gradient"))
    }
}

/// Convolution layer with optional orthogonal (BCOP) parametrization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub geometry: ConvGeometry,
    /// Current kernel; for BCOP layers this is the cached materialization.
    pub kernel: Array4<T>,
    pub activation: Activation,
    pub dropout: f64,
    pub bcop: Option<Bcop<T>>,
    pub orthogonalized: bool,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(geometry: ConvGeometry, kernel: Array4<T>, activation: Activation) -> Result<Self> {
        geometry.validate()?;
        if kernel.shape() != geometry.kernel_shape() {
            return Err(Error::dimension("conv kernel", kernel.shape(), &geometry.kernel_shape()));
        }
        Ok(ConvLayer {
            geometry,
            kernel,
            activation,
            dropout: 0.0,
            bcop: None,
            orthogonalized: false,
        })
    }

    /// He-normal kernel without orthogonal parametrization.
    pub fn gaussian<R: Rng + ?Sized>(geometry: ConvGeometry, activation: Activation, rng: &mut R) -> Result<Self> {
        let fan_in = geometry.in_ch * geometry.kh * geometry.kw;
        let std = T::lit((2.0 / fan_in as f64).sqrt());
        let kernel = Array4::from_shape_fn(geometry.kernel_shape(), |_| T::sample_normal(rng) * std);
        Self::new(geometry, kernel, activation)
    }

    pub fn bcop<R: Rng + ?Sized>(geometry: ConvGeometry, activation: Activation, rng: &mut R) -> Result<Self> {
        let params = Bcop::random(geometry.in_ch, geometry.out_ch, geometry.kh, geometry.kw, rng)?;
        Self::from_bcop(geometry, params, activation)
    }

    pub fn from_bcop(geometry: ConvGeometry, params: Bcop<T>, activation: Activation) -> Result<Self> {
        let kernel = params.materialize()?;
        let mut layer = Self::new(geometry, kernel, activation)?;
        layer.bcop = Some(params);
        layer.orthogonalized = true;
        Ok(layer)
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn in_features(&self) -> usize {
        self.geometry.in_features()
    }

    pub fn out_features(&self) -> usize {
        self.geometry.out_features()
    }

    pub fn linear(&self, input: &Array2<T>) -> Result<Array2<T>> {
        self.geometry.apply(&self.kernel, input)
    }

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

    pub fn adjoint(&self, signal: &Array2<T>) -> Result<Array2<T>> {
        self.geometry.apply_adjoint(&self.kernel, signal)
    }

    /// Re-derives the cached kernel from the BCOP factors.
    pub fn refresh_kernel(&mut self) -> Result<()> {
        if let Some(p) = &self.bcop {
            self.kernel = p.materialize()?;
        }
        Ok(())
    }
}

/// Free-function form of [`ConvGeometry::kernel_adjoint`].
pub fn conv_adjoint<T: Real>(input: &Array2<T>, signal: &Array2<T>, geometry: &ConvGeometry) -> Result<Array4<T>> {
    geometry.kernel_adjoint(input, signal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| f64::sample_normal(&mut rng))
    }

    fn random_kernel(shape: [usize; 4], seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| f64::sample_normal(&mut rng))
    }

    /// Direct seven-loop cross-correlation.
    fn naive_conv(g: &ConvGeometry, k: &Array4<f64>, x: &Array2<f64>) -> Array2<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut y = Array2::zeros((x.nrows(), g.out_features()));
        for b in 0..x.nrows() {
            for o in 0..g.out_ch {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = 0.0;
                        for c in 0..g.in_ch {
                            for m in 0..g.kh {
                                for n in 0..g.kw {
                                    let (yy, xx) = match g.padding {
                                        Padding::Zero(p) => ((i + m) as isize - p as isize, (j + n) as isize - p as isize),
                                        Padding::Circular => (
                                            ((i + m) as isize - (g.kh / 2) as isize).rem_euclid(g.height as isize),
                                            ((j + n) as isize - (g.kw / 2) as isize).rem_euclid(g.width as isize),
                                        ),
                                    };
                                    if yy < 0 || xx < 0 || yy >= g.height as isize || xx >= g.width as isize {
                                        continue;
                                    }
                                    let src = c * g.height * g.width + yy as usize * g.width + xx as usize;
                                    s += k[[o, c, m, n]] * x[[b, src]];
                                }
                            }
                        }
                        y[[b, o * oh * ow + i * ow + j]] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn scalar_one_by_one_kernel() {
        let g = ConvGeometry::same(1, 1, 1, 2, 1);
        let k = Array4::from_elem([1, 1, 1, 1], 2.0);
        assert_eq!(g.apply(&k, &array![[1.0, 3.0]]).unwrap(), array![[2.0, 6.0]]);
        let id = Array4::from_elem([1, 1, 1, 1], 1.0);
        let x = array![[0.5, -4.0]];
        assert_eq!(g.apply(&id, &x).unwrap(), x);
    }

    #[test]
    fn three_by_three_matches_direct_loops() {
        for padding in [Padding::Zero(1), Padding::Zero(0), Padding::Circular] {
            let g = ConvGeometry {
                in_ch: 2,
                out_ch: 3,
                height: 5,
                width: 5,
                kh: 3,
                kw: 3,
                padding,
            };
            let k = random_kernel(g.kernel_shape(), 1);
            let x = random((2, g.in_features()), 2);
            let got = g.apply(&k, &x).unwrap();
            let want = naive_conv(&g, &k, &x);
            assert!((&got - &want).iter().all(|d| d.abs() < 1e-10), "{padding:?}");
        }
    }

    #[test]
    fn one_by_one_kernel_gradient_is_dot_product() {
        let g = ConvGeometry::same(1, 1, 1, 2, 1);
        let grad = g.kernel_adjoint(&array![[1.0, 2.0]], &array![[3.0, 4.0]]).unwrap();
        assert_eq!(grad[[0, 0, 0, 0]], 11.0);
        let zero = g.kernel_adjoint(&array![[1.0, 2.0]], &array![[0.0, 0.0]]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_adjoint_matches_finite_differences() {
        let g = ConvGeometry::same(2, 2, 4, 4, 3);
        let k = random_kernel(g.kernel_shape(), 3);
        let x = random((2, g.in_features()), 4);
        let s = random((2, g.out_features()), 5);
        let grad = g.kernel_adjoint(&x, &s).unwrap();
        let h = 1e-5;
        let objective = |k: &Array4<f64>| (g.apply(k, &x).unwrap() * &s).sum();
        for idx in [[0, 0, 0, 0], [1, 0, 2, 1], [0, 1, 1, 1], [1, 1, 2, 2]] {
            let mut kp = k.clone();
            kp[idx] += h;
            let mut km = k.clone();
            km[idx] -= h;
            let fd = (objective(&kp) - objective(&km)) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-5, "{idx:?}: {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        for padding in [Padding::Zero(1), Padding::Circular, Padding::Zero(2)] {
            let g = ConvGeometry {
                in_ch: 3,
                out_ch: 2,
                height: 5,
                width: 4,
                kh: 3,
                kw: 3,
                padding,
            };
            let k = random_kernel(g.kernel_shape(), 6);
            let x = random((3, g.in_features()), 7);
            let s = random((3, g.out_features()), 8);
            let lhs = (g.apply(&k, &x).unwrap() * &s).sum();
            let via_input = (g.apply_adjoint(&k, &s).unwrap() * &x).sum();
            let via_kernel = (g.kernel_adjoint(&x, &s).unwrap() * &k).sum();
            assert!((lhs - via_input).abs() < 1e-8);
            assert!((lhs - via_kernel).abs() < 1e-8);
        }
    }

    #[test]
    fn channel_and_shape_errors() {
        let g = ConvGeometry::same(2, 1, 3, 3, 3);
        let k = random_kernel(g.kernel_shape(), 1);
        assert!(g.apply(&k, &random((1, 9), 1)).is_err());
        assert!(g.apply_adjoint(&k, &random((1, 18), 1)).is_err());
        let too_big = ConvGeometry {
            padding: Padding::Zero(0),
            ..ConvGeometry::same(1, 1, 2, 2, 3)
        };
        assert!(too_big.validate().is_err());
    }
}
