//! Block convolution orthogonal parametrization.
//!
//! A `kh × kw` kernel is built as a block-convolution product of a
//! semi-orthogonal `c_out × c_in` channel matrix with `kh − 1` vertical and
//! `kw − 1` horizontal two-tap blocks `[P, I − P]`, where `P = QQᵀ` is a
//! projector and `Q` has orthonormal columns. Every factor is an orthogonal
//! operator under periodic boundaries, hence so is their composition.

use ndarray::{s, Array2, Array4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gram_residual, orthogonal_init_with, project_semi_orthogonal, Matrix};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Bcop<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    /// `c_out × c_in`, semi-orthogonal.
    pub channel: Matrix<T>,
    /// `kh − 1` matrices of shape `c × ⌈c/2⌉`, `c = max(c_in, c_out)`.
    pub rows: Vec<Matrix<T>>,
    /// `kw − 1` matrices of the same shape.
    pub cols: Vec<Matrix<T>>,
}

impl<T: Real> Bcop<T> {
    pub fn block_channels(in_ch: usize, out_ch: usize) -> usize {
        in_ch.max(out_ch)
    }

    pub fn projector_rank(c: usize) -> usize {
        c.div_ceil(2)
    }

    pub fn random<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kh: usize, kw: usize, rng: &mut R) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || kh == 0 || kw == 0 {
            return Err(Error::Parametrization(format!(
                "empty BCOP shape {out_ch}x{in_ch}x{kh}x{kw}"
            )));
        }
        let c = Self::block_channels(in_ch, out_ch);
        let r = Self::projector_rank(c);
        let channel = orthogonal_init_with(out_ch, in_ch, rng);
        let rows = (1..kh).map(|_| orthogonal_init_with(c, r, rng)).collect();
        let cols = (1..kw).map(|_| orthogonal_init_with(c, r, rng)).collect();
        Ok(Bcop {
            in_ch,
            out_ch,
            kh,
            kw,
            channel,
            rows,
            cols,
        })
    }

    /// Same structure, every factor zero. Used as a gradient container.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.raw_dim());
        Bcop {
            channel: z(&self.channel),
            rows: self.rows.iter().map(z).collect(),
            cols: self.cols.iter().map(z).collect(),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = Self::block_channels(self.in_ch, self.out_ch);
        let r = Self::projector_rank(c);
        if self.channel.dim() != (self.out_ch, self.in_ch) {
            return Err(Error::Parametrization(format!(
                "channel matrix is {:?}, expected {:?}",
                self.channel.shape(),
                (self.out_ch, self.in_ch)
            )));
        }
        if self.rows.len() + 1 != self.kh || self.cols.len() + 1 != self.kw {
            return Err(Error::Parametrization(format!(
                "{} row and {} column factors for a {}x{} kernel",
                self.rows.len(),
                self.cols.len(),
                self.kh,
                self.kw
            )));
        }
        for q in self.rows.iter().chain(&self.cols) {
            if q.dim() != (c, r) {
                return Err(Error::Parametrization(format!(
                    "projector factor is {:?}, expected {:?}",
                    q.shape(),
                    (c, r)
                )));
            }
        }
        Ok(())
    }

    fn projector_block(q: &Matrix<T>, vertical: bool) -> Array4<T> {
        let c = q.nrows();
        let p = q.dot(&q.t());
        let comp = Array2::eye(c) - &p;
        let shape = if vertical { [c, c, 2, 1] } else { [c, c, 1, 2] };
        let mut block = Array4::zeros(shape);
        block.slice_mut(s![.., .., 0, 0]).assign(&p);
        if vertical {
            block.slice_mut(s![.., .., 1, 0]).assign(&comp);
        } else {
            block.slice_mut(s![.., .., 0, 1]).assign(&comp);
        }
        block
    }

    fn channel_block(&self) -> Array4<T> {
        self.channel
            .clone()
            .into_shape_with_order((self.out_ch, self.in_ch, 1, 1))
            .expect("contiguous channel matrix")
    }

    /// Whether the channel matrix is the outermost factor.
    fn channel_first(&self) -> bool {
        self.out_ch <= self.in_ch
    }

    /// Factors in composition order, outermost first.
    fn factors(&self) -> Vec<Array4<T>> {
        let mut blocks: Vec<Array4<T>> = self
            .rows
            .iter()
            .map(|q| Self::projector_block(q, true))
            .chain(self.cols.iter().map(|q| Self::projector_block(q, false)))
            .collect();
        if self.channel_first() {
            blocks.insert(0, self.channel_block());
        } else {
            blocks.push(self.channel_block());
        }
        blocks
    }

    pub fn materialize(&self) -> Result<Array4<T>> {
        self.validate()?;
        let factors = self.factors();
        let mut acc = factors[0].clone();
        for f in &factors[1..] {
            acc = block_conv(&acc, f);
        }
        Ok(acc)
    }

    /// Pulls a kernel-shaped cotangent back onto the factors: `Jᵀ g`.
    pub fn pullback(&self, grad: &Array4<T>) -> Result<Self> {
        self.validate()?;
        let shape = [self.out_ch, self.in_ch, self.kh, self.kw];
        if grad.shape() != shape {
            return Err(Error::dimension("bcop pullback", grad.shape(), &shape));
        }
        let factors = self.factors();
        let mut prefixes = Vec::with_capacity(factors.len());
        prefixes.push(factors[0].clone());
        for f in &factors[1..] {
            let next = block_conv(prefixes.last().expect("non-empty"), f);
            prefixes.push(next);
        }
        let n = factors.len();
        let mut factor_grads = vec![Array4::zeros([0, 0, 0, 0]); n];
        let mut g = grad.clone();
        for k in (1..n).rev() {
            let (ga, gb) = block_conv_vjp(&prefixes[k - 1], &factors[k], &g);
            factor_grads[k] = gb;
            g = ga;
        }
        factor_grads[0] = g;

        let channel_idx = if self.channel_first() { 0 } else { n - 1 };
        let offset = usize::from(self.channel_first());
        let mut out = self.zeros_like();
        out.channel = factor_grads[channel_idx]
            .slice(s![.., .., 0, 0])
            .to_owned();
        for (i, q) in self.rows.iter().enumerate() {
            out.rows[i] = projector_pullback(q, &factor_grads[offset + i], true);
        }
        let base = offset + self.rows.len();
        for (i, q) in self.cols.iter().enumerate() {
            out.cols[i] = projector_pullback(q, &factor_grads[base + i], false);
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, delta: &Self) -> Result<()> {
        if self.channel.dim() != delta.channel.dim()
            || self.rows.len() != delta.rows.len()
            || self.cols.len() != delta.cols.len()
        {
            return Err(Error::dimension("bcop update", self.channel.shape(), delta.channel.shape()));
        }
        self.channel += &delta.channel;
        for (q, d) in self.rows.iter_mut().zip(&delta.rows).chain(self.cols.iter_mut().zip(&delta.cols)) {
            if q.dim() != d.dim() {
                return Err(Error::dimension("bcop update", q.shape(), d.shape()));
            }
            *q += d;
        }
        Ok(())
    }

    /// Re-projects every factor with rescaling followed by Björck.
    pub fn orthogonalize(&mut self, iters: usize) -> Result<()> {
        self.channel = project_semi_orthogonal(&self.channel, iters)?;
        for q in self.rows.iter_mut().chain(self.cols.iter_mut()) {
            *q = project_semi_orthogonal(q, iters)?;
        }
        Ok(())
    }

    /// Largest smaller-dimension Gram residual over all factors.
    pub fn gram_residual(&self) -> T {
        self.rows
            .iter()
            .chain(&self.cols)
            .map(gram_residual)
            .fold(gram_residual(&self.channel), |a, b| a.max(b))
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Matrix<T>> {
        std::iter::once(&self.channel).chain(&self.rows).chain(&self.cols)
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        std::iter::once(&mut self.channel)
            .chain(self.rows.iter_mut())
            .chain(self.cols.iter_mut())
    }
}

/// Kernel of the composition `conv_a ∘ conv_b`:
/// `C[u, v] = Σ A[m, n] · B[u − m, v − n]`.
pub fn block_conv<T: Real>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    let (o, c, ka, la) = a.dim();
    let (c2, d, kb, lb) = b.dim();
    assert_eq!(c, c2, "block_conv channel mismatch");
    let mut out = Array4::zeros([o, d, ka + kb - 1, la + lb - 1]);
    for m in 0..ka {
        for n in 0..la {
            let am = a.slice(s![.., .., m, n]);
            for p in 0..kb {
                for q in 0..lb {
                    let prod = am.dot(&b.slice(s![.., .., p, q]));
                    let mut dst = out.slice_mut(s![.., .., m + p, n + q]);
                    dst += &prod;
                }
            }
        }
    }
    out
}

/// Cotangents of [`block_conv`] with respect to both operands.
pub fn block_conv_vjp<T: Real>(a: &Array4<T>, b: &Array4<T>, g: &Array4<T>) -> (Array4<T>, Array4<T>) {
    let (_, _, ka, la) = a.dim();
    let (_, _, kb, lb) = b.dim();
    let mut ga = Array4::zeros(a.raw_dim());
    let mut gb = Array4::zeros(b.raw_dim());
    for m in 0..ka {
        for n in 0..la {
            let am = a.slice(s![.., .., m, n]);
            for p in 0..kb {
                for q in 0..lb {
                    let gc = g.slice(s![.., .., m + p, n + q]);
                    let bp = b.slice(s![.., .., p, q]);
                    let mut da = ga.slice_mut(s![.., .., m, n]);
                    da += &gc.dot(&bp.t());
                    let mut db = gb.slice_mut(s![.., .., p, q]);
                    db += &am.t().dot(&gc);
                }
            }
        }
    }
    (ga, gb)
}

fn projector_pullback<T: Real>(q: &Matrix<T>, block_grad: &Array4<T>, vertical: bool) -> Matrix<T> {
    let first = block_grad.slice(s![.., .., 0, 0]);
    let second = if vertical {
        block_grad.slice(s![.., .., 1, 0])
    } else {
        block_grad.slice(s![.., .., 0, 1])
    };
    let dp = &first - &second;
    let sym: Matrix<T> = &dp + &dp.t();
    sym.dot(q)
}
