//! Laplacian pyramid decomposition and exact reconstruction.
//!
//! Resampling uses the separable 5-tap binomial kernel `[1, 4, 6, 4, 1] / 16`
//! with reflect padding. `downsample` blurs then keeps every second sample;
//! `upsample` inserts zeros and blurs with the kernel scaled by 2 per axis, so
//! constants survive both directions unchanged.
//!
//! The same linear maps are available as dense per-axis matrices
//! ([`downsample_matrix`], [`upsample_matrix`]) for use inside a
//! differentiable [`Graph`].

use std::sync::Arc;

use lapstyle_autograd::{kernels::reflect_index, Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Symmetric, normalized 1-D resampling kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleKernel {
    taps: Vec<f64>,
}

impl Default for ResampleKernel {
    fn default() -> Self {
        Self::binomial5()
    }
}

impl ResampleKernel {
    pub fn binomial5() -> Self {
        Self { taps: [1.0, 4.0, 6.0, 4.0, 1.0].iter().map(|v| v / 16.0).collect() }
    }

    pub fn new(taps: Vec<f64>) -> Result<Self> {
        let n = taps.len();
        if n % 2 == 0 {
            return Err(Error::Invalid("resample kernel needs an odd number of taps".into()));
        }
        if (0..n / 2).any(|i| taps[i] != taps[n - 1 - i]) {
            return Err(Error::Invalid("resample kernel must be symmetric".into()));
        }
        if (taps.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid("resample kernel taps must sum to 1".into()));
        }
        Ok(Self { taps })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    fn radius(&self) -> isize {
        (self.taps.len() / 2) as isize
    }

    /// Blur then decimate a line of even length.
    fn down_1d(&self, src: &[f64], out: &mut Vec<f64>) {
        let n = src.len();
        let r = self.radius();
        out.clear();
        for i in 0..n / 2 {
            let centre = 2 * i as isize;
            let acc = self
                .taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * src[reflect_index(centre + k as isize - r, n)])
                .sum();
            out.push(acc);
        }
    }

    /// Zero-insert then blur with doubled gain.
    fn up_1d(&self, src: &[f64], out: &mut Vec<f64>) {
        let n2 = 2 * src.len();
        let r = self.radius();
        out.clear();
        for i in 0..n2 {
            let mut acc = 0.0;
            for (k, t) in self.taps.iter().enumerate() {
                let j = reflect_index(i as isize + k as isize - r, n2);
                // reflection preserves parity, so odd taps always land on inserted zeros
                if j % 2 == 0 {
                    acc += t * src[j / 2];
                }
            }
            out.push(2.0 * acc);
        }
    }
}

/// Applies a 1-D operator along rows and then along columns of each channel.
fn separable(img: &Image, out_h: usize, out_w: usize, op: impl Fn(&[f64], &mut Vec<f64>)) -> Image {
    let (h, w) = img.dims();
    let mut line = Vec::new();
    let planes: [Vec<f64>; CHANNELS] = std::array::from_fn(|c| {
        let plane = img.plane(c);
        let mut rows = Vec::with_capacity(h * out_w);
        for row in plane.chunks(w) {
            op(row, &mut line);
            rows.extend_from_slice(&line);
        }
        let mut result = vec![0.0; out_h * out_w];
        let mut col = vec![0.0; h];
        for x in 0..out_w {
            for y in 0..h {
                col[y] = rows[y * out_w + x];
            }
            op(&col, &mut line);
            for (y, v) in line.iter().enumerate() {
                result[y * out_w + x] = *v;
            }
        }
        result
    });
    Image::from_planes(out_h, out_w, &planes)
}

/// Halves both dimensions; each must be even.
pub fn downsample(img: &Image) -> Result<Image> {
    downsample_with(img, &ResampleKernel::default())
}

pub fn downsample_with(img: &Image, kernel: &ResampleKernel) -> Result<Image> {
    let (h, w) = img.dims();
    if h % 2 != 0 {
        return Err(Error::Dimension(format!("downsample: height {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::Dimension(format!("downsample: width {w} is odd")));
    }
    Ok(separable(img, h / 2, w / 2, |s, o| kernel.down_1d(s, o)))
}

/// Doubles both dimensions.
pub fn upsample(img: &Image) -> Image {
    upsample_with(img, &ResampleKernel::default())
}

pub fn upsample_with(img: &Image, kernel: &ResampleKernel) -> Image {
    let (h, w) = img.dims();
    separable(img, 2 * h, 2 * w, |s, o| kernel.up_1d(s, o))
}

/// Low-frequency base plus band-pass residuals, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPyramid {
    pub low: Image,
    pub residuals: Vec<Image>,
}

impl LaplacianPyramid {
    pub fn levels(&self) -> usize {
        self.residuals.len()
    }

    pub fn reconstruct(&self) -> Result<Image> {
        reconstruct(&self.low, &self.residuals)
    }
}

pub fn check_divisible(h: usize, w: usize, levels: u32) -> Result<()> {
    let div = 1usize << levels;
    if h % div != 0 || w % div != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} image cannot be decomposed into {levels} levels: both sides must be divisible by {div}"
        )));
    }
    Ok(())
}

pub fn decompose(img: &Image, levels: usize) -> Result<LaplacianPyramid> {
    if levels == 0 {
        return Err(Error::Dimension("pyramid needs at least one level".into()));
    }
    check_divisible(img.height(), img.width(), levels as u32)?;
    let mut residuals = Vec::with_capacity(levels);
    let mut current = img.clone();
    for _ in 0..levels {
        let down = downsample(&current)?;
        residuals.push(current.sub(&upsample(&down))?);
        current = down;
    }
    Ok(LaplacianPyramid { low: current, residuals })
}

/// `x <- upsample(x) + residual`, coarsest residual first.
pub fn reconstruct(low: &Image, residuals: &[Image]) -> Result<Image> {
    let mut current = low.clone();
    for (level, r) in residuals.iter().enumerate().rev() {
        let (h, w) = current.dims();
        if r.dims() != (2 * h, 2 * w) {
            return Err(Error::Dimension(format!(
                "reconstruct level {level}: residual is {}x{}, expected {}x{}",
                r.height(),
                r.width(),
                2 * h,
                2 * w
            )));
        }
        current = upsample(&current).add(r)?;
    }
    Ok(current)
}

fn line_operator(n_in: usize, n_out: usize, op: impl Fn(&[f64], &mut Vec<f64>)) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let mut unit = vec![0.0; n_in];
    let mut col = Vec::new();
    for j in 0..n_in {
        unit[j] = 1.0;
        op(&unit, &mut col);
        for (i, v) in col.iter().enumerate() {
            m[i * n_in + j] = *v;
        }
        unit[j] = 0.0;
    }
    m
}

/// `(n/2) x n` matrix of the 1-D downsampling operator.
pub fn downsample_matrix<T: Real>(n: usize) -> Result<Tensor<T>> {
    if n % 2 != 0 {
        return Err(Error::Dimension(format!("downsample: length {n} is odd")));
    }
    let k = ResampleKernel::default();
    let m = line_operator(n, n / 2, |s, o| k.down_1d(s, o));
    Ok(Tensor::new(&[n / 2, n], m.into_iter().map(T::from_f64_lossy).collect())?)
}

/// `2n x n` matrix of the 1-D upsampling operator.
pub fn upsample_matrix<T: Real>(n: usize) -> Tensor<T> {
    let k = ResampleKernel::default();
    let m = line_operator(n, 2 * n, |s, o| k.up_1d(s, o));
    Tensor::new(&[2 * n, n], m.into_iter().map(T::from_f64_lossy).collect()).expect("operator shape")
}

/// Differentiable [`upsample`] of an NCHW graph value.
pub fn upsample_var<T: Real>(g: &Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    let (h, w) = (shape[2], shape[3]);
    Ok(g.sep_linear(x, Arc::new(upsample_matrix(h)), Arc::new(upsample_matrix(w)))?)
}

/// Differentiable [`downsample`] of an NCHW graph value.
pub fn downsample_var<T: Real>(g: &Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    let (h, w) = (shape[2], shape[3]);
    Ok(g.sep_linear(x, Arc::new(downsample_matrix(h)?), Arc::new(downsample_matrix(w)?))?)
}

/// Differentiable [`reconstruct`] over NCHW graph values.
pub fn reconstruct_var<T: Real>(g: &Graph<T>, low: Var, residuals: &[Var]) -> Result<Var> {
    let mut current = low;
    for &r in residuals.iter().rev() {
        let up = upsample_var(g, current)?;
        current = g.add(up, r)?;
    }
    Ok(current)
}
