//! Raw NCHW kernels shared by the graph's forward and backward passes.

use crate::scalar::{gemm, MatRef, Real};

/// Border handling for size-preserving convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Zero,
    /// Mirror without repeating the edge sample (`d c b | a b c d | c b a`).
    Reflect,
}

/// Maps a possibly out-of-range index onto `0..n` by mirror reflection.
///
/// The extension is periodic with period `2n - 2`, so any offset is valid;
/// a length-1 axis maps everything to 0.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn source_index(i: isize, n: usize, padding: Padding) -> Option<usize> {
    if (0..n as isize).contains(&i) {
        return Some(i as usize);
    }
    match padding {
        Padding::Zero => None,
        Padding::Reflect => Some(reflect_index(i, n)),
    }
}

/// Per-offset source lookup table: `table[o][x]` is the source coordinate of
/// output `x` for kernel offset `o`.
fn offset_table(n: usize, k: usize, padding: Padding) -> Vec<Vec<Option<usize>>> {
    let p = (k / 2) as isize;
    (0..k)
        .map(|o| (0..n).map(|x| source_index(x as isize + o as isize - p, n, padding)).collect())
        .collect()
}

/// Unfolds one `C x H x W` image into a `(C*k*k) x (H*W)` column matrix.
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    padding: Padding,
    cols: &mut [T],
) {
    let hw = h * w;
    let ys = offset_table(h, k, padding);
    let xs = offset_table(w, k, padding);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let xmap = &xs[kx];
                for (y, sy) in ys[ky].iter().enumerate() {
                    let out = &mut dst[y * w..(y + 1) * w];
                    match sy {
                        Some(sy) => {
                            let src = &plane[sy * w..(sy + 1) * w];
                            for (o, sx) in out.iter_mut().zip(xmap) {
                                *o = sx.map_or(T::zero(), |sx| src[sx]);
                            }
                        }
                        None => out.fill(T::zero()),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    padding: Padding,
    dx: &mut [T],
) {
    let hw = h * w;
    let ys = offset_table(h, k, padding);
    let xs = offset_table(w, k, padding);
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let xmap = &xs[kx];
                for (y, sy) in ys[ky].iter().enumerate() {
                    let Some(sy) = sy else { continue };
                    let g = &src[y * w..(y + 1) * w];
                    for (gv, sx) in g.iter().zip(xmap) {
                        if let Some(sx) = sx {
                            let d = &mut plane[sy * w + sx];
                            *d = *d + *gv;
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a same-size convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub padding: Padding,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw = g.h * g.w;
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * g.c_out * hw];
    let mut cols = if g.k == 1 { Vec::new() } else { vec![T::zero(); patch * hw] };
    for n in 0..g.n {
        let xin = &x[n * g.c_in * hw..(n + 1) * g.c_in * hw];
        let dst = &mut out[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(b[co]);
            }
        }
        let rhs = if g.k == 1 {
            xin
        } else {
            im2col(xin, g.c_in, g.h, g.w, g.k, g.padding, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::row_major(weight, g.c_out, patch),
            MatRef::row_major(rhs, patch, hw),
            beta,
            dst,
        );
    }
    out
}

/// Gradients of a same-size convolution. Each output is only computed when
/// the corresponding `want_*` flag is set.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_x, want_w, want_b) = want;
    let hw = g.h * g.w;
    let patch = g.patch();
    let mut dx = want_x.then(|| vec![T::zero(); g.n * g.c_in * hw]);
    let mut dw = want_w.then(|| vec![T::zero(); g.c_out * patch]);
    let mut db = want_b.then(|| vec![T::zero(); g.c_out]);
    let mut cols = if g.k == 1 || !want_w { Vec::new() } else { vec![T::zero(); patch * hw] };
    let mut dcols = if g.k == 1 || !want_x { Vec::new() } else { vec![T::zero(); patch * hw] };
    for n in 0..g.n {
        let xin = &x[n * g.c_in * hw..(n + 1) * g.c_in * hw];
        let gy = &dy[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        if let Some(db) = db.as_mut() {
            for (co, row) in gy.chunks(hw).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let rhs = if g.k == 1 {
                xin
            } else {
                im2col(xin, g.c_in, g.h, g.w, g.k, g.padding, &mut cols);
                &cols
            };
            gemm(
                T::one(),
                MatRef::row_major(gy, g.c_out, hw),
                MatRef::transposed(rhs, patch, hw),
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * g.c_in * hw..(n + 1) * g.c_in * hw];
            let wt = MatRef::transposed(weight, g.c_out, patch);
            if g.k == 1 {
                gemm(T::one(), wt, MatRef::row_major(gy, g.c_out, hw), T::one(), dst);
            } else {
                gemm(T::one(), wt, MatRef::row_major(gy, g.c_out, hw), T::zero(), &mut dcols);
                col2im(&dcols, g.c_in, g.h, g.w, g.k, g.padding, dst);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2x2 max pooling with stride 2. Returns values and flat argmax indices.
pub fn max_pool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn upsample_nearest2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                out[p * oh * ow + y * ow + xx] = x[p * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let d = &mut dx[p * h * w + (y / 2) * w + xx / 2];
                *d = *d + dy[p * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

/// Applies `Y = A X B^T` to every `H x W` plane, with `A: H2 x H` and `B: W2 x W`.
pub fn sep_linear<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    a: &[T],
    h2: usize,
    b: &[T],
    w2: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * h2 * w2];
    let mut tmp = vec![T::zero(); h * w2];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        // tmp = X B^T  (h x w2)
        gemm(T::one(), MatRef::row_major(xp, h, w), MatRef::transposed(b, w2, w), T::zero(), &mut tmp);
        gemm(
            T::one(),
            MatRef::row_major(a, h2, h),
            MatRef::row_major(&tmp, h, w2),
            T::zero(),
            &mut out[p * h2 * w2..(p + 1) * h2 * w2],
        );
    }
    out
}

/// Adjoint of [`sep_linear`]: `dX = A^T dY B`.
pub fn sep_linear_backward<T: Real>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    a: &[T],
    h2: usize,
    b: &[T],
    w2: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    let mut tmp = vec![T::zero(); h2 * w];
    for p in 0..planes {
        let gp = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        gemm(T::one(), MatRef::row_major(gp, h2, w2), MatRef::row_major(b, w2, w), T::zero(), &mut tmp);
        gemm(
            T::one(),
            MatRef::transposed(a, h2, h),
            MatRef::row_major(&tmp, h2, w),
            T::zero(),
            &mut dx[p * h * w..(p + 1) * h * w],
        );
    }
    dx
}
