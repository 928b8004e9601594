//! Independent brute-force reference implementations used as test oracles.
//! Written as plain loops over the defining formulas; none of them call into
//! the library's numeric code.

#![allow(dead_code)]

use lapstyle::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(h, w, data).unwrap()
}

/// Mirror index without repeating the border sample (`-1 -> 1`).
pub fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Dense 5x5 convolution with the outer-product kernel, then keep even
/// positions.
pub fn downsample_oracle(img: &Image) -> Image {
    let (h, w) = img.dims();
    let mut out = Image::filled(h / 2, w / 2, 0.0);
    for c in 0..3 {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let mut acc = 0.0;
                for a in 0..5 {
                    for b in 0..5 {
                        let sy = mirror(2 * y as isize + a as isize - 2, h);
                        let sx = mirror(2 * x as isize + b as isize - 2, w);
                        acc += BINOMIAL[a] * BINOMIAL[b] * img.get(sy, sx, c);
                    }
                }
                out.set(y, x, c, acc);
            }
        }
    }
    out
}

/// Zero-insertion onto a `2H x 2W` grid, then a dense 5x5 convolution with
/// 4x the kernel, mirroring on the enlarged grid.
pub fn upsample_oracle(img: &Image) -> Image {
    let (h, w) = img.dims();
    let (h2, w2) = (2 * h, 2 * w);
    let mut z = vec![0.0; h2 * w2 * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                z[((2 * y) * w2 + 2 * x) * 3 + c] = img.get(y, x, c);
            }
        }
    }
    let mut out = Image::filled(h2, w2, 0.0);
    for c in 0..3 {
        for y in 0..h2 {
            for x in 0..w2 {
                let mut acc = 0.0;
                for a in 0..5 {
                    for b in 0..5 {
                        let sy = mirror(y as isize + a as isize - 2, h2);
                        let sx = mirror(x as isize + b as isize - 2, w2);
                        acc += 4.0 * BINOMIAL[a] * BINOMIAL[b] * z[(sy * w2 + sx) * 3 + c];
                    }
                }
                out.set(y, x, c, acc);
            }
        }
    }
    out
}

pub fn sub(a: &Image, b: &Image) -> Image {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Image::new(a.height(), a.width(), data).unwrap()
}

pub fn add(a: &Image, b: &Image) -> Image {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Image::new(a.height(), a.width(), data).unwrap()
}

pub fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Residuals (finest first) and low image built from the oracles.
pub fn decompose_oracle(img: &Image, levels: usize) -> (Vec<Image>, Image) {
    let mut cur = img.clone();
    let mut res = Vec::new();
    for _ in 0..levels {
        let down = downsample_oracle(&cur);
        res.push(sub(&cur, &upsample_oracle(&down)));
        cur = down;
    }
    (res, cur)
}

pub fn reconstruct_oracle(low: &Image, residuals: &[Image]) -> Image {
    let mut cur = low.clone();
    for r in residuals.iter().rev() {
        cur = add(&upsample_oracle(&cur), r);
    }
    cur
}

/// Sobel magnitude of one channel, evaluated as a direct 3x3 stencil.
pub fn sobel_oracle(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let sy = mirror(y as isize + dy as isize - 1, h);
                    let sx = mirror(x as isize + dx as isize - 1, w);
                    let v = plane[sy * w + sx];
                    gx += KX[dy][dx] * v;
                    gy += KY[dy][dx] * v;
                }
            }
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Features of one sample as `positions x channels`.
pub type Points = Vec<Vec<f64>>;

/// `[C][P]` channel-major data (one NCHW sample) to `P x C` points.
pub fn points(data: &[f64], c: usize, p: usize) -> Points {
    (0..p).map(|i| (0..c).map(|ch| data[ch * p + i]).collect()).collect()
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = (a.iter().map(|x| x * x).sum::<f64>() + 1e-16).sqrt();
    let nb = (b.iter().map(|x| x * x).sum::<f64>() + 1e-16).sqrt();
    1.0 - dot / (na * nb)
}

/// Relaxed EMD on an explicit cost matrix by exhaustive enumeration.
pub fn remd_from_cost(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost[0].len();
    let mut row_term = 0.0;
    for row in cost {
        let mut m = f64::INFINITY;
        for &v in row {
            if v < m {
                m = v;
            }
        }
        row_term += m;
    }
    row_term /= rows as f64;
    let mut col_term = 0.0;
    for j in 0..cols {
        let mut m = f64::INFINITY;
        for row in cost {
            if row[j] < m {
                m = row[j];
            }
        }
        col_term += m;
    }
    col_term /= cols as f64;
    if row_term > col_term {
        row_term
    } else {
        col_term
    }
}

/// rEMD between two point sets, first argument indexes rows.
pub fn remd_oracle(style: &Points, stylized: &Points) -> f64 {
    let cost: Vec<Vec<f64>> = style.iter().map(|s| stylized.iter().map(|t| cosine_distance(s, t)).collect()).collect();
    remd_from_cost(&cost)
}

/// Mean absolute difference of row-normalized cosine-distance matrices.
pub fn self_similarity_oracle(content: &Points, stylized: &Points) -> f64 {
    let p = content.len();
    let normalized = |pts: &Points| -> Vec<Vec<f64>> {
        (0..p)
            .map(|i| {
                let row: Vec<f64> = (0..p).map(|j| cosine_distance(&pts[i], &pts[j])).collect();
                let s: f64 = row.iter().sum::<f64>() + 1e-8;
                row.into_iter().map(|v| v / s).collect()
            })
            .collect()
    };
    let (a, b) = (normalized(content), normalized(stylized));
    let mut acc = 0.0;
    for i in 0..p {
        for j in 0..p {
            acc += (a[i][j] - b[i][j]).abs();
        }
    }
    acc / (p * p) as f64
}

/// Per-channel mean and `sqrt(var + 1e-10)` of `[C][P]` data.
pub fn channel_mean_std(data: &[f64], c: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for ch in 0..c {
        let xs = &data[ch * p..(ch + 1) * p];
        let m = xs.iter().sum::<f64>() / p as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / p as f64;
        means.push(m);
        stds.push((v + 1e-10).sqrt());
    }
    (means, stds)
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `|mu_a - mu_b| + |sigma_a - sigma_b|` for one sample.
pub fn mean_variance_oracle(a: &[f64], b: &[f64], c: usize, pa: usize, pb: usize) -> f64 {
    let (ma, sa) = channel_mean_std(a, c, pa);
    let (mb, sb) = channel_mean_std(b, c, pb);
    euclid(&ma, &mb) + euclid(&sa, &sb)
}

pub fn standardize(data: &[f64], c: usize, p: usize) -> Vec<f64> {
    let (m, s) = channel_mean_std(data, c, p);
    let mut out = Vec::with_capacity(c * p);
    for ch in 0..c {
        for i in 0..p {
            out.push((data[ch * p + i] - m[ch]) / s[ch]);
        }
    }
    out
}

/// `|norm(a) - norm(b)|` for one sample.
pub fn perceptual_oracle(a: &[f64], b: &[f64], c: usize, p: usize) -> f64 {
    euclid(&standardize(a, c, p), &standardize(b, c, p))
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `R_j = beta * sum_i softmax_i(<E_i, E_j>) E_i + E_j` on `[C][N]` data.
pub fn channel_attention_oracle(e: &[Vec<f64>], beta: f64) -> Vec<Vec<f64>> {
    let c = e.len();
    let n = e[0].len();
    (0..c)
        .map(|j| {
            let logits: Vec<f64> = (0..c).map(|i| (0..n).map(|k| e[i][k] * e[j][k]).sum()).collect();
            let m = softmax(&logits);
            (0..n).map(|k| beta * (0..c).map(|i| m[i] * e[i][k]).sum::<f64>() + e[j][k]).collect()
        })
        .collect()
}

/// Dense 3x3 convolution with mirror padding on `[Cin][H][W]` input,
/// weights `[Cout][Cin][3][3]` (flattened) and bias `[Cout]`.
pub fn conv3x3_oracle(x: &[Vec<f64>], h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    let cin = x.len();
    let cout = bias.len();
    (0..cout)
        .map(|o| {
            let mut out = vec![bias[o]; h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..cin {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let sy = mirror(y as isize + dy as isize - 1, h);
                                let sx = mirror(xx as isize + dx as isize - 1, w);
                                acc += weight[((o * cin + i) * 3 + dy) * 3 + dx] * x[i][sy * w + sx];
                            }
                        }
                    }
                    out[y * w + xx] += acc;
                }
            }
            out
        })
        .collect()
}

/// SSIM on BT.601 luminance from the reference definition: for every
/// fully-inside 11x11 window, Gaussian-weighted moments, then the mean.
pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (h, w) = a.dims();
    let luma = |img: &Image, y: usize, x: usize| {
        0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1) + 0.114 * img.get(y, x, 2)
    };
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = win[i][j] / total;
                    let (p, q) = (luma(a, y0 + i, x0 + j), luma(b, y0 + i, x0 + j));
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}
