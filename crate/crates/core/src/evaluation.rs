//! Image-quality metrics and the batch report.
//!
//! * PSNR over all pixels and channels, `+inf` for identical images.
//! * SSIM on BT.601 luminance with an 11x11 Gaussian window (sigma 1.5),
//!   averaged over all fully-inside window positions.
//! * A perceptual distance built from encoder features at `1_1..4_1`:
//!   per-position unit-normalized channel vectors, squared differences
//!   averaged over positions and channels, then over layers. Optional
//!   per-channel weights can be loaded from an archive; without them every
//!   channel has weight 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::archive;
use crate::error::{Error, Result};
use crate::features::{Encoder, Layer};
use crate::image::{Image, CHANNELS};

/// Luminance weights (ITU-R BT.601).
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Layers compared by [`perceptual_distance`].
pub const PERCEPTUAL_LAYERS: [Layer; 4] = [Layer::R11, Layer::R21, Layer::R31, Layer::R41];
const UNIT_EPS: f64 = 1e-10;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len().max(1);
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images match.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

pub fn luminance(img: &Image) -> Vec<f64> {
    img.data().chunks(CHANNELS).map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).collect()
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Per-window SSIM values on luminance, row-major over valid positions.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    let (h, w) = a.dims();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::Dimension(format!("SSIM needs both sides >= {SSIM_WINDOW}, got {h}x{w}")));
    }
    let (x, y) = (luminance(a), luminance(b));
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let sxx = filter_valid(&prod(&x, &x), h, w, &taps);
    let syy = filter_valid(&prod(&y, &y), h, w, &taps);
    let sxy = filter_valid(&prod(&x, &y), h, w, &taps);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    Ok((0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect())
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Per-channel weights for the perceptual distance, keyed by layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerceptualWeights {
    pub layers: BTreeMap<Layer, Vec<f64>>,
}

impl PerceptualWeights {
    /// Reads an archive holding one `[C]` tensor per layer named
    /// `lin.1_1` .. `lin.4_1`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ar = archive::read(path)?;
        let mut layers = BTreeMap::new();
        for l in PERCEPTUAL_LAYERS {
            let name = format!("lin.{}", l.tag());
            let t = ar.params.get(&name).map_err(|_| Error::MissingLayer(name.clone()))?;
            if t.shape() != [l.channels()] {
                return Err(Error::ShapeMismatch { name, expected: vec![l.channels()], found: t.shape().to_vec() });
            }
            layers.insert(l, t.data().iter().map(|&v| f64::from(v)).collect());
        }
        Ok(Self { layers })
    }
}

/// Feature-space distance between two images; 0 for identical inputs.
pub fn perceptual_distance(a: &Image, b: &Image, encoder: &Encoder, weights: Option<&PerceptualWeights>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = a.dims();
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Dimension(format!("perceptual distance needs sides divisible by 16, got {h}x{w}")));
    }
    let fa = encoder.encode(a, Layer::R41)?;
    let fb = encoder.encode(b, Layer::R41)?;
    let mut total = 0.0;
    for l in PERCEPTUAL_LAYERS {
        let (ta, tb) = (&fa[&l], &fb[&l]);
        let (_, c, lh, lw) = ta.dims4()?;
        let hw = lh * lw;
        let (da, db) = (ta.data(), tb.data());
        let norms = |d: &[f32]| -> Vec<f64> {
            (0..hw)
                .map(|p| (0..c).map(|ch| f64::from(d[ch * hw + p]).powi(2)).sum::<f64>().sqrt() + UNIT_EPS)
                .collect()
        };
        let (na, nb) = (norms(da), norms(db));
        let cw = weights.and_then(|w| w.layers.get(&l));
        let mut acc = 0.0;
        for ch in 0..c {
            let wt = cw.map_or(1.0, |v| v[ch]);
            let mut s = 0.0;
            for p in 0..hw {
                let d = f64::from(da[ch * hw + p]) / na[p] - f64::from(db[ch * hw + p]) / nb[p];
                s += d * d;
            }
            acc += wt * s;
        }
        total += acc / (c * hw) as f64;
    }
    Ok(total / PERCEPTUAL_LAYERS.len() as f64)
}

/// Metrics of one manifest line. On failure `error` is set and the metrics
/// are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRow {
    pub id: usize,
    pub stylized: PathBuf,
    pub style: PathBuf,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub perceptual: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<PairRow>,
    /// Mean PSNR over rows with a finite value.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_perceptual: Option<f64>,
    /// Rows left out of the PSNR mean because the images were identical.
    pub infinite_psnr: usize,
    pub failed: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) => format!("{v:.6}"),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricReport {
    pub fn from_rows(rows: Vec<PairRow>) -> Self {
        let ok = || rows.iter().filter(|r| r.error.is_none());
        let infinite_psnr = ok().filter(|r| r.psnr.is_some_and(f64::is_infinite)).count();
        Self {
            mean_psnr: mean(ok().filter_map(|r| r.psnr).filter(|v| v.is_finite())),
            mean_ssim: mean(ok().filter_map(|r| r.ssim)),
            mean_perceptual: mean(ok().filter_map(|r| r.perceptual)),
            infinite_psnr,
            failed: rows.len() - ok().count(),
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,stylized,style,psnr_db,ssim,perceptual,error\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.id,
                csv_field(&r.stylized.display().to_string()),
                csv_field(&r.style.display().to_string()),
                fmt_metric(r.psnr),
                fmt_metric(r.ssim),
                fmt_metric(r.perceptual),
                csv_field(r.error.as_deref().unwrap_or(""))
            );
        }
        out.push_str("\nmetric,mean\n");
        let _ = writeln!(out, "psnr_db,{}", fmt_metric(self.mean_psnr));
        let _ = writeln!(out, "ssim,{}", fmt_metric(self.mean_ssim));
        let _ = writeln!(out, "perceptual,{}", fmt_metric(self.mean_perceptual));
        let _ = writeln!(out, "rows,{}", self.rows.len());
        let _ = writeln!(out, "failed_rows,{}", self.failed);
        let _ = writeln!(out, "infinite_psnr_rows_excluded,{}", self.infinite_psnr);
        out
    }
}

/// Parses `stylized<TAB>style` lines. Blank lines and `#` comments are
/// skipped; relative paths are resolved against `base`.
pub fn parse_manifest(src: &str, base: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut pairs = Vec::new();
    for (n, line) in src.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::Invalid(format!("manifest line {}: expected `stylized<TAB>style`", n + 1)))?;
        let resolve = |p: &str| {
            let p = PathBuf::from(p.trim());
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        pairs.push((resolve(a), resolve(b)));
    }
    Ok(pairs)
}

fn evaluate_pair(stylized: &Path, style: &Path, encoder: Option<&Encoder>, weights: Option<&PerceptualWeights>) -> Result<(f64, f64, Option<f64>)> {
    let a = Image::load(stylized)?;
    let b = Image::load(style)?;
    let p = psnr(&a, &b, 1.0)?;
    let s = ssim(&a, &b)?;
    let d = encoder.map(|e| perceptual_distance(&a, &b, e, weights)).transpose()?;
    Ok((p, s, d))
}

/// Evaluates every pair of a manifest file in order. Pairs that fail (missing
/// file, shape mismatch, too small) become error rows; an empty manifest is
/// an error. The perceptual column is filled only when an encoder is given.
pub fn evaluate_batch(
    manifest: impl AsRef<Path>,
    encoder: Option<&Encoder>,
    weights: Option<&PerceptualWeights>,
) -> Result<MetricReport> {
    let manifest = manifest.as_ref();
    let src = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let pairs = parse_manifest(&src, base)?;
    if pairs.is_empty() {
        return Err(Error::Invalid(format!("manifest {} lists no pairs", manifest.display())));
    }
    let rows = pairs
        .into_iter()
        .enumerate()
        .map(|(id, (stylized, style))| match evaluate_pair(&stylized, &style, encoder, weights) {
            Ok((p, s, d)) => PairRow { id, stylized, style, psnr: Some(p), ssim: Some(s), perceptual: d, error: None },
            Err(e) => {
                log::warn!("pair {id}: {e}");
                PairRow { id, stylized, style, psnr: None, ssim: None, perceptual: None, error: Some(e.to_string()) }
            }
        })
        .collect();
    Ok(MetricReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| ((y * 7 + x * 3 + c * 5) % 17) as f64 / 20.0 + 0.05)
    }

    #[test]
    fn psnr_of_offset_pair_is_twenty_db() {
        let a = ramp(8, 8);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &ramp(8, 4), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = ramp(16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let checker = Image::from_fn(16, 16, |y, x, _| if (x + y) % 2 == 0 { 0.9 } else { 0.1 });
        let inv = checker.map(|v| 1.0 - v);
        assert!(ssim(&checker, &inv).unwrap() < 0.0);
        assert!(ssim(&ramp(10, 16), &ramp(10, 16)).is_err());
    }

    #[test]
    fn gaussian_is_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t[0], t[10]);
        assert!(t[5] > t[4]);
    }

    #[test]
    fn report_means_skip_failures_and_infinities() {
        let row = |id, psnr: Option<f64>, error: Option<&str>| PairRow {
            id,
            stylized: PathBuf::from("a.png"),
            style: PathBuf::from("b.png"),
            psnr,
            ssim: psnr.map(|_| 0.5),
            perceptual: None,
            error: error.map(str::to_string),
        };
        let r = MetricReport::from_rows(vec![
            row(0, Some(10.0), None),
            row(1, Some(f64::INFINITY), None),
            row(2, None, Some("missing")),
            row(3, Some(20.0), None),
        ]);
        assert_eq!(r.mean_psnr, Some(15.0));
        assert_eq!(r.mean_ssim, Some(0.5));
        assert_eq!(r.infinite_psnr, 1);
        assert_eq!(r.failed, 1);
        let csv = r.to_csv();
        assert!(csv.contains("1,a.png,b.png,inf,"));
        assert!(csv.contains("infinite_psnr_rows_excluded,1"));
    }

    #[test]
    fn manifest_parsing() {
        let pairs = parse_manifest("# c\nx.png\ty.png\n\n/abs/a.png\tb.png\n", Path::new("/m")).unwrap();
        assert_eq!(pairs[0], (PathBuf::from("/m/x.png"), PathBuf::from("/m/y.png")));
        assert_eq!(pairs[1].0, PathBuf::from("/abs/a.png"));
        assert!(parse_manifest("no tab here\n", Path::new(".")).is_err());
    }
}
