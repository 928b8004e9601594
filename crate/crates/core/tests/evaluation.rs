mod common;

use std::path::Path;

use common::*;
use lapstyle::evaluation::*;
use lapstyle::features::{Encoder, Layer};
use lapstyle::params::ParameterSet;
use lapstyle::{Error, Image};
use lapstyle_autograd::Tensor;
use rand::Rng;

fn mid_range(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_fn(h, w, |_, _, _| r.random_range(0.1..0.8))
}

#[test]
fn offset_pair_is_twenty_db() {
    let a = mid_range(16, 16, 80);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-6);
}

#[test]
fn psnr_matches_definition_and_falls_with_noise() {
    let mut r = rng(81);
    let (a, b) = (random_image(12, 20, &mut r), random_image(12, 20, &mut r));
    let m: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);

    let noise = random_image(12, 20, &mut r).map(|v| v - 0.5);
    let at = |s: f64| psnr(&a, &a.add(&noise.scale(s)).unwrap(), 1.0).unwrap();
    let values: Vec<f64> = [0.01, 0.05, 0.1, 0.3].iter().map(|&s| at(s)).collect();
    assert!(values.windows(2).all(|w| w[0] > w[1]), "{values:?}");
}

#[test]
fn ssim_matches_window_oracle() {
    let mut r = rng(82);
    for (h, w) in [(16, 16), (11, 11), (13, 19)] {
        let a = random_image(h, w, &mut r);
        let b = a.map(|v| 0.7 * v + 0.1).add(&random_image(h, w, &mut r).scale(0.2)).unwrap();
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn ssim_bounds() {
    let a = mid_range(16, 16, 83);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    let b = mid_range(16, 16, 84);
    let s = ssim(&a, &b).unwrap();
    assert!(s < 1.0 && s > -1.0);
    assert!(matches!(ssim(&Image::filled(10, 16, 0.2), &Image::filled(10, 16, 0.2)), Err(Error::Dimension(_))));
    assert!(matches!(ssim(&a, &Image::filled(16, 17, 0.2)), Err(Error::Dimension(_))));
}

/// Per-position unit vectors, squared differences averaged over channels and
/// positions, then over layers.
fn perceptual_oracle_with(a: &Image, b: &Image, enc: &Encoder, weight: impl Fn(Layer, usize) -> f64) -> f64 {
    let (fa, fb) = (enc.encode(a, Layer::R41).unwrap(), enc.encode(b, Layer::R41).unwrap());
    let mut total = 0.0;
    for l in PERCEPTUAL_LAYERS {
        let (_, c, h, w) = fa[&l].dims4().unwrap();
        let p = h * w;
        let (pa, pb) = (
            points(&fa[&l].data().iter().map(|&v| v as f64).collect::<Vec<_>>(), c, p),
            points(&fb[&l].data().iter().map(|&v| v as f64).collect::<Vec<_>>(), c, p),
        );
        let mut acc = 0.0;
        for (u, v) in pa.iter().zip(&pb) {
            let (nu, nv) = (euclid(u, &vec![0.0; c]) + 1e-10, euclid(v, &vec![0.0; c]) + 1e-10);
            for ch in 0..c {
                acc += weight(l, ch) * (u[ch] / nu - v[ch] / nv).powi(2);
            }
        }
        total += acc / (c * p) as f64;
    }
    total / PERCEPTUAL_LAYERS.len() as f64
}

#[test]
fn perceptual_distance_matches_oracle() {
    let enc = Encoder::surrogate(1);
    let (a, b) = (mid_range(32, 32, 85), mid_range(32, 32, 86));
    let d = perceptual_distance(&a, &b, &enc, None).unwrap();
    assert!((d - perceptual_oracle_with(&a, &b, &enc, |_, _| 1.0)).abs() < 1e-9 * d.max(1.0));
    assert!((d - perceptual_distance(&b, &a, &enc, None).unwrap()).abs() < 1e-12);
    assert_eq!(perceptual_distance(&a, &a, &enc, None).unwrap(), 0.0);
    assert!(matches!(perceptual_distance(&mid_range(24, 24, 1), &mid_range(24, 24, 2), &enc, None), Err(Error::Dimension(_))));
}

#[test]
fn perceptual_weights_scale_channels() {
    let dir = tempfile::tempdir().unwrap();
    let mut ps = ParameterSet::new();
    for l in PERCEPTUAL_LAYERS {
        ps.insert(format!("lin.{}", l.tag()), Tensor::from_fn(&[l.channels()], |i| (i % 3) as f32), false).unwrap();
    }
    let path = dir.path().join("lin.bin");
    lapstyle::archive::write(&path, &ps, serde_json::json!({})).unwrap();
    let weights = PerceptualWeights::load(&path).unwrap();

    let enc = Encoder::surrogate(1);
    let (a, b) = (mid_range(16, 16, 87), mid_range(16, 16, 88));
    let d = perceptual_distance(&a, &b, &enc, Some(&weights)).unwrap();
    let want = perceptual_oracle_with(&a, &b, &enc, |_, ch| (ch % 3) as f64);
    assert!((d - want).abs() < 1e-9 * want.max(1.0));

    let mut short = ParameterSet::new();
    short.insert("lin.1_1", Tensor::<f32>::zeros(&[64]), false).unwrap();
    lapstyle::archive::write(&path, &short, serde_json::json!({})).unwrap();
    assert!(matches!(PerceptualWeights::load(&path), Err(Error::MissingLayer(_))));
}

fn write_manifest(dir: &Path, pairs: &[(&str, &str)]) -> std::path::PathBuf {
    let text: String = pairs.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect();
    let path = dir.join("pairs.tsv");
    std::fs::write(&path, format!("# stylized\tstyle\n{text}")).unwrap();
    path
}

#[test]
fn batch_report_aggregates_rows() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = [mid_range(16, 16, 90), mid_range(16, 16, 91), mid_range(16, 16, 92)];
    for (i, img) in imgs.iter().enumerate() {
        img.save(dir.path().join(format!("{i}.png"))).unwrap();
    }
    let manifest = write_manifest(dir.path(), &[("0.png", "1.png"), ("1.png", "2.png"), ("2.png", "0.png")]);
    let enc = Encoder::surrogate(0);
    let report = evaluate_batch(&manifest, Some(&enc), None).unwrap();
    assert_eq!((report.rows.len(), report.failed, report.infinite_psnr), (3, 0, 0));
    let loaded: Vec<Image> = (0..3).map(|i| Image::load(dir.path().join(format!("{i}.png"))).unwrap()).collect();
    let want = [(0, 1), (1, 2), (2, 0)].iter().map(|&(i, j)| psnr(&loaded[i], &loaded[j], 1.0).unwrap()).sum::<f64>() / 3.0;
    assert!((report.mean_psnr.unwrap() - want).abs() < 1e-9);
    assert!(report.mean_perceptual.unwrap() > 0.0);
    let csv = report.to_csv();
    assert!(csv.starts_with("pair,stylized,style,psnr_db,ssim,perceptual,error\n"));
    assert!(csv.contains("\nrows,3\n") && csv.contains("failed_rows,0"));
}

#[test]
fn identical_pairs_are_excluded_from_the_psnr_mean() {
    let dir = tempfile::tempdir().unwrap();
    mid_range(16, 16, 93).save(dir.path().join("a.png")).unwrap();
    mid_range(16, 16, 94).save(dir.path().join("b.png")).unwrap();
    let manifest = write_manifest(dir.path(), &[("a.png", "a.png"), ("a.png", "b.png"), ("a.png", "missing.png")]);
    let report = evaluate_batch(&manifest, None, None).unwrap();
    assert_eq!((report.infinite_psnr, report.failed), (1, 1));
    assert_eq!(report.rows[0].psnr, Some(f64::INFINITY));
    assert!((report.rows[0].ssim.unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(report.mean_psnr, report.rows[1].psnr);
    assert!(report.rows[2].error.is_some());
    assert!(report.rows.iter().all(|r| r.perceptual.is_none()));
    assert!(report.to_csv().contains(",inf,"));
}

#[test]
fn empty_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[]);
    assert!(evaluate_batch(&manifest, None, None).is_err());
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "only-one-column\n").unwrap();
    assert!(evaluate_batch(&bad, None, None).is_err());
}
