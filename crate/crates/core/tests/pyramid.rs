mod common;

use std::time::Instant;

use common::*;
use lapstyle::pyramid::{decompose, downsample, reconstruct, upsample, ResampleKernel};
use lapstyle::Image;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn downsample_matches_dense_oracle() {
    let mut r = rng(11);
    for _ in 0..10 {
        let img = random_image(4, 4, &mut r);
        let got = downsample(&img).unwrap();
        assert_eq!(got.dims(), (2, 2));
        assert!(max_abs_diff(&got, &downsample_oracle(&img)) < 1e-6);
    }
    let img = random_image(12, 8, &mut r);
    assert!(max_abs_diff(&downsample(&img).unwrap(), &downsample_oracle(&img)) < 1e-12);
}

#[test]
fn upsample_matches_zero_insert_oracle() {
    let identity = Image::from_fn(2, 2, |y, x, _| if y == x { 1.0 } else { 0.0 });
    let got = upsample(&identity);
    assert_eq!(got.dims(), (4, 4));
    assert!(max_abs_diff(&got, &upsample_oracle(&identity)) < 1e-6);
    let mut r = rng(12);
    let img = random_image(3, 5, &mut r);
    assert!(max_abs_diff(&upsample(&img), &upsample_oracle(&img)) < 1e-12);
}

#[test]
fn constants_are_preserved() {
    let d = downsample(&Image::filled(4, 4, 0.5)).unwrap();
    assert!(d.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    let u = upsample(&Image::filled(2, 2, 0.25));
    assert_eq!(u.dims(), (4, 4));
    assert!(u.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    let one = upsample(&Image::filled(1, 1, 0.7));
    assert_eq!(one.dims(), (2, 2));
    assert!(one.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn odd_input_is_rejected() {
    let err = downsample(&Image::filled(3, 4, 0.0)).unwrap_err().to_string();
    assert!(err.contains("height"), "{err}");
    let err = decompose(&Image::filled(12, 12, 0.0), 3).unwrap_err().to_string();
    assert!(err.contains('8'), "{err}");
}

#[test]
fn ramp_pyramid_matches_oracle_definition() {
    let ramp = Image::from_fn(8, 8, |y, x, c| (y * 8 + x) as f64 / 64.0 + 0.1 * c as f64);
    let pyr = decompose(&ramp, 2).unwrap();
    let (res, low) = decompose_oracle(&ramp, 2);
    assert_eq!(pyr.residuals.len(), 2);
    for (a, b) in pyr.residuals.iter().zip(&res) {
        assert!(max_abs_diff(a, b) < 1e-6);
    }
    assert!(max_abs_diff(&pyr.low, &low) < 1e-6);
    assert!(max_abs_diff(&pyr.reconstruct().unwrap(), &ramp) < 1e-5);
    assert!(max_abs_diff(&reconstruct_oracle(&low, &res), &ramp) < 1e-5);
}

#[test]
fn single_level_structure() {
    let pyr = decompose(&Image::filled(2, 2, 0.4), 1).unwrap();
    assert_eq!(pyr.residuals[0].dims(), (2, 2));
    assert_eq!(pyr.low.dims(), (1, 1));
}

#[test]
fn zero_residual_chain() {
    let low = Image::filled(3, 2, 0.3);
    let zeros = [Image::filled(12, 8, 0.0), Image::filled(6, 4, 0.0)];
    let out = reconstruct(&low, &zeros).unwrap();
    assert_eq!(out.dims(), (12, 8));
    assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
}

#[test]
fn round_trip_over_random_images() {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let side = [8, 16, 32, 64][i % 4];
        let levels = 1 + (i / 4) % 3;
        let w = [8, 16, 32, 64][r.random_range(0..4)];
        let img = random_image(side, w, &mut r);
        let pyr = decompose(&img, levels).unwrap();
        worst = worst.max(max_abs_diff(&pyr.reconstruct().unwrap(), &img));
    }
    assert!(worst < 1e-5, "worst round-trip error {worst}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn kernel_taps_sum_to_one() {
    let k = ResampleKernel::binomial5();
    assert!((k.taps().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(k.taps(), &BINOMIAL);
}

fn image_strategy() -> impl Strategy<Value = (Image, usize)> {
    (1usize..=3, 1usize..=3, 1usize..=3).prop_flat_map(|(levels, hm, wm)| {
        let (h, w) = (hm << levels, wm << levels);
        (prop::collection::vec(0.0f64..1.0, h * w * 3), Just(levels))
            .prop_map(move |(data, levels)| (Image::new(h, w, data).unwrap(), levels))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_property((img, levels) in image_strategy()) {
        let pyr = decompose(&img, levels).unwrap();
        prop_assert!(max_abs_diff(&pyr.reconstruct().unwrap(), &img) < 1e-5);
    }

    #[test]
    fn constant_images_have_no_residuals(v in 0.0f64..1.0, levels in 1usize..=3, m in 1usize..=4) {
        let side = m << levels;
        let pyr = decompose(&Image::filled(side, side, v), levels).unwrap();
        for r in &pyr.residuals {
            prop_assert!(r.max_abs() < 1e-6);
        }
        prop_assert!(pyr.low.data().iter().all(|x| (x - v).abs() < 1e-9));
    }

    #[test]
    fn decomposition_is_linear((x, levels) in image_strategy(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let y = x.map(|v| (v * 7.3).sin());
        let mixed = add(&x.scale(a), &y.scale(b));
        let (px, py, pm) = (decompose(&x, levels).unwrap(), decompose(&y, levels).unwrap(), decompose(&mixed, levels).unwrap());
        for k in 0..levels {
            let expect = add(&px.residuals[k].scale(a), &py.residuals[k].scale(b));
            prop_assert!(max_abs_diff(&pm.residuals[k], &expect) < 1e-5);
        }
        prop_assert!(max_abs_diff(&pm.low, &add(&px.low.scale(a), &py.low.scale(b))) < 1e-5);
    }
}
