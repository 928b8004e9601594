mod common;

use common::*;
use lapstyle::features::{Encoder, FeatureBundle, Layer};
use lapstyle::losses::*;
use lapstyle_autograd::gradcheck::check;
use lapstyle_autograd::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const L: Layer = Layer::R31;

fn bundle(l: Layer, v: Var) -> FeatureBundle {
    FeatureBundle::from([(l, v)])
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn sampler() -> Subsampler {
    Subsampler::new(0, 0, DEFAULT_MAX_SAMPLES)
}

fn eval(f: impl FnOnce(&Graph<f64>) -> Var) -> f64 {
    let g = Graph::<f64>::new();
    let v = f(&g);
    g.item(v)
}

fn remd(cs: &Tensor<f64>, s: &Tensor<f64>) -> f64 {
    eval(|g| {
        remd_loss(g, &bundle(L, g.constant(cs.clone())), &bundle(L, g.constant(s.clone())), &[L], &sampler()).unwrap()
    })
}

fn self_sim(cs: &Tensor<f64>, c: &Tensor<f64>) -> f64 {
    eval(|g| {
        self_similarity_loss(g, &bundle(L, g.constant(cs.clone())), &bundle(L, g.constant(c.clone())), &[L], &sampler())
            .unwrap()
    })
}

fn mean_var(cs: &Tensor<f64>, s: &Tensor<f64>) -> f64 {
    eval(|g| mean_variance_loss(g, &bundle(L, g.constant(cs.clone())), &bundle(L, g.constant(s.clone())), &[L]).unwrap())
}

fn perceptual(cs: &Tensor<f64>, c: &Tensor<f64>) -> f64 {
    eval(|g| perceptual_content_loss(g, &bundle(L, g.constant(cs.clone())), &bundle(L, g.constant(c.clone())), &[L]).unwrap())
}

#[test]
fn every_term_vanishes_at_identity() {
    let mut r = rng(51);
    for _ in 0..20 {
        let f = random_tensor(&[2, 3, 3, 4], &mut r, 0.0, 2.0);
        assert!(remd(&f, &f) < 1e-6);
        assert!(self_sim(&f, &f) < 1e-6);
        assert!(mean_var(&f, &f) < 1e-6);
        assert!(perceptual(&f, &f) < 1e-6);
    }
    let w = LossWeights::default();
    let id = eval(|g| {
        let x = g.constant(random_tensor(&[2, 3, 4, 4], &mut r, 0.0, 1.0));
        let s = g.constant(random_tensor(&[1, 3, 4, 4], &mut r, 0.0, 1.0));
        let fx: FeatureBundle = Layer::ALL.iter().map(|&l| (l, g.constant(random_tensor(&[2, 2, 2, 2], &mut r, 0.0, 1.0)))).collect();
        let fs: FeatureBundle = Layer::ALL.iter().map(|&l| (l, g.constant(random_tensor(&[1, 2, 2, 2], &mut r, 0.0, 1.0)))).collect();
        identity_loss_with_features(g, x, x, s, s, &fx, &fx, &fs, &fs, &w).unwrap()
    });
    assert!(id < 1e-6, "{id}");
}

#[test]
fn identity_loss_matches_formula_oracle() {
    let encoder = Encoder::surrogate(7).cast::<f64>();
    let mut r = rng(52);
    let imgs: Vec<_> = (0..4).map(|_| random_image(16, 16, &mut r)).collect();
    let (x_cc, x_c, x_ss, x_s) = (&imgs[0], &imgs[1], &imgs[2], &imgs[3]);
    for weighting in [IdentityPixelWeighting::Both, IdentityPixelWeighting::FirstOnly] {
        let w = LossWeights { lambda_i1: 2.0, lambda_i2: 0.5, identity_pixel: weighting, ..LossWeights::default() };
        let got = eval(|g| {
            let enc = encoder.bind(g);
            let v = |i: &lapstyle::Image| g.constant(i.to_tensor::<f64>());
            identity_loss(g, &encoder, &enc, v(x_cc), v(x_c), v(x_ss), v(x_s), &w).unwrap()
        });
        let pixel = |a: &lapstyle::Image, b: &lapstyle::Image| euclid(a.data(), b.data());
        let (pc, ps) = (pixel(x_cc, x_c), pixel(x_ss, x_s));
        let pix = match weighting {
            IdentityPixelWeighting::Both => 2.0 * (pc + ps),
            IdentityPixelWeighting::FirstOnly => 2.0 * pc + ps,
        };
        let feats = |i: &lapstyle::Image| encoder.encode(i, Layer::R51).unwrap();
        let (f_cc, f_c, f_ss, f_s) = (feats(x_cc), feats(x_c), feats(x_ss), feats(x_s));
        let mut feat = 0.0;
        for l in Layer::ALL {
            feat += euclid(f_cc[&l].data(), f_c[&l].data()) + euclid(f_ss[&l].data(), f_s[&l].data());
        }
        let want = pix + 0.5 * feat;
        assert!((got - want).abs() < 1e-4 * want.max(1.0), "{weighting:?}: {got} vs {want}");
    }
    let zero = LossWeights { lambda_i1: 0.0, lambda_i2: 0.0, ..LossWeights::default() };
    let v = eval(|g| {
        let enc = encoder.bind(g);
        let c = |i: &lapstyle::Image| g.constant(i.to_tensor::<f64>());
        identity_loss(g, &encoder, &enc, c(x_cc), c(x_c), c(x_ss), c(x_s), &zero).unwrap()
    });
    assert_eq!(v, 0.0);
}

#[test]
fn remd_matches_exhaustive_oracle() {
    let mut r = rng(53);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = r.random_range(1..=3);
        let (ps, pcs) = (r.random_range(1..=6), r.random_range(1..=6));
        let s = random_tensor(&[1, c, 1, ps], &mut r, -1.0, 1.0);
        let cs = random_tensor(&[1, c, 1, pcs], &mut r, -1.0, 1.0);
        let want = remd_oracle(&points(s.data(), c, ps), &points(cs.data(), c, pcs));
        worst = worst.max((remd(&cs, &s) - want).abs());
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn remd_on_three_by_three_cost() {
    // Explicit costs realized by unit vectors in the plane.
    let angles_s = [0.1f64, 1.3, 2.2];
    let angles_cs = [0.4f64, 2.9, -0.7];
    let s = Tensor::new(&[1, 2, 1, 3], angles_s.iter().map(|a| a.cos()).chain(angles_s.iter().map(|a| a.sin())).collect()).unwrap();
    let cs = Tensor::new(&[1, 2, 1, 3], angles_cs.iter().map(|a| a.cos()).chain(angles_cs.iter().map(|a| a.sin())).collect()).unwrap();
    let cost: Vec<Vec<f64>> = angles_s.iter().map(|a| angles_cs.iter().map(|b| 1.0 - (a - b).cos()).collect()).collect();
    assert!((remd(&cs, &s) - remd_from_cost(&cost)).abs() < 1e-6);
}

#[test]
fn remd_special_cases() {
    let mut r = rng(54);
    let s = random_tensor(&[1, 3, 2, 2], &mut r, 0.1, 1.0);
    let perm = [2usize, 0, 3, 1];
    let cs = Tensor::from_fn(&[1, 3, 2, 2], |i| s.data()[(i / 4) * 4 + perm[i % 4]]);
    assert!(remd(&cs, &s) < 1e-6);
    let a = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
    let b = Tensor::new(&[1, 2, 1, 3], vec![0.0, 0.0, 0.0, 1.0, 3.0, 0.5]).unwrap();
    assert!((remd(&a, &b) - 1.0).abs() < 1e-9);
}

#[test]
fn self_similarity_matches_enumeration() {
    let mut r = rng(55);
    for _ in 0..10 {
        let c = random_tensor(&[1, 3, 2, 2], &mut r, -1.0, 1.0);
        let cs = random_tensor(&[1, 3, 2, 2], &mut r, -1.0, 1.0);
        let want = self_similarity_oracle(&points(c.data(), 3, 4), &points(cs.data(), 3, 4));
        assert!((self_sim(&cs, &c) - want).abs() < 1e-6);
    }
}

#[test]
fn self_similarity_is_scale_invariant_per_position() {
    let mut r = rng(56);
    let c = random_tensor(&[1, 4, 2, 3], &mut r, 0.1, 1.0);
    let scales: Vec<f64> = (0..6).map(|_| r.random_range(0.2..5.0)).collect();
    let cs = Tensor::from_fn(&[1, 4, 2, 3], |i| c.data()[i] * scales[i % 6]);
    assert!(self_sim(&cs, &c) < 1e-5);
}

#[test]
fn mean_variance_matches_hand_values() {
    // channel 0: [1, 3] mean 2 std 1; channel 1: [0, 4] mean 2 std 2
    let a = Tensor::new(&[1, 2, 1, 2], vec![1.0, 3.0, 0.0, 4.0]).unwrap();
    // channel 0: [2, 2] mean 2 std 0; channel 1: [5, 7] mean 6 std 1
    let b = Tensor::new(&[1, 2, 1, 2], vec![2.0, 2.0, 5.0, 7.0]).unwrap();
    let want = mean_variance_oracle(a.data(), b.data(), 2, 2, 2);
    let by_hand = 4.0 + (1.0f64 + 1.0).sqrt();
    assert!((want - by_hand).abs() < 1e-4);
    assert!((mean_var(&a, &b) - want).abs() < 1e-6);
    let perm = Tensor::new(&[1, 2, 1, 2], vec![3.0, 1.0, 4.0, 0.0]).unwrap();
    assert!(mean_var(&perm, &a) < 1e-6);
}

#[test]
fn mean_variance_and_perceptual_match_oracles_on_batches() {
    let mut r = rng(57);
    for _ in 0..10 {
        let cs = random_tensor(&[3, 3, 2, 2], &mut r, 0.0, 2.0);
        let s = random_tensor(&[1, 3, 3, 2], &mut r, 0.0, 2.0);
        let c = random_tensor(&[3, 3, 2, 2], &mut r, 0.0, 2.0);
        let mut mv = 0.0;
        let mut pc = 0.0;
        for n in 0..3 {
            let item = &cs.data()[n * 12..(n + 1) * 12];
            mv += mean_variance_oracle(item, s.data(), 3, 4, 6);
            pc += perceptual_oracle(item, &c.data()[n * 12..(n + 1) * 12], 3, 4);
        }
        assert!((mean_var(&cs, &s) - mv / 3.0).abs() < 1e-6);
        assert!((perceptual(&cs, &c) - pc / 3.0).abs() < 1e-6);
    }
}

#[test]
fn perceptual_ignores_per_channel_affine_maps() {
    let mut r = rng(58);
    let c = random_tensor(&[1, 3, 3, 3], &mut r, 0.0, 1.0);
    let (a, b) = ([0.5, 2.0, 7.0], [-1.0, 0.3, 4.0]);
    let cs = Tensor::from_fn(&[1, 3, 3, 3], |i| a[i / 9] * c.data()[i] + b[i / 9]);
    assert!(perceptual(&cs, &c) < 1e-5);
}

fn assert_gradients(inputs: &[Tensor<f64>], f: impl Fn(&Graph<f64>, &[Var]) -> Var) {
    let report = check(inputs, 1e-3, |g, v| Ok(f(g, v))).unwrap();
    for (i, cmp) in report.iter().enumerate() {
        let err = cmp.relative_error();
        assert!(err < 1e-3, "input {i}: relative error {err}\n{:?}\n{:?}", cmp.analytic, cmp.numeric);
    }
}

#[test]
fn stage2_term_gradients_match_finite_differences() {
    let mut r = rng(59);
    let a = random_tensor(&[1, 3, 2, 2], &mut r, 0.1, 1.0);
    let b = random_tensor(&[1, 3, 2, 2], &mut r, 0.1, 1.0);
    let inputs = [a, b];
    assert_gradients(&inputs, |g, v| mean_variance_loss(g, &bundle(L, v[0]), &bundle(L, v[1]), &[L]).unwrap());
    assert_gradients(&inputs, |g, v| perceptual_content_loss(g, &bundle(L, v[0]), &bundle(L, v[1]), &[L]).unwrap());
    assert_gradients(&inputs, |g, v| {
        self_similarity_loss(g, &bundle(L, v[0]), &bundle(L, v[1]), &[L], &sampler()).unwrap()
    });
    assert_gradients(&inputs, |g, v| remd_loss(g, &bundle(L, v[0]), &bundle(L, v[1]), &[L], &sampler()).unwrap());
}

fn fixture_images(seed: u64, side: usize) -> Vec<lapstyle::Image> {
    let mut r = rng(seed);
    (0..5).map(|_| random_image(side, side, &mut r)).collect()
}

#[test]
fn stage1_total_is_the_weighted_sum() {
    let encoder = Encoder::surrogate(3).cast::<f64>();
    let imgs = fixture_images(60, 16);
    let w = LossWeights::default();
    assert_eq!(w.stage1_coefficients(), [1.0, 3.0, 1.0]);
    assert_eq!(w.stage1_coefficients().iter().sum::<f64>(), 5.0);
    let g = Graph::<f64>::new();
    let enc = encoder.bind(&g);
    let v = |i: usize| g.constant(imgs[i].to_tensor::<f64>());
    let x = Stage1Images { x_c: v(0), x_s: v(1), x_cs: v(2), x_cc: v(3), x_ss: v(4) };
    let obj = stage1_objective(&g, &encoder, &enc, &x, &w).unwrap();
    let term = |n: &str| obj.report.get(n).unwrap();
    let want = w.lambda_c * term("L_c") + w.lambda_s * term("L_s") + term("L_i");
    assert!((g.item(obj.total) - want).abs() < 1e-6 * want.max(1.0));
    assert!((obj.report.total - want).abs() < 1e-6 * want.max(1.0));

    let same = Stage1Images { x_c: v(0), x_s: v(0), x_cs: v(0), x_cc: v(0), x_ss: v(0) };
    let obj = stage1_objective(&g, &encoder, &enc, &same, &w).unwrap();
    assert!(obj.report.terms.iter().all(|(_, v)| *v < 1e-6), "{:?}", obj.report.terms);
}

fn stage2_report(encoder: &Encoder<f64>, imgs: &[lapstyle::Image], w: &LossWeights, idx: [usize; 3]) -> (f64, LossReport) {
    let g = Graph::<f64>::new();
    let enc = encoder.bind(&g);
    let v = |i: usize| g.constant(imgs[i].to_tensor::<f64>());
    let obj = stage2_objective(&g, encoder, &enc, v(idx[0]), v(idx[1]), v(idx[2]), w, Stage2Terms::default(), &sampler()).unwrap();
    (g.item(obj.total), obj.report)
}

#[test]
fn stage2_total_is_the_weighted_sum() {
    let encoder = Encoder::surrogate(4).cast::<f64>();
    let imgs = fixture_images(61, 32);
    let w = LossWeights::default();
    let (total, rep) = stage2_report(&encoder, &imgs, &w, [0, 1, 2]);
    let t = |n: &str| rep.get(n).unwrap();
    let want = 1.0 * (1.0 * t("l_p") + 15.0 * t("l_ss")) + 50.0 * t("l_mv") + 80.0 * t("l_r");
    assert!((total - want).abs() < 1e-6 * want.max(1.0));
    assert!((rep.total - want).abs() < 1e-6 * want.max(1.0));

    let no_content = LossWeights { alpha: 0.0, ..w };
    let (total0, rep0) = stage2_report(&encoder, &imgs, &no_content, [0, 1, 2]);
    assert_eq!(rep0.total, 50.0 * rep0.get("l_mv").unwrap() + 80.0 * rep0.get("l_r").unwrap());
    assert!((total0 - rep0.total).abs() < 1e-9 * rep0.total.max(1.0));

    let doubled = LossWeights { lambda_4: 160.0, ..w };
    let (_, rep2) = stage2_report(&encoder, &imgs, &doubled, [0, 1, 2]);
    assert!((rep2.total - rep.total - 80.0 * t("l_r")).abs() < 1e-9 * rep.total.max(1.0));

    let (_, same) = stage2_report(&encoder, &imgs, &w, [0, 0, 0]);
    assert!(same.terms.iter().all(|(_, v)| *v < 1e-6), "{:?}", same.terms);
}

#[test]
fn disabled_terms_are_reported_as_zero() {
    let encoder = Encoder::surrogate(5).cast::<f64>();
    let imgs = fixture_images(62, 32);
    let w = LossWeights::default();
    let all = stage2_report(&encoder, &imgs, &w, [0, 1, 2]).1;
    for (name, off) in [
        ("l_p", Stage2Terms { lp: false, ..Default::default() }),
        ("l_ss", Stage2Terms { lss: false, ..Default::default() }),
        ("l_mv", Stage2Terms { lmv: false, ..Default::default() }),
        ("l_r", Stage2Terms { lr: false, ..Default::default() }),
    ] {
        let g = Graph::<f64>::new();
        let enc = encoder.bind(&g);
        let v = |i: usize| g.constant(imgs[i].to_tensor::<f64>());
        let obj = stage2_objective(&g, &encoder, &enc, v(0), v(1), v(2), &w, off, &sampler()).unwrap();
        for (term, value) in &obj.report.terms {
            if term == name {
                assert_eq!(*value, 0.0);
            } else {
                assert!((value - all.get(term).unwrap()).abs() < 1e-12, "{term}");
            }
        }
    }
}

#[test]
fn subsampling_is_seeded_and_capped() {
    let s = Subsampler::new(9, 3, 5);
    let a = s.indices(Layer::R31, SampleRole::Style, 40).unwrap();
    assert_eq!(a, s.indices(Layer::R31, SampleRole::Style, 40).unwrap());
    assert_eq!(a.len(), 5);
    assert!(a.windows(2).all(|w| w[0] < w[1]) && a.iter().all(|&i| i < 40));
    assert_ne!(a, Subsampler::new(9, 4, 5).indices(Layer::R31, SampleRole::Style, 40).unwrap());
    assert!(s.indices(Layer::R31, SampleRole::Style, 5).is_none());
    // capped loss is still zero at identity
    let mut r = rng(63);
    let f = random_tensor(&[1, 3, 4, 4], &mut r, 0.1, 1.0);
    let v = eval(|g| {
        let b = bundle(L, g.constant(f.clone()));
        self_similarity_loss(g, &b, &b, &[L], &Subsampler::new(1, 2, 6)).unwrap()
    });
    assert!(v < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn terms_are_non_negative(seed in 0u64..10_000, c in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let mut r = rng(seed);
        let a = random_tensor(&[2, c, h, w], &mut r, -1.0, 2.0);
        let b = random_tensor(&[2, c, h, w], &mut r, -1.0, 2.0);
        prop_assert!(remd(&a, &b) >= -1e-12);
        prop_assert!(self_sim(&a, &b) >= 0.0);
        prop_assert!(mean_var(&a, &b) >= 0.0);
        prop_assert!(perceptual(&a, &b) >= 0.0);
    }

    #[test]
    fn remd_equals_oracle_on_small_sets(seed in 0u64..10_000, c in 1usize..4, ps in 1usize..7, pcs in 1usize..7) {
        let mut r = rng(seed);
        let s = random_tensor(&[1, c, 1, ps], &mut r, -1.0, 1.0);
        let cs = random_tensor(&[1, c, 1, pcs], &mut r, -1.0, 1.0);
        let want = remd_oracle(&points(s.data(), c, ps), &points(cs.data(), c, pcs));
        prop_assert!((remd(&cs, &s) - want).abs() < 1e-6);
    }

    #[test]
    fn log_lines_round_trip(values in prop::collection::vec(0.0f64..1e6, 4), step in 0u64..1_000_000) {
        let names = ["l_p", "l_ss", "l_mv", "l_r"];
        let rep = LossReport {
            terms: names.iter().zip(&values).map(|(n, v)| (n.to_string(), *v)).collect(),
            total: values.iter().sum(),
            seed: None,
        };
        let (s, parsed) = LossReport::parse_log_line(&rep.log_line(step)).unwrap();
        prop_assert_eq!(s, step);
        prop_assert_eq!(parsed.terms, rep.terms);
        prop_assert_eq!(parsed.total, rep.total);
    }
}
