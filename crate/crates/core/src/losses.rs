//! Loss terms and the two training objectives.
//!
//! Every term takes NCHW feature bundles and returns a single-element value.
//! Per-sample distances are averaged over the batch; a reference bundle with
//! batch size 1 (the style image) is shared across the batch. `‖·‖₂` is the
//! plain (not squared) Euclidean norm of the flattened difference.

use std::fmt::Write as _;

use lapstyle_autograd::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{channel_stats, normalize_mv, Encoder, FeatureBundle, Layer};
use crate::params::Bound;

/// Guard added (squared) to vector norms inside cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;
/// Guard on row sums of self-similarity matrices.
pub const ROW_SUM_EPS: f64 = 1e-8;
/// Default cap on sampled positions for the pairwise terms.
pub const DEFAULT_MAX_SAMPLES: usize = 1024;

pub const STAGE1_CONTENT_LAYERS: [Layer; 2] = [Layer::R41, Layer::R51];
pub const ALL_LAYERS: [Layer; 5] = Layer::ALL;
pub const STAGE2_STAT_LAYERS: [Layer; 4] = [Layer::R11, Layer::R21, Layer::R31, Layer::R41];
pub const STAGE2_PAIR_LAYERS: [Layer; 2] = [Layer::R31, Layer::R41];

/// Which identity pixel terms `lambda_i1` scales.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityPixelWeighting {
    /// `lambda_i1 * (|x_cc - x_c| + |x_ss - x_s|)`
    #[default]
    Both,
    /// `lambda_i1 * |x_cc - x_c| + |x_ss - x_s|`
    FirstOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_i1: f64,
    pub lambda_i2: f64,
    pub identity_pixel: IdentityPixelWeighting,
    pub alpha: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub lambda_4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_s: 3.0,
            lambda_i1: 1.0,
            lambda_i2: 50.0,
            identity_pixel: IdentityPixelWeighting::Both,
            alpha: 1.0,
            lambda_1: 1.0,
            lambda_2: 15.0,
            lambda_3: 50.0,
            lambda_4: 80.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_c", self.lambda_c),
            ("lambda_s", self.lambda_s),
            ("lambda_i1", self.lambda_i1),
            ("lambda_i2", self.lambda_i2),
            ("alpha", self.alpha),
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_3", self.lambda_3),
            ("lambda_4", self.lambda_4),
        ];
        for (key, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config { key: key.into(), reason: format!("must be a non-negative number, got {v}") });
            }
        }
        Ok(())
    }

    /// Coefficients of `(L_c, L_s, L_i)` in the first-stage total.
    pub fn stage1_coefficients(&self) -> [f64; 3] {
        [self.lambda_c, self.lambda_s, 1.0]
    }

    /// Coefficients of `(l_p, l_ss, l_mv, l_r)` in the second-stage total.
    pub fn stage2_coefficients(&self) -> [f64; 4] {
        [self.alpha * self.lambda_1, self.alpha * self.lambda_2, self.lambda_3, self.lambda_4]
    }
}

/// Term values and weighted total of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
    /// Seed of the position subsampler, when one was used.
    pub seed: Option<u64>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// `step,name:value,...,total:value`
    pub fn log_line(&self, step: u64) -> String {
        let mut s = step.to_string();
        for (n, v) in &self.terms {
            let _ = write!(s, ",{n}:{v}");
        }
        let _ = write!(s, ",total:{}", self.total);
        s
    }

    /// Inverse of [`log_line`](Self::log_line).
    pub fn parse_log_line(line: &str) -> Result<(u64, LossReport)> {
        let bad = || Error::Invalid(format!("malformed loss log line: {line}"));
        let mut parts = line.trim().split(',');
        let step = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let mut terms = Vec::new();
        let mut total = None;
        for p in parts {
            let (n, v) = p.split_once(':').ok_or_else(bad)?;
            let v: f64 = v.parse().map_err(|_| bad())?;
            if n == "total" {
                total = Some(v);
            } else {
                terms.push((n.to_string(), v));
            }
        }
        Ok((step, LossReport { terms, total: total.ok_or_else(bad)?, seed: None }))
    }
}

/// A differentiable objective and its report.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    /// Unweighted term values, in report order; `None` for disabled terms.
    pub terms: Vec<(&'static str, Option<Var>)>,
    pub report: LossReport,
}

fn build_objective<T: Real>(
    g: &Graph<T>,
    terms: Vec<(&'static str, Option<Var>)>,
    coefficients: &[f64],
    seed: Option<u64>,
) -> Objective {
    let mut total: Option<Var> = None;
    let mut report_terms = Vec::with_capacity(terms.len());
    let mut report_total = 0.0;
    for ((name, v), &w) in terms.iter().zip(coefficients) {
        let value = v.map_or(0.0, |v| g.item(v).as_f64());
        report_terms.push((name.to_string(), value));
        report_total += w * value;
        if let Some(v) = *v {
            let weighted = g.scale(v, T::from_f64_lossy(w));
            total = Some(match total {
                Some(t) => g.add(t, weighted).expect("scalar terms"),
                None => weighted,
            });
        }
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::zeros(&[1])));
    Objective { total, terms, report: LossReport { terms: report_terms, total: report_total, seed } }
}

fn layer<'a>(bundle: &'a FeatureBundle, l: Layer) -> Result<Var> {
    bundle.get(&l).copied().ok_or_else(|| Error::MissingLayer(l.to_string()))
}

/// Repeats a batch-1 reference to match `n`.
fn match_batch<T: Real>(g: &Graph<T>, v: Var, n: usize) -> Result<Var> {
    let b = g.shape(v)[0];
    if b == n {
        Ok(v)
    } else if b == 1 {
        Ok(g.repeat_batch(v, n)?)
    } else {
        Err(Error::Dimension(format!("batch sizes {n} and {b} are incompatible")))
    }
}

/// Euclidean norm of each batch item of `diff`, shaped `[N]`.
fn per_sample_norm<T: Real>(g: &Graph<T>, diff: Var) -> Result<Var> {
    let shape = g.shape(diff);
    let n = shape[0];
    let rest: usize = shape[1..].iter().product();
    let flat = g.reshape(diff, &[n, rest])?;
    Ok(g.sqrt(g.sum_last(g.square(flat))))
}

fn batch_mean<T: Real>(g: &Graph<T>, per_sample: Var) -> Var {
    g.mean_last(per_sample)
}

/// Batch-mean Euclidean distance between two tensors.
pub fn l2_distance<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    let b = match_batch(g, b, g.shape(a)[0])?;
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Dimension(format!("distance between {sa:?} and {sb:?}")));
    }
    Ok(batch_mean(g, per_sample_norm(g, g.sub(a, b)?)?))
}

fn sum_scalars<T: Real>(g: &Graph<T>, vals: Vec<Var>) -> Result<Var> {
    let mut it = vals.into_iter();
    let first = it.next().ok_or_else(|| Error::Invalid("loss over an empty layer set".into()))?;
    it.try_fold(first, |acc, v| Ok(g.add(acc, v)?))
}

/// `sum_t |mu(F_cs) - mu(F_s)| + |sigma(F_cs) - sigma(F_s)|`.
pub fn mean_variance_loss<T: Real>(
    g: &Graph<T>,
    f_cs: &FeatureBundle,
    f_s: &FeatureBundle,
    layers: &[Layer],
) -> Result<Var> {
    let mut per_layer = Vec::with_capacity(layers.len());
    for &l in layers {
        let (a, b) = (layer(f_cs, l)?, layer(f_s, l)?);
        let (ca, cb) = (g.shape(a)[1], g.shape(b)[1]);
        if ca != cb {
            return Err(Error::ShapeMismatch { name: l.to_string(), expected: g.shape(b), found: g.shape(a) });
        }
        let n = g.shape(a)[0];
        let (mu_a, sd_a) = channel_stats(g, a)?;
        let (mu_b, sd_b) = channel_stats(g, b)?;
        let mu_b = match_batch(g, mu_b, n)?;
        let sd_b = match_batch(g, sd_b, n)?;
        let mean_term = per_sample_norm(g, g.sub(mu_a, mu_b)?)?;
        let std_term = per_sample_norm(g, g.sub(sd_a, sd_b)?)?;
        per_layer.push(batch_mean(g, g.add(mean_term, std_term)?));
    }
    sum_scalars(g, per_layer)
}

/// `sum_t |norm(F_cs) - norm(F_c)|` with channel-wise mean-variance
/// normalization.
pub fn perceptual_content_loss<T: Real>(
    g: &Graph<T>,
    f_cs: &FeatureBundle,
    f_c: &FeatureBundle,
    layers: &[Layer],
) -> Result<Var> {
    let mut per_layer = Vec::with_capacity(layers.len());
    for &l in layers {
        let (a, b) = (layer(f_cs, l)?, layer(f_c, l)?);
        let b = match_batch(g, b, g.shape(a)[0])?;
        if g.shape(a) != g.shape(b) {
            return Err(Error::ShapeMismatch { name: l.to_string(), expected: g.shape(b), found: g.shape(a) });
        }
        let diff = g.sub(normalize_mv(g, a)?, normalize_mv(g, b)?)?;
        per_layer.push(batch_mean(g, per_sample_norm(g, diff)?));
    }
    sum_scalars(g, per_layer)
}

/// Which feature set a subsample is drawn for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleRole {
    Style,
    Stylized,
    Content,
}

/// Seeded uniform position sampler for the pairwise terms. Streams are
/// derived from `(seed, step, layer, role)` so results do not depend on
/// evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Subsampler {
    pub seed: u64,
    pub step: u64,
    pub max_samples: usize,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Subsampler {
    pub fn new(seed: u64, step: u64, max_samples: usize) -> Self {
        Self { seed, step, max_samples }
    }

    /// Sorted positions to keep out of `count`, or `None` to keep all.
    pub fn indices(&self, layer: Layer, role: SampleRole, count: usize) -> Option<Vec<usize>> {
        if count <= self.max_samples {
            return None;
        }
        let key = splitmix(splitmix(splitmix(self.seed) ^ self.step) ^ ((layer as u64) << 8 | role as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut idx = rand::seq::index::sample(&mut rng, count, self.max_samples).into_vec();
        idx.sort_unstable();
        Some(idx)
    }
}

/// `N x C x H x W -> N x P x C` with unit-length rows (`eps`-guarded) after
/// optional position selection.
fn unit_positions<T: Real>(g: &Graph<T>, f: Var, idx: Option<&[usize]>) -> Result<Var> {
    let s = g.shape(f);
    let [n, c, h, w] = s[..] else {
        return Err(Error::Dimension(format!("expected NCHW feature map, got {s:?}")));
    };
    let mut flat = g.reshape(f, &[n, c, h * w])?;
    if let Some(idx) = idx {
        flat = g.select_last(flat, idx)?;
    }
    let rows = g.transpose(flat)?;
    let norms = g.sqrt(g.offset(g.sum_last(g.square(rows)), T::from_f64_lossy(COSINE_EPS * COSINE_EPS)));
    Ok(g.div(rows, g.broadcast_last(norms, c))?)
}

/// Pairwise cosine distances `1 - cos(a_i, b_j)`, `N x P_a x P_b`.
fn cosine_cost<T: Real>(g: &Graph<T>, a_unit: Var, b_unit: Var) -> Result<Var> {
    let sim = g.matmul(a_unit, g.transpose(b_unit)?)?;
    Ok(g.offset(g.neg(sim), T::one()))
}

/// Relaxed earth mover's distance
/// `sum_t max(mean_i min_j C_ij, mean_j min_i C_ij)` with
/// `C_ij = 1 - cos(F_s,i, F_cs,j)`.
pub fn remd_loss<T: Real>(
    g: &Graph<T>,
    f_cs: &FeatureBundle,
    f_s: &FeatureBundle,
    layers: &[Layer],
    sampler: &Subsampler,
) -> Result<Var> {
    let mut per_layer = Vec::with_capacity(layers.len());
    for &l in layers {
        let (cs, s) = (layer(f_cs, l)?, layer(f_s, l)?);
        let n = g.shape(cs)[0];
        let s = match_batch(g, s, n)?;
        let (scs, ss) = (g.shape(cs), g.shape(s));
        if scs.len() != 4 || ss.len() != 4 || scs[1] != ss[1] {
            return Err(Error::ShapeMismatch { name: l.to_string(), expected: ss, found: scs });
        }
        let i_s = sampler.indices(l, SampleRole::Style, ss[2] * ss[3]);
        let i_cs = sampler.indices(l, SampleRole::Stylized, scs[2] * scs[3]);
        let a = unit_positions(g, s, i_s.as_deref())?;
        let b = unit_positions(g, cs, i_cs.as_deref())?;
        let cost = cosine_cost(g, a, b)?;
        let rows = g.mean_last(g.min_last(cost));
        let cols = g.mean_last(g.min_last(g.transpose(cost)?));
        per_layer.push(batch_mean(g, g.maximum(rows, cols)?));
    }
    sum_scalars(g, per_layer)
}

/// Row-normalized pairwise cosine-distance matrix, `N x P x P`.
fn self_similarity<T: Real>(g: &Graph<T>, unit: Var) -> Result<Var> {
    let d = cosine_cost(g, unit, unit)?;
    let p = *g.shape(d).last().expect("square");
    let sums = g.offset(g.sum_last(d), T::from_f64_lossy(ROW_SUM_EPS));
    Ok(g.div(d, g.broadcast_last(sums, p))?)
}

/// `sum_t mean_ij |D^c_ij / sum_j D^c_ij - D^cs_ij / sum_j D^cs_ij|` over
/// pairwise cosine-distance matrices built on a shared position sample.
pub fn self_similarity_loss<T: Real>(
    g: &Graph<T>,
    f_cs: &FeatureBundle,
    f_c: &FeatureBundle,
    layers: &[Layer],
    sampler: &Subsampler,
) -> Result<Var> {
    let mut per_layer = Vec::with_capacity(layers.len());
    for &l in layers {
        let (cs, c) = (layer(f_cs, l)?, layer(f_c, l)?);
        let c = match_batch(g, c, g.shape(cs)[0])?;
        let (scs, sc) = (g.shape(cs), g.shape(c));
        if scs != sc || scs.len() != 4 {
            return Err(Error::ShapeMismatch { name: l.to_string(), expected: sc, found: scs });
        }
        let idx = sampler.indices(l, SampleRole::Content, scs[2] * scs[3]);
        let dc = self_similarity(g, unit_positions(g, c, idx.as_deref())?)?;
        let dcs = self_similarity(g, unit_positions(g, cs, idx.as_deref())?)?;
        let (n, p) = (scs[0], g.shape(dc)[1]);
        let diff = g.reshape(g.abs(g.sub(dc, dcs)?), &[n, p * p])?;
        per_layer.push(batch_mean(g, g.mean_last(diff)));
    }
    sum_scalars(g, per_layer)
}

/// Identity loss from images and their features.
#[allow(clippy::too_many_arguments)]
pub fn identity_loss_with_features<T: Real>(
    g: &Graph<T>,
    x_cc: Var,
    x_c: Var,
    x_ss: Var,
    x_s: Var,
    f_cc: &FeatureBundle,
    f_c: &FeatureBundle,
    f_ss: &FeatureBundle,
    f_s: &FeatureBundle,
    weights: &LossWeights,
) -> Result<Var> {
    let w = |v: f64| T::from_f64_lossy(v);
    let pc = l2_distance(g, x_cc, x_c)?;
    let ps = l2_distance(g, x_ss, x_s)?;
    let pixel = match weights.identity_pixel {
        IdentityPixelWeighting::Both => g.scale(g.add(pc, ps)?, w(weights.lambda_i1)),
        IdentityPixelWeighting::FirstOnly => g.add(g.scale(pc, w(weights.lambda_i1)), ps)?,
    };
    let mut feats = Vec::with_capacity(ALL_LAYERS.len());
    for l in ALL_LAYERS {
        let a = l2_distance(g, layer(f_cc, l)?, layer(f_c, l)?)?;
        let b = l2_distance(g, layer(f_ss, l)?, layer(f_s, l)?)?;
        feats.push(g.add(a, b)?);
    }
    let feature = g.scale(sum_scalars(g, feats)?, w(weights.lambda_i2));
    Ok(g.add(pixel, feature)?)
}

/// Identity loss; encodes all four images.
#[allow(clippy::too_many_arguments)]
pub fn identity_loss<T: Real>(
    g: &Graph<T>,
    encoder: &Encoder<T>,
    enc: &Bound,
    x_cc: Var,
    x_c: Var,
    x_ss: Var,
    x_s: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let f = |x| encoder.forward(g, enc, x, Layer::R51);
    let (f_cc, f_c, f_ss, f_s) = (f(x_cc)?, f(x_c)?, f(x_ss)?, f(x_s)?);
    identity_loss_with_features(g, x_cc, x_c, x_ss, x_s, &f_cc, &f_c, &f_ss, &f_s, weights)
}

/// Images of one first-stage step. Content-side images share a batch; the
/// style image may have batch size 1.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Images {
    pub x_c: Var,
    pub x_s: Var,
    pub x_cs: Var,
    pub x_cc: Var,
    pub x_ss: Var,
}

/// `lambda_c L_c + lambda_s L_s + L_i` using precomputed content and style
/// features (through `relu5_1`).
pub fn stage1_objective_with_features<T: Real>(
    g: &Graph<T>,
    encoder: &Encoder<T>,
    enc: &Bound,
    x: &Stage1Images,
    f_c: &FeatureBundle,
    f_s: &FeatureBundle,
    weights: &LossWeights,
) -> Result<Objective> {
    let f_cs = encoder.forward(g, enc, x.x_cs, Layer::R51)?;
    let f_cc = encoder.forward(g, enc, x.x_cc, Layer::R51)?;
    let f_ss = encoder.forward(g, enc, x.x_ss, Layer::R51)?;
    let l_c = perceptual_content_loss(g, &f_cs, f_c, &STAGE1_CONTENT_LAYERS)?;
    let l_s = mean_variance_loss(g, &f_cs, f_s, &ALL_LAYERS)?;
    let l_i = identity_loss_with_features(g, x.x_cc, x.x_c, x.x_ss, x.x_s, &f_cc, f_c, &f_ss, f_s, weights)?;
    let terms = vec![("L_c", Some(l_c)), ("L_s", Some(l_s)), ("L_i", Some(l_i))];
    Ok(build_objective(g, terms, &weights.stage1_coefficients(), None))
}

pub fn stage1_objective<T: Real>(
    g: &Graph<T>,
    encoder: &Encoder<T>,
    enc: &Bound,
    x: &Stage1Images,
    weights: &LossWeights,
) -> Result<Objective> {
    let f_c = encoder.forward(g, enc, x.x_c, Layer::R51)?;
    let f_s = encoder.forward(g, enc, x.x_s, Layer::R51)?;
    stage1_objective_with_features(g, encoder, enc, x, &f_c, &f_s, weights)
}

/// Enabled second-stage terms; disabled terms are reported as 0 and not
/// evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Terms {
    pub lp: bool,
    pub lss: bool,
    pub lmv: bool,
    pub lr: bool,
}

impl Default for Stage2Terms {
    fn default() -> Self {
        Self { lp: true, lss: true, lmv: true, lr: true }
    }
}

/// `alpha (lambda_1 l_p + lambda_2 l_ss) + lambda_3 l_mv + lambda_4 l_r`
/// using precomputed content and style features (through `relu4_1`).
#[allow(clippy::too_many_arguments)]
pub fn stage2_objective_with_features<T: Real>(
    g: &Graph<T>,
    encoder: &Encoder<T>,
    enc: &Bound,
    x_cs: Var,
    f_c: &FeatureBundle,
    f_s: &FeatureBundle,
    weights: &LossWeights,
    enabled: Stage2Terms,
    sampler: &Subsampler,
) -> Result<Objective> {
    let any = enabled.lp || enabled.lss || enabled.lmv || enabled.lr;
    let f_cs = if any { encoder.forward(g, enc, x_cs, Layer::R41)? } else { FeatureBundle::new() };
    let l_p = enabled.lp.then(|| perceptual_content_loss(g, &f_cs, f_c, &STAGE2_STAT_LAYERS)).transpose()?;
    let l_ss = enabled.lss.then(|| self_similarity_loss(g, &f_cs, f_c, &STAGE2_PAIR_LAYERS, sampler)).transpose()?;
    let l_mv = enabled.lmv.then(|| mean_variance_loss(g, &f_cs, f_s, &STAGE2_STAT_LAYERS)).transpose()?;
    let l_r = enabled.lr.then(|| remd_loss(g, &f_cs, f_s, &STAGE2_PAIR_LAYERS, sampler)).transpose()?;
    let terms = vec![("l_p", l_p), ("l_ss", l_ss), ("l_mv", l_mv), ("l_r", l_r)];
    Ok(build_objective(g, terms, &weights.stage2_coefficients(), Some(sampler.seed)))
}

#[allow(clippy::too_many_arguments)]
pub fn stage2_objective<T: Real>(
    g: &Graph<T>,
    encoder: &Encoder<T>,
    enc: &Bound,
    x_c: Var,
    x_s: Var,
    x_cs: Var,
    weights: &LossWeights,
    enabled: Stage2Terms,
    sampler: &Subsampler,
) -> Result<Objective> {
    let f_c = encoder.forward(g, enc, x_c, Layer::R41)?;
    let f_s = encoder.forward(g, enc, x_s, Layer::R41)?;
    stage2_objective_with_features(g, encoder, enc, x_cs, &f_c, &f_s, weights, enabled, sampler)
}
