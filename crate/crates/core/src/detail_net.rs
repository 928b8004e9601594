//! High-frequency refinement network.
//!
//! For an `L`-level pyramid the coarsest residual is refined first by
//! `step1`, which also receives edge features from the EIS module; every
//! finer residual is refined by its own `step{k}` block (`k = 2..=L`) that
//! sees the upsampled refinement of the level below. All blocks share the
//! same trunk: two convolutions with leaky ReLU, (for `step1`) a merge of the
//! edge features, residual blocks and a zero-initialized output convolution.
//!
//! Parameter names:
//!
//! * `eis.conv_in`, `eis.conv_out`, `eis.beta`
//! * `step{k}.conv_a`, `step{k}.conv_b`, `step1.merge`,
//!   `step{k}.res{r}.conv1`, `step{k}.res{r}.conv2`, `step{k}.out`

use std::time::Instant;

use lapstyle_autograd::kernels::reflect_index;
use lapstyle_autograd::{Graph, Padding, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::base_net::{base_forward, BaseNet};
use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::image::Image;
use crate::params::{add_conv, add_zero_conv, Bound, ParameterSet};
use crate::pyramid::{self, upsample_var};

/// Trunk and edge-feature width.
pub const WIDTH: usize = 64;
pub const RES_BLOCKS: usize = 3;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Guard on the edge-map normalizer.
pub const EDGE_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct DetailNet<T: Real = f32> {
    pub params: ParameterSet<T>,
    levels: usize,
}

fn step_name(k: usize) -> String {
    format!("step{k}")
}

/// `(name, shape)` of every parameter for an `levels`-level network.
pub fn expected_shapes(levels: usize) -> Vec<(String, Vec<usize>)> {
    let conv = |name: String, cin: usize, cout: usize| {
        [(format!("{name}.weight"), vec![cout, cin, 3, 3]), (format!("{name}.bias"), vec![cout])]
    };
    let mut out = Vec::new();
    out.extend(conv("eis.conv_in".into(), 3, WIDTH));
    out.extend(conv("eis.conv_out".into(), WIDTH, WIDTH));
    out.push(("eis.beta".into(), vec![1]));
    for k in 1..=levels {
        let s = step_name(k);
        out.extend(conv(format!("{s}.conv_a"), 9, WIDTH));
        out.extend(conv(format!("{s}.conv_b"), WIDTH, WIDTH));
        if k == 1 {
            out.extend(conv(format!("{s}.merge"), 2 * WIDTH, WIDTH));
        }
        for r in 0..RES_BLOCKS {
            out.extend(conv(format!("{s}.res{r}.conv1"), WIDTH, WIDTH));
            out.extend(conv(format!("{s}.res{r}.conv2"), WIDTH, WIDTH));
        }
        out.extend(conv(format!("{s}.out"), WIDTH, 3));
    }
    out
}

impl DetailNet<f32> {
    pub fn init(levels: usize, seed: u64) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Invalid("detail network needs at least one pyramid level".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        add_conv(&mut ps, "eis.conv_in", 3, WIDTH, 3, &mut rng)?;
        add_conv(&mut ps, "eis.conv_out", WIDTH, WIDTH, 3, &mut rng)?;
        ps.insert("eis.beta", Tensor::zeros(&[1]), false)?;
        for k in 1..=levels {
            let s = step_name(k);
            add_conv(&mut ps, &format!("{s}.conv_a"), 9, WIDTH, 3, &mut rng)?;
            add_conv(&mut ps, &format!("{s}.conv_b"), WIDTH, WIDTH, 3, &mut rng)?;
            if k == 1 {
                add_conv(&mut ps, &format!("{s}.merge"), 2 * WIDTH, WIDTH, 3, &mut rng)?;
            }
            for r in 0..RES_BLOCKS {
                add_conv(&mut ps, &format!("{s}.res{r}.conv1"), WIDTH, WIDTH, 3, &mut rng)?;
                add_conv(&mut ps, &format!("{s}.res{r}.conv2"), WIDTH, WIDTH, 3, &mut rng)?;
            }
            add_zero_conv(&mut ps, &format!("{s}.out"), WIDTH, 3, 3)?;
        }
        Ok(Self { params: ps, levels })
    }
}

impl<T: Real> DetailNet<T> {
    pub fn from_params(params: ParameterSet<T>, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Invalid("detail network needs at least one pyramid level".into()));
        }
        let expected = expected_shapes(levels);
        params.expect_shapes(expected.iter().map(|(n, s)| (n.as_str(), s.clone())))?;
        Ok(Self { params, levels })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn cast<U: Real>(&self) -> DetailNet<U> {
        DetailNet { params: self.params.cast(), levels: self.levels }
    }
}

/// `sqrt(gx^2 + gy^2)` of the 3x3 Sobel responses of a row-major plane,
/// with reflect padding.
pub fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| plane[reflect_index(y, h) * w + reflect_index(x, w)];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Per-channel Sobel gradient magnitude (reflect padding), divided by the
/// largest magnitude in the image so values lie in `[0, 1]`.
pub fn edge_map(img: &Image) -> Image {
    let (h, w) = img.dims();
    let planes: [Vec<f64>; 3] = std::array::from_fn(|c| sobel_magnitude(&img.plane(c), h, w));
    let peak = planes.iter().flatten().fold(0.0f64, |m, &v| m.max(v)).max(EDGE_EPS);
    let planes = planes.map(|p| p.into_iter().map(|v| v / peak).collect());
    Image::from_planes(h, w, &planes)
}

/// Channel self-attention with a learned gate.
///
/// Returns `(R, M)` where `M[j, i] = softmax_i(<E_i, E_j>)` and
/// `R_j = beta * sum_i M[j, i] E_i + E_j`.
pub fn channel_attention<T: Real>(g: &Graph<T>, e: Var, beta: Var) -> Result<(Var, Var)> {
    let shape = g.shape(e);
    let [n, c, h, w] = shape[..] else {
        return Err(Error::Dimension(format!("channel attention expects NCHW, got {shape:?}")));
    };
    let flat = g.reshape(e, &[n, c, h * w])?;
    let gram = g.matmul(flat, g.transpose(flat)?)?;
    let m = g.softmax_last(gram);
    let mixed = g.reshape(g.matmul(m, flat)?, &shape)?;
    let r = g.add(g.scale_by(beta, mixed)?, e)?;
    Ok((r, m))
}

fn conv<T: Real>(g: &Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{name}.weight"))?;
    let bias = b.get(&format!("{name}.bias"))?;
    Ok(g.conv2d(x, w, Some(bias), Padding::Reflect)?)
}

/// Edge features `f_e = conv_out(channel_attention(conv_in(x_e)))`.
pub fn eis_forward<T: Real>(g: &Graph<T>, b: &Bound, edge: Var) -> Result<Var> {
    let e = conv(g, b, "eis.conv_in", edge)?;
    let (r, _) = channel_attention(g, e, b.get("eis.beta")?)?;
    conv(g, b, "eis.conv_out", r)
}

fn slope<T: Real>() -> T {
    T::from_f64_lossy(LEAKY_SLOPE)
}

fn trunk_head<T: Real>(g: &Graph<T>, b: &Bound, step: &str, input: Var) -> Result<Var> {
    let a = g.leaky_relu(conv(g, b, &format!("{step}.conv_a"), input)?, slope());
    Ok(g.leaky_relu(conv(g, b, &format!("{step}.conv_b"), a)?, slope()))
}

fn trunk_tail<T: Real>(g: &Graph<T>, b: &Bound, step: &str, mut x: Var) -> Result<Var> {
    for r in 0..RES_BLOCKS {
        let y = g.leaky_relu(conv(g, b, &format!("{step}.res{r}.conv1"), x)?, slope());
        let y = conv(g, b, &format!("{step}.res{r}.conv2"), y)?;
        x = g.add(x, y)?;
    }
    conv(g, b, &format!("{step}.out"), x)
}

fn spatial<T: Real>(g: &Graph<T>, v: Var) -> Result<(usize, usize, usize)> {
    let s = g.shape(v);
    match s[..] {
        [n, 3, h, w] => Ok((n, h, w)),
        _ => Err(Error::Dimension(format!("expected N x 3 x H x W image tensor, got {s:?}"))),
    }
}

fn expect_size<T: Real>(g: &Graph<T>, v: Var, name: &str, want: (usize, usize, usize)) -> Result<()> {
    let got = spatial(g, v)?;
    if got != want {
        return Err(Error::Dimension(format!(
            "{name} is {}x{} (batch {}), expected {}x{} (batch {})",
            got.1, got.2, got.0, want.1, want.2, want.0
        )));
    }
    Ok(())
}

/// First refinement: `h_1`, the low-frequency content and stylized images and
/// the edge map of the mid-resolution content. `edge = None` replaces the
/// edge features by zeros.
pub fn detail_step1<T: Real>(
    g: &Graph<T>,
    b: &Bound,
    h1: Var,
    content_low: Var,
    stylized_low: Var,
    edge: Option<Var>,
) -> Result<Var> {
    let (n, h, w) = spatial(g, h1)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("h_1 size {h}x{w} must be even")));
    }
    expect_size(g, content_low, "low-frequency content", (n, h / 2, w / 2))?;
    expect_size(g, stylized_low, "low-frequency stylized image", (n, h / 2, w / 2))?;
    let input = g.cat_channels(&[h1, upsample_var(g, content_low)?, upsample_var(g, stylized_low)?])?;
    let a = trunk_head(g, b, "step1", input)?;
    let fe = match edge {
        Some(e) => {
            expect_size(g, e, "edge map", (n, h, w))?;
            eis_forward(g, b, e)?
        }
        None => g.constant(Tensor::zeros(&[n, WIDTH, h, w])),
    };
    let merged = conv(g, b, "step1.merge", g.cat_channels(&[a, fe])?)?;
    trunk_tail(g, b, "step1", merged)
}

/// Later refinement `step{k}` (`k >= 2`): the residual at this level, the
/// content one level down and the refined residual one level down.
pub fn detail_step<T: Real>(g: &Graph<T>, b: &Bound, k: usize, h: Var, content_mid: Var, refined_below: Var) -> Result<Var> {
    let (n, hh, ww) = spatial(g, h)?;
    if hh % 2 != 0 || ww % 2 != 0 {
        return Err(Error::Dimension(format!("residual size {hh}x{ww} must be even")));
    }
    expect_size(g, content_mid, "mid-resolution content", (n, hh / 2, ww / 2))?;
    expect_size(g, refined_below, "refined residual", (n, hh / 2, ww / 2))?;
    let input = g.cat_channels(&[upsample_var(g, content_mid)?, h, upsample_var(g, refined_below)?])?;
    let step = step_name(k);
    let a = trunk_head(g, b, &step, input)?;
    trunk_tail(g, b, &step, a)
}

/// The two-level second refinement.
pub fn detail_step2<T: Real>(g: &Graph<T>, b: &Bound, h0: Var, content_mid: Var, h1_hat: Var) -> Result<Var> {
    detail_step(g, b, 2, h0, content_mid, h1_hat)
}

/// Graph inputs of the refinement network for one batch.
#[derive(Clone, Debug)]
pub struct DetailInputs {
    /// Content residuals, finest first.
    pub residuals: Vec<Var>,
    /// `downsample^k(content)` for `k = 1..=L`; the last entry is the
    /// low-frequency content.
    pub content_levels: Vec<Var>,
    /// Low-frequency stylized image.
    pub stylized_low: Var,
    /// Edge map of `content_levels[L - 2]` (or of the content itself when
    /// `L = 1`); `None` disables edge features.
    pub edge: Option<Var>,
}

/// Runs every refinement step; returns refined residuals, finest first.
pub fn detail_forward<T: Real>(g: &Graph<T>, b: &Bound, inputs: &DetailInputs) -> Result<Vec<Var>> {
    let l = inputs.residuals.len();
    if l == 0 || inputs.content_levels.len() != l {
        return Err(Error::Invalid(format!(
            "refinement needs matching residuals and content levels, got {} and {}",
            l,
            inputs.content_levels.len()
        )));
    }
    let mut refined = vec![None; l];
    let mut below = detail_step1(
        g,
        b,
        inputs.residuals[l - 1],
        inputs.content_levels[l - 1],
        inputs.stylized_low,
        inputs.edge,
    )?;
    refined[l - 1] = Some(below);
    for level in (0..l - 1).rev() {
        let k = l - level;
        below = detail_step(g, b, k, inputs.residuals[level], inputs.content_levels[level], below)?;
        refined[level] = Some(below);
    }
    Ok(refined.into_iter().map(|r| r.expect("every level refined")).collect())
}

/// Switches that alter the inference path to match an ablated training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StylizeOptions {
    /// Use the low-frequency content in place of the base network output.
    pub no_base_net: bool,
    /// Zero edge features.
    pub no_eis: bool,
}

#[derive(Clone, Debug)]
pub struct StylizeOutput {
    /// Final image clamped to `[0, 1]`.
    pub image: Image,
    /// Partial reconstructions from the low-frequency stylized image up to
    /// the final resolution (unclamped), coarsest first.
    pub stages: Vec<Image>,
    /// Refined residuals, finest first.
    pub residuals: Vec<Image>,
    pub seconds: f64,
}

/// Full pipeline: decompose, stylize the low-frequency band, refine every
/// residual and reconstruct.
pub fn full_stylize(
    content: &Image,
    style: &Image,
    encoder: &Encoder,
    base: &BaseNet,
    detail: &DetailNet,
    opts: StylizeOptions,
) -> Result<StylizeOutput> {
    let start = Instant::now();
    let levels = detail.levels();
    if content.dims() != style.dims() {
        return Err(Error::Dimension(format!(
            "content {}x{} and style {}x{} must share dimensions",
            content.height(),
            content.width(),
            style.height(),
            style.width()
        )));
    }
    let div = 16 << levels;
    let (h, w) = content.dims();
    if h % div != 0 || w % div != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} input must be divisible by {div} for a {levels}-level pyramid and the encoder"
        )));
    }
    let pyr = pyramid::decompose(content, levels)?;
    let mut style_low = style.clone();
    for _ in 0..levels {
        style_low = pyramid::downsample(&style_low)?;
    }
    let mut content_levels = Vec::with_capacity(levels);
    let mut cur = content.clone();
    for _ in 0..levels {
        cur = pyramid::downsample(&cur)?;
        content_levels.push(cur.clone());
    }

    let g = Graph::<f32>::new();
    let stylized_low = if opts.no_base_net {
        g.constant(pyr.low.to_tensor())
    } else {
        let enc = encoder.bind(&g);
        let net = base.params.bind(&g, false);
        let c = g.constant(pyr.low.to_tensor());
        let s = g.constant(style_low.to_tensor());
        base_forward(&g, encoder, &enc, &net, c, s)?
    };
    let edge_src = if levels >= 2 { &content_levels[levels - 2] } else { content };
    let inputs = DetailInputs {
        residuals: pyr.residuals.iter().map(|r| g.constant(r.to_tensor())).collect(),
        content_levels: content_levels.iter().map(|c| g.constant(c.to_tensor())).collect(),
        stylized_low,
        edge: (!opts.no_eis).then(|| g.constant(edge_map(edge_src).to_tensor())),
    };
    let db = detail.params.bind(&g, false);
    let refined = detail_forward(&g, &db, &inputs)?;

    let low = Image::from_tensor(&g.value(stylized_low), 0)?;
    let residuals = refined.iter().map(|&r| Image::from_tensor(&g.value(r), 0)).collect::<Result<Vec<_>>>()?;
    let mut stages = vec![low.clone()];
    let mut x = low;
    for r in residuals.iter().rev() {
        x = pyramid::upsample(&x).add(r)?;
        stages.push(x.clone());
    }
    Ok(StylizeOutput { image: x.clamp01(), stages, residuals, seconds: start.elapsed().as_secs_f64() })
}
