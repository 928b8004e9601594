//! Low-resolution style transfer network: frozen encoder, style-attentional
//! modules at `relu4_1` and `relu5_1`, a fusion convolution and a decoder that
//! mirrors the encoder back to RGB.
//!
//! Parameter names:
//!
//! * `sa4.*`, `sa5.*`: 1x1 convolutions `wc`, `ws`, `wh`, `out` per module
//! * `fuse`: 3x3 convolution on the summed multilevel feature
//! * `dec.conv*`: decoder convolutions, see [`DECODER`]

use lapstyle_autograd::{Graph, Padding, Real, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{normalize_mv, Encoder, FeatureBundle, Layer};
use crate::params::{add_conv, Bound, ParameterSet};

/// Feature width at both attention levels.
pub const SA_CHANNELS: usize = 512;

/// Attention modules and the encoder tap each one reads.
pub const SA_MODULES: [(&str, Layer); 2] = [("sa4", Layer::R41), ("sa5", Layer::R51)];

const SA_CONVS: [&str; 4] = ["wc", "ws", "wh", "out"];

/// Decoder stages: `(name, in, out, upsample afterwards)`. Every conv but the
/// last is followed by ReLU; the last by a sigmoid.
pub const DECODER: [(&str, usize, usize, bool); 9] = [
    ("dec.conv4_1", 512, 256, true),
    ("dec.conv3_4", 256, 256, false),
    ("dec.conv3_3", 256, 256, false),
    ("dec.conv3_2", 256, 256, false),
    ("dec.conv3_1", 256, 128, true),
    ("dec.conv2_2", 128, 128, false),
    ("dec.conv2_1", 128, 64, true),
    ("dec.conv1_2", 64, 64, false),
    ("dec.conv1_1", 64, 3, false),
];

#[derive(Clone, Debug)]
pub struct BaseNet<T: Real = f32> {
    pub params: ParameterSet<T>,
}

/// `(name, shape)` of every parameter of the network.
pub fn expected_shapes() -> Vec<(String, Vec<usize>)> {
    let conv = |name: &str, cin: usize, cout: usize, k: usize| {
        [(format!("{name}.weight"), vec![cout, cin, k, k]), (format!("{name}.bias"), vec![cout])]
    };
    let mut out = Vec::new();
    for (m, _) in SA_MODULES {
        for c in SA_CONVS {
            out.extend(conv(&format!("{m}.{c}"), SA_CHANNELS, SA_CHANNELS, 1));
        }
    }
    out.extend(conv("fuse", SA_CHANNELS, SA_CHANNELS, 3));
    for (name, cin, cout, _) in DECODER {
        out.extend(conv(name, cin, cout, 3));
    }
    out
}

impl BaseNet<f32> {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for (m, _) in SA_MODULES {
            for c in SA_CONVS {
                add_conv(&mut params, &format!("{m}.{c}"), SA_CHANNELS, SA_CHANNELS, 1, &mut rng).expect("unique");
            }
        }
        add_conv(&mut params, "fuse", SA_CHANNELS, SA_CHANNELS, 3, &mut rng).expect("unique");
        for (name, cin, cout, _) in DECODER {
            add_conv(&mut params, name, cin, cout, 3, &mut rng).expect("unique");
        }
        Self { params }
    }
}

impl<T: Real> BaseNet<T> {
    /// Wraps loaded parameters after checking them against the architecture.
    pub fn from_params(params: ParameterSet<T>) -> Result<Self> {
        let expected = expected_shapes();
        params.expect_shapes(expected.iter().map(|(n, s)| (n.as_str(), s.clone())))?;
        Ok(Self { params })
    }

    pub fn cast<U: Real>(&self) -> BaseNet<U> {
        BaseNet { params: self.params.cast() }
    }
}

/// Result of one attention module.
#[derive(Clone, Copy, Debug)]
pub struct SaOutput {
    /// `f_c + out(attended)`, shaped like the content feature.
    pub output: Var,
    /// Row-stochastic attention, `N x P_content x P_style`.
    pub attention: Var,
}

fn conv1x1<T: Real>(g: &Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{name}.weight"))?;
    let bias = b.get(&format!("{name}.bias"))?;
    Ok(g.conv2d(x, w, Some(bias), Padding::Zero)?)
}

fn conv3x3<T: Real>(g: &Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{name}.weight"))?;
    let bias = b.get(&format!("{name}.bias"))?;
    Ok(g.conv2d(x, w, Some(bias), Padding::Reflect)?)
}

/// Style-attentional feature embedding.
///
/// Queries come from the normalized content feature, keys from the
/// normalized style feature and values from the raw style feature. The
/// attended values pass through a 1x1 convolution and are added back to the
/// content feature.
pub fn sa_attention<T: Real>(g: &Graph<T>, bound: &Bound, prefix: &str, fc: Var, fs: Var) -> Result<SaOutput> {
    let (sc, ss) = (g.shape(fc), g.shape(fs));
    if sc.len() != 4 || ss.len() != 4 {
        return Err(Error::Dimension(format!("attention expects NCHW features, got {sc:?} and {ss:?}")));
    }
    if sc[1] != ss[1] {
        return Err(Error::Dimension(format!(
            "attention channel mismatch: content has {} channels, style has {}",
            sc[1], ss[1]
        )));
    }
    if sc[0] != ss[0] {
        return Err(Error::Dimension(format!("attention batch mismatch: {} vs {}", sc[0], ss[0])));
    }
    let (n, c) = (sc[0], sc[1]);
    let (pc, ps) = (sc[2] * sc[3], ss[2] * ss[3]);

    let q = conv1x1(g, bound, &format!("{prefix}.wc"), normalize_mv(g, fc)?)?;
    let k = conv1x1(g, bound, &format!("{prefix}.ws"), normalize_mv(g, fs)?)?;
    let v = conv1x1(g, bound, &format!("{prefix}.wh"), fs)?;

    let q = g.transpose(g.reshape(q, &[n, c, pc])?)?;
    let k = g.reshape(k, &[n, c, ps])?;
    let attention = g.softmax_last(g.matmul(q, k)?);
    let v = g.transpose(g.reshape(v, &[n, c, ps])?)?;
    let attended = g.transpose(g.matmul(attention, v)?)?;
    let attended = g.reshape(attended, &sc)?;
    let refined = conv1x1(g, bound, &format!("{prefix}.out"), attended)?;
    Ok(SaOutput { output: g.add(fc, refined)?, attention })
}

/// Attention at both levels, fusion and decoding, from precomputed encoder
/// features. A style batch of one is shared across the content batch.
pub fn decode_stylized<T: Real>(g: &Graph<T>, net: &Bound, fc: &FeatureBundle, fs: &FeatureBundle) -> Result<Var> {
    let mut outs = Vec::with_capacity(SA_MODULES.len());
    for (prefix, layer) in SA_MODULES {
        let c = *fc.get(&layer).ok_or_else(|| Error::MissingLayer(layer.to_string()))?;
        let mut s = *fs.get(&layer).ok_or_else(|| Error::MissingLayer(layer.to_string()))?;
        let (cs, ss) = (g.shape(c), g.shape(s));
        if cs[2..] != ss[2..] {
            return Err(Error::Dimension(format!(
                "content and style {layer} features differ in size: {}x{} vs {}x{}",
                cs[2], cs[3], ss[2], ss[3]
            )));
        }
        if ss[0] == 1 && cs[0] > 1 {
            s = g.repeat_batch(s, cs[0])?;
        }
        outs.push(sa_attention(g, net, prefix, c, s)?.output);
    }
    let coarse = g.upsample_nearest2(outs[1])?;
    let mut h = conv3x3(g, net, "fuse", g.add(outs[0], coarse)?)?;
    for (i, (name, _, _, up)) in DECODER.iter().enumerate() {
        h = conv3x3(g, net, name, h)?;
        h = if i + 1 == DECODER.len() { g.sigmoid(h) } else { g.relu(h) };
        if *up {
            h = g.upsample_nearest2(h)?;
        }
    }
    Ok(h)
}

/// Encodes content and style images and produces the stylized image at the
/// content resolution, values in `(0, 1)`.
pub fn base_forward<T: Real>(
    g: &Graph<T>,
    encoder: &Encoder<T>,
    enc: &Bound,
    net: &Bound,
    content: Var,
    style: Var,
) -> Result<Var> {
    let (sc, ss) = (g.shape(content), g.shape(style));
    if sc.len() != 4 || ss.len() != 4 || sc[2..] != ss[2..] {
        return Err(Error::Dimension(format!("content {sc:?} and style {ss:?} must share spatial size")));
    }
    let fc = encoder.forward(g, enc, content, Layer::R51)?;
    let fs = encoder.forward(g, enc, style, Layer::R51)?;
    decode_stylized(g, net, &fc, &fs)
}
