//! VGG-19 encoder truncated at `relu5_1`.
//!
//! The encoder is always frozen. Weights come from an archive (see
//! [`crate::archive`]) whose keys are `conv1_1.weight`, `conv1_1.bias`, ...,
//! `conv5_1.bias`. Convolutions use reflect padding of one pixel and pooling is
//! 2x2 max pooling. Inputs in `[0, 1]` are standardized with the archive's
//! [`InputNormalization`] before the first convolution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use lapstyle_autograd::{Graph, Padding, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Bound, ParameterSet};

/// Activation taps `relu{k}_1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    R11,
    R21,
    R31,
    R41,
    R51,
}

impl Layer {
    pub const ALL: [Layer; 5] = [Layer::R11, Layer::R21, Layer::R31, Layer::R41, Layer::R51];

    pub fn tag(self) -> &'static str {
        match self {
            Layer::R11 => "1_1",
            Layer::R21 => "2_1",
            Layer::R31 => "3_1",
            Layer::R41 => "4_1",
            Layer::R51 => "5_1",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Layer::R11 => 64,
            Layer::R21 => 128,
            Layer::R31 => 256,
            Layer::R41 | Layer::R51 => 512,
        }
    }

    /// Spatial reduction factor relative to the input.
    pub fn stride(self) -> usize {
        1 << (self as usize)
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "relu{}", self.tag())
    }
}

/// `(name, in_channels, out_channels)` of every 3x3 convolution up to conv5_1.
pub const VGG19_CONVS: [(&str, usize, usize); 13] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_4", 256, 256),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
    ("conv4_4", 512, 512),
    ("conv5_1", 512, 512),
];

/// Per-layer activation of interest, following a conv name.
fn tap_after(conv: &str) -> Option<Layer> {
    match conv {
        "conv1_1" => Some(Layer::R11),
        "conv2_1" => Some(Layer::R21),
        "conv3_1" => Some(Layer::R31),
        "conv4_1" => Some(Layer::R41),
        "conv5_1" => Some(Layer::R51),
        _ => None,
    }
}

/// Input standardization applied before `conv1_1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputNormalization {
    /// `(x - mean) / std` with the ImageNet RGB statistics used by
    /// torchvision's VGG-19.
    #[default]
    Imagenet,
    /// Raw `[0, 1]` RGB.
    Identity,
}

impl InputNormalization {
    const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
    const STD: [f64; 3] = [0.229, 0.224, 0.225];

    fn affine(self) -> ([f64; 3], [f64; 3]) {
        match self {
            Self::Imagenet => (Self::STD.map(|s| 1.0 / s), std::array::from_fn(|c| -Self::MEAN[c] / Self::STD[c])),
            Self::Identity => ([1.0; 3], [0.0; 3]),
        }
    }
}

/// Per-layer activations of one forward pass.
pub type FeatureBundle = BTreeMap<Layer, Var>;

/// Eager counterpart of [`FeatureBundle`].
pub type FeatureMaps<T> = BTreeMap<Layer, Tensor<T>>;

#[derive(Clone, Debug)]
pub struct Encoder<T: Real = f32> {
    pub params: ParameterSet<T>,
    pub normalization: InputNormalization,
}

pub fn expected_shapes() -> impl Iterator<Item = (String, Vec<usize>)> {
    VGG19_CONVS.iter().flat_map(|&(name, cin, cout)| {
        [(format!("{name}.weight"), vec![cout, cin, 3, 3]), (format!("{name}.bias"), vec![cout])]
    })
}

/// Loads and validates a VGG-19 weight archive. The returned parameters are
/// frozen; the archive's SHA-256 is logged.
pub fn load_encoder_weights(path: impl AsRef<Path>) -> Result<Encoder> {
    let path = path.as_ref();
    let ar = archive::read(path)?;
    log::info!("loaded encoder weights {} (sha256 {})", path.display(), ar.file_hash);
    let normalization = match ar.metadata.get("input_normalization") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::archive(path, format!("input_normalization: {e}")))?,
        None => InputNormalization::default(),
    };
    Encoder::from_params(ar.params, normalization)
}

impl Encoder<f32> {
    /// Deterministic stand-in for pretrained weights: He-uniform kernels
    /// (`U(-b, b)`, `b = sqrt(6 / fan_in)`) and zero biases drawn from `seed`.
    pub fn surrogate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for &(name, cin, cout) in &VGG19_CONVS {
            let bound = (6.0 / (cin * 9) as f32).sqrt();
            let w = Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.random_range(-bound..bound));
            params.insert(format!("{name}.weight"), w, true).expect("unique");
            params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), true).expect("unique");
        }
        Self { params, normalization: InputNormalization::Imagenet }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "vgg19-encoder",
            "input_normalization": self.normalization,
        });
        archive::write(path, &self.params, meta)
    }
}

impl<T: Real> Encoder<T> {
    pub fn from_params(mut params: ParameterSet<T>, normalization: InputNormalization) -> Result<Self> {
        for (name, shape) in expected_shapes() {
            let t = params.get(&name).map_err(|_| {
                Error::MissingLayer(name.trim_end_matches(".weight").trim_end_matches(".bias").to_string())
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch { name, expected: shape, found: t.shape().to_vec() });
            }
        }
        params.freeze_all();
        Ok(Self { params, normalization })
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder { params: self.params.cast(), normalization: self.normalization }
    }

    pub fn bind(&self, g: &Graph<T>) -> Bound {
        self.params.bind(g, false)
    }

    /// Runs the encoder on an NCHW batch up to `upto`, returning every
    /// `relu{k}_1` activation on the way.
    pub fn forward(&self, g: &Graph<T>, bound: &Bound, x: Var, upto: Layer) -> Result<FeatureBundle> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Dimension(format!("encoder expects N x 3 x H x W input, got {shape:?}")));
        }
        let div = upto.stride();
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::Dimension(format!(
                "encoder input {}x{} must be divisible by {div} to reach {upto}",
                shape[2], shape[3]
            )));
        }
        let (scale, shift) = self.normalization.affine();
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = T::from_f64_lossy(scale[c]);
        }
        let b = Tensor::from_fn(&[3], |c| T::from_f64_lossy(shift[c]));
        let (w, b) = (g.constant(w), g.constant(b));
        let mut h = g.conv2d(x, w, Some(b), Padding::Zero)?;

        let mut out = FeatureBundle::new();
        for &(name, ..) in &VGG19_CONVS {
            if name.ends_with("_1") && name != "conv1_1" {
                h = g.max_pool2(h)?;
            }
            let w = bound.get(&format!("{name}.weight"))?;
            let b = bound.get(&format!("{name}.bias"))?;
            h = g.conv2d(h, w, Some(b), Padding::Reflect)?;
            h = g.relu(h);
            if let Some(layer) = tap_after(name) {
                out.insert(layer, h);
                if layer == upto {
                    break;
                }
            }
        }
        Ok(out)
    }

    /// Eager single-image encoding.
    pub fn encode(&self, img: &Image, upto: Layer) -> Result<FeatureMaps<T>> {
        let g = Graph::new();
        let bound = self.bind(&g);
        let x = g.constant(img.to_tensor());
        let feats = self.forward(&g, &bound, x, upto)?;
        Ok(feats.into_iter().map(|(l, v)| (l, (*g.value(v)).clone())).collect())
    }
}

/// Standard-deviation floor for feature statistics. It enters the variance
/// squared, so a two-point channel `[1, 3]` normalizes to `[-1, 1]` up to
/// about 5e-11.
pub const STD_EPS: f64 = 1e-5;

/// Per-channel spatial mean and ε-stabilized standard deviation of an NCHW
/// value, each shaped `N x C`.
pub fn channel_stats<T: Real>(g: &Graph<T>, f: Var) -> Result<(Var, Var)> {
    let (flat, hw) = flatten_spatial(g, f)?;
    let mean = g.mean_last(flat);
    let centered = g.sub(flat, g.broadcast_last(mean, hw))?;
    let var = g.mean_last(g.square(centered));
    let std = g.sqrt(g.offset(var, T::from_f64_lossy(STD_EPS * STD_EPS)));
    Ok((mean, std))
}

/// `N x C x H x W -> N x C x (H*W)`.
pub fn flatten_spatial<T: Real>(g: &Graph<T>, f: Var) -> Result<(Var, usize)> {
    let shape = g.shape(f);
    let [n, c, h, w] = shape[..] else {
        return Err(Error::Dimension(format!("expected NCHW feature map, got {shape:?}")));
    };
    Ok((g.reshape(f, &[n, c, h * w])?, h * w))
}

/// Channel-wise mean-variance normalization: every channel gets spatial
/// mean 0 and standard deviation 1.
pub fn normalize_mv<T: Real>(g: &Graph<T>, f: Var) -> Result<Var> {
    let shape = g.shape(f);
    let (flat, hw) = flatten_spatial(g, f)?;
    let (mean, std) = channel_stats(g, f)?;
    let centered = g.sub(flat, g.broadcast_last(mean, hw))?;
    let out = g.div(centered, g.broadcast_last(std, hw))?;
    Ok(g.reshape(out, &shape)?)
}

/// Eager [`normalize_mv`].
pub fn normalize_mv_tensor<T: Real>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let v = g.constant(f.clone());
    let out = normalize_mv(&g, v)?;
    Ok((*g.value(out)).clone())
}
