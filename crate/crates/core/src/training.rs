//! Two-stage training: the base network on low-frequency images, then the
//! refinement network with the base network frozen.
//!
//! Outputs in `out_dir`:
//!
//! * `base.ckpt` / `detail.ckpt`: checkpoint archives (see [`Checkpoint`])
//! * `loss_base.log` / `loss_detail.log`: `#`-prefixed header lines followed
//!   by one `step,term:value,...,total:value` line per step
//! * `loss_base.png` / `loss_detail.png`: content (first color) and style
//!   (second color) curves

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lapstyle_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::base_net::{base_forward, decode_stylized, BaseNet};
use crate::detail_net::{detail_forward, edge_map, DetailInputs, DetailNet};
use crate::error::{Error, Result};
use crate::features::{load_encoder_weights, Encoder, FeatureBundle, FeatureMaps, Layer};
use crate::image::Image;
use crate::losses::{
    stage1_objective_with_features, stage2_objective_with_features, IdentityPixelWeighting, LossReport,
    LossWeights, Stage1Images, Stage2Terms, Subsampler, DEFAULT_MAX_SAMPLES,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParameterSet};
use crate::plot;
use crate::pyramid;

/// Number of log lines kept inside checkpoints.
pub const LOSS_TAIL: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Base,
    Detail,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Detail => "detail",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "detail" => Ok(Stage::Detail),
            _ => Err(Error::Config { key: "stage".into(), reason: format!("expected `base` or `detail`, got `{s}`") }),
        }
    }
}

/// Training configuration. Read from a flat TOML file; every key has a
/// default and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub content_dir: PathBuf,
    pub style_image: PathBuf,
    /// Side length content and style images are resized and cropped to.
    pub resolution: usize,
    pub stage: Stage,
    pub iterations: u64,
    /// Defaults to 1e-4 for the base stage and 5e-3 for the detail stage.
    pub learning_rate: Option<f64>,
    /// Defaults to 5 for the base stage and 1 for the detail stage.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Pyramid depth.
    pub levels: usize,
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
    pub no_lp: bool,
    pub no_lss: bool,
    pub no_lmv: bool,
    pub no_lr: bool,
    pub no_eis: bool,
    pub no_base_net: bool,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Cap on positions used by the pairwise loss terms.
    pub max_samples: usize,
    pub out_dir: PathBuf,
    /// Base-stage checkpoint used by the detail stage.
    pub stage1_checkpoint: Option<PathBuf>,
    /// Encoder weight archive; without one a seeded surrogate is used.
    pub vgg_weights: Option<PathBuf>,
    pub vgg_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            content_dir: PathBuf::from("content"),
            style_image: PathBuf::from("style.png"),
            resolution: 512,
            stage: Stage::Base,
            iterations: 1000,
            learning_rate: None,
            batch_size: None,
            seed: 0,
            levels: 2,
            lambda_c: w.lambda_c,
            lambda_s: w.lambda_s,
            lambda_i1: w.lambda_i1,
            lambda_i2: w.lambda_i2,
            identity_pixel: w.identity_pixel,
            alpha: w.alpha,
            lambda_1: w.lambda_1,
            lambda_2: w.lambda_2,
            lambda_3: w.lambda_3,
            lambda_4: w.lambda_4,
            no_lp: false,
            no_lss: false,
            no_lmv: false,
            no_lr: false,
            no_eis: false,
            no_base_net: false,
            checkpoint_every: 0,
            max_samples: DEFAULT_MAX_SAMPLES,
            out_dir: PathBuf::from("runs"),
            stage1_checkpoint: None,
            vgg_weights: None,
            vgg_seed: 0,
        }
    }
}

fn toml_error(src: &str, e: toml::de::Error) -> Error {
    let key = e
        .span()
        .and_then(|span| {
            let line_start = src[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let line = src[line_start..].lines().next()?;
            line.split_once('=').map(|(k, _)| k.trim().to_string())
        })
        .filter(|k| !k.is_empty())
        .unwrap_or_else(|| "<config>".into());
    Error::Config { key, reason: e.message().to_string() }
}

impl TrainConfig {
    pub fn from_toml_str(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| toml_error(src, e))
    }

    /// Reads a configuration file. Relative paths inside it are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&src)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_relative_to(dir);
        }
        Ok(cfg)
    }

    fn resolve_relative_to(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.content_dir);
        fix(&mut self.style_image);
        fix(&mut self.out_dir);
        for p in [&mut self.stage1_checkpoint, &mut self.vgg_weights].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.stage {
            Stage::Base => 1e-4,
            Stage::Detail => 5e-3,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.stage {
            Stage::Base => 5,
            Stage::Detail => 1,
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_c: self.lambda_c,
            lambda_s: self.lambda_s,
            lambda_i1: self.lambda_i1,
            lambda_i2: self.lambda_i2,
            identity_pixel: self.identity_pixel,
            alpha: self.alpha,
            lambda_1: self.lambda_1,
            lambda_2: self.lambda_2,
            lambda_3: self.lambda_3,
            lambda_4: self.lambda_4,
        }
    }

    pub fn stage2_terms(&self) -> Stage2Terms {
        Stage2Terms { lp: !self.no_lp, lss: !self.no_lss, lmv: !self.no_lmv, lr: !self.no_lr }
    }

    /// Smallest side length that every stage can handle.
    pub fn size_multiple(&self) -> usize {
        16 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, reason: String| Err(Error::Config { key: key.into(), reason });
        if self.levels == 0 {
            return cfg("levels", "must be at least 1".into());
        }
        if self.levels > 6 {
            return cfg("levels", format!("{} levels is more than supported (6)", self.levels));
        }
        let m = self.size_multiple();
        if self.resolution == 0 || self.resolution % m != 0 {
            return cfg("resolution", format!("must be a positive multiple of {m} for {} pyramid levels", self.levels));
        }
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return cfg("learning_rate", format!("must be positive, got {lr}"));
        }
        if self.batch_size() == 0 {
            return cfg("batch_size", "must be at least 1".into());
        }
        if self.max_samples == 0 {
            return cfg("max_samples", "must be at least 1".into());
        }
        self.weights().validate()?;
        if self.stage == Stage::Detail && !self.no_base_net {
            match &self.stage1_checkpoint {
                None => {
                    return cfg(
                        "stage1_checkpoint",
                        "detail training needs a base-stage checkpoint (set stage1_checkpoint or no_base_net)".into(),
                    )
                }
                Some(p) if !p.is_file() => {
                    return cfg("stage1_checkpoint", format!("base-stage checkpoint {} does not exist", p.display()))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Header lines of the loss log, without the leading `# `.
    pub fn header_lines(&self) -> Vec<String> {
        vec![
            format!(
                "stage={} resolution={} levels={} iterations={} batch_size={} learning_rate={} seed={}",
                self.stage,
                self.resolution,
                self.levels,
                self.iterations,
                self.batch_size(),
                self.learning_rate(),
                self.seed
            ),
            format!(
                "flags no_lp={} no_lss={} no_lmv={} no_lr={} no_eis={} no_base_net={}",
                self.no_lp, self.no_lss, self.no_lmv, self.no_lr, self.no_eis, self.no_base_net
            ),
            format!(
                "weights lambda_c={} lambda_s={} lambda_i1={} lambda_i2={} alpha={} lambda_1={} lambda_2={} lambda_3={} lambda_4={}",
                self.lambda_c,
                self.lambda_s,
                self.lambda_i1,
                self.lambda_i2,
                self.alpha,
                self.lambda_1,
                self.lambda_2,
                self.lambda_3,
                self.lambda_4
            ),
        ]
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.ckpt", self.stage))
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join(format!("loss_{}.log", self.stage))
    }

    pub fn plot_path(&self) -> PathBuf {
        self.out_dir.join(format!("loss_{}.png", self.stage))
    }
}

/// The encoder named by a configuration.
pub fn resolve_encoder(weights: Option<&Path>, seed: u64) -> Result<Encoder> {
    match weights {
        Some(p) => load_encoder_weights(p),
        None => {
            log::warn!("no encoder weight archive given; using the seeded surrogate encoder (seed {seed})");
            Ok(Encoder::surrogate(seed))
        }
    }
}

/// Square training images loaded from a directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub paths: Vec<PathBuf>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

/// Loads every regular file in `dir` (sorted by name) as an image resized
/// and center-cropped to `resolution x resolution`. Undecodable files are
/// skipped with a warning.
pub fn ingest_dataset(dir: impl AsRef<Path>, resolution: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut images = Vec::new();
    let mut paths = Vec::new();
    let mut skipped = 0;
    for p in entries {
        match Image::load_square(&p, resolution) {
            Ok(img) => {
                images.push(img);
                paths.push(p);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} file(s) in {} could not be decoded", dir.display());
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(format!("no decodable images in {}", dir.display())));
    }
    Ok(Dataset { images, paths, skipped })
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of the batch for `step`, a pure function of
    /// `(seed, step, batch)`. Drawn without replacement when the dataset is
    /// large enough.
    pub fn batch_indices(&self, seed: u64, step: u64, batch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step));
        if batch <= self.len() {
            rand::seq::index::sample(&mut rng, self.len(), batch).into_vec()
        } else {
            (0..batch).map(|_| rng.random_range(0..self.len())).collect()
        }
    }
}

/// Trainable parameters plus everything needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    /// Completed optimization steps.
    pub iteration: u64,
    pub params: ParameterSet,
    pub adam: Adam,
    pub loss_tail: Vec<String>,
    /// Content hashes of the frozen networks (detail stage).
    pub frozen_hashes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    stage: Stage,
    iteration: u64,
    config: TrainConfig,
    adam: AdamConfig,
    adam_step: u64,
    loss_tail: Vec<String>,
    frozen_hashes: BTreeMap<String, String>,
}

const CHECKPOINT_KIND: &str = "lapstyle-checkpoint";

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            stage: self.stage,
            iteration: self.iteration,
            config: self.config.clone(),
            adam: self.adam.config,
            adam_step: self.adam.step,
            loss_tail: self.loss_tail.clone(),
            frozen_hashes: self.frozen_hashes.clone(),
        };
        let mut all = self.params.clone();
        all.merge(self.adam.state_tensors())?;
        let meta = serde_json::to_value(meta).map_err(|e| Error::Invalid(format!("checkpoint metadata: {e}")))?;
        archive::write(path, &all, meta)
    }

    /// Loads a checkpoint and checks its parameters against the architecture
    /// of its stage.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ar = archive::read(path)?;
        let meta: CheckpointMeta = serde_json::from_value(ar.metadata)
            .map_err(|e| Error::archive(path, format!("not a training checkpoint: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::archive(path, format!("unexpected archive kind {}", meta.kind)));
        }
        let mut params = ParameterSet::new();
        let mut state = ParameterSet::new();
        for (name, p) in ar.params.iter() {
            let target = if Adam::is_state_name(name) { &mut state } else { &mut params };
            target.insert(name, (*p.tensor).clone(), p.frozen)?;
        }
        match meta.stage {
            Stage::Base => {
                BaseNet::from_params(params.clone())?;
            }
            Stage::Detail => {
                DetailNet::from_params(params.clone(), meta.config.levels)?;
            }
        }
        Ok(Self {
            stage: meta.stage,
            config: meta.config,
            iteration: meta.iteration,
            params,
            adam: Adam::from_state(meta.adam, meta.adam_step, &state),
            loss_tail: meta.loss_tail,
            frozen_hashes: meta.frozen_hashes,
        })
    }

    pub fn base_net(&self) -> Result<BaseNet> {
        if self.stage != Stage::Base {
            return Err(Error::Invalid(format!("expected a base-stage checkpoint, got {}", self.stage)));
        }
        let mut net = BaseNet::from_params(self.params.clone())?;
        net.params.freeze_all();
        Ok(net)
    }

    pub fn detail_net(&self) -> Result<DetailNet> {
        if self.stage != Stage::Detail {
            return Err(Error::Invalid(format!("expected a detail-stage checkpoint, got {}", self.stage)));
        }
        DetailNet::from_params(self.params.clone(), self.config.levels)
    }
}

/// Where the low-frequency stylized image came from during detail training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowSource {
    BaseNet,
    ContentLow,
}

/// Record of the low-frequency input actually fed to the refinement network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowSourceCheck {
    pub source: LowSource,
    /// Largest `|stylized_low - content_low|` over every prepared image.
    pub max_abs_diff_from_content_low: f64,
    pub images: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub plot_path: Option<PathBuf>,
    /// Reports of the steps run in this call.
    pub reports: Vec<LossReport>,
    /// Frozen-network hashes after training (detail stage).
    pub frozen_after: BTreeMap<String, String>,
    pub low_source: Option<LowSourceCheck>,
    pub skipped_images: usize,
}

fn stack(images: &[&Image]) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = images.iter().map(|i| i.to_tensor()).collect();
    Ok(Tensor::stack_batch(&items)?)
}

fn stack_maps(maps: &[&FeatureMaps<f32>], layer: Layer) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = maps
        .iter()
        .map(|m| m.get(&layer).cloned().ok_or_else(|| Error::MissingLayer(layer.to_string())))
        .collect::<Result<_>>()?;
    Ok(Tensor::stack_batch(&items)?)
}

fn constant_bundle(g: &Graph<f32>, maps: &[&FeatureMaps<f32>]) -> Result<FeatureBundle> {
    let layers: Vec<Layer> = maps[0].keys().copied().collect();
    layers.into_iter().map(|l| Ok((l, g.constant(stack_maps(maps, l)?)))).collect()
}

fn collect_grads(g: &Graph<f32>, bound: &Bound, params: &ParameterSet, loss: Var) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut grads = g.backward(loss)?;
    Ok(bound
        .iter()
        .filter(|(name, _)| !params.is_frozen(name))
        .filter_map(|(name, v)| grads.take(v).map(|t| (name.to_string(), t)))
        .collect())
}

fn check_finite(step: u64, report: &LossReport) -> Result<()> {
    if report.total.is_finite() && report.terms.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let terms = report.terms.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(", ");
    Err(Error::NonFiniteLoss { step, terms: format!("{terms}, total={}", report.total) })
}

struct LossLog {
    file: File,
    path: PathBuf,
}

impl LossLog {
    fn open(path: &Path, header: &[String], append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = if append {
            OpenOptions::new().create(true).append(true).open(path)
        } else {
            File::create(path)
        }
        .map_err(|e| Error::io(path, e))?;
        for line in header {
            writeln!(file, "# {line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file, path: path.to_path_buf() })
    }

    fn push(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads the step lines of a loss log, skipping `#` header lines.
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<(u64, LossReport)>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(LossReport::parse_log_line(&line)?);
    }
    Ok(out)
}

/// Content and style curves of a log: first-stage `L_c` / `L_s`, second-stage
/// `l_p + l_ss` / `l_mv + l_r`.
pub fn loss_curves(entries: &[(u64, LossReport)]) -> [Vec<f64>; 2] {
    let sum = |r: &LossReport, names: &[&str]| names.iter().filter_map(|n| r.get(n)).sum::<f64>();
    let mut content = Vec::with_capacity(entries.len());
    let mut style = Vec::with_capacity(entries.len());
    for (_, r) in entries {
        content.push(sum(r, &["L_c", "l_p", "l_ss"]));
        style.push(sum(r, &["L_s", "l_mv", "l_r"]));
    }
    [content, style]
}

fn write_plot(config: &TrainConfig) -> Option<PathBuf> {
    let path = config.plot_path();
    let result = read_loss_log(config.log_path()).and_then(|entries| plot::save(&loss_curves(&entries), &path));
    match result {
        Ok(()) => Some(path),
        Err(e) => {
            log::warn!("skipping loss plot: {e}");
            None
        }
    }
}

fn downsample_times(img: &Image, times: usize) -> Result<Image> {
    let mut cur = img.clone();
    for _ in 0..times {
        cur = pyramid::downsample(&cur)?;
    }
    Ok(cur)
}

fn push_tail(tail: &mut Vec<String>, line: String) {
    tail.push(line);
    if tail.len() > LOSS_TAIL {
        tail.remove(0);
    }
}

fn check_resume(config: &TrainConfig, ck: &Checkpoint, stage: Stage) -> Result<()> {
    if ck.stage != stage {
        return Err(Error::Invalid(format!("cannot resume {stage} training from a {} checkpoint", ck.stage)));
    }
    if ck.config.levels != config.levels {
        return Err(Error::Config {
            key: "levels".into(),
            reason: format!("checkpoint was trained with {} levels, config has {}", ck.config.levels, config.levels),
        });
    }
    Ok(())
}

/// Trains the base network on low-frequency content images against one
/// style image. `resume` continues from a checkpoint up to
/// `config.iterations` total steps.
pub fn train_stage1(config: &TrainConfig, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    if config.stage != Stage::Base {
        return Err(Error::Config { key: "stage".into(), reason: "train_stage1 needs stage = base".into() });
    }
    config.validate()?;
    if let Some(ck) = &resume {
        check_resume(config, ck, Stage::Base)?;
    }
    let encoder = resolve_encoder(config.vgg_weights.as_deref(), config.vgg_seed)?;
    let dataset = ingest_dataset(&config.content_dir, config.resolution)?;
    let style = Image::load_square(&config.style_image, config.resolution)?;
    let style_low = downsample_times(&style, config.levels)?;
    let content_low: Vec<Image> =
        dataset.images.iter().map(|i| downsample_times(i, config.levels)).collect::<Result<_>>()?;
    let style_maps = encoder.encode(&style_low, Layer::R51)?;
    let mut content_maps: HashMap<usize, FeatureMaps<f32>> = HashMap::new();

    let weights = config.weights();
    let (mut net, mut adam, start, mut tail) = match resume {
        Some(ck) => (BaseNet::from_params(ck.params)?, ck.adam, ck.iteration, ck.loss_tail),
        None => (BaseNet::init(config.seed), Adam::new(AdamConfig::with_learning_rate(config.learning_rate())), 0, Vec::new()),
    };
    adam.config.learning_rate = config.learning_rate();
    let mut log = LossLog::open(&config.log_path(), &config.header_lines(), start > 0)?;
    let batch = config.batch_size();
    let mut reports = Vec::new();

    let save = |net: &BaseNet, adam: &Adam, iteration: u64, tail: &Vec<String>| -> Result<Checkpoint> {
        let ck = Checkpoint {
            stage: Stage::Base,
            config: config.clone(),
            iteration,
            params: net.params.clone(),
            adam: adam.clone(),
            loss_tail: tail.clone(),
            frozen_hashes: BTreeMap::from([("encoder".to_string(), encoder.params.content_hash())]),
        };
        ck.save(config.checkpoint_path())?;
        Ok(ck)
    };

    for step in start..config.iterations {
        let idx = dataset.batch_indices(config.seed, step, batch);
        for &i in &idx {
            if let std::collections::hash_map::Entry::Vacant(e) = content_maps.entry(i) {
                e.insert(encoder.encode(&content_low[i], Layer::R51)?);
            }
        }
        let g = Graph::<f32>::new();
        let enc = encoder.bind(&g);
        let nb = net.params.bind(&g, true);
        let x_c = g.constant(stack(&idx.iter().map(|&i| &content_low[i]).collect::<Vec<_>>())?);
        let x_s = g.constant(style_low.to_tensor());
        let f_c = constant_bundle(&g, &idx.iter().map(|i| &content_maps[i]).collect::<Vec<_>>())?;
        let f_s = constant_bundle(&g, &[&style_maps])?;
        let x_cs = decode_stylized(&g, &nb, &f_c, &f_s)?;
        let x_cc = decode_stylized(&g, &nb, &f_c, &f_c)?;
        let x_ss = decode_stylized(&g, &nb, &f_s, &f_s)?;
        let images = Stage1Images { x_c, x_s, x_cs, x_cc, x_ss };
        let obj = stage1_objective_with_features(&g, &encoder, &enc, &images, &f_c, &f_s, &weights)?;
        check_finite(step, &obj.report)?;
        let grads = collect_grads(&g, &nb, &net.params, obj.total)?;
        adam.update(&mut net.params, &grads)?;

        let line = obj.report.log_line(step);
        log.push(&line)?;
        if step % 10 == 0 {
            log::info!("base {line}");
        }
        push_tail(&mut tail, line);
        reports.push(obj.report);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            save(&net, &adam, step + 1, &tail)?;
        }
    }
    let iteration = config.iterations.max(start);
    let checkpoint = save(&net, &adam, iteration, &tail)?;
    drop(log);
    let plot_path = write_plot(config);
    Ok(TrainOutcome {
        frozen_after: checkpoint.frozen_hashes.clone(),
        checkpoint,
        checkpoint_path: config.checkpoint_path(),
        log_path: config.log_path(),
        plot_path,
        reports,
        low_source: None,
        skipped_images: dataset.skipped,
    })
}

/// Cached, gradient-free inputs of one content image for detail training.
struct Prepared {
    residuals: Vec<Tensor<f32>>,
    levels: Vec<Tensor<f32>>,
    stylized_low: Tensor<f32>,
    edge: Tensor<f32>,
    features: FeatureMaps<f32>,
}

fn content_levels(img: &Image, levels: usize) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(levels);
    let mut cur = img.clone();
    for _ in 0..levels {
        cur = pyramid::downsample(&cur)?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// Low-frequency stylized image of `content_low` given the style, or the
/// content itself when the base network is disabled.
pub fn stylized_low(
    encoder: &Encoder,
    base: Option<&BaseNet>,
    content_low: &Image,
    style_low: &Image,
) -> Result<Tensor<f32>> {
    match base {
        None => Ok(content_low.to_tensor()),
        Some(base) => {
            let g = Graph::<f32>::new();
            let enc = encoder.bind(&g);
            let nb = base.params.bind(&g, false);
            let c = g.constant(content_low.to_tensor());
            let s = g.constant(style_low.to_tensor());
            let out = base_forward(&g, encoder, &enc, &nb, c, s)?;
            Ok((*g.value(out)).clone())
        }
    }
}

/// Trains the refinement network with the encoder and base network frozen.
/// The base network comes from `stage1` or, when absent, from
/// `config.stage1_checkpoint`; with `no_base_net` the low-frequency content
/// stands in for its output.
pub fn train_stage2(config: &TrainConfig, stage1: Option<&Checkpoint>, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    if config.stage != Stage::Detail {
        return Err(Error::Config { key: "stage".into(), reason: "train_stage2 needs stage = detail".into() });
    }
    if stage1.is_none() || config.no_base_net {
        config.validate()?;
    } else {
        let mut probe = config.clone();
        probe.no_base_net = true;
        probe.validate()?;
    }
    if let Some(ck) = &resume {
        check_resume(config, ck, Stage::Detail)?;
    }
    let encoder = resolve_encoder(config.vgg_weights.as_deref(), config.vgg_seed)?;
    let base = if config.no_base_net {
        None
    } else {
        let loaded;
        let ck = match stage1 {
            Some(ck) => ck,
            None => {
                let path = config.stage1_checkpoint.as_ref().expect("validated");
                loaded = Checkpoint::load(path)?;
                &loaded
            }
        };
        if let Some(h) = ck.frozen_hashes.get("encoder") {
            if *h != encoder.params.content_hash() {
                log::warn!("encoder differs from the one used to train the base network");
            }
        }
        Some(ck.base_net()?)
    };
    let hashes = |base: &Option<BaseNet>| {
        let mut m = BTreeMap::from([("encoder".to_string(), encoder.params.content_hash())]);
        if let Some(b) = base {
            m.insert("base".into(), b.params.content_hash());
        }
        m
    };
    let frozen_before = hashes(&base);

    let dataset = ingest_dataset(&config.content_dir, config.resolution)?;
    let style = Image::load_square(&config.style_image, config.resolution)?;
    let style_low = downsample_times(&style, config.levels)?;
    let style_maps = encoder.encode(&style, Layer::R41)?;
    let mut prepared: HashMap<usize, Prepared> = HashMap::new();
    let mut max_low_diff = 0.0f64;

    let weights = config.weights();
    let terms = config.stage2_terms();
    let (mut net, mut adam, start, mut tail) = match resume {
        Some(ck) => {
            let net = DetailNet::from_params(ck.params, config.levels)?;
            (net, ck.adam, ck.iteration, ck.loss_tail)
        }
        None => (
            DetailNet::init(config.levels, config.seed)?,
            Adam::new(AdamConfig::with_learning_rate(config.learning_rate())),
            0,
            Vec::new(),
        ),
    };
    adam.config.learning_rate = config.learning_rate();
    let mut header = config.header_lines();
    let source = if base.is_some() { LowSource::BaseNet } else { LowSource::ContentLow };
    header.push(format!(
        "low_frequency_source={}",
        match source {
            LowSource::BaseNet => "base_net",
            LowSource::ContentLow => "content_low",
        }
    ));
    let mut log = LossLog::open(&config.log_path(), &header, start > 0)?;
    let batch = config.batch_size();
    let mut reports = Vec::new();
    let levels = config.levels;

    let save = |net: &DetailNet, adam: &Adam, iteration: u64, tail: &Vec<String>| -> Result<Checkpoint> {
        let ck = Checkpoint {
            stage: Stage::Detail,
            config: config.clone(),
            iteration,
            params: net.params.clone(),
            adam: adam.clone(),
            loss_tail: tail.clone(),
            frozen_hashes: frozen_before.clone(),
        };
        ck.save(config.checkpoint_path())?;
        Ok(ck)
    };

    for step in start..config.iterations {
        let idx = dataset.batch_indices(config.seed, step, batch);
        for &i in &idx {
            if prepared.contains_key(&i) {
                continue;
            }
            let img = &dataset.images[i];
            let pyr = pyramid::decompose(img, levels)?;
            let lv = content_levels(img, levels)?;
            let low = stylized_low(&encoder, base.as_ref(), &pyr.low, &style_low)?;
            let diff = low.max_abs_diff(&pyr.low.to_tensor()).map_or(f64::INFINITY, f64::from);
            max_low_diff = max_low_diff.max(diff);
            let edge_src = if levels >= 2 { &lv[levels - 2] } else { img };
            prepared.insert(
                i,
                Prepared {
                    residuals: pyr.residuals.iter().map(Image::to_tensor).collect(),
                    levels: lv.iter().map(Image::to_tensor).collect(),
                    stylized_low: low,
                    edge: edge_map(edge_src).to_tensor(),
                    features: encoder.encode(img, Layer::R41)?,
                },
            );
        }
        let items: Vec<&Prepared> = idx.iter().map(|i| &prepared[i]).collect();
        let g = Graph::<f32>::new();
        let enc = encoder.bind(&g);
        let db = net.params.bind(&g, true);
        let batch_of = |f: &dyn Fn(&Prepared) -> &Tensor<f32>| -> Result<Var> {
            let ts: Vec<Tensor<f32>> = items.iter().map(|p| f(p).clone()).collect();
            Ok(g.constant(Tensor::stack_batch(&ts)?))
        };
        let inputs = DetailInputs {
            residuals: (0..levels).map(|k| batch_of(&|p| &p.residuals[k])).collect::<Result<_>>()?,
            content_levels: (0..levels).map(|k| batch_of(&|p| &p.levels[k])).collect::<Result<_>>()?,
            stylized_low: batch_of(&|p| &p.stylized_low)?,
            edge: if config.no_eis { None } else { Some(batch_of(&|p| &p.edge)?) },
        };
        let refined = detail_forward(&g, &db, &inputs)?;
        let x_cs = pyramid::reconstruct_var(&g, inputs.stylized_low, &refined)?;
        let f_c = constant_bundle(&g, &items.iter().map(|p| &p.features).collect::<Vec<_>>())?;
        let f_s = constant_bundle(&g, &[&style_maps])?;
        let sampler = Subsampler::new(config.seed, step, config.max_samples);
        let obj = stage2_objective_with_features(&g, &encoder, &enc, x_cs, &f_c, &f_s, &weights, terms, &sampler)?;
        check_finite(step, &obj.report)?;
        let grads = collect_grads(&g, &db, &net.params, obj.total)?;
        adam.update(&mut net.params, &grads)?;

        let line = obj.report.log_line(step);
        log.push(&line)?;
        if step % 10 == 0 {
            log::info!("detail {line}");
        }
        push_tail(&mut tail, line);
        reports.push(obj.report);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            save(&net, &adam, step + 1, &tail)?;
        }
    }

    let frozen_after = hashes(&base);
    if frozen_after != frozen_before {
        return Err(Error::Invalid("frozen network parameters changed during detail training".into()));
    }
    let iteration = config.iterations.max(start);
    let checkpoint = save(&net, &adam, iteration, &tail)?;
    drop(log);
    let plot_path = write_plot(config);
    Ok(TrainOutcome {
        checkpoint,
        checkpoint_path: config.checkpoint_path(),
        log_path: config.log_path(),
        plot_path,
        reports,
        frozen_after,
        low_source: Some(LowSourceCheck { source, max_abs_diff_from_content_low: max_low_diff, images: prepared.len() }),
        skipped_images: dataset.skipped,
    })
}

/// Runs the stage named by the configuration.
pub fn train(config: &TrainConfig, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    match config.stage {
        Stage::Base => train_stage1(config, resume),
        Stage::Detail => train_stage2(config, None, resume),
    }
}
