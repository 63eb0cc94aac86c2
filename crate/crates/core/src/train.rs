//! End-to-end training of the fusion network and its ablations.
//!
//! A training step crops `P` target patches of side `S` from the training
//! images and the atlas at the same coordinates, runs the classification
//! network on the joint batch, fuses atlas labels with the learned
//! similarity, mixes the two potentials with the learnable `alpha`, and
//! minimizes the generalized Dice loss of the softmax with Adam.
//!
//! Three modes are supported:
//! - `full`: unary + `alpha` * pairwise, everything trained jointly;
//! - `classification_only`: unary only, `alpha` held at zero;
//! - `fusion_only_gaussian`: zero unary and a Gaussian intensity kernel whose
//!   width is picked from a small grid by training Dice, with no gradient steps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, BoundParams, CustomOp, GradCheckOptions, GradCheckReport, NodeId, ParamSet, Tape, Tensor};
use crate::classnet::{self, BnMode, ClassNetConfig};
use crate::error::{Error, Result};
use crate::evalx::dice;
use crate::fusion::{self, FusionConfig, FusionInputs, TapeSimilarity};
use crate::simnet::{init_mlp, GaussianSimilarity, MlpNodes, MlpShape, MlpWeights, Similarity, DEFAULT_HIDDEN};
use crate::synth::{derive_seed, stream, Corpus, CorpusSpec, Split};
use crate::volgrid::{argmax_labels, channel_softmax, one_hot, ChannelVolume, Dims, LabelVolume, ScalarVolume};

pub const ALPHA_NAME: &str = "fusion.alpha";
pub const ALPHA_INIT: f64 = 1.0;
/// Guards the class weights of the generalized Dice loss against empty classes.
pub const GDL_EPS: f64 = 1e-6;
/// Gaussian widths tried by `fusion_only_gaussian`, as multiples of the mean
/// absolute intensity difference between aligned target and atlas voxels.
pub const SIGMA_GRID: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    ClassificationOnly,
    FusionOnlyGaussian,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::ClassificationOnly, Ablation::FusionOnlyGaussian];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::ClassificationOnly => "classification_only",
            Ablation::FusionOnlyGaussian => "fusion_only_gaussian",
        }
    }

    fn code(self) -> f64 {
        match self {
            Ablation::Full => 0.0,
            Ablation::ClassificationOnly => 1.0,
            Ablation::FusionOnlyGaussian => 2.0,
        }
    }

    fn from_code(code: f64) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.code() == code)
            .ok_or_else(|| Error::Config(format!("unknown ablation code {code}")))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}, expected full, classification_only or fusion_only_gaussian")))
    }
}

struct GdlParts {
    loss: f64,
    weights: Vec<f64>,
    num: f64,
    den: f64,
}

fn gdl_parts(pred: &[f64], truth: &[u16], classes: usize) -> GdlParts {
    let mut g = vec![0.0; classes];
    let mut s = vec![0.0; classes];
    let mut sg = vec![0.0; classes];
    for (row, &t) in pred.chunks_exact(classes).zip(truth) {
        let t = t as usize;
        g[t] += 1.0;
        sg[t] += row[t];
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    // a class missing from the truth would get weight 1/eps^2 and swamp the
    // loss, so it takes the largest weight among the present classes instead
    let present_max = g.iter().filter(|&&n| n > 0.0).map(|&n| 1.0 / (n + GDL_EPS).powi(2)).fold(0.0, f64::max);
    let weights: Vec<f64> = g.iter().map(|&n| if n > 0.0 { 1.0 / (n + GDL_EPS).powi(2) } else { present_max }).collect();
    let num: f64 = (0..classes).map(|c| weights[c] * sg[c]).sum();
    let den: f64 = (0..classes).map(|c| weights[c] * (s[c] + g[c])).sum();
    GdlParts { loss: 1.0 - 2.0 * num / den, weights, num, den }
}

fn check_truth(rows: usize, classes: usize, truth: &[u16]) -> Result<()> {
    if truth.len() != rows {
        return Err(Error::ShapeMismatch { op: "generalized_dice_loss", lhs: vec![rows, classes], rhs: vec![truth.len()] });
    }
    if let Some(&bad) = truth.iter().find(|&&t| t as usize >= classes) {
        return Err(Error::InvalidLabel { label: bad as usize, num_classes: classes });
    }
    Ok(())
}

/// `1 - 2 sum_c w_c sum_p s_pc g_pc / sum_c w_c sum_p (s_pc + g_pc)` with
/// `w_c = 1 / (sum_p g_pc + eps)^2` for classes present in `truth`; absent
/// classes reuse the largest present weight.
pub fn generalized_dice_loss(pred: &ChannelVolume, truth: &LabelVolume) -> Result<f64> {
    if pred.dims() != truth.dims() || pred.channels() != truth.num_classes() {
        return Err(Error::ShapeMismatch {
            op: "generalized_dice_loss",
            lhs: [pred.dims().as_array().as_slice(), &[pred.channels()]].concat(),
            rhs: [truth.dims().as_array().as_slice(), &[truth.num_classes()]].concat(),
        });
    }
    Ok(gdl_parts(pred.data(), truth.labels(), pred.channels()).loss)
}

struct GdlOp {
    truth: Vec<u16>,
    classes: usize,
    weights: Vec<f64>,
    num: f64,
    den: f64,
}

impl CustomOp for GdlOp {
    fn name(&self) -> &'static str {
        "generalized_dice_loss"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let go = grad_output[0];
        let scale = -2.0 * go / (self.den * self.den);
        let mut grad = vec![0.0; self.truth.len() * self.classes];
        for (row, &t) in grad.chunks_exact_mut(self.classes).zip(&self.truth) {
            for (c, g) in row.iter_mut().enumerate() {
                let truth = if c == t as usize { self.den } else { 0.0 };
                *g = scale * self.weights[c] * (truth - self.num);
            }
        }
        vec![Some(grad)]
    }
}

/// Tape form: `pred` is `[..., C]` probabilities, `truth` one label per row.
pub fn generalized_dice_loss_tape(tape: &mut Tape, pred: NodeId, truth: &[u16]) -> Result<NodeId> {
    let v = tape.value(pred);
    let classes = v.last_dim();
    check_truth(v.rows(), classes, truth)?;
    let parts = gdl_parts(v.data(), truth, classes);
    let op = GdlOp { truth: truth.to_vec(), classes, weights: parts.weights, num: parts.num, den: parts.den };
    Ok(tape.custom(&[pred], Tensor::scalar(parts.loss), Box::new(op)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter, zero-initialized on first use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of every parameter named in `grads`.
pub fn adam_step(params: &mut ParamSet, grads: &BTreeMap<String, Vec<f64>>, state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    for (name, g) in grads {
        let n = params.get(name)?.numel();
        if g.len() != n {
            return Err(Error::ShapeMismatch { op: "adam_step", lhs: vec![n], rhs: vec![g.len()] });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (name, g) in grads {
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let p = params.get_mut(name)?.data_mut();
        for i in 0..g.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= config.lr * mhat / (vhat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Every field can be set from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Patches per step.
    pub patches: usize,
    /// Patch side length.
    pub patch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub mode: Ablation,
    /// Side of the fusion search cube.
    pub radius: usize,
    /// Width of both hidden layers of the similarity MLP.
    pub hidden: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            patches: 2,
            patch_size: 32,
            steps: 2000,
            seed: 0,
            mode: Ablation::Full,
            radius: fusion::DEFAULT_RADIUS,
            hidden: DEFAULT_HIDDEN,
            base_channels: classnet::DEFAULT_BASE_CHANNELS,
            levels: classnet::DEFAULT_LEVELS,
            embed_dim: classnet::DEFAULT_EMBED_DIM,
        }
    }
}

impl TrainConfig {
    /// Settings for 2000-step runs on 48^3 volumes on one CPU core: 16^3
    /// patches keep a full-mode step well under a second.
    pub fn desk_scale() -> Self {
        Self { patch_size: 16, ..Self::default() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Applies `key = value` lines (`#` starts a comment) on top of `self`.
    pub fn apply_kv(&self, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.with_overrides(&pairs)
    }

    /// Sets fields by name from string values.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let serde_json::Value::Object(mut map) = serde_json::to_value(self)? else {
            unreachable!("config serializes to an object")
        };
        for (k, v) in pairs {
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown training key {k:?}")));
            }
            let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.clone()));
            map.insert(k.clone(), value);
        }
        let config: Self =
            serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| Error::Config(format!("invalid training config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_kv(&self) -> String {
        let serde_json::Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config serializes to an object")
        };
        map.iter()
            .map(|(k, v)| match v {
                serde_json::Value::String(s) => format!("{k} = {s}\n"),
                other => format!("{k} = {other}\n"),
            })
            .collect()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::default().apply_kv(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.patches == 0 {
            return Err(Error::Config("steps and patches must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings in {self:?}")));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        FusionConfig::new(self.radius)?;
        let net = ClassNetConfig { base_channels: self.base_channels, levels: self.levels, embed_dim: self.embed_dim, ..ClassNetConfig::new(2) };
        net.validate()?;
        if self.mode != Ablation::FusionOnlyGaussian {
            net.check_dims(Dims::cube(self.patch_size))?;
        }
        Ok(())
    }
}

/// Architecture and mode of a trained model; stored as `meta.*` scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Ablation,
    pub num_classes: usize,
    pub radius: usize,
    pub hidden: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub embed_dim: usize,
    /// Gaussian kernel width (intensity units after z-scoring); unused by other modes.
    pub sigma: f64,
}

impl ModelConfig {
    pub fn from_train(config: &TrainConfig, num_classes: usize) -> Self {
        Self {
            mode: config.mode,
            num_classes,
            radius: config.radius,
            hidden: config.hidden,
            base_channels: config.base_channels,
            levels: config.levels,
            embed_dim: config.embed_dim,
            sigma: 1.0,
        }
    }

    pub fn classnet(&self) -> ClassNetConfig {
        ClassNetConfig {
            base_channels: self.base_channels,
            levels: self.levels,
            embed_dim: self.embed_dim,
            ..ClassNetConfig::new(self.num_classes)
        }
    }

    pub fn fusion(&self) -> Result<FusionConfig> {
        FusionConfig::new(self.radius)
    }

    pub fn mlp_shape(&self) -> MlpShape {
        MlpShape { features: self.classnet().feature_dim(), hidden1: self.hidden, hidden2: self.hidden }
    }

    fn meta(&self) -> [(&'static str, f64); 8] {
        [
            ("meta.mode", self.mode.code()),
            ("meta.num_classes", self.num_classes as f64),
            ("meta.radius", self.radius as f64),
            ("meta.hidden", self.hidden as f64),
            ("meta.base_channels", self.base_channels as f64),
            ("meta.levels", self.levels as f64),
            ("meta.embed_dim", self.embed_dim as f64),
            ("meta.sigma", self.sigma),
        ]
    }

    fn from_params(params: &ParamSet) -> Result<Self> {
        let get = |name: &str| params.get(name).map(|t| t.item());
        let count = |name: &str| -> Result<usize> {
            let v = get(name)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Config(format!("{name} must be a non-negative integer, got {v}")));
            }
            Ok(v as usize)
        };
        Ok(Self {
            mode: Ablation::from_code(get("meta.mode")?)?,
            num_classes: count("meta.num_classes")?,
            radius: count("meta.radius")?,
            hidden: count("meta.hidden")?,
            base_channels: count("meta.base_channels")?,
            levels: count("meta.levels")?,
            embed_dim: count("meta.embed_dim")?,
            sigma: get("meta.sigma")?,
        })
    }
}

/// A model: configuration plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareNet {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Per-voxel class probabilities and their argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub probabilities: ChannelVolume,
    pub labels: LabelVolume,
}

impl CompareNet {
    /// Fresh parameters for `config`, drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = match config.mode {
            Ablation::Full => {
                classnet::init_classnet(&config.classnet(), &mut rng, &mut params)?;
                // a zero class head starts the model at pure label propagation;
                // training then adds unary corrections where the votes fail
                for suffix in ["w", "b"] {
                    params.get_mut(&format!("{}.{suffix}", classnet::HEAD_NAME))?.data_mut().fill(0.0);
                }
                init_mlp(config.mlp_shape(), &mut rng, &mut params)?;
                ALPHA_INIT
            }
            Ablation::ClassificationOnly => {
                classnet::init_classnet(&config.classnet(), &mut rng, &mut params)?;
                0.0
            }
            Ablation::FusionOnlyGaussian => 1.0,
        };
        params.insert(ALPHA_NAME, Tensor::scalar(alpha))?;
        Ok(Self { config, params })
    }

    pub fn alpha(&self) -> f64 {
        self.params.get(ALPHA_NAME).map(|t| t.item()).unwrap_or(0.0)
    }

    /// Parameters with the configuration written as `meta.*` scalars.
    pub fn to_checkpoint(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, t) in self.params.iter().filter(|(n, _)| !n.starts_with("meta.")) {
            out.insert(name, t.clone())?;
        }
        for (name, v) in self.config.meta() {
            out.insert(name, Tensor::scalar(v))?;
        }
        Ok(out)
    }

    pub fn from_checkpoint(params: ParamSet) -> Result<Self> {
        let config = ModelConfig::from_params(&params)?;
        let mut own = ParamSet::new();
        for (name, t) in params.iter().filter(|(n, _)| !n.starts_with("meta.")) {
            own.insert(name, t.clone())?;
        }
        let model = Self { config, params: own };
        if model.config.mode == Ablation::Full {
            MlpWeights::from_params(&model.params)?;
        }
        if model.config.mode != Ablation::FusionOnlyGaussian {
            model.config.classnet().validate()?;
        }
        model.params.get(ALPHA_NAME)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(ParamSet::load(path)?)
    }

    /// Combined potential `unary + alpha * pairwise` for a whole target
    /// volume. Images are raw intensities; z-scoring happens here.
    pub fn potentials(&self, target: &ScalarVolume, atlas: &ScalarVolume, atlas_labels: &LabelVolume) -> Result<ChannelVolume> {
        let dims = target.dims();
        for other in [atlas.dims(), atlas_labels.dims()] {
            if other != dims {
                return Err(Error::ShapeMismatch { op: "segment", lhs: dims.as_array().to_vec(), rhs: other.as_array().to_vec() });
            }
        }
        if atlas_labels.num_classes() != self.config.num_classes {
            return Err(Error::ShapeMismatch { op: "segment", lhs: vec![self.config.num_classes], rhs: vec![atlas_labels.num_classes()] });
        }
        let (t, a) = (target.zscore(), atlas.zscore());
        let labels = one_hot(atlas_labels);
        let fusion = self.config.fusion()?;
        match self.config.mode {
            Ablation::ClassificationOnly => classnet::forward_unary(&t, &self.params, &self.config.classnet()),
            Ablation::Full => {
                let net = self.config.classnet();
                let (logits, embed_t) = classnet::forward(&t, &self.params, &net)?;
                let embed_a = classnet::forward_embed(&a, &self.params, &net)?;
                let ft = classnet::build_fusion_features(&t, &embed_t)?;
                let fa = classnet::build_fusion_features(&a, &embed_a)?;
                let inputs = FusionInputs { target_features: &ft, atlas_features: &fa, atlas_labels: &labels };
                let pair = fusion::fuse_fast(&inputs, &fusion, &Similarity::Mlp(MlpWeights::from_params(&self.params)?))?;
                fusion::combine(&logits, &pair, self.alpha())
            }
            Ablation::FusionOnlyGaussian => {
                let ft = ChannelVolume::from_scalar(&t);
                let fa = ChannelVolume::from_scalar(&a);
                let inputs = FusionInputs { target_features: &ft, atlas_features: &fa, atlas_labels: &labels };
                let g = GaussianSimilarity::new(self.config.sigma)?;
                let pair = fusion::fuse_fast(&inputs, &fusion, &Similarity::Gaussian(g))?;
                let zero = ChannelVolume::zeros(dims, self.config.num_classes);
                fusion::combine(&zero, &pair, self.alpha())
            }
        }
    }

    /// Softmax probabilities and labels for `target` given one aligned atlas.
    pub fn segment(&self, target: &ScalarVolume, atlas: &ScalarVolume, atlas_labels: &LabelVolume) -> Result<Segmentation> {
        let probabilities = channel_softmax(&self.potentials(target, atlas, atlas_labels)?);
        let labels = argmax_labels(&probabilities);
        Ok(Segmentation { probabilities, labels })
    }
}

/// One training batch; images are already z-scored.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub targets: Vec<ScalarVolume>,
    pub truths: Vec<LabelVolume>,
    pub atlases: Vec<ScalarVolume>,
    pub atlas_labels: Vec<LabelVolume>,
}

/// Nodes of one recorded training step.
pub struct StepNodes {
    pub loss: NodeId,
    pub bn_stats: Vec<(String, crate::autodiff::BatchStats)>,
}

fn take_rows(tape: &mut Tape, x: NodeId, rows: std::ops::Range<usize>, shape: Vec<usize>) -> Result<NodeId> {
    let g = tape.gather_rows(x, rows.collect())?;
    tape.reshape(g, shape)
}

fn stacked_one_hot(labels: &[LabelVolume]) -> Result<Tensor> {
    let dims = labels[0].dims();
    let c = labels[0].num_classes();
    let mut data = Vec::with_capacity(labels.len() * dims.len() * c);
    for l in labels {
        data.extend_from_slice(one_hot(l).data());
    }
    Tensor::new(vec![labels.len(), dims.d, dims.h, dims.w, c], data)
}

/// Records the loss of one batch. `bound` must hold every trainable entry the
/// mode uses; `params` supplies buffers.
pub fn build_loss(tape: &mut Tape, bound: &BoundParams, params: &ParamSet, config: &ModelConfig, batch: &PatchBatch) -> Result<StepNodes> {
    let p = batch.targets.len();
    if p == 0 || batch.truths.len() != p {
        return Err(Error::Config("batch needs one truth volume per target".into()));
    }
    let dims = batch.targets[0].dims();
    let c = config.num_classes;
    let truth: Vec<u16> = batch.truths.iter().flat_map(|t| t.labels().iter().copied()).collect();
    let net = config.classnet();
    let (score, bn_stats) = match config.mode {
        Ablation::ClassificationOnly => {
            let refs: Vec<&ScalarVolume> = batch.targets.iter().collect();
            let x = tape.constant(classnet::image_tensor(&refs)?);
            let nodes = classnet::forward_tape(tape, bound, params, &net, x, BnMode::Train)?;
            (nodes.logits, nodes.bn_stats)
        }
        Ablation::Full => {
            if batch.atlases.len() != p || batch.atlas_labels.len() != p {
                return Err(Error::Config("batch needs one atlas patch per target".into()));
            }
            let refs: Vec<&ScalarVolume> = batch.targets.iter().chain(&batch.atlases).collect();
            let x = tape.constant(classnet::image_tensor(&refs)?);
            let nodes = classnet::forward_tape(tape, bound, params, &net, x, BnMode::Train)?;
            let n = p * dims.len();
            let vol = |k: usize| vec![p, dims.d, dims.h, dims.w, k];
            let logits = take_rows(tape, nodes.logits, 0..n, vol(c))?;
            let feats = classnet::fusion_features_tape(tape, x, nodes.embed)?;
            let f = net.feature_dim();
            let ft = take_rows(tape, feats, 0..n, vol(f))?;
            let fa = take_rows(tape, feats, n..2 * n, vol(f))?;
            let labels = tape.constant(stacked_one_hot(&batch.atlas_labels)?);
            let sim = TapeSimilarity::Mlp(MlpNodes::from_bound(bound)?);
            let pair = fusion::fuse_fast_tape(tape, ft, fa, labels, &sim, &config.fusion()?)?;
            let alpha = bound.get(ALPHA_NAME)?;
            (fusion::combine_tape(tape, logits, pair, alpha)?, nodes.bn_stats)
        }
        Ablation::FusionOnlyGaussian => {
            return Err(Error::Config("fusion_only_gaussian has no gradient-trained parameters".into()));
        }
    };
    let prob = tape.channel_softmax(score);
    let loss = generalized_dice_loss_tape(tape, prob, &truth)?;
    Ok(StepNodes { loss, bn_stats })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub alpha: f64,
    /// Milliseconds since training started.
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str = "step,loss,alpha,wall_ms";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{:.17e},{:.17e},{}\n", r.step, r.loss, r.alpha, r.wall_ms));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CompareNet,
    pub log: Vec<LogRow>,
}

fn check_atlas(corpus: &Corpus, atlas_index: usize) -> Result<()> {
    match corpus.subjects.get(atlas_index) {
        None => Err(Error::Config(format!("atlas index {atlas_index} out of range for {} volumes", corpus.subjects.len()))),
        Some(s) if s.split != Split::Train => Err(Error::Config(format!("atlas {} is in the test split", s.id))),
        Some(_) => Ok(()),
    }
}

/// Training targets: every training volume except the atlas (the atlas alone
/// if it is the only training volume).
pub fn training_targets(corpus: &Corpus, atlas_index: usize) -> Vec<usize> {
    let train = corpus.indices(Split::Train);
    let targets: Vec<usize> = train.iter().copied().filter(|&i| i != atlas_index).collect();
    if targets.is_empty() {
        train
    } else {
        targets
    }
}

pub fn train_comparenet(corpus: &Corpus, atlas_index: usize, config: &TrainConfig) -> Result<TrainOutcome> {
    train_comparenet_with(corpus, atlas_index, config, &mut |_| {})
}

/// Trains with a callback after every logged row.
pub fn train_comparenet_with(
    corpus: &Corpus,
    atlas_index: usize,
    config: &TrainConfig,
    on_row: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_atlas(corpus, atlas_index)?;
    let c = corpus.subjects[atlas_index].labels.num_classes();
    let model_config = ModelConfig::from_train(config, c);
    match config.mode {
        Ablation::FusionOnlyGaussian => fit_gaussian(corpus, atlas_index, model_config, on_row),
        _ => train_gradient(corpus, atlas_index, config, model_config, on_row),
    }
}

fn train_gradient(
    corpus: &Corpus,
    atlas_index: usize,
    config: &TrainConfig,
    model_config: ModelConfig,
    on_row: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome> {
    let dims = corpus.subjects[atlas_index].image.dims();
    let s = config.patch_size;
    if [dims.d, dims.h, dims.w].iter().any(|&e| e < s) {
        return Err(Error::Config(format!("patch size {s} exceeds volume {dims}")));
    }
    let mut model = CompareNet::init(model_config, derive_seed(config.seed, stream::TRAINING, 0))?;
    let targets = training_targets(corpus, atlas_index);
    let normalized: BTreeMap<usize, ScalarVolume> = targets
        .iter()
        .chain(std::iter::once(&atlas_index))
        .map(|&i| (i, corpus.subjects[i].image.zscore()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream::PATCHES, 0));
    let adam = config.adam();
    let mut state = AdamState::default();
    let patch = Dims::cube(s);
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut batch = PatchBatch { targets: vec![], truths: vec![], atlases: vec![], atlas_labels: vec![] };
        for _ in 0..config.patches {
            let t = targets[rng.random_range(0..targets.len())];
            let origin = [rng.random_range(0..=dims.d - s), rng.random_range(0..=dims.h - s), rng.random_range(0..=dims.w - s)];
            batch.targets.push(normalized[&t].crop(origin, patch)?);
            batch.truths.push(corpus.subjects[t].labels.crop(origin, patch)?);
            if model.config.mode == Ablation::Full {
                batch.atlases.push(normalized[&atlas_index].crop(origin, patch)?);
                batch.atlas_labels.push(corpus.subjects[atlas_index].labels.crop(origin, patch)?);
            }
        }
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let nodes = build_loss(&mut tape, &bound, &model.params, &model.config, &batch)?;
        let loss = tape.value(nodes.loss).item();
        if !loss.is_finite() {
            return Err(Error::Config(format!("non-finite loss at step {step}")));
        }
        tape.backward(nodes.loss)?;
        let mut grads = bound.grads(&tape, &model.params);
        if model.config.mode == Ablation::ClassificationOnly {
            // alpha stays clamped at zero
            grads.remove(ALPHA_NAME);
        }
        drop(tape);
        adam_step(&mut model.params, &grads, &mut state, &adam)?;
        classnet::update_running_stats(&mut model.params, &nodes.bn_stats)?;
        let row = LogRow { step, loss, alpha: model.alpha(), wall_ms: start.elapsed().as_millis() };
        on_row(&row);
        log.push(row);
    }
    Ok(TrainOutcome { model, log })
}

/// Picks the Gaussian width with the best mean training Dice.
fn fit_gaussian(corpus: &Corpus, atlas_index: usize, mut config: ModelConfig, on_row: &mut dyn FnMut(&LogRow)) -> Result<TrainOutcome> {
    let start = Instant::now();
    let atlas = &corpus.subjects[atlas_index];
    let targets = training_targets(corpus, atlas_index);
    let za = atlas.image.zscore();
    let mut diff = 0.0;
    for &t in &targets {
        let zt = corpus.subjects[t].image.zscore();
        diff += zt.data().iter().zip(za.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / zt.data().len() as f64;
    }
    let base = diff / targets.len() as f64;
    let base = if base > 0.0 { base } else { 1.0 };
    let mut best: Option<(f64, CompareNet)> = None;
    let mut log = Vec::new();
    for (k, factor) in SIGMA_GRID.iter().enumerate() {
        config.sigma = base * factor;
        let model = CompareNet::init(config.clone(), 0)?;
        let mut total = 0.0;
        for &t in &targets {
            let s = &corpus.subjects[t];
            let seg = model.segment(&s.image, &atlas.image, &atlas.labels)?;
            total += dice(&seg.labels, &s.labels)?.mean;
        }
        let score = total / targets.len() as f64;
        let row = LogRow { step: k + 1, loss: 1.0 - score, alpha: model.alpha(), wall_ms: start.elapsed().as_millis() };
        on_row(&row);
        log.push(row);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model));
        }
    }
    let (_, model) = best.expect("sigma grid is not empty");
    Ok(TrainOutcome { model, log })
}

/// Largest relative change of a difference quotient under step halving that
/// still counts as resolved in [`check_training_tape`].
pub const TAPE_CHECK_STABILITY: f64 = 1e-4;

/// Finite-difference check of the whole training tape (classnet, features,
/// fast fusion, combination, softmax, loss) on two 8^3 patches with three
/// classes, a 3^3 search cube, and a narrow network.
pub fn check_training_tape(mode: Ablation, seed: u64, subsample: Option<usize>) -> Result<(GradCheckReport, Vec<String>)> {
    let spec = CorpusSpec { count: 3, train: 3, side: 16, num_classes: 3, ..CorpusSpec::standard(seed) };
    let corpus = Corpus::generate(&spec)?;
    let patch = Dims::cube(8);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::PATCHES, 0));
    let mut batch = PatchBatch { targets: vec![], truths: vec![], atlases: vec![], atlas_labels: vec![] };
    for t in [1, 2] {
        let origin = [rng.random_range(0..=8), rng.random_range(0..=8), rng.random_range(0..=8)];
        batch.targets.push(corpus.subjects[t].image.zscore().crop(origin, patch)?);
        batch.truths.push(corpus.subjects[t].labels.crop(origin, patch)?);
        batch.atlases.push(corpus.subjects[0].image.zscore().crop(origin, patch)?);
        batch.atlas_labels.push(corpus.subjects[0].labels.crop(origin, patch)?);
    }
    let config = ModelConfig { mode, num_classes: 3, radius: 3, hidden: 4, base_channels: 2, levels: 2, embed_dim: 3, sigma: 1.0 };
    let mut model = CompareNet::init(config, derive_seed(seed, stream::TRAINING, 0))?;
    // zero-initialized biases put ReLU inputs exactly on the kink (an all-zero
    // first hidden layer gives a second-layer input of exactly b2), and the
    // zero class head hides every gradient below it, so the check runs at a
    // generic point with small random values in every all-zero tensor
    let zero_names: Vec<String> = model
        .params
        .trainable_names()
        .filter(|n| model.params.get(n).is_ok_and(|t| t.data().iter().all(|&v| v == 0.0)))
        .map(str::to_string)
        .collect();
    for name in zero_names {
        for v in model.params.get_mut(&name)?.data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    let names: Vec<String> = model.params.trainable_names().map(str::to_string).collect();
    let tensors: Vec<Tensor> = names.iter().map(|n| model.params.get(n).cloned()).collect::<Result<_>>()?;
    let report = grad_check(
        |tape, ids| {
            let bound = BoundParams::from_pairs(names.iter().cloned().zip(ids.iter().copied()).collect());
            Ok(build_loss(tape, &bound, &model.params, &model.config, &batch)?.loss)
        },
        &tensors,
        // a loss near 0.5 rounds at ~1e-16, so difference quotients at this
        // step carry ~5e-10 of roundoff; the floor judges entries below 1e-5
        // on a 1e-9 absolute scale. Elements whose quotient still moves by
        // more than the tolerance when the step is halved sit next to a ReLU
        // kink and are counted as unresolved rather than compared
        &GradCheckOptions { subsample, seed, step: 1e-6, floor: 1e-5, stability: Some(TAPE_CHECK_STABILITY) },
    )?;
    Ok((report, names))
}
