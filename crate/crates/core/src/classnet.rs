//! Encoder-decoder classification subnet and feature-embedding layer.
//!
//! The encoder applies a full-resolution 3x3x3 convolution followed by
//! `levels` stride-2 convolutions, doubling the channel count each time. The
//! decoder mirrors it with stride-2 deconvolutions, concatenating the encoder
//! output of the same resolution before a 3x3x3 convolution. Every
//! (de)convolution is followed by ReLU and batch norm, except the final 1x1x1
//! classifier. A 1x1x1 embedding convolution reads the same penultimate
//! feature maps as the classifier and produces the deep features used for
//! label-fusion similarity. Target and atlas images share every parameter.
//!
//! Parameters live under `cls.*` (trunk and classifier) and `embed.*`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, BoundParams, NodeId, ParamSet, Tape, Tensor, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::volgrid::{ChannelVolume, Dims, ScalarVolume};

pub const DEFAULT_BASE_CHANNELS: usize = 8;
pub const DEFAULT_LEVELS: usize = 2;
pub const DEFAULT_EMBED_DIM: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl ClassNetConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            in_channels: 1,
            base_channels: DEFAULT_BASE_CHANNELS,
            levels: DEFAULT_LEVELS,
            num_classes,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::Config("classnet takes single-channel images".into()));
        }
        if self.levels == 0 || self.base_channels == 0 || self.embed_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!("invalid classnet configuration {self:?}")));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        let m = self.required_multiple();
        if dims.as_array().iter().any(|&e| e % m != 0) {
            return Err(Error::Indivisible { dims: dims.as_array(), multiple: m });
        }
        Ok(())
    }

    /// Channels at encoder level `l`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Width of the fusion feature vector: intensity plus embedding.
    pub fn feature_dim(&self) -> usize {
        1 + self.embed_dim
    }
}

/// One conv (or deconv) layer followed by ReLU and batch norm.
fn block_names(prefix: &str) -> [String; 6] {
    [
        format!("{prefix}.w"),
        format!("{prefix}.b"),
        format!("{prefix}.bn.gamma"),
        format!("{prefix}.bn.beta"),
        format!("{prefix}.bn.running_mean"),
        format!("{prefix}.bn.running_var"),
    ]
}

fn enc_name(l: usize) -> String {
    format!("cls.enc{l}")
}

fn up_name(l: usize) -> String {
    format!("cls.dec{l}.up")
}

fn dec_name(l: usize) -> String {
    format!("cls.dec{l}.conv")
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

fn init_block(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, kernel: usize, cin: usize, cout: usize) -> Result<()> {
    let [w, b, gamma, beta, mean, var] = block_names(prefix);
    let fan_in = kernel.pow(3) * cin;
    let data = uniform(rng, kernel.pow(3) * cin * cout, (6.0 / fan_in as f64).sqrt());
    params.insert(w, Tensor::new(vec![kernel, kernel, kernel, cin, cout], data)?)?;
    params.insert(b, Tensor::zeros(vec![cout]))?;
    params.insert(gamma, Tensor::filled(vec![cout], 1.0))?;
    params.insert(beta, Tensor::zeros(vec![cout]))?;
    params.insert(mean, Tensor::zeros(vec![cout]))?;
    params.insert(var, Tensor::filled(vec![cout], 1.0))?;
    Ok(())
}

fn init_pointwise(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize) -> Result<()> {
    let limit = (6.0 / (cin + cout) as f64).sqrt();
    params.insert(format!("{prefix}.w"), Tensor::new(vec![1, 1, 1, cin, cout], uniform(rng, cin * cout, limit))?)?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![cout]))?;
    Ok(())
}

/// Prefix of the 1x1x1 layer producing the unary logits.
pub const HEAD_NAME: &str = "cls.head";

/// He-uniform convolutions, unit-gamma batch norms, Glorot-uniform 1x1x1 heads.
pub fn init_classnet(config: &ClassNetConfig, rng: &mut ChaCha8Rng, params: &mut ParamSet) -> Result<()> {
    config.validate()?;
    init_block(params, rng, &enc_name(0), 3, config.in_channels, config.channels(0))?;
    for l in 1..=config.levels {
        init_block(params, rng, &enc_name(l), 3, config.channels(l - 1), config.channels(l))?;
    }
    for l in (1..=config.levels).rev() {
        let (deep, shallow) = (config.channels(l), config.channels(l - 1));
        init_block(params, rng, &up_name(l), 2, deep, shallow)?;
        init_block(params, rng, &dec_name(l), 3, 2 * shallow, shallow)?;
    }
    init_pointwise(params, rng, HEAD_NAME, config.channels(0), config.num_classes)?;
    init_pointwise(params, rng, "embed", config.channels(0), config.embed_dim)?;
    Ok(())
}

/// Whether batch norms use batch statistics (training) or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Tape nodes produced by one classnet pass.
#[derive(Clone, Debug)]
pub struct ClassNetNodes {
    /// `[B, D, H, W, C]` unary logits.
    pub logits: NodeId,
    /// `[B, D, H, W, E]` embedded deep features.
    pub embed: NodeId,
    /// Batch statistics per batch-norm prefix (training mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
}

struct Forward<'a> {
    tape: &'a mut Tape,
    bound: &'a BoundParams,
    params: &'a ParamSet,
    mode: BnMode,
    stats: Vec<(String, BatchStats)>,
}

impl Forward<'_> {
    fn block(&mut self, prefix: &str, x: NodeId, conv: Conv) -> Result<NodeId> {
        let [w, b, gamma, beta, mean, var] = block_names(prefix);
        let (w, b) = (self.bound.get(&w)?, self.bound.get(&b)?);
        let y = match conv {
            Conv::Same => self.tape.conv3d(x, w, Some(b), 1, 1)?,
            Conv::Down => self.tape.conv3d(x, w, Some(b), 2, 1)?,
            Conv::Up => self.tape.deconv3d(x, w, Some(b))?,
        };
        let y = self.tape.relu(y);
        let (gamma, beta) = (self.bound.get(&gamma)?, self.bound.get(&beta)?);
        match self.mode {
            BnMode::Train => {
                let (out, stats) = self.tape.batchnorm3d_train(y, gamma, beta)?;
                self.stats.push((format!("{prefix}.bn"), stats));
                Ok(out)
            }
            BnMode::Eval => {
                let (mean, var) = (self.params.get(&mean)?.data(), self.params.get(&var)?.data());
                self.tape.batchnorm3d_eval(y, gamma, beta, mean, var)
            }
        }
    }

    fn pointwise(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = self.bound.get(&format!("{prefix}.w"))?;
        let b = self.bound.get(&format!("{prefix}.b"))?;
        self.tape.conv3d(x, w, Some(b), 1, 0)
    }
}

#[derive(Clone, Copy)]
enum Conv {
    Same,
    Down,
    Up,
}

/// Records the classnet on `input` (`[B, D, H, W, 1]`).
pub fn forward_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &ParamSet,
    config: &ClassNetConfig,
    input: NodeId,
    mode: BnMode,
) -> Result<ClassNetNodes> {
    config.validate()?;
    let shape = tape.value(input).shape().to_vec();
    let (_, dims, cin) = tape
        .value(input)
        .volume_dims()
        .ok_or_else(|| Error::ShapeMismatch { op: "classnet", lhs: shape.clone(), rhs: vec![] })?;
    if cin != config.in_channels {
        return Err(Error::ShapeMismatch { op: "classnet", lhs: shape, rhs: vec![config.in_channels] });
    }
    config.check_dims(dims)?;
    let mut f = Forward { tape, bound, params, mode, stats: Vec::new() };
    let mut skips = vec![f.block(&enc_name(0), input, Conv::Same)?];
    for l in 1..=config.levels {
        let prev = *skips.last().unwrap();
        skips.push(f.block(&enc_name(l), prev, Conv::Down)?);
    }
    let mut x = skips.pop().unwrap();
    for l in (1..=config.levels).rev() {
        let up = f.block(&up_name(l), x, Conv::Up)?;
        let cat = f.tape.concat_channels(up, skips[l - 1])?;
        x = f.block(&dec_name(l), cat, Conv::Same)?;
    }
    let logits = f.pointwise(HEAD_NAME, x)?;
    let embed = f.pointwise("embed", x)?;
    Ok(ClassNetNodes { logits, embed, bn_stats: f.stats })
}

/// Blends batch statistics into the running estimates:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats(params: &mut ParamSet, stats: &[(String, BatchStats)]) -> Result<()> {
    for (prefix, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let t = params.get_mut(&format!("{prefix}.{suffix}"))?;
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
    Ok(())
}

pub(crate) fn image_tensor(images: &[&ScalarVolume]) -> Result<Tensor> {
    let dims = images.first().map(|i| i.dims()).ok_or_else(|| Error::InvalidVolume("no images".into()))?;
    let mut data = Vec::with_capacity(images.len() * dims.len());
    for img in images {
        if img.dims() != dims {
            return Err(Error::ShapeMismatch { op: "classnet batch", lhs: dims.as_array().to_vec(), rhs: img.dims().as_array().to_vec() });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), dims.d, dims.h, dims.w, 1], data)
}

fn channel_volume(t: &Tensor, dims: Dims) -> Result<ChannelVolume> {
    ChannelVolume::new(dims, t.last_dim(), t.data().to_vec())
}

/// Inference pass returning `(logits, embedding)`; batch norms use running statistics.
pub fn forward(image: &ScalarVolume, params: &ParamSet, config: &ClassNetConfig) -> Result<(ChannelVolume, ChannelVolume)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(image_tensor(&[image])?);
    let nodes = forward_tape(&mut tape, &bound, params, config, x, BnMode::Eval)?;
    Ok((channel_volume(tape.value(nodes.logits), image.dims())?, channel_volume(tape.value(nodes.embed), image.dims())?))
}

/// Unary logits (C channels) at full resolution.
pub fn forward_unary(image: &ScalarVolume, params: &ParamSet, config: &ClassNetConfig) -> Result<ChannelVolume> {
    forward(image, params, config).map(|(logits, _)| logits)
}

/// Embedded deep features (E channels) at full resolution.
pub fn forward_embed(image: &ScalarVolume, params: &ParamSet, config: &ClassNetConfig) -> Result<ChannelVolume> {
    forward(image, params, config).map(|(_, embed)| embed)
}

/// Fusion features: the (already normalized) intensity in channel 0 followed
/// by the embedding channels.
pub fn build_fusion_features(image: &ScalarVolume, embed: &ChannelVolume) -> Result<ChannelVolume> {
    if image.dims() != embed.dims() {
        return Err(Error::ShapeMismatch {
            op: "build_fusion_features",
            lhs: image.dims().as_array().to_vec(),
            rhs: embed.dims().as_array().to_vec(),
        });
    }
    ChannelVolume::from_scalar(image).concat(embed)
}

/// Tape form of [`build_fusion_features`].
pub fn fusion_features_tape(tape: &mut Tape, image: NodeId, embed: NodeId) -> Result<NodeId> {
    tape.concat_channels(image, embed)
}
