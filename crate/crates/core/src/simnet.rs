//! Similarity measures producing voting weights for feature pairs.
//!
//! Two measures are provided: a fixed Gaussian kernel on the feature
//! distance, and a learnable three-layer MLP applied to the feature
//! difference `fp - fq` whose scalar output passes through softplus so every
//! weight is strictly positive. One MLP instance is shared by all pairs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softplus, NodeId, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};

pub const MLP_PREFIX: &str = "sim.mlp";
/// Output bias giving `softplus(b) = 1`, i.e. near-uniform initial voting.
pub const MLP_OUTPUT_BIAS: f64 = 0.5414;
pub const DEFAULT_HIDDEN: usize = 32;

fn param_name(layer: usize, kind: &str) -> String {
    format!("{MLP_PREFIX}.l{layer}.{kind}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub features: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl MlpShape {
    pub fn new(features: usize) -> Self {
        Self { features, hidden1: DEFAULT_HIDDEN, hidden2: DEFAULT_HIDDEN }
    }
}

/// Glorot-uniform weights, zero hidden biases, and [`MLP_OUTPUT_BIAS`] on the output.
pub fn init_mlp(shape: MlpShape, rng: &mut ChaCha8Rng, params: &mut ParamSet) -> Result<()> {
    let dims = [(shape.features, shape.hidden1), (shape.hidden1, shape.hidden2), (shape.hidden2, 1)];
    for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        params.insert(param_name(i + 1, "w"), Tensor::matrix(fan_in, fan_out, w)?)?;
        let b = if i == 2 { vec![MLP_OUTPUT_BIAS] } else { vec![0.0; fan_out] };
        params.insert(param_name(i + 1, "b"), Tensor::vector(b))?;
    }
    Ok(())
}

/// Plain-buffer copy of the MLP weights for value-only evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub shape: MlpShape,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

impl MlpWeights {
    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let w1 = params.get(&param_name(1, "w"))?;
        let w2 = params.get(&param_name(2, "w"))?;
        if w1.shape().len() != 2 || w2.shape().len() != 2 {
            return Err(Error::Config("similarity MLP weights must be matrices".into()));
        }
        let shape = MlpShape { features: w1.shape()[0], hidden1: w1.shape()[1], hidden2: w2.shape()[1] };
        let me = Self {
            shape,
            w1: w1.data().to_vec(),
            b1: params.get(&param_name(1, "b"))?.data().to_vec(),
            w2: w2.data().to_vec(),
            b2: params.get(&param_name(2, "b"))?.data().to_vec(),
            w3: params.get(&param_name(3, "w"))?.data().to_vec(),
            b3: params.get(&param_name(3, "b"))?.item(),
        };
        let ok = me.b1.len() == shape.hidden1
            && w2.shape()[0] == shape.hidden1
            && me.b2.len() == shape.hidden2
            && me.w3.len() == shape.hidden2;
        if !ok {
            return Err(Error::Config("inconsistent similarity MLP shapes".into()));
        }
        Ok(me)
    }

    /// All-zero weights with output bias `b`.
    pub fn constant(shape: MlpShape, b: f64) -> Self {
        Self {
            shape,
            w1: vec![0.0; shape.features * shape.hidden1],
            b1: vec![0.0; shape.hidden1],
            w2: vec![0.0; shape.hidden1 * shape.hidden2],
            b2: vec![0.0; shape.hidden2],
            w3: vec![0.0; shape.hidden2],
            b3: b,
        }
    }

    pub fn to_params(&self, params: &mut ParamSet) -> Result<()> {
        let s = self.shape;
        params.insert(param_name(1, "w"), Tensor::matrix(s.features, s.hidden1, self.w1.clone())?)?;
        params.insert(param_name(1, "b"), Tensor::vector(self.b1.clone()))?;
        params.insert(param_name(2, "w"), Tensor::matrix(s.hidden1, s.hidden2, self.w2.clone())?)?;
        params.insert(param_name(2, "b"), Tensor::vector(self.b2.clone()))?;
        params.insert(param_name(3, "w"), Tensor::matrix(s.hidden2, 1, self.w3.clone())?)?;
        params.insert(param_name(3, "b"), Tensor::vector(vec![self.b3]))?;
        Ok(())
    }

    /// Pre-softplus MLP output for a difference vector.
    pub fn logit(&self, diff: &[f64]) -> f64 {
        let s = self.shape;
        let mut h1 = self.b1.clone();
        for (i, &d) in diff.iter().enumerate() {
            for (j, h) in h1.iter_mut().enumerate() {
                *h += d * self.w1[i * s.hidden1 + j];
            }
        }
        let mut h2 = self.b2.clone();
        for (i, &a) in h1.iter().enumerate() {
            let a = a.max(0.0);
            for (j, h) in h2.iter_mut().enumerate() {
                *h += a * self.w2[i * s.hidden2 + j];
            }
        }
        let mut z = self.b3;
        for (h, w) in h2.iter().zip(&self.w3) {
            z += h.max(0.0) * w;
        }
        z
    }
}

/// Weight `softplus(MLP(fp - fq))`.
pub fn mlp_weight(fp: &[f64], fq: &[f64], mlp: &MlpWeights) -> Result<f64> {
    if fp.len() != fq.len() || fp.len() != mlp.shape.features {
        return Err(Error::ShapeMismatch { op: "mlp_similarity", lhs: vec![fp.len()], rhs: vec![fq.len(), mlp.shape.features] });
    }
    let diff: Vec<f64> = fp.iter().zip(fq).map(|(a, b)| a - b).collect();
    Ok(softplus(mlp.logit(&diff)))
}

/// Tape handles of the MLP parameters.
#[derive(Clone, Copy, Debug)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

impl MlpNodes {
    pub fn from_bound(bound: &crate::autodiff::BoundParams) -> Result<Self> {
        Ok(Self {
            w1: bound.get(&param_name(1, "w"))?,
            b1: bound.get(&param_name(1, "b"))?,
            w2: bound.get(&param_name(2, "w"))?,
            b2: bound.get(&param_name(2, "b"))?,
            w3: bound.get(&param_name(3, "w"))?,
            b3: bound.get(&param_name(3, "b"))?,
        })
    }

    pub fn as_vec(&self) -> Vec<NodeId> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

/// Tape-recorded weights for `n` pairs given as `[n, F]` rows of `fp` and `fq`.
/// Returns an `[n, 1]` node.
pub fn mlp_similarity(tape: &mut Tape, fp: NodeId, fq: NodeId, mlp: &MlpNodes) -> Result<NodeId> {
    let diff = tape.sub(fp, fq)?;
    let h1 = tape.linear(diff, mlp.w1, Some(mlp.b1))?;
    let h1 = tape.relu(h1);
    let h2 = tape.linear(h1, mlp.w2, Some(mlp.b2))?;
    let h2 = tape.relu(h2);
    let z = tape.linear(h2, mlp.w3, Some(mlp.b3))?;
    Ok(tape.softplus(z))
}

/// Gaussian kernel `exp(-|fp - fq|^2 / sigma^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSimilarity {
    pub sigma: f64,
}

impl GaussianSimilarity {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    #[inline]
    pub(crate) fn weight_unchecked(&self, fp: &[f64], fq: &[f64]) -> f64 {
        let d2: f64 = fp.iter().zip(fq).map(|(a, b)| (a - b) * (a - b)).sum();
        (-d2 / (self.sigma * self.sigma)).exp()
    }
}

pub fn gaussian_similarity(fp: &[f64], fq: &[f64], g: &GaussianSimilarity) -> Result<f64> {
    if fp.len() != fq.len() {
        return Err(Error::ShapeMismatch { op: "gaussian_similarity", lhs: vec![fp.len()], rhs: vec![fq.len()] });
    }
    Ok(g.weight_unchecked(fp, fq))
}

/// A voting-weight function for fusion.
#[derive(Clone, Debug, PartialEq)]
pub enum Similarity {
    Gaussian(GaussianSimilarity),
    Mlp(MlpWeights),
}

impl Similarity {
    pub fn weight(&self, fp: &[f64], fq: &[f64]) -> Result<f64> {
        match self {
            Similarity::Gaussian(g) => gaussian_similarity(fp, fq, g),
            Similarity::Mlp(m) => mlp_weight(fp, fq, m),
        }
    }
}
