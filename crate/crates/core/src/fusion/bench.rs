//! Wall-clock comparison of the naive and fast fusion paths.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{fuse_fast, pairwise_potential, FusionConfig, FusionInputs};
use crate::autodiff::ParamSet;
use crate::error::Result;
use crate::simnet::{init_mlp, MlpShape, MlpWeights, Similarity};
use crate::volgrid::{one_hot, ChannelVolume, Dims, LabelVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub side: usize,
    pub radius: usize,
    pub features: usize,
    pub classes: usize,
    pub hidden: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { side: 32, radius: 5, features: 21, classes: 5, hidden: crate::simnet::DEFAULT_HIDDEN, runs: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub naive_ms: Vec<f64>,
    pub fast_ms: Vec<f64>,
    pub naive_median_ms: f64,
    pub fast_median_ms: f64,
    /// `naive_median_ms / fast_median_ms`.
    pub speedup: f64,
    pub max_abs_diff: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times both paths on one random instance. A warm-up call of each path
/// precedes the `runs` timed calls.
pub fn bench_fusion(config: &BenchConfig) -> Result<BenchReport> {
    let fusion = FusionConfig::new(config.radius)?;
    let dims = Dims::cube(config.side);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut features = || {
        let data = (0..dims.len() * config.features).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        ChannelVolume::new(dims, config.features, data)
    };
    let (ft, fa) = (features()?, features()?);
    let labels = LabelVolume::new(dims, (0..dims.len()).map(|_| rng.random_range(0..config.classes) as u16).collect(), config.classes)?;
    let labels = one_hot(&labels);
    let mut params = ParamSet::new();
    let shape = MlpShape { features: config.features, hidden1: config.hidden, hidden2: config.hidden };
    init_mlp(shape, &mut rng, &mut params)?;
    let sim = Similarity::Mlp(MlpWeights::from_params(&params)?);
    let inputs = FusionInputs { target_features: &ft, atlas_features: &fa, atlas_labels: &labels };

    let naive = pairwise_potential(&inputs, &fusion, &sim)?;
    let fast = fuse_fast(&inputs, &fusion, &sim)?;
    let max_abs_diff = naive.data().iter().zip(fast.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (mut naive_ms, mut fast_ms) = (Vec::new(), Vec::new());
    for _ in 0..config.runs.max(1) {
        let t = Instant::now();
        std::hint::black_box(pairwise_potential(&inputs, &fusion, &sim)?);
        naive_ms.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        std::hint::black_box(fuse_fast(&inputs, &fusion, &sim)?);
        fast_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let (naive_median_ms, fast_median_ms) = (median(&naive_ms), median(&fast_ms));
    Ok(BenchReport {
        config: config.clone(),
        naive_ms,
        fast_ms,
        naive_median_ms,
        fast_median_ms,
        speedup: naive_median_ms / fast_median_ms,
        max_abs_diff,
    })
}
