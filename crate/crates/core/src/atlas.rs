//! Normalized mutual information and atlas selection.
//!
//! Each image is quantized into equal-mass (quantile) bins: a voxel with
//! value `x` falls in bin `floor(bins * #{v < x} / n)`, so ties share a bin
//! and any strictly increasing intensity map leaves the binning unchanged.
//! NMI is `2 I(A; B) / (H(A) + H(B))` on the joint histogram of bin pairs.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::synth::{Corpus, Split};
use crate::volgrid::ScalarVolume;

pub const DEFAULT_BINS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct NmiConfig {
    pub bins: usize,
}

impl Default for NmiConfig {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS }
    }
}

impl NmiConfig {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("NMI needs at least 2 bins, got {bins}")));
        }
        Ok(Self { bins })
    }
}

/// Quantile bin index of every voxel.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    values
        .iter()
        .map(|&x| {
            let below = sorted.partition_point(|&v| v < x);
            (bins * below / n).min(bins - 1)
        })
        .collect()
}

/// Shannon entropy (nats) of a histogram; counts are summed in sorted order so
/// the result does not depend on histogram layout.
fn entropy(counts: impl Iterator<Item = usize>, n: usize) -> f64 {
    let mut c: Vec<usize> = counts.filter(|&c| c > 0).collect();
    c.sort_unstable();
    let n = n as f64;
    -c.iter().map(|&k| {
        let p = k as f64 / n;
        p * p.ln()
    }).sum::<f64>()
}

fn nmi_from_bins(a: &[usize], b: &[usize], bins: usize) -> f64 {
    let n = a.len();
    let mut joint = vec![0usize; bins * bins];
    let (mut ma, mut mb) = (vec![0usize; bins], vec![0usize; bins]);
    for (&i, &j) in a.iter().zip(b) {
        joint[i * bins + j] += 1;
        ma[i] += 1;
        mb[j] += 1;
    }
    let (ha, hb) = (entropy(ma.into_iter(), n), entropy(mb.into_iter(), n));
    match (ha == 0.0, hb == 0.0) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hab = entropy(joint.into_iter(), n);
    let sum = ha + hb;
    2.0 * (sum - hab) / sum
}

pub fn nmi(a: &ScalarVolume, b: &ScalarVolume, config: &NmiConfig) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch { op: "nmi", lhs: a.dims().as_array().to_vec(), rhs: b.dims().as_array().to_vec() });
    }
    NmiConfig::new(config.bins)?;
    Ok(nmi_from_bins(&quantile_bins(a.data(), config.bins), &quantile_bins(b.data(), config.bins), config.bins))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AtlasSelection {
    pub index: usize,
    /// Mean NMI of each image against all others.
    pub scores: Vec<f64>,
    /// Symmetric pairwise NMI matrix with ones on the diagonal.
    pub matrix: Vec<Vec<f64>>,
    pub bins: usize,
}

/// Picks the image with the highest mean NMI against the rest; ties go to the
/// lowest index.
pub fn select_atlas(images: &[ScalarVolume], config: &NmiConfig) -> Result<AtlasSelection> {
    NmiConfig::new(config.bins)?;
    if images.len() < 2 {
        return Err(Error::Config(format!("atlas selection needs at least 2 images, got {}", images.len())));
    }
    let dims = images[0].dims();
    if let Some(bad) = images.iter().find(|i| i.dims() != dims) {
        return Err(Error::ShapeMismatch { op: "select_atlas", lhs: dims.as_array().to_vec(), rhs: bad.dims().as_array().to_vec() });
    }
    let binned: Vec<Vec<usize>> = images.par_iter().map(|i| quantile_bins(i.data(), config.bins)).collect();
    let k = images.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs.par_iter().map(|&(i, j)| nmi_from_bins(&binned[i], &binned[j], config.bins)).collect();
    let mut matrix = vec![vec![1.0; k]; k];
    for (&(i, j), &v) in pairs.iter().zip(&values) {
        matrix[i][j] = v;
        matrix[j][i] = v;
    }
    let scores: Vec<f64> = (0..k)
        .map(|i| (0..k).filter(|&j| j != i).map(|j| matrix[i][j]).sum::<f64>() / (k - 1) as f64)
        .collect();
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = i;
        }
    }
    Ok(AtlasSelection { index, scores, matrix, bins: config.bins })
}

/// Atlas picked from the training split of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusAtlas {
    /// Corpus index of the chosen volume.
    pub index: usize,
    pub id: String,
    /// Corpus indices of the candidates, in the order used by `selection`.
    pub candidates: Vec<usize>,
    pub selection: AtlasSelection,
}

/// Runs [`select_atlas`] over the training volumes of `corpus`.
pub fn select_corpus_atlas(corpus: &Corpus, config: &NmiConfig) -> Result<CorpusAtlas> {
    let candidates = corpus.indices(Split::Train);
    let images: Vec<ScalarVolume> = candidates.iter().map(|&i| corpus.subjects[i].image.clone()).collect();
    let selection = select_atlas(&images, config)?;
    let index = candidates[selection.index];
    Ok(CorpusAtlas { index, id: corpus.subjects[index].id.clone(), candidates, selection })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Dims;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(dims: Dims, seed: u64) -> ScalarVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarVolume::new(dims, (0..dims.len()).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
    }

    #[test]
    fn self_nmi_is_one() {
        let a = noise(Dims::cube(6), 1);
        assert!((nmi(&a, &a, &NmiConfig::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swapped_pair_is_a_permutation() {
        let dims = Dims::new(2, 1, 1);
        let a = ScalarVolume::new(dims, vec![0.0, 1.0]).unwrap();
        let b = ScalarVolume::new(dims, vec![1.0, 0.0]).unwrap();
        assert_eq!(quantile_bins(a.data(), 2), vec![0, 1]);
        assert_eq!(quantile_bins(b.data(), 2), vec![1, 0]);
        assert!((nmi(&a, &b, &NmiConfig::new(2).unwrap()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_entropy_conventions() {
        let dims = Dims::cube(4);
        let a = noise(dims, 2);
        let c = ScalarVolume::new(dims, vec![7.0; dims.len()]).unwrap();
        let cfg = NmiConfig::default();
        assert_eq!(nmi(&a, &c, &cfg).unwrap(), 0.0);
        assert_eq!(nmi(&c, &a, &cfg).unwrap(), 0.0);
        assert_eq!(nmi(&c, &c, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_joint_histogram() {
        // 2 bins: a -> [0, 0, 1, 1], b -> [0, 0, 0, 1]
        let dims = Dims::new(1, 1, 4);
        let a = ScalarVolume::new(dims, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = ScalarVolume::new(dims, vec![0.0, 0.0, 0.0, 5.0]).unwrap();
        assert_eq!(quantile_bins(a.data(), 2), vec![0, 0, 1, 1]);
        assert_eq!(quantile_bins(b.data(), 2), vec![0, 0, 0, 1]);
        // tied values share the lower bin
        assert_eq!(quantile_bins(&[0.0, 5.0, 5.0, 5.0], 2), vec![0, 0, 0, 0]);
        let h = |ps: &[f64]| -ps.iter().map(|p| p * p.ln()).sum::<f64>();
        let (ha, hb) = (h(&[0.5, 0.5]), h(&[0.75, 0.25]));
        let hab = h(&[0.25, 0.25, 0.5]);
        let want = 2.0 * (ha + hb - hab) / (ha + hb);
        assert!((nmi(&a, &b, &NmiConfig::new(2).unwrap()).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn mismatched_dims_and_bad_config() {
        let cfg = NmiConfig::default();
        assert!(nmi(&noise(Dims::cube(2), 0), &noise(Dims::cube(3), 0), &cfg).is_err());
        assert!(NmiConfig::new(1).is_err());
        assert!(select_atlas(&[noise(Dims::cube(2), 0)], &cfg).is_err());
    }

    #[test]
    fn identical_images_tie_to_zero() {
        let a = noise(Dims::cube(5), 3);
        let sel = select_atlas(&[a.clone(), a.clone(), a], &NmiConfig::default()).unwrap();
        assert_eq!(sel.index, 0);
    }

    #[test]
    fn duplicated_image_is_selected() {
        let dims = Dims::cube(8);
        let a = noise(dims, 4);
        let b = noise(dims, 5);
        let sel = select_atlas(&[a.clone(), a.clone(), b.clone()], &NmiConfig::default()).unwrap();
        assert_eq!(sel.index, 0);
        assert!(sel.scores[2] < sel.scores[0]);
        let sel = select_atlas(&[b, a.clone(), a], &NmiConfig::default()).unwrap();
        assert_eq!(sel.index, 1);
    }

    #[test]
    fn monotone_rescaling_leaves_selection_unchanged() {
        let dims = Dims::cube(6);
        let imgs: Vec<ScalarVolume> = (0..4).map(|s| noise(dims, 10 + s)).collect();
        let cfg = NmiConfig::default();
        let base = select_atlas(&imgs, &cfg).unwrap();
        let rescaled: Vec<ScalarVolume> = imgs
            .iter()
            .map(|i| ScalarVolume::new(dims, i.data().iter().map(|v| (v / 40.0).exp() * 3.0 + 1.0).collect()).unwrap())
            .collect();
        let after = select_atlas(&rescaled, &cfg).unwrap();
        assert_eq!(after.index, base.index);
        assert_eq!(after.matrix, base.matrix);
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]

        #[test]
        fn nmi_symmetric_and_bounded(seed in 0u64..100_000, levels in 1u32..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = Dims::new(rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
            // quantized intensities exercise ties
            let mut img = || ScalarVolume::new(dims, (0..dims.len()).map(|_| rng.random_range(0..=levels) as f64).collect()).unwrap();
            let (a, b) = (img(), img());
            let cfg = NmiConfig::new(rng.random_range(2..40)).unwrap();
            let ab = nmi(&a, &b, &cfg).unwrap();
            prop_assert_eq!(ab.to_bits(), nmi(&b, &a, &cfg).unwrap().to_bits());
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        }

        #[test]
        fn selection_follows_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = Dims::cube(4);
            let imgs: Vec<ScalarVolume> = (0..4).map(|i| noise(dims, seed * 10 + i)).collect();
            let cfg = NmiConfig::new(8).unwrap();
            let base = select_atlas(&imgs, &cfg).unwrap();
            let mut perm: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<ScalarVolume> = perm.iter().map(|&i| imgs[i].clone()).collect();
            let after = select_atlas(&permuted, &cfg).unwrap();
            let best = base.scores[base.index];
            // unique maxima move with the permutation
            if base.scores.iter().filter(|&&s| s == best).count() == 1 {
                prop_assert_eq!(perm[after.index], base.index);
            }
        }
    }
}
