use proptest::{prop_assert, proptest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, GradCheckOptions, ParamSet};
use crate::simnet::{init_mlp, MlpShape};
use crate::volgrid::{argmax_labels, one_hot, LabelVolume};

fn random_features(dims: Dims, f: usize, rng: &mut ChaCha8Rng) -> ChannelVolume {
    ChannelVolume::new(dims, f, (0..dims.len() * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_onehot(dims: Dims, c: usize, rng: &mut ChaCha8Rng) -> ChannelVolume {
    let labels = (0..dims.len()).map(|_| rng.random_range(0..c as u16)).collect();
    one_hot(&LabelVolume::new(dims, labels, c.max(2)).unwrap())
}

fn random_mlp_params(f: usize, h1: usize, h2: usize, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    init_mlp(MlpShape { features: f, hidden1: h1, hidden2: h2 }, rng, &mut p).unwrap();
    for name in ["sim.mlp.l1.b", "sim.mlp.l2.b"] {
        for v in p.get_mut(name).unwrap().data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn random_mlp(f: usize, rng: &mut ChaCha8Rng) -> Similarity {
    Similarity::Mlp(MlpWeights::from_params(&random_mlp_params(f, 8, 6, rng)).unwrap())
}

struct Instance {
    ft: ChannelVolume,
    fx: ChannelVolume,
    lab: ChannelVolume,
}

impl Instance {
    fn random(dims: Dims, f: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { ft: random_features(dims, f, rng), fx: random_features(dims, f, rng), lab: random_onehot(dims, c, rng) }
    }

    fn inputs(&self) -> FusionInputs<'_> {
        FusionInputs { target_features: &self.ft, atlas_features: &self.fx, atlas_labels: &self.lab }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn config_requires_odd_side() {
    assert!(FusionConfig::new(0).is_err());
    assert!(FusionConfig::new(4).is_err());
    assert_eq!(FusionConfig::new(3).unwrap().offsets().len(), 27);
    assert_eq!(FusionConfig::default().radius, 5);
    let offs = FusionConfig::new(3).unwrap().offsets();
    assert_eq!(offs[0], [-1, -1, -1]);
    assert_eq!(offs[13], [0, 0, 0]);
}

#[test]
fn single_voter_copies_atlas_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inst = Instance::random(Dims::new(4, 5, 3), 3, 4, &mut rng);
    let cfg = FusionConfig::new(1).unwrap();
    for sim in [random_mlp(3, &mut rng), Similarity::Gaussian(GaussianSimilarity::new(0.3).unwrap())] {
        let naive = pairwise_potential(&inst.inputs(), &cfg, &sim).unwrap();
        let fast = fuse_fast(&inst.inputs(), &cfg, &sim).unwrap();
        assert_eq!(naive.data(), inst.lab.data());
        assert_eq!(fast.data(), inst.lab.data());
    }
}

#[test]
fn uniform_weights_average_the_neighbourhood() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = Dims::cube(5);
    let sim = Similarity::Gaussian(GaussianSimilarity::new(1e12).unwrap());
    let cfg = FusionConfig::new(3).unwrap();

    let all_two = one_hot(&LabelVolume::filled(dims, 2, 4).unwrap());
    let inst = Instance { ft: random_features(dims, 2, &mut rng), fx: random_features(dims, 2, &mut rng), lab: all_two };
    let out = fuse_fast(&inst.inputs(), &cfg, &sim).unwrap();
    let p = dims.index(2, 2, 2);
    for (c, v) in out.voxel(p).iter().enumerate() {
        assert!((v - if c == 2 { 1.0 } else { 0.0 }).abs() < 1e-12);
    }

    let inst = Instance::random(dims, 2, 3, &mut rng);
    let out = pairwise_potential(&inst.inputs(), &cfg, &sim).unwrap();
    let (z, y, x) = (2, 1, 3);
    let mut hist = [0.0; 3];
    for qz in z - 1..=z + 1 {
        for qy in y - 1..=y + 1 {
            for qx in x - 1..=x + 1 {
                let l = inst.lab.voxel(dims.index(qz, qy, qx));
                for c in 0..3 {
                    hist[c] += l[c];
                }
            }
        }
    }
    for (v, h) in out.voxel(dims.index(z, y, x)).iter().zip(hist) {
        assert!((v - h / 27.0).abs() < 1e-12);
    }
    // a corner voxel sees only its clipped 2x2x2 cube
    let corner = out.voxel(0);
    let mut hist = [0.0; 3];
    for q in [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)] {
        let l = inst.lab.voxel(dims.index(q.0, q.1, q.2));
        for c in 0..3 {
            hist[c] += l[c];
        }
    }
    for (v, h) in corner.iter().zip(hist) {
        assert!((v - h / 8.0).abs() < 1e-12);
    }
}

#[test]
fn fast_equals_naive_on_8_cubed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = Instance::random(Dims::cube(8), 4, 3, &mut rng);
    let cfg = FusionConfig::new(3).unwrap();
    for sim in [random_mlp(4, &mut rng), Similarity::Gaussian(GaussianSimilarity::new(0.8).unwrap())] {
        let naive = pairwise_potential(&inst.inputs(), &cfg, &sim).unwrap();
        let fast = fuse_fast(&inst.inputs(), &cfg, &sim).unwrap();
        assert!(max_abs_diff(naive.data(), fast.data()) < 1e-10);
    }
}

#[test]
fn fast_equals_naive_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..20 {
        let dims = Dims::new(rng.random_range(1..=10), rng.random_range(1..=10), rng.random_range(1..=10));
        let radius = [1, 3, 5][i % 3];
        let c = rng.random_range(1..=4);
        let f = rng.random_range(1..=5);
        let inst = Instance::random(dims, f, c, &mut rng);
        let sim = if i % 4 == 3 {
            Similarity::Gaussian(GaussianSimilarity::new(rng.random_range(0.3..3.0)).unwrap())
        } else {
            random_mlp(f, &mut rng)
        };
        let cfg = FusionConfig::new(radius).unwrap();
        let naive = pairwise_potential(&inst.inputs(), &cfg, &sim).unwrap();
        let fast = fuse_fast(&inst.inputs(), &cfg, &sim).unwrap();
        let err = max_abs_diff(naive.data(), fast.data());
        assert!(err < 1e-10, "instance {i}: {dims} r={radius}: {err:e}");
    }
}

#[test]
fn output_is_a_probability_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = Instance::random(Dims::new(6, 7, 5), 3, 4, &mut rng);
    let out = fuse_fast(&inst.inputs(), &FusionConfig::default(), &random_mlp(3, &mut rng)).unwrap();
    assert!(out.is_probability_map(1e-9));
}

#[test]
fn mismatched_inputs_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = Instance::random(Dims::cube(4), 3, 2, &mut rng);
    let b = random_features(Dims::new(4, 4, 5), 3, &mut rng);
    let bad = FusionInputs { atlas_features: &b, ..a.inputs() };
    let sim = Similarity::Gaussian(GaussianSimilarity::new(1.0).unwrap());
    assert!(matches!(fuse_fast(&bad, &FusionConfig::default(), &sim), Err(Error::ShapeMismatch { .. })));
    let wrong_f = random_mlp(5, &mut rng);
    assert!(pairwise_potential(&a.inputs(), &FusionConfig::default(), &wrong_f).is_err());
}

#[test]
fn combine_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = Dims::new(2, 3, 2);
    let unary = random_features(dims, 3, &mut rng);
    let pair = random_features(dims, 3, &mut rng);
    assert_eq!(combine(&unary, &pair, 0.0).unwrap(), unary);

    let zero = ChannelVolume::zeros(dims, 3);
    assert_eq!(argmax_labels(&combine(&zero, &pair, 1.0).unwrap()), argmax_labels(&pair));

    let u = ChannelVolume::new(Dims::cube(1), 2, vec![2.0, 0.0]).unwrap();
    let p = ChannelVolume::new(Dims::cube(1), 2, vec![0.25, 0.75]).unwrap();
    let s = combine(&u, &p, 4.0).unwrap();
    assert_eq!(s.data(), &[3.0, 3.0]);
    assert_eq!(argmax_labels(&s).labels(), &[0]);

    assert!(combine(&u, &pair, 1.0).is_err());
}

#[test]
fn fast_output_independent_of_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inst = Instance::random(Dims::new(12, 11, 10), 4, 3, &mut rng);
    let sim = random_mlp(4, &mut rng);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fuse_fast(&inst.inputs(), &FusionConfig::default(), &sim).unwrap())
    };
    assert_eq!(run(1).data(), run(3).data());
}

/// Tape inputs for a batched gradient comparison: target and atlas features,
/// labels, and MLP parameters, all as trainable leaves.
struct TapeCase {
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl TapeCase {
    fn new(batch: usize, dims: Dims, f: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let shape = |k: usize| vec![batch, dims.d, dims.h, dims.w, k];
        let n = batch * dims.len();
        let ft = Tensor::new(shape(f), (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fx = Tensor::new(shape(f), (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        // soft labels so their gradient is checked away from a vertex
        let lab = Tensor::new(shape(c), (0..n * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let params = random_mlp_params(f, 5, 4, rng);
        let mut tensors = vec![ft, fx, lab];
        let mut names = vec!["ft".to_string(), "fx".to_string(), "lab".to_string()];
        for (name, t) in params.iter() {
            names.push(name.to_string());
            tensors.push(t.clone());
        }
        Self { tensors, names }
    }

    fn nodes(&self, ids: &[NodeId]) -> MlpNodes {
        let find = |n: &str| ids[self.names.iter().position(|x| x == n).unwrap()];
        MlpNodes {
            w1: find("sim.mlp.l1.w"),
            b1: find("sim.mlp.l1.b"),
            w2: find("sim.mlp.l2.w"),
            b2: find("sim.mlp.l2.b"),
            w3: find("sim.mlp.l3.w"),
            b3: find("sim.mlp.l3.b"),
        }
    }
}

fn weighted_loss(tape: &mut Tape, out: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.reduce_sum(prod))
}

fn gradients(case: &TapeCase, loss_w: &Tensor, cfg: &FusionConfig, fast: bool) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = case.tensors.iter().map(|t| tape.param(t.clone())).collect();
    let nodes = case.nodes(&ids);
    let out = if fast {
        fuse_fast_tape(&mut tape, ids[0], ids[1], ids[2], &TapeSimilarity::Mlp(nodes), cfg).unwrap()
    } else {
        pairwise_potential_tape(&mut tape, ids[0], ids[1], ids[2], &nodes, cfg).unwrap()
    };
    let loss = weighted_loss(&mut tape, out, loss_w).unwrap();
    tape.backward(loss).unwrap();
    ids.iter().map(|&id| tape.grad(id)).collect()
}

#[test]
fn fast_gradients_match_naive_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // the last case spans several pair chunks per offset
    for (batch, dims, radius) in
        [(1, Dims::new(4, 3, 5), 3), (2, Dims::new(3, 4, 3), 3), (1, Dims::cube(3), 5), (2, Dims::new(2, 3, 2), 1), (2, Dims::new(6, 7, 8), 3)]
    {
        let case = TapeCase::new(batch, dims, 3, 3, &mut rng);
        let n = batch * dims.len() * 3;
        let loss_w = Tensor::new(vec![batch, dims.d, dims.h, dims.w, 3], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cfg = FusionConfig::new(radius).unwrap();
        let fast = gradients(&case, &loss_w, &cfg, true);
        let naive = gradients(&case, &loss_w, &cfg, false);
        for (i, (a, b)) in fast.iter().zip(&naive).enumerate() {
            let scale = b.iter().map(|v| v.abs()).fold(1.0, f64::max);
            let err = max_abs_diff(a, b) / scale;
            assert!(err < 1e-8, "{} (batch {batch}, r {radius}): {err:e}", case.names[i]);
        }
    }
}

#[test]
fn fast_values_match_naive_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let case = TapeCase::new(2, Dims::new(3, 4, 2), 2, 3, &mut rng);
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = case.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let nodes = case.nodes(&ids);
    let cfg = FusionConfig::new(3).unwrap();
    let a = fuse_fast_tape(&mut tape, ids[0], ids[1], ids[2], &TapeSimilarity::Mlp(nodes), &cfg).unwrap();
    let b = pairwise_potential_tape(&mut tape, ids[0], ids[1], ids[2], &nodes, &cfg).unwrap();
    assert_eq!(tape.shape(a), tape.shape(b));
    assert!(max_abs_diff(tape.value(a).data(), tape.value(b).data()) < 1e-12);
}

#[test]
fn fast_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dims = Dims::new(3, 2, 3);
    let case = TapeCase::new(2, dims, 2, 3, &mut rng);
    let loss_w = Tensor::new(vec![2, 3, 2, 3, 3], (0..108).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let cfg = FusionConfig::new(3).unwrap();
    let report = grad_check(
        |tape, ids| {
            let out = fuse_fast_tape(tape, ids[0], ids[1], ids[2], &TapeSimilarity::Mlp(case.nodes(ids)), &cfg)?;
            weighted_loss(tape, out, &loss_w)
        },
        &case.tensors,
        // central-difference roundoff is ~1e-10 here; tiny gradients are compared absolutely
        &GradCheckOptions { floor: 1e-4, ..GradCheckOptions::default() },
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn gaussian_fast_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let case = TapeCase::new(1, Dims::new(3, 3, 2), 2, 2, &mut rng);
    let loss_w = Tensor::new(vec![1, 3, 3, 2, 2], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let cfg = FusionConfig::new(3).unwrap();
    let sim = TapeSimilarity::Gaussian(GaussianSimilarity::new(0.9).unwrap());
    let report = grad_check(
        |tape, ids| {
            let out = fuse_fast_tape(tape, ids[0], ids[1], ids[2], &sim, &cfg)?;
            weighted_loss(tape, out, &loss_w)
        },
        &case.tensors[..3],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

fn relabel(lab: &ChannelVolume, perm: &[usize]) -> ChannelVolume {
    let c = lab.channels();
    let mut data = vec![0.0; lab.data().len()];
    for (dst, src) in data.chunks_exact_mut(c).zip(lab.data().chunks_exact(c)) {
        for k in 0..c {
            dst[perm[k]] = src[k];
        }
    }
    ChannelVolume::new(lab.dims(), c, data).unwrap()
}

proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

    #[test]
    fn permutation_equivariance(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::random(Dims::new(4, 3, 5), 2, 3, &mut rng);
        let sim = random_mlp(2, &mut rng);
        let perm = [[1, 2, 0], [2, 0, 1], [0, 2, 1]][(seed % 3) as usize];
        let cfg = FusionConfig::new(3).unwrap();
        let out = fuse_fast(&inst.inputs(), &cfg, &sim).unwrap();
        let permuted = Instance { lab: relabel(&inst.lab, &perm), ..inst };
        let out2 = fuse_fast(&permuted.inputs(), &cfg, &sim).unwrap();
        prop_assert!(max_abs_diff(relabel(&out, &perm).data(), out2.data()) < 1e-14);
    }

    #[test]
    fn locality_of_label_changes(seed in 0u64..10_000, radius_idx in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = Dims::new(7, 6, 8);
        let inst = Instance::random(dims, 2, 3, &mut rng);
        let sim = random_mlp(2, &mut rng);
        let cfg = FusionConfig::new([1, 3, 5][radius_idx]).unwrap();
        let before = fuse_fast(&inst.inputs(), &cfg, &sim).unwrap();
        let at = rng.random_range(0..dims.len());
        let mut lab = inst.lab.clone();
        let v = lab.voxel_mut(at);
        let old = v.iter().position(|&x| x == 1.0).unwrap();
        v.iter_mut().for_each(|x| *x = 0.0);
        v[(old + 1) % 3] = 1.0;
        let changed = Instance { lab, ..inst };
        let after = fuse_fast(&changed.inputs(), &cfg, &sim).unwrap();
        let (az, ay, ax) = dims.coords(at);
        let h = cfg.half() as usize;
        for p in 0..dims.len() {
            let (z, y, x) = dims.coords(p);
            let cheb = z.abs_diff(az).max(y.abs_diff(ay)).max(x.abs_diff(ax));
            let differs = before.voxel(p) != after.voxel(p);
            if cheb > h {
                prop_assert!(!differs);
            }
            if cheb == 0 {
                prop_assert!(differs);
            }
        }
    }

    #[test]
    fn per_voxel_weight_scaling_is_invisible(seed in 0u64..10_000) {
        // an extra target-only feature multiplies all of a voxel's Gaussian
        // weights by exp(-t^2 / sigma^2)
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = Dims::new(5, 4, 4);
        let inst = Instance::random(dims, 2, 3, &mut rng);
        let sim = Similarity::Gaussian(GaussianSimilarity::new(1.3).unwrap());
        let cfg = FusionConfig::new(3).unwrap();
        let base = fuse_fast(&inst.inputs(), &cfg, &sim).unwrap();
        let extra = ChannelVolume::new(dims, 1, (0..dims.len()).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let ft = inst.ft.concat(&extra).unwrap();
        let fx = inst.fx.concat(&ChannelVolume::zeros(dims, 1)).unwrap();
        let scaled = FusionInputs { target_features: &ft, atlas_features: &fx, atlas_labels: &inst.lab };
        let out = fuse_fast(&scaled, &cfg, &sim).unwrap();
        prop_assert!(max_abs_diff(base.data(), out.data()) < 1e-12);
    }

    #[test]
    fn probability_map_for_any_mlp(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::random(Dims::new(3, 5, 4), 3, 4, &mut rng);
        let sim = random_mlp(3, &mut rng);
        let out = fuse_fast(&inst.inputs(), &FusionConfig::new(3).unwrap(), &sim).unwrap();
        prop_assert!(out.is_probability_map(1e-9));
    }
}
