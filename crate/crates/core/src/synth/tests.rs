use super::*;
use proptest::{prop_assert, proptest};

#[test]
fn phantom_is_deterministic() {
    let spec = PhantomSpec::new(Dims::cube(24), 5, 11);
    let a = generate_phantom(&spec).unwrap();
    let b = generate_phantom(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate_phantom(&PhantomSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn two_class_noiseless_phantom_is_two_valued() {
    let spec = PhantomSpec { noise_sigma: 0.0, ..PhantomSpec::new(Dims::cube(20), 2, 3) };
    let (img, lab) = generate_phantom(&spec).unwrap();
    let means = spec.class_means();
    for (&v, &l) in img.data().iter().zip(lab.labels()) {
        assert_eq!(v, means[l as usize]);
    }
    let hist = lab.histogram();
    assert!(hist[0] > 0 && hist[1] > 0);
}

#[test]
fn default_phantoms_cover_every_class() {
    for seed in 0..20 {
        let spec = PhantomSpec::new(Dims::cube(48), 5, derive_seed(seed, stream::PHANTOM, 0));
        let (_, lab) = generate_phantom(&spec).unwrap();
        let n = lab.dims().len() as f64;
        for (c, &count) in lab.histogram().iter().enumerate() {
            assert!(count as f64 / n >= 0.01, "seed {seed}: class {c} covers {count} voxels");
        }
    }
}

fn centroid(lab: &LabelVolume, class: u16) -> [f64; 3] {
    let (mut sum, mut n) = ([0.0; 3], 0.0);
    for (i, &l) in lab.labels().iter().enumerate() {
        if l == class {
            let (z, y, x) = lab.dims().coords(i);
            for (s, c) in sum.iter_mut().zip([z, y, x]) {
                *s += c as f64;
            }
            n += 1.0;
        }
    }
    sum.map(|s| s / n)
}

#[test]
fn lateral_structures_shift_within_bound() {
    let mut largest: f64 = 0.0;
    for seed in 0..10 {
        let fixed = PhantomSpec { structure_shift: 0.0, noise_sigma: 0.0, ..PhantomSpec::new(Dims::cube(48), 5, seed) };
        let moved = PhantomSpec { structure_shift: 0.12, ..fixed.clone() };
        let (_, a) = generate_phantom(&fixed).unwrap();
        let (_, b) = generate_phantom(&moved).unwrap();
        for class in [3, 4] {
            let (ca, cb) = (centroid(&a, class), centroid(&b, class));
            for axis in 0..3 {
                let d = (cb[axis] - ca[axis]).abs();
                // bound is 0.12 of the half-side; overlap with the other structure blurs it slightly
                assert!(d <= 0.12 * 24.0 + 0.5, "seed {seed} class {class} axis {axis}: {d}");
                largest = largest.max(d);
            }
        }
    }
    assert!(largest > 1.0, "structures barely move: {largest}");
}

#[test]
fn noise_has_requested_spread() {
    let spec = PhantomSpec::new(Dims::cube(32), 2, 5);
    let (img, lab) = generate_phantom(&spec).unwrap();
    let means = spec.class_means();
    let resid: Vec<f64> = img.data().iter().zip(lab.labels()).map(|(v, &l)| v - means[l as usize]).collect();
    let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    assert!((sd - spec.noise_sigma).abs() < 0.1 * spec.noise_sigma, "sd {sd}");
}

#[test]
fn zero_deformation_is_identity() {
    let (img, lab) = generate_phantom(&PhantomSpec::new(Dims::cube(16), 4, 1)).unwrap();
    let spec = DeformationSpec::new(8.0, 0.0, 99);
    let (wi, wl) = apply_deformation(&img, &lab, &spec).unwrap();
    assert_eq!(wi, img);
    assert_eq!(wl, lab);
}

#[test]
fn integer_translation_shifts_interior() {
    let dims = Dims::new(10, 8, 6);
    let img = ScalarVolume::from_fn(dims, |z, y, x| (z * 100 + y * 10 + x) as f64);
    let lab = LabelVolume::new(dims, (0..dims.len()).map(|i| (i % 3) as u16).collect(), 3).unwrap();
    let spec = DeformationSpec { translation: [1.0, 0.0, 0.0], ..DeformationSpec::new(8.0, 0.0, 0) };
    let (wi, wl) = apply_deformation(&img, &lab, &spec).unwrap();
    for z in 0..dims.d - 1 {
        for y in 0..dims.h {
            for x in 0..dims.w {
                assert_eq!(wi.get(z, y, x), img.get(z + 1, y, x));
                assert_eq!(wl.get(z, y, x), lab.get(z + 1, y, x));
            }
        }
    }
}

#[test]
fn deformation_keeps_labels_valid() {
    let (img, lab) = generate_phantom(&PhantomSpec::new(Dims::cube(20), 5, 2)).unwrap();
    for seed in 0..20 {
        let spec = DeformationSpec::new(6.0 + seed as f64 % 5.0, 2.5, seed);
        let (wi, wl) = apply_deformation(&img, &lab, &spec).unwrap();
        assert!(wl.labels().iter().all(|&l| (l as usize) < 5));
        let (lo, hi) = img.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(wi.data().iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
        assert_ne!(wl, lab);
    }
}

#[test]
fn deformation_validation() {
    assert!(DeformationSpec::new(8.0, 4.0, 0).validate().is_err());
    assert!(DeformationSpec::new(8.0, 3.9, 0).validate().is_ok());
    assert!(DeformationSpec::new(0.0, 0.0, 0).validate().is_err());
    let (img, lab) = generate_phantom(&PhantomSpec::new(Dims::cube(8), 2, 0)).unwrap();
    let other = LabelVolume::filled(Dims::cube(4), 0, 2).unwrap();
    assert!(apply_deformation(&img, &other, &DeformationSpec::identity()).is_err());
    assert!(apply_deformation(&img, &lab, &DeformationSpec::identity()).is_ok());
}

#[test]
fn zero_count_pathology_leaves_image() {
    let (img, _) = generate_phantom(&PhantomSpec::new(Dims::cube(16), 3, 4)).unwrap();
    let (out, mask) = inject_pathology(&img, &PathologySpec::desk_scale(16, 0, 1)).unwrap();
    assert_eq!(out, img);
    assert!(mask.labels().iter().all(|&m| m == 0));
}

#[test]
fn pathology_scales() {
    let p = PathologySpec::paper_scale(3, 0);
    assert_eq!((p.radius, p.delta), ([10.0, 20.0], [15.0, 25.0]));
    let d = PathologySpec::desk_scale(64, 3, 0);
    assert_eq!((d.radius, d.delta), ([4.0, 8.0], [15.0, 25.0]));
    assert_eq!(PathologySpec::desk_scale(48, 3, 0).radius, [3.0, 6.0]);
    assert_eq!(PathologySpec::desk_scale(256, 3, 0).radius, [16.0, 32.0]);
}

#[test]
fn pathology_must_fit() {
    let img = ScalarVolume::zeros(Dims::cube(12));
    assert!(inject_pathology(&img, &PathologySpec::paper_scale(1, 0)).is_err());
    let bad = PathologySpec { radius: [3.0, 2.0], ..PathologySpec::desk_scale(64, 1, 0) };
    assert!(bad.validate(Dims::cube(64)).is_err());
}

#[test]
fn desk_pathology_voxel_audit() {
    let (img, _) = generate_phantom(&PhantomSpec::new(Dims::cube(64), 5, 8)).unwrap();
    for seed in 0..5 {
        let spec = PathologySpec::desk_scale(64, 3, seed);
        let (out, mask) = inject_pathology(&img, &spec).unwrap();
        let mut marked = 0;
        for ((&a, &b), &m) in img.data().iter().zip(out.data()).zip(mask.labels()) {
            if m == 1 {
                marked += 1;
                let d = b - a;
                assert!(d >= spec.delta[0] - 1e-9 && d <= spec.delta[1] + 1e-9, "delta {d}");
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // at least one sphere of the smallest radius
        assert!(marked as f64 >= 4.0 / 3.0 * std::f64::consts::PI * 3.0f64.powi(3));
    }
}

#[test]
fn corpus_roundtrip_and_determinism() {
    let spec = CorpusSpec { count: 4, train: 3, side: 16, ..CorpusSpec::standard(7) };
    let corpus = Corpus::generate(&spec).unwrap();
    assert_eq!(corpus.indices(Split::Train), vec![0, 1, 2]);
    assert_eq!(corpus.indices(Split::Test), vec![3]);
    assert_eq!(Corpus::generate(&spec).unwrap(), corpus);
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus.write(dir.path()).unwrap();
    assert_eq!(manifest.volumes.len(), 4);
    assert_eq!(manifest.volumes[3].split, Split::Test);
    assert_eq!(Corpus::load(dir.path()).unwrap(), corpus);
    assert_eq!(Corpus::load(dir.path().join(MANIFEST_NAME)).unwrap(), corpus);
}

#[test]
fn derived_seeds_differ() {
    let mut seen = std::collections::BTreeSet::new();
    for s in 0..4 {
        for st in 0..4 {
            for i in 0..16 {
                assert!(seen.insert(derive_seed(s, st, i)));
            }
        }
    }
}

proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

    #[test]
    fn pathology_changes_only_masked_voxels(seed in 0u64..10_000, count in 0usize..5) {
        let dims = Dims::cube(20);
        let img = ScalarVolume::from_fn(dims, |z, y, x| (z + 2 * y + 3 * x) as f64);
        let spec = PathologySpec { radius: [1.5, 4.0], delta: [15.0, 25.0], count, seed };
        let (out, mask) = inject_pathology(&img, &spec).unwrap();
        for ((&a, &b), &m) in img.data().iter().zip(out.data()).zip(mask.labels()) {
            if m == 1 {
                prop_assert!((15.0 - 1e-9..=25.0 + 1e-9).contains(&(b - a)));
            } else {
                prop_assert!(a == b);
            }
        }
    }
}
