use super::suite::{op_suite, rand_tensor};
use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vol(shape: [usize; 5], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn pointwise_identity_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, vec![1, 3, 2, 4, 1]);
    let mut t = Tape::new();
    let xi = t.constant(x.clone());
    let w = t.param(vol([1, 1, 1, 1, 1], vec![1.0]));
    let b = t.param(Tensor::vector(vec![0.0]));
    let y = t.conv3d(xi, w, Some(b), 1, 0).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn unpadded_conv_of_ones_is_27() {
    let mut t = Tape::new();
    let x = t.constant(vol([1, 3, 3, 3, 1], vec![1.0; 27]));
    let w = t.param(vol([3, 3, 3, 1, 1], vec![1.0; 27]));
    let y = t.conv3d(x, w, None, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 1, 1, 1]);
    assert_eq!(t.value(y).item(), 27.0);
}

#[test]
fn deconv_doubles_extent() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::filled(vec![1, 2, 2, 2, 3], 1.0));
    let w = t.param(Tensor::filled(vec![2, 2, 2, 3, 4], 0.5));
    let y = t.deconv3d(x, w, None).unwrap();
    assert_eq!(t.shape(y), &[1, 4, 4, 4, 4]);
    assert!(t.value(y).data().iter().all(|&v| v == 1.5));
}

#[test]
fn sum_gradient_is_ones() {
    let mut t = Tape::new();
    let x = t.param(Tensor::filled(vec![2, 3, 4], 0.3));
    let s = t.reduce_sum(x);
    t.backward(s).unwrap();
    assert!(t.grad(x).iter().all(|&g| g == 1.0));
}

#[test]
fn relu_subgradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![-1.0, 2.0, 0.0]));
    let r = t.relu(x);
    let s = t.reduce_sum(r);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x), vec![0.0, 1.0, 0.0]);
}

#[test]
fn stability_screen_skips_points_next_to_a_kink() {
    let relu_sum = |t: &mut Tape, ids: &[NodeId]| {
        let r = t.relu(ids[0]);
        Ok(t.reduce_sum(r))
    };
    let x = Tensor::vector(vec![1e-7, 0.5, -0.5]);
    let plain = GradCheckOptions { step: 1e-6, ..GradCheckOptions::default() };
    let loose = grad_check(relu_sum, std::slice::from_ref(&x), &plain).unwrap();
    assert!(!loose.passes(1e-4));
    assert_eq!(loose.unresolved, 0);
    let screened = GradCheckOptions { stability: Some(1e-5), ..plain };
    let report = grad_check(relu_sum, &[x], &screened).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    assert_eq!((report.checked, report.unresolved), (2, 1));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn unreachable_leaves_keep_zero_grad() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = t.param(Tensor::vector(vec![5.0]));
    let y = t.relu(unused);
    let s = t.reduce_sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(unused), vec![0.0]);
    assert_eq!(t.grad(y), vec![0.0]);
}

#[test]
fn shape_mismatch_reports_shapes() {
    let mut t = Tape::new();
    let a = t.param(Tensor::zeros(vec![2, 3]));
    let b = t.param(Tensor::zeros(vec![3, 2]));
    match t.add(a, b) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    let w = t.param(Tensor::zeros(vec![4, 2]));
    assert!(t.linear(a, w, None).is_err());
}

#[test]
fn batchnorm_needs_two_elements() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(vec![1, 1, 1, 1, 2]));
    let g = t.param(Tensor::filled(vec![2], 1.0));
    let b = t.param(Tensor::zeros(vec![2]));
    assert!(t.batchnorm3d_train(x, g, b).is_err());
}

#[test]
fn batchnorm_stats_are_per_channel() {
    let mut t = Tape::new();
    // channel 0: 1, 3; channel 1: 10, 10
    let x = t.constant(Tensor::new(vec![2, 1, 1, 1, 2], vec![1.0, 10.0, 3.0, 10.0]).unwrap());
    let g = t.param(Tensor::filled(vec![2], 1.0));
    let b = t.param(Tensor::zeros(vec![2]));
    let (y, stats) = t.batchnorm3d_train(x, g, b).unwrap();
    assert_eq!(stats.mean, vec![2.0, 10.0]);
    assert_eq!(stats.var, vec![2.0, 0.0]);
    let v = t.value(y).data();
    assert!((v[0] + v[2]).abs() < 1e-12 && (v[2] - 1.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
    assert_eq!(v[1], 0.0);
}

#[test]
fn every_op_passes_finite_differences() {
    let results = op_suite(20).unwrap();
    for r in &results {
        assert!(r.passed, "{} max rel err {:e} > {:e}", r.name, r.max_rel_err, r.tol);
    }
    assert!(results.len() >= 20);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let x = t.param(rand_tensor(&mut rng, vec![1, 4, 4, 4, 2]));
        let w = t.param(rand_tensor(&mut rng, vec![3, 3, 3, 2, 3]));
        let y = t.conv3d(x, w, None, 1, 1).unwrap();
        let y = t.softplus(y);
        let s = t.reduce_sum(y);
        t.backward(s).unwrap();
        (t.grad(x), t.grad(w))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
