//! Finite-difference suite covering every registered tape operator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{grad_check, GradCheckOptions, NodeId, Tape, Tensor};
use crate::error::Result;

/// Per-op tolerance on max relative error.
pub const OP_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub seeds: usize,
    pub tol: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Builder = fn(&mut Tape, &[NodeId], &[Tensor]) -> Result<NodeId>;

struct Case {
    name: &'static str,
    tol: f64,
    /// Parameter tensors, then constant tensors.
    make: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Tensor>),
    build: Builder,
}

pub(crate) fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinks stay outside the difference stencil.
fn rand_nonzero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap()
}

/// `sum(y * r)` for a random constant `r`, so every output element matters differently.
fn weighted(tape: &mut Tape, y: NodeId, r: &Tensor) -> Result<NodeId> {
    let r = tape.constant(r.clone());
    let m = tape.mul(y, r)?;
    Ok(tape.reduce_sum(m))
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![3, 4]), rand_tensor(r, vec![3, 4])], vec![rand_tensor(r, vec![3, 4])]),
            build: |t, p, c| {
                let y = t.add(p[0], p[1])?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "add_bias_broadcast",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![2, 3, 4]), rand_tensor(r, vec![4])], vec![rand_tensor(r, vec![2, 3, 4])]),
            build: |t, p, c| {
                let y = t.add(p[0], p[1])?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "sub",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![5, 2]), rand_tensor(r, vec![5, 1])], vec![rand_tensor(r, vec![5, 2])]),
            build: |t, p, c| {
                let y = t.sub(p[0], p[1])?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "mul",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![3, 3]), rand_tensor(r, vec![3, 3])], vec![rand_tensor(r, vec![3, 3])]),
            build: |t, p, c| {
                let y = t.mul(p[0], p[1])?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "scalar_mul",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![2, 2, 3]), rand_tensor(r, vec![])], vec![rand_tensor(r, vec![2, 2, 3])]),
            build: |t, p, c| {
                let y = t.scalar_mul(p[0], p[1])?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "div",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![4, 3]), positive(r, vec![4, 1])], vec![rand_tensor(r, vec![4, 3])]),
            build: |t, p, c| {
                let y = t.div(p[0], p[1])?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "scale",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![6])], vec![rand_tensor(r, vec![6])]),
            build: |t, p, c| {
                let y = t.scale(p[0], -2.5);
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "relu",
            tol: OP_TOL,
            make: |r| (vec![rand_nonzero(r, vec![4, 5])], vec![rand_tensor(r, vec![4, 5])]),
            build: |t, p, c| {
                let y = t.relu(p[0]);
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "softplus",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![4, 5])], vec![rand_tensor(r, vec![4, 5])]),
            build: |t, p, c| {
                let y = t.softplus(p[0]);
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "linear",
            tol: OP_TOL,
            make: |r| {
                (
                    vec![rand_tensor(r, vec![5, 3]), rand_tensor(r, vec![3, 4]), rand_tensor(r, vec![4])],
                    vec![rand_tensor(r, vec![5, 4])],
                )
            },
            build: |t, p, c| {
                let y = t.linear(p[0], p[1], Some(p[2]))?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "conv3d_same",
            tol: OP_TOL,
            make: |r| {
                (
                    vec![rand_tensor(r, vec![2, 3, 4, 3, 2]), rand_tensor(r, vec![3, 3, 3, 2, 3]), rand_tensor(r, vec![3])],
                    vec![rand_tensor(r, vec![2, 3, 4, 3, 3])],
                )
            },
            build: |t, p, c| {
                let y = t.conv3d(p[0], p[1], Some(p[2]), 1, 1)?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "conv3d_stride2",
            tol: OP_TOL,
            make: |r| {
                (
                    vec![rand_tensor(r, vec![1, 4, 4, 4, 2]), rand_tensor(r, vec![3, 3, 3, 2, 2]), rand_tensor(r, vec![2])],
                    vec![rand_tensor(r, vec![1, 2, 2, 2, 2])],
                )
            },
            build: |t, p, c| {
                let y = t.conv3d(p[0], p[1], Some(p[2]), 2, 1)?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "conv3d_pointwise",
            tol: OP_TOL,
            make: |r| {
                (
                    vec![rand_tensor(r, vec![1, 2, 3, 2, 3]), rand_tensor(r, vec![1, 1, 1, 3, 4]), rand_tensor(r, vec![4])],
                    vec![rand_tensor(r, vec![1, 2, 3, 2, 4])],
                )
            },
            build: |t, p, c| {
                let y = t.conv3d(p[0], p[1], Some(p[2]), 1, 0)?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "deconv3d",
            tol: OP_TOL,
            make: |r| {
                (
                    vec![rand_tensor(r, vec![2, 2, 1, 2, 3]), rand_tensor(r, vec![2, 2, 2, 3, 2]), rand_tensor(r, vec![2])],
                    vec![rand_tensor(r, vec![2, 4, 2, 4, 2])],
                )
            },
            build: |t, p, c| {
                let y = t.deconv3d(p[0], p[1], Some(p[2]))?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "batchnorm3d_train",
            tol: OP_TOL,
            make: |r| {
                (
                    vec![rand_tensor(r, vec![2, 2, 2, 2, 3]), positive(r, vec![3]), rand_tensor(r, vec![3])],
                    vec![rand_tensor(r, vec![2, 2, 2, 2, 3])],
                )
            },
            build: |t, p, c| {
                let (y, _) = t.batchnorm3d_train(p[0], p[1], p[2])?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "batchnorm3d_eval",
            tol: OP_TOL,
            make: |r| {
                (
                    vec![rand_tensor(r, vec![1, 2, 2, 2, 3]), positive(r, vec![3]), rand_tensor(r, vec![3])],
                    vec![rand_tensor(r, vec![1, 2, 2, 2, 3]), rand_tensor(r, vec![3]), positive(r, vec![3])],
                )
            },
            build: |t, p, c| {
                let y = t.batchnorm3d_eval(p[0], p[1], p[2], c[1].data(), c[2].data())?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "concat_channels",
            tol: OP_TOL,
            make: |r| {
                (
                    vec![rand_tensor(r, vec![1, 2, 2, 1, 2]), rand_tensor(r, vec![1, 2, 2, 1, 3])],
                    vec![rand_tensor(r, vec![1, 2, 2, 1, 5])],
                )
            },
            build: |t, p, c| {
                let y = t.concat_channels(p[0], p[1])?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "channel_softmax",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![3, 4])], vec![rand_tensor(r, vec![3, 4])]),
            build: |t, p, c| {
                let y = t.channel_softmax(p[0]);
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "reduce_sum",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![2, 3])], vec![]),
            build: |t, p, _| {
                let sq = t.mul(p[0], p[0])?;
                Ok(t.reduce_sum(sq))
            },
        },
        Case {
            name: "sum_rows",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![4, 3])], vec![rand_tensor(r, vec![1, 3])]),
            build: |t, p, c| {
                let y = t.sum_rows(p[0]);
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "gather_rows",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![4, 2])], vec![rand_tensor(r, vec![5, 2])]),
            build: |t, p, c| {
                let y = t.gather_rows(p[0], vec![3, 0, 3, 1, 3])?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "concat_rows",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![1, 3]), rand_tensor(r, vec![2, 3])], vec![rand_tensor(r, vec![4, 3])]),
            build: |t, p, c| {
                let y = t.concat_rows(&[p[1], p[0], p[0]])?;
                weighted(t, y, &c[0])
            },
        },
        Case {
            name: "reshape",
            tol: OP_TOL,
            make: |r| (vec![rand_tensor(r, vec![2, 6])], vec![rand_tensor(r, vec![3, 4])]),
            build: |t, p, c| {
                let y = t.reshape(p[0], vec![3, 4])?;
                weighted(t, y, &c[0])
            },
        },
    ]
}

pub fn op_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every operator case over `seeds` random draws.
pub fn op_suite(seeds: u64) -> Result<Vec<SuiteResult>> {
    let mut results = Vec::new();
    for case in cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9) ^ case.name.len() as u64);
            let (params, consts) = (case.make)(&mut rng);
            let build = case.build;
            let report = grad_check(|t, ids| build(t, ids, &consts), &params, &GradCheckOptions::default())?;
            worst = worst.max(report.max_rel_err);
        }
        results.push(SuiteResult {
            name: case.name.to_string(),
            seeds: seeds as usize,
            tol: case.tol,
            max_rel_err: worst,
            passed: worst <= case.tol,
        });
    }
    Ok(results)
}
