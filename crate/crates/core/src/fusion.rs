//! Non-local label fusion.
//!
//! For every target voxel `p`, each atlas voxel `q` in the `r x r x r` search
//! cube centred on `p` votes for its label with weight `w_pq`, and the votes
//! are normalized:
//!
//! ```text
//! pairwise_p = sum_q w_pq * l_q / sum_q w_pq
//! ```
//!
//! The cube is clipped at the volume border, so border voxels have fewer
//! neighbours. Two implementations exist. The naive one loops over voxels
//! and neighbours (and, on the tape, is built from generic operators); it
//! serves as the reference. The fast one runs one whole-volume pass per
//! search offset, decomposes the first MLP layer as `W1 fp - W1 fq` so it is
//! applied once per voxel instead of once per pair, and pushes the remaining
//! layers through matrix products. Its backward pass is hand-written and
//! recomputes activations offset by offset instead of storing them.

pub mod bench;

use rayon::prelude::*;

use crate::autodiff::gemm::{gemm, Mat};
use crate::autodiff::{column_sums, sigmoid, softplus, CustomOp, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::simnet::{mlp_similarity, GaussianSimilarity, MlpNodes, MlpShape, MlpWeights, Similarity};
use crate::volgrid::{ChannelVolume, Dims};

pub const DEFAULT_RADIUS: usize = 5;
/// Pairs per work item in the fast pass.
const CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    /// Side length of the search cube; odd.
    pub radius: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { radius: DEFAULT_RADIUS }
    }
}

impl FusionConfig {
    pub fn new(radius: usize) -> Result<Self> {
        if radius == 0 || radius % 2 == 0 {
            return Err(Error::Config(format!("search cube side must be odd and positive, got {radius}")));
        }
        Ok(Self { radius })
    }

    pub fn half(&self) -> isize {
        (self.radius / 2) as isize
    }

    /// Search offsets `(dz, dy, dx)` in lexicographic order.
    pub fn offsets(&self) -> Vec<[isize; 3]> {
        let h = self.half();
        let mut v = Vec::with_capacity(self.radius.pow(3));
        for dz in -h..=h {
            for dy in -h..=h {
                for dx in -h..=h {
                    v.push([dz, dy, dx]);
                }
            }
        }
        v
    }
}

/// Volumes entering the pairwise term. Atlas labels are one-hot (or
/// probabilistic) maps with one channel per class.
#[derive(Clone, Copy, Debug)]
pub struct FusionInputs<'a> {
    pub target_features: &'a ChannelVolume,
    pub atlas_features: &'a ChannelVolume,
    pub atlas_labels: &'a ChannelVolume,
}

impl FusionInputs<'_> {
    fn validate(&self, sim: &Similarity) -> Result<()> {
        let (t, a, l) = (self.target_features, self.atlas_features, self.atlas_labels);
        if t.dims() != a.dims() || t.dims() != l.dims() {
            return Err(Error::ShapeMismatch {
                op: "fusion",
                lhs: t.dims().as_array().to_vec(),
                rhs: [a.dims().as_array(), l.dims().as_array()].concat(),
            });
        }
        if t.channels() != a.channels() {
            return Err(Error::ShapeMismatch { op: "fusion", lhs: vec![t.channels()], rhs: vec![a.channels()] });
        }
        if let Similarity::Mlp(m) = sim {
            if m.shape.features != t.channels() {
                return Err(Error::ShapeMismatch { op: "fusion", lhs: vec![t.channels()], rhs: vec![m.shape.features] });
            }
        }
        Ok(())
    }
}

fn clipped_range(c: usize, half: isize, extent: usize) -> std::ops::Range<usize> {
    let lo = (c as isize - half).max(0) as usize;
    let hi = ((c as isize + half + 1) as usize).min(extent);
    lo..hi
}

/// Reference implementation: a direct loop over voxels and their clipped
/// search cubes.
pub fn pairwise_potential(inputs: &FusionInputs<'_>, config: &FusionConfig, sim: &Similarity) -> Result<ChannelVolume> {
    inputs.validate(sim)?;
    let dims = inputs.target_features.dims();
    let c = inputs.atlas_labels.channels();
    let half = config.half();
    let mut out = vec![0.0; dims.len() * c];
    let mut num = vec![0.0; c];
    for p in 0..dims.len() {
        let (z, y, x) = dims.coords(p);
        let fp = inputs.target_features.voxel(p);
        num.iter_mut().for_each(|v| *v = 0.0);
        let mut den = 0.0;
        for qz in clipped_range(z, half, dims.d) {
            for qy in clipped_range(y, half, dims.h) {
                for qx in clipped_range(x, half, dims.w) {
                    let q = dims.index(qz, qy, qx);
                    let w = sim.weight(fp, inputs.atlas_features.voxel(q))?;
                    for (n, l) in num.iter_mut().zip(inputs.atlas_labels.voxel(q)) {
                        *n += w * l;
                    }
                    den += w;
                }
            }
        }
        for (o, n) in out[p * c..(p + 1) * c].iter_mut().zip(&num) {
            *o = n / den;
        }
    }
    ChannelVolume::new(dims, c, out)
}

/// Shapes shared by the fast forward and backward passes.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    dims: Dims,
    features: usize,
    classes: usize,
    search: FusionConfig,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.batch * self.dims.len()
    }

    /// `(p, q)` row pairs for one offset, with `q = p + offset` inside the volume.
    fn pairs(&self, o: [isize; 3]) -> Vec<(usize, usize)> {
        let d = self.dims;
        let range = |delta: isize, extent: usize| {
            let lo = (-delta).max(0) as usize;
            let hi = (extent as isize - delta.max(0)).max(lo as isize) as usize;
            lo..hi
        };
        let (rz, ry, rx) = (range(o[0], d.d), range(o[1], d.h), range(o[2], d.w));
        let shift = o[0] * (d.h * d.w) as isize + o[1] * d.w as isize + o[2];
        let mut v = Vec::with_capacity(self.batch * rz.len() * ry.len() * rx.len());
        for b in 0..self.batch {
            let base = b * d.len();
            for z in rz.clone() {
                for y in ry.clone() {
                    let row = base + d.index(z, y, 0);
                    for x in rx.clone() {
                        let p = row + x;
                        v.push((p, (p as isize + shift) as usize));
                    }
                }
            }
        }
        v
    }
}

/// Per-pair post-ReLU activations of the similarity MLP and its logits.
struct MlpActs {
    h1: Vec<f64>,
    h2: Vec<f64>,
    z: Vec<f64>,
}

/// Weight evaluation for the fast pass. The MLP variant holds the first-layer
/// projections of every target and atlas row.
enum Kernel<'a> {
    Mlp { m: MlpWeights, a: Vec<f64>, b: Vec<f64> },
    Gaussian { g: GaussianSimilarity, ft: &'a [f64], fx: &'a [f64], f: usize },
}

fn project(features: &[f64], rows: usize, m: &MlpWeights) -> Vec<f64> {
    let s = m.shape;
    let mut out = vec![0.0; rows * s.hidden1];
    gemm(Mat::new(features, rows, s.features), Mat::new(&m.w1, s.features, s.hidden1), &mut out, 0.0);
    out
}

impl<'a> Kernel<'a> {
    fn mlp(m: MlpWeights, ft: &[f64], fx: &[f64], rows: usize) -> Self {
        let a = project(ft, rows, &m);
        let b = project(fx, rows, &m);
        Kernel::Mlp { m, a, b }
    }

    fn mlp_acts(m: &MlpWeights, a: &[f64], b: &[f64], pairs: &[(usize, usize)]) -> MlpActs {
        let MlpShape { hidden1: h1n, hidden2: h2n, .. } = m.shape;
        let n = pairs.len();
        let mut h1 = vec![0.0; n * h1n];
        for (row, &(p, q)) in h1.chunks_exact_mut(h1n).zip(pairs) {
            let (ap, bq) = (&a[p * h1n..(p + 1) * h1n], &b[q * h1n..(q + 1) * h1n]);
            for (((o, x), y), c) in row.iter_mut().zip(ap).zip(bq).zip(&m.b1) {
                *o = (x - y + c).max(0.0);
            }
        }
        let mut h2 = vec![0.0; n * h2n];
        for row in h2.chunks_exact_mut(h2n) {
            row.copy_from_slice(&m.b2);
        }
        gemm(Mat::new(&h1, n, h1n), Mat::new(&m.w2, h1n, h2n), &mut h2, 1.0);
        h2.iter_mut().for_each(|v| *v = v.max(0.0));
        let z = h2.chunks_exact(h2n).map(|row| m.b3 + row.iter().zip(&m.w3).map(|(h, w)| h * w).sum::<f64>()).collect();
        MlpActs { h1, h2, z }
    }

    fn weights(&self, pairs: &[(usize, usize)]) -> Vec<f64> {
        match self {
            Kernel::Mlp { m, a, b } => Self::mlp_acts(m, a, b, pairs).z.into_iter().map(softplus).collect(),
            Kernel::Gaussian { g, ft, fx, f } => pairs
                .iter()
                .map(|&(p, q)| g.weight_unchecked(&ft[p * f..(p + 1) * f], &fx[q * f..(q + 1) * f]))
                .collect(),
        }
    }
}

/// Fast forward pass. Returns the normalized votes and the per-row weight sums.
fn fast_forward(geom: &Geometry, kernel: &Kernel<'_>, labels: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c = geom.classes;
    let mut num = vec![0.0; geom.rows() * c];
    let mut den = vec![0.0; geom.rows()];
    for o in geom.search.offsets() {
        let pairs = geom.pairs(o);
        let weights: Vec<Vec<f64>> = pairs.par_chunks(CHUNK).map(|ch| kernel.weights(ch)).collect();
        for (&(p, q), w) in pairs.iter().zip(weights.iter().flatten()) {
            den[p] += w;
            for (n, l) in num[p * c..(p + 1) * c].iter_mut().zip(&labels[q * c..(q + 1) * c]) {
                *n += w * l;
            }
        }
    }
    for (row, d) in num.chunks_exact_mut(c).zip(&den) {
        row.iter_mut().for_each(|v| *v /= d);
    }
    (num, den)
}

/// Fast pairwise potential on plain volumes.
pub fn fuse_fast(inputs: &FusionInputs<'_>, config: &FusionConfig, sim: &Similarity) -> Result<ChannelVolume> {
    inputs.validate(sim)?;
    let dims = inputs.target_features.dims();
    let geom = Geometry {
        batch: 1,
        dims,
        features: inputs.target_features.channels(),
        classes: inputs.atlas_labels.channels(),
        search: *config,
    };
    let (ft, fx) = (inputs.target_features.data(), inputs.atlas_features.data());
    let kernel = match sim {
        Similarity::Mlp(m) => Kernel::mlp(m.clone(), ft, fx, geom.rows()),
        Similarity::Gaussian(g) => Kernel::Gaussian { g: *g, ft, fx, f: geom.features },
    };
    let (out, _) = fast_forward(&geom, &kernel, inputs.atlas_labels.data());
    ChannelVolume::new(dims, geom.classes, out)
}

/// Similarity used on the tape.
#[derive(Clone, Copy, Debug)]
pub enum TapeSimilarity {
    Mlp(MlpNodes),
    /// Fixed kernel; only the features receive gradients.
    Gaussian(GaussianSimilarity),
}

fn batch_geometry(tape: &Tape, target: NodeId, atlas: NodeId, labels: NodeId, config: &FusionConfig) -> Result<Geometry> {
    let (ts, as_, ls) = (tape.value(target), tape.value(atlas), tape.value(labels));
    let (batch, dims, features) = ts
        .volume_dims()
        .ok_or_else(|| Error::ShapeMismatch { op: "fusion", lhs: ts.shape().to_vec(), rhs: vec![] })?;
    let lv = ls.volume_dims();
    if as_.shape() != ts.shape() || lv.map(|(b, d, _)| (b, d)) != Some((batch, dims)) {
        return Err(Error::ShapeMismatch { op: "fusion", lhs: ts.shape().to_vec(), rhs: [as_.shape(), ls.shape()].concat() });
    }
    Ok(Geometry { batch, dims, features, classes: lv.unwrap().2, search: *config })
}

fn mlp_from_inputs(inputs: &[&Tensor]) -> MlpWeights {
    let (w1, w2) = (inputs[0], inputs[2]);
    MlpWeights {
        shape: MlpShape { features: w1.shape()[0], hidden1: w1.shape()[1], hidden2: w2.shape()[1] },
        w1: w1.data().to_vec(),
        b1: inputs[1].data().to_vec(),
        w2: w2.data().to_vec(),
        b2: inputs[3].data().to_vec(),
        w3: inputs[4].data().to_vec(),
        b3: inputs[5].item(),
    }
}

/// Fast pairwise potential recorded as one tape node.
///
/// `target` and `atlas` are `[B, D, H, W, F]` feature maps, `labels` is the
/// `[B, D, H, W, C]` atlas label map, and the result is `[B, D, H, W, C]`.
pub fn fuse_fast_tape(
    tape: &mut Tape,
    target: NodeId,
    atlas: NodeId,
    labels: NodeId,
    sim: &TapeSimilarity,
    config: &FusionConfig,
) -> Result<NodeId> {
    let geom = batch_geometry(tape, target, atlas, labels, config)?;
    let mut inputs = vec![target, atlas, labels];
    let ft = tape.value(target).data();
    let fx = tape.value(atlas).data();
    let (kernel, kind) = match sim {
        TapeSimilarity::Mlp(nodes) => {
            let ids = nodes.as_vec();
            let tensors: Vec<&Tensor> = ids.iter().map(|&id| tape.value(id)).collect();
            let m = mlp_from_inputs(&tensors);
            if m.shape.features != geom.features {
                return Err(Error::ShapeMismatch { op: "fusion", lhs: vec![geom.features], rhs: vec![m.shape.features] });
            }
            inputs.extend(ids);
            (Kernel::mlp(m, ft, fx, geom.rows()), OpKind::Mlp)
        }
        TapeSimilarity::Gaussian(g) => (Kernel::Gaussian { g: *g, ft, fx, f: geom.features }, OpKind::Gaussian(*g)),
    };
    let (out, den) = fast_forward(&geom, &kernel, tape.value(labels).data());
    let (a, b) = match kernel {
        Kernel::Mlp { a, b, .. } => (a, b),
        Kernel::Gaussian { .. } => (Vec::new(), Vec::new()),
    };
    let shape = tape.value(labels).shape().to_vec();
    let op = FastFusionOp { geom, den, a, b, kind };
    Ok(tape.custom(&inputs, Tensor::new(shape, out)?, Box::new(op)))
}

enum OpKind {
    Mlp,
    Gaussian(GaussianSimilarity),
}

struct FastFusionOp {
    geom: Geometry,
    den: Vec<f64>,
    /// First-layer projections saved by the forward pass (MLP only).
    a: Vec<f64>,
    b: Vec<f64>,
    kind: OpKind,
}

/// Gradients accumulated over one chunk of pairs.
struct ChunkGrads {
    /// Per-pair row gradient: `dh1` (MLP) or `d fp` (Gaussian).
    rows: Vec<f64>,
    /// Per-pair label gradient scale `w_pq / Z_p`.
    label_scale: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w3: Vec<f64>,
    b3: f64,
}

impl FastFusionOp {
    /// `dL/dw_pq = (g_p . l_q - g_p . out_p) / Z_p`.
    fn weight_grads(&self, pairs: &[(usize, usize)], g: &[f64], gdot_out: &[f64], labels: &[f64]) -> Vec<f64> {
        let c = self.geom.classes;
        pairs
            .iter()
            .map(|&(p, q)| {
                let gl: f64 = g[p * c..(p + 1) * c].iter().zip(&labels[q * c..(q + 1) * c]).map(|(a, b)| a * b).sum();
                (gl - gdot_out[p]) / self.den[p]
            })
            .collect()
    }

    fn mlp_chunk(&self, m: &MlpWeights, pairs: &[(usize, usize)], gw: Vec<f64>, want_labels: bool) -> ChunkGrads {
        let MlpShape { hidden1: h1n, hidden2: h2n, .. } = m.shape;
        let n = pairs.len();
        let acts = Kernel::mlp_acts(m, &self.a, &self.b, pairs);
        let gz: Vec<f64> = gw.iter().zip(&acts.z).map(|(g, z)| g * sigmoid(*z)).collect();
        let label_scale = if want_labels {
            pairs.iter().zip(&acts.z).map(|(&(p, _), z)| softplus(*z) / self.den[p]).collect()
        } else {
            Vec::new()
        };
        let mut gw3 = vec![0.0; h2n];
        let mut gh2 = acts.h2;
        for (row, g) in gh2.chunks_exact_mut(h2n).zip(&gz) {
            for (acc, h) in gw3.iter_mut().zip(row.iter()) {
                *acc += g * h;
            }
            for (o, w) in row.iter_mut().zip(&m.w3) {
                *o = g * w * f64::from(u8::from(*o > 0.0));
            }
        }
        let mut gw2 = vec![0.0; h1n * h2n];
        gemm(Mat::new(&acts.h1, n, h1n).t(), Mat::new(&gh2, n, h2n), &mut gw2, 0.0);
        let mut gh1 = vec![0.0; n * h1n];
        gemm(Mat::new(&gh2, n, h2n), Mat::new(&m.w2, h1n, h2n).t(), &mut gh1, 0.0);
        for (g, h) in gh1.iter_mut().zip(&acts.h1) {
            *g *= f64::from(u8::from(*h > 0.0));
        }
        ChunkGrads { rows: gh1, label_scale, w2: gw2, b2: column_sums(&gh2, h2n), w3: gw3, b3: gz.iter().sum() }
    }

    fn gaussian_chunk(
        &self,
        g: &GaussianSimilarity,
        ft: &[f64],
        fx: &[f64],
        pairs: &[(usize, usize)],
        gw: Vec<f64>,
        want_labels: bool,
    ) -> ChunkGrads {
        let f = self.geom.features;
        let k = -2.0 / (g.sigma * g.sigma);
        let mut rows = vec![0.0; pairs.len() * f];
        let mut label_scale = Vec::with_capacity(if want_labels { pairs.len() } else { 0 });
        for ((row, &(p, q)), gwi) in rows.chunks_exact_mut(f).zip(pairs).zip(&gw) {
            let (fp, fq) = (&ft[p * f..(p + 1) * f], &fx[q * f..(q + 1) * f]);
            let w = g.weight_unchecked(fp, fq);
            for ((r, a), b) in row.iter_mut().zip(fp).zip(fq) {
                *r = gwi * w * k * (a - b);
            }
            if want_labels {
                label_scale.push(w / self.den[p]);
            }
        }
        ChunkGrads { rows, label_scale, w2: Vec::new(), b2: Vec::new(), w3: Vec::new(), b3: 0.0 }
    }
}

impl CustomOp for FastFusionOp {
    fn name(&self) -> &'static str {
        "fusion_fast"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let geom = &self.geom;
        let (c, rows) = (geom.classes, geom.rows());
        let (ft, fx, labels) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let out = output.data();
        let gdot_out: Vec<f64> = grad_output
            .chunks_exact(c)
            .zip(out.chunks_exact(c))
            .map(|(g, o)| g.iter().zip(o).map(|(a, b)| a * b).sum())
            .collect();
        let want_labels = needs[2];
        let mlp = match self.kind {
            OpKind::Mlp => Some(mlp_from_inputs(&inputs[3..9])),
            OpKind::Gaussian(_) => None,
        };
        let width = mlp.as_ref().map_or(geom.features, |m| m.shape.hidden1);
        // per-row gradients w.r.t. target and atlas side: dA/dB (MLP) or dft/dfx
        let mut gp = vec![0.0; rows * width];
        let mut gq = vec![0.0; rows * width];
        let mut glab = if want_labels { vec![0.0; labels.len()] } else { Vec::new() };
        let (mut gw2, mut gb2, mut gw3, mut gb3) = match &mlp {
            Some(m) => (vec![0.0; m.w2.len()], vec![0.0; m.b2.len()], vec![0.0; m.w3.len()], 0.0),
            None => (Vec::new(), Vec::new(), Vec::new(), 0.0),
        };

        for o in geom.search.offsets() {
            let pairs = geom.pairs(o);
            let parts: Vec<ChunkGrads> = pairs
                .par_chunks(CHUNK)
                .map(|ch| {
                    let gw = self.weight_grads(ch, grad_output, &gdot_out, labels);
                    match (&self.kind, &mlp) {
                        (OpKind::Mlp, Some(m)) => self.mlp_chunk(m, ch, gw, want_labels),
                        (OpKind::Gaussian(g), _) => self.gaussian_chunk(g, ft, fx, ch, gw, want_labels),
                        _ => unreachable!(),
                    }
                })
                .collect();
            for (ch, part) in pairs.chunks(CHUNK).zip(&parts) {
                for (i, &(p, q)) in ch.iter().enumerate() {
                    let r = &part.rows[i * width..(i + 1) * width];
                    for ((a, b), v) in gp[p * width..(p + 1) * width].iter_mut().zip(&mut gq[q * width..(q + 1) * width]).zip(r) {
                        *a += v;
                        *b -= v;
                    }
                    if want_labels {
                        let s = part.label_scale[i];
                        for (gl, g) in glab[q * c..(q + 1) * c].iter_mut().zip(&grad_output[p * c..(p + 1) * c]) {
                            *gl += s * g;
                        }
                    }
                }
                if mlp.is_some() {
                    gw2.iter_mut().zip(&part.w2).for_each(|(a, b)| *a += b);
                    gb2.iter_mut().zip(&part.b2).for_each(|(a, b)| *a += b);
                    gw3.iter_mut().zip(&part.w3).for_each(|(a, b)| *a += b);
                    gb3 += part.b3;
                }
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(inputs.len());
        match &mlp {
            None => {
                grads.push(needs[0].then_some(gp));
                grads.push(needs[1].then_some(gq));
                grads.push(want_labels.then_some(glab));
            }
            Some(m) => {
                let (f, h1n) = (m.shape.features, m.shape.hidden1);
                let back = |g: &[f64]| {
                    let mut v = vec![0.0; rows * f];
                    gemm(Mat::new(g, rows, h1n), Mat::new(&m.w1, f, h1n).t(), &mut v, 0.0);
                    v
                };
                grads.push(needs[0].then(|| back(&gp)));
                grads.push(needs[1].then(|| back(&gq)));
                grads.push(want_labels.then_some(glab));
                let gw1 = needs[3].then(|| {
                    let mut v = vec![0.0; f * h1n];
                    gemm(Mat::new(ft, rows, f).t(), Mat::new(&gp, rows, h1n), &mut v, 0.0);
                    gemm(Mat::new(fx, rows, f).t(), Mat::new(&gq, rows, h1n), &mut v, 1.0);
                    v
                });
                grads.push(gw1);
                // b1 enters every pair once, as does dh1
                grads.push(needs[4].then(|| column_sums(&gp, h1n)));
                grads.push(Some(gw2));
                grads.push(Some(gb2));
                grads.push(Some(gw3));
                grads.push(Some(vec![gb3]));
            }
        }
        grads
    }
}

/// Naive pairwise potential built from generic tape operators, one voxel at a
/// time. Slow; used to check the fast path's gradients.
pub fn pairwise_potential_tape(
    tape: &mut Tape,
    target: NodeId,
    atlas: NodeId,
    labels: NodeId,
    mlp: &MlpNodes,
    config: &FusionConfig,
) -> Result<NodeId> {
    let geom = batch_geometry(tape, target, atlas, labels, config)?;
    let dims = geom.dims;
    let half = config.half();
    let mut rows = Vec::with_capacity(geom.rows());
    for b in 0..geom.batch {
        let base = b * dims.len();
        for p in 0..dims.len() {
            let (z, y, x) = dims.coords(p);
            let mut qs = Vec::new();
            for qz in clipped_range(z, half, dims.d) {
                for qy in clipped_range(y, half, dims.h) {
                    for qx in clipped_range(x, half, dims.w) {
                        qs.push(base + dims.index(qz, qy, qx));
                    }
                }
            }
            let fp = tape.gather_rows(target, vec![base + p; qs.len()])?;
            let fq = tape.gather_rows(atlas, qs.clone())?;
            let w = mlp_similarity(tape, fp, fq, mlp)?;
            let lq = tape.gather_rows(labels, qs)?;
            let votes = tape.mul(lq, w)?;
            let num = tape.sum_rows(votes);
            let den = tape.sum_rows(w);
            rows.push(tape.div(num, den)?);
        }
    }
    let stacked = tape.concat_rows(&rows)?;
    let shape = tape.value(labels).shape().to_vec();
    tape.reshape(stacked, shape)
}

/// `unary + alpha * pairwise`.
pub fn combine(unary: &ChannelVolume, pairwise: &ChannelVolume, alpha: f64) -> Result<ChannelVolume> {
    if unary.dims() != pairwise.dims() || unary.channels() != pairwise.channels() {
        return Err(Error::ShapeMismatch {
            op: "combine",
            lhs: [unary.dims().as_array().as_slice(), &[unary.channels()]].concat(),
            rhs: [pairwise.dims().as_array().as_slice(), &[pairwise.channels()]].concat(),
        });
    }
    let data = unary.data().iter().zip(pairwise.data()).map(|(u, p)| u + alpha * p).collect();
    ChannelVolume::new(unary.dims(), unary.channels(), data)
}

/// Tape form of [`combine`] with a learnable scalar `alpha`.
pub fn combine_tape(tape: &mut Tape, unary: NodeId, pairwise: NodeId, alpha: NodeId) -> Result<NodeId> {
    let scaled = tape.scalar_mul(pairwise, alpha)?;
    tape.add(unary, scaled)
}

#[cfg(test)]
mod tests;

