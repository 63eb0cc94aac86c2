//! Synthetic phantoms, smooth deformations, and pathology injection.
//!
//! A phantom is a head-like layout: background, an outer shell, an inner
//! core, and small lateral structures inside the core placed symmetrically
//! around the midline with similar intensities, so telling them apart needs
//! spatial context. Their positions vary between subjects by more than a
//! fusion search cube can absorb, the local variability that makes
//! non-local label propagation miss. Boundaries undulate with low-frequency random harmonics
//! whose strength varies per subject. Intensities are per-class means on a
//! [0, 255] scale plus Gaussian noise smoothed by a 3x3x3 box filter.
//!
//! All randomness comes from [`derive_seed`], which hashes a base seed with a
//! stream tag and an index (SplitMix64 finalizer), so each generated volume
//! owns an independent, reproducible stream.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{read_labels, read_scalar, write_volume, Dims, LabelVolume, ScalarVolume};

/// Stream tags for [`derive_seed`].
pub mod stream {
    pub const PHANTOM: u64 = 1;
    pub const DEFORMATION: u64 = 2;
    pub const PATHOLOGY: u64 = 3;
    pub const TRAINING: u64 = 4;
    pub const PATCHES: u64 = 5;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ index)
}

pub const INTENSITY_MAX: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub num_classes: usize,
    pub seed: u64,
    /// Standard deviation of the correlated intensity noise.
    pub noise_sigma: f64,
    /// Relative amplitude of boundary undulations.
    pub shape_jitter: f64,
    /// Spatial wavelength of boundary undulations, as a fraction of the volume side.
    pub smoothness: f64,
    /// Bound on the per-axis displacement of each lateral structure from its
    /// nominal centre, in units of the volume half-side.
    pub structure_shift: f64,
}

impl PhantomSpec {
    pub fn new(dims: Dims, num_classes: usize, seed: u64) -> Self {
        Self { dims, num_classes, seed, noise_sigma: 10.0, shape_jitter: 0.06, smoothness: 0.5, structure_shift: 0.12 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.num_classes) {
            return Err(Error::Config(format!("phantoms support 2..=16 classes, got {}", self.num_classes)));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() || !(0.0..0.5).contains(&self.shape_jitter)
            || self.smoothness <= 0.0
            || !(0.0..0.3).contains(&self.structure_shift)
        {
            return Err(Error::Config(format!("invalid phantom spec {self:?}")));
        }
        Ok(())
    }

    /// Mean intensity of each class.
    pub fn class_means(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| match c {
                0 => 10.0,
                1 if self.num_classes == 2 => 130.0,
                1 => 70.0,
                2 => 130.0,
                k => (190.0 + 10.0 * (k - 3) as f64).min(250.0),
            })
            .collect()
    }
}

/// Smooth random radial modulation `1 + jitter * h(direction)`.
struct Undulation {
    terms: Vec<([f64; 3], f64, f64, f64)>,
}

impl Undulation {
    fn new(rng: &mut ChaCha8Rng, amplitude: f64, wavelength: f64) -> Self {
        let terms = (0..4)
            .map(|_| {
                let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                let dir = [v[0] / n, v[1] / n, v[2] / n];
                let freq = std::f64::consts::TAU / wavelength * rng.random_range(0.5..1.5);
                (dir, freq, rng.random_range(0.0..std::f64::consts::TAU), amplitude * rng.random_range(0.5..1.0) / 2.0)
            })
            .collect();
        Self { terms }
    }

    /// Scale factor at a point given in units of the volume half-side.
    fn at(&self, p: [f64; 3]) -> f64 {
        1.0 + self
            .terms
            .iter()
            .map(|(d, f, phase, a)| a * (f * (d[0] * p[0] + d[1] * p[1] + d[2] * p[2]) + phase).cos())
            .sum::<f64>()
    }
}

/// Labels of the phantom anatomy.
fn phantom_labels(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> LabelVolume {
    let dims = spec.dims;
    let c = spec.num_classes;
    let lateral = c.saturating_sub(3);
    let wavelength = spec.smoothness * 2.0;
    let outer = Undulation::new(rng, spec.shape_jitter, wavelength);
    let inner = Undulation::new(rng, spec.shape_jitter, wavelength);
    let blobs: Vec<([f64; 3], Undulation)> = (0..lateral)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / lateral.max(2) as f64;
            let nominal = [0.0, 0.3 * angle.sin(), 0.3 * angle.cos()];
            let centre = nominal.map(|c| c + spec.structure_shift * rng.random_range(-1.0..=1.0));
            (centre, Undulation::new(rng, spec.shape_jitter, wavelength))
        })
        .collect();
    let blob_radii = [0.30, 0.40, 0.27];
    let half = [dims.d as f64 / 2.0, dims.h as f64 / 2.0, dims.w as f64 / 2.0];
    let mut labels = vec![0u16; dims.len()];
    for (i, l) in labels.iter_mut().enumerate() {
        let (z, y, x) = dims.coords(i);
        let p = [(z as f64 + 0.5 - half[0]) / half[0], (y as f64 + 0.5 - half[1]) / half[1], (x as f64 + 0.5 - half[2]) / half[2]];
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let mut label = 0;
        if r < 0.85 * outer.at(p) {
            label = 1;
            if c >= 3 && r < 0.62 * inner.at(p) {
                label = 2;
            }
        }
        for (k, (centre, und)) in blobs.iter().enumerate() {
            let q: f64 = (0..3).map(|a| ((p[a] - centre[a]) / blob_radii[a]).powi(2)).sum::<f64>().sqrt();
            if q < und.at(p) {
                label = 3 + k as u16;
            }
        }
        *l = label;
    }
    LabelVolume::new(dims, labels, c).expect("labels are below the class count")
}

/// Separable 3x3x3 box filter with edge clamping.
fn box_filter(dims: Dims, data: &[f64]) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [dims.h * dims.w, dims.w, 1];
    let extents = [dims.d, dims.h, dims.w];
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let c = [i / strides[0], (i / strides[1]) % dims.h, i % dims.w][axis];
            let lo = if c > 0 { i - strides[axis] } else { i };
            let hi = if c + 1 < extents[axis] { i + strides[axis] } else { i };
            *out = (cur[lo] + cur[i] + cur[hi]) / 3.0;
        }
        cur = next;
    }
    cur
}

/// Generates `(intensity, labels)` for a phantom spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(ScalarVolume, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = phantom_labels(spec, &mut rng);
    let means = spec.class_means();
    let mut data: Vec<f64> = labels.labels().iter().map(|&l| means[l as usize]).collect();
    if spec.noise_sigma > 0.0 {
        let white: Vec<f64> = (0..data.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        // a 27-voxel box mean shrinks the deviation by sqrt(27)
        let scale = spec.noise_sigma * 27f64.sqrt();
        for (v, n) in data.iter_mut().zip(box_filter(spec.dims, &white)) {
            *v += scale * n;
        }
    }
    Ok((ScalarVolume::new(spec.dims, data)?, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationSpec {
    /// Control-point spacing in voxels.
    pub spacing: f64,
    /// Bound on the displacement magnitude (voxels) of the smooth field.
    pub max_displacement: f64,
    /// Global translation `(dz, dy, dx)` added to the field.
    pub translation: [f64; 3],
    pub seed: u64,
}

impl DeformationSpec {
    pub fn new(spacing: f64, max_displacement: f64, seed: u64) -> Self {
        Self { spacing, max_displacement, translation: [0.0; 3], seed }
    }

    pub fn identity() -> Self {
        Self::new(8.0, 0.0, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0) || !(self.max_displacement >= 0.0) || self.max_displacement >= self.spacing / 2.0 {
            return Err(Error::Config(format!(
                "deformation needs 0 <= max displacement < spacing / 2, got {} and {}",
                self.max_displacement, self.spacing
            )));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("translation must be finite".into()));
        }
        Ok(())
    }
}

/// Displacement field sampled at every voxel: random control vectors of
/// norm at most `max_displacement`, trilinearly interpolated.
fn displacement_field(dims: Dims, spec: &DeformationSpec) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = |e: usize| (e as f64 / spec.spacing).ceil() as usize + 1;
    let g = [grid(dims.d), grid(dims.h), grid(dims.w)];
    let control: Vec<[f64; 3]> = (0..g[0] * g[1] * g[2])
        .map(|_| {
            if spec.max_displacement == 0.0 {
                return [0.0; 3];
            }
            let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
            let m = spec.max_displacement * rng.random_range(0.0..1.0);
            [v[0] / n * m, v[1] / n * m, v[2] / n * m]
        })
        .collect();
    let at = |i: usize, j: usize, k: usize| control[(i * g[1] + j) * g[2] + k];
    (0..dims.len())
        .map(|idx| {
            let (z, y, x) = dims.coords(idx);
            let c = [z as f64 / spec.spacing, y as f64 / spec.spacing, x as f64 / spec.spacing];
            let i0 = [c[0].floor() as usize, c[1].floor() as usize, c[2].floor() as usize];
            let f = [c[0] - i0[0] as f64, c[1] - i0[1] as f64, c[2] - i0[2] as f64];
            let mut d = spec.translation;
            for corner in 0..8 {
                let o = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
                let w: f64 = (0..3).map(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] }).product();
                if w == 0.0 {
                    continue;
                }
                let v = at(i0[0] + o[0], i0[1] + o[1], i0[2] + o[2]);
                for a in 0..3 {
                    d[a] += w * v[a];
                }
            }
            d
        })
        .collect()
}

fn sample_trilinear(img: &ScalarVolume, p: [f64; 3]) -> f64 {
    let dims = img.dims();
    let ext = [dims.d, dims.h, dims.w];
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, (ext[a] - 1) as f64);
        let f = c.floor();
        base[a] = f as usize;
        frac[a] = c - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let o = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let w: f64 = (0..3).map(|a| if o[a] == 1 { frac[a] } else { 1.0 - frac[a] }).product();
        if w == 0.0 {
            continue;
        }
        let q = [(base[0] + o[0]).min(ext[0] - 1), (base[1] + o[1]).min(ext[1] - 1), (base[2] + o[2]).min(ext[2] - 1)];
        acc += w * img.get(q[0], q[1], q[2]);
    }
    acc
}

/// Warps an image/label pair by `out(x) = in(x + u(x))`: trilinear for
/// intensities, nearest neighbour for labels, edge-clamped outside the volume.
pub fn apply_deformation(image: &ScalarVolume, labels: &LabelVolume, spec: &DeformationSpec) -> Result<(ScalarVolume, LabelVolume)> {
    spec.validate()?;
    let dims = image.dims();
    if labels.dims() != dims {
        return Err(Error::ShapeMismatch { op: "apply_deformation", lhs: dims.as_array().to_vec(), rhs: labels.dims().as_array().to_vec() });
    }
    if spec.max_displacement == 0.0 && spec.translation == [0.0; 3] {
        return Ok((image.clone(), labels.clone()));
    }
    let field = displacement_field(dims, spec);
    let ext = [dims.d, dims.h, dims.w];
    let mut data = Vec::with_capacity(dims.len());
    let mut lab = Vec::with_capacity(dims.len());
    for (idx, u) in field.iter().enumerate() {
        let (z, y, x) = dims.coords(idx);
        let p = [z as f64 + u[0], y as f64 + u[1], x as f64 + u[2]];
        data.push(sample_trilinear(image, p));
        let n: Vec<usize> = (0..3).map(|a| p[a].round().clamp(0.0, (ext[a] - 1) as f64) as usize).collect();
        lab.push(labels.get(n[0], n[1], n[2]));
    }
    Ok((ScalarVolume::new(dims, data)?, LabelVolume::new(dims, lab, labels.num_classes())?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathologySpec {
    pub radius: [f64; 2],
    pub delta: [f64; 2],
    pub count: usize,
    pub seed: u64,
}

impl PathologySpec {
    /// Sphere radius range on the 64-voxel reference side.
    pub const DESK_RADIUS_64: [f64; 2] = [4.0, 8.0];
    pub const DELTA: [f64; 2] = [15.0, 25.0];
    pub const DEFAULT_COUNT: usize = 3;

    /// Lesion sizes for ~256-voxel images.
    pub fn paper_scale(count: usize, seed: u64) -> Self {
        Self { radius: [10.0, 20.0], delta: Self::DELTA, count, seed }
    }

    /// Desk-scale lesions with radii proportional to the volume side.
    pub fn desk_scale(side: usize, count: usize, seed: u64) -> Self {
        let s = side as f64 / 64.0;
        Self { radius: [Self::DESK_RADIUS_64[0] * s, Self::DESK_RADIUS_64[1] * s], delta: Self::DELTA, count, seed }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        let [r_lo, r_hi] = self.radius;
        let [d_lo, d_hi] = self.delta;
        if !(r_lo > 0.0 && r_lo <= r_hi && d_lo > 0.0 && d_lo <= d_hi && r_hi.is_finite() && d_hi.is_finite()) {
            return Err(Error::Config(format!("invalid pathology ranges {self:?}")));
        }
        let min_side = dims.as_array().into_iter().min().unwrap_or(0) as f64;
        if self.count > 0 && 2.0 * r_hi.ceil() + 1.0 > min_side {
            return Err(Error::Config(format!("pathology radius {r_hi} does not fit in {dims}")));
        }
        Ok(())
    }
}

/// Adds spheres of raised intensity. A voxel inside several spheres takes the
/// first sphere's increase only. Returns the image and a 2-class lesion mask.
pub fn inject_pathology(image: &ScalarVolume, spec: &PathologySpec) -> Result<(ScalarVolume, LabelVolume)> {
    let dims = image.dims();
    spec.validate(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = image.data().to_vec();
    let mut mask = vec![0u16; dims.len()];
    let ext = [dims.d, dims.h, dims.w];
    for _ in 0..spec.count {
        let r = rng.random_range(spec.radius[0]..=spec.radius[1]);
        let delta = rng.random_range(spec.delta[0]..=spec.delta[1]);
        let rc = r.ceil();
        let centre: Vec<f64> = ext.iter().map(|&e| rng.random_range(rc..=(e as f64 - 1.0 - rc))).collect();
        let lo: Vec<usize> = centre.iter().map(|c| (c - r).ceil().max(0.0) as usize).collect();
        let hi: Vec<usize> = centre.iter().zip(ext).map(|(c, e)| ((c + r).floor() as usize).min(e - 1)).collect();
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let d2 = (z as f64 - centre[0]).powi(2) + (y as f64 - centre[1]).powi(2) + (x as f64 - centre[2]).powi(2);
                    let i = dims.index(z, y, x);
                    if d2 <= r * r && mask[i] == 0 {
                        mask[i] = 1;
                        data[i] += delta;
                    }
                }
            }
        }
    }
    Ok((ScalarVolume::new(dims, data)?, LabelVolume::new(dims, mask, 2)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub count: usize,
    pub train: usize,
    pub side: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub shape_jitter: f64,
    pub smoothness: f64,
    pub structure_shift: f64,
    pub deformation_spacing: f64,
    pub max_displacement: f64,
}

impl CorpusSpec {
    /// 20 phantoms of 48^3 with 5 classes, 14 for training.
    pub fn standard(seed: u64) -> Self {
        Self {
            count: 20,
            train: 14,
            side: 48,
            num_classes: 5,
            seed,
            noise_sigma: 10.0,
            shape_jitter: 0.06,
            smoothness: 0.5,
            structure_shift: 0.12,
            deformation_spacing: 12.0,
            max_displacement: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 || self.train == 0 || self.train > self.count || self.side == 0 {
            return Err(Error::Config(format!("invalid corpus layout {self:?}")));
        }
        self.phantom(0).validate()?;
        self.deformation(0).validate()
    }

    pub fn phantom(&self, index: usize) -> PhantomSpec {
        PhantomSpec {
            dims: Dims::cube(self.side),
            num_classes: self.num_classes,
            seed: derive_seed(self.seed, stream::PHANTOM, index as u64),
            noise_sigma: self.noise_sigma,
            shape_jitter: self.shape_jitter,
            smoothness: self.smoothness,
            structure_shift: self.structure_shift,
        }
    }

    pub fn deformation(&self, index: usize) -> DeformationSpec {
        DeformationSpec::new(self.deformation_spacing, self.max_displacement, derive_seed(self.seed, stream::DEFORMATION, index as u64))
    }

    pub fn split(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub image: ScalarVolume,
    pub labels: LabelVolume,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub subjects: Vec<Subject>,
}

fn subject_id(index: usize) -> String {
    format!("vol{index:03}")
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        use rayon::prelude::*;
        spec.validate()?;
        let subjects = (0..spec.count)
            .into_par_iter()
            .map(|i| {
                let (img, lab) = generate_phantom(&spec.phantom(i))?;
                let (image, labels) = apply_deformation(&img, &lab, &spec.deformation(i))?;
                // stored intensities are f32, so round now to make files round-trip exactly
                let image = ScalarVolume::new(image.dims(), image.data().iter().map(|&v| v as f32 as f64).collect())?;
                Ok(Subject { id: subject_id(i), image, labels, split: spec.split(i) })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: spec.clone(), subjects })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.subjects.len()).filter(|&i| self.subjects[i].split == split).collect()
    }

    /// Writes volumes and `manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut volumes = Vec::with_capacity(self.subjects.len());
        for s in &self.subjects {
            let image = format!("{}_image.vgf", s.id);
            let labels = format!("{}_labels.vgf", s.id);
            write_volume(&s.image.clone().into(), dir.join(&image))?;
            write_volume(&s.labels.clone().into(), dir.join(&labels))?;
            volumes.push(ManifestEntry { id: s.id.clone(), image, labels, split: s.split });
        }
        let manifest = Manifest { spec: self.spec.clone(), volumes };
        fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }

    /// Loads a corpus from a manifest path (or its directory).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest_path: PathBuf = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let subjects = manifest
            .volumes
            .iter()
            .map(|v| {
                Ok(Subject {
                    id: v.id.clone(),
                    image: read_scalar(dir.join(&v.image))?,
                    labels: read_labels(dir.join(&v.labels))?,
                    split: v.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: manifest.spec, subjects })
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub labels: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CorpusSpec,
    pub volumes: Vec<ManifestEntry>,
}

#[cfg(test)]
mod tests;
