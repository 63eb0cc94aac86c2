//! Volumetric grids: intensities, integer labels and per-voxel channel vectors.
//!
//! Every volume stores one contiguous buffer in row-major order with the
//! width axis fastest. Channel volumes are channel-last, so the `K` values of
//! a voxel are adjacent in memory.
//!
//! The on-disk format (`VGF1`) is a 22-byte header followed by a raw
//! little-endian payload:
//!
//! | bytes  | content                                           |
//! |--------|---------------------------------------------------|
//! | 0..4   | magic `VGF1`                                      |
//! | 4      | dtype: 0 = f32 scalar, 1 = u16 label, 2 = f32 channel |
//! | 5      | reserved, always 0                                |
//! | 6..22  | u32 D, H, W, K (K = 1 for scalar and label)       |
//!
//! Label payloads carry a trailing u32 class count.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VGF1";
pub const DTYPE_SCALAR: u8 = 0;
pub const DTYPE_LABEL: u8 = 1;
pub const DTYPE_CHANNEL: u8 = 2;
const HEADER_LEN: usize = 22;

/// Spatial extents `(D, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn cube(side: usize) -> Self {
        Self::new(side, side, side)
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub const fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.w;
        let y = (index / self.w) % self.h;
        let z = index / (self.w * self.h);
        (z, y, x)
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// Real-valued intensity image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    dims: Dims,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "scalar volume {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0.0; dims.len()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Zero-mean, unit-variance copy. Constant volumes map to all zeros.
    pub fn zscore(&self) -> ScalarVolume {
        let (mean, std) = self.mean_std();
        let inv = if std > 0.0 { 1.0 / std } else { 0.0 };
        ScalarVolume {
            dims: self.dims,
            data: self.data.iter().map(|v| (v - mean) * inv).collect(),
        }
    }

    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Result<ScalarVolume> {
        check_crop(self.dims, origin, size)?;
        Ok(ScalarVolume { dims: size, data: crop_buffer(&self.data, self.dims, 1, origin, size) })
    }
}

/// Integer class labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u16>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u16>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 || num_classes > u16::MAX as usize + 1 {
            return Err(Error::InvalidVolume(format!("num_classes must be in [2, 65536], got {num_classes}")));
        }
        if labels.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "label volume {dims} needs {} labels, got {}",
                dims.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidLabel { label: bad as usize, num_classes });
        }
        Ok(Self { dims, labels, num_classes })
    }

    pub fn filled(dims: Dims, label: u16, num_classes: usize) -> Result<Self> {
        Self::new(dims, vec![label; dims.len()], num_classes)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u16 {
        self.labels[self.dims.index(z, y, x)]
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Result<LabelVolume> {
        check_crop(self.dims, origin, size)?;
        Ok(LabelVolume {
            dims: size,
            labels: crop_buffer(&self.labels, self.dims, 1, origin, size),
            num_classes: self.num_classes,
        })
    }

    /// Applies a class relabeling `perm[old] = new`.
    pub fn permuted(&self, perm: &[usize]) -> Result<LabelVolume> {
        if perm.len() != self.num_classes {
            return Err(Error::InvalidVolume("permutation length must equal num_classes".into()));
        }
        let labels = self.labels.iter().map(|&l| perm[l as usize] as u16).collect();
        LabelVolume::new(self.dims, labels, self.num_classes)
    }
}

/// Per-voxel real vectors of fixed length `K`, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelVolume {
    dims: Dims,
    channels: usize,
    data: Vec<f64>,
}

impl ChannelVolume {
    pub fn new(dims: Dims, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidVolume("channel volume needs at least one channel".into()));
        }
        if data.len() != dims.len() * channels {
            return Err(Error::InvalidVolume(format!(
                "channel volume {dims}x{channels} needs {} values, got {}",
                dims.len() * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite value at index {i}")));
        }
        Ok(Self { dims, channels, data })
    }

    pub fn zeros(dims: Dims, channels: usize) -> Self {
        Self { dims, channels, data: vec![0.0; dims.len() * channels] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// True when every voxel vector is nonnegative and sums to one within `tol`.
    pub fn is_probability_map(&self, tol: f64) -> bool {
        self.data.chunks_exact(self.channels).all(|v| {
            v.iter().all(|&p| p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Result<ChannelVolume> {
        check_crop(self.dims, origin, size)?;
        Ok(ChannelVolume {
            dims: size,
            channels: self.channels,
            data: crop_buffer(&self.data, self.dims, self.channels, origin, size),
        })
    }

    /// Concatenates channels voxel by voxel: `self` first, then `other`.
    pub fn concat(&self, other: &ChannelVolume) -> Result<ChannelVolume> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: self.dims.as_array().to_vec(),
                rhs: other.dims.as_array().to_vec(),
            });
        }
        let k = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.dims.len() * k);
        for i in 0..self.dims.len() {
            data.extend_from_slice(self.voxel(i));
            data.extend_from_slice(other.voxel(i));
        }
        Ok(ChannelVolume { dims: self.dims, channels: k, data })
    }

    /// Single-channel view of a scalar volume.
    pub fn from_scalar(vol: &ScalarVolume) -> ChannelVolume {
        ChannelVolume { dims: vol.dims, channels: 1, data: vol.data.clone() }
    }

    /// Channel `c` as a scalar volume.
    pub fn channel(&self, c: usize) -> ScalarVolume {
        ScalarVolume {
            dims: self.dims,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }
}

fn check_crop(dims: Dims, origin: [usize; 3], size: Dims) -> Result<()> {
    let fits = origin[0] + size.d <= dims.d && origin[1] + size.h <= dims.h && origin[2] + size.w <= dims.w;
    if !fits || size.is_empty() {
        return Err(Error::InvalidVolume(format!("crop {origin:?}+{size} outside volume {dims}")));
    }
    Ok(())
}

fn crop_buffer<T: Copy>(src: &[T], dims: Dims, k: usize, origin: [usize; 3], size: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(size.len() * k);
    for z in 0..size.d {
        for y in 0..size.h {
            let start = dims.index(origin[0] + z, origin[1] + y, origin[2]) * k;
            out.extend_from_slice(&src[start..start + size.w * k]);
        }
    }
    out
}

/// One-hot encoding with `K == C`.
pub fn one_hot(labels: &LabelVolume) -> ChannelVolume {
    let c = labels.num_classes;
    let mut data = vec![0.0; labels.labels.len() * c];
    for (i, &l) in labels.labels.iter().enumerate() {
        data[i * c + l as usize] = 1.0;
    }
    ChannelVolume { dims: labels.dims, channels: c, data }
}

/// Index of the largest channel per voxel; ties go to the lowest index.
pub fn argmax_labels(probs: &ChannelVolume) -> LabelVolume {
    let labels = probs
        .data
        .chunks_exact(probs.channels)
        .map(|v| argmax(v) as u16)
        .collect();
    LabelVolume { dims: probs.dims, labels, num_classes: probs.channels.max(2) }
}

#[inline]
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax over the channels of every voxel, with max subtraction.
pub fn channel_softmax(logits: &ChannelVolume) -> ChannelVolume {
    let mut data = logits.data.clone();
    for v in data.chunks_exact_mut(logits.channels) {
        softmax_in_place(v);
    }
    ChannelVolume { dims: logits.dims, channels: logits.channels, data }
}

#[inline]
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Any of the three volume kinds, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
    Channel(ChannelVolume),
}

impl Volume {
    pub fn dtype(&self) -> u8 {
        match self {
            Volume::Scalar(_) => DTYPE_SCALAR,
            Volume::Label(_) => DTYPE_LABEL,
            Volume::Channel(_) => DTYPE_CHANNEL,
        }
    }
}

impl From<ScalarVolume> for Volume {
    fn from(v: ScalarVolume) -> Self {
        Volume::Scalar(v)
    }
}

impl From<LabelVolume> for Volume {
    fn from(v: LabelVolume) -> Self {
        Volume::Label(v)
    }
}

impl From<ChannelVolume> for Volume {
    fn from(v: ChannelVolume) -> Self {
        Volume::Channel(v)
    }
}

fn header(dtype: u8, dims: Dims, k: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(dtype);
    out.push(0);
    for v in [dims.d, dims.h, dims.w, k] {
        let v = u32::try_from(v).map_err(|_| {
            Error::DimensionOverflow(vec![dims.d as u64, dims.h as u64, dims.w as u64, k as u64])
        })?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Serializes a volume to `VGF1` bytes. Real values are stored as f32.
pub fn encode_volume(vol: &Volume) -> Result<Vec<u8>> {
    let mut out = match vol {
        Volume::Scalar(v) => header(DTYPE_SCALAR, v.dims, 1)?,
        Volume::Label(v) => header(DTYPE_LABEL, v.dims, 1)?,
        Volume::Channel(v) => header(DTYPE_CHANNEL, v.dims, v.channels)?,
    };
    match vol {
        Volume::Scalar(ScalarVolume { data, .. }) | Volume::Channel(ChannelVolume { data, .. }) => {
            out.reserve(data.len() * 4);
            for &x in data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Volume::Label(v) => {
            out.reserve(v.labels.len() * 2 + 4);
            for &l in &v.labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
            out.extend_from_slice(&(v.num_classes as u32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `VGF1` bytes.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found });
    }
    let dtype = bytes[4];
    if bytes[5] != 0 {
        return Err(Error::BadHeader(format!("reserved byte is {}", bytes[5])));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let (d, h, w, k) = (read_u32(6), read_u32(10), read_u32(14), read_u32(18));
    let extents = vec![d as u64, h as u64, w as u64, k as u64];
    let (elem, trailer) = match dtype {
        DTYPE_SCALAR | DTYPE_CHANNEL => (4usize, 0usize),
        DTYPE_LABEL => (2, 4),
        other => return Err(Error::UnknownDtype(other)),
    };
    if dtype != DTYPE_CHANNEL && k != 1 {
        return Err(Error::BadHeader(format!("dtype {dtype} requires K = 1, got {k}")));
    }
    let count = [d, h, w, k]
        .iter()
        .try_fold(1usize, |acc, &v| acc.checked_mul(v as usize))
        .ok_or_else(|| Error::DimensionOverflow(extents.clone()))?;
    let expected = count
        .checked_mul(elem)
        .and_then(|n| n.checked_add(HEADER_LEN + trailer))
        .ok_or(Error::DimensionOverflow(extents))?;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::ExcessData { expected, found: bytes.len() });
    }
    let dims = Dims::new(d as usize, h as usize, w as usize);
    let payload = &bytes[HEADER_LEN..];
    match dtype {
        DTYPE_LABEL => {
            let labels = payload[..count * 2]
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect();
            let c = u32::from_le_bytes(payload[count * 2..].try_into().unwrap()) as usize;
            Ok(Volume::Label(LabelVolume::new(dims, labels, c)?))
        }
        _ => {
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if dtype == DTYPE_SCALAR {
                Ok(Volume::Scalar(ScalarVolume::new(dims, data)?))
            } else {
                Ok(Volume::Channel(ChannelVolume::new(dims, k as usize, data)?))
            }
        }
    }
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_volume(vol)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    match read_volume(path)? {
        Volume::Scalar(v) => Ok(v),
        other => Err(Error::DtypeMismatch { expected: DTYPE_SCALAR, found: other.dtype() }),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read_volume(path)? {
        Volume::Label(v) => Ok(v),
        other => Err(Error::DtypeMismatch { expected: DTYPE_LABEL, found: other.dtype() }),
    }
}

pub fn read_channels(path: impl AsRef<Path>) -> Result<ChannelVolume> {
    match read_volume(path)? {
        Volume::Channel(v) => Ok(v),
        other => Err(Error::DtypeMismatch { expected: DTYPE_CHANNEL, found: other.dtype() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_labels(dims: Dims, c: usize, seed: u64) -> LabelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = (0..dims.len()).map(|_| rng.random_range(0..c) as u16).collect();
        LabelVolume::new(dims, labels, c).unwrap()
    }

    #[test]
    fn one_hot_single_voxel() {
        let l = LabelVolume::new(Dims::cube(1), vec![2], 4).unwrap();
        assert_eq!(one_hot(&l).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_all_zero_labels() {
        let l = LabelVolume::filled(Dims::new(2, 3, 4), 0, 2).unwrap();
        let oh = one_hot(&l);
        assert_eq!(oh.channels(), 2);
        assert!(oh.data().chunks(2).all(|v| v == [1.0, 0.0]));
    }

    #[test]
    fn one_hot_argmax_roundtrip() {
        for seed in 0..5 {
            let l = random_labels(Dims::cube(8), 5, seed);
            assert_eq!(argmax_labels(&one_hot(&l)), l);
        }
    }

    #[test]
    fn one_hot_argmax_exhaustive_small() {
        // every labeling of a 2x1x2 volume with 3 classes
        let dims = Dims::new(2, 1, 2);
        for code in 0..81u32 {
            let labels: Vec<u16> = (0..4).map(|i| ((code / 3u32.pow(i)) % 3) as u16).collect();
            let l = LabelVolume::new(dims, labels, 3).unwrap();
            assert_eq!(argmax_labels(&one_hot(&l)), l);
        }
    }

    #[test]
    fn argmax_basic_and_ties() {
        let v = ChannelVolume::new(Dims::cube(1), 3, vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(argmax_labels(&v).labels(), &[1]);
        let t = ChannelVolume::new(Dims::cube(1), 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(argmax_labels(&t).labels(), &[0]);
    }

    #[test]
    fn softmax_examples() {
        let u = channel_softmax(&ChannelVolume::new(Dims::cube(1), 3, vec![0.0; 3]).unwrap());
        for p in u.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = channel_softmax(&ChannelVolume::new(Dims::cube(1), 2, vec![1000.0, 0.0]).unwrap());
        assert!((big.data()[0] - 1.0).abs() < 1e-12);
        assert!(big.data()[1].abs() < 1e-12);
        let e = std::f64::consts::E;
        let two = channel_softmax(&ChannelVolume::new(Dims::cube(1), 2, vec![1.0, 2.0]).unwrap());
        assert!((two.data()[0] - e / (e + e * e)).abs() < 1e-15);
        assert!((two.data()[1] - e * e / (e + e * e)).abs() < 1e-15);
        assert!((two.data()[0] - 0.2689).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 2..7),
            shift in -100.0f64..100.0,
        ) {
            let k = v.len();
            let a = channel_softmax(&ChannelVolume::new(Dims::cube(1), k, v.clone()).unwrap());
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let b = channel_softmax(&ChannelVolume::new(Dims::cube(1), k, shifted).unwrap());
            prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn argmax_invariant_under_softmax(v in proptest::collection::vec(-20.0f64..20.0, 12)) {
            let vol = ChannelVolume::new(Dims::new(1, 1, 4), 3, v).unwrap();
            prop_assert_eq!(argmax_labels(&channel_softmax(&vol)), argmax_labels(&vol));
        }

        #[test]
        fn io_roundtrip_is_bit_exact(seed in 0u64..1000, kind in 0u8..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = Dims::new(rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
            let vol: Volume = match kind {
                0 => ScalarVolume::new(dims, (0..dims.len()).map(|_| (rng.random::<f32>() * 255.0) as f64).collect()).unwrap().into(),
                1 => random_labels(dims, 7, seed).into(),
                _ => ChannelVolume::new(dims, 3, (0..dims.len() * 3).map(|_| rng.random::<f32>() as f64).collect()).unwrap().into(),
            };
            let bytes = encode_volume(&vol).unwrap();
            let back = decode_volume(&bytes).unwrap();
            prop_assert_eq!(&back, &vol);
            prop_assert_eq!(encode_volume(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn file_roundtrip_16_cubed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = Dims::cube(16);
        let vol = ScalarVolume::new(dims, (0..dims.len()).map(|_| rng.random::<f32>() as f64).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vgf");
        write_volume(&vol.clone().into(), &path).unwrap();
        let first = fs::read(&path).unwrap();
        let back = read_scalar(&path).unwrap();
        assert_eq!(back, vol);
        write_volume(&back.into(), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let vol: Volume = ScalarVolume::zeros(Dims::cube(4)).into();
        let good = encode_volume(&vol).unwrap();

        let mut bad = good.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_volume(&bad), Err(Error::BadMagic { .. })));

        let mut short = good[..HEADER_LEN].to_vec();
        short.extend(std::iter::repeat_n(0u8, 4 * 100));
        // 4x4x4 declared but 100 values present
        assert!(matches!(decode_volume(&short), Err(Error::ExcessData { .. })));
        assert!(matches!(decode_volume(&good[..good.len() - 4]), Err(Error::Truncated { .. })));

        let mut huge = good.clone();
        for at in [6, 10, 14] {
            huge[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        huge[4] = DTYPE_CHANNEL;
        huge[18..22].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_volume(&huge), Err(Error::DimensionOverflow(_))));

        let mut dt = good.clone();
        dt[4] = 9;
        assert!(matches!(decode_volume(&dt), Err(Error::UnknownDtype(9))));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.vgf");
        fs::write(&p, &good).unwrap();
        assert!(matches!(read_labels(&p), Err(Error::DtypeMismatch { expected: 1, found: 0 })));
    }

    #[test]
    fn invalid_labels_rejected() {
        assert!(matches!(
            LabelVolume::new(Dims::cube(1), vec![3], 3),
            Err(Error::InvalidLabel { label: 3, num_classes: 3 })
        ));
        assert!(LabelVolume::new(Dims::cube(1), vec![0], 1).is_err());
    }

    #[test]
    fn crop_and_concat() {
        let v = ScalarVolume::from_fn(Dims::new(3, 4, 5), |z, y, x| (z * 100 + y * 10 + x) as f64);
        let c = v.crop([1, 1, 2], Dims::new(2, 2, 2)).unwrap();
        assert_eq!(c.data(), &[112.0, 113.0, 122.0, 123.0, 212.0, 213.0, 222.0, 223.0]);
        assert!(v.crop([2, 0, 0], Dims::new(2, 1, 1)).is_err());
        let a = ChannelVolume::from_scalar(&v);
        let cat = a.concat(&a).unwrap();
        assert_eq!(cat.channels(), 2);
        assert_eq!(cat.voxel(7), &[12.0, 12.0]);
        assert_eq!(cat.channel(1), v);
    }
}
