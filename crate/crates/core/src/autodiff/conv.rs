//! Channel-last 3D convolution kernels (im2col + GEMM, chunked over output voxels).
//!
//! Activations are `[B, D, H, W, C]`; convolution weights are `[k, k, k, Cin, Cout]`
//! and transposed-convolution weights are `[2, 2, 2, Cin, Cout]`.

use super::gemm::{gemm, Mat};
use crate::volgrid::Dims;

const CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub input: Dims,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn output(&self) -> Option<Dims> {
        let out = |n: usize| {
            let padded = n + 2 * self.pad;
            (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        Some(Dims::new(out(self.input.d)?, out(self.input.h)?, out(self.input.w)?))
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.kernel * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, out: Dims, x: &[f64], start: usize, n: usize, col: &mut [f64]) {
    let (k, cin, s) = (g.kernel, g.cin, g.stride);
    let pl = g.patch_len();
    let dims = g.input;
    for r in 0..n {
        let (oz, oy, ox) = out.coords(start + r);
        let row = &mut col[r * pl..(r + 1) * pl];
        let mut t = 0;
        for kd in 0..k {
            let iz = (oz * s + kd) as isize - g.pad as isize;
            for kh in 0..k {
                let iy = (oy * s + kh) as isize - g.pad as isize;
                for kw in 0..k {
                    let ix = (ox * s + kw) as isize - g.pad as isize;
                    let dst = &mut row[t * cin..(t + 1) * cin];
                    if iz >= 0
                        && iy >= 0
                        && ix >= 0
                        && (iz as usize) < dims.d
                        && (iy as usize) < dims.h
                        && (ix as usize) < dims.w
                    {
                        let at = dims.index(iz as usize, iy as usize, ix as usize) * cin;
                        dst.copy_from_slice(&x[at..at + cin]);
                    } else {
                        dst.fill(0.0);
                    }
                    t += 1;
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, out: Dims, col: &[f64], start: usize, n: usize, gx: &mut [f64]) {
    let (k, cin, s) = (g.kernel, g.cin, g.stride);
    let pl = g.patch_len();
    let dims = g.input;
    for r in 0..n {
        let (oz, oy, ox) = out.coords(start + r);
        let row = &col[r * pl..(r + 1) * pl];
        let mut t = 0;
        for kd in 0..k {
            let iz = (oz * s + kd) as isize - g.pad as isize;
            for kh in 0..k {
                let iy = (oy * s + kh) as isize - g.pad as isize;
                for kw in 0..k {
                    let ix = (ox * s + kw) as isize - g.pad as isize;
                    if iz >= 0
                        && iy >= 0
                        && ix >= 0
                        && (iz as usize) < dims.d
                        && (iy as usize) < dims.h
                        && (ix as usize) < dims.w
                    {
                        let at = dims.index(iz as usize, iy as usize, ix as usize) * cin;
                        for (d, v) in gx[at..at + cin].iter_mut().zip(&row[t * cin..(t + 1) * cin]) {
                            *d += v;
                        }
                    }
                    t += 1;
                }
            }
        }
    }
}

pub fn conv3d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let out = g.output().expect("validated geometry");
    let (nin, nout) = (g.input.len(), out.len());
    let pl = g.patch_len();
    let mut y = vec![0.0; g.batch * nout * g.cout];
    let mut col = vec![0.0; CHUNK.min(nout) * pl];
    let wm = Mat::new(w, pl, g.cout);
    for bi in 0..g.batch {
        let xb = &x[bi * nin * g.cin..(bi + 1) * nin * g.cin];
        let yb = &mut y[bi * nout * g.cout..(bi + 1) * nout * g.cout];
        if let Some(bias) = b {
            for row in yb.chunks_exact_mut(g.cout) {
                row.copy_from_slice(bias);
            }
        }
        let mut start = 0;
        while start < nout {
            let n = CHUNK.min(nout - start);
            let yc = &mut yb[start * g.cout..(start + n) * g.cout];
            if g.is_pointwise() {
                gemm(Mat::new(&xb[start * g.cin..], n, g.cin), wm, yc, 1.0);
            } else {
                im2col(g, out, xb, start, n, &mut col);
                gemm(Mat::new(&col, n, pl), wm, yc, 1.0);
            }
            start += n;
        }
    }
    y
}

/// Accumulates gradients of a convolution. `gx`, `gw`, `gb` are added into when present.
pub fn conv3d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let out = g.output().expect("validated geometry");
    let (nin, nout) = (g.input.len(), out.len());
    let pl = g.patch_len();
    if let Some(gb) = gb {
        for row in gy.chunks_exact(g.cout) {
            for (d, v) in gb.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    let mut col = vec![0.0; CHUNK.min(nout) * pl];
    let mut gcol = vec![0.0; CHUNK.min(nout) * pl];
    let wm = Mat::new(w, pl, g.cout);
    for bi in 0..g.batch {
        let xb = &x[bi * nin * g.cin..(bi + 1) * nin * g.cin];
        let gyb = &gy[bi * nout * g.cout..(bi + 1) * nout * g.cout];
        let mut start = 0;
        while start < nout {
            let n = CHUNK.min(nout - start);
            let gyc = Mat::new(&gyb[start * g.cout..], n, g.cout);
            if let Some(gw) = gw.as_deref_mut() {
                if g.is_pointwise() {
                    gemm(Mat::new(&xb[start * g.cin..], n, g.cin).t(), gyc, gw, 1.0);
                } else {
                    im2col(g, out, xb, start, n, &mut col);
                    gemm(Mat::new(&col, n, pl).t(), gyc, gw, 1.0);
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                let gxb = &mut gx[bi * nin * g.cin..(bi + 1) * nin * g.cin];
                if g.is_pointwise() {
                    gemm(gyc, wm.t(), &mut gxb[start * g.cin..(start + n) * g.cin], 1.0);
                } else {
                    gemm(gyc, wm.t(), &mut gcol[..n * pl], 0.0);
                    col2im_add(g, out, &gcol, start, n, gxb);
                }
            }
            start += n;
        }
    }
}

/// Geometry of a stride-2, kernel-2 transposed convolution (output is twice the input).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvGeom {
    pub batch: usize,
    pub input: Dims,
    pub cin: usize,
    pub cout: usize,
}

impl DeconvGeom {
    pub fn output(&self) -> Dims {
        Dims::new(self.input.d * 2, self.input.h * 2, self.input.w * 2)
    }
}

#[inline]
fn tap_target(input: Dims, out: Dims, v: usize, tap: usize) -> usize {
    let (z, y, x) = input.coords(v);
    let (a, b, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
    out.index(2 * z + a, 2 * y + b, 2 * x + c)
}

pub fn deconv3d_forward(g: &DeconvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let out = g.output();
    let (nin, nout) = (g.input.len(), out.len());
    let mut y = vec![0.0; g.batch * nout * g.cout];
    let mut z = vec![0.0; nin * g.cout];
    for bi in 0..g.batch {
        let xb = Mat::new(&x[bi * nin * g.cin..], nin, g.cin);
        let yb = &mut y[bi * nout * g.cout..(bi + 1) * nout * g.cout];
        for tap in 0..8 {
            let wt = Mat::new(&w[tap * g.cin * g.cout..], g.cin, g.cout);
            gemm(xb, wt, &mut z, 0.0);
            for v in 0..nin {
                let at = tap_target(g.input, out, v, tap) * g.cout;
                let dst = &mut yb[at..at + g.cout];
                dst.copy_from_slice(&z[v * g.cout..(v + 1) * g.cout]);
                if let Some(bias) = b {
                    for (d, bv) in dst.iter_mut().zip(bias) {
                        *d += bv;
                    }
                }
            }
        }
    }
    y
}

pub fn deconv3d_backward(
    g: &DeconvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let out = g.output();
    let (nin, nout) = (g.input.len(), out.len());
    if let Some(gb) = gb {
        for row in gy.chunks_exact(g.cout) {
            for (d, v) in gb.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    let mut gz = vec![0.0; nin * g.cout];
    for bi in 0..g.batch {
        let xb = Mat::new(&x[bi * nin * g.cin..], nin, g.cin);
        let gyb = &gy[bi * nout * g.cout..(bi + 1) * nout * g.cout];
        for tap in 0..8 {
            for v in 0..nin {
                let at = tap_target(g.input, out, v, tap) * g.cout;
                gz[v * g.cout..(v + 1) * g.cout].copy_from_slice(&gyb[at..at + g.cout]);
            }
            let gzm = Mat::new(&gz, nin, g.cout);
            if let Some(gw) = gw.as_deref_mut() {
                gemm(xb.t(), gzm, &mut gw[tap * g.cin * g.cout..(tap + 1) * g.cin * g.cout], 1.0);
            }
            if let Some(gx) = gx.as_deref_mut() {
                let wt = Mat::new(&w[tap * g.cin * g.cout..], g.cin, g.cout);
                gemm(gzm, wt.t(), &mut gx[bi * nin * g.cin..(bi + 1) * nin * g.cin], 1.0);
            }
        }
    }
}
