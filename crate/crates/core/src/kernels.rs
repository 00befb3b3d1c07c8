//! Forward kernels of the taped primitives, generic over the scalar so the
//! same definitions run in `f64` and in double-double.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::agc::{DistanceKind, GateKind};
use crate::dd::DoubleDouble;
use crate::tape::BinaryKind;
use crate::tensor::{Axis, Shape};

pub(crate) trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn lift(x: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
}

impl Real for f64 {
    fn lift(x: f64) -> Self {
        x
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn tanh(self) -> Self {
        libm::tanh(self)
    }
    fn abs(self) -> Self {
        libm::fabs(self)
    }
}

impl Real for DoubleDouble {
    fn lift(x: f64) -> Self {
        DoubleDouble::from_f64(x)
    }
    fn exp(self) -> Self {
        DoubleDouble::exp(self)
    }
    fn ln(self) -> Self {
        DoubleDouble::ln(self)
    }
    fn sqrt(self) -> Self {
        DoubleDouble::sqrt(self)
    }
    fn tanh(self) -> Self {
        DoubleDouble::tanh(self)
    }
    fn abs(self) -> Self {
        DoubleDouble::abs(self)
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::lift(0.5);
    let inner = T::lift(GELU_C) * (x + T::lift(GELU_A) * x * x * x);
    half * x * (T::lift(1.0) + inner.tanh())
}

/// Gate value for distance `d` at effective temperature `t_eff`.
pub(crate) fn gate_value<T: Real>(kind: GateKind, d: T, t_eff: T) -> T {
    let u = d / t_eff;
    match kind {
        GateKind::ExpDecay => (-u).exp(),
        GateKind::Sigmoid => T::lift(2.0) / (T::lift(1.0) + u.exp()),
    }
}

pub(crate) fn map<T: Real>(x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    x.iter().map(|&v| f(v)).collect()
}

pub(crate) fn scale<T: Real>(x: &[T], factor: f64) -> Vec<T> {
    let k = T::lift(factor);
    x.iter().map(|&v| v * k).collect()
}

fn sum<T: Real>(xs: impl Iterator<Item = T>) -> T {
    xs.fold(T::lift(0.0), |a, b| a + b)
}

fn max_of<T: Real>(xs: &[T]) -> T {
    xs.iter().skip(1).fold(xs[0], |m, &v| if v > m { v } else { m })
}

#[inline]
pub(crate) fn bcast_index(s: Shape, n: usize, c: usize, h: usize, w: usize) -> usize {
    if s.c == 1 {
        s.index(n, 0, h, w)
    } else {
        s.index(n, c, h, w)
    }
}

pub(crate) fn conv_out_dim(dim: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (dim + 2 * pad - kernel) / stride + 1
}

/// `out[.., i] = in[.., (i - shift) mod len]` along `axis`.
pub(crate) fn roll<T: Copy>(s: Shape, data: &[T], shift: isize, axis: Axis) -> Vec<T> {
    let len = s.extent(axis);
    let offset = shift.rem_euclid(len as isize) as usize;
    if offset == 0 {
        return data.to_vec();
    }
    let mut out = data.to_vec();
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        match axis {
            Axis::Height => {
                for i in 0..s.h {
                    let src = (i + len - offset) % len;
                    let dst_row = base + i * s.w;
                    let src_row = base + src * s.w;
                    out[dst_row..dst_row + s.w].copy_from_slice(&data[src_row..src_row + s.w]);
                }
            }
            Axis::Width => {
                for i in 0..s.h {
                    let row = base + i * s.w;
                    for j in 0..s.w {
                        out[row + j] = data[row + (j + len - offset) % len];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn binary<T: Real>(kind: BinaryKind, sa: Shape, a: &[T], sb: Shape, b: &[T], so: Shape) -> Vec<T> {
    let mut out = Vec::with_capacity(so.numel());
    for n in 0..so.n {
        for c in 0..so.c {
            for h in 0..so.h {
                for w in 0..so.w {
                    let x = a[bcast_index(sa, n, c, h, w)];
                    let y = b[bcast_index(sb, n, c, h, w)];
                    out.push(match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                        BinaryKind::Max => {
                            if x >= y {
                                x
                            } else {
                                y
                            }
                        }
                    });
                }
            }
        }
    }
    out
}

pub(crate) fn channel_distance<T: Real>(s: Shape, d: &[T], kind: DistanceKind) -> Vec<T> {
    let mut out = Vec::with_capacity(s.n * s.h * s.w);
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                let mut acc = T::lift(0.0);
                for c in 0..s.c {
                    let a = d[s.index(n, c, h, w)];
                    acc = acc
                        + match kind {
                            DistanceKind::L1 => a.abs(),
                            DistanceKind::L2 => a * a,
                        };
                }
                out.push(match kind {
                    DistanceKind::L1 => acc,
                    DistanceKind::L2 => acc.sqrt(),
                });
            }
        }
    }
    out
}

pub(crate) fn concat_channels<T: Copy>(sa: Shape, a: &[T], sb: Shape, b: &[T]) -> Vec<T> {
    let plane = sa.h * sa.w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n {
        out.extend_from_slice(&a[n * sa.c * plane..(n + 1) * sa.c * plane]);
        out.extend_from_slice(&b[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    out
}

pub(crate) struct ConvGeometry {
    pub sx: Shape,
    pub sw: Shape,
    pub so: Shape,
    pub stride: usize,
    pub groups: usize,
}

pub(crate) fn conv2d<T: Real>(g: &ConvGeometry, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (sx, sw, so) = (g.sx, g.sw, g.so);
    let k = sw.h;
    let pad = (k / 2) as isize;
    let cin_g = sw.c;
    let cout_g = sw.n / g.groups;
    let mut out = vec![T::lift(0.0); so.numel()];
    for n in 0..sx.n {
        for o in 0..sw.n {
            let grp = o / cout_g;
            let b0 = bias.map_or(T::lift(0.0), |b| b[o]);
            for oy in 0..so.h {
                for ox in 0..so.w {
                    let mut acc = b0;
                    for ci in 0..cin_g {
                        let cin = grp * cin_g + ci;
                        for ky in 0..k {
                            let iy = (oy * g.stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= sx.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride) as isize + kx as isize - pad;
                                if ix < 0 || ix >= sx.w as isize {
                                    continue;
                                }
                                acc = acc + wt[sw.index(o, ci, ky, kx)] * x[sx.index(n, cin, iy as usize, ix as usize)];
                            }
                        }
                    }
                    out[so.index(n, o, oy, ox)] = acc;
                }
            }
        }
    }
    out
}

pub(crate) struct Normalized<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Population-variance normalization over each index group, then a
/// per-channel affine.
pub(crate) fn normalize<T: Real>(
    s: Shape,
    x: &[T],
    groups: &[Vec<usize>],
    eps: f64,
    gain: Option<&[T]>,
    shift: Option<&[T]>,
) -> Normalized<T> {
    let mut xhat = vec![T::lift(0.0); s.numel()];
    let mut inv_std = Vec::with_capacity(groups.len());
    for idx in groups {
        let m = T::lift(idx.len() as f64);
        // Second pass folds the first mean's residual back in; a constant
        // group then has exactly zero deviations.
        let rough = sum(idx.iter().map(|&i| x[i])) / m;
        let mean = rough + sum(idx.iter().map(|&i| x[i] - rough)) / m;
        let var = sum(idx.iter().map(|&i| {
            let d = x[i] - mean;
            d * d
        })) / m;
        let inv = T::lift(1.0) / (var + T::lift(eps)).sqrt();
        for &i in idx {
            xhat[i] = (x[i] - mean) * inv;
        }
        inv_std.push(inv);
    }
    let plane = s.h * s.w;
    let out = xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / plane) % s.c;
            let scaled = gain.map_or(v, |g| v * g[c]);
            shift.map_or(scaled, |b| scaled + b[c])
        })
        .collect();
    Normalized { out, xhat, inv_std }
}

pub(crate) fn to_tokens<T: Copy>(s: Shape, x: &[T]) -> Vec<T> {
    let so = Shape::new(s.n, 1, s.h * s.w, s.c);
    let mut out = x.to_vec();
    for n in 0..s.n {
        for c in 0..s.c {
            for t in 0..s.h * s.w {
                out[so.index(n, 0, t, c)] = x[s.index(n, c, t / s.w, t % s.w)];
            }
        }
    }
    out
}

pub(crate) fn from_tokens<T: Copy>(s: Shape, so: Shape, x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    for n in 0..s.n {
        for c in 0..so.c {
            for t in 0..so.h * so.w {
                out[so.index(n, c, t / so.w, t % so.w)] = x[s.index(n, 0, t, c)];
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Copy>(s: Shape, x: &[T]) -> Vec<T> {
    let so = Shape::new(s.n, s.c, s.w, s.h);
    let mut out = x.to_vec();
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..s.h {
                for j in 0..s.w {
                    out[so.index(n, c, j, i)] = x[s.index(n, c, i, j)];
                }
            }
        }
    }
    out
}

pub(crate) fn matmul<T: Real>(sa: Shape, a: &[T], sb: Shape, b: &[T], so: Shape) -> Vec<T> {
    let mut out = vec![T::lift(0.0); so.numel()];
    for n in 0..sa.n {
        for c in 0..sa.c {
            for i in 0..sa.h {
                for k in 0..sa.w {
                    let av = a[sa.index(n, c, i, k)];
                    for j in 0..sb.w {
                        let o = so.index(n, c, i, j);
                        out[o] = out[o] + av * b[sb.index(n, c, k, j)];
                    }
                }
            }
        }
    }
    out
}

/// Softmax along the last axis, with max subtraction.
pub(crate) fn softmax<T: Real>(s: Shape, x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    for (row_in, row_out) in x.chunks(s.w).zip(out.chunks_mut(s.w)) {
        let m = max_of(row_in);
        let mut z = T::lift(0.0);
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = (v - m).exp();
            z = z + *o;
        }
        for o in row_out.iter_mut() {
            *o = *o / z;
        }
    }
    out
}

pub(crate) fn avg_pool<T: Real>(s: Shape, x: &[T]) -> Vec<T> {
    let plane = s.h * s.w;
    x.chunks(plane).map(|p| sum(p.iter().copied()) / T::lift(plane as f64)).collect()
}

pub(crate) fn gate<T: Real>(kind: GateKind, d: &[T], temperature: T, eps: f64) -> Vec<T> {
    let t_eff = temperature.abs() + T::lift(eps);
    d.iter().map(|&v| gate_value(kind, v, t_eff)).collect()
}

pub(crate) fn sum_all<T: Real>(x: &[T]) -> T {
    sum(x.iter().copied())
}

/// Mean softmax cross-entropy and the class probabilities.
pub(crate) fn cross_entropy<T: Real>(s: Shape, logits: &[T], labels: &[usize]) -> (T, Vec<T>) {
    let mut probs = logits.to_vec();
    let mut loss = T::lift(0.0);
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits[n * s.c..(n + 1) * s.c];
        let m = max_of(row);
        let z = sum(row.iter().map(|&v| (v - m).exp()));
        let log_z = m + z.ln();
        for (c, &v) in row.iter().enumerate() {
            probs[n * s.c + c] = (v - log_z).exp();
        }
        loss = loss + (log_z - row[label]);
    }
    (loss / T::lift(s.n as f64), probs)
}
