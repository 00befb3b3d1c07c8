//! Single-head global attention mixer for the lowest-resolution stage.

use alloc::format;

use crate::error::Result;
use crate::nn::{Bound, Conv, ConvBlock, Layout};
use crate::tape::{NormMode, Tape, Var, NORM_EPS};
use crate::tensor::Tensor4;

/// Query/key/value projections (1x1, `c -> c`) and the output conv block (`2c -> c`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMixer {
    pub wq: Conv,
    pub wk: Conv,
    pub wv: Conv,
    pub proj: ConvBlock,
}

impl AttentionMixer {
    pub fn declare(layout: &mut Layout, name: &str, channels: usize) -> Self {
        AttentionMixer {
            wq: Conv::declare(layout, &format!("{name}.q"), channels, channels, 1, 1, 1),
            wk: Conv::declare(layout, &format!("{name}.k"), channels, channels, 1, 1, 1),
            wv: Conv::declare(layout, &format!("{name}.v"), channels, channels, 1, 1, 1),
            proj: ConvBlock::declare(layout, &format!("{name}.proj"), 2 * channels, channels, 1, 1, 1, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        attention_mix(tape, self, p, x)
    }
}

/// Projects `x` and flattens each projection to a `(n, 1, h*w, c')` token matrix.
pub fn qkv_project(tape: &mut Tape, m: &AttentionMixer, p: &Bound, x: Var) -> Result<(Var, Var, Var)> {
    let q = m.wq.forward(tape, p, x)?;
    let k = m.wk.forward(tape, p, x)?;
    let v = m.wv.forward(tape, p, x)?;
    Ok((tape.to_tokens(q), tape.to_tokens(k), tape.to_tokens(v)))
}

/// Standardizes every token row over its channels (no affine).
pub fn normalize_tokens(tape: &mut Tape, t: Var) -> Result<Var> {
    let s = tape.shape(t);
    let planar = tape.from_tokens(t, s.h, 1)?;
    let normed = tape.normalize(planar, NormMode::PerTokenChannel, None, None, NORM_EPS)?;
    Ok(tape.to_tokens(normed))
}

/// `softmax(norm(Q) norm(K)^T / sqrt(d_k)) V` on token matrices.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, d_k: usize) -> Result<Var> {
    let qn = normalize_tokens(tape, q)?;
    let kn = normalize_tokens(tape, k)?;
    let kt = tape.transpose(kn);
    let scores = tape.matmul(qn, kt)?;
    let scaled = tape.scale(scores, 1.0 / libm::sqrt(d_k as f64));
    let weights = tape.softmax_lastaxis(scaled);
    tape.matmul(weights, v)
}

/// Attention, max-relative fusion `max(0, x_attn - x)`, concat with `x`, projection.
pub fn attention_mix(tape: &mut Tape, m: &AttentionMixer, p: &Bound, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let (q, k, v) = qkv_project(tape, m, p, x)?;
    let d_k = tape.shape(q).w;
    let tokens = attend(tape, q, k, v, d_k)?;
    let x_attn = tape.from_tokens(tokens, s.h, s.w)?;
    let diff = tape.sub(x_attn, x)?;
    let zeros = tape.constant(Tensor4::zeros(s)?);
    let xj = tape.max(zeros, diff)?;
    let cat = tape.concat_channels(x, xj)?;
    m.proj.forward(tape, p, cat)
}
