//! Adaptive graph convolution: a static axial scaffold of cyclic shifts whose
//! long-range edges are soft-weighted by an exponential decay gate on the
//! feature distance between the two endpoints.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Bound, ConvBlock, Init, Layout, ParamId};
use crate::kernels::gate_value;
use crate::tape::{Tape, Var};
use crate::tensor::{Axis, Shape, Tensor4};

/// Stabilizer added to `|T|`.
pub const GATE_EPS: f64 = 1e-6;

/// Initial temperature of every gate.
pub const INITIAL_TEMPERATURE: f64 = 1.0;

/// Gate applied to a feature distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GateKind {
    /// `exp(-d / t)`
    #[default]
    ExpDecay,
    /// `2 * sigmoid(-d / t)`, equal to 1 at `d = 0` and decreasing.
    Sigmoid,
}

/// Channel-wise distance between a node and its neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DistanceKind {
    #[default]
    L1,
    L2,
}

/// Temperature and stabilizer of a gate. The effective temperature is `|T| + eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatingParams {
    pub temperature: f64,
    eps: f64,
}

impl GatingParams {
    pub fn new(temperature: f64) -> Self {
        Self::with_eps(temperature, GATE_EPS)
    }

    /// Panics unless `eps > 0`.
    pub fn with_eps(temperature: f64, eps: f64) -> Self {
        assert!(eps > 0.0, "gate eps must be positive");
        GatingParams { temperature, eps }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn effective_temperature(&self) -> f64 {
        libm::fabs(self.temperature) + self.eps
    }
}

impl Default for GatingParams {
    fn default() -> Self {
        Self::new(INITIAL_TEMPERATURE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AgcConfig {
    /// Hop distance of the ungated local connections.
    pub k: usize,
    pub gate: GateKind,
    pub distance: DistanceKind,
}

impl AgcConfig {
    pub fn new(k: usize) -> Self {
        AgcConfig {
            k,
            gate: GateKind::ExpDecay,
            distance: DistanceKind::L1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaffoldShift {
    pub axis: Axis,
    pub offset: usize,
    pub gated: bool,
}

/// The ordered shift set visited by the aggregation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaffoldSpec {
    pub shifts: Vec<ScaffoldShift>,
}

impl ScaffoldSpec {
    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }
}

/// `floor(log2(n))` for `n >= 1`.
pub fn floor_log2(n: usize) -> usize {
    debug_assert!(n >= 1);
    (usize::BITS - 1 - n.leading_zeros()) as usize
}

/// Local shift `k` on height then width, then gated shifts `2^1..=2^floor(log2 h)`
/// on height and `2^1..=2^floor(log2 w)` on width.
pub fn scaffold_shifts(h: usize, w: usize, k: usize) -> Result<ScaffoldSpec> {
    if k < 1 || k >= h.min(w) {
        return Err(Error::LocalDistance { k, h, w });
    }
    let mut shifts = Vec::with_capacity(2 + floor_log2(h) + floor_log2(w));
    for axis in [Axis::Height, Axis::Width] {
        shifts.push(ScaffoldShift {
            axis,
            offset: k,
            gated: false,
        });
    }
    for (axis, dim) in [(Axis::Height, h), (Axis::Width, w)] {
        for i in 1..=floor_log2(dim) {
            shifts.push(ScaffoldShift {
                axis,
                offset: 1 << i,
                gated: true,
            });
        }
    }
    Ok(ScaffoldSpec { shifts })
}

/// Neighbor aggregation steps per node: `2 + floor(log2 h) + floor(log2 w)`.
pub fn shift_count(h: usize, w: usize) -> usize {
    2 + floor_log2(h) + floor_log2(w)
}

/// Elementwise gate over a non-negative distance map.
pub fn gate_map(d: &Tensor4, params: &GatingParams, kind: GateKind) -> Result<Tensor4> {
    if let Some(&neg) = d.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::NegativeDistance(neg));
    }
    let t_eff = params.effective_temperature();
    let out = d.data().iter().map(|&v| gate_value(kind, v, t_eff)).collect();
    Tensor4::from_vec(d.shape(), out)
}

/// Per-pixel channel distance between `x` and `x_shifted`, shape `(n, 1, h, w)`.
pub fn distance_map(x: &Tensor4, x_shifted: &Tensor4, kind: DistanceKind) -> Result<Tensor4> {
    let s = x.shape();
    if s != x_shifted.shape() {
        return Err(Error::ShapeMismatch {
            op: "distance_map",
            lhs: s,
            rhs: x_shifted.shape(),
        });
    }
    let (a, b) = (x.data(), x_shifted.data());
    Tensor4::from_fn(s.with_channels(1), |n, _, h, w| {
        let acc: f64 = (0..s.c)
            .map(|c| {
                let i = s.index(n, c, h, w);
                let d = a[i] - b[i];
                match kind {
                    DistanceKind::L1 => libm::fabs(d),
                    DistanceKind::L2 => d * d,
                }
            })
            .sum();
        match kind {
            DistanceKind::L1 => acc,
            DistanceKind::L2 => libm::sqrt(acc),
        }
    })
}

pub fn l1_distance_map(x: &Tensor4, x_shifted: &Tensor4) -> Result<Tensor4> {
    distance_map(x, x_shifted, DistanceKind::L1)
}

/// Max-relative aggregation over the scaffold, recorded on the tape.
///
/// `temperature` is a `(1, 1, 1, 1)` variable. Starting from zeros, each local
/// shift folds in `roll(x) - x` and each gated shift folds in
/// `gate(dist(x, roll(x))) * (roll(x) - x)` with one gate per spatial position,
/// broadcast over channels.
pub fn agc_aggregate_taped(
    tape: &mut Tape,
    x: Var,
    cfg: &AgcConfig,
    temperature: Var,
    eps: f64,
) -> Result<Var> {
    let s = tape.shape(x);
    let spec = scaffold_shifts(s.h, s.w, cfg.k)?;
    let mut acc = tape.constant(Tensor4::zeros(s)?);
    for shift in &spec.shifts {
        let neighbor = tape.roll(x, -(shift.offset as isize), shift.axis);
        let diff = tape.sub(neighbor, x)?;
        let message = if shift.gated {
            let dist = tape.channel_distance(diff, cfg.distance);
            let gate = tape.gate(dist, temperature, eps, cfg.gate)?;
            tape.mul(gate, diff)?
        } else {
            diff
        };
        acc = tape.max(acc, message)?;
    }
    Ok(acc)
}

/// Untaped [`agc_aggregate_taped`].
pub fn agc_aggregate(x: &Tensor4, cfg: &AgcConfig, params: &GatingParams) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let t = tape.constant(Tensor4::scalar(params.temperature));
    let out = agc_aggregate_taped(&mut tape, xv, cfg, t, params.eps())?;
    Ok(tape.value(out).clone())
}

/// `dg/dT = g * d / t_eff^2` for the exponential gate.
pub fn temperature_grad_closed_form(g: f64, d: f64, t_eff: f64) -> Result<f64> {
    if !(t_eff > 0.0) {
        return Err(Error::NonPositiveTemperature(t_eff));
    }
    if d < 0.0 {
        return Err(Error::NegativeDistance(d));
    }
    Ok(g * d / (t_eff * t_eff))
}

/// Aggregation, channel concat with the input, then a projecting conv block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgcMixer {
    pub cfg: AgcConfig,
    pub temperature: ParamId,
    pub eps: f64,
    pub proj: ConvBlock,
}

impl AgcMixer {
    pub fn declare(layout: &mut Layout, name: &str, channels: usize, cfg: AgcConfig) -> Self {
        let temperature = layout.add(
            format!("{name}.temperature"),
            Shape::scalar(),
            Init::Const(INITIAL_TEMPERATURE),
        );
        let proj = ConvBlock::declare(layout, &format!("{name}.proj"), 2 * channels, channels, 1, 1, 1, true);
        AgcMixer {
            cfg,
            temperature,
            eps: GATE_EPS,
            proj,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        agc_forward(tape, x, &self.cfg, p[self.temperature], self.eps, &self.proj, p)
    }
}

/// `ConvBlock(concat(x, aggregate(x)))`; output shape equals input shape.
pub fn agc_forward(
    tape: &mut Tape,
    x: Var,
    cfg: &AgcConfig,
    temperature: Var,
    eps: f64,
    proj: &ConvBlock,
    p: &Bound,
) -> Result<Var> {
    let xj = agc_aggregate_taped(tape, x, cfg, temperature, eps)?;
    let cat = tape.concat_channels(x, xj)?;
    let out = proj.forward(tape, p, cat)?;
    let (si, so) = (tape.shape(x), tape.shape(out));
    if si != so {
        return Err(Error::ChannelMismatch {
            op: "agc_forward",
            detail: format!("projection maps {} to {}", si, so),
        });
    }
    Ok(out)
}

/// Gate strength between a reference pixel and every pixel of sample 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.w + col]
    }
}

/// `exp(-||x[:, ref] - x[:, (i, j)]||_1 / (|T| + eps))` over the grid.
pub fn gate_heatmap(x: &Tensor4, reference: (usize, usize), params: &GatingParams) -> Result<Heatmap> {
    let s = x.shape();
    let (row, col) = reference;
    if row >= s.h || col >= s.w {
        return Err(Error::OutOfBounds {
            row,
            col,
            h: s.h,
            w: s.w,
        });
    }
    let t_eff = params.effective_temperature();
    let mut values = Vec::with_capacity(s.h * s.w);
    for i in 0..s.h {
        for j in 0..s.w {
            let d: f64 = (0..s.c)
                .map(|c| libm::fabs(x.get(0, c, row, col) - x.get(0, c, i, j)))
                .sum();
            values.push(gate_value(GateKind::ExpDecay, d, t_eff));
        }
    }
    Ok(Heatmap { h: s.h, w: s.w, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn scaffold_counts() {
        let s = scaffold_shifts(14, 14, 2).unwrap();
        assert_eq!(s.len(), 8);
        let gated: Vec<usize> = s.shifts.iter().filter(|x| x.gated && x.axis == Axis::Height).map(|x| x.offset).collect();
        assert_eq!(gated, vec![2, 4, 8]);
        assert_eq!(scaffold_shifts(7, 7, 2).unwrap().len(), 6);
        let tiny = scaffold_shifts(2, 2, 1).unwrap();
        assert_eq!(tiny.len(), 4);
        assert!(tiny.shifts.iter().filter(|s| s.gated).all(|s| s.offset == 2));
    }

    #[test]
    fn scaffold_order_and_disjointness() {
        let s = scaffold_shifts(8, 16, 3).unwrap();
        assert_eq!(s.shifts[0], ScaffoldShift { axis: Axis::Height, offset: 3, gated: false });
        assert_eq!(s.shifts[1], ScaffoldShift { axis: Axis::Width, offset: 3, gated: false });
        assert!(s.shifts[2..].iter().all(|x| x.gated));
        assert_eq!(s.shifts.iter().filter(|x| !x.gated).count(), 2);
        assert_eq!(s.len(), 2 + 3 + 4);
    }

    #[test]
    fn scaffold_rejects_bad_k() {
        assert!(scaffold_shifts(8, 8, 0).is_err());
        assert!(scaffold_shifts(8, 4, 4).is_err());
    }

    #[test]
    fn gate_closed_forms() {
        let d = Tensor4::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 1.0, 2.0]).unwrap();
        let tiny = 1e-300;
        let g1 = gate_map(&d, &GatingParams::with_eps(1.0, tiny), GateKind::ExpDecay).unwrap();
        assert_eq!(g1.data()[0], 1.0);
        assert!((g1.data()[1] - 0.367_879_441_171_442_3).abs() < 1e-15);
        let g2 = gate_map(&d, &GatingParams::with_eps(0.5, tiny), GateKind::ExpDecay).unwrap();
        assert!((g2.data()[2] - 0.018_315_638_888_734_18).abs() < 1e-15);
        let neg = Tensor4::scalar(-1.0);
        assert!(gate_map(&neg, &GatingParams::default(), GateKind::ExpDecay).is_err());
    }

    #[test]
    fn sigmoid_gate_is_one_at_zero() {
        let d = Tensor4::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 0.5, 3.0]).unwrap();
        let g = gate_map(&d, &GatingParams::default(), GateKind::Sigmoid).unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert!(g.data()[0] > g.data()[1] && g.data()[1] > g.data()[2] && g.data()[2] > 0.0);
    }

    #[test]
    fn distances() {
        let x = Tensor4::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let y = Tensor4::from_vec(Shape::new(1, 2, 1, 1), vec![3.0, 1.0]).unwrap();
        assert_eq!(l1_distance_map(&x, &y).unwrap().data(), &[3.0]);
        assert_eq!(l1_distance_map(&x, &x).unwrap().data(), &[0.0]);
        let l2 = distance_map(&x, &y, DistanceKind::L2).unwrap();
        assert!((l2.data()[0] - libm::sqrt(5.0)).abs() < 1e-15);
        let z = Tensor4::zeros(Shape::new(1, 3, 1, 1)).unwrap();
        assert!(l1_distance_map(&x, &z).is_err());
    }

    #[test]
    fn closed_form_temperature_grad() {
        let g = libm::exp(-2.0);
        let v = temperature_grad_closed_form(g, 2.0, 1.0).unwrap();
        assert!((v - 0.270_670_566_473_225_4).abs() < 1e-12);
        assert_eq!(temperature_grad_closed_form(1.0, 0.0, 3.0).unwrap(), 0.0);
        assert!(temperature_grad_closed_form(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn constant_input_aggregates_to_zero() {
        let x = Tensor4::full(Shape::new(2, 3, 8, 8), 0.7).unwrap();
        let out = agc_aggregate(&x, &AgcConfig::new(2), &GatingParams::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_two_regions() {
        let x = Tensor4::from_fn(Shape::new(1, 2, 6, 6), |_, _, h, w| if h < 3 && w < 3 { 1.5 } else { 0.2 })
            .unwrap();
        let hm = gate_heatmap(&x, (4, 4), &GatingParams::default()).unwrap();
        assert_eq!(hm.get(4, 4), 1.0);
        let mut levels: Vec<f64> = hm.values.clone();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        assert_eq!(levels.len(), 2);
        assert!(gate_heatmap(&x, (6, 0), &GatingParams::default()).is_err());
    }
}
