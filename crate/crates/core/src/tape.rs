//! Reverse-mode differentiation over [`Tensor4`] values.
//!
//! Every primitive appends one node to the [`Tape`]; [`Tape::backward`]
//! replays the nodes in reverse order and accumulates adjoints into the
//! leaves that took part in the computation.
//!
//! A tape built with [`Tape::new_exact`] additionally carries every value in
//! double-double precision. Finite-difference checks evaluate through it so
//! their quotients are not swamped by `f64` roundoff.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::agc::{DistanceKind, GateKind};
use crate::dd::DoubleDouble;
use crate::error::{Error, Result};
use crate::kernels::{self, bcast_index, conv_out_dim, ConvGeometry, GELU_A, GELU_C};
use crate::tensor::{Axis, Shape, Tensor4};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    /// Pointwise maximum; ties route the gradient to the first operand.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum NormMode {
    /// Statistics over `(c, h, w)` of each sample.
    PerSampleAll,
    /// Statistics over channels at each spatial position.
    PerTokenChannel,
}

/// Epsilon inside the normalization variance.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Roll {
        x: usize,
        shift: isize,
        axis: Axis,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Exp {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    ChannelDistance {
        x: usize,
        kind: DistanceKind,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        groups: usize,
    },
    Normalize {
        x: usize,
        gain: Option<usize>,
        shift: Option<usize>,
        mode: NormMode,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ToTokens {
        x: usize,
    },
    FromTokens {
        x: usize,
    },
    Transpose {
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Softmax {
        x: usize,
    },
    AvgPool {
        x: usize,
    },
    Gate {
        d: usize,
        temperature: usize,
        eps: f64,
        kind: GateKind,
    },
    SumAll {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor4,
    /// Double-double value, present on exact tapes.
    exact: Option<Vec<DoubleDouble>>,
    op: Op,
    requires_grad: bool,
}

/// Summary of a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    /// Recorded operations whose adjoint was propagated.
    pub visited: usize,
}

/// Ordered record of executed primitives.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    gate_fault: Option<f64>,
    exact: bool,
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = libm::tanh(inner);
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Derivative of the gate with respect to `u = d / t_eff`.
fn gate_du(kind: GateKind, g: f64) -> f64 {
    match kind {
        GateKind::ExpDecay => -g,
        GateKind::Sigmoid => -g * (1.0 - 0.5 * g),
    }
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    if a == b {
        return Ok(a);
    }
    let same_spatial = a.n == b.n && a.h == b.h && a.w == b.w;
    if same_spatial && (a.c == 1 || b.c == 1) {
        return Ok(a.with_channels(a.c.max(b.c)));
    }
    Err(Error::ShapeMismatch { op, lhs: a, rhs: b })
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

fn hi_parts(v: &[DoubleDouble]) -> Vec<f64> {
    v.iter().map(|d| d.hi).collect()
}

fn lift_all(v: &[f64]) -> Vec<DoubleDouble> {
    v.iter().map(|&x| DoubleDouble::from_f64(x)).collect()
}

/// Runs a generic kernel body on `f64` inputs, or on the double-double inputs
/// of an exact tape, yielding `(f64 values, Option<exact values>)`.
macro_rules! dual {
    ($tape:ident, [$($v:ident => $d:ident),*], $body:expr) => {
        if $tape.exact {
            $(let $d = $tape.exact_data($v);)*
            let e = $body;
            (hi_parts(&e), Some(e))
        } else {
            $(let $d = $tape.value($v).data();)*
            ($body, None)
        }
    };
}

/// FNV-1a over branch decisions.
struct Fnv(u64);

impl Fnv {
    fn feed(&mut self, byte: u8) {
        self.0 ^= byte as u64;
        self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that evaluates every primitive in double-double as well.
    pub fn new_exact() -> Self {
        Tape {
            exact: true,
            ..Self::default()
        }
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, data: (Vec<f64>, Option<Vec<DoubleDouble>>), op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Tensor4::from_parts(shape, data.0),
            exact: data.1,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn exact_data(&self, v: Var) -> &[DoubleDouble] {
        self.node(v).exact.as_deref().expect("exact tape node without exact value")
    }

    fn input(&mut self, value: Tensor4, requires_grad: bool) -> Var {
        let exact = self.exact.then(|| lift_all(value.data()));
        let shape = value.shape();
        self.push(shape, (value.into_data(), exact), Op::Leaf, requires_grad)
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.input(value, true)
    }

    /// Registers an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.input(value, false)
    }

    /// Registers a constant given in double-double. On an `f64` tape only the
    /// rounded values are kept.
    pub fn constant_exact(&mut self, shape: Shape, values: Vec<DoubleDouble>) -> Result<Var> {
        if values.len() != shape.numel() {
            return Err(Error::Invalid(format!(
                "{} values for shape {shape}",
                values.len()
            )));
        }
        let rounded: Vec<f64> = values.iter().map(|d| d.to_f64()).collect();
        let exact = self.exact.then_some(values);
        Ok(self.push(shape, (rounded, exact), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.node(v).value
    }

    /// Double-double value of `v`; `None` unless the tape is exact.
    pub fn exact_value(&self, v: Var) -> Option<&[DoubleDouble]> {
        self.node(v).exact.as_deref()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).value.shape()
    }

    /// Gradient stored on a leaf by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad()
    }

    /// Test hook: scales every temperature adjoint produced by gate nodes.
    #[doc(hidden)]
    pub fn inject_gate_fault(&mut self, factor: f64) {
        self.gate_fault = Some(factor);
    }

    /// Hash of every branch taken by non-smooth primitives: each `max`
    /// comparison, each sign inside an L1 distance and the temperature sign in
    /// gates. Two evaluations of the same graph with equal signatures lie on the
    /// same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = Fnv(0xcbf2_9ce4_8422_2325);
        for node in &self.nodes {
            match node.op {
                Op::Binary {
                    kind: BinaryKind::Max,
                    a,
                    b,
                } => {
                    let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                    let so = node.value.shape();
                    for n in 0..so.n {
                        for c in 0..so.c {
                            for y in 0..so.h {
                                for x in 0..so.w {
                                    let (i, j) = (bcast_index(sa, n, c, y, x), bcast_index(sb, n, c, y, x));
                                    h.feed(self.compare(a, i, b, j) as u8);
                                }
                            }
                        }
                    }
                }
                Op::ChannelDistance {
                    x,
                    kind: DistanceKind::L1,
                } => {
                    for i in 0..self.nodes[x].value.numel() {
                        h.feed(self.sign_at(x, i));
                    }
                }
                Op::Gate { temperature, .. } => h.feed(self.sign_at(temperature, 0)),
                _ => {}
            }
        }
        h.0
    }

    fn compare(&self, a: usize, i: usize, b: usize, j: usize) -> bool {
        match (&self.nodes[a].exact, &self.nodes[b].exact) {
            (Some(ea), Some(eb)) => ea[i] >= eb[j],
            _ => self.nodes[a].value.data()[i] >= self.nodes[b].value.data()[j],
        }
    }

    fn sign_at(&self, x: usize, i: usize) -> u8 {
        let v = match &self.nodes[x].exact {
            Some(e) => e[i].hi,
            None => self.nodes[x].value.data()[i],
        };
        sign(v) as i8 as u8
    }

    pub fn roll(&mut self, x: Var, shift: isize, axis: Axis) -> Var {
        let s = self.shape(x);
        let out = dual!(self, [x => xd], kernels::roll(s, xd, shift, axis));
        let rg = self.needs(&[x]);
        self.push(s, out, Op::Roll { x: x.0, shift, axis }, rg)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Max => "max",
        };
        let so = broadcast_shape(name, sa, sb)?;
        let out = dual!(self, [a => da, b => db], kernels::binary(kind, sa, da, sb, db, so));
        let rg = self.needs(&[a, b]);
        Ok(self.push(so, out, Op::Binary { kind, a: a.0, b: b.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let s = self.shape(x);
        let out = dual!(self, [x => xd], kernels::scale(xd, factor));
        let rg = self.needs(&[x]);
        self.push(s, out, Op::Scale { x: x.0, factor }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = dual!(self, [x => xd], kernels::map(xd, kernels::Real::exp));
        let rg = self.needs(&[x]);
        self.push(s, out, Op::Exp { x: x.0 }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = dual!(self, [x => xd], kernels::map(xd, kernels::gelu));
        let rg = self.needs(&[x]);
        self.push(s, out, Op::Gelu { x: x.0 }, rg)
    }

    /// Per-pixel channel norm, shape `(n, 1, h, w)`. `L1` is `sum_c |x|`,
    /// `L2` is `sqrt(sum_c x^2)`.
    pub fn channel_distance(&mut self, x: Var, kind: DistanceKind) -> Var {
        let s = self.shape(x);
        let out = dual!(self, [x => xd], kernels::channel_distance(s, xd, kind));
        let rg = self.needs(&[x]);
        self.push(s.with_channels(1), out, Op::ChannelDistance { x: x.0, kind }, rg)
    }

    /// `sum_c |x[n, c, h, w]|`.
    pub fn abs_sum_channels(&mut self, x: Var) -> Var {
        self.channel_distance(x, DistanceKind::L1)
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = dual!(self, [a => da, b => db], kernels::concat_channels(sa, da, sb, db));
        let rg = self.needs(&[a, b]);
        Ok(self.push(sa.with_channels(sa.c + sb.c), out, Op::Concat { a: a.0, b: b.0 }, rg))
    }

    /// Cross-correlation with `kernel/2` zero padding. `weight` has shape
    /// `(c_out, c_in / groups, k, k)` with odd `k`; `bias` is `(1, c_out, 1, 1)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        groups: usize,
    ) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(weight);
        let mismatch = |detail: alloc::string::String| Error::ChannelMismatch {
            op: "conv2d",
            detail,
        };
        if groups == 0 || sx.c % groups != 0 || sw.n % groups != 0 {
            return Err(mismatch(format!(
                "groups={groups} must divide c_in={} and c_out={}",
                sx.c, sw.n
            )));
        }
        if sw.c * groups != sx.c {
            return Err(mismatch(format!(
                "weight expects {} input channels per group, input has {} over {groups} groups",
                sw.c, sx.c
            )));
        }
        if sw.h != sw.w || sw.h % 2 == 0 || stride == 0 {
            return Err(mismatch(format!(
                "kernel {}x{} stride {stride} unsupported",
                sw.h, sw.w
            )));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != Shape::new(1, sw.n, 1, 1) {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: sb,
                    rhs: Shape::new(1, sw.n, 1, 1),
                });
            }
        }
        let k = sw.h;
        let so = Shape::new(sx.n, sw.n, conv_out_dim(sx.h, k, stride), conv_out_dim(sx.w, k, stride));
        let geo = ConvGeometry {
            sx,
            sw,
            so,
            stride,
            groups,
        };
        let out = if self.exact {
            let e = kernels::conv2d(&geo, self.exact_data(x), self.exact_data(weight), bias.map(|b| self.exact_data(b)));
            (hi_parts(&e), Some(e))
        } else {
            let bd = bias.map(|b| self.value(b).data());
            (kernels::conv2d(&geo, self.value(x).data(), self.value(weight).data(), bd), None)
        };
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            so,
            out,
            Op::Conv2d {
                x: x.0,
                weight: weight.0,
                bias: bias.map(|b| b.0),
                stride,
                groups,
            },
            rg,
        ))
    }

    /// Mean/variance normalization with optional per-channel affine
    /// (`gain`, `shift` of shape `(1, c, 1, 1)`). Uses the population variance.
    pub fn normalize(
        &mut self,
        x: Var,
        mode: NormMode,
        gain: Option<Var>,
        shift: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("normalize eps must be positive, got {eps}")));
        }
        let s = self.shape(x);
        for p in [gain, shift].into_iter().flatten() {
            let sp = self.shape(p);
            if sp != Shape::new(1, s.c, 1, 1) {
                return Err(Error::ShapeMismatch {
                    op: "normalize affine",
                    lhs: sp,
                    rhs: Shape::new(1, s.c, 1, 1),
                });
            }
        }
        let groups = norm_groups(s, mode);
        let (out, xhat, inv_std) = if self.exact {
            let r = kernels::normalize(
                s,
                self.exact_data(x),
                &groups,
                eps,
                gain.map(|g| self.exact_data(g)),
                shift.map(|b| self.exact_data(b)),
            );
            ((hi_parts(&r.out), Some(r.out)), hi_parts(&r.xhat), hi_parts(&r.inv_std))
        } else {
            let r = kernels::normalize(
                s,
                self.value(x).data(),
                &groups,
                eps,
                gain.map(|g| self.value(g).data()),
                shift.map(|b| self.value(b).data()),
            );
            ((r.out, None), r.xhat, r.inv_std)
        };
        let mut deps = vec![x];
        deps.extend(gain);
        deps.extend(shift);
        let rg = self.needs(&deps);
        Ok(self.push(
            s,
            out,
            Op::Normalize {
                x: x.0,
                gain: gain.map(|v| v.0),
                shift: shift.map(|v| v.0),
                mode,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `(n, c, h, w)` to a token matrix `(n, 1, h*w, c)`, row-major over `(h, w)`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = dual!(self, [x => xd], kernels::to_tokens(s, xd));
        let rg = self.needs(&[x]);
        self.push(Shape::new(s.n, 1, s.h * s.w, s.c), out, Op::ToTokens { x: x.0 }, rg)
    }

    /// Inverse of [`Tape::to_tokens`]: `(n, 1, h*w, c)` back to `(n, c, h, w)`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.c != 1 || s.h != h * w {
            return Err(Error::ShapeMismatch {
                op: "from_tokens",
                lhs: s,
                rhs: Shape::new(s.n, 1, h * w, s.w),
            });
        }
        let so = Shape::new(s.n, s.w, h, w);
        let out = dual!(self, [x => xd], kernels::from_tokens(s, so, xd));
        let rg = self.needs(&[x]);
        Ok(self.push(so, out, Op::FromTokens { x: x.0 }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = dual!(self, [x => xd], kernels::transpose(s, xd));
        let rg = self.needs(&[x]);
        self.push(Shape::new(s.n, s.c, s.w, s.h), out, Op::Transpose { x: x.0 }, rg)
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.c != sb.c || sa.w != sb.h {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let so = Shape::new(sa.n, sa.c, sa.h, sb.w);
        let out = dual!(self, [a => da, b => db], kernels::matmul(sa, da, sb, db, so));
        let rg = self.needs(&[a, b]);
        Ok(self.push(so, out, Op::MatMul { a: a.0, b: b.0 }, rg))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax_lastaxis(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = dual!(self, [x => xd], kernels::softmax(s, xd));
        let rg = self.needs(&[x]);
        self.push(s, out, Op::Softmax { x: x.0 }, rg)
    }

    /// Global average pool to `(n, c, 1, 1)`.
    pub fn avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = dual!(self, [x => xd], kernels::avg_pool(s, xd));
        let rg = self.needs(&[x]);
        self.push(Shape::new(s.n, s.c, 1, 1), out, Op::AvgPool { x: x.0 }, rg)
    }

    /// Gate map `g(d) ` at effective temperature `|T| + eps`; `temperature`
    /// must be a `(1, 1, 1, 1)` tensor and `d` non-negative.
    pub fn gate(&mut self, d: Var, temperature: Var, eps: f64, kind: GateKind) -> Result<Var> {
        let st = self.shape(temperature);
        if st != Shape::scalar() {
            return Err(Error::ShapeMismatch {
                op: "gate temperature",
                lhs: st,
                rhs: Shape::scalar(),
            });
        }
        let t_eff = libm::fabs(self.value(temperature).data()[0]) + eps;
        if !(t_eff > 0.0) {
            return Err(Error::NonPositiveTemperature(t_eff));
        }
        if let Some(&neg) = self.value(d).data().iter().find(|&&v| v < 0.0) {
            return Err(Error::NegativeDistance(neg));
        }
        let out = dual!(self, [d => dd, temperature => td], kernels::gate(kind, dd, td[0], eps));
        let rg = self.needs(&[d, temperature]);
        Ok(self.push(
            self.shape(d),
            out,
            Op::Gate {
                d: d.0,
                temperature: temperature.0,
                eps,
                kind,
            },
            rg,
        ))
    }

    /// Sum of every entry, as a `(1, 1, 1, 1)` scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = dual!(self, [x => xd], vec![kernels::sum_all(xd)]);
        let rg = self.needs(&[x]);
        self.push(Shape::scalar(), out, Op::SumAll { x: x.0 }, rg)
    }

    /// Mean softmax cross-entropy of logits `(n, classes, 1, 1)` against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.h != 1 || s.w != 1 || labels.len() != s.n {
            return Err(Error::Invalid(format!(
                "cross_entropy expects (n, classes, 1, 1) logits with n labels, got {s} and {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
            return Err(Error::Invalid(format!("label {bad} >= class count {}", s.c)));
        }
        let (out, probs) = if self.exact {
            let (loss, probs) = kernels::cross_entropy(s, self.exact_data(logits), labels);
            ((vec![loss.hi], Some(vec![loss])), hi_parts(&probs))
        } else {
            let (loss, probs) = kernels::cross_entropy(s, self.value(logits).data(), labels);
            ((vec![loss], None), probs)
        };
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Shape::scalar(),
            out,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates adjoints from the scalar `loss` back to every leaf that
    /// contributed to it, overwriting the leaves' gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.set_grad(g)?;
                continue;
            }
            visited += 1;
            self.propagate(i, &g, &mut adj);
        }
        Ok(BackwardStats { visited })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let so = node.value.shape();
        let rg = |j: usize| self.nodes[j].requires_grad;
        let len = |j: usize| self.nodes[j].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::Roll { x, shift, axis } => {
                if rg(*x) {
                    let back = Tensor4::from_parts(so, g.to_vec()).roll(-shift, *axis);
                    let dst = add_into(&mut adj[*x], len(*x));
                    for (d, v) in dst.iter_mut().zip(back.data()) {
                        *d += v;
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (da, db) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let mut ga = rg(*a).then(|| vec![0.0; sa.numel()]);
                let mut gb = rg(*b).then(|| vec![0.0; sb.numel()]);
                for n in 0..so.n {
                    for c in 0..so.c {
                        for h in 0..so.h {
                            for w in 0..so.w {
                                let up = g[so.index(n, c, h, w)];
                                let ia = bcast_index(sa, n, c, h, w);
                                let ib = bcast_index(sb, n, c, h, w);
                                let (x, y) = (da[ia], db[ib]);
                                let (dxa, dxb) = match kind {
                                    BinaryKind::Add => (up, up),
                                    BinaryKind::Sub => (up, -up),
                                    BinaryKind::Mul => (up * y, up * x),
                                    BinaryKind::Max => {
                                        if x >= y {
                                            (up, 0.0)
                                        } else {
                                            (0.0, up)
                                        }
                                    }
                                };
                                if let Some(ga) = ga.as_mut() {
                                    ga[ia] += dxa;
                                }
                                if let Some(gb) = gb.as_mut() {
                                    gb[ib] += dxb;
                                }
                            }
                        }
                    }
                }
                for (j, gj) in [(*a, ga), (*b, gb)] {
                    if let Some(gj) = gj {
                        let dst = add_into(&mut adj[j], gj.len());
                        for (d, v) in dst.iter_mut().zip(&gj) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if rg(*x) {
                    let dst = add_into(&mut adj[*x], len(*x));
                    for (d, v) in dst.iter_mut().zip(g) {
                        *d += v * factor;
                    }
                }
            }
            Op::Exp { x } => {
                if rg(*x) {
                    let y = node.value.data();
                    let dst = add_into(&mut adj[*x], len(*x));
                    for ((d, v), yv) in dst.iter_mut().zip(g).zip(y) {
                        *d += v * yv;
                    }
                }
            }
            Op::Gelu { x } => {
                if rg(*x) {
                    let xd = self.nodes[*x].value.data();
                    let dst = add_into(&mut adj[*x], len(*x));
                    for ((d, v), &xv) in dst.iter_mut().zip(g).zip(xd) {
                        *d += v * gelu_grad(xv);
                    }
                }
            }
            Op::ChannelDistance { x, kind } => {
                if rg(*x) {
                    let xt = &self.nodes[*x].value;
                    let sx = xt.shape();
                    let xd = xt.data();
                    let yd = node.value.data();
                    let dst = add_into(&mut adj[*x], len(*x));
                    for n in 0..sx.n {
                        for h in 0..sx.h {
                            for w in 0..sx.w {
                                let oi = so.index(n, 0, h, w);
                                let up = g[oi];
                                for c in 0..sx.c {
                                    let xi = sx.index(n, c, h, w);
                                    dst[xi] += match kind {
                                        DistanceKind::L1 => up * sign(xd[xi]),
                                        DistanceKind::L2 => {
                                            if yd[oi] > 0.0 {
                                                up * xd[xi] / yd[oi]
                                            } else {
                                                0.0
                                            }
                                        }
                                    };
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let plane = sa.h * sa.w;
                for n in 0..so.n {
                    let base = n * so.c * plane;
                    if rg(*a) {
                        let dst = add_into(&mut adj[*a], sa.numel());
                        let off = n * sa.c * plane;
                        for k in 0..sa.c * plane {
                            dst[off + k] += g[base + k];
                        }
                    }
                    if rg(*b) {
                        let dst = add_into(&mut adj[*b], sb.numel());
                        let off = n * sb.c * plane;
                        for k in 0..sb.c * plane {
                            dst[off + k] += g[base + sa.c * plane + k];
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                groups,
            } => self.conv2d_backward(so, g, *x, *weight, *bias, *stride, *groups, adj),
            Op::Normalize {
                x,
                gain,
                shift,
                mode,
                xhat,
                inv_std,
            } => {
                let plane = so.h * so.w;
                let gd = gain.map(|j| self.nodes[j].value.data());
                if let Some(j) = shift.filter(|&j| rg(j)) {
                    let dst = add_into(&mut adj[j], so.c);
                    for (k, v) in g.iter().enumerate() {
                        dst[(k / plane) % so.c] += v;
                    }
                }
                if let Some(j) = gain.filter(|&j| rg(j)) {
                    let dst = add_into(&mut adj[j], so.c);
                    for (k, v) in g.iter().enumerate() {
                        dst[(k / plane) % so.c] += v * xhat[k];
                    }
                }
                if rg(*x) {
                    let groups = norm_groups(so, *mode);
                    let dst = add_into(&mut adj[*x], so.numel());
                    for (idx, &inv) in groups.iter().zip(inv_std) {
                        let m = idx.len() as f64;
                        let dxhat = |k: usize| g[k] * gd.map_or(1.0, |gg| gg[(k / plane) % so.c]);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for &k in idx {
                            let d = dxhat(k);
                            sum_d += d;
                            sum_dx += d * xhat[k];
                        }
                        for &k in idx {
                            dst[k] += inv / m * (m * dxhat(k) - sum_d - xhat[k] * sum_dx);
                        }
                    }
                }
            }
            Op::ToTokens { x } => {
                if rg(*x) {
                    let sx = self.nodes[*x].value.shape();
                    let dst = add_into(&mut adj[*x], sx.numel());
                    for n in 0..sx.n {
                        for c in 0..sx.c {
                            for t in 0..sx.h * sx.w {
                                dst[sx.index(n, c, t / sx.w, t % sx.w)] += g[so.index(n, 0, t, c)];
                            }
                        }
                    }
                }
            }
            Op::FromTokens { x } => {
                if rg(*x) {
                    let sx = self.nodes[*x].value.shape();
                    let dst = add_into(&mut adj[*x], sx.numel());
                    for n in 0..so.n {
                        for c in 0..so.c {
                            for t in 0..so.h * so.w {
                                dst[sx.index(n, 0, t, c)] += g[so.index(n, c, t / so.w, t % so.w)];
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                if rg(*x) {
                    let sx = self.nodes[*x].value.shape();
                    let dst = add_into(&mut adj[*x], sx.numel());
                    for n in 0..sx.n {
                        for c in 0..sx.c {
                            for i in 0..sx.h {
                                for j in 0..sx.w {
                                    dst[sx.index(n, c, i, j)] += g[so.index(n, c, j, i)];
                                }
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (sa, sb) = (ta.shape(), tb.shape());
                let (da, db) = (ta.data(), tb.data());
                if rg(*a) {
                    let dst = add_into(&mut adj[*a], sa.numel());
                    for n in 0..sa.n {
                        for c in 0..sa.c {
                            for i in 0..sa.h {
                                for k in 0..sa.w {
                                    let mut acc = 0.0;
                                    for j in 0..sb.w {
                                        acc += g[so.index(n, c, i, j)] * db[sb.index(n, c, k, j)];
                                    }
                                    dst[sa.index(n, c, i, k)] += acc;
                                }
                            }
                        }
                    }
                }
                if rg(*b) {
                    let dst = add_into(&mut adj[*b], sb.numel());
                    for n in 0..sa.n {
                        for c in 0..sa.c {
                            for i in 0..sa.h {
                                for k in 0..sa.w {
                                    let av = da[sa.index(n, c, i, k)];
                                    for j in 0..sb.w {
                                        dst[sb.index(n, c, k, j)] += av * g[so.index(n, c, i, j)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if rg(*x) {
                    let y = node.value.data();
                    let dst = add_into(&mut adj[*x], so.numel());
                    for ((dr, gr), yr) in dst.chunks_mut(so.w).zip(g.chunks(so.w)).zip(y.chunks(so.w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::AvgPool { x } => {
                if rg(*x) {
                    let sx = self.nodes[*x].value.shape();
                    let plane = sx.h * sx.w;
                    let dst = add_into(&mut adj[*x], sx.numel());
                    for (k, d) in dst.iter_mut().enumerate() {
                        *d += g[k / plane] / plane as f64;
                    }
                }
            }
            Op::Gate {
                d,
                temperature,
                eps,
                kind,
            } => {
                let tv = self.nodes[*temperature].value.data()[0];
                let t_eff = libm::fabs(tv) + eps;
                let dd = self.nodes[*d].value.data();
                let gv = node.value.data();
                if rg(*d) {
                    let dst = add_into(&mut adj[*d], dd.len());
                    for k in 0..dd.len() {
                        dst[k] += g[k] * gate_du(*kind, gv[k]) / t_eff;
                    }
                }
                if rg(*temperature) {
                    // u = d / t_eff, du/dT = -d / t_eff^2 * sign(T)
                    let mut acc = 0.0;
                    for k in 0..dd.len() {
                        acc += g[k] * gate_du(*kind, gv[k]) * (-dd[k] / (t_eff * t_eff));
                    }
                    acc *= sign(tv);
                    if let Some(f) = self.gate_fault {
                        acc *= f;
                    }
                    add_into(&mut adj[*temperature], 1)[0] += acc;
                }
            }
            Op::SumAll { x } => {
                if rg(*x) {
                    let dst = add_into(&mut adj[*x], len(*x));
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if rg(*logits) {
                    let s = self.nodes[*logits].value.shape();
                    let scale = g[0] / s.n as f64;
                    let dst = add_into(&mut adj[*logits], s.numel());
                    for (n, &label) in labels.iter().enumerate() {
                        for c in 0..s.c {
                            let k = n * s.c + c;
                            let target = if c == label { 1.0 } else { 0.0 };
                            dst[k] += scale * (probs[k] - target);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        so: Shape,
        g: &[f64],
        x: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        groups: usize,
        adj: &mut [Option<Vec<f64>>],
    ) {
        let xt = &self.nodes[x].value;
        let wt = &self.nodes[weight].value;
        let (sx, sw) = (xt.shape(), wt.shape());
        let (xd, wd) = (xt.data(), wt.data());
        let k = sw.h;
        let pad = (k / 2) as isize;
        let cin_g = sw.c;
        let cout_g = sw.n / groups;
        let need_x = self.nodes[x].requires_grad;
        let need_w = self.nodes[weight].requires_grad;
        let mut gx = need_x.then(|| vec![0.0; sx.numel()]);
        let mut gw = need_w.then(|| vec![0.0; sw.numel()]);
        for n in 0..sx.n {
            for o in 0..sw.n {
                let grp = o / cout_g;
                for oy in 0..so.h {
                    for ox in 0..so.w {
                        let up = g[so.index(n, o, oy, ox)];
                        if up == 0.0 {
                            continue;
                        }
                        for ci in 0..cin_g {
                            let cin = grp * cin_g + ci;
                            for ky in 0..k {
                                let iy = (oy * stride) as isize + ky as isize - pad;
                                if iy < 0 || iy >= sx.h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride) as isize + kx as isize - pad;
                                    if ix < 0 || ix >= sx.w as isize {
                                        continue;
                                    }
                                    let xi = sx.index(n, cin, iy as usize, ix as usize);
                                    let wi = sw.index(o, ci, ky, kx);
                                    if let Some(gx) = gx.as_mut() {
                                        gx[xi] += up * wd[wi];
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        gw[wi] += up * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for (j, gj) in [(x, gx), (weight, gw)] {
            if let Some(gj) = gj {
                let dst = add_into(&mut adj[j], gj.len());
                for (d, v) in dst.iter_mut().zip(&gj) {
                    *d += v;
                }
            }
        }
        if let Some(b) = bias.filter(|&b| self.nodes[b].requires_grad) {
            let dst = add_into(&mut adj[b], sw.n);
            let plane = so.h * so.w;
            for (kk, v) in g.iter().enumerate() {
                dst[(kk / plane) % so.c] += v;
            }
        }
    }
}

/// Flat indices of each normalization group.
fn norm_groups(s: Shape, mode: NormMode) -> Vec<Vec<usize>> {
    match mode {
        NormMode::PerSampleAll => (0..s.n)
            .map(|n| {
                let span = s.c * s.h * s.w;
                (n * span..(n + 1) * span).collect()
            })
            .collect(),
        NormMode::PerTokenChannel => {
            let mut groups = Vec::with_capacity(s.n * s.h * s.w);
            for n in 0..s.n {
                for h in 0..s.h {
                    for w in 0..s.w {
                        groups.push((0..s.c).map(|c| s.index(n, c, h, w)).collect());
                    }
                }
            }
            groups
        }
    }
}
