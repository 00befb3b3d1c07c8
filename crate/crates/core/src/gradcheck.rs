//! Finite-difference verification of every taped primitive, every block and a
//! tiny end-to-end model, plus the closed-form temperature derivative.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agc::{temperature_grad_closed_form, AgcConfig, AgcMixer, DistanceKind, GateKind, GATE_EPS};
use crate::attention::AttentionMixer;
use crate::error::Result;
use crate::fd::{fd_check, relative_error, WorstCoordinate};
use crate::model::{
    Downsample, FeedForward, Head, InvertedResidual, MixerBlock, Model, ModelConfig, PositionalEncoding, StageConfig,
    Stem,
};
use crate::nn::{Bound, ConvBlock, Layout, ParamStore};
use crate::tape::{NormMode, Tape, Var, NORM_EPS};
use crate::tensor::{Axis, Shape, Tensor4};

pub const FD_EPS: f64 = 1e-6;
pub const COMPONENT_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-5;
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-10;
pub const CLOSED_FORM_PAIRS: usize = 100;

/// Weight scale for checked parameters, larger than the training init so
/// every path through a block carries signal.
pub const CHECK_WEIGHT_STD: f64 = 0.2;

/// Most coordinates a component may lose to kinks, as a fraction of all.
pub const MAX_KINK_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    /// Coordinates whose stencil crossed a max/abs branch and were not scored.
    pub kinks: usize,
    pub worst: Option<WorstCoordinate>,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance && self.kinks as f64 <= MAX_KINK_FRACTION * self.coordinates as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub components: Vec<ComponentResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentResult::passed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Scales every temperature adjoint; a negative control for the suite.
    pub gate_fault: Option<f64>,
    pub skip_model: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            gate_fault: None,
            skip_model: false,
        }
    }
}

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn random(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor4 {
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor4::from_parts(shape, data)
}

fn normal(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor4 {
    random(rng, shape, -1.0, 1.0)
}

struct Case {
    name: &'static str,
    tolerance: f64,
    inputs: Vec<Tensor4>,
    forward: Forward,
    /// Fixed random output weights, so every output entry reaches the loss.
    weights: Tensor4,
}

impl Case {
    /// `sum(r * out)`.
    fn loss(&self) -> impl Fn(&mut Tape, &[Var]) -> Result<Var> + '_ {
        move |t: &mut Tape, v: &[Var]| {
            let out = (self.forward)(t, v)?;
            let r = t.constant(self.weights.clone());
            let prod = t.mul(out, r)?;
            Ok(t.sum_all(prod))
        }
    }
}

fn unary(
    rng: &mut ChaCha8Rng,
    name: &'static str,
    shape: Shape,
    out_shape: Shape,
    op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> Case {
    let r = normal(rng, out_shape);
    Case {
        name,
        tolerance: COMPONENT_TOLERANCE,
        inputs: vec![normal(rng, shape)],
        weights: r,
        forward: Box::new(move |t, v| {
            op(t, v[0])
        }),
    }
}

fn primitive_cases(rng: &mut ChaCha8Rng, fault: Option<f64>) -> Vec<Case> {
    let s = Shape::new(2, 3, 4, 5);
    let mut cases = vec![
        unary(rng, "roll", s, s, |t, x| Ok(t.roll(x, -2, Axis::Height))),
        unary(rng, "scale", s, s, |t, x| Ok(t.scale(x, -1.7))),
        unary(rng, "exp", s, s, |t, x| Ok(t.exp(x))),
        unary(rng, "gelu", s, s, |t, x| Ok(t.gelu(x))),
        unary(rng, "channel_distance_l1", s, s.with_channels(1), |t, x| {
            Ok(t.channel_distance(x, DistanceKind::L1))
        }),
        unary(rng, "channel_distance_l2", s, s.with_channels(1), |t, x| {
            Ok(t.channel_distance(x, DistanceKind::L2))
        }),
        unary(rng, "avg_pool", s, Shape::new(2, 3, 1, 1), |t, x| Ok(t.avg_pool(x))),
        unary(rng, "tokens", s, s, |t, x| {
            let tok = t.to_tokens(x);
            let tr = t.transpose(tok);
            let back = t.transpose(tr);
            t.from_tokens(back, 4, 5)
        }),
        unary(rng, "softmax", Shape::new(2, 1, 4, 5), Shape::new(2, 1, 4, 5), |t, x| {
            Ok(t.softmax_lastaxis(x))
        }),
        unary(rng, "normalize_per_token", s, s, |t, x| {
            t.normalize(x, NormMode::PerTokenChannel, None, None, NORM_EPS)
        }),
    ];
    for (name, kind) in [
        ("add_broadcast", crate::tape::BinaryKind::Add),
        ("sub_broadcast", crate::tape::BinaryKind::Sub),
        ("mul_broadcast", crate::tape::BinaryKind::Mul),
        ("max", crate::tape::BinaryKind::Max),
    ] {
        let rhs = if kind == crate::tape::BinaryKind::Max { s } else { s.with_channels(1) };
        let r = normal(rng, s);
        cases.push(Case {
            name,
            tolerance: COMPONENT_TOLERANCE,
            inputs: vec![normal(rng, s), normal(rng, rhs)],
            weights: r,
            forward: Box::new(move |t, v| {
                t.binary(kind, v[0], v[1])
            }),
        });
    }
    let r = normal(rng, s.with_channels(5));
    cases.push(Case {
        name: "concat",
        tolerance: COMPONENT_TOLERANCE,
        inputs: vec![normal(rng, s), normal(rng, s.with_channels(2))],
        weights: r,
        forward: Box::new(move |t, v| {
            t.concat_channels(v[0], v[1])
        }),
    });
    for (name, groups, stride, co) in [("conv2d", 1, 1, 6), ("conv2d_stride2", 1, 2, 6), ("conv2d_depthwise", 4, 1, 4)] {
        let x = Shape::new(2, 4, 5, 5);
        let out_hw = (5 + 2 - 3) / stride + 1;
        let r = normal(rng, Shape::new(2, co, out_hw, out_hw));
        cases.push(Case {
            name,
            tolerance: COMPONENT_TOLERANCE,
            inputs: vec![
                normal(rng, x),
                normal(rng, Shape::new(co, 4 / groups, 3, 3)),
                normal(rng, Shape::new(1, co, 1, 1)),
            ],
            weights: r,
            forward: Box::new(move |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), stride, groups)
            }),
        });
    }
    let r = normal(rng, s);
    cases.push(Case {
        name: "normalize_per_sample",
        tolerance: COMPONENT_TOLERANCE,
        inputs: vec![normal(rng, s), normal(rng, Shape::new(1, 3, 1, 1)), normal(rng, Shape::new(1, 3, 1, 1))],
        weights: r,
        forward: Box::new(move |t, v| {
            t.normalize(v[0], NormMode::PerSampleAll, Some(v[1]), Some(v[2]), NORM_EPS)
        }),
    });
    let r = normal(rng, Shape::new(2, 1, 4, 5));
    cases.push(Case {
        name: "matmul",
        tolerance: COMPONENT_TOLERANCE,
        inputs: vec![normal(rng, Shape::new(2, 1, 4, 3)), normal(rng, Shape::new(2, 1, 3, 5))],
        weights: r,
        forward: Box::new(move |t, v| {
            t.matmul(v[0], v[1])
        }),
    });
    for (name, kind) in [("gate_exp", GateKind::ExpDecay), ("gate_sigmoid", GateKind::Sigmoid)] {
        let d = random(rng, Shape::new(2, 1, 4, 5), 0.05, 3.0);
        let r = normal(rng, d.shape());
        cases.push(Case {
            name,
            tolerance: COMPONENT_TOLERANCE,
            inputs: vec![d, Tensor4::scalar(rng.random_range(0.3..2.0))],
            weights: r,
            forward: Box::new(move |t, v| {
                if let Some(f) = fault {
                    t.inject_gate_fault(f);
                }
                t.gate(v[0], v[1], GATE_EPS, kind)
            }),
        });
    }
    cases.push(Case {
        name: "cross_entropy",
        tolerance: COMPONENT_TOLERANCE,
        inputs: vec![normal(rng, Shape::new(3, 4, 1, 1))],
        weights: Tensor4::scalar(1.0),
        forward: Box::new(|t, v| t.cross_entropy(v[0], &[0, 3, 1])),
    });
    cases
}

/// Block check: input `x` plus every parameter of `layout` are differentiated.
fn block_case(
    rng: &mut ChaCha8Rng,
    name: &'static str,
    tolerance: f64,
    layout: &Layout,
    x_shape: Shape,
    out_shape: Shape,
    fault: Option<f64>,
    forward: impl Fn(&mut Tape, &Bound, Var) -> Result<Var> + 'static,
) -> Case {
    let params = ParamStore::init_scaled(layout, rng.random(), CHECK_WEIGHT_STD);
    let mut inputs = vec![normal(rng, x_shape)];
    inputs.extend(params.values().iter().cloned());
    let r = normal(rng, out_shape);
    Case {
        name,
        tolerance,
        inputs,
        weights: r,
        forward: Box::new(move |t, v| {
            if let Some(f) = fault {
                t.inject_gate_fault(f);
            }
            let p = Bound::from_vars(v[1..].to_vec());
            forward(t, &p, v[0])
        }),
    }
}

fn block_cases(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Vec<Case> {
    let fault = opts.gate_fault;
    let x = Shape::new(2, 4, 6, 6);
    let mut cases = Vec::new();

    let mut l = Layout::new();
    let stem = Stem::declare(&mut l, "stem", 3, 4);
    cases.push(block_case(rng, "stem", COMPONENT_TOLERANCE, &l, Shape::new(2, 3, 8, 8), Shape::new(2, 4, 2, 2), fault, move |t, p, x| {
        stem.forward(t, p, x)
    }));

    let mut l = Layout::new();
    let cb = ConvBlock::declare(&mut l, "cb", 4, 5, 3, 1, 1, true);
    cases.push(block_case(rng, "conv_block", COMPONENT_TOLERANCE, &l, x, x.with_channels(5), fault, move |t, p, x| {
        cb.forward(t, p, x)
    }));

    let mut l = Layout::new();
    let irb = InvertedResidual::declare(&mut l, "irb", 4, 4, 2.0);
    cases.push(block_case(rng, "irb", COMPONENT_TOLERANCE, &l, x, x, fault, move |t, p, x| irb.forward(t, p, x)));

    let mut l = Layout::new();
    let cpe = PositionalEncoding::declare(&mut l, "cpe", 4);
    cases.push(block_case(rng, "cpe", COMPONENT_TOLERANCE, &l, x, x, fault, move |t, p, x| cpe.forward(t, p, x)));

    let mut l = Layout::new();
    let ffn = FeedForward::declare(&mut l, "ffn", 4, 2.0);
    cases.push(block_case(rng, "ffn", COMPONENT_TOLERANCE, &l, x, x, fault, move |t, p, x| ffn.forward(t, p, x)));

    for (name, gate, distance) in [
        ("agc_mixer", GateKind::ExpDecay, DistanceKind::L1),
        ("agc_mixer_sigmoid_l2", GateKind::Sigmoid, DistanceKind::L2),
    ] {
        let mut l = Layout::new();
        let cfg = AgcConfig { k: 1, gate, distance };
        let m = AgcMixer::declare(&mut l, "agc", 4, cfg);
        cases.push(block_case(rng, name, COMPONENT_TOLERANCE, &l, x, x, fault, move |t, p, x| m.forward(t, p, x)));
    }

    let mut l = Layout::new();
    let b = MixerBlock::declare_agc(&mut l, "block", 4, AgcConfig::new(2), 2.0);
    cases.push(block_case(rng, "agc_block", COMPONENT_TOLERANCE, &l, x, x, fault, move |t, p, x| b.forward(t, p, x)));

    let small = Shape::new(2, 4, 3, 3);
    let mut l = Layout::new();
    let a = AttentionMixer::declare(&mut l, "attn", 4);
    cases.push(block_case(rng, "attention_mixer", COMPONENT_TOLERANCE, &l, small, small, fault, move |t, p, x| {
        a.forward(t, p, x)
    }));

    let mut l = Layout::new();
    let b = MixerBlock::declare_attention(&mut l, "block", 4, 2.0);
    cases.push(block_case(rng, "attention_block", COMPONENT_TOLERANCE, &l, small, small, fault, move |t, p, x| {
        b.forward(t, p, x)
    }));

    let mut l = Layout::new();
    let d = Downsample::declare(&mut l, "down", 4, 6);
    cases.push(block_case(rng, "downsample", COMPONENT_TOLERANCE, &l, x, Shape::new(2, 6, 3, 3), fault, move |t, p, x| {
        d.forward(t, p, x)
    }));

    let mut l = Layout::new();
    let h = Head::declare(&mut l, "head", 4, 3);
    cases.push(block_case(rng, "head", COMPONENT_TOLERANCE, &l, x, Shape::new(2, 3, 1, 1), fault, move |t, p, x| {
        h.forward(t, p, x)
    }));

    cases
}

/// Smallest full model that keeps every stage non-degenerate: 40x40 inputs
/// give stage grids 10, 5, 3 and 2.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy([4, 4, 4, 4], 3);
    cfg.stem_channels = 4;
    cfg.stages = vec![
        StageConfig::agc(1, 1, 4, 2),
        StageConfig::agc(0, 1, 4, 2),
        StageConfig::agc(0, 1, 4, 1),
        StageConfig::attention(0, 1, 4),
    ];
    cfg.ffn_ratio = 2.0;
    cfg.irb_expansion = 2.0;
    cfg
}

pub const TINY_MODEL_INPUT: (usize, usize) = (40, 40);

fn model_case(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<Case> {
    let fault = opts.gate_fault;
    let model = Model::new(tiny_model_config())?;
    let (h, w) = TINY_MODEL_INPUT;
    let params = ParamStore::init_scaled(model.layout(), rng.random(), CHECK_WEIGHT_STD);
    let image = normal(rng, Shape::new(1, 3, h, w));
    let weights = normal(rng, Shape::new(1, model.config().num_classes, 1, 1));
    Ok(Case {
        name: "tiny_model",
        tolerance: MODEL_TOLERANCE,
        inputs: params.values().to_vec(),
        weights,
        forward: Box::new(move |t, v| {
            if let Some(f) = fault {
                t.inject_gate_fault(f);
            }
            let p = Bound::from_vars(v.to_vec());
            let x = t.constant(image.clone());
            model.forward(t, &p, x)
        }),
    })
}

/// Taped `dg/dT` of the exponential gate against `g d / t_eff^2` over random
/// `(d, T)` pairs; returns the worst relative error.
pub fn closed_form_temperature_check(seed: u64, pairs: usize, fault: Option<f64>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let d = rng.random_range(0.0..5.0);
        let temp = rng.random_range(0.05..4.0);
        let mut tape = Tape::new();
        if let Some(f) = fault {
            tape.inject_gate_fault(f);
        }
        let dv = tape.constant(Tensor4::scalar(d));
        let tv = tape.leaf(Tensor4::scalar(temp));
        let g = tape.gate(dv, tv, GATE_EPS, GateKind::ExpDecay)?;
        tape.backward(g)?;
        let taped = tape.grad(tv).map_or(0.0, |g| g[0]);
        let t_eff = temp + GATE_EPS;
        let expected = temperature_grad_closed_form(tape.value(g).data()[0], d, t_eff)?;
        worst = worst.max(relative_error(taped, expected));
    }
    Ok(worst)
}

/// Runs every check; each component reports its worst relative error.
pub fn run_suite(options: SuiteOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut cases = primitive_cases(&mut rng, options.gate_fault);
    cases.extend(block_cases(&mut rng, &options));
    if !options.skip_model {
        cases.push(model_case(&mut rng, &options)?);
    }
    let mut components = Vec::with_capacity(cases.len() + 1);
    for case in cases {
        let report = fd_check(case.loss(), &case.inputs, FD_EPS)?;
        components.push(ComponentResult {
            name: case.name.into(),
            max_relative_error: report.max_relative_error(),
            tolerance: case.tolerance,
            coordinates: report.coordinates,
            kinks: report.kinks,
            worst: report.worst,
        });
    }
    components.push(ComponentResult {
        name: "temperature_closed_form".into(),
        max_relative_error: closed_form_temperature_check(options.seed, CLOSED_FORM_PAIRS, options.gate_fault)?,
        tolerance: CLOSED_FORM_TOLERANCE,
        coordinates: CLOSED_FORM_PAIRS,
        kinks: 0,
        worst: None,
    });
    Ok(SuiteReport { components })
}
