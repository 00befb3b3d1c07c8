//! Parameter storage and the convolutional building blocks shared by every mixer.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tape::{NormMode, Tape, Var, NORM_EPS};
use crate::tensor::{Shape, Tensor4};

/// Standard deviation of the truncated-normal weight initializer.
pub const WEIGHT_STD: f64 = 0.02;

/// Index of a learnable tensor in a [`Layout`] / [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal at the store's weight std, resampled beyond two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Ordered declaration of every learnable tensor, without storage.
#[derive(Debug, Clone, Default)]
pub struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Shape, init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.numel()).sum()
    }
}

/// Materialized parameter values for a [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor4>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if libm::fabs(z) <= 2.0 {
            return z * std;
        }
    }
}

impl ParamStore {
    /// Initializes with [`WEIGHT_STD`] for weights, deterministic per seed.
    pub fn init(layout: &Layout, seed: u64) -> Self {
        Self::init_scaled(layout, seed, WEIGHT_STD)
    }

    pub fn init_scaled(layout: &Layout, seed: u64, weight_std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = layout
            .specs
            .iter()
            .map(|s| {
                let numel = s.shape.numel();
                let data: Vec<f64> = match s.init {
                    Init::TruncNormal => (0..numel).map(|_| trunc_normal(&mut rng, weight_std)).collect(),
                    Init::Zeros => alloc::vec![0.0; numel],
                    Init::Ones => alloc::vec![1.0; numel],
                    Init::Const(v) => alloc::vec![v; numel],
                };
                Tensor4::from_parts(s.shape, data)
            })
            .collect();
        ParamStore {
            specs: layout.specs.clone(),
            values,
        }
    }

    /// Replaces the values, checking every shape.
    pub fn from_values(layout: &Layout, values: Vec<Tensor4>) -> Result<Self> {
        if values.len() != layout.specs.len() {
            return Err(crate::Error::Invalid(alloc::format!(
                "expected {} parameter tensors, got {}",
                layout.specs.len(),
                values.len()
            )));
        }
        for (s, v) in layout.specs.iter().zip(&values) {
            if s.shape != v.shape() {
                return Err(crate::Error::ShapeMismatch {
                    op: "parameter",
                    lhs: v.shape(),
                    rhs: s.shape,
                });
            }
        }
        Ok(ParamStore {
            specs: layout.specs.clone(),
            values,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor4] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor4] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor4 {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.values[id.0]
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor4::numel).sum()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone())).collect())
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }
}

/// Tape variables for each parameter of a layout, indexable by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// A convolution's weight and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub groups: usize,
}

impl Conv {
    /// Declares a `kernel x kernel` convolution. `groups == c_in` gives a depthwise conv.
    pub fn declare(
        layout: &mut Layout,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let weight = layout.add(
            alloc::format!("{name}.weight"),
            Shape::new(c_out, c_in / groups, kernel, kernel),
            Init::TruncNormal,
        );
        let bias = layout.add(alloc::format!("{name}.bias"), Shape::new(1, c_out, 1, 1), Init::Zeros);
        Conv {
            weight,
            bias,
            stride,
            groups,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.groups)
    }
}

/// Convolution, per-sample normalization, then optionally GELU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub conv: Conv,
    pub gain: ParamId,
    pub shift: ParamId,
    pub activation: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn declare(
        layout: &mut Layout,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        activation: bool,
    ) -> Self {
        let conv = Conv::declare(layout, name, c_in, c_out, kernel, stride, groups);
        let gain = layout.add(alloc::format!("{name}.norm.gain"), Shape::new(1, c_out, 1, 1), Init::Ones);
        let shift = layout.add(alloc::format!("{name}.norm.shift"), Shape::new(1, c_out, 1, 1), Init::Zeros);
        ConvBlock {
            conv,
            gain,
            shift,
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = tape.normalize(y, NormMode::PerSampleAll, Some(p[self.gain]), Some(p[self.shift]), NORM_EPS)?;
        Ok(if self.activation { tape.gelu(y) } else { y })
    }
}
