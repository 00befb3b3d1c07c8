//! The four-stage hybrid backbone: convolutional stem, inverted residual
//! blocks, AGC blocks in stages 1-3, attention blocks in stage 4, strided
//! downsampling between stages, and a pooled linear head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::agc::{AgcConfig, AgcMixer, DistanceKind, GateKind};
use crate::attention::AttentionMixer;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, ConvBlock, Layout, ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MixerKind {
    Agc,
    Attention,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageConfig {
    pub irb_count: usize,
    pub mixer_count: usize,
    pub channels: usize,
    pub mixer: MixerKind,
    /// Local hop distance; required for AGC stages with mixers.
    #[cfg_attr(feature = "serde", serde(default))]
    pub k: Option<usize>,
}

impl StageConfig {
    pub fn agc(irb_count: usize, mixer_count: usize, channels: usize, k: usize) -> Self {
        StageConfig {
            irb_count,
            mixer_count,
            channels,
            mixer: MixerKind::Agc,
            k: Some(k),
        }
    }

    pub fn attention(irb_count: usize, mixer_count: usize, channels: usize) -> Self {
        StageConfig {
            irb_count,
            mixer_count,
            channels,
            mixer: MixerKind::Attention,
            k: None,
        }
    }
}

#[cfg(feature = "serde")]
fn default_in_channels() -> usize {
    3
}

#[cfg(feature = "serde")]
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    pub stem_channels: usize,
    pub num_classes: usize,
    pub ffn_ratio: f64,
    pub irb_expansion: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(default = "default_in_channels"))]
    pub in_channels: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub gate: GateKind,
    #[cfg_attr(feature = "serde", serde(default))]
    pub distance: DistanceKind,
    /// When false every temperature stays at its initial value during training.
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub learn_temperature: bool,
}

/// Stage widths of the 16x16 toy model; keeps it under 100k parameters.
pub const TOY16_CHANNELS: [usize; 4] = [8, 16, 32, 48];

/// Default local distances for stages 1-3.
pub const DEFAULT_K_SCHEDULE: [usize; 3] = [8, 4, 2];

fn preset(depths: [(usize, usize); 4], channels: [usize; 4]) -> ModelConfig {
    let [k1, k2, k3] = DEFAULT_K_SCHEDULE;
    ModelConfig {
        stages: vec![
            StageConfig::agc(depths[0].0, depths[0].1, channels[0], k1),
            StageConfig::agc(depths[1].0, depths[1].1, channels[1], k2),
            StageConfig::agc(depths[2].0, depths[2].1, channels[2], k3),
            StageConfig::attention(depths[3].0, depths[3].1, channels[3]),
        ],
        stem_channels: channels[0],
        num_classes: 1000,
        ffn_ratio: 4.0,
        irb_expansion: 4.0,
        seed: 0,
        in_channels: 3,
        gate: GateKind::ExpDecay,
        distance: DistanceKind::L1,
        learn_temperature: true,
    }
}

impl ModelConfig {
    pub fn adaptvig_s() -> Self {
        preset([(3, 3), (3, 3), (9, 3), (3, 3)], [32, 64, 128, 256])
    }

    pub fn adaptvig_m() -> Self {
        preset([(4, 4), (4, 4), (12, 4), (4, 4)], [48, 96, 192, 320])
    }

    pub fn adaptvig_b() -> Self {
        preset([(5, 5), (5, 5), (15, 5), (5, 5)], [48, 96, 192, 384])
    }

    /// One IRB and one mixer per stage, for 64x64 inputs.
    pub fn toy(channels: [usize; 4], num_classes: usize) -> Self {
        let mut cfg = preset([(1, 1); 4], channels);
        cfg.num_classes = num_classes;
        cfg.stages[0].k = Some(4);
        cfg.stages[1].k = Some(2);
        cfg.stages[2].k = Some(1);
        cfg
    }

    /// Small config for 16x16 inputs: stage dims are 4, 2, 1, 1, so stage 3
    /// (1x1) carries no AGC block.
    pub fn toy16(channels: [usize; 4], num_classes: usize) -> Self {
        let mut cfg = preset([(1, 1), (1, 1), (1, 0), (1, 1)], channels);
        cfg.num_classes = num_classes;
        cfg.stages[0].k = Some(1);
        cfg.stages[1].k = Some(1);
        cfg.stages[2].k = None;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stages.len() != 4 {
            return bad(format!("expected 4 stages, got {}", self.stages.len()));
        }
        if self.stem_channels == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return bad("stem_channels, num_classes and in_channels must be positive".into());
        }
        if !(self.ffn_ratio > 0.0) || !(self.irb_expansion > 0.0) {
            return bad("ffn_ratio and irb_expansion must be positive".into());
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.channels == 0 {
                return bad(format!("stage {} has zero channels", i + 1));
            }
            if i > 0 && st.channels < self.stages[i - 1].channels {
                return bad(format!("stage {} narrows channels", i + 1));
            }
            let last = i == 3;
            match st.mixer {
                MixerKind::Attention if !last => {
                    return bad(format!("attention mixer only allowed in stage 4, found in stage {}", i + 1))
                }
                MixerKind::Agc if last => return bad("stage 4 must use the attention mixer".into()),
                MixerKind::Agc if st.mixer_count > 0 && st.k.unwrap_or(0) == 0 => {
                    return bad(format!("stage {} needs a local distance k >= 1", i + 1))
                }
                _ => {}
            }
        }
        if self.stem_channels != self.stages[0].channels && self.stages[0].irb_count == 0 {
            return bad("stage 1 needs an IRB to change the stem width".into());
        }
        Ok(())
    }

    /// Spatial size entering each stage for an `h x w` input.
    pub fn stage_dims(&self, h: usize, w: usize) -> [(usize, usize); 4] {
        let half = |d: usize| (d + 2 - 3) / 2 + 1;
        let mut d = (half(half(h)), half(half(w)));
        let mut out = [(0, 0); 4];
        for slot in out.iter_mut() {
            *slot = d;
            d = (half(d.0), half(d.1));
        }
        out
    }

    /// Checks that an `h x w` input survives the stem and that every AGC stage's
    /// `k` fits its grid.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        if h < 4 || w < 4 {
            return Err(Error::InputTooSmall {
                h,
                w,
                reason: "the stem needs at least 4x4",
            });
        }
        for (st, (sh, sw)) in self.stages.iter().zip(self.stage_dims(h, w)) {
            if st.mixer == MixerKind::Agc && st.mixer_count > 0 {
                let k = st.k.unwrap_or(0);
                if k < 1 || k >= sh.min(sw) {
                    return Err(Error::LocalDistance { k, h: sh, w: sw });
                }
            }
        }
        Ok(())
    }
}

fn widen(c: usize, ratio: f64) -> usize {
    (libm::round(c as f64 * ratio) as usize).max(1)
}

/// Two 3x3 stride-2 conv blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stem {
    pub first: ConvBlock,
    pub second: ConvBlock,
}

impl Stem {
    pub fn declare(layout: &mut Layout, name: &str, in_channels: usize, out_channels: usize) -> Self {
        let mid = (out_channels / 2).max(1);
        Stem {
            first: ConvBlock::declare(layout, &format!("{name}.0"), in_channels, mid, 3, 2, 1, true),
            second: ConvBlock::declare(layout, &format!("{name}.1"), mid, out_channels, 3, 2, 1, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.h < 4 || s.w < 4 {
            return Err(Error::InputTooSmall {
                h: s.h,
                w: s.w,
                reason: "the stem needs at least 4x4",
            });
        }
        let y = self.first.forward(tape, p, x)?;
        self.second.forward(tape, p, y)
    }
}

/// 1x1 expand, depthwise 3x3, 1x1 project; residual when widths match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvertedResidual {
    pub expand: ConvBlock,
    pub depthwise: ConvBlock,
    pub project: ConvBlock,
    pub residual: bool,
    pub hidden: usize,
}

impl InvertedResidual {
    pub fn declare(layout: &mut Layout, name: &str, c_in: usize, c_out: usize, expansion: f64) -> Self {
        let hidden = widen(c_in, expansion);
        InvertedResidual {
            expand: ConvBlock::declare(layout, &format!("{name}.expand"), c_in, hidden, 1, 1, 1, true),
            depthwise: ConvBlock::declare(layout, &format!("{name}.dw"), hidden, hidden, 3, 1, hidden, true),
            project: ConvBlock::declare(layout, &format!("{name}.project"), hidden, c_out, 1, 1, 1, false),
            residual: c_in == c_out,
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.expand.forward(tape, p, x)?;
        let y = self.depthwise.forward(tape, p, y)?;
        let y = self.project.forward(tape, p, y)?;
        if self.residual {
            tape.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// Conditional positional encoding: `x + dwconv3x3(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalEncoding {
    pub dw: Conv,
}

impl PositionalEncoding {
    pub fn declare(layout: &mut Layout, name: &str, channels: usize) -> Self {
        PositionalEncoding {
            dw: Conv::declare(layout, name, channels, channels, 3, 1, channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.dw.forward(tape, p, x)?;
        tape.add(x, y)
    }
}

/// `x + fc2(gelu(fc1(x)))` with pointwise convolutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedForward {
    pub fc1: Conv,
    pub fc2: Conv,
    pub hidden: usize,
}

impl FeedForward {
    pub fn declare(layout: &mut Layout, name: &str, channels: usize, ratio: f64) -> Self {
        let hidden = widen(channels, ratio);
        FeedForward {
            fc1: Conv::declare(layout, &format!("{name}.fc1"), channels, hidden, 1, 1, 1),
            fc2: Conv::declare(layout, &format!("{name}.fc2"), hidden, channels, 1, 1, 1),
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.fc1.forward(tape, p, x)?;
        let y = tape.gelu(y);
        let y = self.fc2.forward(tape, p, y)?;
        tape.add(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mixer {
    Agc(AgcMixer),
    Attention(AttentionMixer),
}

impl Mixer {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Mixer::Agc(m) => m.forward(tape, p, x),
            Mixer::Attention(m) => m.forward(tape, p, x),
        }
    }
}

/// CPE, pointwise conv, mixer with residual, then FFN (residual inside).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixerBlock {
    pub cpe: PositionalEncoding,
    pub pre: Conv,
    pub mixer: Mixer,
    pub ffn: FeedForward,
}

impl MixerBlock {
    pub fn declare_agc(layout: &mut Layout, name: &str, channels: usize, cfg: AgcConfig, ffn_ratio: f64) -> Self {
        Self::declare_with(layout, name, channels, ffn_ratio, |l| {
            Mixer::Agc(AgcMixer::declare(l, &format!("{name}.agc"), channels, cfg))
        })
    }

    pub fn declare_attention(layout: &mut Layout, name: &str, channels: usize, ffn_ratio: f64) -> Self {
        Self::declare_with(layout, name, channels, ffn_ratio, |l| {
            Mixer::Attention(AttentionMixer::declare(l, &format!("{name}.attn"), channels))
        })
    }

    fn declare_with(
        layout: &mut Layout,
        name: &str,
        channels: usize,
        ffn_ratio: f64,
        mixer: impl FnOnce(&mut Layout) -> Mixer,
    ) -> Self {
        let cpe = PositionalEncoding::declare(layout, &format!("{name}.cpe"), channels);
        let pre = Conv::declare(layout, &format!("{name}.pre"), channels, channels, 1, 1, 1);
        let mixer = mixer(layout);
        let ffn = FeedForward::declare(layout, &format!("{name}.ffn"), channels, ffn_ratio);
        MixerBlock { cpe, pre, mixer, ffn }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.cpe.forward(tape, p, x)?;
        let z = self.pre.forward(tape, p, y)?;
        let m = self.mixer.forward(tape, p, z)?;
        let y = tape.add(y, m)?;
        self.ffn.forward(tape, p, y)
    }

    pub fn temperature(&self) -> Option<ParamId> {
        match self.mixer {
            Mixer::Agc(m) => Some(m.temperature),
            Mixer::Attention(_) => None,
        }
    }
}

/// Strided 3x3 conv block halving the resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Downsample {
    pub block: ConvBlock,
}

impl Downsample {
    pub fn declare(layout: &mut Layout, name: &str, c_in: usize, c_out: usize) -> Self {
        Downsample {
            block: ConvBlock::declare(layout, name, c_in, c_out, 3, 2, 1, false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.block.forward(tape, p, x)
    }
}

/// Global average pool followed by one affine map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Head {
    pub fc: Conv,
}

impl Head {
    pub fn declare(layout: &mut Layout, name: &str, channels: usize, classes: usize) -> Self {
        Head {
            fc: Conv::declare(layout, name, channels, classes, 1, 1, 1),
        }
    }

    /// Logits of shape `(n, classes, 1, 1)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let pooled = tape.avg_pool(x);
        self.fc.forward(tape, p, pooled)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub irbs: Vec<InvertedResidual>,
    pub blocks: Vec<MixerBlock>,
    pub downsample: Option<Downsample>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    stem: Stem,
    stages: Vec<Stage>,
    head: Head,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::new();
        let stem = Stem::declare(&mut layout, "stem", config.in_channels, config.stem_channels);
        let mut c = config.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, st) in config.stages.iter().enumerate() {
            let mut irbs = Vec::with_capacity(st.irb_count);
            for j in 0..st.irb_count {
                let name = format!("stage{}.irb{}", i + 1, j);
                irbs.push(InvertedResidual::declare(&mut layout, &name, c, st.channels, config.irb_expansion));
                c = st.channels;
            }
            let mut blocks = Vec::with_capacity(st.mixer_count);
            for j in 0..st.mixer_count {
                let name = format!("stage{}.block{}", i + 1, j);
                blocks.push(match st.mixer {
                    MixerKind::Agc => {
                        let agc = AgcConfig {
                            k: st.k.unwrap_or(1),
                            gate: config.gate,
                            distance: config.distance,
                        };
                        MixerBlock::declare_agc(&mut layout, &name, c, agc, config.ffn_ratio)
                    }
                    MixerKind::Attention => MixerBlock::declare_attention(&mut layout, &name, c, config.ffn_ratio),
                });
            }
            let downsample = (i < 3).then(|| {
                let next = config.stages[i + 1].channels;
                let d = Downsample::declare(&mut layout, &format!("stage{}.down", i + 1), c, next);
                c = next;
                d
            });
            stages.push(Stage {
                irbs,
                blocks,
                downsample,
            });
        }
        let head = Head::declare(&mut layout, "head", c, config.num_classes);
        Ok(Model {
            config,
            layout,
            stem,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn stem(&self) -> &Stem {
        &self.stem
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        ParamStore::init(&self.layout, seed)
    }

    /// Temperature parameters of every AGC block, in forward order.
    pub fn temperatures(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .flat_map(|s| s.blocks.iter().filter_map(MixerBlock::temperature))
            .collect()
    }

    /// Logits `(n, classes, 1, 1)` for images `x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        self.config.validate_input(s.h, s.w)?;
        let mut y = self.stem.forward(tape, p, x)?;
        for stage in &self.stages {
            for irb in &stage.irbs {
                y = irb.forward(tape, p, y)?;
            }
            for block in &stage.blocks {
                y = block.forward(tape, p, y)?;
            }
            if let Some(d) = &stage.downsample {
                y = d.forward(tape, p, y)?;
            }
        }
        self.head.forward(tape, p, y)
    }
}

/// Learnable scalars of a model built from `config`, including one temperature
/// per AGC block when temperatures are learned.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    let model = Model::new(config.clone())?;
    let total = model.layout.scalar_count();
    Ok(if config.learn_temperature {
        total
    } else {
        total - model.temperatures().len()
    })
}
