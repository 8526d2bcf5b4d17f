//! Image encoders (a tiny conv net and toy-width ResNets), two-layer heads,
//! and checkpoint persistence.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage, CHECKPOINT_SCHEMA_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::FrameImage;
use crate::error::{Error, Result};
use crate::params::{conv, init_conv, init_linear, linear, Bound, ParamSet};
use crate::scalar::{c, Scalar};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "tiny-conv")]
    TinyConv,
    #[serde(rename = "res-34")]
    Res34,
    #[serde(rename = "res-50")]
    Res50,
    #[serde(rename = "res-101")]
    Res101,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [Architecture::TinyConv, Architecture::Res34, Architecture::Res50, Architecture::Res101];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::TinyConv => "tiny-conv",
            Architecture::Res34 => "res-34",
            Architecture::Res50 => "res-50",
            Architecture::Res101 => "res-101",
        }
    }

    /// Residual blocks per stage and whether blocks are bottlenecks.
    fn resnet_layout(self) -> Option<([usize; 4], bool)> {
        match self {
            Architecture::TinyConv => None,
            Architecture::Res34 => Some(([3, 4, 6, 3], false)),
            Architecture::Res50 => Some(([3, 4, 6, 3], true)),
            Architecture::Res101 => Some(([3, 4, 23, 3], true)),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture {s:?} (expected one of tiny-conv, res-34, res-50, res-101)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub embedding_dim: usize,
    pub input_hw: (usize, usize),
    /// Base channel count. ResNets use 64 at full size; toy runs use far less.
    pub width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { architecture: Architecture::TinyConv, embedding_dim: 64, input_hw: (16, 16), width: 16 }
    }
}

impl EncoderConfig {
    pub fn new(architecture: Architecture, embedding_dim: usize, input_hw: (usize, usize)) -> Self {
        let width = if architecture == Architecture::TinyConv { 16 } else { 4 };
        Self { architecture, embedding_dim, input_hw, width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::invalid("embedding_dim must be positive"));
        }
        if self.width == 0 {
            return Err(Error::invalid("width must be positive"));
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(format!("input size {h}x{w} must be a positive multiple of 8")));
        }
        Ok(())
    }
}

/// Initialise encoder parameters (names prefixed `enc.`).
pub fn init_encoder_params<T: Scalar>(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    let (h, w) = cfg.input_hw;
    let b = cfg.width;
    match cfg.architecture.resnet_layout() {
        None => {
            init_conv(&mut ps, rng, "enc.conv1", 3, b, 3, 1.0);
            init_conv(&mut ps, rng, "enc.conv2", b, 2 * b, 3, 1.0);
            init_conv(&mut ps, rng, "enc.conv3", 2 * b, 2 * b, 3, 1.0);
            init_conv(&mut ps, rng, "enc.conv4", 2 * b, 2 * b, 3, 1.0);
            init_linear(&mut ps, rng, "enc.fc", 2 * b * (h / 8) * (w / 8), cfg.embedding_dim, 1.0);
        }
        Some((blocks, bottleneck)) => {
            init_conv(&mut ps, rng, "enc.stem", 3, b, 3, 1.0);
            let mut cin = b;
            for (s, &n) in blocks.iter().enumerate() {
                let mid = b << s;
                let cout = if bottleneck { 4 * mid } else { mid };
                for i in 0..n {
                    let name = format!("enc.s{s}.b{i:02}");
                    let stride = if i == 0 && s > 0 { 2 } else { 1 };
                    if bottleneck {
                        init_conv(&mut ps, rng, &format!("{name}.reduce"), cin, mid, 1, 1.0);
                        init_conv(&mut ps, rng, &format!("{name}.conv"), mid, mid, 3, 1.0);
                        init_conv(&mut ps, rng, &format!("{name}.expand"), mid, cout, 1, 0.1);
                    } else {
                        init_conv(&mut ps, rng, &format!("{name}.conv_a"), cin, cout, 3, 1.0);
                        init_conv(&mut ps, rng, &format!("{name}.conv_b"), cout, cout, 3, 0.1);
                    }
                    if stride != 1 || cin != cout {
                        init_conv(&mut ps, rng, &format!("{name}.short"), cin, cout, 1, 1.0);
                    }
                    cin = cout;
                }
            }
            init_linear(&mut ps, rng, "enc.fc", cin, cfg.embedding_dim, 1.0);
        }
    }
    Ok(ps)
}

/// Parameter-name prefixes of the encoder's layer groups, input side first.
pub fn layer_groups(cfg: &EncoderConfig) -> Vec<String> {
    let mut out: Vec<String> = match cfg.architecture {
        Architecture::TinyConv => (1..=4).map(|i| format!("enc.conv{i}.")).collect(),
        _ => std::iter::once("enc.stem.".to_string()).chain((0..4).map(|s| format!("enc.s{s}."))).collect(),
    };
    out.push("enc.fc.".into());
    out
}

/// Encoder forward pass: `x` is `[N, 3, H, W]`, the result `[N, embedding_dim]`.
pub fn encoder_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    match cfg.architecture.resnet_layout() {
        None => {
            let mut h = x;
            for (name, stride) in [("enc.conv1", 1), ("enc.conv2", 2), ("enc.conv3", 2), ("enc.conv4", 1)] {
                let y = conv(g, p, name, h, stride, 1)?;
                h = g.silu(y);
            }
            let pooled = g.avg_pool(h, 2)?;
            let flat = g.flatten(pooled)?;
            linear(g, p, "enc.fc", flat)
        }
        Some((blocks, bottleneck)) => {
            let stem = conv(g, p, "enc.stem", x, 1, 1)?;
            let mut h = g.silu(stem);
            for (s, &n) in blocks.iter().enumerate() {
                for i in 0..n {
                    let name = format!("enc.s{s}.b{i:02}");
                    let stride = if i == 0 && s > 0 { 2 } else { 1 };
                    let branch = if bottleneck {
                        let r = conv(g, p, &format!("{name}.reduce"), h, 1, 0)?;
                        let r = g.silu(r);
                        let m = conv(g, p, &format!("{name}.conv"), r, stride, 1)?;
                        let m = g.silu(m);
                        conv(g, p, &format!("{name}.expand"), m, 1, 0)?
                    } else {
                        let a = conv(g, p, &format!("{name}.conv_a"), h, stride, 1)?;
                        let a = g.silu(a);
                        conv(g, p, &format!("{name}.conv_b"), a, 1, 1)?
                    };
                    let short = match p.get(&format!("{name}.short.w")) {
                        Ok(_) => conv(g, p, &format!("{name}.short"), h, stride, 0)?,
                        Err(_) => h,
                    };
                    let sum = g.add(branch, short)?;
                    h = g.silu(sum);
                }
            }
            let pooled = g.global_avg_pool(h)?;
            linear(g, p, "enc.fc", pooled)
        }
    }
}

/// Pack HWC frames into an `[N, 3, H, W]` tensor centred around zero.
pub fn frames_to_tensor<T: Scalar>(frames: &[FrameImage], input_hw: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w) = input_hw;
    let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        if (f.h, f.w) != (h, w) {
            return Err(Error::shape(format!("{h}x{w}x3 frames"), format!("{}x{}x3 (frame {} of {})", f.h, f.w, f.source.frame_index, f.source.clip_id)));
        }
        for ch in 0..3 {
            for i in 0..h * w {
                data.push(c::<T>(f.pixels[i * 3 + ch] as f64 - 0.5));
            }
        }
    }
    Tensor::new(vec![frames.len(), 3, h, w], data)
}

/// Inference-mode features for a batch of frames, `[N, embedding_dim]`.
pub fn encode_frames<T: Scalar>(params: &ParamSet<T>, cfg: &EncoderConfig, frames: &[FrameImage]) -> Result<Tensor<T>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(frames.len() * cfg.embedding_dim);
    for chunk in frames.chunks(CHUNK) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.input(frames_to_tensor(chunk, cfg.input_hw)?);
        let y = encoder_forward(&mut g, &bound, cfg, x)?;
        out.extend_from_slice(g.value(y).data());
    }
    Tensor::new(vec![frames.len(), cfg.embedding_dim], out)
}

pub fn init_encoder<T: Scalar>(config: EncoderConfig, seed: u64) -> Result<Checkpoint<T>> {
    let mut rng = seed::rng(seed, "encoder-init");
    let params = init_encoder_params(&config, &mut rng)?;
    Checkpoint::new(params, config, Stage::Scratch, format!("init:{seed}"), seed)
}

pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>, frames: &[FrameImage]) -> Result<Tensor<T>> {
    encode_frames(&ckpt.params, &ckpt.config, frames)
}

/// Read-only view of an encoder. Downstream training only ever sees this
/// handle, so it cannot reach the parameters mutably.
#[derive(Debug, Clone)]
pub struct FrozenEncoder<T> {
    ckpt: Checkpoint<T>,
}

pub fn freeze<T: Scalar>(ckpt: Checkpoint<T>) -> FrozenEncoder<T> {
    FrozenEncoder { ckpt }
}

impl<T: Scalar> FrozenEncoder<T> {
    pub fn encode(&self, frames: &[FrameImage]) -> Result<Tensor<T>> {
        encode(&self.ckpt, frames)
    }

    pub fn checkpoint(&self) -> &Checkpoint<T> {
        &self.ckpt
    }

    pub fn param_hash(&self) -> String {
        self.ckpt.params.content_hash()
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.ckpt.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.ckpt.config.embedding_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Projection,
    Prediction,
    ClassifierSemantics,
    ClassifierOrder,
    Policy,
}

/// Two-layer perceptron `Linear → SiLU → Linear`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub kind: HeadKind,
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Head {
    pub fn new(kind: HeadKind, prefix: impl Into<String>, input: usize, hidden: usize, output: usize) -> Self {
        Self { kind, prefix: prefix.into(), input, hidden, output }
    }

    /// Semantics classifier with one logit per teacher class.
    pub fn semantics(input: usize, hidden: usize, n_classes: usize) -> Self {
        Self::new(HeadKind::ClassifierSemantics, "h1", input, hidden, n_classes)
    }

    /// Order classifier with one logit per frame position.
    pub fn order(input: usize, hidden: usize, n_frames: usize) -> Self {
        Self::new(HeadKind::ClassifierOrder, "h2", input, hidden, n_frames)
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.input, self.hidden, self.output]
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamSet<T>, rng: &mut impl Rng) {
        init_linear(ps, rng, &format!("{}.l1", self.prefix), self.input, self.hidden, 1.0);
        init_linear(ps, rng, &format!("{}.l2", self.prefix), self.hidden, self.output, 1.0);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = linear(g, p, &format!("{}.l1", self.prefix), x)?;
        let h = g.silu(h);
        linear(g, p, &format!("{}.l2", self.prefix), h)
    }
}
