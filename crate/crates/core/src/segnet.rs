//! The full model: a four-stage encoder applied to every input frame, one
//! temporal module per pyramid level, and top-down additive fusion into class
//! logits at input resolution.
//!
//! The temporal module is a ConvLSTM, a bidirectional ConvLSTM, or (for the
//! baseline) a single 3×3 convolution over the four frames' features
//! concatenated along channels.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::conv::Conv2dSpec;
use crate::convlstm::{self, CellShape, ConvLstmCell, ConvLstmParams};
use crate::data::{one_hot, SegMap};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{derive_seed, Element, Init, Tensor};
use crate::INPUT_FRAMES;

pub const SCALES: usize = 4;
/// Encoder stride at each pyramid level.
pub const STRIDES: [usize; SCALES] = [2, 4, 8, 16];
/// ConvLSTM kernel size at each level; the coarsest level uses 1×1.
pub const LSTM_KERNELS: [usize; SCALES] = [3, 3, 3, 1];

/// How the four frames' features are combined at each level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LstmMode {
    /// Concatenate the frames and apply one convolution (no recurrence).
    None,
    Uni,
    Bi,
}

impl LstmMode {
    pub fn code(self) -> u8 {
        match self {
            LstmMode::None => 0,
            LstmMode::Uni => 1,
            LstmMode::Bi => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LstmMode::None),
            1 => Some(LstmMode::Uni),
            2 => Some(LstmMode::Bi),
            _ => None,
        }
    }
}

impl std::str::FromStr for LstmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LstmMode::None),
            "uni" => Ok(LstmMode::Uni),
            "bi" => Ok(LstmMode::Bi),
            other => Err(Error::Invalid(format!("unknown mode {other:?} (none, uni, bi)"))),
        }
    }
}

impl std::fmt::Display for LstmMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LstmMode::None => "none",
            LstmMode::Uni => "uni",
            LstmMode::Bi => "bi",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Feature widths at strides 2, 4, 8 and 16.
    pub widths: [usize; SCALES],
    pub mode: LstmMode,
    /// In bidirectional mode, run both directions with one parameter set.
    pub share_directions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            height: 64,
            width: 64,
            widths: [16, 32, 64, 64],
            mode: LstmMode::Uni,
            share_directions: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Invalid(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(Error::Invalid(format!(
                "input {}x{} must be a positive multiple of 16",
                self.height, self.width
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Invalid(format!("widths must be positive: {:?}", self.widths)));
        }
        Ok(())
    }

    /// Spatial extents of level `k` (0 = finest).
    pub fn scale_dims(&self, k: usize) -> (usize, usize) {
        (self.height / STRIDES[k], self.width / STRIDES[k])
    }

    /// Channels of the temporal module's output at level `k`.
    pub fn temporal_channels(&self, k: usize) -> usize {
        match self.mode {
            LstmMode::Bi => 2 * self.widths[k],
            _ => self.widths[k],
        }
    }

    pub fn cell_shape(&self, k: usize) -> CellShape {
        let (h, w) = self.scale_dims(k);
        CellShape {
            in_channels: self.widths[k],
            out_channels: self.widths[k],
            kernel: LSTM_KERNELS[k],
            height: h,
            width: w,
        }
    }
}

/// A convolution's kernel and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<P = Tensor<f32>> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TemporalParams<P = Tensor<f32>> {
    /// One `ck × 4ck × 3 × 3` convolution per level.
    Fusion(Vec<ConvParams<P>>),
    Uni(Vec<ConvLstmParams<P>>),
    /// `backward` is `None` when both directions share `forward`.
    Bi {
        forward: Vec<ConvLstmParams<P>>,
        backward: Option<Vec<ConvLstmParams<P>>>,
    },
}

/// Every learnable tensor of the model. `P` is a [`Tensor`] for stored weights
/// or a [`NodeId`] once bound to a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor<f32>> {
    pub encoder: Vec<ConvParams<P>>,
    pub temporal: TemporalParams<P>,
    /// `lateral[k]` maps level `k+1`'s fused map onto level `k`'s channels.
    pub lateral: Vec<ConvParams<P>>,
    pub classifier: ConvParams<P>,
}

fn map_conv<P, Q, E>(prefix: &str, c: &ConvParams<P>, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<ConvParams<Q>, E> {
    Ok(ConvParams {
        weight: f(&format!("{prefix}.weight"), &c.weight)?,
        bias: f(&format!("{prefix}.bias"), &c.bias)?,
    })
}

fn map_lstm<P, Q, E>(
    prefix: &str,
    p: &ConvLstmParams<P>,
    f: &mut impl FnMut(&str, &P) -> Result<Q, E>,
) -> Result<ConvLstmParams<Q>, E> {
    p.try_map(|name, t| f(&format!("{prefix}.{name}"), t))
}

impl<P> ModelParams<P> {
    /// Maps every tensor in a fixed order, passing its stable name.
    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&str, &P) -> Result<Q, E>) -> Result<ModelParams<Q>, E> {
        let encoder = self
            .encoder
            .iter()
            .enumerate()
            .map(|(k, c)| map_conv(&format!("encoder.{k}"), c, &mut f))
            .collect::<Result<Vec<_>, E>>()?;
        let temporal = match &self.temporal {
            TemporalParams::Fusion(v) => TemporalParams::Fusion(
                v.iter()
                    .enumerate()
                    .map(|(k, c)| map_conv(&format!("fusion.{k}"), c, &mut f))
                    .collect::<Result<_, E>>()?,
            ),
            TemporalParams::Uni(v) => TemporalParams::Uni(
                v.iter()
                    .enumerate()
                    .map(|(k, p)| map_lstm(&format!("lstm.{k}"), p, &mut f))
                    .collect::<Result<_, E>>()?,
            ),
            TemporalParams::Bi { forward, backward } => {
                let forward = forward
                    .iter()
                    .enumerate()
                    .map(|(k, p)| map_lstm(&format!("lstm.{k}.fwd"), p, &mut f))
                    .collect::<Result<_, E>>()?;
                let backward = match backward {
                    Some(b) => Some(
                        b.iter()
                            .enumerate()
                            .map(|(k, p)| map_lstm(&format!("lstm.{k}.bwd"), p, &mut f))
                            .collect::<Result<_, E>>()?,
                    ),
                    None => None,
                };
                TemporalParams::Bi { forward, backward }
            }
        };
        let lateral = self
            .lateral
            .iter()
            .enumerate()
            .map(|(k, c)| map_conv(&format!("decoder.lateral.{k}"), c, &mut f))
            .collect::<Result<Vec<_>, E>>()?;
        let classifier = map_conv("decoder.classifier", &self.classifier, &mut f)?;
        Ok(ModelParams {
            encoder,
            temporal,
            lateral,
            classifier,
        })
    }

    /// Every tensor with its name, in the same order as [`ModelParams::try_map`].
    pub fn named(&self) -> Vec<(String, &P)> {
        fn conv<'a, P>(out: &mut Vec<(String, &'a P)>, prefix: String, c: &'a ConvParams<P>) {
            out.push((format!("{prefix}.weight"), &c.weight));
            out.push((format!("{prefix}.bias"), &c.bias));
        }
        fn lstm<'a, P>(out: &mut Vec<(String, &'a P)>, prefix: String, p: &'a ConvLstmParams<P>) {
            for (name, t) in convlstm::PARAM_NAMES.iter().zip(p.fields()) {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        let mut out: Vec<(String, &P)> = Vec::new();
        for (k, c) in self.encoder.iter().enumerate() {
            conv(&mut out, format!("encoder.{k}"), c);
        }
        match &self.temporal {
            TemporalParams::Fusion(v) => {
                for (k, c) in v.iter().enumerate() {
                    conv(&mut out, format!("fusion.{k}"), c);
                }
            }
            TemporalParams::Uni(v) => {
                for (k, p) in v.iter().enumerate() {
                    lstm(&mut out, format!("lstm.{k}"), p);
                }
            }
            TemporalParams::Bi { forward, backward } => {
                for (k, p) in forward.iter().enumerate() {
                    lstm(&mut out, format!("lstm.{k}.fwd"), p);
                }
                for (k, p) in backward.iter().flatten().enumerate() {
                    lstm(&mut out, format!("lstm.{k}.bwd"), p);
                }
            }
        }
        for (k, c) in self.lateral.iter().enumerate() {
            conv(&mut out, format!("decoder.lateral.{k}"), c);
        }
        conv(&mut out, "decoder.classifier".into(), &self.classifier);
        out
    }

    /// Mutable access to every tensor, in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = Vec::new();
        for c in &mut self.encoder {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        match &mut self.temporal {
            TemporalParams::Fusion(v) => {
                for c in v {
                    out.extend([&mut c.weight, &mut c.bias]);
                }
            }
            TemporalParams::Uni(v) => {
                for p in v {
                    out.extend(p.fields_mut());
                }
            }
            TemporalParams::Bi { forward, backward } => {
                for p in forward {
                    out.extend(p.fields_mut());
                }
                for p in backward.iter_mut().flatten() {
                    out.extend(p.fields_mut());
                }
            }
        }
        for c in &mut self.lateral {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        out.extend([&mut self.classifier.weight, &mut self.classifier.bias]);
        out
    }

    pub fn tensor_count(&self) -> usize {
        self.named().len()
    }
}

/// Expected dims of every parameter tensor for `cfg`, in [`ModelParams::named`] order.
pub fn param_layout(cfg: &ModelConfig) -> Result<ModelParams<[usize; 4]>> {
    cfg.validate()?;
    let conv = |cout: usize, cin: usize, k: usize| ConvParams {
        weight: [cout, cin, k, k],
        bias: [cout, 1, 1, 1],
    };
    let mut encoder = Vec::with_capacity(SCALES);
    let mut cin = cfg.num_classes;
    for &w in &cfg.widths {
        encoder.push(conv(w, cin, 3));
        cin = w;
    }
    let lstm = |k: usize| -> ConvLstmParams<[usize; 4]> {
        let dims = ConvLstmParams::<Tensor<f32>>::expected_dims(cfg.cell_shape(k));
        let mut it = dims.into_iter();
        ConvLstmParams::<()>::default_unit()
            .try_map(|_, _| Ok::<_, ()>(it.next().expect("fifteen dims")))
            .expect("infallible")
    };
    let temporal = match cfg.mode {
        LstmMode::None => TemporalParams::Fusion(
            cfg.widths
                .iter()
                .map(|&w| conv(w, INPUT_FRAMES * w, 3))
                .collect(),
        ),
        LstmMode::Uni => TemporalParams::Uni((0..SCALES).map(lstm).collect()),
        LstmMode::Bi => TemporalParams::Bi {
            forward: (0..SCALES).map(lstm).collect(),
            backward: (!cfg.share_directions).then(|| (0..SCALES).map(lstm).collect()),
        },
    };
    let lateral = (0..SCALES - 1)
        .map(|k| conv(cfg.temporal_channels(k), cfg.temporal_channels(k + 1), 1))
        .collect();
    let classifier = conv(cfg.num_classes, cfg.temporal_channels(0), 1);
    Ok(ModelParams {
        encoder,
        temporal,
        lateral,
        classifier,
    })
}

impl<T: Element> ModelParams<Tensor<T>> {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        param_layout(cfg)?.try_map(|_, &dims| Ok(Tensor::zeros(dims)))
    }

    /// Default initialisation: He-uniform encoder kernels, LeCun-uniform fusion
    /// and lateral kernels, ConvLSTM kernels uniform in `±1/√fan_in` with a
    /// forget bias of one, and a classifier scaled down 100× so the initial
    /// logits are nearly uniform.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut index = 0u64;
        param_layout(cfg)?.try_map(|name, &dims| {
            index += 1;
            let seed = derive_seed(seed, index);
            let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
            let uniform = |bound: f64| Init::Uniform { bound, seed };
            let init = if name.ends_with(".bias") || name.ends_with(".b_i") || name.ends_with(".b_c") || name.ends_with(".b_o") {
                Init::Zeros
            } else if name.ends_with(".b_f") {
                Init::Constant(1.0)
            } else if name.ends_with(".w_ci") || name.ends_with(".w_cf") || name.ends_with(".w_co") {
                Init::Zeros
            } else if name.starts_with("encoder.") {
                uniform((6.0 / fan_in).sqrt())
            } else if name.starts_with("lstm.") {
                let [_, cin, k, _] = dims;
                let cout = dims[0];
                uniform(1.0 / (((cin + cout) * k * k) as f64).sqrt())
            } else if name.starts_with("decoder.classifier") {
                uniform(0.01 * (3.0 / fan_in).sqrt())
            } else {
                uniform((3.0 / fan_in).sqrt())
            };
            Tensor::new(dims, init)
        })
    }

    /// Checks every tensor against the layout `cfg` implies.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = param_layout(cfg)?;
        let want = layout.named();
        let have = self.named();
        if want.len() != have.len() {
            return Err(shape_err(
                "model params",
                format!("{} tensors, config implies {}", have.len(), want.len()),
            ));
        }
        for ((wn, wd), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || **wd != ht.dims() {
                return Err(shape_err(
                    "model params",
                    format!("{hn} {:?} where {wn} {wd:?} was expected", ht.dims()),
                ));
            }
        }
        Ok(())
    }

    /// Records every tensor as a trainable variable of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<ModelParams<NodeId>> {
        self.try_map(|_, t| g.variable(t.clone()))
    }

    /// Records every tensor as a constant of `g` (inference).
    pub fn bind_constant(&self, g: &mut Graph<T>) -> Result<ModelParams<NodeId>> {
        self.try_map(|_, t| g.constant(t.clone()))
    }

    pub fn cast<U: Element>(&self) -> ModelParams<Tensor<U>> {
        self.try_map(|_, t| Ok::<_, ()>(t.cast())).expect("infallible")
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Feature maps of one frame at strides 2, 4, 8 and 16.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiScaleFeatures {
    pub levels: [NodeId; SCALES],
}

fn encoder_spec(k: usize) -> Conv2dSpec {
    if k == SCALES - 1 {
        Conv2dSpec {
            stride: 2,
            padding: 2,
            dilation: 2,
        }
    } else {
        Conv2dSpec {
            stride: 2,
            padding: 1,
            dilation: 1,
        }
    }
}

/// Four stride-2 3×3 convolutions, each followed by `max(0, v)`; the last is dilated by 2.
pub fn encode<T: Element>(g: &mut Graph<T>, p: &ModelParams<NodeId>, onehot: NodeId) -> Result<MultiScaleFeatures> {
    let [_, k_in, h, w] = g.value(onehot).dims();
    let k_params = g.value(p.encoder[0].weight).dims()[1];
    if k_in != k_params {
        return Err(shape_err(
            "encode",
            format!("input has {k_in} class channels, encoder expects {k_params}"),
        ));
    }
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("input {h}x{w} is not a positive multiple of 16")));
    }
    let mut x = onehot;
    let mut levels = [onehot; SCALES];
    for (k, stage) in p.encoder.iter().enumerate() {
        let y = g.conv2d(x, stage.weight, Some(stage.bias), encoder_spec(k))?;
        x = g.relu(y)?;
        levels[k] = x;
    }
    Ok(MultiScaleFeatures { levels })
}

/// Top-down fusion from the coarsest level: `z ← up₂(conv₁ₓ₁(z)) + g_k`, then
/// a 1×1 classifier and a final ×2 upsampling to input resolution.
pub fn decode<T: Element>(g: &mut Graph<T>, p: &ModelParams<NodeId>, levels: &[NodeId]) -> Result<NodeId> {
    if levels.len() != SCALES || p.lateral.len() != SCALES - 1 {
        return Err(Error::Invalid(format!(
            "decoder needs exactly {SCALES} levels, got {}",
            levels.len()
        )));
    }
    for k in 0..SCALES - 1 {
        let [_, _, hf, wf] = g.value(levels[k]).dims();
        let [_, _, hc, wc] = g.value(levels[k + 1]).dims();
        if hf != 2 * hc || wf != 2 * wc {
            return Err(shape_err(
                "decode",
                format!("level {k} is {hf}x{wf} but level {} is {hc}x{wc}", k + 1),
            ));
        }
    }
    let mut z = levels[SCALES - 1];
    for k in (0..SCALES - 1).rev() {
        let lat = &p.lateral[k];
        let c = g.conv2d(z, lat.weight, Some(lat.bias), Conv2dSpec::default())?;
        let up = g.upsample_nearest(c, 2)?;
        z = g.add(up, levels[k])?;
    }
    let logits = g.conv2d(z, p.classifier.weight, Some(p.classifier.bias), Conv2dSpec::default())?;
    g.upsample_nearest(logits, 2)
}

/// Baseline temporal module: per level, concatenate the frames (oldest first)
/// along channels and apply one 3×3 convolution.
pub fn fusion_baseline<T: Element>(
    g: &mut Graph<T>,
    fusion: &[ConvParams<NodeId>],
    frames: &[MultiScaleFeatures],
) -> Result<[NodeId; SCALES]> {
    if frames.len() != INPUT_FRAMES {
        return Err(Error::FrameCount {
            expected: INPUT_FRAMES,
            got: frames.len(),
        });
    }
    if fusion.len() != SCALES {
        return Err(Error::Invalid(format!("{} fusion convolutions for {SCALES} levels", fusion.len())));
    }
    let mut out = [frames[0].levels[0]; SCALES];
    for k in 0..SCALES {
        let parts: Vec<NodeId> = frames.iter().map(|f| f.levels[k]).collect();
        let stacked = g.concat(1, &parts)?;
        out[k] = g.conv2d(stacked, fusion[k].weight, Some(fusion[k].bias), Conv2dSpec::same(3))?;
    }
    Ok(out)
}

/// Runs the configured temporal module over per-frame features (oldest first).
pub fn temporal<T: Element>(
    g: &mut Graph<T>,
    p: &ModelParams<NodeId>,
    frames: &[MultiScaleFeatures],
) -> Result<[NodeId; SCALES]> {
    if frames.len() != INPUT_FRAMES {
        return Err(Error::FrameCount {
            expected: INPUT_FRAMES,
            got: frames.len(),
        });
    }
    let per_level = |k: usize| -> Vec<NodeId> { frames.iter().map(|f| f.levels[k]).collect() };
    let mut out = [frames[0].levels[0]; SCALES];
    match &p.temporal {
        TemporalParams::Fusion(fusion) => return fusion_baseline(g, fusion, frames),
        TemporalParams::Uni(cells) => {
            for (k, cp) in cells.iter().enumerate() {
                let cell = ConvLstmCell::new(g, cp)?;
                out[k] = cell.run(g, &per_level(k))?;
            }
        }
        TemporalParams::Bi { forward, backward } => {
            for (k, fp) in forward.iter().enumerate() {
                let fwd = ConvLstmCell::new(g, fp)?;
                let bwd = match backward {
                    Some(b) => ConvLstmCell::new(g, &b[k])?,
                    None => fwd,
                };
                out[k] = convlstm::bidirectional(g, &fwd, &bwd, &per_level(k))?;
            }
        }
    }
    Ok(out)
}

/// Logits `N×K×H×W` for the frame after `frames` (oldest first), each frame
/// already one-hot encoded as `N×K×H×W`.
pub fn forward_encoded<T: Element>(g: &mut Graph<T>, p: &ModelParams<NodeId>, frames: &[NodeId]) -> Result<NodeId> {
    if frames.len() != INPUT_FRAMES {
        return Err(Error::FrameCount {
            expected: INPUT_FRAMES,
            got: frames.len(),
        });
    }
    let features = frames
        .iter()
        .map(|&f| encode(g, p, f))
        .collect::<Result<Vec<_>>>()?;
    let levels = temporal(g, p, &features)?;
    decode(g, p, &levels)
}

/// Records the one-step prediction of the frame after `inputs` (oldest first) on `g`.
pub fn forward_one_step<T: Element>(
    g: &mut Graph<T>,
    p: &ModelParams<NodeId>,
    cfg: &ModelConfig,
    inputs: &[&SegMap],
) -> Result<NodeId> {
    if inputs.len() != INPUT_FRAMES {
        return Err(Error::FrameCount {
            expected: INPUT_FRAMES,
            got: inputs.len(),
        });
    }
    for m in inputs {
        if m.height() != cfg.height || m.width() != cfg.width {
            return Err(shape_err(
                "forward_one_step",
                format!("frame {}x{} for a {}x{} model", m.height(), m.width(), cfg.height, cfg.width),
            ));
        }
    }
    let frames = inputs
        .iter()
        .map(|m| one_hot::<T>(m, cfg.num_classes).and_then(|t| g.constant(t)))
        .collect::<Result<Vec<_>>>()?;
    forward_encoded(g, p, &frames)
}

/// Inference convenience: logits for the frame after `inputs`.
pub fn predict_logits<T: Element>(params: &ModelParams<Tensor<T>>, cfg: &ModelConfig, inputs: &[&SegMap]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind_constant(&mut g)?;
    let out = forward_one_step(&mut g, &p, cfg, inputs)?;
    Ok(g.value(out).clone())
}
