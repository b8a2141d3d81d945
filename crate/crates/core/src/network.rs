//! The style transfer network: frozen encoder taps, per-scale transform
//! stages, optional per-scale ConvLSTM, and a U-net decoder.
//!
//! Two variants share this code. The removal network has no recurrent
//! units; the restoration network threads flow-warped ConvLSTM state from
//! frame to frame.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::encoder::{EncoderWeights, MultiScaleFeatures, TAP_CHANNELS};
use crate::error::{Error, Result};
use crate::feature_transform::{self, check_lambda, FeatureMap, StageTrace, StyleVector, TransformParams};
use crate::nn::{self, Conv3x3, ParamBuilder, ParamSet};
use crate::temporal::{downscale_flow, ConvLstmParams, ConvLstmState, FlowField, TemporalMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Removal,
    Restoration,
}

/// Feature transform used at every scale. `AdaIn` is the ablation baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    #[default]
    DecoupledIn,
    AdaIn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// Encoder scales (1 = `conv1_1` … 4 = `conv4_1`) that feed the decoder.
    pub active_scales: Vec<usize>,
    pub whiten_count: usize,
    /// Number of chained transform stages per scale.
    pub consecutive: usize,
    pub decoder_widths: [usize; 4],
    pub lstm_hidden: [usize; 4],
    pub temporal_mode: TemporalMode,
    pub transform: TransformKind,
    pub precision: Precision,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Restoration,
            active_scales: vec![1, 2, 3, 4],
            whiten_count: 1,
            consecutive: 1,
            decoder_widths: TAP_CHANNELS,
            lstm_hidden: TAP_CHANNELS,
            temporal_mode: TemporalMode::Full,
            transform: TransformKind::DecoupledIn,
            precision: Precision::F32,
        }
    }
}

impl NetworkConfig {
    pub fn removal() -> Self {
        Self { variant: Variant::Removal, temporal_mode: TemporalMode::NoRecurrence, ..Self::default() }
    }

    pub fn restoration() -> Self {
        Self::default()
    }

    /// Narrow decoder and recurrent widths for CPU-sized experiments. The
    /// transform stages keep the encoder widths.
    pub fn desk(mut self) -> Self {
        self.decoder_widths = [16, 32, 64, 128];
        self.lstm_hidden = [16, 32, 64, 128];
        self
    }

    /// Checks the invariants and normalizes: scales sorted and deduplicated;
    /// the removal variant always runs without recurrence.
    pub fn validated(mut self) -> Result<Self> {
        self.active_scales.sort_unstable();
        self.active_scales.dedup();
        if self.active_scales.first() != Some(&1) || self.active_scales.iter().any(|s| !(1..=4).contains(s)) {
            return Err(Error::Config(format!(
                "active scales must be a subset of 1..=4 containing 1, got {:?}",
                self.active_scales
            )));
        }
        if !(1..=3).contains(&self.whiten_count) {
            return Err(Error::Config(format!("whiten count must be 1..=3, got {}", self.whiten_count)));
        }
        if !(1..=3).contains(&self.consecutive) {
            return Err(Error::Config(format!("consecutive count must be 1..=3, got {}", self.consecutive)));
        }
        if self.decoder_widths.contains(&0) || self.lstm_hidden.contains(&0) {
            return Err(Error::Config("decoder and recurrent widths must be positive".into()));
        }
        if self.variant == Variant::Removal {
            self.temporal_mode = TemporalMode::NoRecurrence;
        }
        Ok(self)
    }

    pub fn deepest_scale(&self) -> usize {
        *self.active_scales.last().expect("validated config has scales")
    }

    pub fn is_active(&self, scale: usize) -> bool {
        self.active_scales.contains(&scale)
    }

    fn has_lstm(&self) -> bool {
        self.variant == Variant::Restoration
    }

    /// Channels the decoder receives at `scale`.
    fn decoder_input(&self, scale: usize) -> usize {
        if self.has_lstm() {
            self.lstm_hidden[scale - 1]
        } else {
            TAP_CHANNELS[scale - 1]
        }
    }
}

/// Two 3×3 conv + ReLU layers.
#[derive(Clone, Debug)]
struct ConvBlock {
    a: Conv3x3,
    b: Conv3x3,
}

impl ConvBlock {
    fn new(pb: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self { a: Conv3x3::new(pb, &format!("{name}.a"), in_ch, out_ch)?, b: Conv3x3::new(pb, &format!("{name}.b"), out_ch, out_ch)? })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.b.forward(&self.a.forward(x)?.relu()?)?.relu()?)
    }
}

/// Channel concatenation followed by a 3×3 conv + ReLU.
#[derive(Clone, Debug)]
struct ConcatBlock(Conv3x3);

impl ConcatBlock {
    fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(&Tensor::cat(&[a, b], 1)?)?.relu()?)
    }
}

/// 2×2 average pooling, then 3×3 conv + ReLU.
#[derive(Clone, Debug)]
struct DownBlock(Conv3x3);

impl DownBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(&x.avg_pool2d(2)?)?.relu()?)
    }
}

/// Nearest ×2 upsampling, then 3×3 conv + ReLU.
#[derive(Clone, Debug)]
struct UpBlock(Conv3x3);

impl UpBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(&nn::upsample2x(x)?)?.relu()?)
    }
}

/// U-net over the per-scale transformed features.
#[derive(Clone, Debug)]
pub struct Decoder {
    entry: ConvBlock,
    down: Vec<Option<(DownBlock, Option<ConcatBlock>)>>,
    bottleneck: ConvBlock,
    up: Vec<Option<(UpBlock, ConcatBlock, ConvBlock)>>,
    output: Conv3x3,
}

impl Decoder {
    fn new(pb: &mut ParamBuilder, cfg: &NetworkConfig) -> Result<Self> {
        let w = cfg.decoder_widths;
        let deepest = cfg.deepest_scale();
        let entry = ConvBlock::new(pb, "decoder.entry", cfg.decoder_input(1), w[0])?;
        let mut down = vec![None];
        let mut up = vec![None; 1];
        for s in 2..=4 {
            if s > deepest {
                down.push(None);
                continue;
            }
            let d = DownBlock(Conv3x3::new(pb, &format!("decoder.down{s}"), w[s - 2], w[s - 1])?);
            let concat = if cfg.is_active(s) {
                Some(ConcatBlock(Conv3x3::new(
                    pb,
                    &format!("decoder.merge{s}"),
                    w[s - 1] + cfg.decoder_input(s),
                    w[s - 1],
                )?))
            } else {
                None
            };
            down.push(Some((d, concat)));
        }
        let bottleneck = ConvBlock::new(pb, "decoder.bottleneck", w[deepest - 1], w[deepest - 1])?;
        for s in 2..=4 {
            if s > deepest {
                up.push(None);
                continue;
            }
            // upsampling from scale s into scale s-1
            let u = UpBlock(Conv3x3::new(pb, &format!("decoder.up{s}"), w[s - 1], w[s - 2])?);
            let cat = ConcatBlock(Conv3x3::new(pb, &format!("decoder.skip{}", s - 1), 2 * w[s - 2], w[s - 2])?);
            let block = ConvBlock::new(pb, &format!("decoder.conv{}", s - 1), w[s - 2], w[s - 2])?;
            up.push(Some((u, cat, block)));
        }
        let output = Conv3x3::new(pb, "decoder.output", w[0], 3)?;
        Ok(Self { entry, down, bottleneck, up, output })
    }

    fn forward(&self, inputs: &[Option<Tensor>; 4], deepest: usize) -> Result<Tensor> {
        let first = inputs[0].as_ref().ok_or_else(|| Error::Config("decoder needs scale 1".into()))?;
        let mut skips = vec![self.entry.forward(first)?];
        for s in 2..=deepest {
            let (down, merge) = self.down[s - 1].as_ref().expect("built for deepest scale");
            let d = down.forward(skips.last().expect("non-empty"))?;
            let x = match (merge, &inputs[s - 1]) {
                (Some(m), Some(t)) => m.forward(&d, t)?,
                (None, None) => d,
                _ => return Err(Error::Config(format!("scale {s} input does not match the active scales"))),
            };
            skips.push(x);
        }
        let mut y = self.bottleneck.forward(skips.last().expect("non-empty"))?;
        for s in (2..=deepest).rev() {
            let (up, cat, block) = self.up[s - 1].as_ref().expect("built for deepest scale");
            y = block.forward(&cat.forward(&up.forward(&y)?, &skips[s - 2])?)?;
        }
        nn::sigmoid(&self.output.forward(&y)?)
    }
}

/// Style source for the transform stages: encoder features of a reference
/// image, or a precomputed (possibly smoothed) style vector.
#[derive(Clone, Copy, Debug)]
pub enum StyleInput<'a> {
    Features(&'a MultiScaleFeatures),
    Vector(&'a StyleVector),
}

/// Recurrent state of every active scale.
#[derive(Clone, Debug, Default)]
pub struct RecurrentState {
    pub scales: [Option<ConvLstmState>; 4],
}

impl RecurrentState {
    pub fn detach(&self) -> Self {
        Self { scales: self.scales.clone().map(|s| s.map(|s| s.detach())) }
    }
}

/// Per-scale traces of one transform pass.
#[derive(Clone, Debug, Default)]
pub struct TransformTrace {
    pub scales: [Option<Vec<StageTrace>>; 4],
}

impl TransformTrace {
    fn outputs(&self) -> [Option<Tensor>; 4] {
        self.scales.clone().map(|s| s.map(|stages| stages.last().expect("at least one stage").output.clone()))
    }
}

#[derive(Debug)]
pub struct StyleNetwork {
    config: NetworkConfig,
    transforms: [Vec<TransformParams>; 4],
    lstms: [Option<ConvLstmParams>; 4],
    decoder: Decoder,
    params: ParamSet,
}

impl StyleNetwork {
    fn build(config: NetworkConfig, mut pb: ParamBuilder) -> Result<Self> {
        let config = config.validated()?;
        let mut transforms: [Vec<TransformParams>; 4] = Default::default();
        let mut lstms: [Option<ConvLstmParams>; 4] = Default::default();
        for &s in &config.active_scales {
            let c = TAP_CHANNELS[s - 1];
            if config.transform == TransformKind::DecoupledIn {
                for k in 0..config.consecutive {
                    transforms[s - 1].push(TransformParams::build(&mut pb, &format!("transform.s{s}.k{k}"), c, config.whiten_count)?);
                }
            }
            if config.has_lstm() {
                lstms[s - 1] = Some(ConvLstmParams::build(&mut pb, &format!("lstm.s{s}"), c, config.lstm_hidden[s - 1])?);
            }
        }
        let decoder = Decoder::new(&mut pb, &config)?;
        let params = pb.finish()?;
        Ok(Self { config, transforms, lstms, decoder, params })
    }

    /// Freshly initialized weights from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let dtype = config.precision.dtype();
        Self::build(config, ParamBuilder::seeded(seed, dtype, &Device::Cpu))
    }

    /// Weights read from `prefix.*` arrays; every expected array must be
    /// present with the configured shape and no extra arrays may remain.
    pub fn from_archive(config: NetworkConfig, archive: &Archive, prefix: &str) -> Result<Self> {
        let dtype = config.precision.dtype();
        let arrays = archive.tensors_with_prefix(prefix, &Device::Cpu)?;
        Self::build(config, ParamBuilder::from_arrays(arrays, dtype, &Device::Cpu))
    }

    pub fn write_to(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        for (name, var) in self.params.iter() {
            archive.insert(format!("{prefix}.{name}"), var.as_tensor())?;
        }
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn transform_params(&self, scale: usize) -> &[TransformParams] {
        &self.transforms[scale - 1]
    }

    /// Post-transform style statistics per active scale and stage, i.e. the
    /// quantities a [`StyleVector`] carries.
    fn style_stats(&self, style: StyleInput<'_>) -> Result<[Vec<(Tensor, Tensor)>; 4]> {
        let mut out: [Vec<(Tensor, Tensor)>; 4] = Default::default();
        match style {
            StyleInput::Features(feats) => {
                for &s in &self.config.active_scales {
                    let f = feats.scale(s).to_dtype(self.dtype())?;
                    out[s - 1] = match self.config.transform {
                        TransformKind::DecoupledIn => {
                            self.transforms[s - 1].iter().map(|p| p.style_stats_tensor(&f)).collect::<Result<_>>()?
                        }
                        TransformKind::AdaIn => {
                            vec![feature_transform::stats_tensor(&f, feature_transform::DEFAULT_EPSILON)?]
                        }
                    };
                }
            }
            StyleInput::Vector(v) => {
                let mut stats = v.to_stats(self.dtype(), &Device::Cpu)?.into_iter();
                for &s in &self.config.active_scales {
                    let stages = match self.config.transform {
                        TransformKind::DecoupledIn => self.config.consecutive,
                        TransformKind::AdaIn => 1,
                    };
                    for _ in 0..stages {
                        let pair = stats.next().ok_or_else(|| Error::Shape("style vector has too few segments".into()))?;
                        out[s - 1].push(pair);
                    }
                }
                if stats.next().is_some() {
                    return Err(Error::Shape("style vector has too many segments".into()));
                }
            }
        }
        Ok(out)
    }

    /// Style vector of sample 0 of `style`.
    pub fn style_vector(&self, style: &MultiScaleFeatures, frame_index: usize) -> Result<StyleVector> {
        let stats = self.style_stats(StyleInput::Features(style))?;
        let flat: Vec<(Tensor, Tensor)> = stats
            .iter()
            .flatten()
            .map(|(m, s)| Ok((m.get(0)?, s.get(0)?)))
            .collect::<Result<_>>()?;
        StyleVector::from_stats(frame_index, &flat)
    }

    /// Runs the transform stages of every active scale.
    pub fn transform(&self, content: &MultiScaleFeatures, style: StyleInput<'_>, lambda: f64) -> Result<TransformTrace> {
        check_lambda(lambda)?;
        let stats = self.style_stats(style)?;
        let mut trace = TransformTrace::default();
        for &s in &self.config.active_scales {
            let x = content.scale(s).to_dtype(self.dtype())?;
            let stages = match self.config.transform {
                TransformKind::DecoupledIn => {
                    let mut stages: Vec<StageTrace> = Vec::with_capacity(self.config.consecutive);
                    for (p, (m, sd)) in self.transforms[s - 1].iter().zip(&stats[s - 1]) {
                        let input = stages.last().map(|t| t.output.clone()).unwrap_or_else(|| x.clone());
                        stages.push(p.apply_with_style_stats(&input, (m, sd), lambda)?);
                    }
                    stages
                }
                TransformKind::AdaIn => {
                    let eps = feature_transform::DEFAULT_EPSILON;
                    let (cm, cs) = feature_transform::stats_tensor(&x, eps)?;
                    let (sm, ss) = &stats[s - 1][0];
                    let (tm, ts) = feature_transform::reweight_tensors((&cm, &cs), (sm, ss), lambda)?;
                    let out = feature_transform::adain_tensor(&x, &tm, &ts, eps)?;
                    vec![StageTrace {
                        output: out.clone(),
                        stylized: out,
                        content_stats: (cm, cs),
                        style_stats: (sm.clone(), ss.clone()),
                        target_stats: (tm, ts),
                    }]
                }
            };
            trace.scales[s - 1] = Some(stages);
        }
        Ok(trace)
    }

    /// Decodes per-scale features (present exactly at the active scales) to
    /// an image in `[0, 1]`.
    pub fn decode(&self, transformed: &[Option<FeatureMap>; 4]) -> Result<Tensor> {
        for s in 1..=4 {
            if transformed[s - 1].is_some() != self.config.is_active(s) {
                return Err(Error::Config(format!(
                    "scale {s} presence does not match active scales {:?}",
                    self.config.active_scales
                )));
            }
        }
        let inputs = transformed.clone().map(|f| f.map(FeatureMap::into_tensor));
        self.decode_tensors(&inputs)
    }

    fn decode_tensors(&self, inputs: &[Option<Tensor>; 4]) -> Result<Tensor> {
        self.decoder.forward(inputs, self.config.deepest_scale())
    }

    fn check_frame(frame: &Tensor) -> Result<Tensor> {
        let frame = if frame.rank() == 3 { frame.unsqueeze(0)? } else { frame.clone() };
        let (_, c, h, w) = frame.dims4()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("frame {:?} must be 3xHxW with sides divisible by 8", frame.dims())));
        }
        Ok(frame)
    }

    /// Stylizes without recurrence. Frames may be batched along dim 0.
    pub fn forward_removal(&self, encoder: &EncoderWeights, frame: &Tensor, style: StyleInput<'_>, lambda: f64) -> Result<Tensor> {
        let frame = Self::check_frame(frame)?;
        let content = encoder.encode(&frame)?;
        self.forward_removal_features(&content, style, lambda)
    }

    pub fn forward_removal_features(&self, content: &MultiScaleFeatures, style: StyleInput<'_>, lambda: f64) -> Result<Tensor> {
        if self.config.variant != Variant::Removal {
            return Err(Error::Config("forward_removal called on a restoration network".into()));
        }
        let trace = self.transform(content, style, lambda)?;
        self.decode_tensors(&trace.outputs())
    }

    /// One recurrent step. `prev` is `None` exactly on the first frame of a
    /// clip; `flows` holds the image-resolution flow from the current frame
    /// to the previous one (one per batch sample, or one shared).
    pub fn forward_restoration(
        &self,
        encoder: &EncoderWeights,
        frame: &Tensor,
        style: StyleInput<'_>,
        prev: Option<&RecurrentState>,
        flows: Option<&[FlowField]>,
        lambda: f64,
    ) -> Result<(Tensor, RecurrentState)> {
        let frame = Self::check_frame(frame)?;
        let content = encoder.encode(&frame)?;
        self.forward_restoration_features(&content, style, prev, flows, lambda)
    }

    pub fn forward_restoration_features(
        &self,
        content: &MultiScaleFeatures,
        style: StyleInput<'_>,
        prev: Option<&RecurrentState>,
        flows: Option<&[FlowField]>,
        lambda: f64,
    ) -> Result<(Tensor, RecurrentState)> {
        if self.config.variant != Variant::Restoration {
            return Err(Error::Config("forward_restoration called on a removal network".into()));
        }
        let mode = self.config.temporal_mode;
        if mode == TemporalMode::NoFlow && flows.is_some() {
            return Err(Error::Config("flow supplied while the temporal mode is no_flow".into()));
        }
        let prev = match mode {
            TemporalMode::NoRecurrence => None,
            _ => prev,
        };
        if mode == TemporalMode::Full && prev.is_some() && flows.is_none() {
            return Err(Error::Config("full temporal mode needs flow for every frame after the first".into()));
        }
        let trace = self.transform(content, style, lambda)?;
        let transformed = trace.outputs();
        let mut next = RecurrentState::default();
        let mut decoder_in: [Option<Tensor>; 4] = Default::default();
        for &s in &self.config.active_scales {
            let x = transformed[s - 1].as_ref().expect("active scale transformed");
            let lstm = self.lstms[s - 1].as_ref().expect("restoration has recurrent units");
            let (n, _, h, w) = x.dims4()?;
            let zero = || ConvLstmState::zeros(n, lstm.hidden_channels, h, w, self.dtype());
            let state = match prev.and_then(|p| p.scales[s - 1].as_ref()) {
                None => zero()?,
                Some(st) => match (mode, flows) {
                    (TemporalMode::Full, Some(flows)) => {
                        let scaled =
                            flows.iter().map(|f| downscale_flow(f, 1 << (s - 1))).collect::<Result<Vec<_>>>()?;
                        st.warped(&scaled)?
                    }
                    _ => st.clone(),
                },
            };
            let new_state = lstm.step_tensor(x, &state)?;
            decoder_in[s - 1] = Some(new_state.hidden.clone());
            next.scales[s - 1] = Some(new_state);
        }
        Ok((self.decode_tensors(&decoder_in)?, next))
    }
}
