//! Inference: per-frame restoration-network stylization with smoothed style
//! switches, plus the standalone style-removal pass.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::feature_transform::{gaussian_smooth_style_vectors, StyleVector};
use crate::image_io::{list_frames, Image};
use crate::nn;
use crate::network::{NetworkConfig, Precision, RecurrentState, StyleInput, StyleNetwork};
use crate::temporal::{BlockMatcher, FlowEstimator, TemporalMode};
use crate::train::CheckpointMeta;

pub const DEFAULT_SMOOTH_KERNEL: usize = 20;

/// One style reference and the first frame it governs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRef {
    pub path: PathBuf,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylePlan {
    pub styles: Vec<StyleRef>,
    pub lambda: f64,
    /// Overrides for the checkpoint's consecutive-stage and whitening counts.
    pub consecutive: Option<usize>,
    pub whiten: Option<usize>,
    pub smooth_kernel: usize,
}

impl StylePlan {
    /// Parses `IMG[,IMG@START...]`; the first entry starts at frame 0.
    pub fn parse_styles(spec: &str) -> Result<Vec<StyleRef>> {
        spec.split(',')
            .enumerate()
            .map(|(i, item)| {
                let item = item.trim();
                let (path, start) = match item.rsplit_once('@') {
                    Some((p, s)) => {
                        let start = s
                            .parse::<usize>()
                            .map_err(|_| Error::InvalidInput(format!("bad start frame in `{item}`")))?;
                        (p, start)
                    }
                    None if i == 0 => (item, 0),
                    None => return Err(Error::InvalidInput(format!("style `{item}` needs an @START frame"))),
                };
                if path.is_empty() {
                    return Err(Error::InvalidInput("empty style path".into()));
                }
                Ok(StyleRef { path: PathBuf::from(path), start })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Domain(format!("stylization factor must lie in [0, 1], got {}", self.lambda)));
        }
        let Some(first) = self.styles.first() else {
            return Err(Error::InvalidInput("at least one style is required".into()));
        };
        if first.start != 0 {
            return Err(Error::InvalidInput("the first style must start at frame 0".into()));
        }
        if self.styles.windows(2).any(|w| w[1].start <= w[0].start) {
            return Err(Error::InvalidInput("style start frames must be strictly increasing".into()));
        }
        for (what, v) in [("consecutive", self.consecutive), ("whiten", self.whiten)] {
            if v.is_some_and(|v| !(1..=3).contains(&v)) {
                return Err(Error::Domain(format!("{what} count must be 1, 2 or 3")));
            }
        }
        if self.smooth_kernel == 0 {
            return Err(Error::Domain("smoothing kernel must be at least 1".into()));
        }
        Ok(())
    }

    /// Index into `styles` of the style governing frame `t`.
    pub fn active_style(&self, t: usize) -> usize {
        self.styles.iter().rposition(|s| s.start <= t).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderJob {
    pub input: PathBuf,
    pub output: PathBuf,
    pub checkpoint: PathBuf,
    pub plan: StylePlan,
    pub temporal_mode: Option<TemporalMode>,
    pub precision: Precision,
    /// Proceed even when plan overrides disagree with the checkpoint.
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    pub frames: usize,
    pub frame_seconds: Vec<f64>,
    pub mean_seconds: f64,
    pub warnings: Vec<String>,
}

/// Streaming state carried between consecutive frames.
#[derive(Debug, Default)]
pub struct FrameStream {
    prev_frame: Option<Image>,
    state: Option<RecurrentState>,
    index: usize,
}

/// Frozen encoder, restoration network and flow estimator.
pub struct Stylizer {
    pub encoder: EncoderWeights,
    pub network: StyleNetwork,
    flow: Box<dyn FlowEstimator>,
}

fn frame_tensor(img: &Image, dtype: DType) -> Result<candle_core::Tensor> {
    img.to_tensor(dtype, &Device::Cpu)
}

/// Checks plan overrides against the trained configuration. Mismatches are
/// errors unless `force`, in which case they are returned as warnings and
/// the override is applied.
pub fn reconcile_config(
    trained: &NetworkConfig,
    consecutive: Option<usize>,
    whiten: Option<usize>,
    force: bool,
) -> Result<(NetworkConfig, Vec<String>)> {
    let mut config = trained.clone();
    let mut warnings = Vec::new();
    for (what, want, have) in [
        ("consecutive", consecutive, trained.consecutive),
        ("whiten", whiten, trained.whiten_count),
    ] {
        let Some(want) = want else { continue };
        if want == have {
            continue;
        }
        let msg = format!("{what} count {want} differs from the trained value {have}");
        if !force {
            return Err(Error::Config(format!("{msg}; pass --force to proceed")));
        }
        if what == "consecutive" && want > have {
            return Err(Error::Config(format!("{msg}; the checkpoint has no weights for the extra stages")));
        }
        log::warn!("{msg}");
        warnings.push(msg);
        match what {
            "consecutive" => config.consecutive = want,
            _ => config.whiten_count = want,
        }
    }
    Ok((config, warnings))
}

/// Loads network `prefix` of a checkpoint under `config`, dropping the
/// arrays of transform stages beyond `config.consecutive`.
fn load_network(archive: &Archive, prefix: &str, config: NetworkConfig) -> Result<StyleNetwork> {
    let mut archive = archive.clone();
    let stale: Vec<String> = archive
        .names()
        .filter(|n| {
            n.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix(".transform.s"))
                .and_then(|r| r.split_once(".k"))
                .and_then(|(_, r)| r.split('.').next()?.parse::<usize>().ok())
                .is_some_and(|k| k >= config.consecutive)
        })
        .map(str::to_owned)
        .collect();
    for n in &stale {
        archive.remove(n);
    }
    StyleNetwork::from_archive(config, &archive, prefix)
}

impl Stylizer {
    pub fn new(encoder: EncoderWeights, network: StyleNetwork) -> Self {
        Self { encoder, network, flow: Box::new(BlockMatcher::default()) }
    }

    pub fn with_flow(mut self, flow: Box<dyn FlowEstimator>) -> Self {
        self.flow = flow;
        self
    }

    /// Builds the restoration side of a validated checkpoint.
    pub fn from_checkpoint(
        archive: &Archive,
        precision: Precision,
        temporal_mode: Option<TemporalMode>,
        consecutive: Option<usize>,
        whiten: Option<usize>,
        force: bool,
    ) -> Result<(Self, Vec<String>)> {
        let meta = CheckpointMeta::from_archive(archive)?;
        let (mut config, warnings) = reconcile_config(&meta.restoration, consecutive, whiten, force)?;
        config.precision = precision;
        if let Some(mode) = temporal_mode {
            config.temporal_mode = mode;
        }
        let encoder = EncoderWeights::from_archive(archive, "encoder", precision.dtype())?;
        let network = load_network(archive, "restoration", config)?;
        Ok((Self::new(encoder, network), warnings))
    }

    pub fn dtype(&self) -> DType {
        self.network.dtype()
    }

    /// Style vector of a style image.
    pub fn style_vector(&self, style: &Image, frame_index: usize) -> Result<StyleVector> {
        nn::no_grad(|| self.style_vector_tracked(style, frame_index))
    }

    fn style_vector_tracked(&self, style: &Image, frame_index: usize) -> Result<StyleVector> {
        let style = style.crop_to_multiple(8)?;
        let feats = self.encoder.encode(&frame_tensor(&style, self.dtype())?)?;
        self.network.style_vector(&feats, frame_index)
    }

    /// Smoothed per-frame style vectors for `frames` frames.
    ///
    /// The sequence is built over at least `last start + kernel` frames so
    /// that a prefix render sees exactly the vectors of a full render.
    pub fn plan_vectors(&self, plan: &StylePlan, styles: &[StyleVector], frames: usize) -> Result<Vec<StyleVector>> {
        if styles.len() != plan.styles.len() {
            return Err(Error::InvalidInput("one style vector per plan entry expected".into()));
        }
        let last = plan.styles.last().map_or(0, |s| s.start);
        let len = frames.max(last + plan.smooth_kernel);
        let seq: Vec<StyleVector> = (0..len)
            .map(|t| StyleVector { frame_index: t, ..styles[plan.active_style(t)].clone() })
            .collect();
        let mut smoothed = gaussian_smooth_style_vectors(&seq, plan.smooth_kernel)?;
        smoothed.truncate(frames);
        Ok(smoothed)
    }

    /// Stylizes the next frame of `stream`.
    pub fn render_frame(&self, frame: &Image, style: &StyleVector, lambda: f64, stream: &mut FrameStream) -> Result<Image> {
        nn::no_grad(|| self.render_frame_tracked(frame, style, lambda, stream))
    }

    fn render_frame_tracked(&self, frame: &Image, style: &StyleVector, lambda: f64, stream: &mut FrameStream) -> Result<Image> {
        let padded = frame.pad_to_multiple(8);
        let content = self.encoder.encode(&frame_tensor(&padded, self.dtype())?)?;
        let mode = self.network.config().temporal_mode;
        let flows = match (&stream.prev_frame, mode) {
            (Some(prev), TemporalMode::Full) => Some(vec![self.flow.estimate(&padded, prev)?]),
            _ => None,
        };
        let (out, state) = self.network.forward_restoration_features(
            &content,
            StyleInput::Vector(style),
            stream.state.as_ref(),
            flows.as_deref(),
            lambda,
        )?;
        stream.state = Some(state);
        stream.prev_frame = (mode == TemporalMode::Full).then_some(padded);
        stream.index += 1;
        Image::from_tensor(&out, 0)?.crop(0, 0, frame.height, frame.width)
    }

    /// Renders `frames` in order under `plan`, returning outputs and
    /// per-frame seconds.
    pub fn render_sequence(&self, frames: &[Image], styles: &[Image], plan: &StylePlan) -> Result<(Vec<Image>, Vec<f64>)> {
        plan.validate()?;
        let vectors = styles.iter().enumerate().map(|(i, s)| self.style_vector(s, i)).collect::<Result<Vec<_>>>()?;
        let per_frame = self.plan_vectors(plan, &vectors, frames.len())?;
        let mut stream = FrameStream::default();
        let mut outputs = Vec::with_capacity(frames.len());
        let mut seconds = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            let start = Instant::now();
            let out = self
                .render_frame(frame, &per_frame[t], plan.lambda, &mut stream)
                .map_err(|e| Error::Frame { index: t, source: Box::new(e) })?;
            seconds.push(start.elapsed().as_secs_f64());
            outputs.push(out);
        }
        Ok((outputs, seconds))
    }
}

fn load_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let frames = list_frames(dir)?;
    if frames.is_empty() {
        return Err(Error::InvalidInput(format!("no PNG frames in {}", dir.display())));
    }
    Ok(frames)
}

fn output_path(output: &Path, input: &Path, t: usize) -> PathBuf {
    match input.file_name() {
        Some(name) => output.join(name),
        None => output.join(format!("{t:06}.png")),
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 }
}

/// Renders a PNG frame directory. The checkpoint is validated before any
/// frame is read; frames stream one at a time.
pub fn stylize_video(job: &RenderJob) -> Result<RenderReport> {
    job.plan.validate()?;
    let archive = Archive::load(&job.checkpoint)?;
    let (stylizer, warnings) = Stylizer::from_checkpoint(
        &archive,
        job.precision,
        job.temporal_mode,
        job.plan.consecutive,
        job.plan.whiten,
        job.force,
    )?;
    let styles = job
        .plan
        .styles
        .iter()
        .enumerate()
        .map(|(i, s)| stylizer.style_vector(&Image::load_png(&s.path)?, i))
        .collect::<Result<Vec<_>>>()?;
    let inputs = load_frames(&job.input)?;
    let vectors = stylizer.plan_vectors(&job.plan, &styles, inputs.len())?;
    std::fs::create_dir_all(&job.output).map_err(|e| Error::io(&job.output, e))?;
    let mut stream = FrameStream::default();
    let mut seconds = Vec::with_capacity(inputs.len());
    for (t, path) in inputs.iter().enumerate() {
        let start = Instant::now();
        let frame_err = |e| Error::Frame { index: t, source: Box::new(e) };
        let frame = Image::load_png(path).map_err(frame_err)?;
        let out = stylizer.render_frame(&frame, &vectors[t], job.plan.lambda, &mut stream).map_err(frame_err)?;
        out.save_png(output_path(&job.output, path, t))?;
        seconds.push(start.elapsed().as_secs_f64());
        log::info!("frame {t}: {:.3}s", seconds[t]);
    }
    let report = RenderReport { frames: inputs.len(), mean_seconds: mean(&seconds), frame_seconds: seconds, warnings };
    let report_path = job.output.join("render_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

/// Removal network of a checkpoint.
pub struct StyleRemover {
    pub encoder: EncoderWeights,
    pub network: StyleNetwork,
}

impl StyleRemover {
    pub fn from_checkpoint(archive: &Archive, precision: Precision, whiten: Option<usize>, force: bool) -> Result<(Self, Vec<String>)> {
        let meta = CheckpointMeta::from_archive(archive)?;
        let (mut config, warnings) = reconcile_config(&meta.removal, None, whiten, force)?;
        config.precision = precision;
        let encoder = EncoderWeights::from_archive(archive, "encoder", precision.dtype())?;
        let network = load_network(archive, "removal", config)?;
        Ok((Self { encoder, network }, warnings))
    }

    /// Each frame independently, restyled towards `style`.
    pub fn remove(&self, frame: &Image, style: &Image, lambda: f64) -> Result<Image> {
        nn::no_grad(|| self.remove_tracked(frame, style, lambda))
    }

    fn remove_tracked(&self, frame: &Image, style: &Image, lambda: f64) -> Result<Image> {
        let padded = frame.pad_to_multiple(8);
        let dtype = self.network.dtype();
        let style = self.encoder.encode(&frame_tensor(&style.crop_to_multiple(8)?, dtype)?)?;
        let out = self.network.forward_removal(&self.encoder, &frame_tensor(&padded, dtype)?, StyleInput::Features(&style), lambda)?;
        Image::from_tensor(&out, 0)?.crop(0, 0, frame.height, frame.width)
    }
}

/// Runs the removal network over a frame directory.
pub fn remove_style(job: &RenderJob) -> Result<RenderReport> {
    job.plan.validate()?;
    let archive = Archive::load(&job.checkpoint)?;
    let (remover, warnings) = StyleRemover::from_checkpoint(&archive, job.precision, job.plan.whiten, job.force)?;
    let style = Image::load_png(&job.plan.styles[0].path)?;
    let inputs = load_frames(&job.input)?;
    std::fs::create_dir_all(&job.output).map_err(|e| Error::io(&job.output, e))?;
    let mut seconds = Vec::with_capacity(inputs.len());
    for (t, path) in inputs.iter().enumerate() {
        let start = Instant::now();
        let frame_err = |e| Error::Frame { index: t, source: Box::new(e) };
        let frame = Image::load_png(path).map_err(frame_err)?;
        let out = remover.remove(&frame, &style, job.plan.lambda).map_err(frame_err)?;
        out.save_png(output_path(&job.output, path, t))?;
        seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(RenderReport { frames: inputs.len(), mean_seconds: mean(&seconds), frame_seconds: seconds, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_style_lists() {
        let s = StylePlan::parse_styles("a.png,b.png@10,c.png@25").unwrap();
        assert_eq!(s.iter().map(|r| r.start).collect::<Vec<_>>(), vec![0, 10, 25]);
        assert_eq!(s[1].path, PathBuf::from("b.png"));
        assert!(StylePlan::parse_styles("a.png,b.png").is_err());
        assert!(StylePlan::parse_styles("a.png,b.png@x").is_err());
    }

    fn plan(starts: &[usize], lambda: f64) -> StylePlan {
        StylePlan {
            styles: starts.iter().map(|&start| StyleRef { path: "s.png".into(), start }).collect(),
            lambda,
            consecutive: None,
            whiten: None,
            smooth_kernel: DEFAULT_SMOOTH_KERNEL,
        }
    }

    #[test]
    fn plan_validation() {
        assert!(plan(&[0, 10], 1.0).validate().is_ok());
        assert!(plan(&[0, 10], 1.5).validate().is_err());
        assert!(plan(&[1], 1.0).validate().is_err());
        assert!(plan(&[0, 10, 10], 1.0).validate().is_err());
        assert_eq!(plan(&[0, 10], 1.0).active_style(9), 0);
        assert_eq!(plan(&[0, 10], 1.0).active_style(10), 1);
    }

    #[test]
    fn config_overrides_need_force() {
        let trained = NetworkConfig::restoration();
        assert!(reconcile_config(&trained, None, Some(3), false).is_err());
        let (cfg, warnings) = reconcile_config(&trained, None, Some(3), true).unwrap();
        assert_eq!((cfg.whiten_count, warnings.len()), (3, 1));
        assert!(reconcile_config(&trained, Some(trained.consecutive + 1), None, true).is_err());
        let (cfg, w) = reconcile_config(&trained, Some(trained.consecutive), Some(trained.whiten_count), false).unwrap();
        assert_eq!((cfg, w.len()), (trained, 0));
    }
}
