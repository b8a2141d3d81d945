//! Joint removal → restoration training with a content-only objective.
//!
//! Each clip of five frames is first restyled by the removal network with a
//! random style reference; the restoration network then takes those outputs
//! as content and the original frames as style references. Both outputs are
//! scored against the original frames with the `conv4_1` content loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::encoder::{EncoderWeights, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::image_io::{list_frames, Image};
use crate::network::{NetworkConfig, RecurrentState, StyleInput, StyleNetwork, Variant};
use crate::nn::{self, ParamSet};
use crate::temporal::{BlockMatcher, FlowEstimator, FlowField, TemporalMode};

pub const CLIP_LEN: usize = 5;

/// Learning-rate schedule over 1-based epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `warm_lr` at epoch 1, geometric decay to `base_lr` at epoch
    /// `1 + warm_epochs`, then cosine decay towards zero.
    Warm { warm_lr: f64, base_lr: f64, warm_epochs: usize },
    Constant { lr: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Warm { warm_lr: 0.01, base_lr: 1e-5, warm_epochs: 5 }
    }
}

impl Schedule {
    pub fn lr(&self, epoch: usize, total_epochs: usize) -> f64 {
        match *self {
            Schedule::Constant { lr } => lr,
            Schedule::Warm { warm_lr, base_lr, warm_epochs } => {
                let epoch = epoch.max(1);
                let settle = 1 + warm_epochs;
                if epoch < settle {
                    let t = (epoch - 1) as f64 / warm_epochs as f64;
                    warm_lr * (base_lr / warm_lr).powf(t)
                } else {
                    let remaining = (total_epochs + 1).saturating_sub(settle).max(1) as f64;
                    let progress = ((epoch - settle) as f64 / remaining).min(1.0);
                    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch; defaults to one pass over all clip starts.
    pub steps_per_epoch: Option<usize>,
    pub momentum: f64,
    pub schedule: Schedule,
    /// Weight of the restoration term in the objective.
    pub loss_weight: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Draw the restoration stylization factor uniformly from `[0, 1]` per clip.
    pub sample_stylization_factor: bool,
    pub crop: usize,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Restoration network layout; the removal network mirrors it.
    pub network: NetworkConfig,
    pub encoder: Option<PathBuf>,
    pub content_root: Option<PathBuf>,
    pub style_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            steps_per_epoch: None,
            momentum: 0.9,
            schedule: Schedule::default(),
            loss_weight: 1.0,
            seed: 0,
            batch_size: 1,
            sample_stylization_factor: false,
            crop: 128,
            grad_clip: None,
            network: NetworkConfig::restoration(),
            encoder: None,
            content_root: None,
            style_root: None,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loss_weight >= 0.0) {
            return Err(Error::Config(format!("loss weight must be non-negative, got {}", self.loss_weight)));
        }
        if self.batch_size == 0 || self.crop == 0 || self.crop % 8 != 0 {
            return Err(Error::Config("batch size must be positive and crop a positive multiple of 8".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.network.clone().validated()?;
        Ok(())
    }

    pub fn restoration_config(&self) -> NetworkConfig {
        NetworkConfig { variant: Variant::Restoration, ..self.network.clone() }
    }

    pub fn removal_config(&self) -> NetworkConfig {
        NetworkConfig { variant: Variant::Removal, temporal_mode: TemporalMode::NoRecurrence, ..self.network.clone() }
    }
}

/// Crop window shared by every frame of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

#[derive(Clone, Debug)]
pub struct ClipSample {
    pub frames: Vec<Image>,
    pub style: Image,
    pub crop: CropWindow,
}

impl ClipSample {
    pub fn new(frames: Vec<Image>, style: Image) -> Result<Self> {
        if frames.len() != CLIP_LEN {
            return Err(Error::InvalidInput(format!("a clip has {CLIP_LEN} frames, got {}", frames.len())));
        }
        let shape = frames[0].shape();
        if frames.iter().any(|f| f.shape() != shape) {
            return Err(Error::Shape("clip frames differ in size".into()));
        }
        let crop = CropWindow { top: 0, left: 0, size: shape.0.min(shape.1) };
        Ok(Self { frames, style, crop })
    }
}

#[derive(Clone, Debug)]
enum Source {
    Path(PathBuf),
    Memory(Image),
}

impl Source {
    fn load(&self) -> Result<Image> {
        match self {
            Source::Path(p) => Image::load_png(p),
            Source::Memory(img) => Ok(img.clone()),
        }
    }

    fn dims(&self) -> Result<(usize, usize)> {
        match self {
            Source::Path(p) => {
                let (w, h) = image::image_dimensions(p).map_err(|source| Error::Image { path: p.clone(), source })?;
                Ok((h as usize, w as usize))
            }
            Source::Memory(img) => Ok(img.shape()),
        }
    }
}

/// Videos as ordered frame lists plus a pool of style images.
#[derive(Clone, Debug)]
pub struct Dataset {
    videos: Vec<Vec<Source>>,
    styles: Vec<Source>,
    crop: usize,
}

impl Dataset {
    fn build(videos: Vec<(String, Vec<Source>)>, styles: Vec<Source>, crop: usize) -> Result<Self> {
        if styles.is_empty() {
            return Err(Error::InvalidInput("no style images".into()));
        }
        let mut kept = Vec::new();
        for (name, frames) in videos {
            if frames.len() < CLIP_LEN {
                log::warn!("skipping video `{name}`: {} frames, need {CLIP_LEN}", frames.len());
                continue;
            }
            let (h, w) = frames[0].dims()?;
            if h < crop || w < crop {
                log::warn!("skipping video `{name}`: {h}x{w} is smaller than the {crop}px crop");
                continue;
            }
            kept.push(frames);
        }
        if kept.is_empty() {
            return Err(Error::InvalidInput("dataset has no usable videos".into()));
        }
        Ok(Self { videos: kept, styles, crop })
    }

    /// Each subdirectory of `content_root` is a video of PNG frames; every PNG
    /// in `style_root` is a style image.
    pub fn ingest(content_root: impl AsRef<Path>, style_root: impl AsRef<Path>, crop: usize) -> Result<Self> {
        let content_root = content_root.as_ref();
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(content_root)
            .map_err(|e| Error::io(content_root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let videos = dirs
            .into_iter()
            .map(|d| {
                let frames = list_frames(&d)?.into_iter().map(Source::Path).collect();
                Ok((d.display().to_string(), frames))
            })
            .collect::<Result<Vec<_>>>()?;
        let styles = list_frames(style_root)?.into_iter().map(Source::Path).collect();
        Self::build(videos, styles, crop)
    }

    pub fn from_memory(videos: Vec<Vec<Image>>, styles: Vec<Image>, crop: usize) -> Result<Self> {
        let videos = videos
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("video{i}"), v.into_iter().map(Source::Memory).collect()))
            .collect();
        Self::build(videos, styles.into_iter().map(Source::Memory).collect(), crop)
    }

    /// Every `(video, first frame)` pair that starts a full clip.
    pub fn clip_starts(&self) -> Vec<(usize, usize)> {
        self.videos
            .iter()
            .enumerate()
            .flat_map(|(v, frames)| (0..=frames.len() - CLIP_LEN).map(move |s| (v, s)))
            .collect()
    }

    pub fn num_styles(&self) -> usize {
        self.styles.len()
    }

    /// A random clip with one crop window for all five frames and one
    /// uniformly drawn style image.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<ClipSample> {
        let starts = self.clip_starts();
        let (v, s) = starts[rng.random_range(0..starts.len())];
        let frames = self.videos[v][s..s + CLIP_LEN].iter().map(Source::load).collect::<Result<Vec<_>>>()?;
        let (h, w) = frames[0].shape();
        if frames.iter().any(|f| f.shape() != (h, w)) {
            return Err(Error::Shape(format!("frames of video {v} differ in size")));
        }
        let crop = CropWindow { top: rng.random_range(0..=h - self.crop), left: rng.random_range(0..=w - self.crop), size: self.crop };
        let frames = frames
            .iter()
            .map(|f| f.crop(crop.top, crop.left, crop.size, crop.size))
            .collect::<Result<Vec<_>>>()?;
        let style = self.styles[rng.random_range(0..self.styles.len())].load()?;
        let style = if style.height >= self.crop && style.width >= self.crop {
            let top = rng.random_range(0..=style.height - self.crop);
            let left = rng.random_range(0..=style.width - self.crop);
            style.crop(top, left, self.crop, self.crop)?
        } else {
            style.crop_to_multiple(8)?
        };
        Ok(ClipSample { frames, style, crop })
    }
}

/// Mean squared difference of `conv4_1` features.
pub fn content_loss(generated: &Tensor, target: &Tensor, encoder: &EncoderWeights) -> Result<Tensor> {
    if generated.dims() != target.dims() {
        return Err(Error::Shape(format!("content loss operands {:?} vs {:?}", generated.dims(), target.dims())));
    }
    let a = encoder.encode(generated)?;
    let b = encoder.encode(target)?;
    nn::mse(a.scale(4), b.scale(4))
}

/// Sum over frames of removal loss plus weighted restoration loss.
pub fn combine_losses(removal: &[f64], restoration: &[f64], loss_weight: f64) -> Result<f64> {
    if removal.len() != restoration.len() {
        return Err(Error::Shape(format!("{} removal losses vs {} restoration losses", removal.len(), restoration.len())));
    }
    Ok(removal.iter().zip(restoration).map(|(r, s)| r + loss_weight * s).sum())
}

/// Per-frame content losses of `(N, 3, H, W)` outputs against `targets`.
fn per_frame_content(generated: &MultiScaleFeatures, targets: &MultiScaleFeatures) -> Result<Tensor> {
    let diff = (generated.scale(4) - targets.scale(4))?.sqr()?;
    Ok(diff.flatten_from(1)?.mean(1)?)
}

/// The clip objective on generated images: removal and restoration outputs
/// and the original frames, each `CLIP_LEN` images.
pub fn total_loss(
    encoder: &EncoderWeights,
    removal_outputs: &[Tensor],
    restoration_outputs: &[Tensor],
    frames: &[Tensor],
    loss_weight: f64,
) -> Result<Tensor> {
    if removal_outputs.len() != frames.len() || restoration_outputs.len() != frames.len() {
        return Err(Error::Shape("removal, restoration and frame lists must have equal length".into()));
    }
    let cat = |xs: &[Tensor]| -> Result<Tensor> {
        let xs = xs.iter().map(|x| if x.rank() == 3 { x.unsqueeze(0) } else { Ok(x.clone()) }).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&xs, 0)?)
    };
    let target = encoder.encode(&cat(frames)?)?;
    let l1 = per_frame_content(&encoder.encode(&cat(removal_outputs)?)?, &target)?.sum_all()?;
    let l2 = per_frame_content(&encoder.encode(&cat(restoration_outputs)?)?, &target)?.sum_all()?;
    Ok((l1 + (l2 * loss_weight)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_removal: f64,
    pub loss_restoration: f64,
    pub loss_total: f64,
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub buffers: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, buffers: BTreeMap::new() }
    }

    fn step(&mut self, prefix: &str, params: &ParamSet, grads: &GradStore, lr: f64, scale: f64) -> Result<()> {
        for (name, var) in params.iter() {
            let Some(grad) = grads.get(var) else { continue };
            let grad = if scale != 1.0 { (grad * scale)? } else { grad.clone() };
            let key = format!("{prefix}.{name}");
            let buf = match self.buffers.get(&key) {
                Some(v) => ((v * self.momentum)? + grad)?,
                None => grad,
            };
            var.set(&(var.as_tensor() - (&buf * lr)?)?)?;
            self.buffers.insert(key, buf);
        }
        Ok(())
    }
}

fn grad_norm(sets: &[&ParamSet], grads: &GradStore) -> Result<f64> {
    let mut total = 0.0;
    for set in sets {
        for (_, var) in set.iter() {
            if let Some(g) = grads.get(var) {
                total += nn::scalar(&g.sqr()?.sum_all()?)?;
            }
        }
    }
    Ok(total.sqrt())
}

/// Both networks, the frozen encoder, and optimizer state.
pub struct Trainer {
    pub config: TrainConfig,
    pub encoder: EncoderWeights,
    pub removal: StyleNetwork,
    pub restoration: StyleNetwork,
    pub optimizer: SgdMomentum,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<StepMetrics>,
    flow: BlockMatcher,
}

impl Trainer {
    pub fn new(config: TrainConfig, encoder: EncoderWeights) -> Result<Self> {
        config.validate()?;
        let removal = StyleNetwork::new(config.removal_config(), config.seed.wrapping_mul(2).wrapping_add(1))?;
        let restoration = StyleNetwork::new(config.restoration_config(), config.seed.wrapping_mul(2).wrapping_add(2))?;
        let optimizer = SgdMomentum::new(config.momentum);
        Ok(Self { config, encoder, removal, restoration, optimizer, step: 0, epoch: 0, history: Vec::new(), flow: BlockMatcher::default() })
    }

    /// Per-step generator, so resumed runs draw the same samples.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        rng
    }

    pub fn sample_batch(&self, dataset: &Dataset) -> Result<Vec<ClipSample>> {
        let mut rng = self.step_rng(self.step);
        (0..self.config.batch_size).map(|_| dataset.sample(&mut rng)).collect()
    }

    fn dtype(&self) -> DType {
        self.restoration.dtype()
    }

    fn stack(&self, images: &[Image]) -> Result<Tensor> {
        let ts = images.iter().map(|i| i.to_tensor(self.dtype(), &Device::Cpu)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    /// Removal and restoration outputs of one clip plus the clip's loss terms.
    pub fn clip_forward(&self, clip: &ClipSample, restoration_lambda: f64) -> Result<ClipForward> {
        let frames = self.stack(&clip.frames)?;
        let content = self.encoder.encode(&frames)?;
        let style = self.encoder.encode(&clip.style.to_tensor(self.dtype(), &Device::Cpu)?)?;
        let removed = self.removal.forward_removal_features(&content, StyleInput::Features(&style), 1.0)?;
        let removed_feats = self.encoder.encode(&removed)?;
        let loss_removal = per_frame_content(&removed_feats, &content)?.sum_all()?;

        let mode = self.restoration.config().temporal_mode;
        let mut state: Option<RecurrentState> = None;
        let mut restored = Vec::with_capacity(CLIP_LEN);
        for t in 0..clip.frames.len() {
            let pick = |f: &MultiScaleFeatures| -> Result<MultiScaleFeatures> {
                let taps = f.taps.iter().map(|x| x.narrow(0, t, 1)).collect::<candle_core::Result<Vec<_>>>()?;
                Ok(MultiScaleFeatures { taps: taps.try_into().expect("four taps") })
            };
            let flow: Option<Vec<FlowField>> = match (mode, t) {
                (TemporalMode::Full, t) if t > 0 => Some(vec![self.flow.estimate(&clip.frames[t], &clip.frames[t - 1])?]),
                _ => None,
            };
            let (out, next) = self.restoration.forward_restoration_features(
                &pick(&removed_feats)?,
                StyleInput::Features(&pick(&content)?),
                state.as_ref(),
                flow.as_deref(),
                restoration_lambda,
            )?;
            restored.push(out);
            state = Some(next);
        }
        let restored = Tensor::cat(&restored, 0)?;
        let restored_feats = self.encoder.encode(&restored)?;
        let loss_restoration = per_frame_content(&restored_feats, &content)?.sum_all()?;
        Ok(ClipForward { removed, restored, loss_removal, loss_restoration })
    }

    /// One optimizer update of both networks on `batch`.
    pub fn train_step(&mut self, batch: &[ClipSample], lr: f64) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut rng = self.step_rng(self.step);
        // decorrelate from the data stream of the same step
        rng.set_word_pos(1 << 40);
        let mut total: Option<Tensor> = None;
        let (mut l1_sum, mut l2_sum) = (0.0, 0.0);
        for clip in batch {
            let lambda = if self.config.sample_stylization_factor { rng.random::<f64>() } else { 1.0 };
            let fwd = self.clip_forward(clip, lambda)?;
            l1_sum += nn::scalar(&fwd.loss_removal)?;
            l2_sum += nn::scalar(&fwd.loss_restoration)?;
            let clip_total = (fwd.loss_removal + (fwd.loss_restoration * self.config.loss_weight)?)?;
            total = Some(match total {
                None => clip_total,
                Some(t) => (t + clip_total)?,
            });
        }
        let n = batch.len() as f64;
        let total = (total.expect("non-empty batch") / n)?;
        let loss_total = nn::scalar(&total)?;
        if !loss_total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("removal {}, restoration {}", l1_sum / n, l2_sum / n),
            });
        }
        let grads = total.backward()?;
        let scale = match self.config.grad_clip {
            Some(max) => {
                let norm = grad_norm(&[self.removal.params(), self.restoration.params()], &grads)?;
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.optimizer.step("removal", self.removal.params(), &grads, lr, scale)?;
        self.optimizer.step("restoration", self.restoration.params(), &grads, lr, scale)?;
        self.step += 1;
        let metrics = StepMetrics {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss_removal: l1_sum / n,
            loss_restoration: l2_sum / n,
            loss_total,
        };
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.config.schedule.lr(epoch, self.config.epochs)
    }

    pub fn steps_per_epoch(&self, dataset: &Dataset) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or_else(|| dataset.clip_starts().len().div_ceil(self.config.batch_size))
            .max(1)
    }

    pub fn to_checkpoint(&self) -> Result<Archive> {
        let mut a = Archive::new("checkpoint");
        self.encoder.write_to(&mut a, "encoder")?;
        self.removal.write_to(&mut a, "removal")?;
        self.restoration.write_to(&mut a, "restoration")?;
        for (name, buf) in &self.optimizer.buffers {
            a.insert(format!("optim.{name}"), buf)?;
        }
        let meta = CheckpointMeta {
            epoch: self.epoch,
            step: self.step,
            train_config: self.config.clone(),
            removal: self.removal.config().clone(),
            restoration: self.restoration.config().clone(),
            history: self.history.clone(),
        };
        a.extra = serde_json::to_value(meta)?;
        Ok(a)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn from_checkpoint(archive: &Archive) -> Result<Self> {
        let meta = CheckpointMeta::from_archive(archive)?;
        let dtype = meta.restoration.precision.dtype();
        let encoder = EncoderWeights::from_archive(archive, "encoder", dtype)?;
        let removal = StyleNetwork::from_archive(meta.removal.clone(), archive, "removal")?;
        let restoration = StyleNetwork::from_archive(meta.restoration.clone(), archive, "restoration")?;
        let mut optimizer = SgdMomentum::new(meta.train_config.momentum);
        optimizer.buffers = archive.tensors_with_prefix("optim", &Device::Cpu)?;
        Ok(Self {
            config: meta.train_config,
            encoder,
            removal,
            restoration,
            optimizer,
            step: meta.step,
            epoch: meta.epoch,
            history: meta.history,
            flow: BlockMatcher::default(),
        })
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Archive::load(path)?)
    }
}

pub struct ClipForward {
    pub removed: Tensor,
    pub restored: Tensor,
    pub loss_removal: Tensor,
    pub loss_restoration: Tensor,
}

/// Run metadata stored alongside checkpoint arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    pub train_config: TrainConfig,
    pub removal: NetworkConfig,
    pub restoration: NetworkConfig,
    pub history: Vec<StepMetrics>,
}

impl CheckpointMeta {
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if archive.kind != "checkpoint" {
            return Err(Error::archive("<manifest>", format!("expected a checkpoint, found `{}`", archive.kind)));
        }
        Ok(serde_json::from_value(archive.extra.clone())?)
    }
}

pub fn write_history_csv(history: &[StepMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for m in history {
        w.serialize(m).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs the schedule from the trainer's current epoch, checkpointing after
/// every epoch when an output directory is configured.
pub fn fit(trainer: &mut Trainer, dataset: &Dataset) -> Result<Archive> {
    let steps = trainer.steps_per_epoch(dataset);
    let out_dir = trainer.config.output_dir.clone();
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while trainer.epoch < trainer.config.epochs {
        let epoch = trainer.epoch + 1;
        let lr = trainer.lr_for_epoch(epoch);
        trainer.epoch = epoch;
        for _ in 0..steps {
            let batch = trainer.sample_batch(dataset)?;
            let m = trainer.train_step(&batch, lr)?;
            log::info!("epoch {epoch} step {} lr {lr:.3e} loss {:.6}", m.step, m.loss_total);
        }
        if let Some(dir) = &out_dir {
            trainer.save_checkpoint(dir.join(format!("checkpoint_epoch{epoch:03}.safetensors")))?;
            trainer.save_checkpoint(dir.join("checkpoint_latest.safetensors"))?;
            write_history_csv(&trainer.history, dir.join("metrics.csv"))?;
        }
    }
    trainer.to_checkpoint()
}
