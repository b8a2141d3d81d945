//! Image-quality metrics, the inference timing benchmark and report output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::encoder::{EncoderWeights, TAP_CHANNELS};
use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::nn;
use crate::stylize::{FrameStream, Stylizer};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.map(|v| v / total)
}

/// Separable valid-mode Gaussian filter of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("ssim operands {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    if a.data.iter().chain(&b.data).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("ssim inputs must lie in [0, 1]".into()));
    }
    let k = ssim_kernel();
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&prod(&x, &x), h, w, &k);
        let syy = filter_valid(&prod(&y, &y), h, w, &k);
        let sxy = filter_valid(&prod(&x, &y), h, w, &k);
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

/// Layer and channel weights of the perceptual distance.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualWeights {
    pub layers: [f64; 4],
    /// Per-channel weights for each tap; `None` weighs channels equally.
    pub channels: Option<[Vec<f64>; 4]>,
}

impl Default for PerceptualWeights {
    fn default() -> Self {
        Self::uncalibrated()
    }
}

impl PerceptualWeights {
    pub fn uncalibrated() -> Self {
        Self { layers: [1.0; 4], channels: None }
    }

    pub fn is_calibrated(&self) -> bool {
        self.channels.is_some()
    }

    pub fn label(&self) -> &'static str {
        if self.is_calibrated() { "calibrated" } else { "uncalibrated" }
    }

    /// Learned weights from a `perceptual-weights` archive holding arrays
    /// `lin.s1` … `lin.s4` of non-negative per-channel weights.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if archive.kind != "perceptual-weights" {
            return Err(Error::archive("<manifest>", format!("expected perceptual-weights, found `{}`", archive.kind)));
        }
        let mut channels: [Vec<f64>; 4] = Default::default();
        for s in 1..=4 {
            let name = format!("lin.s{s}");
            let v: Vec<f64> = archive.tensor(&name, &Device::Cpu)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            if v.len() != TAP_CHANNELS[s - 1] || v.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::archive(&name, format!("need {} non-negative weights", TAP_CHANNELS[s - 1])));
            }
            channels[s - 1] = v;
        }
        Ok(Self { layers: [1.0; 4], channels: Some(channels) })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn encode_pair(a: &Image, b: &Image, encoder: &EncoderWeights) -> Result<[(Tensor, Tensor); 4]> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("operands {:?} vs {:?}", a.shape(), b.shape())));
    }
    let dtype = encoder.dtype();
    let batch = Tensor::cat(&[a.pad_to_multiple(8).to_tensor(dtype, &Device::Cpu)?, b.pad_to_multiple(8).to_tensor(dtype, &Device::Cpu)?], 0)?;
    let f = encoder.encode(&batch)?;
    let taps = f.taps.iter().map(|t| Ok((t.get(0)?, t.get(1)?))).collect::<Result<Vec<_>>>()?;
    Ok(taps.try_into().expect("four taps"))
}

fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(0)?.sqrt()? + 1e-10)?;
    Ok(f.broadcast_div(&norm)?)
}

/// Layer-weighted mean over the four taps of the spatially averaged,
/// channel-weighted squared difference of unit-normalized features.
pub fn perceptual_distance(a: &Image, b: &Image, encoder: &EncoderWeights, weights: &PerceptualWeights) -> Result<f64> {
    let taps = encode_pair(a, b, encoder)?;
    let mut num = 0.0;
    for (s, (fa, fb)) in taps.iter().enumerate() {
        let diff = (unit_normalize(fa)? - unit_normalize(fb)?)?.sqr()?.to_dtype(DType::F64)?;
        let diff = match &weights.channels {
            Some(ch) => diff.broadcast_mul(&Tensor::from_slice(&ch[s], (ch[s].len(), 1, 1), &Device::Cpu)?)?,
            None => diff,
        };
        let d = nn::scalar(&diff.sum_keepdim(0)?.mean_all()?)?;
        num += weights.layers[s] * d;
    }
    Ok(num / weights.layers.iter().sum::<f64>())
}

/// Mean squared `conv4_1` difference.
pub fn content_distance(a: &Image, b: &Image, encoder: &EncoderWeights) -> Result<f64> {
    let taps = encode_pair(a, b, encoder)?;
    nn::scalar(&nn::mse(&taps[3].0, &taps[3].1)?)
}

fn gram(f: &Tensor) -> Result<Tensor> {
    let (c, h, w) = f.dims3()?;
    let flat = f.to_dtype(DType::F64)?.reshape((c, h * w))?;
    Ok((flat.matmul(&flat.t()?)? / (c * h * w) as f64)?)
}

/// Mean over taps of the mean squared difference of `F·Fᵀ / (c·h·w)` Gram
/// matrices. Each tap is a `(C, H, W)` map; spatial sizes may differ between
/// the two sides since the Gram matrix discards them.
pub fn gram_loss_features(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("{} vs {} feature taps", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        if fa.rank() != 3 || fb.rank() != 3 || fa.dims()[0] != fb.dims()[0] {
            return Err(Error::Shape(format!("gram operands {:?} vs {:?}", fa.dims(), fb.dims())));
        }
        total += nn::scalar(&nn::mse(&gram(fa)?, &gram(fb)?)?)?;
    }
    Ok(total / a.len() as f64)
}

pub fn gram_loss(a: &Image, b: &Image, encoder: &EncoderWeights) -> Result<f64> {
    let taps = encode_pair(a, b, encoder)?;
    let (fa, fb): (Vec<Tensor>, Vec<Tensor>) = taps.into_iter().unzip();
    gram_loss_features(&fa, &fb)
}

/// Gram loss of an output against a style reference of any size.
pub fn style_distance(output: &Image, style: &Image, encoder: &EncoderWeights) -> Result<f64> {
    let dtype = encoder.dtype();
    let fa = encoder.encode(&output.pad_to_multiple(8).to_tensor(dtype, &Device::Cpu)?)?;
    let fb = encoder.encode(&style.pad_to_multiple(8).to_tensor(dtype, &Device::Cpu)?)?;
    let a = fa.taps.iter().map(|t| t.get(0)).collect::<candle_core::Result<Vec<_>>>()?;
    let b = fb.taps.iter().map(|t| t.get(0)).collect::<candle_core::Result<Vec<_>>>()?;
    gram_loss_features(&a, &b)
}

/// One evaluated `(content, style, output)` triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub content: PathBuf,
    pub style: PathBuf,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ManifestEntry {
    Object(PairEntry),
    Triple([PathBuf; 3]),
}

/// Reads a JSON list of `{content, style, output}` objects or
/// `[content, style, output]` triples. Relative paths resolve against the
/// manifest's directory.
pub fn load_pairs_manifest(path: impl AsRef<Path>) -> Result<Vec<PairEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(entries
        .into_iter()
        .map(|e| match e {
            ManifestEntry::Object(p) => p,
            ManifestEntry::Triple([content, style, output]) => PairEntry { content, style, output },
        })
        .map(|p| PairEntry { content: base.join(p.content), style: base.join(p.style), output: base.join(p.output) })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair: PairEntry,
    pub ssim: f64,
    pub perceptual: f64,
    pub content_loss: f64,
    pub gram_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub ssim: f64,
    pub perceptual: f64,
    pub content_loss: f64,
    pub gram_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub checkpoint_sha256: Option<String>,
    pub config: serde_json::Value,
    pub perceptual_weights: String,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
    pub aggregate: Option<AggregateMetrics>,
    pub timing: Vec<TimingRow>,
    pub metadata: RunMetadata,
}

impl MetricsReport {
    /// Recomputes the aggregate as the arithmetic mean of the pair rows.
    pub fn aggregate_pairs(&mut self) {
        let n = self.pairs.len() as f64;
        self.aggregate = (!self.pairs.is_empty()).then(|| AggregateMetrics {
            ssim: self.pairs.iter().map(|p| p.ssim).sum::<f64>() / n,
            perceptual: self.pairs.iter().map(|p| p.perceptual).sum::<f64>() / n,
            content_loss: self.pairs.iter().map(|p| p.content_loss).sum::<f64>() / n,
            gram_loss: self.pairs.iter().map(|p| p.gram_loss).sum::<f64>() / n,
        });
    }
}

/// Structure metrics of output against content; Gram loss of output against
/// the style reference.
pub fn evaluate_pair(pair: &PairEntry, encoder: &EncoderWeights, weights: &PerceptualWeights) -> Result<PairMetrics> {
    let content = Image::load_png(&pair.content)?;
    let style = Image::load_png(&pair.style)?;
    let output = Image::load_png(&pair.output)?;
    Ok(PairMetrics {
        pair: pair.clone(),
        ssim: ssim(&output, &content)?,
        perceptual: perceptual_distance(&output, &content, encoder, weights)?,
        content_loss: content_distance(&output, &content, encoder)?,
        gram_loss: style_distance(&output, &style, encoder)?,
    })
}

pub fn evaluate_pairs(pairs: &[PairEntry], encoder: &EncoderWeights, weights: &PerceptualWeights) -> Result<MetricsReport> {
    let mut report = MetricsReport {
        pairs: pairs.iter().map(|p| evaluate_pair(p, encoder, weights)).collect::<Result<_>>()?,
        metadata: RunMetadata { perceptual_weights: weights.label().into(), ..RunMetadata::default() },
        ..MetricsReport::default()
    };
    report.aggregate_pairs();
    Ok(report)
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Parses `WxH`.
pub fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::InvalidInput(format!("resolution `{s}` is not WxH")))?;
    let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::InvalidInput(format!("resolution `{s}` is not WxH")));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput(format!("resolution `{s}` has a zero side")));
    }
    Ok((w, h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub frames: usize,
    pub warmup: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { frames: 80, warmup: 2, lambda: 1.0, seed: 0 }
    }
}

/// Drifting smooth pattern so consecutive frames are related by motion.
fn synthetic_frame(w: usize, h: usize, t: usize, phase: [f32; 3]) -> Image {
    Image::from_fn(w, h, |c, y, x| {
        let u = (x as f32 + 2.0 * t as f32) / 23.0 + phase[c];
        let v = (y as f32 + t as f32) / 17.0 - phase[c];
        0.5 + 0.4 * (u.sin() * v.cos())
    })
}

/// Mean and standard deviation of per-frame render time at each resolution,
/// after `warmup` untimed frames. Resolutions with a side not divisible by 8
/// are skipped and reported in the returned warnings.
pub fn benchmark(stylizer: &Stylizer, resolutions: &[(usize, usize)], opts: &BenchOptions) -> Result<(Vec<TimingRow>, Vec<String>)> {
    if opts.frames == 0 {
        return Err(Error::InvalidInput("benchmark needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let style = Image::random(64, 64, &mut rng);
    let phase = [0.0, 1.3, 2.6];
    let vector = stylizer.style_vector(&style, 0)?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &(w, h) in resolutions {
        if w % 8 != 0 || h % 8 != 0 {
            let msg = format!("skipping {w}x{h}: sides must be divisible by 8");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let mut stream = FrameStream::default();
        let mut times = Vec::with_capacity(opts.frames);
        for t in 0..opts.warmup + opts.frames {
            let frame = synthetic_frame(w, h, t, phase);
            let start = Instant::now();
            stylizer.render_frame(&frame, &vector, opts.lambda, &mut stream)?;
            if t >= opts.warmup {
                times.push(start.elapsed().as_secs_f64());
            }
        }
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        log::info!("{w}x{h}: {mean:.3}s/frame");
        rows.push(TimingRow { width: w, height: h, frames: times.len(), mean_seconds: mean, std_seconds: var.sqrt() });
    }
    Ok((rows, warnings))
}

/// Human-readable table with columns SSIM, LPIPS, Content, Gram, followed by
/// timing rows when present.
pub fn render_table(report: &MetricsReport) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let lpips = format!("LPIPS ({})", report.metadata.perceptual_weights);
    let _ = writeln!(s, "{:<32} {:>10} {:>24} {:>14} {:>14}", "pair", "SSIM", lpips, "Content", "Gram");
    let row = |s: &mut String, name: &str, ssim: f64, p: f64, c: f64, g: f64| {
        let _ = writeln!(s, "{name:<32} {ssim:>10.4} {p:>24.4} {c:>14.4} {g:>14.6}");
    };
    for m in &report.pairs {
        let name = m.pair.output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        row(&mut s, &name, m.ssim, m.perceptual, m.content_loss, m.gram_loss);
    }
    if let Some(a) = &report.aggregate {
        row(&mut s, "mean", a.ssim, a.perceptual, a.content_loss, a.gram_loss);
    }
    if !report.timing.is_empty() {
        let _ = writeln!(s, "\n{:<12} {:>8} {:>14} {:>12}", "resolution", "frames", "s/frame", "std");
        for t in &report.timing {
            let _ = writeln!(
                s,
                "{:<12} {:>8} {:>14.4} {:>12.4}",
                format!("{}x{}", t.width, t.height),
                t.frames,
                t.mean_seconds,
                t.std_seconds
            );
        }
    }
    s
}

/// Writes the report as JSON to `path` and the table next to it with a
/// `.txt` extension. Returns the table.
pub fn emit_report(report: &MetricsReport, path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(path, e))?;
    let table = render_table(report);
    let table_path = path.with_extension("txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    Ok(table)
}
