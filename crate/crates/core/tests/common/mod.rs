//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use colorista::encoder::EncoderWeights;
use colorista::eval::{content_distance, gram_loss, perceptual_distance, ssim, PerceptualWeights};
use colorista::feature_transform::{
    adain_stylize, decoupled_in, reweight_stats, whiten, ChannelStats, FeatureMap, TransformParams,
};
use colorista::image_io::Image;
use colorista::network::{NetworkConfig, Precision, StyleInput, StyleNetwork, Variant};
use colorista::stylize::{StylePlan, StyleRef, Stylizer};
use colorista::temporal::{convlstm_step, ConvLstmParams, ConvLstmState, TemporalMode};
use colorista::train::{content_loss, fit, ClipSample, Dataset, Schedule, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Step for losses through the ReLU/max-pool encoder: a wider step straddles
/// activation kinks often enough to dominate the comparison.
pub const FD_STEP_PIECEWISE: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn var(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Var {
    Var::from_tensor(&uniform(shape, lo, hi, seed)).unwrap()
}

/// `sum(probe * x)` with a fixed random probe, so every output element
/// contributes with a distinct weight.
pub fn probe_sum(x: &Tensor, seed: u64) -> Tensor {
    let probe = uniform(x.dims(), -1.0, 1.0, seed).to_dtype(x.dtype()).unwrap();
    (x * probe).unwrap().sum_all().unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Largest analytic vs central-difference discrepancy over `samples`
/// randomly chosen entries of `var`, relative to the largest gradient
/// magnitude seen on either side.
pub fn grad_error(var: &Var, samples: usize, seed: u64, loss: impl Fn() -> Tensor) -> f64 {
    grad_error_with_step(var, samples, seed, FD_STEP, loss)
}

pub fn grad_error_with_step(var: &Var, samples: usize, seed: u64, step: f64, loss: impl Fn() -> Tensor) -> f64 {
    let analytic = {
        let grads = loss().backward().unwrap();
        match grads.get(var.as_tensor()) {
            Some(g) => flat(g),
            None => vec![0.0; var.elem_count()],
        }
    };
    let base = var.as_tensor().copy().unwrap();
    let values = flat(&base);
    let shape = base.dims().to_vec();
    let mut r = rng(seed);
    let picks: Vec<usize> =
        if samples >= values.len() { (0..values.len()).collect() } else { (0..samples).map(|_| r.random_range(0..values.len())).collect() };
    let eval = |i: usize, delta: f64| {
        let mut v = values.clone();
        v[i] += delta;
        var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap().to_dtype(base.dtype()).unwrap()).unwrap();
        loss().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    };
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for &i in &picks {
        let numeric = (eval(i, step) - eval(i, -step)) / (2.0 * step);
        worst = worst.max((numeric - analytic[i]).abs());
        scale = scale.max(numeric.abs()).max(analytic[i].abs());
    }
    var.set(&base).unwrap();
    if scale == 0.0 { 0.0 } else { worst / scale }
}

/// One gradient comparison: label, relative error and its tolerance.
pub struct GradCase {
    pub label: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

const TRANSFORM_TOL: f64 = 1e-3;
const NETWORK_TOL: f64 = 1e-2;

fn fmap(t: &Tensor) -> FeatureMap {
    FeatureMap::new(t.clone()).unwrap()
}

/// Double-precision gradient checks of the pure transforms, the recurrent
/// cell, the content loss and one decoder weight, all on 16×16 inputs.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    let mut push = |label, error, tolerance| out.push(GradCase { label, error, tolerance });

    let x = var(&[1, 4, 16, 16], -2.0, 2.0, 1);
    push("whiten / input", grad_error(&x, 40, 2, || probe_sum(whiten(&fmap(x.as_tensor()), 1e-5).unwrap().tensor(), 3)), TRANSFORM_TOL);

    let target = ChannelStats::from_vecs(vec![0.5, -1.0, 2.0, 0.0], vec![1.5, 0.3, 2.0, 1.0], 1e-5).unwrap();
    push(
        "adain / input",
        grad_error(&x, 40, 4, || probe_sum(adain_stylize(&fmap(x.as_tensor()), &target).unwrap().tensor(), 5)),
        TRANSFORM_TOL,
    );

    let cm = var(&[1, 4, 1, 1], -1.0, 1.0, 32);
    let cs = var(&[1, 4, 1, 1], 0.5, 2.0, 33);
    let sm = var(&[1, 4, 1, 1], -1.0, 1.0, 34);
    let ss = var(&[1, 4, 1, 1], 0.5, 2.0, 35);
    let rw = || {
        let c = ChannelStats { mean: cm.as_tensor().clone(), std: cs.as_tensor().clone(), epsilon: 1e-5 };
        let s = ChannelStats { mean: sm.as_tensor().clone(), std: ss.as_tensor().clone(), epsilon: 1e-5 };
        let r = reweight_stats(&c, &s, 0.3).unwrap();
        (probe_sum(&r.mean, 36) + probe_sum(&r.std, 37)).unwrap()
    };
    push("reweight_stats / content std", grad_error(&cs, 4, 38, rw), TRANSFORM_TOL);
    push("reweight_stats / style mean", grad_error(&sm, 4, 39, rw), TRANSFORM_TOL);

    let params = TransformParams::random(4, 2, 7, DType::F64).unwrap();
    let style = var(&[1, 4, 16, 16], -1.0, 3.0, 8);
    let din = || probe_sum(&decoupled_in(&fmap(x.as_tensor()), &fmap(style.as_tensor()), &params, 0.7).unwrap().output, 9);
    push("decoupled_in / content", grad_error(&x, 40, 10, din), TRANSFORM_TOL);
    push("decoupled_in / style", grad_error(&style, 40, 11, din), TRANSFORM_TOL);
    push("decoupled_in / expand weight", grad_error(&params.shared_conv.weight, 40, 12, din), TRANSFORM_TOL);
    push("decoupled_in / fuse weight", grad_error(&params.fuse_conv.weight, 40, 13, din), TRANSFORM_TOL);

    let pooled = var(&[2, 3, 8, 8], -1.0, 1.0, 30);
    push(
        "max pool / input",
        grad_error(&pooled, 60, 31, || probe_sum(&colorista::nn::max_pool2x2(pooled.as_tensor()).unwrap(), 32)),
        TRANSFORM_TOL,
    );

    let lstm = ConvLstmParams::random(4, 3, 14, DType::F64).unwrap();
    let h = var(&[1, 3, 16, 16], -0.9, 0.9, 15);
    let c = var(&[1, 3, 16, 16], -2.0, 2.0, 16);
    let cell = || {
        let state = ConvLstmState { hidden: h.as_tensor().clone(), cell: c.as_tensor().clone() };
        let (out, next) = convlstm_step(&fmap(x.as_tensor()), &state, &lstm).unwrap();
        (probe_sum(out.tensor(), 17) + probe_sum(&next.cell, 18)).unwrap()
    };
    push("convlstm / input", grad_error(&x, 40, 19, cell), TRANSFORM_TOL);
    push("convlstm / hidden", grad_error(&h, 40, 20, cell), TRANSFORM_TOL);
    push("convlstm / cell", grad_error(&c, 40, 21, cell), TRANSFORM_TOL);
    push("convlstm / gate weight", grad_error(&lstm.gates.weight, 40, 22, cell), TRANSFORM_TOL);

    let encoder = EncoderWeights::random(23, DType::F64).unwrap();
    let frame = uniform(&[1, 3, 16, 16], 0.1, 0.9, 24);
    let generated = var(&[1, 3, 16, 16], 0.2, 0.8, 25);
    push(
        "content_loss / generated",
        grad_error_with_step(&generated, 30, 26, FD_STEP_PIECEWISE, || content_loss(generated.as_tensor(), &frame, &encoder).unwrap()),
        NETWORK_TOL,
    );

    let config = NetworkConfig {
        variant: Variant::Removal,
        precision: Precision::F64,
        temporal_mode: TemporalMode::NoRecurrence,
        ..NetworkConfig::removal().desk()
    };
    let net = StyleNetwork::new(config, 27).unwrap();
    let style_img = uniform(&[1, 3, 16, 16], 0.0, 1.0, 28);
    let style_feats = encoder.encode(&style_img).unwrap();
    let weight = net.params().get("decoder.output.weight").expect("decoder output weight").clone();
    let e2e = || {
        let out = net.forward_removal(&encoder, &frame, StyleInput::Features(&style_feats), 1.0).unwrap();
        content_loss(&out, &frame, &encoder).unwrap()
    };
    push("decoder output weight / content loss", grad_error_with_step(&weight, 30, 29, FD_STEP_PIECEWISE, e2e), NETWORK_TOL);

    let config = TrainConfig {
        crop: 16,
        network: NetworkConfig { precision: Precision::F64, ..NetworkConfig::restoration().desk() },
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(config, encoder.clone()).unwrap();
    let base = scene(24, 24, 40);
    let frames: Vec<Image> = (0..5).map(|t| base.crop(t, t, 16, 16).unwrap()).collect();
    let clip = ClipSample::new(frames, scene(16, 16, 41)).unwrap();
    let weight = trainer.restoration.params().get("decoder.output.weight").expect("decoder output weight").clone();
    let total = || {
        let f = trainer.clip_forward(&clip, 1.0).unwrap();
        (f.loss_removal + f.loss_restoration).unwrap()
    };
    push("decoder output weight / total clip loss", grad_error_with_step(&weight, 16, 42, FD_STEP_PIECEWISE, total), NETWORK_TOL);
    out
}

/// Smooth colour ramps with a few edges, values inside `[0.1, 0.9]`.
pub fn scene(width: usize, height: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    let phase: Vec<f32> = (0..9).map(|_| r.random_range(0.0..6.28)).collect();
    Image::from_fn(width, height, move |c, y, x| {
        let (fx, fy) = (x as f32 / width as f32, y as f32 / height as f32);
        let wave = (6.0 * fx + phase[c]).sin() * (4.0 * fy + phase[3 + c]).cos();
        let edge = if (fx + 0.5 * fy + phase[6 + c] * 0.05) % 0.5 < 0.25 { 0.15 } else { -0.15 };
        (0.5 + 0.25 * wave + edge).clamp(0.1, 0.9)
    })
}

/// `img + amount · noise`, clamped to `[0, 1]`, with one fixed noise pattern.
pub fn degrade(img: &Image, amount: f32, seed: u64) -> Image {
    let mut r = rng(seed);
    let data = img.data.iter().map(|v| (v + amount * r.random_range(-1.0f32..1.0)).clamp(0.0, 1.0)).collect();
    Image::new(img.width, img.height, data).unwrap()
}

/// Direct SSIM: every valid window weighted by the full 2-D Gaussian, with
/// variances taken about the window mean.
pub fn ssim_reference(a: &Image, b: &Image) -> f64 {
    const N: usize = 11;
    let g: Vec<f64> = (0..N).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let mut w2 = vec![0.0; N * N];
    for i in 0..N {
        for j in 0..N {
            w2[i * N + j] = g[i] * g[j];
        }
    }
    let total: f64 = w2.iter().sum();
    w2.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    for c in 0..3 {
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=a.height - N {
            for x0 in 0..=a.width - N {
                let px = |im: &Image, i: usize, j: usize| im.get(c, y0 + i, x0 + j) as f64;
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..N {
                    for j in 0..N {
                        mx += w2[i * N + j] * px(a, i, j);
                        my += w2[i * N + j] * px(b, i, j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..N {
                    for j in 0..N {
                        let (dx, dy) = (px(a, i, j) - mx, px(b, i, j) - my);
                        vx += w2[i * N + j] * dx * dx;
                        vy += w2[i * N + j] * dy * dy;
                        cov += w2[i * N + j] * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / 3.0
}

/// Largest SSIM deviation from the direct reference over `pairs` random
/// image pairs of assorted sizes.
pub fn ssim_reference_gap(pairs: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..pairs)
        .map(|i| {
            let (w, h) = (r.random_range(11..40), r.random_range(11..40));
            let a = Image::random(w, h, &mut r);
            // half the pairs are related, half independent
            let b = if i % 2 == 0 { degrade(&a, 0.2, seed + i as u64) } else { Image::random(w, h, &mut r) };
            (ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs()
        })
        .fold(0.0, f64::max)
}

/// Metric values for increasing noise, plus the zero-distance diagnostics.
pub struct MetricSweep {
    pub identical: [f64; 4],
    /// Rows of `[ssim, perceptual, content, gram]` for increasing noise.
    pub rows: Vec<[f64; 4]>,
}

impl MetricSweep {
    pub fn run(encoder: &EncoderWeights, levels: &[f32]) -> Self {
        let img = scene(48, 40, 1);
        let w = PerceptualWeights::uncalibrated();
        let all = |b: &Image| {
            [
                ssim(&img, b).unwrap(),
                perceptual_distance(&img, b, encoder, &w).unwrap(),
                content_distance(&img, b, encoder).unwrap(),
                gram_loss(&img, b, encoder).unwrap(),
            ]
        };
        let identical = all(&img);
        let rows = levels.iter().map(|&l| all(&degrade(&img, l, 2))).collect();
        Self { identical, rows }
    }

    pub fn zero_diagnostics_hold(&self) -> bool {
        (self.identical[0] - 1.0).abs() < 1e-12 && self.identical[1..].iter().all(|&v| v == 0.0)
    }

    /// SSIM strictly falls and every distance strictly rises with noise.
    pub fn monotone(&self) -> bool {
        self.rows.windows(2).all(|p| p[1][0] < p[0][0] && (1..4).all(|m| p[1][m] > p[0][m]))
            && self.rows.first().is_some_and(|r| r[0] < 1.0 && r[1..].iter().all(|&v| v > 0.0))
    }
}

/// `frames` crops of one scene, each shifted `shift` pixels right and down
/// from the last, so consecutive frames differ by a uniform translation.
pub fn moving_clip(width: usize, height: usize, frames: usize, shift: usize, seed: u64) -> Vec<Image> {
    let margin = shift * frames;
    let base = scene(width + margin, height + margin, seed);
    (0..frames).map(|t| base.crop(margin - t * shift, margin - t * shift, height, width).unwrap()).collect()
}

/// Small double-checked training setup: 16×16 crops, two epochs of two
/// steps, desk widths.
pub fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        steps_per_epoch: Some(2),
        crop: 16,
        seed,
        schedule: Schedule::Constant { lr: 1e-3 },
        network: NetworkConfig::restoration().desk(),
        ..TrainConfig::default()
    }
}

pub fn tiny_dataset() -> Dataset {
    let videos = vec![moving_clip(24, 24, 6, 1, 50), moving_clip(24, 24, 5, 2, 51)];
    let styles = vec![scene(24, 24, 52), scene(32, 24, 53)];
    Dataset::from_memory(videos, styles, 16).unwrap()
}

pub fn plan(starts: &[usize], lambda: f64, kernel: usize) -> StylePlan {
    StylePlan {
        styles: starts.iter().map(|&start| StyleRef { path: format!("style{start}.png").into(), start }).collect(),
        lambda,
        consecutive: None,
        whiten: None,
        smooth_kernel: kernel,
    }
}

pub fn desk_stylizer(mode: TemporalMode, scales: Vec<usize>, seed: u64) -> Stylizer {
    let encoder = EncoderWeights::random(seed, DType::F32).unwrap();
    let config = NetworkConfig { temporal_mode: mode, active_scales: scales, ..NetworkConfig::restoration().desk() };
    Stylizer::new(encoder, StyleNetwork::new(config, seed + 1).unwrap())
}

pub fn max_abs_diff(a: &[Image], b: &[Image]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs() as f64))
        .fold(0.0, f64::max)
}

/// Trains two fresh trainers with the same seed and reports whether their
/// loss histories agree bitwise.
pub fn training_is_deterministic() -> bool {
    let run = || {
        let mut t = Trainer::new(tiny_train_config(3), EncoderWeights::random(9, DType::F32).unwrap()).unwrap();
        fit(&mut t, &tiny_dataset()).unwrap();
        t.history.iter().map(|m| (m.loss_removal.to_bits(), m.loss_restoration.to_bits())).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    a.len() == 4 && a == b
}

/// Saves a checkpoint, reloads it and checks the bytes are unchanged.
pub fn checkpoint_round_trips(dir: &std::path::Path) -> bool {
    let mut t = Trainer::new(tiny_train_config(4), EncoderWeights::random(9, DType::F32).unwrap()).unwrap();
    let ds = tiny_dataset();
    let batch = t.sample_batch(&ds).unwrap();
    t.train_step(&batch, 1e-3).unwrap();
    let path = dir.join("ckpt.safetensors");
    t.save_checkpoint(&path).unwrap();
    let back = Trainer::load_checkpoint(&path).unwrap();
    let original = std::fs::read(&path).unwrap();
    back.to_checkpoint().unwrap().to_bytes().unwrap() == original && back.step == t.step && back.history == t.history
}

/// Training interrupted after the first epoch and resumed from its
/// checkpoint ends with the same weights as an uninterrupted run.
pub fn resume_matches_uninterrupted(dir: &std::path::Path) -> bool {
    let ds = tiny_dataset();
    let config = TrainConfig { output_dir: Some(dir.to_path_buf()), ..tiny_train_config(5) };
    let mut full = Trainer::new(config, EncoderWeights::random(9, DType::F32).unwrap()).unwrap();
    let finished = fit(&mut full, &ds).unwrap().to_bytes().unwrap();
    let mut resumed = Trainer::load_checkpoint(dir.join("checkpoint_epoch001.safetensors")).unwrap();
    if resumed.epoch != 1 || resumed.step != 2 {
        return false;
    }
    let again = fit(&mut resumed, &ds).unwrap().to_bytes().unwrap();
    again == finished
}

/// Frame `t` of the drifting 64×64 overfit clip.
pub fn overfit_frame(t: usize) -> Image {
    Image::from_fn(64, 64, |c, y, x| {
        let u = (x as f32 + 2.0 * t as f32) / 9.0 + c as f32;
        let v = y as f32 / 7.0;
        0.5 + 0.35 * (u.sin() * v.cos()) + 0.1 * c as f32 - 0.1
    })
}

pub struct OverfitOutcome {
    pub first_loss: f64,
    pub final_loss: f64,
    /// Restoration PSNR of each frame after training.
    pub psnr: Vec<f64>,
}

/// Trains both desk networks on one five-frame 64×64 clip for `steps`
/// steps; the final loss is a fresh forward pass after the last update.
pub fn overfit(steps: usize) -> OverfitOutcome {
    let lr = 0.01;
    let config = TrainConfig {
        crop: 64,
        schedule: Schedule::Constant { lr },
        grad_clip: Some(1.0),
        network: NetworkConfig::restoration().desk(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, EncoderWeights::random(0, DType::F32).unwrap()).unwrap();
    let style = Image::from_fn(64, 64, |c, y, x| ((x * (c + 1) + y * 3) % 64) as f32 / 80.0 + 0.1);
    let batch = [ClipSample::new((0..5).map(overfit_frame).collect(), style).unwrap()];
    let mut first_loss = None;
    for _ in 0..steps {
        let m = trainer.train_step(&batch, lr).unwrap();
        first_loss.get_or_insert(m.loss_total);
    }
    let fwd = colorista::nn::no_grad(|| trainer.clip_forward(&batch[0], 1.0)).unwrap();
    let final_loss = colorista::nn::scalar(&fwd.loss_removal).unwrap() + colorista::nn::scalar(&fwd.loss_restoration).unwrap();
    let psnr = batch[0]
        .frames
        .iter()
        .enumerate()
        .map(|(t, f)| colorista::image_io::psnr(&Image::from_tensor(&fwd.restored, t).unwrap(), f).unwrap())
        .collect();
    OverfitOutcome { first_loss: first_loss.unwrap_or(final_loss), final_loss, psnr }
}
