//! Trains a toy checkpoint, writes a short moving clip to disk and renders
//! it with a mid-clip style switch.
//!
//! `cargo run --release --example stylize_video -- [out_dir]`

use std::path::PathBuf;

use candle_core::DType;
use colorista::encoder::EncoderWeights;
use colorista::image_io::Image;
use colorista::network::{NetworkConfig, Precision};
use colorista::stylize::{stylize_video, RenderJob, StylePlan, StyleRef, DEFAULT_SMOOTH_KERNEL};
use colorista::train::{Schedule, TrainConfig, Trainer};

fn frame(t: usize) -> Image {
    Image::from_fn(40, 32, |c, y, x| 0.5 + 0.3 * (((x + 2 * t) as f32 / 5.0 + c as f32).sin() * (y as f32 / 4.0).cos()))
}

fn main() -> colorista::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "target/stylize_video_demo".into()).into();
    let input = out.join("frames");
    std::fs::create_dir_all(&input).map_err(|source| colorista::Error::Io { path: input.clone(), source })?;
    for t in 0..8 {
        frame(t).save_png(input.join(format!("{t:04}.png")))?;
    }
    let styles = [
        Image::from_fn(32, 32, |c, y, x| ((x * (c + 1) + 3 * y) % 32) as f32 / 40.0 + 0.1),
        Image::from_fn(32, 32, |c, y, _| if (y / 4 + c) % 2 == 0 { 0.9 } else { 0.2 }),
    ];
    let mut refs = Vec::new();
    for (i, (style, start)) in styles.iter().zip([0, 4]).enumerate() {
        let path = out.join(format!("style{i}.png"));
        style.save_png(&path)?;
        refs.push(StyleRef { path, start });
    }
    let config = TrainConfig {
        crop: 16,
        schedule: Schedule::Constant { lr: 1e-3 },
        network: NetworkConfig::restoration().desk(),
        ..TrainConfig::default()
    };
    let checkpoint = out.join("checkpoint.safetensors");
    Trainer::new(config, EncoderWeights::random(0, DType::F32)?)?.save_checkpoint(&checkpoint)?;
    let job = RenderJob {
        input,
        output: out.join("stylized"),
        checkpoint,
        plan: StylePlan { styles: refs, lambda: 1.0, consecutive: None, whiten: None, smooth_kernel: DEFAULT_SMOOTH_KERNEL },
        temporal_mode: None,
        precision: Precision::F32,
        force: false,
    };
    let report = stylize_video(&job)?;
    println!("{} frames, {:.3} s/frame, written to {}", report.frames, report.mean_seconds, job.output.display());
    Ok(())
}
