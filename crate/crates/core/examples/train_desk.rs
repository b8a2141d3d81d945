//! Overfits both networks to one synthetic five-frame clip and reports the
//! loss curve and the restoration PSNR.
//!
//! `cargo run --release --example train_desk -- [steps] [lr]`

use std::time::Instant;

use candle_core::DType;
use colorista::encoder::EncoderWeights;
use colorista::image_io::{psnr, Image};
use colorista::network::NetworkConfig;
use colorista::train::{ClipSample, Schedule, TrainConfig, Trainer};

fn frame(t: usize) -> Image {
    Image::from_fn(64, 64, |c, y, x| {
        let u = (x as f32 + 2.0 * t as f32) / 9.0 + c as f32;
        let v = y as f32 / 7.0;
        0.5 + 0.35 * (u.sin() * v.cos()) + 0.1 * c as f32 - 0.1
    })
}

fn main() -> colorista::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let config = TrainConfig {
        crop: 64,
        schedule: Schedule::Constant { lr },
        grad_clip: Some(1.0),
        network: NetworkConfig::restoration().desk(),
        ..TrainConfig::default()
    };
    let encoder = EncoderWeights::random(0, DType::F32)?;
    let mut trainer = Trainer::new(config, encoder)?;
    let style = Image::from_fn(64, 64, |c, y, x| ((x * (c + 1) + y * 3) % 64) as f32 / 80.0 + 0.1);
    let clip = ClipSample::new((0..5).map(frame).collect(), style)?;
    let batch = [clip];
    let start = Instant::now();
    let mut first = None;
    for s in 0..steps {
        let m = trainer.train_step(&batch, lr)?;
        first.get_or_insert(m.loss_total);
        if s % 10 == 0 || s + 1 == steps {
            println!(
                "step {:>4}  total {:>10.5}  removal {:>10.5}  restoration {:>10.5}  ({:.1}s)",
                m.step,
                m.loss_total,
                m.loss_removal,
                m.loss_restoration,
                start.elapsed().as_secs_f64()
            );
        }
    }
    let fwd = colorista::nn::no_grad(|| trainer.clip_forward(&batch[0], 1.0))?;
    let last = colorista::nn::scalar(&fwd.loss_removal)? + colorista::nn::scalar(&fwd.loss_restoration)?;
    let first = first.unwrap_or(last);
    println!("loss {first:.5} -> {last:.5} ({:.1}% reduction)", 100.0 * (1.0 - last / first));
    for (t, original) in batch[0].frames.iter().enumerate() {
        let restored = Image::from_tensor(&fwd.restored, t)?;
        println!("frame {t}: restoration PSNR {:.2} dB", psnr(&restored, original)?);
    }
    Ok(())
}
