//! Scores progressively noisier copies of an image with every metric.
//!
//! `cargo run --release --example metrics`

use candle_core::DType;
use colorista::encoder::EncoderWeights;
use colorista::eval::{content_distance, gram_loss, perceptual_distance, ssim, PerceptualWeights};
use colorista::image_io::{psnr, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> colorista::Result<()> {
    let encoder = EncoderWeights::random(0, DType::F32)?;
    let weights = PerceptualWeights::uncalibrated();
    let img = Image::from_fn(48, 40, |c, y, x| 0.5 + 0.3 * ((x as f32 / 6.0 + c as f32).sin() * (y as f32 / 5.0).cos()));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    println!("{:>6} {:>8} {:>7} {:>11} {:>9} {:>9}", "noise", "psnr", "ssim", "perceptual", "content", "gram");
    for level in [0.0f32, 0.05, 0.1, 0.2] {
        let data = img.data.iter().map(|v| (v + level * rng.random_range(-1.0f32..1.0)).clamp(0.0, 1.0)).collect();
        let noisy = Image::new(img.width, img.height, data)?;
        let p = if level == 0.0 { f64::INFINITY } else { psnr(&img, &noisy)? };
        println!(
            "{level:>6.2} {p:>8.2} {:>7.4} {:>11.5} {:>9.5} {:>9.2e}",
            ssim(&img, &noisy)?,
            perceptual_distance(&img, &noisy, &encoder, &weights)?,
            content_distance(&img, &noisy, &encoder)?,
            gram_loss(&img, &noisy, &encoder)?
        );
    }
    println!("perceptual weights: {}", weights.label());
    Ok(())
}
