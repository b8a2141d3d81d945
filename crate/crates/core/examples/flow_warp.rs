//! Estimates block-matching flow between two shifted frames and warps the
//! earlier frame onto the later one.
//!
//! `cargo run --release --example flow_warp -- [shift]`

use colorista::feature_transform::FeatureMap;
use colorista::image_io::{psnr, Image};
use colorista::temporal::{warp, BlockMatcher, FlowEstimator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> colorista::Result<()> {
    let shift: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let (w, h) = (64, 48);
    let base = Image::random(w + shift, h, &mut ChaCha8Rng::seed_from_u64(1));
    let prev = base.crop(0, shift, h, w)?;
    let next = base.crop(0, 0, h, w)?;
    let flow = BlockMatcher::default().estimate(&next, &prev)?;
    println!("flow at centre {:?}, max magnitude {:.2}", flow.at(h / 2, w / 2), flow.max_magnitude());
    let t = prev.to_tensor(candle_core::DType::F32, &candle_core::Device::Cpu)?;
    let warped = Image::from_tensor(warp(&FeatureMap::new(t)?, &flow)?.tensor(), 0)?;
    let inner = |img: &Image| img.crop(8, 8 + shift, h - 16, w - 16 - shift);
    println!("PSNR prev vs next {:.2} dB", psnr(&inner(&prev)?, &inner(&next)?)?);
    println!("PSNR warped vs next {:.2} dB", psnr(&inner(&warped)?, &inner(&next)?)?);
    Ok(())
}
