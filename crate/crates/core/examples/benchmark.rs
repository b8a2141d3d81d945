//! Times inference of a freshly initialized desk-scale restoration network.
//!
//! `cargo run --release --example benchmark -- 600x360 [frames]`

use candle_core::DType;
use colorista::encoder::EncoderWeights;
use colorista::eval::{benchmark, parse_resolution, BenchOptions};
use colorista::network::{NetworkConfig, StyleNetwork};
use colorista::stylize::Stylizer;
use colorista::temporal::TemporalMode;

fn main() -> colorista::Result<()> {
    let mut args = std::env::args().skip(1);
    let res = parse_resolution(&args.next().unwrap_or_else(|| "600x360".into()))?;
    let frames = args.next().and_then(|f| f.parse().ok()).unwrap_or(5);
    let config = NetworkConfig { temporal_mode: TemporalMode::NoFlow, ..NetworkConfig::restoration().desk() };
    let stylizer = Stylizer::new(EncoderWeights::random(0, DType::F32)?, StyleNetwork::new(config, 1)?);
    let opts = BenchOptions { frames, warmup: 1, ..BenchOptions::default() };
    let (rows, _) = benchmark(&stylizer, &[res], &opts)?;
    for r in rows {
        println!("{}x{}: {:.3} s/frame (std {:.3}) over {} frames", r.width, r.height, r.mean_seconds, r.std_seconds, r.frames);
    }
    Ok(())
}
