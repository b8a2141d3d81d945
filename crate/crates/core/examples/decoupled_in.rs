//! Applies one decoupled instance-normalization stage and shows the
//! stylized statistics tracking the blend of content and style statistics.
//!
//! `cargo run --release --example decoupled_in -- [lambda]`

use candle_core::DType;
use colorista::feature_transform::{decoupled_in, reweight_stats, FeatureMap, TransformParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn map(c: usize, h: usize, w: usize, offset: f64, scale: f64, rng: &mut ChaCha8Rng) -> colorista::Result<FeatureMap> {
    let v = (0..c * h * w).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect();
    FeatureMap::from_vec(v, c, h, w)
}

fn main() -> colorista::Result<()> {
    let lambda: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let content = map(8, 12, 12, 0.0, 1.0, &mut rng)?;
    let style = map(8, 10, 14, 2.0, 3.0, &mut rng)?;
    let params = TransformParams::random(8, 2, 3, DType::F64)?;
    let trace = decoupled_in(&content, &style, &params, lambda)?;
    let target = reweight_stats(&trace.content_stats(), &trace.style_stats(), lambda)?;
    let got = colorista::feature_transform::channel_stats(&trace.stylized(), 0.0)?;
    println!("lambda {lambda}: output {:?}", trace.output.dims());
    println!("{:>3} {:>10} {:>10} {:>10} {:>10}", "ch", "target mu", "got mu", "target sd", "got sd");
    let (tm, ts, gm, gs) = (target.mean_vec(0)?, target.std_vec(0)?, got.mean_vec(0)?, got.std_vec(0)?);
    for k in 0..tm.len().min(8) {
        println!("{k:>3} {:>10.5} {:>10.5} {:>10.5} {:>10.5}", tm[k], gm[k], ts[k], gs[k]);
    }
    Ok(())
}
