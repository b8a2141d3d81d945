//! Whitens a feature map with one constant channel and prints per-channel
//! moments before and after.
//!
//! `cargo run --release --example whitening`

use colorista::feature_transform::{channel_stats, whiten, FeatureMap, DEFAULT_EPSILON};

fn main() -> colorista::Result<()> {
    let (c, h, w) = (4, 6, 6);
    let v = (0..c * h * w)
        .map(|i| {
            let (ch, p) = (i / (h * w), (i % (h * w)) as f64);
            if ch == 3 { 5.0 } else { (ch as f64 + 1.0) * (p * 0.7).sin() + 10.0 * ch as f64 }
        })
        .collect();
    let f = FeatureMap::from_vec(v, c, h, w)?;
    let before = channel_stats(&f, 0.0)?;
    let after = channel_stats(&whiten(&f, DEFAULT_EPSILON)?, 0.0)?;
    for k in 0..c {
        println!(
            "channel {k}: mean {:>9.4} -> {:>10.2e}, std {:>7.4} -> {:.6}",
            before.mean_vec(0)?[k],
            after.mean_vec(0)?[k],
            before.std_vec(0)?[k],
            after.std_vec(0)?[k]
        );
    }
    Ok(())
}
