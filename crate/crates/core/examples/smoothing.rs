//! Smooths a hard switch between two style vectors with the Gaussian window
//! and prints one component across the transition.
//!
//! `cargo run --release --example smoothing -- [kernel]`

use colorista::feature_transform::{gaussian_smooth_style_vectors, gaussian_window, StyleVector};

fn main() -> colorista::Result<()> {
    let kernel: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let window = gaussian_window(kernel);
    println!("window offsets {}..={}", window[0].0, window[window.len() - 1].0);
    let seq: Vec<StyleVector> = (0..40)
        .map(|t| StyleVector { frame_index: t, segments: vec![2], values: if t < 20 { vec![0.0, 1.0] } else { vec![1.0, 1.0] } })
        .collect();
    let smooth = gaussian_smooth_style_vectors(&seq, kernel)?;
    for (raw, s) in seq.iter().zip(&smooth) {
        println!("frame {:>2}: raw {:.1} smoothed {:.4} constant {:.1}", raw.frame_index, raw.values[0], s.values[0], s.values[1]);
    }
    Ok(())
}
