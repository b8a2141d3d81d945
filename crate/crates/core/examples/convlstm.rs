//! Runs a ConvLSTM over a short feature sequence and prints how the hidden
//! state evolves; the hidden state stays inside (-1, 1).
//!
//! `cargo run --release --example convlstm -- [steps]`

use candle_core::{DType, Device, Tensor};
use colorista::feature_transform::FeatureMap;
use colorista::temporal::{convlstm_step, ConvLstmParams, ConvLstmState};

fn main() -> colorista::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let (c, hidden, h, w) = (4, 3, 8, 8);
    let params = ConvLstmParams::random(c, hidden, 5, DType::F32)?;
    let mut state = ConvLstmState::zeros(1, hidden, h, w, DType::F32)?;
    for t in 0..steps {
        let input = FeatureMap::new(Tensor::randn(0f32, 1.0, (1, c, h, w), &Device::Cpu)?)?;
        let (out, next) = convlstm_step(&input, &state, &params)?;
        let v = out.to_vec(0)?;
        let max = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("step {t}: hidden mean {mean:>8.4}, max |h| {max:.4}");
        state = next;
    }
    Ok(())
}
