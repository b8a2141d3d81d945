//! Metric correctness against a direct reference and degradation behavior.

mod common;

use candle_core::DType;
use colorista::encoder::EncoderWeights;
use colorista::eval::{gram_loss_features, ssim};
use colorista::image_io::Image;

#[test]
fn ssim_matches_direct_reference() {
    let gap = common::ssim_reference_gap(20, 11);
    assert!(gap <= 1e-6, "max deviation {gap:e}");
}

#[test]
fn ssim_is_symmetric_and_bounded() {
    let a = common::scene(32, 24, 3);
    let b = common::degrade(&a, 0.3, 4);
    let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-12);
    assert!(ab < 1.0 && ab > -1.0);
}

#[test]
fn ssim_rejects_bad_inputs() {
    let a = Image::filled(16, 16, [0.5; 3]);
    assert!(ssim(&a, &Image::filled(17, 16, [0.5; 3])).is_err());
    assert!(ssim(&Image::filled(10, 16, [0.5; 3]), &Image::filled(10, 16, [0.5; 3])).is_err());
    assert!(ssim(&a, &Image::filled(16, 16, [1.5; 3])).is_err());
}

#[test]
fn metrics_are_zero_on_identical_inputs_and_monotone_in_noise() {
    let encoder = EncoderWeights::random(5, DType::F32).unwrap();
    let sweep = common::MetricSweep::run(&encoder, &[0.02, 0.05, 0.1, 0.2, 0.4]);
    for row in &sweep.rows {
        println!("{row:?}");
    }
    assert!(sweep.zero_diagnostics_hold(), "{:?}", sweep.identical);
    assert!(sweep.monotone());
}

#[test]
fn gram_loss_ignores_spatial_permutation() {
    let a = common::uniform(&[4, 6, 5], 0.0, 1.0, 7);
    // reverse the spatial order: the Gram matrix is unchanged
    let flat = a.reshape((4, 30)).unwrap();
    let idx = candle_core::Tensor::from_vec((0..30u32).rev().collect::<Vec<_>>(), 30, &candle_core::Device::Cpu).unwrap();
    let b = flat.index_select(&idx, 1).unwrap().reshape((4, 6, 5)).unwrap();
    assert!(gram_loss_features(&[a.clone()], &[b]).unwrap() < 1e-20);
    let c = (a.clone() * 2.0).unwrap();
    assert!(gram_loss_features(&[a], &[c]).unwrap() > 0.0);
}
