//! Frozen VGG-19 trunk up to `conv4_1`, tapping the post-ReLU activations of
//! `conv1_1`, `conv2_1`, `conv3_1` and `conv4_1`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::archive::{Archive, Preprocessing};
use crate::error::{Error, Result};
use crate::feature_transform::FeatureMap;
use crate::nn::{self, ParamBuilder};

/// Channel count at each tap.
pub const TAP_CHANNELS: [usize; 4] = [64, 128, 256, 512];

enum Layer {
    Conv { name: &'static str, in_ch: usize, out_ch: usize },
    Pool,
}

const LAYOUT: [Layer; 12] = [
    Layer::Conv { name: "conv1_1", in_ch: 3, out_ch: 64 },
    Layer::Conv { name: "conv1_2", in_ch: 64, out_ch: 64 },
    Layer::Pool,
    Layer::Conv { name: "conv2_1", in_ch: 64, out_ch: 128 },
    Layer::Conv { name: "conv2_2", in_ch: 128, out_ch: 128 },
    Layer::Pool,
    Layer::Conv { name: "conv3_1", in_ch: 128, out_ch: 256 },
    Layer::Conv { name: "conv3_2", in_ch: 256, out_ch: 256 },
    Layer::Conv { name: "conv3_3", in_ch: 256, out_ch: 256 },
    Layer::Conv { name: "conv3_4", in_ch: 256, out_ch: 256 },
    Layer::Pool,
    Layer::Conv { name: "conv4_1", in_ch: 256, out_ch: 512 },
];

const TAPS: [&str; 4] = ["conv1_1", "conv2_1", "conv3_1", "conv4_1"];

/// Encoder activations at the four taps, each `(N, C, H, W)`.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub taps: [Tensor; 4],
}

impl MultiScaleFeatures {
    /// Tap at `scale` in `1..=4`.
    pub fn scale(&self, scale: usize) -> &Tensor {
        &self.taps[scale - 1]
    }

    pub fn f1(&self) -> FeatureMap {
        FeatureMap::wrap(self.taps[0].clone())
    }

    pub fn f2(&self) -> FeatureMap {
        FeatureMap::wrap(self.taps[1].clone())
    }

    pub fn f3(&self) -> FeatureMap {
        FeatureMap::wrap(self.taps[2].clone())
    }

    pub fn f4(&self) -> FeatureMap {
        FeatureMap::wrap(self.taps[3].clone())
    }
}

/// Immutable VGG weights. Tensors here are never registered as trainable
/// variables, so no gradient is ever accumulated into them.
#[derive(Clone, Debug)]
pub struct EncoderWeights {
    convs: Vec<(String, Tensor, Tensor)>,
    preprocessing: Preprocessing,
    mean: Tensor,
    std: Tensor,
}

impl EncoderWeights {
    fn from_builder(mut b: ParamBuilder, preprocessing: Preprocessing) -> Result<Self> {
        let dtype = b.dtype();
        let mut convs = Vec::new();
        for layer in &LAYOUT {
            if let Layer::Conv { name, in_ch, out_ch } = *layer {
                let std = (2.0 / (9.0 * in_ch as f64)).sqrt();
                let w = b.normal(&format!("{name}.weight"), &[out_ch, in_ch, 3, 3], std)?;
                let bias = b.zeros(&format!("{name}.bias"), &[out_ch])?;
                // detach from the Var so the weights stay frozen
                convs.push((name.to_string(), w.as_tensor().detach(), bias.as_tensor().detach()));
            }
        }
        b.finish()?;
        let mean = Tensor::from_slice(&preprocessing.mean, (1, 3, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let std = Tensor::from_slice(&preprocessing.std, (1, 3, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self { convs, preprocessing, mean, std })
    }

    /// Seeded He-initialized stand-in for pretrained weights, for tests and
    /// desk-scale runs where no pretrained archive is available.
    pub fn random(seed: u64, dtype: DType) -> Result<Self> {
        Self::from_builder(ParamBuilder::seeded(seed, dtype, &Device::Cpu), Preprocessing::default())
    }

    /// Reads `<prefix>.convX_Y.{weight,bias}` arrays (no prefix when empty),
    /// checking every shape against the VGG-19 layout.
    pub fn from_archive(archive: &Archive, prefix: &str, dtype: DType) -> Result<Self> {
        let arrays = if prefix.is_empty() {
            archive.names().map(|n| Ok((n.to_string(), archive.tensor(n, &Device::Cpu)?))).collect::<Result<_>>()?
        } else {
            archive.tensors_with_prefix(prefix, &Device::Cpu)?
        };
        let pre = archive.preprocessing.clone().unwrap_or_default();
        Self::from_builder(ParamBuilder::from_arrays(arrays, dtype, &Device::Cpu), pre)
    }

    pub fn write_to(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        let dotted = if prefix.is_empty() { String::new() } else { format!("{prefix}.") };
        for (name, w, b) in &self.convs {
            archive.insert(format!("{dotted}{name}.weight"), w)?;
            archive.insert(format!("{dotted}{name}.bias"), b)?;
        }
        archive.preprocessing = Some(self.preprocessing.clone());
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut archive = Archive::new("encoder");
        self.write_to(&mut archive, "")?;
        archive.save(path)
    }

    pub fn dtype(&self) -> DType {
        self.mean.dtype()
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    pub fn num_parameters(&self) -> usize {
        self.convs.iter().map(|(_, w, b)| w.elem_count() + b.elem_count()).sum()
    }

    /// Kernel and bias tensors in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.convs.iter().map(|(n, w, b)| (n.as_str(), w, b))
    }

    fn check_input(&self, image: &Tensor) -> Result<Tensor> {
        let image = if image.rank() == 3 { image.unsqueeze(0)? } else { image.clone() };
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("image size {h}x{w} is not divisible by 8")));
        }
        let flat = image.flatten_all()?.to_dtype(DType::F64)?;
        let lo = flat.min(0)?.to_scalar::<f64>()?;
        let hi = flat.max(0)?.to_scalar::<f64>()?;
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(Error::InvalidInput(format!("image values must lie in [0, 1], found [{lo}, {hi}]")));
        }
        Ok(image.to_dtype(self.dtype())?)
    }

    fn run(&self, image: &Tensor, stop_after: &str) -> Result<Vec<Tensor>> {
        let mut x = self.check_input(image)?.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut taps = Vec::with_capacity(4);
        let mut convs = self.convs.iter();
        for layer in &LAYOUT {
            match layer {
                Layer::Pool => x = nn::max_pool2x2(&x)?,
                Layer::Conv { name, .. } => {
                    let (_, w, b) = convs.next().expect("layout and weights agree");
                    x = nn::conv3x3(&x, w, Some(b))?.relu()?;
                    if TAPS.contains(name) {
                        taps.push(x.clone());
                    }
                    if *name == stop_after {
                        break;
                    }
                }
            }
        }
        Ok(taps)
    }

    /// Four-tap encoding of a `(3, H, W)` or `(N, 3, H, W)` image in `[0, 1]`.
    pub fn encode(&self, image: &Tensor) -> Result<MultiScaleFeatures> {
        let taps = self.run(image, "conv4_1")?;
        let taps: [Tensor; 4] = taps.try_into().expect("four taps");
        Ok(MultiScaleFeatures { taps })
    }

    /// The `conv4_1` activations alone.
    pub fn content_feature(&self, image: &Tensor) -> Result<FeatureMap> {
        Ok(self.encode(image)?.f4())
    }
}

/// Loads and validates an encoder archive (or the `encoder.` section of a
/// checkpoint).
pub fn load_pretrained(path: impl AsRef<Path>) -> Result<EncoderWeights> {
    let archive = Archive::load(path)?;
    let prefix = if archive.kind == "checkpoint" { "encoder" } else { "" };
    EncoderWeights::from_archive(&archive, prefix, DType::F32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_vgg19_trunk() {
        let enc = EncoderWeights::random(0, DType::F32).unwrap();
        // conv1_1 .. conv4_1 of VGG-19, weights plus biases
        assert_eq!(enc.num_parameters(), 3_505_728);
        let first = enc.tensors().next().unwrap();
        assert_eq!((first.0, first.1.dims()), ("conv1_1", &[64, 3, 3, 3][..]));
    }

    #[test]
    fn rejects_bad_inputs() {
        let enc = EncoderWeights::random(0, DType::F32).unwrap();
        let odd = Tensor::zeros((3, 12, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&odd), Err(Error::Shape(_))));
        let bright = (Tensor::ones((3, 16, 16), DType::F32, &Device::Cpu).unwrap() * 1.5).unwrap();
        assert!(matches!(enc.encode(&bright), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn tap_shapes() {
        let enc = EncoderWeights::random(0, DType::F32).unwrap();
        let img = Tensor::zeros((3, 32, 16), DType::F32, &Device::Cpu).unwrap();
        let f = enc.encode(&img).unwrap();
        let shapes: Vec<_> = f.taps.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 64, 32, 16], vec![1, 128, 16, 8], vec![1, 256, 8, 4], vec![1, 512, 4, 2]]);
    }
}
