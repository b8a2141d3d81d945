//! Channel statistics, whitening, AdaIN, statistic reweighting and the
//! decoupled instance normalization transform built from them.
//!
//! Everything here is a differentiable tensor expression; gradients reach
//! both the inputs and the transform convolutions.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{self, Conv3x3, ParamBuilder};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// A batch of `channels × height × width` activations, stored `(N, C, H, W)`.
/// Statistics are always per sample and per channel.
#[derive(Clone, Debug)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    /// Accepts a `(C, H, W)` or `(N, C, H, W)` tensor with finite values.
    pub fn new(t: Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.unsqueeze(0)?,
            4 => t,
            r => return Err(Error::Shape(format!("feature map must be rank 3 or 4, got rank {r}"))),
        };
        if t.dims().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("feature map has an empty dimension: {:?}", t.dims())));
        }
        nn::ensure_finite(&t, "feature map")?;
        Ok(Self(t))
    }

    /// Wraps a tensor produced inside this crate without re-validating it.
    pub(crate) fn wrap(t: Tensor) -> Self {
        Self(t)
    }

    pub fn from_vec(values: Vec<f64>, channels: usize, height: usize, width: usize) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                values.len()
            )));
        }
        Self::new(Tensor::from_vec(values, (channels, height, width), &Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }

    /// Values of sample `n`, channel-major.
    pub fn to_vec(&self, n: usize) -> Result<Vec<f64>> {
        Ok(self.0.get(n)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }
}

/// Per-sample, per-channel mean and standard deviation, stored `(N, C, 1, 1)`.
#[derive(Clone, Debug)]
pub struct ChannelStats {
    pub mean: Tensor,
    pub std: Tensor,
    pub epsilon: f64,
}

impl ChannelStats {
    /// Builds single-sample stats from plain vectors.
    pub fn from_vecs(mean: Vec<f64>, std: Vec<f64>, epsilon: f64) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Shape(format!("mean has {} entries, std {}", mean.len(), std.len())));
        }
        if std.iter().any(|s| !s.is_finite() || *s <= 0.0) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("stats must be finite with positive std".into()));
        }
        let c = mean.len();
        Ok(Self {
            mean: Tensor::from_vec(mean, (1, c, 1, 1), &Device::Cpu)?,
            std: Tensor::from_vec(std, (1, c, 1, 1), &Device::Cpu)?,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.dims()[1]
    }

    pub fn mean_vec(&self, n: usize) -> Result<Vec<f64>> {
        Ok(self.mean.get(n)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    pub fn std_vec(&self, n: usize) -> Result<Vec<f64>> {
        Ok(self.std.get(n)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self { mean: self.mean.to_dtype(dtype)?, std: self.std.to_dtype(dtype)?, epsilon: self.epsilon })
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon.is_finite() && epsilon >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("epsilon must be a finite non-negative number, got {epsilon}")))
    }
}

// Tensor-level kernels shared by the public operations and the networks.

pub(crate) fn stats_tensor(x: &Tensor, epsilon: f64) -> Result<(Tensor, Tensor)> {
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?;
    let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    let std = (var + epsilon * epsilon)?.sqrt()?;
    Ok((mean, std))
}

pub(crate) fn whiten_tensor(x: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (mean, std) = stats_tensor(x, epsilon)?;
    Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
}

pub(crate) fn adain_tensor(x: &Tensor, mean: &Tensor, std: &Tensor, epsilon: f64) -> Result<Tensor> {
    Ok(whiten_tensor(x, epsilon)?.broadcast_mul(std)?.broadcast_add(mean)?)
}

pub(crate) fn reweight_tensors(
    content: (&Tensor, &Tensor),
    style: (&Tensor, &Tensor),
    lambda: f64,
) -> Result<(Tensor, Tensor)> {
    let mean = (style.0 * lambda)?.broadcast_add(&(content.0 * (1.0 - lambda))?)?;
    let std = (style.1 * lambda)?.broadcast_add(&(content.1 * (1.0 - lambda))?)?;
    Ok((mean, std))
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Domain(format!("stylization factor must lie in [0, 1], got {lambda}")))
    }
}

/// Per-channel spatial mean and `sqrt(population variance + epsilon²)`.
pub fn channel_stats(f: &FeatureMap, epsilon: f64) -> Result<ChannelStats> {
    check_epsilon(epsilon)?;
    nn::ensure_finite(f.tensor(), "feature map")?;
    let (mean, std) = stats_tensor(f.tensor(), epsilon)?;
    Ok(ChannelStats { mean, std, epsilon })
}

pub fn whiten(f: &FeatureMap, epsilon: f64) -> Result<FeatureMap> {
    check_epsilon(epsilon)?;
    if epsilon == 0.0 {
        return Err(Error::Domain("whitening needs a positive epsilon".into()));
    }
    nn::ensure_finite(f.tensor(), "feature map")?;
    Ok(FeatureMap(whiten_tensor(f.tensor(), epsilon)?))
}

/// Moves every channel of `content` to the target mean and std. Single-sample
/// targets broadcast over a batch.
pub fn adain_stylize(content: &FeatureMap, target: &ChannelStats) -> Result<FeatureMap> {
    if content.channels() != target.channels() {
        return Err(Error::Shape(format!(
            "content has {} channels, target stats {}",
            content.channels(),
            target.channels()
        )));
    }
    let eps = if target.epsilon > 0.0 { target.epsilon } else { DEFAULT_EPSILON };
    let target = target.to_dtype(content.tensor().dtype())?;
    Ok(FeatureMap(adain_tensor(content.tensor(), &target.mean, &target.std, eps)?))
}

/// Convex blend of content and style statistics; `lambda = 1` is full
/// stylization.
pub fn reweight_stats(content: &ChannelStats, style: &ChannelStats, lambda: f64) -> Result<ChannelStats> {
    check_lambda(lambda)?;
    if content.channels() != style.channels() {
        return Err(Error::Shape(format!(
            "content stats have {} channels, style stats {}",
            content.channels(),
            style.channels()
        )));
    }
    let (mean, std) = reweight_tensors((&content.mean, &content.std), (&style.mean, &style.std), lambda)?;
    Ok(ChannelStats { mean, std, epsilon: content.epsilon.max(style.epsilon) })
}

/// Whitening repetitions plus the expand (`c → 2c`) and fuse (`2c → c`)
/// convolutions of one transform stage.
#[derive(Clone, Debug)]
pub struct TransformParams {
    pub shared_conv: Conv3x3,
    pub fuse_conv: Conv3x3,
    pub whiten_count: usize,
    pub epsilon: f64,
}

impl TransformParams {
    pub(crate) fn build(b: &mut ParamBuilder, name: &str, channels: usize, whiten_count: usize) -> Result<Self> {
        if !(1..=3).contains(&whiten_count) {
            return Err(Error::Domain(format!("whiten count must be 1, 2 or 3, got {whiten_count}")));
        }
        Ok(Self {
            shared_conv: Conv3x3::new(b, &format!("{name}.shared"), channels, 2 * channels)?,
            fuse_conv: Conv3x3::new(b, &format!("{name}.fuse"), 2 * channels, channels)?,
            whiten_count,
            epsilon: DEFAULT_EPSILON,
        })
    }

    /// Freshly initialized, standalone parameters.
    pub fn random(channels: usize, whiten_count: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut b = ParamBuilder::seeded(seed, dtype, &Device::Cpu);
        Self::build(&mut b, "transform", channels, whiten_count)
    }

    pub fn channels(&self) -> usize {
        self.shared_conv.in_channels()
    }

    fn check(&self, features: &Tensor, what: &str) -> Result<()> {
        let c = features.dims()[1];
        if c != self.channels() {
            return Err(Error::Shape(format!("{what} has {c} channels, transform expects {}", self.channels())));
        }
        Ok(())
    }

    /// Post-transform style statistics (`μ`, `σ` of the expanded style path).
    pub(crate) fn style_stats_tensor(&self, style: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(style, "style")?;
        stats_tensor(&self.shared_conv.forward(style)?, self.epsilon)
    }

    /// Runs the stage against precomputed post-transform style statistics.
    pub(crate) fn apply_with_style_stats(
        &self,
        content: &Tensor,
        style_stats: (&Tensor, &Tensor),
        lambda: f64,
    ) -> Result<StageTrace> {
        self.check(content, "content")?;
        let mut whitened = content.clone();
        for _ in 0..self.whiten_count {
            whitened = whiten_tensor(&whitened, self.epsilon)?;
        }
        let expanded = self.shared_conv.forward(&whitened)?;
        let (c_mean, c_std) = stats_tensor(&expanded, self.epsilon)?;
        let (t_mean, t_std) = reweight_tensors((&c_mean, &c_std), style_stats, lambda)?;
        let stylized = expanded
            .broadcast_sub(&c_mean)?
            .broadcast_div(&c_std)?
            .broadcast_mul(&t_std)?
            .broadcast_add(&t_mean)?;
        let output = self.fuse_conv.forward(&stylized)?;
        Ok(StageTrace {
            output,
            stylized,
            content_stats: (c_mean, c_std),
            style_stats: (style_stats.0.clone(), style_stats.1.clone()),
            target_stats: (t_mean, t_std),
        })
    }

    pub(crate) fn apply(&self, content: &Tensor, style: &Tensor, lambda: f64) -> Result<StageTrace> {
        let (s_mean, s_std) = self.style_stats_tensor(style)?;
        self.apply_with_style_stats(content, (&s_mean, &s_std), lambda)
    }
}

/// Intermediate tensors of one transform stage.
#[derive(Clone, Debug)]
pub struct StageTrace {
    /// Fused result, back at the input channel count.
    pub output: Tensor,
    /// Stylized expanded features before the fuse convolution.
    pub stylized: Tensor,
    pub content_stats: (Tensor, Tensor),
    pub style_stats: (Tensor, Tensor),
    pub target_stats: (Tensor, Tensor),
}

impl StageTrace {
    pub fn output(&self) -> FeatureMap {
        FeatureMap(self.output.clone())
    }

    pub fn stylized(&self) -> FeatureMap {
        FeatureMap(self.stylized.clone())
    }

    fn stats(pair: &(Tensor, Tensor), epsilon: f64) -> ChannelStats {
        ChannelStats { mean: pair.0.clone(), std: pair.1.clone(), epsilon }
    }

    pub fn content_stats(&self) -> ChannelStats {
        Self::stats(&self.content_stats, DEFAULT_EPSILON)
    }

    pub fn style_stats(&self) -> ChannelStats {
        Self::stats(&self.style_stats, DEFAULT_EPSILON)
    }

    pub fn target_stats(&self) -> ChannelStats {
        Self::stats(&self.target_stats, DEFAULT_EPSILON)
    }
}

fn check_pair(content: &FeatureMap, style: &FeatureMap) -> Result<()> {
    if content.channels() != style.channels() {
        return Err(Error::Shape(format!(
            "content has {} channels, style {}",
            content.channels(),
            style.channels()
        )));
    }
    if style.batch() != content.batch() && style.batch() != 1 {
        return Err(Error::Shape(format!("style batch {} vs content batch {}", style.batch(), content.batch())));
    }
    Ok(())
}

/// Whitening, shared expansion, reweighted restylization and channel fusion.
pub fn decoupled_in(content: &FeatureMap, style: &FeatureMap, params: &TransformParams, lambda: f64) -> Result<StageTrace> {
    check_lambda(lambda)?;
    check_pair(content, style)?;
    params.apply(content.tensor(), style.tensor(), lambda)
}

/// Chains transform stages, feeding each output in as the next content while
/// reusing the raw style features. Returns one trace per stage.
pub fn consecutive_decoupled_in(
    content: &FeatureMap,
    style: &FeatureMap,
    params_list: &[TransformParams],
    lambda: f64,
) -> Result<Vec<StageTrace>> {
    if params_list.is_empty() || params_list.len() > 3 {
        return Err(Error::Domain(format!("chain length must be 1..=3, got {}", params_list.len())));
    }
    check_lambda(lambda)?;
    check_pair(content, style)?;
    let mut traces: Vec<StageTrace> = Vec::with_capacity(params_list.len());
    for params in params_list {
        let input = traces.last().map(|t| &t.output).unwrap_or(content.tensor());
        traces.push(params.apply(input, style.tensor(), lambda)?);
    }
    Ok(traces)
}

/// Per-frame summary of post-transform style statistics.
///
/// `values` concatenates, per segment, the mean vector followed by the std
/// vector; `segments` records each segment's channel count.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StyleVector {
    pub frame_index: usize,
    pub segments: Vec<usize>,
    pub values: Vec<f64>,
}

impl StyleVector {
    pub fn from_stats(frame_index: usize, stats: &[(Tensor, Tensor)]) -> Result<Self> {
        let mut segments = Vec::with_capacity(stats.len());
        let mut values = Vec::new();
        for (mean, std) in stats {
            let m: Vec<f64> = mean.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            let s: Vec<f64> = std.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            if m.len() != s.len() {
                return Err(Error::Shape("mean/std length mismatch".into()));
            }
            segments.push(m.len());
            values.extend(m);
            values.extend(s);
        }
        Ok(Self { frame_index, segments, values })
    }

    /// Splits back into `(1, C, 1, 1)` mean/std tensors per segment.
    pub fn to_stats(&self, dtype: DType, device: &Device) -> Result<Vec<(Tensor, Tensor)>> {
        let mut out = Vec::with_capacity(self.segments.len());
        let mut offset = 0;
        for &c in &self.segments {
            let mean = Tensor::from_slice(&self.values[offset..offset + c], (1, c, 1, 1), device)?.to_dtype(dtype)?;
            let std = Tensor::from_slice(&self.values[offset + c..offset + 2 * c], (1, c, 1, 1), device)?
                .to_dtype(dtype)?;
            out.push((mean, std));
            offset += 2 * c;
        }
        if offset != self.values.len() {
            return Err(Error::Shape(format!("style vector layout covers {offset} of {} values", self.values.len())));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Frame offsets and normalized weights of the temporal Gaussian window.
/// `sigma = kernel_size / 4`; offsets run from `-(k/2)` to `k - 1 - k/2`.
pub fn gaussian_window(kernel_size: usize) -> Vec<(isize, f64)> {
    let k = kernel_size.max(1);
    let sigma = k as f64 / 4.0;
    let start = -((k / 2) as isize);
    let raw: Vec<(isize, f64)> = (0..k as isize)
        .map(|i| {
            let o = start + i;
            (o, (-(o * o) as f64 / (2.0 * sigma * sigma)).exp())
        })
        .collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(o, w)| (o, w / total)).collect()
}

/// Temporal Gaussian smoothing of a style-vector sequence with boundary
/// re-normalization. Components that are constant across a window are copied
/// through unchanged.
pub fn gaussian_smooth_style_vectors(seq: &[StyleVector], kernel_size: usize) -> Result<Vec<StyleVector>> {
    if seq.is_empty() {
        return Err(Error::InvalidInput("empty style vector sequence".into()));
    }
    if kernel_size == 0 {
        return Err(Error::Domain("kernel size must be at least 1".into()));
    }
    let len = seq[0].len();
    if seq.iter().any(|v| v.len() != len || v.segments != seq[0].segments) {
        return Err(Error::Shape("style vectors in a sequence must share a layout".into()));
    }
    let window = gaussian_window(kernel_size);
    let n = seq.len() as isize;
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..n {
        let taps: Vec<(usize, f64)> = window
            .iter()
            .filter_map(|&(o, w)| {
                let i = t + o;
                (0..n).contains(&i).then_some((i as usize, w))
            })
            .collect();
        let norm: f64 = taps.iter().map(|(_, w)| w).sum();
        let values = (0..len)
            .map(|j| {
                let first = seq[taps[0].0].values[j];
                if taps.iter().all(|&(i, _)| seq[i].values[j] == first) {
                    first
                } else {
                    taps.iter().map(|&(i, w)| w * seq[i].values[j]).sum::<f64>() / norm
                }
            })
            .collect();
        out.push(StyleVector { frame_index: seq[t as usize].frame_index, segments: seq[0].segments.clone(), values });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn stats_of_small_channel() {
        let f = FeatureMap::from_vec(vec![2.0, 4.0, 6.0], 1, 1, 3).unwrap();
        let s = channel_stats(&f, 0.0).unwrap();
        // population std of [2,4,6] = sqrt(8/3)
        assert!(close(s.mean_vec(0).unwrap()[0], 4.0, 1e-12));
        assert!(close(s.std_vec(0).unwrap()[0], (8.0f64 / 3.0).sqrt(), 1e-12));
        assert!(close(s.std_vec(0).unwrap()[0], 1.63299, 1e-5));
    }

    #[test]
    fn constant_channel_std_is_epsilon() {
        let f = FeatureMap::from_vec(vec![5.0; 3], 1, 1, 3).unwrap();
        let s = channel_stats(&f, 1e-5).unwrap();
        assert_eq!(s.mean_vec(0).unwrap(), vec![5.0]);
        assert!(close(s.std_vec(0).unwrap()[0], 1e-5, 1e-18));
    }

    #[test]
    fn zero_map_stats() {
        let f = FeatureMap::from_vec(vec![0.0; 12], 3, 2, 2).unwrap();
        let s = channel_stats(&f, 1e-5).unwrap();
        assert_eq!(s.mean_vec(0).unwrap(), vec![0.0; 3]);
        assert!(s.std_vec(0).unwrap().iter().all(|&v| close(v, 1e-5, 1e-18)));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let t = Tensor::new(&[[[1.0f64, f64::NAN]]], &Device::Cpu).unwrap();
        assert!(matches!(FeatureMap::new(t), Err(Error::InvalidInput(_))));
        let f = FeatureMap::wrap(Tensor::new(&[[[[1.0f64, f64::INFINITY]]]], &Device::Cpu).unwrap());
        assert!(matches!(channel_stats(&f, 1e-5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn whiten_small_channel_and_constant() {
        let f = FeatureMap::from_vec(vec![2.0, 4.0, 6.0], 1, 1, 3).unwrap();
        let w = whiten(&f, 1e-5).unwrap().to_vec(0).unwrap();
        assert!(close(w[0], -1.2247, 1e-4) && close(w[1], 0.0, 1e-12) && close(w[2], 1.2247, 1e-4));
        let f = FeatureMap::from_vec(vec![5.0; 4], 1, 2, 2).unwrap();
        assert_eq!(whiten(&f, 1e-5).unwrap().to_vec(0).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn whiten_is_idempotent() {
        let values: Vec<f64> = (0..48).map(|i| ((i * 37 % 17) as f64).sin() * 3.0 + 1.0).collect();
        let f = FeatureMap::from_vec(values, 3, 4, 4).unwrap();
        let once = whiten(&f, 1e-5).unwrap();
        let twice = whiten(&once, 1e-5).unwrap();
        for (a, b) in once.to_vec(0).unwrap().iter().zip(twice.to_vec(0).unwrap()) {
            assert!(close(*a, b, 1e-8));
        }
    }

    #[test]
    fn adain_examples() {
        // channel with mean 0, std 1: [-1, 1]; value 1.0 maps to 2*1+3
        let f = FeatureMap::from_vec(vec![-1.0, 1.0], 1, 1, 2).unwrap();
        let target = ChannelStats::from_vecs(vec![3.0], vec![2.0], 0.0).unwrap();
        let out = adain_stylize(&f, &target).unwrap().to_vec(0).unwrap();
        assert!(close(out[1], 5.0, 1e-8) && close(out[0], 1.0, 1e-8));

        let c = FeatureMap::from_vec(vec![4.0; 9], 1, 3, 3).unwrap();
        let target = ChannelStats::from_vecs(vec![7.0], vec![2.0], 1e-5).unwrap();
        assert!(adain_stylize(&c, &target).unwrap().to_vec(0).unwrap().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn adain_with_own_stats_is_identity() {
        let values: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).cos() * 2.0).collect();
        let f = FeatureMap::from_vec(values.clone(), 2, 4, 4).unwrap();
        let s = channel_stats(&f, 1e-5).unwrap();
        let out = adain_stylize(&f, &s).unwrap().to_vec(0).unwrap();
        let max = out.iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max <= 1e-4);
    }

    #[test]
    fn adain_channel_mismatch() {
        let f = FeatureMap::from_vec(vec![0.0; 8], 2, 2, 2).unwrap();
        let target = ChannelStats::from_vecs(vec![0.0], vec![1.0], 1e-5).unwrap();
        assert!(matches!(adain_stylize(&f, &target), Err(Error::Shape(_))));
    }

    #[test]
    fn reweight_endpoints_and_midpoint() {
        let c = ChannelStats::from_vecs(vec![1.0], vec![1.0], 1e-5).unwrap();
        let s = ChannelStats::from_vecs(vec![3.0], vec![2.0], 1e-5).unwrap();
        let r0 = reweight_stats(&c, &s, 0.0).unwrap();
        assert_eq!((r0.mean_vec(0).unwrap(), r0.std_vec(0).unwrap()), (vec![1.0], vec![1.0]));
        let r1 = reweight_stats(&c, &s, 1.0).unwrap();
        assert_eq!((r1.mean_vec(0).unwrap(), r1.std_vec(0).unwrap()), (vec![3.0], vec![2.0]));
        let r = reweight_stats(&c, &s, 0.5).unwrap();
        assert_eq!((r.mean_vec(0).unwrap(), r.std_vec(0).unwrap()), (vec![2.0], vec![1.5]));
        assert!(matches!(reweight_stats(&c, &s, 1.5), Err(Error::Domain(_))));
        assert!(matches!(reweight_stats(&c, &s, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn transform_param_shapes() {
        let p = TransformParams::random(4, 2, 0, DType::F64).unwrap();
        assert_eq!(p.shared_conv.weight.dims(), &[8, 4, 3, 3]);
        assert_eq!(p.fuse_conv.weight.dims(), &[4, 8, 3, 3]);
        assert!(TransformParams::random(4, 4, 0, DType::F64).is_err());
        assert!(TransformParams::random(4, 0, 0, DType::F64).is_err());
    }

    #[test]
    fn chain_rejects_bad_lengths() {
        let f = FeatureMap::from_vec(vec![0.5; 16], 1, 4, 4).unwrap();
        assert!(matches!(consecutive_decoupled_in(&f, &f, &[], 1.0), Err(Error::Domain(_))));
        let p = TransformParams::random(1, 1, 0, DType::F64).unwrap();
        let four = vec![p.clone(), p.clone(), p.clone(), p];
        assert!(matches!(consecutive_decoupled_in(&f, &f, &four, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn gaussian_window_sums_to_one() {
        for k in [1, 2, 5, 20, 33] {
            let w = gaussian_window(k);
            assert_eq!(w.len(), k);
            assert!(close(w.iter().map(|(_, v)| v).sum::<f64>(), 1.0, 1e-12));
        }
    }

    #[test]
    fn smoothing_single_frame_and_empty() {
        let v = StyleVector { frame_index: 0, segments: vec![1], values: vec![1.0, 2.0] };
        assert_eq!(gaussian_smooth_style_vectors(&[v.clone()], 20).unwrap(), vec![v]);
        assert!(gaussian_smooth_style_vectors(&[], 20).is_err());
    }
}
