//! Optical flow estimation, backward warping of recurrent state, and the
//! convolutional LSTM cell.
//!
//! Flow convention: `estimate_flow(a, b)` returns `f` such that
//! `b(x + f(x)) ≈ a(x)`, i.e. `warp(b, f) ≈ a`. A frame whose content moved
//! right by three pixels between `a` and `b` yields `f ≈ (3, 0)`. To align
//! state from frame `t-1` with frame `t`, estimate `(frame_t, frame_{t-1})`.

use std::path::{Path, PathBuf};
use std::process::Command;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::feature_transform::FeatureMap;
use crate::image_io::Image;
use crate::nn::{self, Conv3x3, ParamBuilder};

/// Per-pixel displacement in pixels, planar `(dx, dy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    /// Downscale factor relative to the image the flow was estimated on.
    pub scale: usize,
    /// `data[0..h*w]` horizontal, `data[h*w..]` vertical.
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSidecar {
    pub h: usize,
    pub w: usize,
    pub frame_pair: [usize; 2],
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, scale: 1, data: vec![0.0; 2 * width * height] }
    }

    pub fn uniform(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        let plane = width * height;
        let mut data = vec![dx; plane];
        data.extend(std::iter::repeat_n(dy, plane));
        Self { width, height, scale: 1, data }
    }

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        let f = Self { width, height, scale: 1, data };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != 2 * self.width * self.height || self.width == 0 || self.height == 0 {
            return Err(Error::Shape(format!(
                "{} flow values for {}x{}",
                self.data.len(),
                self.height,
                self.width
            )));
        }
        let bound = self.width.max(self.height) as f32;
        if self.data.iter().any(|v| !v.is_finite() || v.abs() > bound) {
            return Err(Error::InvalidInput(format!("flow values must be finite and within ±{bound}")));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.width * self.height + i])
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn max_magnitude(&self) -> f32 {
        let plane = self.width * self.height;
        (0..plane).map(|i| self.data[i].hypot(self.data[plane + i])).fold(0.0, f32::max)
    }

    /// Writes `<stem>.f32` (little-endian planar data) and `<stem>.json`.
    pub fn save_raw(&self, stem: impl AsRef<Path>, frame_pair: [usize; 2]) -> Result<()> {
        let stem = stem.as_ref();
        let raw = stem.with_extension("f32");
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
        let side = stem.with_extension("json");
        let sidecar = FlowSidecar { h: self.height, w: self.width, frame_pair };
        std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load_raw(stem: impl AsRef<Path>) -> Result<(Self, FlowSidecar)> {
        let stem = stem.as_ref();
        let side = stem.with_extension("json");
        let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: FlowSidecar = serde_json::from_slice(&text)?;
        let raw = stem.with_extension("f32");
        let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let flow = Self::new(sidecar.w, sidecar.h, data)?;
        Ok((flow, sidecar))
    }
}

/// Produces a flow field between two frames under the module convention.
pub trait FlowEstimator: Send + Sync {
    fn estimate(&self, reference: &Image, target: &Image) -> Result<FlowField>;
}

/// Exhaustive sum-of-absolute-differences block matching.
///
/// Patches of `patch × patch` pixels are centred on a grid with spacing
/// `grid`; every displacement within `±radius` is scored, ties going to the
/// smaller displacement magnitude and then to the lexicographically smaller
/// `(dx, dy)`. Pixels take the vector of their nearest grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMatcher {
    pub patch: usize,
    pub grid: usize,
    pub radius: usize,
}

impl Default for BlockMatcher {
    fn default() -> Self {
        Self { patch: 8, grid: 4, radius: 8 }
    }
}

impl BlockMatcher {
    fn match_point(&self, a: &Image, b: &Image, gy: usize, gx: usize) -> (i32, i32) {
        let (h, w) = (a.height as isize, a.width as isize);
        let half = (self.patch / 2) as isize;
        let r = self.radius as isize;
        let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
        let mut best: Option<(f64, isize, isize, isize)> = None;
        for dy in -r..=r {
            for dx in -r..=r {
                let mut cost = 0.0f64;
                for oy in -half..(self.patch as isize - half) {
                    let ay = clamp(gy as isize + oy, h);
                    let by = clamp(gy as isize + oy + dy, h);
                    for ox in -half..(self.patch as isize - half) {
                        let ax = clamp(gx as isize + ox, w);
                        let bx = clamp(gx as isize + ox + dx, w);
                        for c in 0..3 {
                            cost += (a.get(c, ay, ax) - b.get(c, by, bx)).abs() as f64;
                        }
                    }
                }
                let key = (cost, dx * dx + dy * dy, dx, dy);
                let better = match best {
                    None => true,
                    Some(cur) => {
                        key.0 < cur.0 || (key.0 == cur.0 && (key.1, key.2, key.3) < (cur.1, cur.2, cur.3))
                    }
                };
                if better {
                    best = Some(key);
                }
            }
        }
        let (_, _, dx, dy) = best.expect("non-empty search window");
        (dx as i32, dy as i32)
    }
}

impl FlowEstimator for BlockMatcher {
    fn estimate(&self, reference: &Image, target: &Image) -> Result<FlowField> {
        if reference.shape() != target.shape() {
            return Err(Error::Shape(format!("frames {:?} vs {:?}", reference.shape(), target.shape())));
        }
        if self.patch == 0 || self.grid == 0 {
            return Err(Error::Config("block matcher needs positive patch and grid sizes".into()));
        }
        let (h, w) = reference.shape();
        let gys: Vec<usize> = (0..h).step_by(self.grid).collect();
        let gxs: Vec<usize> = (0..w).step_by(self.grid).collect();
        let mut grid = Vec::with_capacity(gys.len() * gxs.len());
        for &gy in &gys {
            for &gx in &gxs {
                grid.push(self.match_point(reference, target, gy, gx));
            }
        }
        let plane = h * w;
        let mut data = vec![0.0f32; 2 * plane];
        let nearest = |v: usize, n: usize| ((v + self.grid / 2) / self.grid).min(n - 1);
        for y in 0..h {
            let iy = nearest(y, gys.len());
            for x in 0..w {
                let (dx, dy) = grid[iy * gxs.len() + nearest(x, gxs.len())];
                data[y * w + x] = dx as f32;
                data[plane + y * w + x] = dy as f32;
            }
        }
        Ok(FlowField { width: w, height: h, scale: 1, data })
    }
}

/// Delegates to an external learned estimator.
///
/// The program is invoked as
/// `PROGRAM --weights ARCHIVE --reference A.png --target B.png --out STEM`
/// and must leave `STEM.f32` / `STEM.json` in the raw flow format. The weight
/// archive is manifest-validated before the first invocation.
#[derive(Clone, Debug)]
pub struct ExternalFlowAdapter {
    program: PathBuf,
    weights: PathBuf,
}

impl ExternalFlowAdapter {
    pub fn new(program: impl Into<PathBuf>, weights: impl Into<PathBuf>) -> Result<Self> {
        let program = program.into();
        let weights = weights.into();
        if !program.is_file() {
            return Err(Error::Config(format!("flow estimator `{}` is not available", program.display())));
        }
        Archive::load(&weights).map_err(|e| Error::Config(format!("flow weights: {e}")))?;
        Ok(Self { program, weights })
    }
}

impl FlowEstimator for ExternalFlowAdapter {
    fn estimate(&self, reference: &Image, target: &Image) -> Result<FlowField> {
        if reference.shape() != target.shape() {
            return Err(Error::Shape(format!("frames {:?} vs {:?}", reference.shape(), target.shape())));
        }
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let a = dir.path().join("reference.png");
        let b = dir.path().join("target.png");
        reference.save_png(&a)?;
        target.save_png(&b)?;
        let stem = dir.path().join("flow");
        let status = Command::new(&self.program)
            .arg("--weights")
            .arg(&self.weights)
            .arg("--reference")
            .arg(&a)
            .arg("--target")
            .arg(&b)
            .arg("--out")
            .arg(&stem)
            .status()
            .map_err(|e| Error::Config(format!("cannot run `{}`: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::Config(format!("flow estimator exited with {status}")));
        }
        let (flow, _) = FlowField::load_raw(&stem)?;
        if (flow.height, flow.width) != reference.shape() {
            return Err(Error::Shape("external flow resolution differs from the frames".into()));
        }
        Ok(flow)
    }
}

pub fn estimate_flow(estimator: &dyn FlowEstimator, prev: &Image, next: &Image) -> Result<FlowField> {
    estimator.estimate(prev, next)
}

/// Average-pools by `factor` and rescales displacements to the coarser grid.
pub fn downscale_flow(flow: &FlowField, factor: usize) -> Result<FlowField> {
    if ![1, 2, 4, 8].contains(&factor) {
        return Err(Error::Domain(format!("downscale factor must be 1, 2, 4 or 8, got {factor}")));
    }
    if flow.width % factor != 0 || flow.height % factor != 0 {
        return Err(Error::Shape(format!("{}x{} flow is not divisible by {factor}", flow.height, flow.width)));
    }
    if factor == 1 {
        return Ok(flow.clone());
    }
    let (h, w) = (flow.height / factor, flow.width / factor);
    let plane_in = flow.width * flow.height;
    let mut data = vec![0.0f32; 2 * h * w];
    let norm = (factor * factor) as f64 * factor as f64;
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += flow.data[c * plane_in + (y * factor + dy) * flow.width + x * factor + dx] as f64;
                    }
                }
                data[c * h * w + y * w + x] = (acc / norm) as f32;
            }
        }
    }
    Ok(FlowField { width: w, height: h, scale: flow.scale * factor, data })
}

/// Precomputed bilinear gather for one flow field.
struct WarpPlan {
    index: [Tensor; 4],
    weight: [Vec<f64>; 4],
}

impl WarpPlan {
    fn new(flow: &FlowField) -> Result<Self> {
        let (h, w) = (flow.height, flow.width);
        let mut idx: [Vec<u32>; 4] = Default::default();
        let mut wts: [Vec<f64>; 4] = Default::default();
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = flow.at(y, x);
                let px = (x as f64 + fx as f64).clamp(0.0, (w - 1) as f64);
                let py = (y as f64 + fy as f64).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (px.floor() as usize, py.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (ax, ay) = (px - x0 as f64, py - y0 as f64);
                let corners = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)];
                let weights = [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay];
                for k in 0..4 {
                    idx[k].push((corners[k].0 * w + corners[k].1) as u32);
                    wts[k].push(weights[k]);
                }
            }
        }
        let index = idx.map(|v| {
            let n = v.len();
            Tensor::from_vec(v, n, &Device::Cpu).expect("index tensor")
        });
        Ok(Self { index, weight: wts })
    }

    fn apply(&self, state: &Tensor) -> Result<Tensor> {
        let (c, h, w) = state.dims3()?;
        let flat = state.reshape((c, h * w))?;
        let mut out: Option<Tensor> = None;
        for k in 0..4 {
            let wk = Tensor::from_slice(&self.weight[k], (1, h * w), state.device())?.to_dtype(state.dtype())?;
            let term = flat.index_select(&self.index[k], 1)?.broadcast_mul(&wk)?;
            out = Some(match out {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
        Ok(out.expect("four corners").reshape((c, h, w))?)
    }
}

/// Backward-warps a `(N, C, H, W)` tensor: `out(x) = state(x + flow(x))`,
/// bilinear with border clamping. `flows` holds one field per sample, or a
/// single field shared by the batch.
pub(crate) fn warp_tensor(state: &Tensor, flows: &[FlowField]) -> Result<Tensor> {
    let (n, _, h, w) = state.dims4()?;
    if flows.len() != n && flows.len() != 1 {
        return Err(Error::Shape(format!("{} flow fields for a batch of {n}", flows.len())));
    }
    for f in flows {
        if (f.height, f.width) != (h, w) {
            return Err(Error::Shape(format!("flow {}x{} vs state {h}x{w}", f.height, f.width)));
        }
    }
    if flows.iter().all(FlowField::is_zero) {
        return Ok(state.clone());
    }
    let plans = flows.iter().map(WarpPlan::new).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let plan = &plans[if plans.len() == 1 { 0 } else { i }];
        out.push(plan.apply(&state.get(i)?)?);
    }
    Ok(Tensor::stack(&out, 0)?)
}

pub fn warp(state: &FeatureMap, flow: &FlowField) -> Result<FeatureMap> {
    Ok(FeatureMap::wrap(warp_tensor(state.tensor(), std::slice::from_ref(flow))?))
}

/// Temporal ablation switch for the restoration network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Flow-warped recurrent state.
    #[default]
    Full,
    /// Recurrent state carried over unwarped.
    NoFlow,
    /// State reset to zero at every frame.
    NoRecurrence,
}

#[derive(Clone, Debug)]
pub struct ConvLstmState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

impl ConvLstmState {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize, dtype: DType) -> Result<Self> {
        let z = Tensor::zeros((batch, channels, height, width), dtype, &Device::Cpu)?;
        Ok(Self { hidden: z.clone(), cell: z })
    }

    /// Warps hidden and cell state alike.
    pub fn warped(&self, flows: &[FlowField]) -> Result<Self> {
        Ok(Self { hidden: warp_tensor(&self.hidden, flows)?, cell: warp_tensor(&self.cell, flows)? })
    }

    pub fn detach(&self) -> Self {
        Self { hidden: self.hidden.detach(), cell: self.cell.detach() }
    }
}

/// Gate convolution `(c_in + c_hid) → 4·c_hid`, gates ordered input, forget,
/// output, candidate.
#[derive(Clone, Debug)]
pub struct ConvLstmParams {
    pub gates: Conv3x3,
    pub hidden_channels: usize,
}

impl ConvLstmParams {
    pub(crate) fn build(b: &mut ParamBuilder, name: &str, in_ch: usize, hidden: usize) -> Result<Self> {
        Ok(Self { gates: Conv3x3::new(b, &format!("{name}.gates"), in_ch + hidden, 4 * hidden)?, hidden_channels: hidden })
    }

    pub fn random(in_ch: usize, hidden: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut b = ParamBuilder::seeded(seed, dtype, &Device::Cpu);
        Self::build(&mut b, "lstm", in_ch, hidden)
    }

    pub fn input_channels(&self) -> usize {
        self.gates.in_channels() - self.hidden_channels
    }

    pub(crate) fn step_tensor(&self, input: &Tensor, state: &ConvLstmState) -> Result<ConvLstmState> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.input_channels() {
            return Err(Error::Shape(format!("LSTM input has {c} channels, expected {}", self.input_channels())));
        }
        let expected = [n, self.hidden_channels, h, w];
        if state.hidden.dims() != expected || state.cell.dims() != expected {
            return Err(Error::Shape(format!(
                "LSTM state {:?}/{:?} does not match {expected:?}",
                state.hidden.dims(),
                state.cell.dims()
            )));
        }
        let gates = self.gates.forward(&Tensor::cat(&[input, &state.hidden], 1)?)?;
        let hc = self.hidden_channels;
        let i = nn::sigmoid(&gates.narrow(1, 0, hc)?)?;
        let f = nn::sigmoid(&gates.narrow(1, hc, hc)?)?;
        let o = nn::sigmoid(&gates.narrow(1, 2 * hc, hc)?)?;
        let g = gates.narrow(1, 3 * hc, hc)?.tanh()?;
        let cell = ((f * &state.cell)? + (i * g)?)?;
        let hidden = (o * cell.tanh()?)?;
        Ok(ConvLstmState { hidden, cell })
    }
}

/// One ConvLSTM update; the output is the new hidden state.
pub fn convlstm_step(
    input: &FeatureMap,
    state: &ConvLstmState,
    params: &ConvLstmParams,
) -> Result<(FeatureMap, ConvLstmState)> {
    let next = params.step_tensor(input.tensor(), state)?;
    Ok((FeatureMap::wrap(next.hidden.clone()), next))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downscale_examples() {
        let z = FlowField::zeros(16, 8);
        assert!(downscale_flow(&z, 4).unwrap().is_zero());
        let u = FlowField::uniform(16, 8, 8.0, 0.0);
        let d = downscale_flow(&u, 4).unwrap();
        assert_eq!((d.width, d.height, d.scale), (4, 2, 4));
        assert!(d.data[..8].iter().all(|&v| v == 2.0) && d.data[8..].iter().all(|&v| v == 0.0));
        assert_eq!(downscale_flow(&u, 1).unwrap(), u);
        assert!(matches!(downscale_flow(&FlowField::zeros(12, 8), 8), Err(Error::Shape(_))));
        assert!(matches!(downscale_flow(&u, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn flow_validation() {
        assert!(FlowField::new(2, 2, vec![0.0; 7]).is_err());
        assert!(FlowField::new(2, 2, vec![f32::NAN; 8]).is_err());
        assert!(FlowField::new(2, 2, vec![5.0; 8]).is_err());
        assert!(FlowField::new(2, 2, vec![1.0; 8]).is_ok());
    }

    #[test]
    fn raw_flow_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let flow = FlowField::new(3, 2, vec![0.5, -1.0, 0.0, 1.5, 2.0, 0.25, 0.0, 0.0, 1.0, -2.0, 0.0, 0.125]).unwrap();
        flow.save_raw(dir.path().join("p"), [3, 4]).unwrap();
        let (back, side) = FlowField::load_raw(dir.path().join("p")).unwrap();
        assert_eq!(back, flow);
        assert_eq!(side, FlowSidecar { h: 2, w: 3, frame_pair: [3, 4] });
    }

    #[test]
    fn block_matcher_shape_mismatch() {
        let a = Image::filled(16, 16, [0.0; 3]);
        let b = Image::filled(8, 16, [0.0; 3]);
        assert!(matches!(BlockMatcher::default().estimate(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn external_adapter_requires_program() {
        let err = ExternalFlowAdapter::new("/nonexistent/raft", "/nonexistent/w").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn ramp_shifts_one_column() {
        let vals: Vec<f64> = (0..12).map(|i| (i % 4) as f64).collect();
        let state = FeatureMap::from_vec(vals, 1, 3, 4).unwrap();
        let out = warp(&state, &FlowField::uniform(4, 3, 1.0, 0.0)).unwrap().to_vec(0).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0, 3.0, 1.0, 2.0, 3.0, 3.0, 1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn zero_params_give_zero_hidden() {
        let mut b = ParamBuilder::seeded(0, DType::F64, &Device::Cpu);
        let gates = Conv3x3 { weight: b.zeros("w", &[16, 7, 3, 3]).unwrap(), bias: b.zeros("b", &[16]).unwrap() };
        let params = ConvLstmParams { gates, hidden_channels: 4 };
        let input = FeatureMap::from_vec((0..48).map(|i| i as f64).collect(), 3, 4, 4).unwrap();
        let state = ConvLstmState::zeros(1, 4, 4, 4, DType::F64).unwrap();
        let (out, next) = convlstm_step(&input, &state, &params).unwrap();
        assert!(out.to_vec(0).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(next.cell.dims(), &[1, 4, 4, 4]);
    }

    #[test]
    fn lstm_shape_contract() {
        let params = ConvLstmParams::random(5, 64, 1, DType::F32).unwrap();
        let input = FeatureMap::new(Tensor::rand(0f32, 1.0, (5, 16, 16), &Device::Cpu).unwrap()).unwrap();
        let state = ConvLstmState::zeros(1, 64, 16, 16, DType::F32).unwrap();
        let (out, _) = convlstm_step(&input, &state, &params).unwrap();
        assert_eq!(out.tensor().dims(), &[1, 64, 16, 16]);
        let bad = ConvLstmState::zeros(1, 32, 16, 16, DType::F32).unwrap();
        assert!(matches!(convlstm_step(&input, &bad, &params), Err(Error::Shape(_))));
    }
}
