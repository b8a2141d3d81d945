//! Differentiable building blocks on top of `candle_core` tensors.
//!
//! 3×3 convolutions are a custom op: the forward pass unfolds into a
//! temporary column matrix and runs one gemm, and the backward pass rebuilds
//! the columns instead of keeping them alive in the graph. Only the input
//! and kernel are retained, and both directions stay on the gemm path.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, WithDType};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Columns of a contiguous `(B, C, H, W)` buffer, laid out `(9·C, B·H·W)`
/// with row `(ky·3 + kx)·C + c`.
fn im2col<T: WithDType>(x: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let cols_w = b * plane;
    let mut cols = vec![T::zero(); 9 * c * cols_w];
    for ky in 0..3 {
        for kx in 0..3 {
            for ci in 0..c {
                let row = ((ky * 3 + kx) * c + ci) * cols_w;
                for bi in 0..b {
                    let src = &x[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    let dst = &mut cols[row + bi * plane..row + (bi + 1) * plane];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let srow = &src[(sy - 1) * w..sy * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        // destination x reads source x + kx - 1
                        match kx {
                            0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                            1 => drow.copy_from_slice(srow),
                            _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv3x3 needs contiguous operands".into()))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

struct Conv3x3Op;

impl Conv3x3Op {
    fn forward<T: WithDType>(x: &[T], xl: &Layout, k: &[T], kl: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = xl.shape().dims4()?;
        let (o, _, _, _) = kl.shape().dims4()?;
        let cols = Tensor::from_vec(im2col(x, b, c, h, w), (9 * c, b * h * w), &Device::Cpu)?;
        let mut kmat = vec![T::zero(); o * 9 * c];
        for oi in 0..o {
            for ci in 0..c {
                for t in 0..9 {
                    kmat[oi * 9 * c + t * c + ci] = k[(oi * c + ci) * 9 + t];
                }
            }
        }
        let kmat = Tensor::from_vec(kmat, (o, 9 * c), &Device::Cpu)?;
        let prod = kmat.matmul(&cols)?.flatten_all()?.to_vec1::<T>()?;
        let plane = h * w;
        let out = if b == 1 {
            prod
        } else {
            let mut out = vec![T::zero(); b * o * plane];
            for oi in 0..o {
                for bi in 0..b {
                    out[(bi * o + oi) * plane..(bi * o + oi + 1) * plane]
                        .copy_from_slice(&prod[(oi * b + bi) * plane..(oi * b + bi + 1) * plane]);
                }
            }
            out
        };
        Ok((T::to_cpu_storage_owned(out), Shape::from((b, o, h, w))))
    }

    fn unfold<T: WithDType>(x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let v = x.flatten_all()?.to_vec1::<T>()?;
        Tensor::from_vec(im2col(&v, b, c, h, w), (9 * c, b * h * w), &Device::Cpu)
    }
}

impl CustomOp2 for Conv3x3Op {
    fn name(&self) -> &'static str {
        "conv3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                Self::forward::<f32>(contiguous(s1, l1)?, l1, contiguous(s2, l2)?, l2)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                Self::forward::<f64>(contiguous(s1, l1)?, l1, contiguous(s2, l2)?, l2)
            }
            _ => Err(candle_core::Error::Msg("conv3x3 supports matching f32 or f64 operands".into())),
        }
    }

    fn bwd(&self, x: &Tensor, k: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        // frozen operands (encoder weights, raw frames) get no gradient
        let (need_x, need_k) = (x.track_op(), k.track_op());
        let (x, k, grad) = (x.detach(), k.detach(), grad.detach().contiguous()?);
        let (b, c, h, w) = x.dims4()?;
        let o = k.dims()[0];
        let grad_x = if need_x {
            // correlation with the spatially flipped, transposed kernel
            let flipped = Tensor::cat(
                &(0..9).rev().map(|t| k.flatten_from(2)?.narrow(2, t, 1)).collect::<candle_core::Result<Vec<_>>>()?,
                2,
            )?
            .reshape((o, c, 3, 3))?
            .transpose(0, 1)?
            .contiguous()?;
            Some(grad.apply_op2_no_bwd(&flipped, &Conv3x3Op)?)
        } else {
            None
        };
        let grad_k = if need_k {
            let cols = match x.dtype() {
                DType::F64 => Self::unfold::<f64>(&x)?,
                _ => Self::unfold::<f32>(&x)?,
            };
            let g = grad.transpose(0, 1)?.contiguous()?.reshape((o, b * h * w))?;
            Some(g.matmul(&cols.t()?)?.reshape((o, 3, 3, c))?.permute((0, 3, 1, 2))?.contiguous()?)
        } else {
            None
        };
        Ok((grad_x, grad_k))
    }
}

/// 2×2 stride-2 max pooling. The gradient goes to the first maximal element
/// of each window in row-major order.
struct MaxPool2x2;

impl MaxPool2x2 {
    fn forward<T: WithDType>(x: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in x.chunks(h * w).take(b * c) {
            for y in 0..oh {
                for xo in 0..ow {
                    let i = Self::argmax(plane, w, y, xo);
                    out.push(plane[i]);
                }
            }
        }
        out
    }

    #[inline]
    fn argmax<T: WithDType>(plane: &[T], w: usize, y: usize, x: usize) -> usize {
        let base = 2 * y * w + 2 * x;
        let mut best = base;
        for i in [base + 1, base + w, base + w + 1] {
            if plane[i] > plane[best] {
                best = i;
            }
        }
        best
    }

    fn backward<T: WithDType>(x: &[T], grad: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); b * c * h * w];
        for p in 0..b * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xo in 0..ow {
                    let i = Self::argmax(plane, w, y, xo);
                    out[p * h * w + i] += grad[(p * oh + y) * ow + xo];
                }
            }
        }
        out
    }
}

impl CustomOp1 for MaxPool2x2 {
    fn name(&self) -> &'static str {
        "max_pool2x2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let shape = Shape::from((b, c, h / 2, w / 2));
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(Self::forward(contiguous::<f32>(s, l)?, b, c, h, w)),
            CpuStorage::F64(_) => CpuStorage::F64(Self::forward(contiguous::<f64>(s, l)?, b, c, h, w)),
            _ => return Err(candle_core::Error::Msg("max_pool2x2 supports f32 or f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = x.dims4()?;
        let out = match x.dtype() {
            DType::F64 => {
                let v = Self::backward(&x.flatten_all()?.to_vec1::<f64>()?, &grad.flatten_all()?.to_vec1::<f64>()?, b, c, h, w);
                Tensor::from_vec(v, (b, c, h, w), x.device())?
            }
            _ => {
                let v = Self::backward(&x.flatten_all()?.to_vec1::<f32>()?, &grad.flatten_all()?.to_vec1::<f32>()?, b, c, h, w);
                Tensor::from_vec(v, (b, c, h, w), x.device())?
            }
        };
        Ok(Some(out))
    }
}

/// 2×2 stride-2 max pooling of a `(B, C, H, W)` batch with even sides.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even sides, got {h}x{w}")));
    }
    Ok(x.contiguous()?.apply_op1(MaxPool2x2)?)
}

/// Stride-1, zero-padded 3×3 convolution of a `(B, C, H, W)` batch with a
/// `(O, C, 3, 3)` kernel.
pub fn conv3x3(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != 3 || kw != 3 {
        return Err(Error::Shape(format!(
            "conv3x3 kernel {:?} does not accept {c} input channels",
            weight.dims()
        )));
    }
    if x.dtype() != weight.dtype() {
        return Err(Error::Shape(format!("conv3x3 dtypes {:?} vs {:?}", x.dtype(), weight.dtype())));
    }
    let out = x.contiguous()?.apply_op2(&weight.contiguous()?, Conv3x3Op)?;
    match bias {
        Some(bias) => Ok(out.broadcast_add(&bias.reshape((1, o, 1, 1))?)?),
        None => Ok(out),
    }
}

/// Logistic sigmoid written through `tanh` so the backward pass never forms
/// `inf / inf` for large negative inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("mse operands {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Returns an error if any element is NaN or infinite.
pub(crate) fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let total = x.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite values")))
    }
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with parameter tracking disabled on this thread, so the forward
/// pass records no graph and intermediates are freed as soon as they die.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

/// Deterministic named trainable parameters. Iteration order is the
/// lexicographic order of names.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub(crate) fn insert(&mut self, name: String, var: Var) {
        self.vars.insert(name, var);
    }
}

enum Source {
    Init(ChaCha8Rng),
    Load(BTreeMap<String, Tensor>),
}

/// Creates parameters either from a seeded initializer or from loaded arrays.
pub(crate) struct ParamBuilder {
    source: Source,
    dtype: DType,
    device: Device,
    set: ParamSet,
}

impl ParamBuilder {
    pub fn seeded(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            source: Source::Init(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: device.clone(),
            set: ParamSet::default(),
        }
    }

    pub fn from_arrays(arrays: BTreeMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self { source: Source::Load(arrays), dtype, device: device.clone(), set: ParamSet::default() }
    }

    fn take(&mut self, name: &str, shape: &[usize], init: impl FnOnce(&mut ChaCha8Rng) -> Vec<f64>) -> Result<Var> {
        let tensor = match &mut self.source {
            Source::Init(rng) => {
                let values = init(rng);
                Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?
            }
            Source::Load(arrays) => {
                let t = arrays.remove(name).ok_or_else(|| Error::archive(name, "missing array"))?;
                if t.dims() != shape {
                    return Err(Error::archive(
                        name,
                        format!("expected shape {shape:?}, found {:?}", t.dims()),
                    ));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        self.set.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.take(name, shape, |rng| {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng)).collect()
        })
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.take(name, shape, |_| vec![0.0; n])
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn finish(self) -> Result<ParamSet> {
        if let Source::Load(rest) = &self.source {
            if let Some(name) = rest.keys().next() {
                return Err(Error::archive(name.clone(), "unexpected array"));
            }
        }
        Ok(self.set)
    }
}

/// A 3×3 convolution with bias, fan-in scaled normal init.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: Var,
    pub bias: Var,
}

impl Conv3x3 {
    pub(crate) fn new(b: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let std = (2.0 / (9.0 * in_ch as f64)).sqrt();
        let weight = b.normal(&format!("{name}.weight"), &[out_ch, in_ch, 3, 3], std)?;
        let bias = b.zeros(&format!("{name}.bias"), &[out_ch])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if grad_enabled() {
            conv3x3(x, self.weight.as_tensor(), Some(self.bias.as_tensor()))
        } else {
            conv3x3(x, &self.weight.as_tensor().detach(), Some(&self.bias.as_tensor().detach()))
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}
