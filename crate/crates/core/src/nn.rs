//! Differentiable building blocks on top of `candle_core` tensors.
//!
//! Only the tensor engine and reverse-mode autodiff come from candle; every
//! layer used by the backbone and the recurrent model is defined here.
//! Tensors use NCHW layout throughout.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A named model variable. Buffers (batch-norm running statistics) are
/// excluded from gradients and optimizers but travel with checkpoints and EMA.
#[derive(Debug, Clone)]
pub struct NamedVar {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

/// Anything holding model variables.
pub trait Parameterized {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>);

    fn named_vars(&self) -> Vec<NamedVar> {
        let mut out = Vec::new();
        self.collect_vars("", &mut out);
        out
    }

    fn trainable_vars(&self) -> Vec<Var> {
        self.named_vars()
            .into_iter()
            .filter(|v| v.trainable)
            .map(|v| v.var)
            .collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Initializer {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| bound * (2.0 * self.rng.random::<f64>() - 1.0))
            .collect();
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn constant(&self, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, &self.device)? * value)?;
        Ok(Var::from_tensor(&t)?)
    }
}

/// Convolution with "same" padding for odd square kernels, lowered to a
/// batched matrix product over an im2col view. Stride 1 or 2.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (cout, cin, kh, kw) = weight.dims4()?;
    if cin != c {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {cin} input channels, got {c}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel {kh}x{kw} must be odd and square")));
    }
    if stride != 1 && (h % stride != 0 || w % stride != 0) {
        return Err(Error::InvalidInputSize {
            height: h,
            width: w,
            divisor: stride,
        });
    }
    let (ho, wo) = (h / stride, w / stride);
    let out = if kh == 1 {
        let xs = subsample(x, stride)?;
        let cols = xs.reshape((b, c, ho * wo))?;
        weight.reshape((cout, c))?.broadcast_matmul(&cols)?
    } else {
        let pad = kh / 2;
        let xp = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
        let mut taps = Vec::with_capacity(kh * kw);
        for dy in 0..kh {
            for dx in 0..kw {
                let v = xp.narrow(2, dy, h)?.narrow(3, dx, w)?;
                taps.push(subsample(&v, stride)?);
            }
        }
        // (B, C, K², Ho, Wo): channel-major, matching the (Cout, C, K, K) weight layout.
        let cols = Tensor::stack(&taps, 2)?.reshape((b, c * kh * kw, ho * wo))?;
        weight.reshape((cout, c * kh * kw))?.broadcast_matmul(&cols)?
    };
    let out = out.reshape((b, cout, ho, wo))?;
    match bias {
        Some(bias) => Ok(out.broadcast_add(&bias.reshape((1, cout, 1, 1))?)?),
        None => Ok(out),
    }
}

/// Keeps every `stride`-th row and column starting at 0.
fn subsample(x: &Tensor, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / stride, w / stride);
    Ok(x
        .contiguous()?
        .reshape((b, c, ho, stride, wo, stride))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((b, c, ho, wo))?)
}

/// 3×3 max pooling with stride 2 and one pixel of zero padding.
///
/// Zero padding equals −∞ padding here because the input is always the
/// output of a ReLU.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidInputSize {
            height: h,
            width: w,
            divisor: 2,
        });
    }
    let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut taps = Vec::with_capacity(9);
    for dy in 0..3 {
        for dx in 0..3 {
            taps.push(subsample(&xp.narrow(2, dy, h)?.narrow(3, dx, w)?, 2)?);
        }
    }
    Ok(Tensor::stack(&taps, 0)?.max(0)?)
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

/// Elementwise σ or tanh with closed-form backward passes. Both are built on
/// `exp`, which is several times cheaper than `tanh` on the CPU backend.
#[derive(Clone, Copy)]
enum Squash {
    Sigmoid,
    Tanh,
}

macro_rules! squash_fns {
    ($sig:ident, $tanh:ident, $t:ty) => {
        fn $sig(x: $t) -> $t {
            let e = (-x.abs()).exp();
            let r = 1.0 / (1.0 + e);
            if x >= 0.0 {
                r
            } else {
                e * r
            }
        }

        fn $tanh(x: $t) -> $t {
            let e = (-2.0 * x.abs()).exp();
            ((1.0 - e) / (1.0 + e)).copysign(x)
        }
    };
}

squash_fns!(sigmoid_f32, tanh_f32, f32);
squash_fns!(sigmoid_f64, tanh_f64, f64);

impl CustomOp1 for Squash {
    fn name(&self) -> &'static str {
        match self {
            Squash::Sigmoid => "sigmoid",
            Squash::Tanh => "tanh",
        }
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (a, b) = layout
            .contiguous_offsets()
            .ok_or(candle_core::Error::RequiresContiguous { op: self.name() })?;
        let out = match (storage, self) {
            (CpuStorage::F32(v), Squash::Sigmoid) => CpuStorage::F32(v[a..b].iter().map(|&x| sigmoid_f32(x)).collect()),
            (CpuStorage::F32(v), Squash::Tanh) => CpuStorage::F32(v[a..b].iter().map(|&x| tanh_f32(x)).collect()),
            (CpuStorage::F64(v), Squash::Sigmoid) => CpuStorage::F64(v[a..b].iter().map(|&x| sigmoid_f64(x)).collect()),
            (CpuStorage::F64(v), Squash::Tanh) => CpuStorage::F64(v[a..b].iter().map(|&x| tanh_f64(x)).collect()),
            _ => candle_core::bail!("{} supports f32 and f64 only", self.name()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let slope = match self {
            Squash::Sigmoid => (res * (1.0 - res)?)?,
            Squash::Tanh => (1.0 - res.sqr()?)?,
        };
        Ok(Some(grad_res.mul(&slope)?))
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Squash::Sigmoid)?)
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Squash::Tanh)?)
}

/// L2-normalizes along `dim`.
pub fn l2_normalize(x: &Tensor, dim: usize) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(dim)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// log Σ exp along the last dimension, keeping it.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok((s + m)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_sub(&logsumexp_last(x)?)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
}

impl Conv2d {
    /// Weights uniform in ±1/√fan_in; bias likewise when present.
    pub fn new(
        init: &mut Initializer,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = init.uniform(&[cout, cin, kernel, kernel], bound)?;
        let bias = if bias {
            Some(init.uniform(&[cout], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(
            x,
            self.weight.as_tensor(),
            self.bias.as_ref().map(|b| b.as_tensor()),
            self.stride,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Parameterized for Conv2d {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>) {
        out.push(NamedVar {
            name: join(prefix, "weight"),
            var: self.weight.clone(),
            trainable: true,
        });
        if let Some(b) = &self.bias {
            out.push(NamedVar {
                name: join(prefix, "bias"),
                var: b.clone(),
                trainable: true,
            });
        }
    }
}

/// How batch normalization obtains its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics untouched.
    BatchStats,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(init: &Initializer, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&[channels], 1.0)?,
            beta: init.constant(&[channels], 0.0)?,
            running_mean: init.constant(&[channels], 0.0)?,
            running_var: init.constant(&[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            BnMode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            ),
            BnMode::Train | BnMode::BatchStats => {
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                if mode == BnMode::Train {
                    let n = (b * h * w) as f64;
                    let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                    let m = self.momentum;
                    let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                        + (mean.detach().flatten_all()? * m)?)?;
                    let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                        + (var.detach().flatten_all()? * (m * unbiased))?)?;
                    self.running_mean.set(&new_mean)?;
                    self.running_var.set(&new_var)?;
                }
                (mean, var)
            }
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

impl Parameterized for BatchNorm {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>) {
        for (name, var, trainable) in [
            ("gamma", &self.gamma, true),
            ("beta", &self.beta, true),
            ("running_mean", &self.running_mean, false),
            ("running_var", &self.running_var, false),
        ] {
            out.push(NamedVar {
                name: join(prefix, name),
                var: var.clone(),
                trainable,
            });
        }
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvUnit {
    pub fn new(init: &mut Initializer, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        // The bias is absorbed by the batch-norm shift.
        let conv = Conv2d::new(init, cin, cout, 3, stride, false)?;
        let bn = BatchNorm::new(init, cout)?;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

impl Parameterized for ConvUnit {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>) {
        self.conv.collect_vars(&join(prefix, "conv"), out);
        self.bn.collect_vars(&join(prefix, "bn"), out);
    }
}

/// Copies the values of `src` into `dst`, matching variables by name.
pub fn copy_vars(dst: &[NamedVar], src: &[NamedVar]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::StructureMismatch(format!(
            "{} variables vs {}",
            dst.len(),
            src.len()
        )));
    }
    for (d, s) in dst.iter().zip(src) {
        if d.name != s.name || d.var.dims() != s.var.dims() {
            return Err(Error::StructureMismatch(format!("{} vs {}", d.name, s.name)));
        }
        d.var.set(s.var.as_tensor())?;
    }
    Ok(())
}
