//! Siamese residual Unet with concatenated skip connections.
//!
//! Both dates go through one shared encoder; the decoder fuses the two
//! streams at every scale and restores full resolution:
//!
//! ```text
//! Conv1 [3×3, w0] s1 ─┬──────────────────────────────── cat ─ DecBlk3 [3×3, d]      → H
//! Maxpool 3×3 s2      │                                  ↑ up2
//! ResBlk1 [w1]×2 s1 ──┼───────────────────── cat ─ DecBlk2 [3×3, d]                 → H/2
//! ResBlk2 [w2]×2 s2 ──┼────────── cat ─ DecBlk1 [3×3, d]                            → H/4
//! ResBlk3 [w3]×2 s2 ── cat ─ Bridge [3×3, w4] ─ up2                                 → H/8
//! ```

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::ChangePair;
use crate::error::{Error, Result};
use crate::nn::{join, max_pool_3x3_s2, upsample2, BnMode, Conv2d, ConvUnit, Initializer, NamedVar, Parameterized};

/// Spatial sizes must be multiples of this.
pub const SIZE_DIVISOR: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    pub in_channels: usize,
    /// Conv1, ResBlk1, ResBlk2, ResBlk3, Bridge.
    pub encoder_widths: [usize; 5],
    /// Width of every decoder block and of the output feature map.
    pub decoder_width: usize,
}

impl UnetConfig {
    /// Channel widths of the reference network.
    pub fn reference(in_channels: usize) -> Self {
        Self {
            in_channels,
            encoder_widths: [32, 32, 64, 128, 256],
            decoder_width: 128,
        }
    }

    /// Every width multiplied by `factor`.
    pub fn scaled(&self, factor: usize) -> Self {
        Self {
            in_channels: self.in_channels,
            encoder_widths: self.encoder_widths.map(|w| w * factor),
            decoder_width: self.decoder_width * factor,
        }
    }
}

/// Two convolution units plus an identity path (1×1 projection when the
/// shape changes).
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub first: ConvUnit,
    pub second: ConvUnit,
    pub projection: Option<Conv2d>,
}

impl ResidualUnit {
    fn new(init: &mut Initializer, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let first = ConvUnit::new(init, cin, cout, stride)?;
        let second = ConvUnit::new(init, cout, cout, 1)?;
        let projection = if cin != cout || stride != 1 {
            Some(Conv2d::new(init, cin, cout, 1, stride, true)?)
        } else {
            None
        };
        Ok(Self {
            first,
            second,
            projection,
        })
    }

    fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let y = self.second.forward(&self.first.forward(x, mode)?, mode)?;
        let identity = match &self.projection {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((y + identity)?)
    }
}

impl Parameterized for ResidualUnit {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>) {
        self.first.collect_vars(&join(prefix, "first"), out);
        self.second.collect_vars(&join(prefix, "second"), out);
        if let Some(p) = &self.projection {
            p.collect_vars(&join(prefix, "projection"), out);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub units: [ResidualUnit; 2],
}

impl ResBlock {
    fn new(init: &mut Initializer, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            units: [
                ResidualUnit::new(init, cin, cout, stride)?,
                ResidualUnit::new(init, cout, cout, 1)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        self.units[1].forward(&self.units[0].forward(x, mode)?, mode)
    }
}

impl Parameterized for ResBlock {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>) {
        for (i, u) in self.units.iter().enumerate() {
            u.collect_vars(&join(prefix, &format!("unit{i}")), out);
        }
    }
}

struct EncoderFeatures {
    conv1: Tensor,
    res1: Tensor,
    res2: Tensor,
    res3: Tensor,
}

#[derive(Debug, Clone)]
pub struct Unet {
    pub config: UnetConfig,
    pub conv1: ConvUnit,
    pub res1: ResBlock,
    pub res2: ResBlock,
    pub res3: ResBlock,
    pub bridge: ConvUnit,
    pub dec1: ConvUnit,
    pub dec2: ConvUnit,
    pub dec3: ConvUnit,
}

impl Unet {
    pub fn new(config: &UnetConfig, init: &mut Initializer) -> Result<Self> {
        let [w0, w1, w2, w3, w4] = config.encoder_widths;
        let d = config.decoder_width;
        Ok(Self {
            config: config.clone(),
            conv1: ConvUnit::new(init, config.in_channels, w0, 1)?,
            res1: ResBlock::new(init, w0, w1, 1)?,
            res2: ResBlock::new(init, w1, w2, 2)?,
            res3: ResBlock::new(init, w2, w3, 2)?,
            bridge: ConvUnit::new(init, 2 * w3, w4, 1)?,
            dec1: ConvUnit::new(init, w4 + 2 * w2, d, 1)?,
            dec2: ConvUnit::new(init, d + 2 * w1, d, 1)?,
            dec3: ConvUnit::new(init, d + 2 * w0, d, 1)?,
        })
    }

    pub fn output_channels(&self) -> usize {
        self.config.decoder_width
    }

    fn encode(&self, x: &Tensor, mode: BnMode) -> Result<EncoderFeatures> {
        let conv1 = self.conv1.forward(x, mode)?;
        let pooled = max_pool_3x3_s2(&conv1)?;
        let res1 = self.res1.forward(&pooled, mode)?;
        let res2 = self.res2.forward(&res1, mode)?;
        let res3 = self.res3.forward(&res2, mode)?;
        Ok(EncoderFeatures {
            conv1,
            res1,
            res2,
            res3,
        })
    }

    /// Runs all pairs of one scene.
    ///
    /// `images` is (T, C, H, W) with the anchor at index 0; the result is
    /// (T−1, D, H, W), row t−1 holding the features of pair (I₀, I_t). The
    /// shared encoder sees each date once.
    pub fn forward_scene(&self, images: &Tensor, mode: BnMode) -> Result<Tensor> {
        let (t, c, h, w) = images.dims4()?;
        if t < 2 {
            return Err(Error::InsufficientFrames { needed: 2, got: t });
        }
        if c != self.config.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.config.in_channels,
                got: c,
            });
        }
        if h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInputSize {
                height: h,
                width: w,
                divisor: SIZE_DIVISOR,
            });
        }
        let enc = self.encode(images, mode)?;
        let pairs = t - 1;
        // Concatenate [anchor stream, target stream] along channels for every pair.
        let fuse = |f: &Tensor| -> Result<Tensor> {
            let anchor = f.narrow(0, 0, 1)?;
            let (_, fc, fh, fw) = anchor.dims4()?;
            let anchor = anchor.broadcast_as((pairs, fc, fh, fw))?;
            Ok(Tensor::cat(&[&anchor, &f.narrow(0, 1, pairs)?], 1)?)
        };
        let bridge = self.bridge.forward(&fuse(&enc.res3)?, mode)?;
        let x = Tensor::cat(&[&upsample2(&bridge)?, &fuse(&enc.res2)?], 1)?;
        let x = self.dec1.forward(&x, mode)?;
        let x = Tensor::cat(&[&upsample2(&x)?, &fuse(&enc.res1)?], 1)?;
        let x = self.dec2.forward(&x, mode)?;
        let x = Tensor::cat(&[&upsample2(&x)?, &fuse(&enc.conv1)?], 1)?;
        self.dec3.forward(&x, mode)
    }
}

impl Parameterized for Unet {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>) {
        self.conv1.collect_vars(&join(prefix, "conv1"), out);
        self.res1.collect_vars(&join(prefix, "res1"), out);
        self.res2.collect_vars(&join(prefix, "res2"), out);
        self.res3.collect_vars(&join(prefix, "res3"), out);
        self.bridge.collect_vars(&join(prefix, "bridge"), out);
        self.dec1.collect_vars(&join(prefix, "dec1"), out);
        self.dec2.collect_vars(&join(prefix, "dec2"), out);
        self.dec3.collect_vars(&join(prefix, "dec3"), out);
    }
}

/// Stacks H×W×C images into an (N, C, H, W) tensor.
pub fn images_to_tensor(images: &[&Array3<f32>], dtype: DType) -> Result<Tensor> {
    let (h, w, c) = images
        .first()
        .map(|a| a.dim())
        .ok_or_else(|| Error::EmptyInput("no images".into()))?;
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dim() != (h, w, c) {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", img.dim(), (h, w, c))));
        }
        data.extend(img.iter().copied());
    }
    let t = Tensor::from_vec(data, (images.len(), h, w, c), &Device::Cpu)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?;
    Ok(t)
}

/// Converts a (D, H, W) tensor to an H×W×D array.
pub fn tensor_to_feature_map(t: &Tensor) -> Result<Array3<f32>> {
    let (d, h, w) = t.dims3()?;
    let v = t
        .permute((1, 2, 0))?
        .contiguous()?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok(Array3::from_shape_vec((h, w, d), v).expect("element count"))
}

/// Feature map of a single change pair, H×W×D.
pub fn unet_forward(pair: &ChangePair, unet: &Unet, mode: BnMode) -> Result<Array3<f32>> {
    let dtype = unet.conv1.conv.weight.dtype();
    let x = images_to_tensor(&[&pair.anchor, &pair.target], dtype)?;
    let y = unet.forward_scene(&x, mode)?;
    tensor_to_feature_map(&y.squeeze(0)?)
}

/// Exact number of trainable scalars (batch-norm running statistics excluded).
pub fn count_parameters(model: &impl Parameterized) -> usize {
    model
        .named_vars()
        .iter()
        .filter(|v| v.trainable)
        .map(|v| v.var.elem_count())
        .sum()
}
