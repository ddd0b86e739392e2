//! The generator: a shared encoder producing multi-scale style and content
//! embeddings, and a decoder that fuses a style embedding with a content
//! embedding into a glyph.

use candle_core::{Tensor, D};

use crate::nn::layers::{Conv2d, DeformConv2d, GroupNorm, Linear, ResBlock, SeparableConv};
use crate::nn::ops::{channel_moments, global_pools, instance_norm, sigmoid, upsample2x, NORM_EPS};
use crate::nn::ParamStore;
use crate::{Error, Result};

/// Encoder/decoder sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Channels of the first latent, doubled by each downsampling block.
    pub base_width: usize,
    /// Width of each of the three head embeddings.
    pub head_dim: usize,
    /// Square input side in pixels.
    pub resolution: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            base_width: 64,
            head_dim: 256,
            resolution: 64,
        }
    }
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        3 * self.head_dim
    }

    /// `(channels, side)` of z1..z5.
    pub fn pyramid(&self) -> [(usize, usize); 5] {
        let mut out = [(0, 0); 5];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (self.base_width << i, self.resolution >> i);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        // The decoder's first latent is resolution/16 on a side; instance
        // normalization erases a 1x1 map, and the content with it.
        if self.resolution < 32 || self.resolution % 16 != 0 {
            return Err(Error::Config(format!("resolution {} must be a multiple of 16, at least 32", self.resolution)));
        }
        if self.base_width == 0 || self.base_width % 8 != 0 {
            return Err(Error::Config(format!("base width {} must be a positive multiple of 8", self.base_width)));
        }
        if self.head_dim == 0 || self.head_dim % 8 != 0 {
            return Err(Error::Config(format!("head dim {} must be a positive multiple of 8", self.head_dim)));
        }
        Ok(())
    }
}

/// Fails with the block name when `t` holds a NaN or infinity.
pub fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

struct Down {
    conv: Conv2d,
    gn: GroupNorm,
    res: ResBlock,
}

struct ContentHead {
    conv: Conv2d,
    gn: GroupNorm,
    sep: SeparableConv,
}

impl ContentHead {
    fn project(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.gn.forward(&self.conv.forward(z)?)?;
        self.sep.forward(&h)
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (avg, max) = global_pools(&self.project(z)?)?;
        Ok((avg + max)?)
    }
}

/// Encoder outputs for a batch.
pub struct Encoded {
    /// `(B, 3·head_dim)`: heads on z3, z4, z5 in that order.
    pub style: Tensor,
    pub content: Tensor,
    /// z1..z5.
    pub pyramid: Vec<Tensor>,
}

pub struct Encoder {
    stem: DeformConv2d,
    stem_gn: GroupNorm,
    downs: Vec<Down>,
    style_heads: Vec<Linear>,
    content_heads: Vec<ContentHead>,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.base_width;
        let stem = DeformConv2d::new(ps, "enc.stem.deform", 1, c)?;
        let stem_gn = GroupNorm::new(ps, "enc.stem.gn", c)?;
        let mut downs = Vec::new();
        for i in 1..=4 {
            let (ci, co) = (c << (i - 1), c << i);
            downs.push(Down {
                conv: Conv2d::new(ps, &format!("enc.down{i}.conv"), ci, co, 3, 2)?,
                gn: GroupNorm::new(ps, &format!("enc.down{i}.gn"), co)?,
                res: ResBlock::new(ps, &format!("enc.down{i}.res"), co, co)?,
            });
        }
        let mut style_heads = Vec::new();
        let mut content_heads = Vec::new();
        for i in 3..=5 {
            let ci = c << (i - 1);
            style_heads.push(Linear::new(ps, &format!("enc.mshb.head{i}"), 2 * ci, cfg.head_dim)?);
            content_heads.push(ContentHead {
                conv: Conv2d::new(ps, &format!("enc.mchb.head{i}.conv"), ci, cfg.head_dim, 3, 1)?,
                gn: GroupNorm::new(ps, &format!("enc.mchb.head{i}.gn"), cfg.head_dim)?,
                sep: SeparableConv::new(ps, &format!("enc.mchb.head{i}.sep"), cfg.head_dim, cfg.head_dim)?,
            });
        }
        Ok(Encoder {
            stem,
            stem_gn,
            downs,
            style_heads,
            content_heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Encoded> {
        let z1 = self.stem_gn.forward(&self.stem.forward(x)?)?.relu()?;
        check_finite(&z1, "enc.stem")?;
        let mut pyramid = vec![z1];
        for (i, d) in self.downs.iter().enumerate() {
            let prev = pyramid.last().expect("stem output");
            let h = d.gn.forward(&d.conv.forward(prev)?)?.relu()?;
            let z = d.res.forward(&h)?;
            check_finite(&z, &format!("enc.down{}", i + 1))?;
            pyramid.push(z);
        }
        let mut style = Vec::with_capacity(3);
        let mut content = Vec::with_capacity(3);
        for (k, z) in pyramid[2..].iter().enumerate() {
            style.push(self.style_heads[k].forward(&style_statistics(z)?)?);
            content.push(self.content_heads[k].forward(z)?);
        }
        let style = Tensor::cat(&style, 1)?;
        let content = Tensor::cat(&content, 1)?;
        check_finite(&style, "enc.mshb")?;
        check_finite(&content, "enc.mchb")?;
        Ok(Encoded { style, content, pyramid })
    }

    /// Content projection z'_i before pooling, for head `i` in 3..=5.
    pub fn content_projection(&self, i: usize, z: &Tensor) -> Result<Tensor> {
        self.content_heads[i - 3].project(z)
    }
}

/// `⟨μ_c(z), σ²_c(z)⟩`, shape `(B, 2C)`.
pub fn style_statistics(z: &Tensor) -> Result<Tensor> {
    let (mean, var) = channel_moments(z)?;
    Ok(Tensor::cat(&[mean, var], 1)?)
}

/// Instance normalization followed by a per-sample, per-channel affine map.
/// `scale` and `shift` are `(B, C)`.
pub fn adain(g: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = g.dims4()?;
    let n = instance_norm(g, NORM_EPS)?;
    Ok(n.broadcast_mul(&scale.reshape((b, c, 1, 1))?)?.broadcast_add(&shift.reshape((b, c, 1, 1))?)?)
}

/// Predicts AdaIN parameters from a style head embedding.
pub struct AdaIn {
    pub proj: Linear,
    channels: usize,
}

impl AdaIn {
    pub fn new(ps: &mut ParamStore, name: &str, head_dim: usize, channels: usize) -> Result<Self> {
        let mut bias = vec![1.0; channels];
        bias.extend(std::iter::repeat_n(0.0, channels));
        let bound = 0.1 * (3.0 / head_dim as f64).sqrt();
        Ok(AdaIn {
            proj: Linear::with_bias(ps, name, head_dim, &bias, bound)?,
            channels,
        })
    }

    pub fn params(&self, e: &Tensor) -> Result<(Tensor, Tensor)> {
        let p = self.proj.forward(e)?;
        Ok((p.narrow(1, 0, self.channels)?, p.narrow(1, self.channels, self.channels)?))
    }

    pub fn forward(&self, g: &Tensor, e: &Tensor) -> Result<Tensor> {
        let (scale, shift) = self.params(e)?;
        adain(g, &scale, &shift)
    }
}

/// Multiplies each channel by `sigmoid(logits)`; `logits` is `(B, C)`.
pub fn gate(g: &Tensor, logits: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = g.dims4()?;
    Ok(g.broadcast_mul(&sigmoid(logits)?.reshape((b, c, 1, 1))?)?)
}

struct Up {
    adain: AdaIn,
    conv: Conv2d,
    res: ResBlock,
}

pub struct Decoder {
    g0: Linear,
    ups: Vec<Up>,
    gates: Vec<Linear>,
    out: Conv2d,
    cfg: EncoderConfig,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        let top = cfg.base_width << 4;
        let side = cfg.resolution >> 4;
        let g0 = Linear::new(ps, "dec.g0", cfg.embed_dim(), top * side * side)?;
        let mut ups = Vec::new();
        let mut gates = Vec::new();
        for j in 1..=4 {
            let ci = top >> (j - 1);
            let co = ci / 2;
            ups.push(Up {
                adain: AdaIn::new(ps, &format!("dec.up{j}.adain"), cfg.head_dim, ci)?,
                conv: Conv2d::new(ps, &format!("dec.up{j}.conv"), ci, co, 3, 1)?,
                res: ResBlock::new(ps, &format!("dec.up{j}.res"), co, co)?,
            });
            if j <= 3 {
                gates.push(Linear::new(ps, &format!("dec.gate{j}"), cfg.head_dim, co)?);
            }
        }
        let out = Conv2d::new(ps, "dec.out", cfg.base_width, 1, 1, 1)?;
        Ok(Decoder {
            g0,
            ups,
            gates,
            out,
            cfg: *cfg,
        })
    }

    /// Style head `k` (1-based) of a `(B, 3·head_dim)` embedding.
    fn head(&self, e: &Tensor, k: usize) -> Result<Tensor> {
        Ok(e.narrow(D::Minus1, (k - 1) * self.cfg.head_dim, self.cfg.head_dim)?)
    }

    pub fn forward(&self, style: &Tensor, content: &Tensor) -> Result<Tensor> {
        let b = content.dim(0)?;
        let d = self.cfg.embed_dim();
        if style.dims() != [b, d] || content.dims() != [b, d] {
            return Err(Error::Shape(format!(
                "embeddings {:?}/{:?}, expected ({b}, {d})",
                style.dims(),
                content.dims()
            )));
        }
        let side = self.cfg.resolution >> 4;
        let mut g = self.g0.forward(content)?.reshape((b, self.cfg.base_width << 4, side, side))?;
        for (idx, up) in self.ups.iter().enumerate() {
            let j = idx + 1;
            let jp = if j == 1 { 1 } else { j - 1 };
            let h = up.adain.forward(&g, &self.head(style, jp)?)?;
            let h = up.conv.forward(&upsample2x(&h)?)?;
            g = up.res.forward(&h)?;
            if j <= 3 {
                g = gate(&g, &self.gates[idx].forward(&self.head(style, j)?)?)?;
            }
        }
        let y = sigmoid(&self.out.forward(&g)?)?;
        check_finite(&y, "dec.out")?;
        Ok(y)
    }
}

/// Encoder, decoder and their parameters.
pub struct Generator {
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub cfg: EncoderConfig,
}

impl Generator {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(seed);
        let encoder = Encoder::new(&mut params, &cfg)?;
        let decoder = Decoder::new(&mut params, &cfg)?;
        Ok(Generator {
            params,
            encoder,
            decoder,
            cfg,
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<Encoded> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != (1, self.cfg.resolution, self.cfg.resolution) {
            return Err(Error::Shape(format!(
                "input {c}x{h}x{w}, expected 1x{0}x{0}",
                self.cfg.resolution
            )));
        }
        self.encoder.forward(x)
    }

    pub fn decode(&self, style: &Tensor, content: &Tensor) -> Result<Tensor> {
        self.decoder.forward(style, content)
    }

    /// Decodes the style of `x_s` onto the content of `x_c`.
    pub fn fuse(&self, x_s: &Tensor, x_c: &Tensor) -> Result<Tensor> {
        let s = self.encode(x_s)?;
        let c = self.encode(x_c)?;
        self.decode(&s.style, &c.content)
    }
}
