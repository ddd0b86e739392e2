//! Frozen feature extractors for the perceptual and latent losses and the
//! perceptual metric.
//!
//! Two architectures are provided, each loadable from a safetensors file
//! with the usual public parameter names, or built narrow with seeded
//! random weights as a deterministic stand-in when pretrained weights are
//! not available:
//!
//! * [`VggFeatures`]: the VGG19 `features` stack, tapped after the ReLUs at
//!   indices 3, 8, 17 and 26.
//! * [`VaeEncoder`]: the encoder half of the Stable Diffusion autoencoder
//!   (diffusers naming); the latent is the posterior mean.
//!
//! Weights are held as variables so tests can check that no gradient ever
//! reaches them, but every forward reads them detached.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Tensor, Var, D};

use crate::nn::layers::conv_bias;
use crate::nn::ops::group_norm;
use crate::nn::{ParamStore, DEVICE, DTYPE};
use crate::{Error, Result};

/// A frozen network mapping a `(B, 1, H, W)` batch in [0, 1] to feature maps.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
    /// The frozen weights.
    fn parameters(&self) -> Vec<&Var>;
}

/// Perceptual tap weights for the four VGG taps.
pub const PERCEPTUAL_WEIGHTS: [f64; 4] = [1.0, 0.75, 0.5, 0.25];
pub const VGG19_TAPS: [usize; 4] = [3, 8, 17, 26];
const VGG19_LAYOUT: [Option<usize>; 27] = {
    // Conv widths by layer index; None marks ReLU or max-pool slots.
    let mut l = [None; 27];
    let convs = [
        (0, 64),
        (2, 64),
        (5, 128),
        (7, 128),
        (10, 256),
        (12, 256),
        (14, 256),
        (16, 256),
        (19, 512),
        (21, 512),
        (23, 512),
        (25, 512),
    ];
    let mut i = 0;
    while i < convs.len() {
        l[convs[i].0] = Some(convs[i].1);
        i += 1;
    }
    l
};
const VGG19_POOLS: [usize; 3] = [4, 9, 18];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn load_map(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::Unavailable(format!("weights not found at {}", path.display())));
    }
    let map = candle_core::safetensors::load(path, &DEVICE)?;
    map.into_iter().map(|(k, v)| Ok((k, v.to_dtype(DTYPE)?))).collect()
}

fn take(map: &HashMap<String, Tensor>, key: &str) -> Result<Var> {
    let t = map.get(key).ok_or_else(|| Error::Unavailable(format!("missing tensor {key}")))?;
    Ok(Var::from_tensor(t)?)
}

fn replicate_rgb(x: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("{c} channels, expected 1")));
    }
    Ok(Tensor::cat(&[x, x, x], 1)?)
}

struct FrozenConv {
    w: Var,
    b: Var,
}

impl FrozenConv {
    fn load(map: &HashMap<String, Tensor>, prefix: &str) -> Result<Self> {
        Ok(FrozenConv {
            w: take(map, &format!("{prefix}.weight"))?,
            b: take(map, &format!("{prefix}.bias"))?,
        })
    }

    fn forward(&self, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        conv_bias(x, &self.w.as_detached_tensor(), &self.b.as_detached_tensor(), pad, stride)
    }
}

/// VGG19 `features` up to the fourth tap.
pub struct VggFeatures {
    name: String,
    convs: Vec<(usize, FrozenConv)>,
    normalize: bool,
}

impl VggFeatures {
    /// Loads `features.{i}.weight/bias` from a torchvision-style export.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors("vgg19", &load_map(path)?, true)
    }

    /// Widths divided by `shrink` and seeded uniform weights; inputs are not
    /// ImageNet-normalized.
    pub fn stand_in(shrink: usize, seed: u64) -> Result<Self> {
        Self::from_tensors("vgg19-standin", &Self::stand_in_tensors(shrink, seed)?, false)
    }

    /// Named tensors of [`VggFeatures::stand_in`].
    pub fn stand_in_tensors(shrink: usize, seed: u64) -> Result<HashMap<String, Tensor>> {
        let mut ps = ParamStore::new(seed);
        let mut map = HashMap::new();
        let mut c_in = 3;
        for (i, slot) in VGG19_LAYOUT.iter().enumerate() {
            if let Some(w) = slot {
                let c_out = (w / shrink).max(1);
                let bound = (6.0 / (c_in * 9) as f64).sqrt();
                let wv = ps.uniform(&format!("features.{i}.weight"), &[c_out, c_in, 3, 3], bound)?;
                let bv = ps.constant(&format!("features.{i}.bias"), &[c_out], 0.0)?;
                map.insert(format!("features.{i}.weight"), wv.as_tensor().clone());
                map.insert(format!("features.{i}.bias"), bv.as_tensor().clone());
                c_in = c_out;
            }
        }
        Ok(map)
    }

    pub fn from_tensors(name: &str, map: &HashMap<String, Tensor>, normalize: bool) -> Result<Self> {
        let mut convs = Vec::new();
        for (i, slot) in VGG19_LAYOUT.iter().enumerate() {
            if slot.is_some() {
                convs.push((i, FrozenConv::load(map, &format!("features.{i}"))?));
            }
        }
        Ok(VggFeatures {
            name: name.to_string(),
            convs,
            normalize,
        })
    }
}

impl FeatureExtractor for VggFeatures {
    fn name(&self) -> &str {
        &self.name
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = replicate_rgb(x)?;
        if self.normalize {
            let mean = Tensor::from_slice(&IMAGENET_MEAN, (1, 3, 1, 1), &DEVICE)?;
            let std = Tensor::from_slice(&IMAGENET_STD, (1, 3, 1, 1), &DEVICE)?;
            h = h.broadcast_sub(&mean)?.broadcast_div(&std)?;
        }
        let mut taps = Vec::with_capacity(4);
        let mut conv = self.convs.iter().peekable();
        for i in 0..VGG19_LAYOUT.len() {
            if VGG19_LAYOUT[i].is_some() {
                let (_, c) = conv.next().expect("conv per slot");
                h = c.forward(&h, 1, 1)?;
            } else if VGG19_POOLS.contains(&i) {
                h = h.max_pool2d(2)?;
            } else {
                h = h.relu()?;
            }
            if VGG19_TAPS.contains(&i) {
                taps.push(h.clone());
            }
        }
        Ok(taps)
    }

    fn parameters(&self) -> Vec<&Var> {
        self.convs.iter().flat_map(|(_, c)| [&c.w, &c.b]).collect()
    }
}

struct FrozenNorm {
    w: Var,
    b: Var,
    groups: usize,
}

impl FrozenNorm {
    fn load(map: &HashMap<String, Tensor>, prefix: &str, groups: usize) -> Result<Self> {
        Ok(FrozenNorm {
            w: take(map, &format!("{prefix}.weight"))?,
            b: take(map, &format!("{prefix}.bias"))?,
            groups,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.w.dim(0)?;
        let n = group_norm(x, self.groups, 1e-6)?;
        Ok(n
            .broadcast_mul(&self.w.as_detached_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.b.as_detached_tensor().reshape((1, c, 1, 1))?)?)
    }
}

struct VaeResnet {
    norm1: FrozenNorm,
    conv1: FrozenConv,
    norm2: FrozenNorm,
    conv2: FrozenConv,
    shortcut: Option<FrozenConv>,
}

impl VaeResnet {
    fn load(map: &HashMap<String, Tensor>, p: &str, groups: usize) -> Result<Self> {
        let key = format!("{p}.conv_shortcut.weight");
        Ok(VaeResnet {
            norm1: FrozenNorm::load(map, &format!("{p}.norm1"), groups)?,
            conv1: FrozenConv::load(map, &format!("{p}.conv1"))?,
            norm2: FrozenNorm::load(map, &format!("{p}.norm2"), groups)?,
            conv2: FrozenConv::load(map, &format!("{p}.conv2"))?,
            shortcut: if map.contains_key(&key) {
                Some(FrozenConv::load(map, &format!("{p}.conv_shortcut"))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?, 1, 1)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?, 1, 1)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, 1, 0)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

struct FrozenLinear {
    w: Var,
    b: Var,
}

impl FrozenLinear {
    fn load(map: &HashMap<String, Tensor>, prefix: &str) -> Result<Self> {
        Ok(FrozenLinear {
            w: take(map, &format!("{prefix}.weight"))?,
            b: take(map, &format!("{prefix}.bias"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .broadcast_matmul(&self.w.as_detached_tensor().t()?)?
            .broadcast_add(&self.b.as_detached_tensor())?)
    }
}

struct VaeAttention {
    norm: FrozenNorm,
    q: FrozenLinear,
    k: FrozenLinear,
    v: FrozenLinear,
    out: FrozenLinear,
}

impl VaeAttention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let q = self.q.forward(&n)?;
        let k = self.k.forward(&n)?;
        let v = self.v.forward(&n)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (c as f64).sqrt())?;
        let scores = scores.broadcast_sub(&scores.max_keepdim(D::Minus1)?)?.exp()?;
        let attn = scores.broadcast_div(&scores.sum_keepdim(D::Minus1)?)?;
        let o = self.out.forward(&attn.matmul(&v)?)?;
        let o = o.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + o)?)
    }
}

struct VaeDown {
    resnets: Vec<VaeResnet>,
    down: Option<FrozenConv>,
}

/// Encoder of the Stable Diffusion autoencoder.
pub struct VaeEncoder {
    name: String,
    conv_in: FrozenConv,
    blocks: Vec<VaeDown>,
    mid: (VaeResnet, VaeAttention, VaeResnet),
    norm_out: FrozenNorm,
    conv_out: FrozenConv,
    quant: Option<FrozenConv>,
    all: Vec<Var>,
}

struct MapBuilder {
    ps: ParamStore,
    map: HashMap<String, Tensor>,
}

impl MapBuilder {
    fn put(&mut self, name: String, v: Var) {
        self.map.insert(name, v.as_tensor().clone());
    }

    fn conv(&mut self, p: &str, ci: usize, co: usize, k: usize) -> Result<()> {
        let w = self.ps.uniform(&format!("{p}.weight"), &[co, ci, k, k], (3.0 / (ci * k * k) as f64).sqrt())?;
        let b = self.ps.constant(&format!("{p}.bias"), &[co], 0.0)?;
        self.put(format!("{p}.weight"), w);
        self.put(format!("{p}.bias"), b);
        Ok(())
    }

    fn linear(&mut self, p: &str, ci: usize, co: usize) -> Result<()> {
        let w = self.ps.uniform(&format!("{p}.weight"), &[co, ci], (3.0 / ci as f64).sqrt())?;
        let b = self.ps.constant(&format!("{p}.bias"), &[co], 0.0)?;
        self.put(format!("{p}.weight"), w);
        self.put(format!("{p}.bias"), b);
        Ok(())
    }

    fn norm(&mut self, p: &str, c: usize) -> Result<()> {
        let w = self.ps.constant(&format!("{p}.weight"), &[c], 1.0)?;
        let b = self.ps.constant(&format!("{p}.bias"), &[c], 0.0)?;
        self.put(format!("{p}.weight"), w);
        self.put(format!("{p}.bias"), b);
        Ok(())
    }

    fn resnet(&mut self, p: &str, ci: usize, co: usize) -> Result<()> {
        self.norm(&format!("{p}.norm1"), ci)?;
        self.conv(&format!("{p}.conv1"), ci, co, 3)?;
        self.norm(&format!("{p}.norm2"), co)?;
        self.conv(&format!("{p}.conv2"), co, co, 3)?;
        if ci != co {
            self.conv(&format!("{p}.conv_shortcut"), ci, co, 1)?;
        }
        Ok(())
    }
}

/// Latent channels of the Stable Diffusion autoencoder.
pub const VAE_LATENT_CHANNELS: usize = 4;

impl VaeEncoder {
    /// Loads `encoder.*` and `quant_conv.*` (diffusers `AutoencoderKL` names).
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_groups(path, 32)
    }

    pub fn load_with_groups(path: &Path, groups: usize) -> Result<Self> {
        Self::from_tensors("sd-vae", &load_map(path)?, groups)
    }

    /// A narrow encoder with seeded weights and the same layout.
    pub fn stand_in(widths: &[usize], groups: usize, seed: u64) -> Result<Self> {
        Self::from_tensors("sd-vae-standin", &Self::stand_in_tensors(widths, seed)?, groups)
    }

    /// Named tensors of [`VaeEncoder::stand_in`].
    pub fn stand_in_tensors(widths: &[usize], seed: u64) -> Result<HashMap<String, Tensor>> {
        let mut b = MapBuilder {
            ps: ParamStore::new(seed),
            map: HashMap::new(),
        };
        b.conv("encoder.conv_in", 3, widths[0], 3)?;
        let mut c_in = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            for j in 0..2 {
                let ci = if j == 0 { c_in } else { w };
                b.resnet(&format!("encoder.down_blocks.{i}.resnets.{j}"), ci, w)?;
            }
            if i + 1 < widths.len() {
                b.conv(&format!("encoder.down_blocks.{i}.downsamplers.0.conv"), w, w, 3)?;
            }
            c_in = w;
        }
        let top = *widths.last().expect("at least one width");
        b.resnet("encoder.mid_block.resnets.0", top, top)?;
        b.resnet("encoder.mid_block.resnets.1", top, top)?;
        let a = "encoder.mid_block.attentions.0";
        b.norm(&format!("{a}.group_norm"), top)?;
        for l in ["to_q", "to_k", "to_v", "to_out.0"] {
            b.linear(&format!("{a}.{l}"), top, top)?;
        }
        b.norm("encoder.conv_norm_out", top)?;
        b.conv("encoder.conv_out", top, 2 * VAE_LATENT_CHANNELS, 3)?;
        b.conv("quant_conv", 2 * VAE_LATENT_CHANNELS, 2 * VAE_LATENT_CHANNELS, 1)?;
        Ok(b.map)
    }

    pub fn from_tensors(name: &str, map: &HashMap<String, Tensor>, groups: usize) -> Result<Self> {
        let n_blocks = (0..)
            .take_while(|i| map.contains_key(&format!("encoder.down_blocks.{i}.resnets.0.conv1.weight")))
            .count();
        if n_blocks == 0 {
            return Err(Error::Unavailable("no encoder.down_blocks in weights".into()));
        }
        let mut blocks = Vec::new();
        for i in 0..n_blocks {
            let resnets = (0..)
                .take_while(|j| map.contains_key(&format!("encoder.down_blocks.{i}.resnets.{j}.conv1.weight")))
                .map(|j| VaeResnet::load(map, &format!("encoder.down_blocks.{i}.resnets.{j}"), groups))
                .collect::<Result<Vec<_>>>()?;
            let dk = format!("encoder.down_blocks.{i}.downsamplers.0.conv");
            let down = if map.contains_key(&format!("{dk}.weight")) {
                Some(FrozenConv::load(map, &dk)?)
            } else {
                None
            };
            blocks.push(VaeDown { resnets, down });
        }
        let a = "encoder.mid_block.attentions.0";
        let attn = VaeAttention {
            norm: FrozenNorm::load(map, &format!("{a}.group_norm"), groups)?,
            q: FrozenLinear::load(map, &format!("{a}.to_q"))?,
            k: FrozenLinear::load(map, &format!("{a}.to_k"))?,
            v: FrozenLinear::load(map, &format!("{a}.to_v"))?,
            out: FrozenLinear::load(map, &format!("{a}.to_out.0"))?,
        };
        let mid = (
            VaeResnet::load(map, "encoder.mid_block.resnets.0", groups)?,
            attn,
            VaeResnet::load(map, "encoder.mid_block.resnets.1", groups)?,
        );
        let quant = if map.contains_key("quant_conv.weight") {
            Some(FrozenConv::load(map, "quant_conv")?)
        } else {
            None
        };
        let mut enc = VaeEncoder {
            name: name.to_string(),
            conv_in: FrozenConv::load(map, "encoder.conv_in")?,
            blocks,
            mid,
            norm_out: FrozenNorm::load(map, "encoder.conv_norm_out", groups)?,
            conv_out: FrozenConv::load(map, "encoder.conv_out")?,
            quant,
            all: Vec::new(),
        };
        enc.all = enc.collect_vars();
        Ok(enc)
    }

    fn collect_vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        let conv = |c: &FrozenConv, v: &mut Vec<Var>| v.extend([c.w.clone(), c.b.clone()]);
        let norm = |n: &FrozenNorm, v: &mut Vec<Var>| v.extend([n.w.clone(), n.b.clone()]);
        let res = |r: &VaeResnet, v: &mut Vec<Var>| {
            norm(&r.norm1, v);
            conv(&r.conv1, v);
            norm(&r.norm2, v);
            conv(&r.conv2, v);
            if let Some(s) = &r.shortcut {
                conv(s, v);
            }
        };
        conv(&self.conv_in, &mut v);
        for b in &self.blocks {
            for r in &b.resnets {
                res(r, &mut v);
            }
            if let Some(d) = &b.down {
                conv(d, &mut v);
            }
        }
        res(&self.mid.0, &mut v);
        norm(&self.mid.1.norm, &mut v);
        for l in [&self.mid.1.q, &self.mid.1.k, &self.mid.1.v, &self.mid.1.out] {
            v.extend([l.w.clone(), l.b.clone()]);
        }
        res(&self.mid.2, &mut v);
        norm(&self.norm_out, &mut v);
        conv(&self.conv_out, &mut v);
        if let Some(q) = &self.quant {
            conv(q, &mut v);
        }
        v
    }

    /// Posterior mean `(B, 4, H/2^k, W/2^k)` for inputs in [0, 1].
    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(&replicate_rgb(x)?.affine(2.0, -1.0)?, 1, 1)?;
        for b in &self.blocks {
            for r in &b.resnets {
                h = r.forward(&h)?;
            }
            if let Some(d) = &b.down {
                h = d.forward(&h.pad_with_zeros(2, 0, 1)?.pad_with_zeros(3, 0, 1)?, 2, 0)?;
            }
        }
        h = self.mid.0.forward(&h)?;
        h = self.mid.1.forward(&h)?;
        h = self.mid.2.forward(&h)?;
        h = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?, 1, 1)?;
        if let Some(q) = &self.quant {
            h = q.forward(&h, 1, 0)?;
        }
        Ok(h.narrow(1, 0, VAE_LATENT_CHANNELS)?)
    }
}

impl FeatureExtractor for VaeEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![self.latent(x)?])
    }

    fn parameters(&self) -> Vec<&Var> {
        self.all.iter().collect()
    }
}

/// Passes the input through unchanged as its single feature map.
pub struct Identity;

impl FeatureExtractor for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }

    fn parameters(&self) -> Vec<&Var> {
        Vec::new()
    }
}

/// Default stand-ins used when no pretrained weights are configured.
pub fn perceptual_stand_in() -> Result<VggFeatures> {
    VggFeatures::stand_in(8, 0x5EED_0001)
}

pub fn latent_stand_in() -> Result<VaeEncoder> {
    VaeEncoder::stand_in(&[8, 16], 4, 0x5EED_0002)
}
