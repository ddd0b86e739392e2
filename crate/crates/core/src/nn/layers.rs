use candle_core::{Tensor, Var};

use super::ops::{group_norm, NORM_EPS};
use super::{ParamStore, DEVICE, DTYPE};
use crate::Result;

/// Group count used by every group-normalized layer.
pub const GN_GROUPS: usize = 8;

fn fan_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            w: ps.uniform(&format!("{name}.weight"), &[d_out, d_in], fan_bound(d_in))?,
            b: ps.constant(&format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    /// Like [`Linear::new`] with a custom bias initializer.
    pub fn with_bias(ps: &mut ParamStore, name: &str, d_in: usize, bias: &[f64], w_bound: f64) -> Result<Self> {
        let w = ps.uniform(&format!("{name}.weight"), &[bias.len(), d_in], w_bound)?;
        let b = ps.constant(&format!("{name}.bias"), &[bias.len()], 0.0)?;
        b.set(&Tensor::from_slice(bias, bias.len(), &DEVICE)?)?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w.as_tensor().t()?)?.broadcast_add(self.b.as_tensor())?)
    }
}

pub struct Conv2d {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Conv2d {
            w: ps.uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], fan_bound(c_in * k * k))?,
            b: ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?,
            stride,
            pad: k / 2,
        })
    }

    /// A convolution whose weights and bias start at zero.
    pub fn zeros(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Ok(Conv2d {
            w: ps.constant(&format!("{name}.weight"), &[c_out, c_in, k, k], 0.0)?,
            b: ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?,
            stride: 1,
            pad: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_bias(x, self.w.as_tensor(), self.b.as_tensor(), self.pad, self.stride)
    }
}

pub(crate) fn conv_bias(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize, stride: usize) -> Result<Tensor> {
    let y = x.conv2d(w, pad, stride, 1, 1)?;
    Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

pub struct GroupNorm {
    pub gamma: Var,
    pub beta: Var,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(GroupNorm {
            gamma: ps.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            beta: ps.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            groups: GN_GROUPS.min(channels),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.gamma.dim(0)?;
        let n = group_norm(x, self.groups, NORM_EPS)?;
        let g = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let b = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(n.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

/// Two 3×3 convolutions with group norm; identity skip, or a 1×1
/// projection when widths differ.
pub struct ResBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    proj: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, 1)?,
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), c_out)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1)?,
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), c_out)?,
            proj: if c_in != c_out {
                Some(Conv2d::new(ps, &format!("{name}.proj"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.gn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.gn2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?.relu()?)
    }
}

/// 3×3 deformable convolution with one offset group. Offsets come from a
/// zero-initialized convolution, so it starts as a plain convolution.
pub struct DeformConv2d {
    pub offset: Conv2d,
    pub w: Var,
    pub b: Var,
}

impl DeformConv2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(DeformConv2d {
            offset: Conv2d::zeros(ps, &format!("{name}.offset"), c_in, 18, 3)?,
            w: ps.uniform(&format!("{name}.weight"), &[c_out, c_in, 3, 3], fan_bound(c_in * 9))?,
            b: ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let off = self.offset.forward(x)?;
        deform_conv3x3(x, &off, self.w.as_tensor(), self.b.as_tensor())
    }
}

/// Deformable 3×3 convolution (stride 1, padding 1) with explicit offsets
/// `(B, 18, H, W)` laid out as (dy, dx) per kernel tap, row-major taps.
/// Samples outside the image read zero.
pub fn deform_conv3x3(x: &Tensor, off: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, c, h, wd) = x.dims4()?;
    let c_out = w.dim(0)?;
    let hw = h * wd;
    let flat = x.reshape((bs, c, hw))?;
    let off_vals = off.flatten_all()?.to_vec1::<f64>()?;
    let mut taps = Vec::with_capacity(9);
    for k in 0..9 {
        let (ky, kx) = ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0);
        let mut y0 = vec![0.0f64; bs * hw];
        let mut x0 = vec![0.0f64; bs * hw];
        let mut base_y = vec![0.0f64; hw];
        let mut base_x = vec![0.0f64; hw];
        for r in 0..h {
            for q in 0..wd {
                base_y[r * wd + q] = r as f64 + ky;
                base_x[r * wd + q] = q as f64 + kx;
            }
        }
        for n in 0..bs {
            for i in 0..hw {
                let dy = off_vals[((n * 18) + 2 * k) * hw + i];
                let dx = off_vals[((n * 18) + 2 * k + 1) * hw + i];
                y0[n * hw + i] = (base_y[i] + dy).floor();
                x0[n * hw + i] = (base_x[i] + dx).floor();
            }
        }
        let by = Tensor::from_vec(base_y, (1, hw), &DEVICE)?;
        let bx = Tensor::from_vec(base_x, (1, hw), &DEVICE)?;
        let py = off.narrow(1, 2 * k, 1)?.reshape((bs, hw))?.broadcast_add(&by)?;
        let px = off.narrow(1, 2 * k + 1, 1)?.reshape((bs, hw))?.broadcast_add(&bx)?;
        let ty = (py - Tensor::from_vec(y0.clone(), (bs, hw), &DEVICE)?)?;
        let tx = (px - Tensor::from_vec(x0.clone(), (bs, hw), &DEVICE)?)?;
        let one_m_ty = ty.affine(-1.0, 1.0)?;
        let one_m_tx = tx.affine(-1.0, 1.0)?;
        let mut sample: Option<Tensor> = None;
        for (i, wy) in [(0usize, &one_m_ty), (1, &ty)] {
            for (j, wx) in [(0usize, &one_m_tx), (1, &tx)] {
                let mut idx = vec![0u32; bs * hw];
                let mut valid = vec![0.0f64; bs * hw];
                for t in 0..bs * hw {
                    let yy = y0[t] + i as f64;
                    let xx = x0[t] + j as f64;
                    if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < wd as f64 {
                        idx[t] = (yy as usize * wd + xx as usize) as u32;
                        valid[t] = 1.0;
                    }
                }
                let idx = Tensor::from_vec(idx, (bs, 1, hw), &DEVICE)?.broadcast_as((bs, c, hw))?.contiguous()?;
                let weight = ((wy * wx)? * Tensor::from_vec(valid, (bs, hw), &DEVICE)?)?.reshape((bs, 1, hw))?;
                let term = flat.gather(&idx, 2)?.broadcast_mul(&weight)?;
                sample = Some(match sample {
                    None => term,
                    Some(s) => (s + term)?,
                });
            }
        }
        taps.push(sample.expect("four corners"));
    }
    let cols = Tensor::stack(&taps, 2)?.reshape((bs, c * 9, hw))?;
    let wf = w.reshape((1, c_out, c * 9))?;
    let out = wf.broadcast_matmul(&cols)?.broadcast_add(&b.reshape((1, c_out, 1))?)?;
    Ok(out.reshape((bs, c_out, h, wd))?)
}

/// Depthwise 3×3 followed by pointwise 1×1.
pub struct SeparableConv {
    pub depthwise: Var,
    pub pointwise: Conv2d,
}

impl SeparableConv {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(SeparableConv {
            depthwise: ps.uniform(&format!("{name}.depthwise.weight"), &[c_in, 9], fan_bound(9))?,
            pointwise: Conv2d::new(ps, &format!("{name}.pointwise"), c_in, c_out, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = super::ops::depthwise3x3(x, self.depthwise.as_tensor())?;
        self.pointwise.forward(&d)
    }
}

/// A weight divided by a running estimate of its largest singular value.
/// The singular vectors advance only through [`SpectralWeight::power_iterate`].
pub struct SpectralWeight {
    pub w: Var,
    pub u: Tensor,
    pub v: Tensor,
}

/// Power-iteration steps used to warm-start a fresh estimate.
pub const SN_WARMUP: usize = 50;

impl SpectralWeight {
    pub fn new(w: Var, seed_u: Vec<f64>) -> Result<Self> {
        let rows = w.dim(0)?;
        let cols = w.elem_count() / rows;
        let u = Tensor::from_vec(seed_u, rows, &DEVICE)?;
        let mut sw = SpectralWeight {
            w,
            u: unit(&u)?,
            v: Tensor::zeros(cols, DTYPE, &DEVICE)?,
        };
        for _ in 0..SN_WARMUP {
            sw.power_iterate()?;
        }
        Ok(sw)
    }

    fn matrix(&self) -> Result<Tensor> {
        let rows = self.w.dim(0)?;
        Ok(self.w.as_tensor().reshape((rows, self.w.elem_count() / rows))?)
    }

    /// One step: v ← Wᵀu/‖·‖, u ← Wv/‖·‖, on detached weights.
    pub fn power_iterate(&mut self) -> Result<()> {
        let m = self.matrix()?.detach();
        let v = unit(&m.t()?.matmul(&self.u.unsqueeze(1)?)?.squeeze(1)?)?;
        let u = unit(&m.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
        self.u = u;
        self.v = v;
        Ok(())
    }

    /// σ̂ = uᵀWv, differentiable in W.
    pub fn sigma(&self) -> Result<Tensor> {
        let m = self.matrix()?;
        Ok(self.u.unsqueeze(0)?.matmul(&m)?.matmul(&self.v.unsqueeze(1)?)?.squeeze(1)?.squeeze(0)?)
    }

    pub fn normalized(&self) -> Result<Tensor> {
        Ok(self.w.as_tensor().broadcast_div(&self.sigma()?)?)
    }
}

fn unit(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_all()?.sqrt()?;
    Ok(x.broadcast_div(&(n + 1e-12)?)?)
}

pub struct SnConv2d {
    pub sw: SpectralWeight,
    pub b: Var,
    pub stride: usize,
    pub pad: usize,
}

impl SnConv2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let w = ps.uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], fan_bound(c_in * k * k))?;
        let seed: Vec<f64> = (0..c_out).map(|_| ps.next_uniform()).collect();
        Ok(SnConv2d {
            sw: SpectralWeight::new(w, seed)?,
            b: ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_bias(x, &self.sw.normalized()?, self.b.as_tensor(), self.pad, self.stride)
    }
}

pub struct SnLinear {
    pub sw: SpectralWeight,
    pub b: Var,
}

impl SnLinear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = ps.uniform(&format!("{name}.weight"), &[d_out, d_in], fan_bound(d_in))?;
        let seed: Vec<f64> = (0..d_out).map(|_| ps.next_uniform()).collect();
        Ok(SnLinear {
            sw: SpectralWeight::new(w, seed)?,
            b: ps.constant(&format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.sw.normalized()?.t()?)?.broadcast_add(self.b.as_tensor())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::scalar;

    #[test]
    fn deform_with_zero_offsets_is_plain_conv() {
        let mut ps = ParamStore::new(3);
        let x = Tensor::from_vec((0..2 * 2 * 6 * 5).map(|i| ((i * 31 % 13) as f64) / 13.0).collect::<Vec<_>>(), (2, 2, 6, 5), &DEVICE).unwrap();
        let d = DeformConv2d::new(&mut ps, "d", 2, 3).unwrap();
        let ours = d.forward(&x).unwrap();
        let reference = conv_bias(&x, d.w.as_tensor(), d.b.as_tensor(), 1, 1).unwrap();
        let diff = scalar(&(ours - reference).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn deform_integer_shift_moves_sampling() {
        // Every tap shifted by +1 column samples x one pixel to the right.
        let x = Tensor::from_vec((0..16).map(|i| i as f64).collect::<Vec<_>>(), (1, 1, 4, 4), &DEVICE).unwrap();
        let mut off = vec![0.0; 18 * 16];
        for k in 0..9 {
            for i in 0..16 {
                off[(2 * k + 1) * 16 + i] = 1.0;
            }
        }
        let off = Tensor::from_vec(off, (1, 18, 4, 4), &DEVICE).unwrap();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = Tensor::from_vec(w, (1, 1, 3, 3), &DEVICE).unwrap();
        let b = Tensor::zeros(1, DTYPE, &DEVICE).unwrap();
        let y = deform_conv3x3(&x, &off, &w, &b).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(&y[0..4], &[1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn resblock_projection_only_when_needed() {
        let mut ps = ParamStore::new(0);
        ResBlock::new(&mut ps, "a", 8, 8).unwrap();
        assert!(ps.get("a.proj.weight").is_none());
        ResBlock::new(&mut ps, "b", 8, 16).unwrap();
        assert!(ps.get("b.proj.weight").is_some());
    }
}
