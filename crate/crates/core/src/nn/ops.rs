use candle_core::{DType, Tensor, D};

use super::{DEVICE, DTYPE};
use crate::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Logistic function written through `tanh`, which keeps gradients finite
/// for large |x|.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `max(x, 0) + log(1 + exp(−|x|))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Normalizes over groups of channels and all spatial positions.
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels in {groups} groups")));
    }
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let n = normalize_last(&g, eps)?;
    Ok(n.reshape((b, c, h, w))?)
}

/// Per-sample, per-channel normalization over spatial positions.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let n = normalize_last(&x.reshape((b, c, h * w))?, eps)?;
    Ok(n.reshape((b, c, h, w))?)
}

fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Per-channel spatial mean and biased variance, each `(B, C)`.
pub fn channel_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean(2)?;
    Ok((mean.squeeze(2)?, var))
}

/// `(2n, n)` matrix of bilinear weights for 2× upsampling with half-pixel
/// centers (corners not aligned).
pub fn upsample_matrix(n: usize) -> Result<Tensor> {
    let mut m = vec![0.0f64; 2 * n * n];
    for o in 0..2 * n {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let t = src - i0 as f64;
        m[o * n + i0] += 1.0 - t;
        m[o * n + i1] += t;
    }
    Ok(Tensor::from_vec(m, (2 * n, n), &DEVICE)?)
}

/// Bilinear 2× upsampling of `(B, C, H, W)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let uh = upsample_matrix(h)?;
    let uw = upsample_matrix(w)?.t()?;
    let rows = x.broadcast_matmul(&uw)?;
    Ok(uh.broadcast_matmul(&rows)?)
}

/// Depthwise 3×3 convolution, padding 1. `w` has shape `(C, 9)`.
pub fn depthwise3x3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (_, c, h, wd) = x.dims4()?;
    let p = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut acc: Option<Tensor> = None;
    for k in 0..9 {
        let (dy, dx) = (k / 3, k % 3);
        let shifted = p.narrow(2, dy, h)?.narrow(3, dx, wd)?;
        let wk = w.narrow(1, k, 1)?.reshape((1, c, 1, 1))?;
        let term = shifted.broadcast_mul(&wk)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(acc.expect("nine taps"))
}

/// Row-wise cosine similarity of two `(B, d)` tensors; rows with zero norm
/// give 0.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(1)?;
    let na = a.sqr()?.sum(1)?;
    let nb = b.sqr()?.sum(1)?;
    let denom = (na * nb)?.clamp(1e-24, f64::INFINITY)?.sqrt()?;
    Ok((dot / denom)?)
}

/// Mean softmax cross-entropy of `(B, K)` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let lse = logits.log_sum_exp(1)?;
    let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), (b, 1), &DEVICE)?;
    let picked = logits.gather(&idx, 1)?.squeeze(1)?;
    Ok((lse - picked)?.mean_all()?)
}

/// Global average and max over spatial positions, each `(B, C)`.
pub fn global_pools(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    Ok((flat.mean(2)?, flat.max(2)?))
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Scalar value of a 0-d or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

/// Stacks images into a `(B, 1, H, W)` batch.
pub fn batch_images(imgs: &[&crate::store::GlyphImage]) -> Result<Tensor> {
    let first = imgs.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(imgs.len() * h * w);
    for g in imgs {
        if (g.height(), g.width()) != (h, w) {
            return Err(Error::Shape(format!("{}x{} glyph in {h}x{w} batch", g.height(), g.width())));
        }
        data.extend(g.pixels().iter().map(|&p| p as f64));
    }
    Ok(Tensor::from_vec(data, (imgs.len(), 1, h, w), &DEVICE)?.to_dtype(DTYPE)?)
}

/// Splits a `(B, 1, H, W)` batch back into images.
pub fn unbatch_images(t: &Tensor) -> Result<Vec<crate::store::GlyphImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("{c} channels, expected 1")));
    }
    let data = t.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| crate::store::GlyphImage::new(h, w, data[i * h * w..(i + 1) * h * w].iter().map(|&v| v as f32).collect(), 0, 0))
        .collect())
}
