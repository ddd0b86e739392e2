//! Training objectives and their weighted totals.

use std::fmt;

use candle_core::Tensor;

use crate::extractors::FeatureExtractor;
use crate::nn::ops::{cosine_rows, cross_entropy, mean_abs_diff, scalar, softplus};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub perc: f64,
    pub dist: f64,
    pub latent: f64,
    pub cls: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 5.0,
            perc: 1.0,
            dist: 0.2,
            latent: 0.15,
            cls: 1.0,
            adv: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.recon, self.perc, self.dist, self.latent, self.cls, self.adv];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CircleParams {
    pub margin: f64,
    pub scale: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        CircleParams { margin: 0.25, scale: 64.0 }
    }
}

impl CircleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin < 1.0) || !(self.scale > 0.0) {
            return Err(Error::Config(format!("circle margin must be in (0, 1) and scale > 0: {self:?}")));
        }
        Ok(())
    }
}

pub fn recon_loss(y_hat: &Tensor, y: &Tensor) -> Result<Tensor> {
    mean_abs_diff(y_hat, y)
}

/// `Σ_l ω_l · mean|φ_l(ŷ) − φ_l(y)|`.
pub fn perceptual_loss(y_hat: &Tensor, y: &Tensor, ext: &dyn FeatureExtractor, weights: &[f64]) -> Result<Tensor> {
    let a = ext.features(y_hat)?;
    let b = ext.features(&y.detach())?;
    if a.len() != weights.len() {
        return Err(Error::Shape(format!("{} taps for {} weights", a.len(), weights.len())));
    }
    let mut total: Option<Tensor> = None;
    for ((fa, fb), &w) in a.iter().zip(&b).zip(weights) {
        let term = (mean_abs_diff(fa, &fb.detach())? * w)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    total.ok_or_else(|| Error::Shape("extractor has no taps".into()))
}

/// Mean L1 between latents; the target side is detached.
pub fn latent_loss(y_hat: &Tensor, y: &Tensor, ext: &dyn FeatureExtractor) -> Result<Tensor> {
    let a = ext.features(y_hat)?;
    let b = ext.features(&y.detach())?;
    match (a.first(), b.first()) {
        (Some(fa), Some(fb)) => mean_abs_diff(fa, &fb.detach()),
        _ => Err(Error::Shape("latent extractor returned nothing".into())),
    }
}

/// Hinge loss for the discriminator.
pub fn adv_loss_d(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = real.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let f = (fake + 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

pub fn adv_loss_g(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.mean_all()?.neg()?)
}

pub fn cls_loss(style_logits: &Tensor, content_logits: &Tensor, style_labels: &[usize], content_labels: &[usize]) -> Result<Tensor> {
    Ok((cross_entropy(style_logits, style_labels)? + cross_entropy(content_logits, content_labels)?)?)
}

/// Circle loss on positive/negative cosine similarities, averaged. The
/// adaptive weights are computed from detached similarities.
pub fn circle_loss(sp: &Tensor, sn: &Tensor, p: CircleParams) -> Result<Tensor> {
    let eta = p.margin;
    let dp = sp.detach().affine(-1.0, 1.0 + eta)?.relu()?;
    let dn = (sn.detach() + eta)?.relu()?;
    let pos = (dp * (sp - (1.0 - eta))?)?;
    let neg = (dn * (sn - eta)?)?;
    let z = ((neg - pos)? * p.scale)?;
    Ok(softplus(&z)?.mean_all()?)
}

/// Embeddings of triplets, each `(T, d)`.
pub struct TripletEmbeddings {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

impl TripletEmbeddings {
    pub fn similarities(&self) -> Result<(Tensor, Tensor)> {
        Ok((cosine_rows(&self.anchor, &self.positive)?, cosine_rows(&self.anchor, &self.negative)?))
    }
}

/// Style circle loss plus content circle loss. Either side may be absent
/// when a batch offers no valid triplet for it.
pub fn disentangle_loss(style: Option<&TripletEmbeddings>, content: Option<&TripletEmbeddings>, p: CircleParams) -> Result<Tensor> {
    let mut total = Tensor::new(0.0f64, &crate::nn::DEVICE)?;
    for t in [style, content].into_iter().flatten() {
        let (sp, sn) = t.similarities()?;
        total = (total + circle_loss(&sp, &sn, p)?)?;
    }
    Ok(total)
}

/// Generator loss terms, each a scalar tensor.
pub struct GeneratorParts {
    pub recon: Tensor,
    pub perc: Tensor,
    pub dist: Tensor,
    pub latent: Tensor,
    pub adv: Tensor,
    pub cls: Tensor,
}

impl GeneratorParts {
    fn weighted<'a>(&'a self, w: &LossWeights) -> [(&'static str, &'a Tensor, f64); 6] {
        [
            ("recon", &self.recon, w.recon),
            ("perc", &self.perc, w.perc),
            ("dist", &self.dist, w.dist),
            ("latent", &self.latent, w.latent),
            ("adv_g", &self.adv, w.adv),
            ("cls_g", &self.cls, w.cls),
        ]
    }
}

pub struct DiscriminatorParts {
    pub adv: Tensor,
    pub cls: Tensor,
}

fn weighted_sum(terms: &[(&'static str, &Tensor, f64)]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for &(name, t, w) in terms {
        if !scalar(t)?.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let term = (t * w)?;
        total = Some(match total {
            None => term,
            Some(s) => (s + term)?,
        });
    }
    total.ok_or_else(|| Error::Shape("no loss terms".into()))
}

pub fn total_g(p: &GeneratorParts, w: &LossWeights) -> Result<Tensor> {
    weighted_sum(&p.weighted(w))
}

pub fn total_d(p: &DiscriminatorParts, w: &LossWeights) -> Result<Tensor> {
    weighted_sum(&[("adv_d", &p.adv, w.adv), ("cls_d", &p.cls, w.cls)])
}

/// Scalar loss values of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub terms: Vec<(String, f64)>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut step = None;
        let mut terms = Vec::new();
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=')?;
            if k == "step" {
                step = v.parse().ok();
            } else {
                terms.push((k.to_string(), v.parse().ok()?));
            }
        }
        Some(LossReport { step: step?, terms })
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={}", self.step)?;
        for (k, v) in &self.terms {
            write!(f, " {k}={v:e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DEVICE, DTYPE};

    fn s(v: f64) -> Tensor {
        Tensor::new(v, &DEVICE).unwrap()
    }

    fn v(x: &[f64]) -> Tensor {
        Tensor::from_slice(x, x.len(), &DEVICE).unwrap()
    }

    #[test]
    fn hinge_values() {
        let ones = Tensor::ones((2, 1, 4, 4), DTYPE, &DEVICE).unwrap();
        let zeros = Tensor::zeros((2, 1, 4, 4), DTYPE, &DEVICE).unwrap();
        assert_eq!(scalar(&adv_loss_d(&ones, &ones.neg().unwrap()).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&adv_loss_d(&zeros, &zeros).unwrap()).unwrap(), 2.0);
        assert_eq!(scalar(&adv_loss_g(&zeros).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&adv_loss_g(&(ones * 3.0).unwrap()).unwrap()).unwrap(), -3.0);
    }

    #[test]
    fn recon_constant_offset() {
        let y = Tensor::from_vec((0..16).map(|i| i as f64 / 20.0).collect::<Vec<_>>(), (1, 1, 4, 4), &DEVICE).unwrap();
        let l = scalar(&recon_loss(&(&y + 0.1).unwrap(), &y).unwrap()).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        assert_eq!(scalar(&recon_loss(&y, &y).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn circle_values() {
        let p = CircleParams::default();
        let l = scalar(&circle_loss(&v(&[1.0]), &v(&[-1.0]), p).unwrap()).unwrap();
        assert!((l - (1.0 + (-4f64).exp()).ln()).abs() < 1e-12);
        let l = scalar(&circle_loss(&v(&[0.75]), &v(&[0.25]), p).unwrap()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let l = scalar(&circle_loss(&v(&[1.0]), &v(&[0.0]), p).unwrap()).unwrap();
        assert!((l - (1.0 + (-8f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn circle_monotone_on_open_square() {
        let p = CircleParams::default();
        let f = |sp: f64, sn: f64| scalar(&circle_loss(&v(&[sp]), &v(&[sn]), p).unwrap()).unwrap();
        let grid: Vec<f64> = (1..20).map(|i| -0.75 + 1.5 * i as f64 / 20.0).collect();
        for &a in &grid {
            for w in grid.windows(2) {
                assert!(f(w[1], a) < f(w[0], a), "sp {} -> {} at sn {a}", w[0], w[1]);
                if w[0] >= 0.0 {
                    assert!(f(a, w[1]) > f(a, w[0]), "sn {} -> {} at sp {a}", w[0], w[1]);
                } else if w[1] <= -p.margin {
                    // δn is clamped to zero below −η, so s_n has no effect there
                    assert_eq!(f(a, w[1]), f(a, w[0]));
                }
            }
        }
    }

    #[test]
    fn circle_gradient_signs() {
        let p = CircleParams::default();
        let grid: Vec<f64> = (1..20).map(|i| -0.75 + 1.5 * i as f64 / 20.0).collect();
        for &a in &grid {
            for &b in &grid {
                let sp = candle_core::Var::new(&[a], &DEVICE).unwrap();
                let sn = candle_core::Var::new(&[b], &DEVICE).unwrap();
                let g = circle_loss(sp.as_tensor(), sn.as_tensor(), p).unwrap().backward().unwrap();
                let gp = g.get(sp.as_tensor()).unwrap().to_vec1::<f64>().unwrap()[0];
                let gn = g.get(sn.as_tensor()).unwrap().to_vec1::<f64>().unwrap()[0];
                assert!(gp < 0.0, "d/dsp at ({a}, {b}) = {gp}");
                if b > -p.margin {
                    assert!(gn > 0.0, "d/dsn at ({a}, {b}) = {gn}");
                } else {
                    assert_eq!(gn, 0.0);
                }
            }
        }
    }

    #[test]
    fn total_g_default_weights() {
        let parts = GeneratorParts {
            recon: s(1.0),
            perc: s(1.0),
            dist: s(1.0),
            latent: s(1.0),
            adv: s(1.0),
            cls: s(1.0),
        };
        let t = scalar(&total_g(&parts, &LossWeights::default()).unwrap()).unwrap();
        assert!((t - 7.85).abs() < 1e-12);
        let mut w = LossWeights::default();
        w.dist *= 2.0;
        let t2 = scalar(&total_g(&parts, &w).unwrap()).unwrap();
        assert!((t2 - t - 0.2).abs() < 1e-12);
        let nan = GeneratorParts {
            latent: s(f64::NAN),
            ..parts
        };
        assert!(matches!(total_g(&nan, &LossWeights::default()), Err(Error::NonFinite(t)) if t == "latent"));
    }

    #[test]
    fn report_round_trip() {
        let r = LossReport {
            step: 12,
            terms: vec![("recon".into(), 0.125), ("total_g".into(), -3.5e-7)],
        };
        let line = r.to_string();
        assert!(line.starts_with("step=12 recon="));
        assert_eq!(LossReport::parse(&line), Some(r));
    }
}
