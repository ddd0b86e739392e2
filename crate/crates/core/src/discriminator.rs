//! Patch discriminator with auxiliary font and character classifiers.

use candle_core::Tensor;

use crate::generator::check_finite;
use crate::nn::layers::{SnConv2d, SnLinear, SpectralWeight};
use crate::nn::ops::leaky_relu;
use crate::nn::ParamStore;
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    /// Width of the first stage; later stages double it.
    pub base_width: usize,
    pub n_fonts: usize,
    pub n_chars: usize,
}

impl DiscriminatorConfig {
    pub fn new(n_fonts: usize, n_chars: usize) -> Self {
        DiscriminatorConfig {
            base_width: 64,
            n_fonts,
            n_chars,
        }
    }
}

pub struct DiscriminatorOutput {
    /// `(B, 1, H/8, W/8)` realism logits.
    pub adv: Tensor,
    pub style_logits: Tensor,
    pub content_logits: Tensor,
}

pub struct Discriminator {
    pub params: ParamStore,
    stages: Vec<SnConv2d>,
    adv: SnConv2d,
    style: SnLinear,
    content: SnLinear,
    pub cfg: DiscriminatorConfig,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if cfg.n_fonts == 0 || cfg.n_chars == 0 || cfg.base_width == 0 {
            return Err(Error::Config(format!("degenerate discriminator {cfg:?}")));
        }
        let mut ps = ParamStore::new(seed);
        let w = cfg.base_width;
        let widths = [1, w, 2 * w, 4 * w];
        let stages = (0..3)
            .map(|i| SnConv2d::new(&mut ps, &format!("disc.conv{}", i + 1), widths[i], widths[i + 1], 3, 2))
            .collect::<Result<Vec<_>>>()?;
        let adv = SnConv2d::new(&mut ps, "disc.adv", 4 * w, 1, 3, 1)?;
        let style = SnLinear::new(&mut ps, "disc.style", 4 * w, cfg.n_fonts)?;
        let content = SnLinear::new(&mut ps, "disc.content", 4 * w, cfg.n_chars)?;
        Ok(Discriminator {
            params: ps,
            stages,
            adv,
            style,
            content,
            cfg,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscriminatorOutput> {
        let mut h = x.clone();
        for s in &self.stages {
            h = leaky_relu(&s.forward(&h)?, LEAKY_SLOPE)?;
        }
        let adv = self.adv.forward(&h)?;
        let pooled = h.mean(3)?.mean(2)?;
        let style_logits = self.style.forward(&pooled)?;
        let content_logits = self.content.forward(&pooled)?;
        for (t, name) in [(&adv, "disc.adv"), (&style_logits, "disc.style"), (&content_logits, "disc.content")] {
            check_finite(t, name)?;
        }
        Ok(DiscriminatorOutput {
            adv,
            style_logits,
            content_logits,
        })
    }

    /// Named spectrally normalized weights.
    pub fn spectral_weights(&self) -> Vec<(String, &SpectralWeight)> {
        let mut out: Vec<(String, &SpectralWeight)> =
            self.stages.iter().enumerate().map(|(i, s)| (format!("disc.conv{}", i + 1), &s.sw)).collect();
        out.push(("disc.adv".into(), &self.adv.sw));
        out.push(("disc.style".into(), &self.style.sw));
        out.push(("disc.content".into(), &self.content.sw));
        out
    }

    pub fn spectral_weights_mut(&mut self) -> Vec<(String, &mut SpectralWeight)> {
        let mut out: Vec<(String, &mut SpectralWeight)> = self
            .stages
            .iter_mut()
            .enumerate()
            .map(|(i, s)| (format!("disc.conv{}", i + 1), &mut s.sw))
            .collect();
        out.push(("disc.adv".into(), &mut self.adv.sw));
        out.push(("disc.style".into(), &mut self.style.sw));
        out.push(("disc.content".into(), &mut self.content.sw));
        out
    }

    /// Advances every singular-vector estimate by one power-iteration step.
    pub fn power_iterate(&mut self) -> Result<()> {
        for (_, sw) in self.spectral_weights_mut() {
            sw.power_iterate()?;
        }
        Ok(())
    }
}
