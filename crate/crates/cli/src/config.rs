//! Run configuration: defaults, then a `key = value` file, then flags.

use std::path::{Path, PathBuf};

use fontgen::trainer::TrainConfig;
use fontgen::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub pool_size: usize,
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub content_font: Option<String>,
    pub out: Option<PathBuf>,
    pub prefs: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            pool_size: fontgen::selector::DEFAULT_POOL_SIZE,
            data: None,
            manifest: None,
            content_font: None,
            out: None,
            prefs: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

pub fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}; expected on or off"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_steps" => t.max_steps = Some(parse(key, value)?),
            "lr" => t.adam.lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "lambda_recon" => t.weights.recon = parse(key, value)?,
            "lambda_perc" => t.weights.perc = parse(key, value)?,
            "lambda_dist" => t.weights.dist = parse(key, value)?,
            "lambda_latent" => t.weights.latent = parse(key, value)?,
            "lambda_cls" => t.weights.cls = parse(key, value)?,
            "lambda_adv" => t.weights.adv = parse(key, value)?,
            "circle_margin" => t.circle.margin = parse(key, value)?,
            "circle_scale" => t.circle.scale = parse(key, value)?,
            "base_width" => t.encoder.base_width = parse(key, value)?,
            "head_dim" => t.encoder.head_dim = parse(key, value)?,
            "resolution" => t.encoder.resolution = parse(key, value)?,
            "disc_width" => t.disc_width = parse(key, value)?,
            "rs_train" => t.rs_train = parse_switch(key, value)?,
            "rs_test" => t.rs_test = parse_switch(key, value)?,
            "enable_cls" => t.enable_cls = parse_switch(key, value)?,
            "enable_latent" => t.enable_latent = parse_switch(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "threshold" => t.threshold = parse(key, value)?,
            "perceptual_weights" => t.perceptual_weights = Some(value.into()),
            "latent_weights" => t.latent_weights = Some(value.into()),
            "pool_size" => self.pool_size = parse(key, value)?,
            "data" => self.data = Some(value.into()),
            "manifest" => self.manifest = Some(value.into()),
            "content_font" => self.content_font = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "prefs" => self.prefs = Some(value.into()),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.apply_text(&text)
    }

    /// Defaults, then the file, then each `(key, value)` override in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}
