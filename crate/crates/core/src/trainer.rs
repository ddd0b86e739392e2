//! Adversarial training loop, checkpoints, and few-shot generation.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, write_archive, Archive};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::extractors::{latent_stand_in, perceptual_stand_in, FeatureExtractor, VaeEncoder, VggFeatures, PERCEPTUAL_WEIGHTS};
use crate::generator::{EncoderConfig, Generator};
use crate::losses::{
    adv_loss_d, adv_loss_g, cls_loss, disentangle_loss, latent_loss, perceptual_loss, recon_loss, total_d, total_g, CircleParams,
    DiscriminatorParts, GeneratorParts, LossReport, LossWeights, TripletEmbeddings,
};
use crate::nn::ops::{batch_images, scalar, unbatch_images};
use crate::nn::{DEVICE, DTYPE};
use crate::optim::{Adam, AdamConfig};
use crate::sampling::{sample_training_batch, steps_per_epoch, TrainingBatch, Triplet};
use crate::selector::{select_from_references, PreferenceTable};
use crate::store::{Dataset, GlyphImage};
use crate::{Error, Result};

/// Optimization settings and ablation switches for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub circle: CircleParams,
    pub encoder: EncoderConfig,
    pub disc_width: usize,
    pub rs_train: bool,
    pub rs_test: bool,
    pub enable_cls: bool,
    pub enable_latent: bool,
    /// Save every this many steps in addition to epoch ends; 0 disables.
    pub checkpoint_every: u64,
    pub threshold: f32,
    pub perceptual_weights: Option<PathBuf>,
    pub latent_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 64,
            max_steps: None,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            circle: CircleParams::default(),
            encoder: EncoderConfig::default(),
            disc_width: 64,
            rs_train: true,
            rs_test: true,
            enable_cls: true,
            enable_latent: true,
            checkpoint_every: 0,
            threshold: 0.5,
            perceptual_weights: None,
            latent_weights: None,
        }
    }
}

impl TrainConfig {
    /// A CPU-sized configuration: 32×32 glyphs, width 8, head 16, batch 8.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            batch_size: 8,
            seed,
            encoder: EncoderConfig {
                base_width: 8,
                head_dim: 16,
                resolution: 32,
            },
            disc_width: 8,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} is below 2", self.batch_size)));
        }
        if self.disc_width == 0 {
            return Err(Error::Config("discriminator width must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must be in (0, 1)", self.threshold)));
        }
        self.adam.validate()?;
        self.weights.validate()?;
        self.circle.validate()?;
        self.encoder.validate()
    }
}

/// Seed of the sampler at `step`, independent of how the run was split
/// across resumes.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.random()
}

/// The frozen networks behind the perceptual and latent losses.
pub struct Extractors {
    pub perceptual: Box<dyn FeatureExtractor>,
    pub latent: Box<dyn FeatureExtractor>,
}

impl Extractors {
    pub fn stand_in() -> Result<Self> {
        Ok(Extractors {
            perceptual: Box::new(perceptual_stand_in()?),
            latent: Box::new(latent_stand_in()?),
        })
    }

    /// Pretrained weights where configured, stand-ins otherwise.
    pub fn for_config(cfg: &TrainConfig) -> Result<Self> {
        let perceptual: Box<dyn FeatureExtractor> = match &cfg.perceptual_weights {
            Some(p) => Box::new(VggFeatures::load(p)?),
            None => Box::new(perceptual_stand_in()?),
        };
        let latent: Box<dyn FeatureExtractor> = match &cfg.latent_weights {
            Some(p) => Box::new(VaeEncoder::load(p)?),
            None => Box::new(latent_stand_in()?),
        };
        Ok(Extractors { perceptual, latent })
    }
}

/// Tensors of one forward pass over a batch.
pub struct StepForward {
    pub y: Tensor,
    pub y_hat: Tensor,
    /// Style embeddings of the pool `x_s ∪ x_c`.
    pub style: Tensor,
    /// Content embeddings of the pool.
    pub content: Tensor,
}

const DISC_SEED_SALT: u64 = 0xD15C_0000_0000_0001;

pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub extractors: Extractors,
    opt_g: Adam,
    opt_d: Adam,
    /// Steps completed so far.
    pub step: u64,
    pub last_checkpoint: Option<PathBuf>,
}

/// Embeddings of the triplets' images, selected from the pool rows.
fn gather_triplets(emb: &Tensor, triplets: &[Triplet]) -> Result<Option<TripletEmbeddings>> {
    if triplets.is_empty() {
        return Ok(None);
    }
    let pick = |f: fn(&Triplet) -> usize| -> Result<Tensor> {
        let idx: Vec<u32> = triplets.iter().map(|t| f(t) as u32).collect();
        let idx = Tensor::from_vec(idx, triplets.len(), &DEVICE)?;
        Ok(emb.index_select(&idx, 0)?)
    };
    Ok(Some(TripletEmbeddings {
        anchor: pick(|t| t.anchor)?,
        positive: pick(|t| t.positive)?,
        negative: pick(|t| t.negative)?,
    }))
}

fn zero() -> Result<Tensor> {
    Ok(Tensor::new(0.0f64, &DEVICE)?)
}

impl Trainer {
    pub fn new(cfg: TrainConfig, n_fonts: usize, n_chars: usize, extractors: Extractors) -> Result<Self> {
        cfg.validate()?;
        let gen = Generator::new(cfg.encoder, cfg.seed)?;
        let disc = Discriminator::new(
            DiscriminatorConfig {
                base_width: cfg.disc_width,
                n_fonts,
                n_chars,
            },
            cfg.seed ^ DISC_SEED_SALT,
        )?;
        Ok(Trainer {
            opt_g: Adam::new(cfg.adam),
            opt_d: Adam::new(cfg.adam),
            cfg,
            gen,
            disc,
            extractors,
            step: 0,
            last_checkpoint: None,
        })
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(term) => Error::Diverged {
                term,
                step: self.step + 1,
                last_checkpoint: self.last_checkpoint.clone(),
            },
            e => e,
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<LossReport> {
        self.step_inner(batch).map_err(|e| self.diverged(e))
    }

    fn step_inner(&mut self, batch: &TrainingBatch) -> Result<LossReport> {
        let fw = self.forward(batch)?;
        let (d_parts, loss_d) = self.d_step(&fw, batch)?;
        let (g_parts, loss_g) = self.g_step(&fw, batch)?;
        self.step += 1;
        let terms = [
            ("recon", &g_parts.recon),
            ("perc", &g_parts.perc),
            ("dist", &g_parts.dist),
            ("latent", &g_parts.latent),
            ("adv_g", &g_parts.adv),
            ("cls_g", &g_parts.cls),
            ("total_g", &loss_g),
            ("adv_d", &d_parts.adv),
            ("cls_d", &d_parts.cls),
            ("total_d", &loss_d),
        ];
        Ok(LossReport {
            step: self.step,
            terms: terms.iter().map(|(k, t)| Ok((k.to_string(), scalar(t)?))).collect::<Result<_>>()?,
        })
    }

    /// Encodes the batch pool and decodes ŷ from (style of x_s, content of x_c).
    pub fn forward(&self, batch: &TrainingBatch) -> Result<StepForward> {
        let n = batch.len();
        let xs: Vec<&GlyphImage> = batch.x_s.iter().chain(&batch.x_c).collect();
        let enc = self.gen.encode(&batch_images(&xs)?)?;
        let y_hat = self.gen.decode(&enc.style.narrow(0, 0, n)?, &enc.content.narrow(0, n, n)?)?;
        Ok(StepForward {
            y: batch_images(&batch.y.iter().collect::<Vec<_>>())?,
            y_hat,
            style: enc.style,
            content: enc.content,
        })
    }

    pub fn discriminator_loss(&self, fw: &StepForward, batch: &TrainingBatch) -> Result<(DiscriminatorParts, Tensor)> {
        let real = self.disc.forward(&fw.y)?;
        let fake = self.disc.forward(&fw.y_hat.detach())?;
        let parts = DiscriminatorParts {
            adv: adv_loss_d(&real.adv, &fake.adv)?,
            cls: if self.cfg.enable_cls {
                cls_loss(&real.style_logits, &real.content_logits, &batch.style_labels, &batch.content_labels)?
            } else {
                zero()?
            },
        };
        let total = total_d(&parts, &self.cfg.weights)?;
        Ok((parts, total))
    }

    pub fn generator_loss(&self, fw: &StepForward, batch: &TrainingBatch) -> Result<(GeneratorParts, Tensor)> {
        let cfg = &self.cfg;
        let out = self.disc.forward(&fw.y_hat)?;
        let style_t = gather_triplets(&fw.style, &batch.style_triplets)?;
        let content_t = gather_triplets(&fw.content, &batch.content_triplets)?;
        let parts = GeneratorParts {
            recon: recon_loss(&fw.y_hat, &fw.y)?,
            perc: perceptual_loss(&fw.y_hat, &fw.y, self.extractors.perceptual.as_ref(), &PERCEPTUAL_WEIGHTS)?,
            dist: disentangle_loss(style_t.as_ref(), content_t.as_ref(), cfg.circle)?,
            latent: if cfg.enable_latent {
                latent_loss(&fw.y_hat, &fw.y, self.extractors.latent.as_ref())?
            } else {
                zero()?
            },
            adv: adv_loss_g(&out.adv)?,
            cls: if cfg.enable_cls {
                cls_loss(&out.style_logits, &out.content_logits, &batch.style_labels, &batch.content_labels)?
            } else {
                zero()?
            },
        };
        let total = total_g(&parts, &cfg.weights)?;
        Ok((parts, total))
    }

    /// Advances the spectral-norm estimates and updates D on real `y` and
    /// detached `ŷ`. Generator parameters are not touched.
    pub fn d_step(&mut self, fw: &StepForward, batch: &TrainingBatch) -> Result<(DiscriminatorParts, Tensor)> {
        self.disc.power_iterate()?;
        let (parts, total) = self.discriminator_loss(fw, batch)?;
        self.opt_d.step(&self.disc.params, &total.backward()?)?;
        Ok((parts, total))
    }

    /// Updates G on the full generator objective. Discriminator parameters
    /// are not touched.
    pub fn g_step(&mut self, fw: &StepForward, batch: &TrainingBatch) -> Result<(GeneratorParts, Tensor)> {
        let (parts, total) = self.generator_loss(fw, batch)?;
        self.opt_g.step(&self.gen.params, &total.backward()?)?;
        Ok((parts, total))
    }

    /// The batch for the next step.
    pub fn next_batch(&self, dataset: &Dataset, table: &PreferenceTable) -> Result<TrainingBatch> {
        sample_training_batch(dataset, table, self.cfg.batch_size, self.cfg.rs_train, step_seed(self.cfg.seed, self.step))
    }

    pub fn total_steps(&self, dataset: &Dataset) -> u64 {
        self.cfg
            .max_steps
            .unwrap_or((self.cfg.epochs * steps_per_epoch(dataset, self.cfg.batch_size)) as u64)
    }

    /// Trains until the configured step count, writing one report line per
    /// step to `log` and checkpoints into `out_dir`. Picks up at
    /// `self.step`, so a restored trainer resumes where it stopped.
    pub fn fit(&mut self, dataset: &Dataset, table: &PreferenceTable, out_dir: &Path, log: &mut dyn Write) -> Result<Vec<PathBuf>> {
        self.check_dataset(dataset)?;
        let spe = steps_per_epoch(dataset, self.cfg.batch_size) as u64;
        let total = self.total_steps(dataset);
        let mut saved = Vec::new();
        while self.step < total {
            let batch = self.next_batch(dataset, table)?;
            let report = self.train_step(&batch)?;
            writeln!(log, "{report}").map_err(|e| Error::io(out_dir, e))?;
            let periodic = self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0;
            if self.step % spe == 0 || periodic || self.step == total {
                let path = out_dir.join(format!("step-{:08}.safetensors", self.step));
                self.save(&path)?;
                saved.push(path);
            }
        }
        Ok(saved)
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let r = self.cfg.encoder.resolution;
        if dataset.resolution() != (r, r) {
            return Err(Error::Config(format!(
                "dataset glyphs are {:?} but the model expects {r}x{r}",
                dataset.resolution()
            )));
        }
        if dataset.catalog.n_fonts() != self.disc.cfg.n_fonts || dataset.catalog.n_chars() != self.disc.cfg.n_chars {
            return Err(Error::Config("dataset does not match the discriminator's class counts".into()));
        }
        Ok(())
    }

    fn archive_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (k, v) in self.gen.params.iter().chain(self.disc.params.iter()) {
            out.push((k.clone(), v.as_tensor().clone()));
        }
        for (name, sw) in self.disc.spectral_weights() {
            out.push((format!("sn.{name}.u"), sw.u.clone()));
            out.push((format!("sn.{name}.v"), sw.v.clone()));
        }
        out.extend(self.opt_g.state("adam_g"));
        out.extend(self.opt_d.state("adam_d"));
        out
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let meta = HashMap::from([
            ("config".to_string(), serde_json::to_string(&self.cfg).expect("config serializes")),
            ("step".to_string(), self.step.to_string()),
            ("adam_g_t".to_string(), self.opt_g.steps().to_string()),
            ("adam_d_t".to_string(), self.opt_d.steps().to_string()),
            ("n_fonts".to_string(), self.disc.cfg.n_fonts.to_string()),
            ("n_chars".to_string(), self.disc.cfg.n_chars.to_string()),
        ]);
        write_archive(path, &self.archive_tensors(), meta)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// Restores a trainer, optimizer state included.
    pub fn load(path: &Path, extractors: Extractors) -> Result<Self> {
        let a = read_archive(path)?;
        let cfg = config_of(&a)?;
        let n_fonts = parse_meta(&a, "n_fonts")?;
        let n_chars = parse_meta(&a, "n_chars")?;
        let mut t = Trainer::new(cfg, n_fonts as usize, n_chars as usize, extractors)?;
        t.gen.params.load(&a.tensors)?;
        t.disc.params.load(&a.tensors)?;
        for (name, sw) in t.disc.spectral_weights_mut() {
            for (slot, which) in [(&mut sw.u, "u"), (&mut sw.v, "v")] {
                let key = format!("sn.{name}.{which}");
                let v = a.tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                *slot = v.to_dtype(DTYPE)?;
            }
        }
        t.opt_g.restore("adam_g", parse_meta(&a, "adam_g_t")?, &a.tensors);
        t.opt_d.restore("adam_d", parse_meta(&a, "adam_d_t")?, &a.tensors);
        t.step = parse_meta(&a, "step")?;
        t.last_checkpoint = Some(path.to_path_buf());
        Ok(t)
    }
}

fn config_of(a: &Archive) -> Result<TrainConfig> {
    serde_json::from_str(a.meta("config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))
}

fn parse_meta(a: &Archive, key: &str) -> Result<u64> {
    a.meta(key)?.parse().map_err(|_| Error::Checkpoint(format!("bad {key}")))
}

/// Only the generator of a checkpoint, with its run configuration.
pub fn load_generator(path: &Path) -> Result<(Generator, TrainConfig)> {
    let a = read_archive(path)?;
    let cfg = config_of(&a)?;
    let gen = Generator::new(cfg.encoder, cfg.seed)?;
    gen.params.load(&a.tensors)?;
    Ok((gen, cfg))
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    /// Pick each reference by stroke matching; otherwise uniformly.
    pub rs: bool,
    pub threshold: f32,
    pub seed: u64,
    pub chunk: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            rs: true,
            threshold: 0.5,
            seed: 0,
            chunk: 16,
        }
    }
}

/// Renders `targets` in the style of `refs`. Each output carries the
/// references' font id and the target's char id.
pub fn generate(gen: &Generator, dataset: &Dataset, refs: &[GlyphImage], targets: &[usize], opts: GenerateOptions) -> Result<Vec<GlyphImage>> {
    if refs.is_empty() {
        return Err(Error::Config("at least one style reference is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pairs: Vec<(&GlyphImage, &GlyphImage)> = Vec::with_capacity(targets.len());
    for &t in targets {
        let content = dataset.content_glyph(t).ok_or_else(|| Error::MissingGlyph {
            font: dataset.catalog.fonts[dataset.catalog.content_font].clone(),
            ch: dataset.catalog.char_display(t),
        })?;
        let reference = if opts.rs {
            select_from_references(content, refs, opts.threshold)?
        } else {
            let others: Vec<&GlyphImage> = refs.iter().filter(|r| r.char_id != t).collect();
            let cands = if others.is_empty() { refs.iter().collect() } else { others };
            cands[rng.random_range(0..cands.len())]
        };
        pairs.push((reference, content));
    }
    let font = refs[0].font_id;
    let mut out = Vec::with_capacity(targets.len());
    for (chunk, ts) in pairs.chunks(opts.chunk.max(1)).zip(targets.chunks(opts.chunk.max(1))) {
        let xs = batch_images(&chunk.iter().map(|p| p.0).collect::<Vec<_>>())?;
        let xc = batch_images(&chunk.iter().map(|p| p.1).collect::<Vec<_>>())?;
        let y = gen.fuse(&xs, &xc)?;
        out.extend(unbatch_images(&y)?.into_iter().zip(ts).map(|(g, &t)| g.with_ids(font, t)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::sample_pools;
    use crate::synth::{fixture_dataset, style_family};

    fn setup() -> (Dataset, PreferenceTable, Trainer) {
        let chars: Vec<char> = ('a'..='l').collect();
        let ds = fixture_dataset(&style_family(4, 1), &chars, 32, 1).unwrap();
        let pools = sample_pools(&ds, 5, 2).unwrap();
        let table = PreferenceTable::build(&ds, &pools, 5, 0.5).unwrap();
        let mut cfg = TrainConfig::desk(9);
        cfg.batch_size = 4;
        let t = Trainer::new(cfg, 4, chars.len(), Extractors::stand_in().unwrap()).unwrap();
        (ds, table, t)
    }

    fn values(ps: &crate::nn::ParamStore) -> Vec<Vec<u64>> {
        ps.iter()
            .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|x| x.to_bits()).collect())
            .collect()
    }

    #[test]
    fn step_reports_every_term() {
        let (ds, table, mut t) = setup();
        let b = t.next_batch(&ds, &table).unwrap();
        let r = t.train_step(&b).unwrap();
        assert_eq!(r.step, 1);
        for k in ["recon", "perc", "dist", "latent", "adv_g", "cls_g", "total_g", "adv_d", "cls_d", "total_d"] {
            assert!(r.get(k).unwrap().is_finite(), "{k}");
        }
    }

    #[test]
    fn disabled_terms_report_zero() {
        let (ds, table, mut t) = setup();
        t.cfg.enable_cls = false;
        t.cfg.enable_latent = false;
        let b = t.next_batch(&ds, &table).unwrap();
        let r = t.train_step(&b).unwrap();
        assert_eq!(r.get("cls_g"), Some(0.0));
        assert_eq!(r.get("cls_d"), Some(0.0));
        assert_eq!(r.get("latent"), Some(0.0));
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, table, mut a) = setup();
        for _ in 0..2 {
            let b = a.next_batch(&ds, &table).unwrap();
            a.train_step(&b).unwrap();
        }
        let path = dir.path().join("c.safetensors");
        a.save(&path).unwrap();
        let mut b = Trainer::load(&path, Extractors::stand_in().unwrap()).unwrap();
        assert_eq!(b.step, 2);
        assert_eq!(values(&a.gen.params), values(&b.gen.params));
        let ra = a.train_step(&a.next_batch(&ds, &table).unwrap()).unwrap();
        let rb = b.train_step(&b.next_batch(&ds, &table).unwrap()).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(values(&a.disc.params), values(&b.disc.params));
    }

    #[test]
    fn generate_shapes_and_ids() {
        let (ds, _, t) = setup();
        let refs: Vec<GlyphImage> = (0..3).map(|c| ds.glyph(3, c).unwrap().clone()).collect();
        let targets: Vec<usize> = (0..12).collect();
        let out = generate(&t.gen, &ds, &refs, &targets, GenerateOptions::default()).unwrap();
        assert_eq!(out.len(), 12);
        for (g, &c) in out.iter().zip(&targets) {
            assert_eq!((g.height(), g.width(), g.font_id, g.char_id), (32, 32, 3, c));
        }
        assert!(generate(&t.gen, &ds, &[], &targets, GenerateOptions::default()).is_err());
    }

    #[test]
    fn step_seeds_differ() {
        assert_ne!(step_seed(1, 0), step_seed(1, 1));
        assert_ne!(step_seed(1, 0), step_seed(2, 0));
        assert_eq!(step_seed(5, 9), step_seed(5, 9));
    }
}
