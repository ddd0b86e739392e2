mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fontgen::extractors::{perceptual_stand_in, FeatureExtractor, VggFeatures};
use fontgen::metrics::{evaluate, write_grid, MetricReport, Split};
use fontgen::selector::{sample_pools, PreferenceTable};
use fontgen::store::{codepoint_stem, load_dataset, CatalogSpec, Dataset, GlyphImage};
use fontgen::strokes::smc_score;
use fontgen::trainer::{generate, load_generator, Extractors, GenerateOptions, Trainer};
use fontgen::{Error, Result};

use config::{parse_switch, RunConfig};

const CACHE_ENV: &str = "DRGFONT_CACHE";

#[derive(Parser)]
#[command(name = "fontgen", version, about = "Few-shot glyph generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Preference tables.
    Prefs {
        #[command(subcommand)]
        cmd: PrefsCmd,
    },
    /// Train a generator and discriminator.
    Train(TrainArgs),
    /// Render characters in the style of a few reference glyphs.
    Generate(GenerateArgs),
    /// Score a checkpoint on the seen or unseen split.
    Evaluate(EvaluateArgs),
    /// Stroke-matching similarity.
    Smc {
        #[command(subcommand)]
        cmd: SmcCmd,
    },
}

#[derive(Subcommand)]
enum PrefsCmd {
    /// Build the preference table of a dataset.
    Build(PrefsArgs),
}

#[derive(Subcommand)]
enum SmcCmd {
    /// Print the similarity of two glyph images.
    Score {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root: `<root>/<font>/<hex>.png`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split manifest: `<font> <seen|unseen>` per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    content_font: Option<String>,
}

#[derive(Args)]
struct PrefsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: u64,
    /// Output file; defaults to the cache directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = fontgen::selector::DEFAULT_POOL_SIZE)]
    pool_size: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: u64,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint and log directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    prefs: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    rs_train: Option<String>,
    #[arg(long)]
    rs_test: Option<String>,
    #[arg(long)]
    enable_cls: Option<String>,
    #[arg(long)]
    enable_latent: Option<String>,
    #[arg(long)]
    head_dim: Option<String>,
    /// Any configuration key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of reference glyphs named `<hex>.png`.
    #[arg(long)]
    refs: PathBuf,
    /// Characters to render.
    #[arg(long)]
    chars: String,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the checkpoint's reference selection switch.
    #[arg(long)]
    rs_test: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: String,
    /// Preference table whose pools are the reference sets; otherwise pools
    /// are drawn with `--pool-seed`.
    #[arg(long)]
    prefs: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pool_seed: u64,
    #[arg(long, default_value_t = fontgen::selector::DEFAULT_POOL_SIZE)]
    pool_size: usize,
    /// Pretrained VGG19 weights for LPIPS; the stand-in is used otherwise.
    #[arg(long)]
    lpips_weights: Option<PathBuf>,
    /// Report LPIPS as unavailable.
    #[arg(long)]
    no_lpips: bool,
    /// Write a generated-vs-truth PNG grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    rs_test: Option<String>,
}

fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".drgfont-cache"))
}

fn default_prefs_path(seed: u64) -> PathBuf {
    cache_dir().join(format!("prefs-seed{seed}.drgpref"))
}

fn load_data(root: &Path, manifest: Option<&Path>, content_font: Option<&str>) -> Result<Dataset> {
    let mut spec = CatalogSpec {
        content_font: content_font.map(str::to_string),
        ..CatalogSpec::default()
    };
    if let Some(m) = manifest {
        spec = spec.with_manifest(m)?;
    }
    load_dataset(root, &spec)
}

fn require_data(args: &DataArgs) -> Result<Dataset> {
    let root = args.data.as_deref().ok_or_else(|| Error::Config("--data is required".into()))?;
    load_data(root, args.manifest.as_deref(), args.content_font.as_deref())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn build_prefs(dataset: &Dataset, pool_size: usize, threshold: f32, seed: u64, verbose: bool) -> Result<PreferenceTable> {
    let pools = sample_pools(dataset, pool_size, seed)?;
    let mut times = Vec::new();
    let table = PreferenceTable::build_with_progress(dataset, &pools, pool_size, threshold, |font, t| {
        log::debug!("font {font}: {:.3}s", t.as_secs_f64());
        times.push(t.as_secs_f64());
    })?;
    if verbose && !times.is_empty() {
        let total: f64 = times.iter().sum();
        let max = times.iter().copied().fold(0.0, f64::max);
        println!(
            "fonts={} chars={} pool={} total={total:.3}s mean={:.3}s max={max:.3}s",
            table.n_fonts(),
            table.n_chars(),
            table.pool_size(),
            total / times.len() as f64
        );
    }
    Ok(table)
}

fn cmd_prefs(a: PrefsArgs) -> Result<()> {
    let dataset = require_data(&a.data)?;
    let table = build_prefs(&dataset, a.pool_size, a.threshold, a.seed, true)?;
    let out = a.out.unwrap_or_else(|| default_prefs_path(a.seed));
    table.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

struct Tee {
    file: fs::File,
    path: PathBuf,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()?;
        self.file.flush()
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut overrides: Vec<(String, String)> = vec![("seed".into(), a.seed.to_string())];
    let flags = [
        ("epochs", &a.epochs),
        ("batch_size", &a.batch_size),
        ("max_steps", &a.max_steps),
        ("lr", &a.lr),
        ("rs_train", &a.rs_train),
        ("rs_test", &a.rs_test),
        ("enable_cls", &a.enable_cls),
        ("enable_latent", &a.enable_latent),
        ("head_dim", &a.head_dim),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let paths = [
        ("data", a.data.data.as_ref().map(|p| p.display().to_string())),
        ("manifest", a.data.manifest.as_ref().map(|p| p.display().to_string())),
        ("content_font", a.data.content_font.clone()),
        ("out", a.out.as_ref().map(|p| p.display().to_string())),
        ("prefs", a.prefs.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in paths {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    }
    let cfg = RunConfig::resolve(a.config.as_deref(), &overrides)?;
    cfg.train.validate()?;

    let root = cfg.data.as_deref().ok_or_else(|| Error::Config("--data is required".into()))?;
    let dataset = load_data(root, cfg.manifest.as_deref(), cfg.content_font.as_deref())?;
    let prefs_path = cfg.prefs.clone().unwrap_or_else(|| default_prefs_path(cfg.train.seed));
    let table = if prefs_path.exists() {
        PreferenceTable::read(&prefs_path)?
    } else {
        let t = build_prefs(&dataset, cfg.pool_size, cfg.train.threshold, cfg.train.seed, false)?;
        t.write(&prefs_path)?;
        log::info!("built {}", prefs_path.display());
        t
    };
    let out = cfg.out.clone().unwrap_or_else(|| cache_dir().join(format!("run-seed{}", cfg.train.seed)));
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;

    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let t = Trainer::load(ckpt, Extractors::for_config(&cfg.train)?)?;
            if t.cfg != cfg.train {
                log::warn!("resuming with the checkpoint's configuration; command-line settings are ignored");
            }
            t
        }
        None => Trainer::new(
            cfg.train.clone(),
            dataset.catalog.n_fonts(),
            dataset.catalog.n_chars(),
            Extractors::for_config(&cfg.train)?,
        )?,
    };
    let log_path = out.join("train.log");
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut tee = Tee { file, path: log_path };
    let saved = trainer.fit(&dataset, &table, &out, &mut tee)?;
    tee.flush().map_err(|e| io_err(&tee.path, e))?;
    if let Some(last) = saved.last() {
        println!("checkpoint {}", last.display());
    }
    Ok(())
}

fn load_refs(dir: &Path, dataset: &Dataset) -> Result<Vec<GlyphImage>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| io_err(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    let mut refs = Vec::new();
    for p in entries {
        if p.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let Ok(cp) = u32::from_str_radix(stem, 16) else {
            log::warn!("skipping {}: name is not a hex codepoint", p.display());
            continue;
        };
        // References outside the catalog still carry style; they just never
        // coincide with a target.
        let ch = dataset.catalog.char_id(cp).unwrap_or(usize::MAX);
        refs.push(GlyphImage::load(&p)?.with_ids(0, ch));
    }
    if refs.is_empty() {
        return Err(Error::Config(format!("no reference glyphs in {}", dir.display())));
    }
    Ok(refs)
}

fn rs_override(flag: &Option<String>, default: bool) -> Result<bool> {
    flag.as_deref().map_or(Ok(default), |v| parse_switch("rs_test", v))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let dataset = require_data(&a.data)?;
    let (gen, cfg) = load_generator(&a.checkpoint)?;
    let refs = load_refs(&a.refs, &dataset)?;
    let targets: Vec<usize> = a
        .chars
        .chars()
        .map(|c| {
            dataset
                .catalog
                .char_id(c as u32)
                .ok_or_else(|| Error::Config(format!("character {c:?} is not in the dataset")))
        })
        .collect::<Result<_>>()?;
    let opts = GenerateOptions {
        rs: rs_override(&a.rs_test, cfg.rs_test)?,
        threshold: cfg.threshold,
        seed: cfg.seed,
        ..GenerateOptions::default()
    };
    let out = generate(&gen, &dataset, &refs, &targets, opts)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    for (g, &t) in out.iter().zip(&targets) {
        g.save_png(&a.out.join(format!("{}.png", codepoint_stem(dataset.catalog.chars[t]))))?;
    }
    println!("wrote {} glyphs to {}", out.len(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let dataset = require_data(&a.data)?;
    let (gen, cfg) = load_generator(&a.checkpoint)?;
    let pools = match &a.prefs {
        Some(p) => PreferenceTable::read(p)?.pools().to_vec(),
        None => sample_pools(&dataset, a.pool_size, a.pool_seed)?,
    };
    let backbone: Option<Box<dyn FeatureExtractor>> = if a.no_lpips {
        None
    } else {
        match &a.lpips_weights {
            Some(p) => match VggFeatures::load(p) {
                Ok(v) => Some(Box::new(v)),
                Err(Error::Unavailable(msg)) => {
                    log::warn!("LPIPS unavailable: {msg}");
                    None
                }
                Err(e) => return Err(e),
            },
            None => Some(Box::new(perceptual_stand_in()?)),
        }
    };
    let opts = GenerateOptions {
        rs: rs_override(&a.rs_test, cfg.rs_test)?,
        threshold: cfg.threshold,
        seed: cfg.seed,
        ..GenerateOptions::default()
    };
    let (report, pairs) = evaluate(&gen, &dataset, &pools, split, opts, backbone.as_deref())?;
    println!("{report}");
    println!("{}", MetricReport::table(&[report]));
    if let Some(grid) = &a.grid {
        write_grid(grid, &pairs, 13)?;
    }
    Ok(())
}

fn cmd_smc(a: &Path, b: &Path, threshold: f32) -> Result<()> {
    let ga = GlyphImage::load(a)?;
    let gb = GlyphImage::load(b)?;
    println!("{:.6}", smc_score(&ga, &gb, threshold));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Prefs {
            cmd: PrefsCmd::Build(a),
        } => cmd_prefs(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Smc {
            cmd: SmcCmd::Score { a, b, threshold },
        } => cmd_smc(&a, &b, threshold),
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        2
    } else if e.is_numeric() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
