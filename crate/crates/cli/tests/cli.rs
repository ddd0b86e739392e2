use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fontgen::store::write_dataset;
use fontgen::synth::{fixture_dataset, latin_alphabet, style_family};

const BIN: &str = env!("CARGO_BIN_EXE_fontgen");

/// 4 fonts x 52 letters at 32 px; `font03` is unseen.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    manifest: PathBuf,
    root: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture_dataset(&style_family(4, 6), &latin_alphabet(), 32, 1).unwrap();
        let data = dir.path().join("data");
        write_dataset(&ds, &data).unwrap();
        let manifest = dir.path().join("split.txt");
        ds.catalog.write_split_manifest(&manifest).unwrap();
        Fixture {
            root: dir.path().to_path_buf(),
            _dir: dir,
            data,
            manifest,
        }
    })
}

fn run(args: &[&str], cache: &Path) -> Output {
    Command::new(BIN).args(args).env("DRGFONT_CACHE", cache).output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "resolution=32",
    "--set",
    "base_width=8",
    "--set",
    "head_dim=8",
    "--set",
    "disc_width=8",
    "--batch-size",
    "4",
];

#[test]
fn smc_of_a_file_with_itself_is_one() {
    let f = fixture();
    let g = f.data.join("font01").join("0041.png");
    let o = run(&["smc", "score", s(&g), s(&g)], &f.root);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "1.000000");
    let missing = f.root.join("nope.png");
    assert_eq!(run(&["smc", "score", s(&g), s(&missing)], &f.root).status.code(), Some(2));
}

#[test]
fn prefs_build_is_reproducible_and_uses_the_cache_dir() {
    let f = fixture();
    let cache = tempfile::tempdir().unwrap();
    let args = ["prefs", "build", "--data", s(&f.data), "--manifest", s(&f.manifest), "--seed", "5"];
    let o = run(&args, cache.path());
    assert!(o.status.success(), "{}", text(&o));
    let path = cache.path().join("prefs-seed5.drgpref");
    let first = std::fs::read(&path).unwrap();
    let field = |o: usize| u32::from_le_bytes(first[o..o + 4].try_into().unwrap());
    assert_eq!((field(8), field(12), field(16)), (4, 52, 10));
    std::fs::remove_file(&path).unwrap();
    assert!(run(&args, cache.path()).status.success());
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn prefs_io_failures_exit_2() {
    let f = fixture();
    let cache = tempfile::tempdir().unwrap();
    // Output under a regular file cannot be created.
    let blocker = cache.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = blocker.join("prefs.drgpref");
    let o = run(&["prefs", "build", "--data", s(&f.data), "--seed", "1", "--out", s(&out)], cache.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let empty = tempfile::tempdir().unwrap();
    let o = run(&["prefs", "build", "--data", s(empty.path()), "--seed", "1"], cache.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn seed_is_mandatory() {
    let f = fixture();
    for sub in [&["prefs", "build"][..], &["train"][..]] {
        let mut args = sub.to_vec();
        args.extend(["--data", s(&f.data)]);
        let o = run(&args, &f.root);
        assert_eq!(o.status.code(), Some(1), "{}", text(&o));
        assert!(text(&o).contains("--seed"));
    }
}

#[test]
fn bad_config_values_exit_1() {
    let f = fixture();
    let cache = tempfile::tempdir().unwrap();
    for bad in [&["--rs-train", "maybe"][..], &["--set", "nonsense=1"][..], &["--set", "resolution=16"][..]] {
        let mut args = vec!["train", "--data", s(&f.data), "--seed", "1"];
        args.extend_from_slice(bad);
        let o = run(&args, cache.path());
        assert_eq!(o.status.code(), Some(1), "{bad:?}: {}", text(&o));
    }
}

#[test]
fn train_generate_evaluate_round_trip() {
    let f = fixture();
    let cache = tempfile::tempdir().unwrap();
    let cfg = cache.path().join("run.cfg");
    std::fs::write(&cfg, "max_steps = 2\nrs_train = on\nenable_cls = off\n").unwrap();
    let mut args = vec![
        "train",
        "--data",
        s(&f.data),
        "--manifest",
        s(&f.manifest),
        "--seed",
        "3",
        "--config",
        s(&cfg),
        "--enable-latent",
        "off",
    ];
    args.extend_from_slice(TINY);
    let o = run(&args, cache.path());
    assert!(o.status.success(), "{}", text(&o));
    let run_dir = cache.path().join("run-seed3");
    let ckpt = run_dir.join("step-00000002.safetensors");
    assert!(ckpt.exists(), "{}", text(&o));
    assert!(cache.path().join("prefs-seed3.drgpref").exists());
    let log = std::fs::read_to_string(run_dir.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let last = fontgen::losses::LossReport::parse(log.lines().last().unwrap()).unwrap();
    assert_eq!(last.step, 2);
    assert_eq!(last.get("cls_g"), Some(0.0));
    assert_eq!(last.get("latent"), Some(0.0));

    // Ten references from the unseen font, all 52 letters requested.
    let refs = cache.path().join("refs");
    std::fs::create_dir_all(&refs).unwrap();
    for name in ["0041", "0043", "0048", "004B", "0050", "0061", "0065", "006B", "006E", "0073"] {
        std::fs::copy(f.data.join("font03").join(format!("{name}.png")), refs.join(format!("{name}.png"))).unwrap();
    }
    let out = cache.path().join("gen");
    let letters: String = latin_alphabet().into_iter().collect();
    let o = run(
        &["generate", "--data", s(&f.data), "--checkpoint", s(&ckpt), "--refs", s(&refs), "--chars", &letters, "--out", s(&out)],
        cache.path(),
    );
    assert!(o.status.success(), "{}", text(&o));
    let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 52);
    let g = fontgen::store::GlyphImage::load(&files[0]).unwrap();
    assert_eq!((g.height(), g.width()), (32, 32));

    let grid = cache.path().join("grid.png");
    let o = run(
        &[
            "evaluate",
            "--data",
            s(&f.data),
            "--manifest",
            s(&f.manifest),
            "--checkpoint",
            s(&ckpt),
            "--split",
            "unseen",
            "--grid",
            s(&grid),
            "--rs-test",
            "off",
        ],
        cache.path(),
    );
    assert!(o.status.success(), "{}", text(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let header = stdout.lines().find(|l| l.contains("RMSE")).unwrap();
    let cols: Vec<&str> = header.split('|').map(str::trim).collect();
    assert_eq!(cols, ["split", "L1", "RMSE", "SSIM", "LPIPS"]);
    assert!(stdout.contains("split=unseen"));
    assert!(stdout.contains("count=42"), "{stdout}");
    assert!(grid.exists());

    let o = run(
        &["evaluate", "--data", s(&f.data), "--checkpoint", s(&ckpt), "--split", "sideways"],
        cache.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablation_switches_are_all_flags() {
    let f = fixture();
    let cache = tempfile::tempdir().unwrap();
    for (rs_train, cls, latent, head) in [("on", "off", "off", "8"), ("off", "on", "on", "16")] {
        let out = cache.path().join(format!("run-{rs_train}"));
        let mut args = vec![
            "train",
            "--data",
            s(&f.data),
            "--seed",
            "4",
            "--max-steps",
            "1",
            "--rs-train",
            rs_train,
            "--rs-test",
            rs_train,
            "--enable-cls",
            cls,
            "--enable-latent",
            latent,
            "--out",
            s(&out),
        ];
        args.extend_from_slice(TINY);
        args.extend(["--head-dim", head]);
        let o = run(&args, cache.path());
        assert!(o.status.success(), "{}", text(&o));
        assert!(out.join("step-00000001.safetensors").exists());
    }
}
