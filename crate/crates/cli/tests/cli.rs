use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SUBCOMMANDS: [&str; 8] = ["ingest", "preprocess", "synth", "train", "eval", "report", "gradcheck", "experiment"];

const TINY_CONFIG: &str = "\
[model]
stem_kernel = 7
stem_channels = 8
stage_channels = 8,16
blocks_per_stage = 1,1
tap_channels = 4

[trainer]
epochs = 2
batch_size = 8
lr_decay_epoch = 2
";

fn ecgdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgdg"))
        .args(args)
        .env_remove("ECGDG_SEED")
        .env_remove("ECGDG_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ecgdg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_headers(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| if p.is_dir() { count_headers(&p) } else { (p.extension().is_some_and(|x| x == "hea")) as usize })
        .sum()
}

/// Synthetic raw data plus a preprocessed cache, built once per test binary.
fn fixture() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let raw = tmp.path().join("raw");
        ok(&["synth", "--out", s(&raw), "--domains", "3", "--classes", "3", "--per-domain", "20", "--seed", "1"]);
        let manifests: Vec<String> = (1..=3).map(|d| raw.join(format!("D{d}")).join("manifest.csv").display().to_string()).collect();
        let cache = tmp.path().join("cache");
        ok(&["preprocess", "--manifest", &manifests.join(","), "--out", s(&cache), "--target-fs", "100", "--target-len", "400"]);
        fs::write(tmp.path().join("tiny.txt"), TINY_CONFIG).unwrap();
        tmp
    })
    .path()
}

fn train_run(out: &Path, label_map: &Path, variant: &str) {
    let f = fixture();
    ok(&[
        "train",
        "--config",
        s(&f.join("tiny.txt")),
        "--data",
        s(&f.join("cache")),
        "--sources",
        "D1,D2",
        "--targets",
        "D3",
        "--out",
        s(out),
        "--label-map",
        s(label_map),
        "--variant",
        variant,
        "--deterministic",
    ]);
}

fn eval_run(run: &Path) -> String {
    ok(&["eval", "--run", s(run), "--targets", "D3", "--report", s(&run.with_extension("csv"))])
}

#[test]
fn synth_writes_requested_records() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["synth", "--out", s(tmp.path()), "--domains", "2", "--classes", "3", "--per-domain", "10"]);
    assert!(stdout.contains("20 records"));
    assert_eq!(count_headers(tmp.path()), 20);
    assert!(tmp.path().join("D1/manifest.csv").exists() && tmp.path().join("D2/manifest.csv").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = ecgdg(&["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn every_subcommand_has_help() {
    for sub in SUBCOMMANDS {
        let stdout = ok(&[sub, "--help"]);
        assert!(stdout.contains("Usage: ecgdg"), "{sub}: {stdout}");
    }
}

#[test]
fn gradcheck_passes_and_prints_a_table() {
    let stdout = ok(&["gradcheck", "--samples", "5"]);
    assert!(stdout.lines().count() > 5, "{stdout}");
    assert!(stdout.contains("conv1d"));
}

#[test]
fn seed_comes_from_flag_or_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = |name: &str, env: Option<&str>, flag: Option<&str>| -> Vec<u8> {
        let dir = tmp.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ecgdg"));
        cmd.args(["synth", "--out", s(&dir), "--domains", "1", "--classes", "2", "--per-domain", "2"]).env("RUST_LOG", "warn");
        cmd.env_remove("ECGDG_SEED");
        if let Some(v) = env {
            cmd.env("ECGDG_SEED", v);
        }
        if let Some(v) = flag {
            cmd.args(["--seed", v]);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(dir.join("D1/D1_00001.edg")).unwrap()
    };
    let by_flag = gen("flag", None, Some("5"));
    assert_eq!(gen("env", Some("5"), None), by_flag);
    assert_eq!(gen("both", Some("6"), Some("5")), by_flag);
    assert_ne!(gen("other", Some("6"), None), by_flag);
}

#[test]
fn unknown_config_key_is_rejected() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, format!("{TINY_CONFIG}bogus_key = 1\n")).unwrap();
    let out = ecgdg(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.join("cache")),
        "--sources",
        "D1",
        "--out",
        s(&tmp.path().join("run")),
        "--label-map",
        s(&f.join("raw/labels.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("invalid_config") && stderr.contains("bogus_key"), "{stderr}");
}

#[test]
fn full_pipeline_and_label_map_mismatch() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let labels = f.join("raw/labels.csv");
    let runs: Vec<PathBuf> = ["multiscale", "baseline"].iter().map(|v| tmp.path().join(v)).collect();
    for (run, variant) in runs.iter().zip(["multiscale", "baseline"]) {
        train_run(run, &labels, variant);
        for file in ["config.txt", "labels.txt", "log.csv", "best.ckpt", "splits.csv"] {
            assert!(run.join(file).exists(), "{variant}: missing {file}");
        }
        let table = eval_run(run);
        assert!(table.contains(&format!("{variant} intra")) && table.contains(&format!("{variant} ood:D3")), "{table}");
        assert!(run.with_extension("csv").exists() && run.with_extension("txt").exists());
    }

    let out = tmp.path().join("report");
    ok(&["report", "--runs", &format!("{},{}", s(&runs[0]), s(&runs[1])), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("class,model,eval_tag,precision,recall,f1,support,predicted_positives\n"));
    assert!(csv.contains(",multiscale,intra,") && csv.contains(",baseline,ood,"));
    assert!(out.join("report.txt").exists());

    // a run scored on a two-class map cannot join the comparison
    let text = fs::read_to_string(&labels).unwrap();
    let short = tmp.path().join("short.csv");
    fs::write(&short, text.lines().take(3).collect::<Vec<_>>().join("\n") + "\n").unwrap();
    let other = tmp.path().join("short_run");
    train_run(&other, &short, "baseline");
    eval_run(&other);
    let bad = ecgdg(&["report", "--runs", &format!("{},{}", s(&runs[0]), s(&other)), "--out", s(&tmp.path().join("bad"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("label_map_mismatch"));
}

#[test]
fn flags_override_config_and_are_echoed() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, format!("{TINY_CONFIG}lr_schedule = step\nseed = 9\n")).unwrap();
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.join("cache")),
        "--sources",
        "D1",
        "--out",
        s(&run),
        "--label-map",
        s(&f.join("raw/labels.csv")),
        "--lr-schedule",
        "exponential",
        "--seed",
        "11",
    ]);
    let echoed = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echoed.contains("lr_schedule = exponential") && echoed.contains("seed = 11"), "{echoed}");
}
