use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ecgdg::config::{parse_list, KvDoc};
use ecgdg::dsp::{preprocess_dataset, PreprocessConfig};
use ecgdg::gradcheck;
use ecgdg::harness::{
    build_report, evaluate_model, parse_report_csv, prepare_data, run_experiment, train_variant, ExperimentConfig,
    LabelMap, CACHE_MANIFEST, EVAL_CSV, REPORT_CSV, REPORT_TXT,
};
use ecgdg::model::{ModelConfig, ModelGraph, Variant};
use ecgdg::record_io::{scan_dataset, DatasetManifest};
use ecgdg::synth::{apply_overrides, builtin_classes, default_domains, generate_dataset};
use ecgdg::tensor::checkpoint;
use ecgdg::trainer::{read_labels, LrSchedule, TrainConfig, CHECKPOINT_FILE, CONFIG_FILE};
use ecgdg::{Error, Result};

/// Config echo written next to a preprocessed cache.
const PREPROCESS_FILE: &str = "preprocess.txt";

#[derive(Parser)]
#[command(name = "ecgdg", version, about = "Out-of-distribution 12-lead ECG classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a directory of header/signal pairs into a manifest.
    Ingest(IngestArgs),
    /// Resample, filter and normalize records into a cache directory.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic multi-domain dataset.
    Synth(SynthArgs),
    /// Train one model on the source domains of a cache.
    Train(TrainArgs),
    /// Evaluate a trained run on its source test split and target domains.
    Eval(EvalArgs),
    /// Combine evaluated runs into one side-by-side comparison.
    Report(ReportArgs),
    /// Finite-difference check of every differentiable op and the model.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate every variant from one experiment config.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory searched recursively for `.hea` headers.
    #[arg(long)]
    input: PathBuf,
    /// Domain name stamped on every record.
    #[arg(long)]
    domain: String,
    /// Manifest CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input manifest; repeat or comma-separate for several.
    #[arg(long = "manifest", required = true, value_delimiter = ',')]
    manifests: Vec<PathBuf>,
    /// Cache directory; receives `<domain>/` record folders and `manifest.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value file with a `[preprocess]` section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output sampling rate in Hz.
    #[arg(long)]
    target_fs: Option<u32>,
    /// Output length in samples (truncate or zero-pad).
    #[arg(long)]
    target_len: Option<usize>,
    /// Low-pass cutoff in Hz.
    #[arg(long)]
    lp_cutoff: Option<f64>,
    /// Notch center frequency in Hz.
    #[arg(long)]
    notch_freq: Option<f64>,
    /// Notch quality factor.
    #[arg(long)]
    notch_q: Option<f64>,
    /// Use a first-order high-pass at the notch frequency instead of the notch.
    #[arg(long)]
    hp_alternative: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of domains, named D1, D2, ...
    #[arg(long, default_value_t = 4)]
    domains: usize,
    /// Number of classes, taken from the start of the built-in class table.
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Records per domain.
    #[arg(long, default_value_t = 200)]
    per_domain: usize,
    /// Base seed; defaults to ECGDG_SEED or 0.
    #[arg(long, env = "ECGDG_SEED", default_value_t = 0)]
    seed: u64,
    /// key=value file with `[D1]`-style sections overriding domain parameters.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value file with `[model]` and `[trainer]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preprocessed cache directory.
    #[arg(long)]
    data: PathBuf,
    /// Source domains, comma separated.
    #[arg(long, required = true, value_delimiter = ',')]
    sources: Vec<String>,
    /// Target domains held out of training, comma separated.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides trainer.seed; ECGDG_SEED is used when neither is given.
    #[arg(long, env = "ECGDG_SEED")]
    seed: Option<u64>,
    /// Single-threaded bit-reproducible kernels.
    #[arg(long)]
    deterministic: bool,
    /// Scored-class CSV; defaults to the bundled 24-class map.
    #[arg(long)]
    label_map: Option<PathBuf>,
    /// Overrides model.variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Overrides trainer.lr_schedule: `step` or `exponential`.
    #[arg(long)]
    lr_schedule: Option<LrSchedule>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Target domains, comma separated.
    #[arg(long, required = true, value_delimiter = ',')]
    targets: Vec<String>,
    /// Report CSV path; a `.txt` table is written beside it.
    #[arg(long)]
    report: PathBuf,
    /// Drop classes that no evaluation ever predicted.
    #[arg(long)]
    omit_unrecognized: bool,
    /// Decision threshold for sigmoid heads.
    #[arg(long)]
    threshold: Option<f64>,
    /// Cache directory; defaults to the one recorded in the run.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluated run directories, comma separated.
    #[arg(long, required = true, value_delimiter = ',')]
    runs: Vec<PathBuf>,
    /// Output directory for report.csv and report.txt.
    #[arg(long)]
    out: PathBuf,
    /// Drop classes that no evaluation ever predicted.
    #[arg(long)]
    omit_unrecognized: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Sampled coordinates per op.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, env = "ECGDG_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config with `[experiment]`, `[domains]`, `[model]`, `[trainer]`.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides trainer.seed.
    #[arg(long, env = "ECGDG_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("{}: {e}", e.code());
        return ExitCode::from(2);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("ECGDG_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("ECGDG_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest(a) => ingest(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn read_doc(path: &Path) -> Result<KvDoc> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    KvDoc::parse(&text)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let (manifest, skipped) = scan_dataset(&a.input, &a.domain)?;
    for s in &skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    manifest.write(&a.out)?;
    println!("{} records, {} skipped -> {}", manifest.len(), skipped.len(), a.out.display());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let mut doc = match &a.config {
        Some(p) => read_doc(p)?,
        None => KvDoc::new(),
    };
    if let Some(v) = a.target_fs {
        doc.set("preprocess.target_fs", v);
    }
    if let Some(v) = a.target_len {
        doc.set("preprocess.target_len", v);
    }
    if let Some(v) = a.lp_cutoff {
        doc.set("preprocess.lp_cutoff", v);
    }
    if let Some(v) = a.notch_freq {
        doc.set("preprocess.notch_freq", v);
    }
    if let Some(v) = a.notch_q {
        doc.set("preprocess.notch_q", v);
    }
    if a.hp_alternative {
        doc.set("preprocess.hp_alternative", true);
    }
    let cfg = PreprocessConfig::take_kv(&mut doc)?;
    doc.finish()?;

    let mut entries = Vec::new();
    for m in &a.manifests {
        entries.extend(DatasetManifest::read(m)?.entries);
    }
    let cache = preprocess_dataset(&entries, &cfg, &a.out)?;
    cache.write(&a.out.join(CACHE_MANIFEST))?;
    let mut echo = KvDoc::new();
    cfg.write_kv(&mut echo);
    write(&a.out.join(PREPROCESS_FILE), &echo.render())?;
    println!("{} records -> {}", cache.len(), a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let table = builtin_classes();
    if a.classes == 0 || a.classes > table.len() {
        return Err(Error::InvalidConfig(format!("--classes must be in 1..={}", table.len())));
    }
    if a.domains == 0 {
        return Err(Error::InvalidConfig("--domains must be at least 1".into()));
    }
    let classes = &table[..a.classes];
    let mut specs = default_domains(a.domains, a.classes, a.per_domain, a.seed);
    if let Some(p) = &a.spec {
        apply_overrides(&mut specs, read_doc(p)?)?;
    }
    let manifests = generate_dataset(&specs, classes, &a.out)?;
    let total: usize = specs.iter().map(|s| s.records).sum();
    println!("{total} records in {} domains -> {}", manifests.len(), a.out.display());
    Ok(())
}

fn load_map(path: Option<&Path>) -> Result<LabelMap> {
    match path {
        Some(p) => LabelMap::load(p),
        None => Ok(LabelMap::default_map()),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut doc = match &a.config {
        Some(p) => read_doc(p)?,
        None => KvDoc::new(),
    };
    if let Some(s) = a.seed {
        doc.set("trainer.seed", s);
    }
    if a.deterministic {
        doc.set("trainer.deterministic", true);
    }
    if let Some(v) = a.variant {
        doc.set("model.variant", v);
    }
    if let Some(v) = a.lr_schedule {
        doc.set("trainer.lr_schedule", v);
    }
    let map = load_map(a.label_map.as_deref())?;
    doc.set("model.num_classes", map.len());
    let model_cfg = ModelConfig::take_kv(&mut doc)?;
    let trainer_cfg = TrainConfig::take_kv(&mut doc)?;
    doc.finish()?;

    let data = prepare_data(&a.data, &a.sources, &a.targets, &map, trainer_cfg.seed)?;
    let mut run_info = KvDoc::new();
    run_info.set("run.data", a.data.display());
    run_info.set("run.sources", a.sources.join(","));
    run_info.set("run.targets", a.targets.join(","));
    if let Some(p) = &a.label_map {
        run_info.set("run.label_map", p.display());
    }
    train_variant(&data, &map, &model_cfg, &trainer_cfg, &run_info, &a.out)?;
    println!("trained {} on {} records -> {}", model_cfg.variant, data.train.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut doc = read_doc(&a.run.join(CONFIG_FILE))?;
    let data = match a.data {
        Some(d) => d,
        None => doc
            .take("run.data")
            .map(PathBuf::from)
            .ok_or_else(|| Error::InvalidConfig("run has no run.data; pass --data".into()))?,
    };
    let sources: Vec<String> = match doc.get("run.sources") {
        Some(v) => parse_list(v).unwrap_or_else(|e| match e {}),
        None => Vec::new(),
    };
    let map = load_map(doc.get("run.label_map").map(Path::new))?;
    map.check_codes(&read_labels(&a.run)?)?;

    let mut model_cfg = ModelConfig::take_kv(&mut doc)?;
    let trainer_cfg = TrainConfig::take_kv(&mut doc)?;
    if let Some(t) = a.threshold {
        model_cfg.threshold = t;
        model_cfg.validate()?;
    }
    let mut model = ModelGraph::<f32>::build(&model_cfg, 0)?;
    checkpoint::load(model.params_mut(), &a.run.join(CHECKPOINT_FILE))?;

    let prepared = prepare_data(&data, &sources, &a.targets, &map, trainer_cfg.seed)?;
    let name = model_cfg.variant.to_string();
    let reports = evaluate_model(&mut model, &prepared, &map, &name, trainer_cfg.batch_size)?;
    write(&a.run.join(EVAL_CSV), &build_report(&reports, false)?.to_csv())?;
    let cmp = build_report(&reports, a.omit_unrecognized)?;
    write(&a.report, &cmp.to_csv())?;
    write(&a.report.with_extension("txt"), &cmp.to_text())?;
    print!("{}", cmp.to_text());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let first_labels = read_labels(&a.runs[0])?;
    let mut reports = Vec::new();
    for run in &a.runs {
        if read_labels(run)? != first_labels {
            return Err(Error::LabelMapMismatch(format!(
                "{} and {} were trained with different label maps",
                a.runs[0].display(),
                run.display()
            )));
        }
        let p = run.join(EVAL_CSV);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        reports.extend(parse_report_csv(&text)?);
    }
    let cmp = build_report(&reports, a.omit_unrecognized)?;
    write(&a.out.join(REPORT_CSV), &cmp.to_csv())?;
    write(&a.out.join(REPORT_TXT), &cmp.to_text())?;
    print!("{}", cmp.to_text());
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = gradcheck::run_suite(a.samples, a.seed)?;
    print!("{}", gradcheck::render_table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradcheckFailed(failed.join(", ")))
    }
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut doc = read_doc(&a.config)?;
    if let Some(s) = a.seed {
        doc.set("trainer.seed", s);
    }
    if a.deterministic {
        doc.set("trainer.deterministic", true);
    }
    let cfg = ExperimentConfig::from_kv(doc)?;
    let outcome = run_experiment(&cfg, &a.out)?;
    print!("{}", outcome.comparison.to_text());
    Ok(())
}
