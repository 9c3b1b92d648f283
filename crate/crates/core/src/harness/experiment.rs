use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{join_list, parse_list, KvDoc};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelGraph, Variant};
use crate::record_io::{load_record, DatasetManifest, ManifestEntry, NUM_LEADS};
use crate::tensor::checkpoint;
use crate::trainer::{self, evaluate_split, Example, ExampleSet, TrainConfig, CHECKPOINT_FILE, CONFIG_FILE};

use super::labels::{filter_scored_entries, FilterStats, LabelMap};
use super::metrics::{compute_class_metrics, ClassReport};
use super::report::{build_report, Comparison};
use super::splits::{make_splits, validate_domains, DomainIds, DomainSpec, Role, SplitPlan};

/// File name of the manifest inside a preprocessed cache directory.
pub const CACHE_MANIFEST: &str = "manifest.csv";
pub const DONE_MARKER: &str = "done";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const SPLITS_CSV: &str = "splits.csv";
pub const EXPERIMENT_FILE: &str = "experiment.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Preprocessed cache directory holding `manifest.csv`.
    pub data: PathBuf,
    pub domains: Vec<DomainSpec>,
    pub variants: Vec<Variant>,
    /// `None` uses the bundled map.
    pub label_map: Option<PathBuf>,
    pub omit_unrecognized: bool,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
}

impl ExperimentConfig {
    pub fn new(data: &Path, sources: &[&str], targets: &[&str], model: ModelConfig, trainer: TrainConfig) -> Self {
        let manifest = data.join(CACHE_MANIFEST);
        let spec = |name: &&str, role| DomainSpec { name: name.to_string(), role, manifest: manifest.clone() };
        Self {
            data: data.to_path_buf(),
            domains: sources
                .iter()
                .map(|n| spec(n, Role::Source))
                .chain(targets.iter().map(|n| spec(n, Role::Target)))
                .collect(),
            variants: vec![Variant::MultiScale, Variant::Baseline],
            label_map: None,
            omit_unrecognized: true,
            model,
            trainer,
        }
    }

    pub fn names(&self, role: Role) -> Vec<String> {
        self.domains.iter().filter(|d| d.role == role).map(|d| d.name.clone()).collect()
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        match &self.label_map {
            Some(p) => LabelMap::load(p),
            None => Ok(LabelMap::default_map()),
        }
    }

    /// Sections `[experiment]`, `[domains]` (`name = source|target`),
    /// `[model]` and `[trainer]`.
    pub fn from_kv(mut doc: KvDoc) -> Result<Self> {
        let data: PathBuf = doc
            .take("experiment.data")
            .ok_or_else(|| Error::InvalidConfig("experiment.data is required".into()))?
            .into();
        let domain_keys: Vec<String> = doc.keys().filter(|k| k.starts_with("domains.")).map(String::from).collect();
        let mut domains = Vec::new();
        for k in domain_keys {
            let role = doc.take(&k).expect("listed").parse()?;
            domains.push(DomainSpec {
                name: k["domains.".len()..].to_string(),
                role,
                manifest: data.join(CACHE_MANIFEST),
            });
        }
        let variants = match doc.take("experiment.variants") {
            Some(v) => parse_list(&v)?,
            None => vec![Variant::MultiScale, Variant::Baseline],
        };
        let label_map = doc.take("experiment.label_map").map(PathBuf::from);
        let omit_unrecognized = doc.take_parsed("experiment.omit_unrecognized")?.unwrap_or(true);
        let model = ModelConfig::take_kv(&mut doc)?;
        let trainer = TrainConfig::take_kv(&mut doc)?;
        doc.finish()?;
        validate_domains(&domains)?;
        if variants.is_empty() {
            return Err(Error::InvalidConfig("experiment.variants is empty".into()));
        }
        Ok(Self { data, domains, variants, label_map, omit_unrecognized, model, trainer })
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("experiment.data", self.data.display());
        for d in &self.domains {
            doc.set(&format!("domains.{}", d.name), d.role);
        }
        doc.set("experiment.variants", join_list(&self.variants));
        if let Some(p) = &self.label_map {
            doc.set("experiment.label_map", p.display());
        }
        doc.set("experiment.omit_unrecognized", self.omit_unrecognized);
        self.model.write_kv(&mut doc);
        self.trainer.write_kv(&mut doc);
        doc
    }
}

/// Loaded and split examples for one set of sources and targets.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub plan: SplitPlan,
    pub stats: FilterStats,
    pub train: ExampleSet,
    pub val: ExampleSet,
    pub test: ExampleSet,
    pub targets: Vec<(String, ExampleSet)>,
}

fn by_domain(entries: &[ManifestEntry], names: &[String]) -> Result<Vec<DomainIds>> {
    names
        .iter()
        .map(|name| {
            let ids: Vec<String> = entries.iter().filter(|e| &e.domain == name).map(|e| e.id.clone()).collect();
            Ok(DomainIds { name: name.clone(), ids })
        })
        .collect()
}

/// Loads cached records into an example set in the given id order.
pub fn load_examples(entries: &HashMap<String, ManifestEntry>, ids: &[String], map: &LabelMap) -> Result<ExampleSet> {
    let examples: Vec<Example> = ids
        .par_iter()
        .map(|id| {
            let e = entries
                .get(id)
                .ok_or_else(|| Error::InvalidConfig(format!("record {id} missing from cache manifest")))?;
            let r = load_record(&e.path)?;
            Ok(Example {
                id: e.id.clone(),
                domain: e.domain.clone(),
                signal: r.samples().to_vec(),
                target: map.encode(&e.labels),
            })
        })
        .collect::<Result<_>>()?;
    let len = entries.values().next().map_or(0, |e| e.num_samples);
    ExampleSet::new(NUM_LEADS, len, map.len(), examples)
}

/// Filters, splits and loads the cache for the given domains.
pub fn prepare_data(data: &Path, sources: &[String], targets: &[String], map: &LabelMap, seed: u64) -> Result<PreparedData> {
    let manifest = DatasetManifest::read(&data.join(CACHE_MANIFEST))?;
    let known: BTreeSet<&str> = manifest.entries.iter().map(|e| e.domain.as_str()).collect();
    for name in sources.iter().chain(targets) {
        if !known.contains(name.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "domain {name} not in cache (have {})",
                known.iter().cloned().collect::<Vec<_>>().join(", ")
            )));
        }
    }
    let wanted: BTreeSet<&String> = sources.iter().chain(targets).collect();
    let selected: Vec<ManifestEntry> = manifest.entries.into_iter().filter(|e| wanted.contains(&e.domain)).collect();
    let lens: BTreeSet<usize> = selected.iter().map(|e| e.num_samples).collect();
    if lens.len() > 1 {
        return Err(Error::ShapeMismatch(format!(
            "cached records have differing lengths {lens:?}; preprocess them first"
        )));
    }
    let (kept, stats) = filter_scored_entries(selected, map);
    for (domain, (k, d)) in &stats.per_domain {
        if *d > 0 {
            log::info!("{domain}: dropped {d} records with only unscored labels, kept {k}");
        }
    }

    let plan = make_splits(&by_domain(&kept, sources)?, &by_domain(&kept, targets)?, seed)?;
    let index: HashMap<String, ManifestEntry> = kept.into_iter().map(|e| (e.id.clone(), e)).collect();

    let train = load_examples(&index, &plan.train_ids(), map)?;
    let source_classes: BTreeSet<usize> = class_set(&train);
    let mut target_sets = Vec::new();
    for t in &plan.targets {
        let set = load_examples(&index, &t.ids, map)?;
        let shared = class_set(&set).intersection(&source_classes).count();
        if shared == 0 {
            log::warn!("target {} shares no scored class with the sources; metrics will be all zero", t.name);
        }
        target_sets.push((t.name.clone(), set));
    }
    Ok(PreparedData {
        val: load_examples(&index, &plan.val_ids(), map)?,
        test: load_examples(&index, &plan.test_ids(), map)?,
        train,
        targets: target_sets,
        plan,
        stats,
    })
}

fn class_set(set: &ExampleSet) -> BTreeSet<usize> {
    set.examples
        .iter()
        .flat_map(|e| e.target.iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i))
        .collect()
}

fn concat_sets(sets: &[(String, ExampleSet)]) -> Option<ExampleSet> {
    let first = &sets.first()?.1;
    Some(ExampleSet {
        examples: sets.iter().flat_map(|(_, s)| s.examples.iter().cloned()).collect(),
        ..first.clone()
    })
}

/// Intra report on the source test split, a pooled OOD report and one per
/// target.
pub fn evaluate_model(
    model: &mut ModelGraph<f32>,
    data: &PreparedData,
    map: &LabelMap,
    name: &str,
    batch_size: usize,
) -> Result<Vec<ClassReport>> {
    let threshold = model.config().threshold;
    let mut run = |set: &ExampleSet, tag: &str| -> Result<ClassReport> {
        let ev = evaluate_split(model, set, batch_size, threshold)?;
        compute_class_metrics(&ev.predictions, &set.truths(), map, name, tag)
    };
    let mut out = vec![run(&data.test, "intra")?];
    if let Some(pooled) = concat_sets(&data.targets) {
        out.push(run(&pooled, "ood")?);
    }
    for (t, set) in &data.targets {
        out.push(run(set, &format!("ood:{t}"))?);
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains one variant into `dir`, or reloads it when a previous run
/// finished there.
pub fn train_variant(
    data: &PreparedData,
    map: &LabelMap,
    model_cfg: &ModelConfig,
    trainer_cfg: &TrainConfig,
    run_info: &KvDoc,
    dir: &Path,
) -> Result<ModelGraph<f32>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut model = ModelGraph::<f32>::build(model_cfg, trainer_cfg.seed)?;
    let mut doc = run_info.clone();
    model_cfg.write_kv(&mut doc);
    trainer_cfg.write_kv(&mut doc);
    let config_text = doc.render();

    let marker = dir.join(DONE_MARKER);
    if marker.exists() {
        let previous = fs::read_to_string(dir.join(CONFIG_FILE)).unwrap_or_default();
        if previous == config_text {
            log::info!("{}: already trained, reloading {CHECKPOINT_FILE}", dir.display());
            checkpoint::load(model.params_mut(), &dir.join(CHECKPOINT_FILE))?;
            return Ok(model);
        }
        log::warn!("{}: config changed since the last run, retraining", dir.display());
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    write(&dir.join(CONFIG_FILE), &config_text)?;
    trainer::write_labels(dir, &map.codes())?;
    write(&dir.join(SPLITS_CSV), &data.plan.to_csv())?;
    let state = trainer::train(&mut model, &data.train, &data.val, trainer_cfg, Some(dir))?;
    write(&marker, &format!("best_epoch={}\n", state.best_epoch))?;
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<ClassReport>,
    pub comparison: Comparison,
    pub report_csv: PathBuf,
}

/// Filter, split, train each variant, evaluate intra and OOD, and write
/// `report.csv` / `report.txt` under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    validate_domains(&cfg.domains)?;
    let map = cfg.label_map()?;
    // the head width always follows the label map
    let mut cfg = cfg.clone();
    cfg.model.num_classes = map.len();
    cfg.model.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(EXPERIMENT_FILE), &cfg.to_kv().render())?;

    let sources = cfg.names(Role::Source);
    let targets = cfg.names(Role::Target);
    let data = prepare_data(&cfg.data, &sources, &targets, &map, cfg.trainer.seed)?;
    log::info!(
        "split: train {}, val {}, test {}; targets {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.targets.iter().map(|(n, s)| format!("{n}={}", s.len())).collect::<Vec<_>>().join(" ")
    );

    let mut run_info = KvDoc::new();
    run_info.set("run.data", cfg.data.display());
    run_info.set("run.sources", sources.join(","));
    run_info.set("run.targets", targets.join(","));

    let mut reports = Vec::new();
    for &variant in &cfg.variants {
        let model_cfg = cfg.model.with_variant(variant);
        let dir = out.join(variant.to_string());
        let mut model = train_variant(&data, &map, &model_cfg, &cfg.trainer, &run_info, &dir)?;
        let r = evaluate_model(&mut model, &data, &map, &variant.to_string(), cfg.trainer.batch_size)?;
        let cmp = build_report(&r, false)?;
        write(&dir.join(super::EVAL_CSV), &cmp.to_csv())?;
        reports.extend(r);
    }
    let comparison = build_report(&reports, cfg.omit_unrecognized)?;
    let report_csv = out.join(REPORT_CSV);
    write(&report_csv, &comparison.to_csv())?;
    write(&out.join(REPORT_TXT), &comparison.to_text())?;
    Ok(ExperimentOutcome { reports, comparison, report_csv })
}
