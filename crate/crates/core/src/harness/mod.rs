//! Domain-generalization protocol: scored labels, source/target splits,
//! per-class metrics and intra versus out-of-distribution reports.

mod experiment;
mod labels;
mod metrics;
mod report;
mod splits;

pub use experiment::{
    evaluate_model, load_examples, prepare_data, run_experiment, train_variant, ExperimentConfig, ExperimentOutcome,
    PreparedData, CACHE_MANIFEST, DONE_MARKER, EXPERIMENT_FILE, REPORT_CSV, REPORT_TXT, SPLITS_CSV,
};
pub use labels::{filter_scored, filter_scored_entries, FilterStats, LabelMap, ScoredClass};
pub use metrics::{compute_class_metrics, confusion_counts, f1_score, round2, ClassReport, ClassRow, Counts};
pub use report::{build_report, parse_report_csv, Comparison, F1Delta, REPORT_COLUMNS};
pub use splits::{make_splits, split_counts, validate_domains, DomainIds, DomainSpec, Role, SourceSplit, SplitPlan};

/// Per-run evaluation CSV written next to the checkpoint.
pub const EVAL_CSV: &str = "eval.csv";
