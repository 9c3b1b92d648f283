//! Epoch loop, learning-rate schedule, early stopping and run artifacts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::KvDoc;
use crate::error::{Error, Result};
use crate::model::{predict, ModelGraph};
use crate::tensor::{adam_step, checkpoint, is_deterministic, set_deterministic, AdamConfig, Mode, RngStreams, Tape, Tensor};

pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const LABELS_FILE: &str = "labels.txt";

/// One preprocessed, labelled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub domain: String,
    /// Lead-major `(leads, len)` samples.
    pub signal: Vec<f32>,
    /// Multi-hot row over the scored classes.
    pub target: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSet {
    pub leads: usize,
    pub len: usize,
    pub classes: usize,
    pub examples: Vec<Example>,
}

impl ExampleSet {
    pub fn new(leads: usize, len: usize, classes: usize, examples: Vec<Example>) -> Result<Self> {
        for e in &examples {
            if e.signal.len() != leads * len || e.target.len() != classes {
                return Err(Error::ShapeMismatch(format!(
                    "example {} has {} samples and {} targets, expected {} and {classes}",
                    e.id,
                    e.signal.len(),
                    e.target.len(),
                    leads * len
                )));
            }
        }
        Ok(Self { leads, len, classes, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Subset in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
            ..*self
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let mut x = Vec::with_capacity(idx.len() * self.leads * self.len);
        let mut t = Vec::with_capacity(idx.len() * self.classes);
        for &i in idx {
            x.extend_from_slice(&self.examples[i].signal);
            t.extend_from_slice(&self.examples[i].target);
        }
        (
            Tensor::new(vec![idx.len(), self.leads, self.len], x).expect("checked at construction"),
            Tensor::new(vec![idx.len(), self.classes], t).expect("checked at construction"),
        )
    }

    pub fn truths(&self) -> Vec<Vec<bool>> {
        self.examples.iter().map(|e| e.target.iter().map(|&v| v > 0.5).collect()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// One multiplication by the decay factor from the decay epoch on.
    Step,
    /// Multiply by the factor once per epoch from the decay epoch on.
    Exponential,
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Step => "step",
            LrSchedule::Exponential => "exponential",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(LrSchedule::Step),
            "exponential" => Ok(LrSchedule::Exponential),
            _ => Err(Error::InvalidConfig(format!("lr_schedule must be step or exponential, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: usize,
    pub lr_schedule: LrSchedule,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_epoch: 24,
            lr_schedule: LrSchedule::Step,
            early_stop_patience: 20,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if self.lr_decay_epoch == 0 || self.lr_decay_epoch > self.epochs {
            return fail(format!(
                "lr_decay_epoch {} must lie in 1..={}",
                self.lr_decay_epoch, self.epochs
            ));
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return fail("lr and lr_decay_factor must be positive".into());
        }
        Ok(())
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("trainer.epochs", self.epochs);
        doc.set("trainer.batch_size", self.batch_size);
        doc.set("trainer.lr", self.lr);
        doc.set("trainer.lr_decay_factor", self.lr_decay_factor);
        doc.set("trainer.lr_decay_epoch", self.lr_decay_epoch);
        doc.set("trainer.lr_schedule", self.lr_schedule);
        doc.set("trainer.early_stop_patience", self.early_stop_patience);
        doc.set("trainer.seed", self.seed);
        doc.set("trainer.deterministic", self.deterministic);
    }

    /// Consumes `trainer.*` keys, starting from defaults.
    pub fn take_kv(doc: &mut KvDoc) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = doc.take_parsed(concat!("trainer.", stringify!($field)))? {
                    c.$field = v;
                }
            };
        }
        take!(epochs);
        take!(batch_size);
        take!(lr);
        take!(lr_decay_factor);
        take!(lr_decay_epoch);
        take!(lr_schedule);
        take!(early_stop_patience);
        take!(seed);
        take!(deterministic);
        c.validate()?;
        Ok(c)
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::OutOfRange(format!("epoch {epoch} outside 1..={}", cfg.epochs)));
    }
    if epoch < cfg.lr_decay_epoch {
        return Ok(cfg.lr);
    }
    Ok(match cfg.lr_schedule {
        LrSchedule::Step => cfg.lr * cfg.lr_decay_factor,
        LrSchedule::Exponential => cfg.lr * cfg.lr_decay_factor.powi((epoch - cfg.lr_decay_epoch + 1) as i32),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Patience counter on a lower-is-better metric with strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = metric < self.best;
        if improved {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        StopDecision { improved, stop: self.since_improvement >= self.patience }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub epoch: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub log: Vec<EpochRow>,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,lr,seconds";

/// `log.csv` text.
pub fn render_log(rows: &[EpochRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{:.3}\n", r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds));
    }
    s
}

/// The log without wall-clock time, which is the part a seeded rerun must
/// reproduce exactly.
pub fn render_log_reproducible(rows: &[EpochRow]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    s
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::DivergedLoss { epoch, step, loss })
    }
}

/// Trains in place and leaves the best-validation parameters in `model`.
///
/// With `out` set, `log.csv` is rewritten after every epoch and
/// `best.ckpt` whenever validation loss improves.
pub fn train(
    model: &mut ModelGraph<f32>,
    train_set: &ExampleSet,
    val_set: &ExampleSet,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<RunState> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit("validation set is empty".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let previous = is_deterministic();
    if cfg.deterministic {
        set_deterministic(true);
    }
    let result = train_inner(model, train_set, val_set, cfg, out);
    set_deterministic(previous);
    result
}

fn train_inner(
    model: &mut ModelGraph<f32>,
    train_set: &ExampleSet,
    val_set: &ExampleSet,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<RunState> {
    let streams = RngStreams::new(cfg.seed);
    let kind = model.config().head_mode.loss_kind();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = model.params().clone();
    let mut state = RunState {
        epoch: 0,
        best_val_loss: f64::INFINITY,
        best_epoch: 0,
        since_improvement: 0,
        log: Vec::new(),
        stopped_early: false,
        checkpoint: None,
    };
    let mut step = 0usize;
    let ckpt_path = out.map(|d| d.join(CHECKPOINT_FILE));

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg)?;
        let adam = AdamConfig::with_lr(lr);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut streams.stream("shuffle", epoch as u64));

        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let (x, t) = train_set.batch(chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut drop_rng = streams.stream("dropout", step as u64);
            let fwd = model.forward(&mut tape, xv, Mode::Train, &mut drop_rng)?;
            let loss = tape.loss(fwd.logits, &t, kind)?;
            let value = tape.value(loss).data()[0] as f64;
            check_finite(value, epoch, step)?;
            total += value * chunk.len() as f64;
            let params = model.params_mut();
            params.zero_grad();
            tape.backward(loss, params)?;
            adam_step(params, &adam)?;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = evaluate_split(model, val_set, cfg.batch_size, 0.5)?.loss;
        check_finite(val_loss, epoch, step)?;

        let decision = stopper.update(epoch, val_loss);
        if decision.improved {
            best = model.params().clone();
            if let Some(p) = &ckpt_path {
                checkpoint::save(model.params(), p)?;
                state.checkpoint = Some(p.clone());
            }
        }
        state.log.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        state.epoch = epoch;
        state.best_val_loss = stopper.best;
        state.best_epoch = stopper.best_epoch;
        state.since_improvement = stopper.since_improvement;
        if let Some(dir) = out {
            let p = dir.join(LOG_FILE);
            fs::write(&p, render_log(&state.log)).map_err(|e| Error::io(&p, e))?;
        }
        log::info!(
            "epoch {epoch}/{}: train_loss {train_loss:.5} val_loss {val_loss:.5} lr {lr}{}",
            cfg.epochs,
            if decision.improved { " *" } else { "" }
        );
        if decision.stop {
            state.stopped_early = true;
            log::info!("early stop after epoch {epoch}; best epoch {}", stopper.best_epoch);
            break;
        }
    }
    model.params_mut().copy_values_from(&best)?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub logits: Tensor<f32>,
    pub predictions: Vec<Vec<bool>>,
    /// Mean per-record loss.
    pub loss: f64,
}

/// Eval-mode pass over a set in record order.
pub fn evaluate_split(model: &mut ModelGraph<f32>, set: &ExampleSet, batch_size: usize, threshold: f64) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::EmptySplit("evaluation set is empty".into()));
    }
    let kind = model.config().head_mode.loss_kind();
    let classes = model.config().num_classes;
    if set.classes != classes {
        return Err(Error::ShapeMismatch(format!("set has {} classes, model {classes}", set.classes)));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut logits = Vec::with_capacity(set.len() * classes);
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, t) = set.batch(chunk);
        let z = model.logits(&x)?;
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let loss = tape.loss(zv, &t, kind)?;
        total += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
        logits.extend_from_slice(z.data());
    }
    let logits = Tensor::new(vec![set.len(), classes], logits)?;
    let predictions = predict(&logits, model.config().head_mode, threshold);
    Ok(Evaluation { logits, predictions, loss: total / set.len() as f64 })
}

/// Micro-averaged F1 over all (record, class) cells.
pub fn micro_f1(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> f64 {
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        for (&a, &b) in p.iter().zip(t) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
    }
    let denom = 2 * tp + fp + fne;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Writes `labels.txt`, one scored code per line.
pub fn write_labels(dir: &Path, codes: &[String]) -> Result<()> {
    let p = dir.join(LABELS_FILE);
    let mut s = codes.join("\n");
    s.push('\n');
    fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

pub fn read_labels(dir: &Path) -> Result<Vec<String>> {
    let p = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Rebuilds a model from a run directory's `config.txt` and `best.ckpt`.
pub fn load_run_model(dir: &Path) -> Result<(ModelGraph<f32>, KvDoc)> {
    let p = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let doc = KvDoc::parse(&text)?;
    let mut model_doc = doc.clone();
    let cfg = crate::model::ModelConfig::take_kv(&mut model_doc)?;
    let mut model = ModelGraph::build(&cfg, 0)?;
    checkpoint::load(model.params_mut(), &dir.join(CHECKPOINT_FILE))?;
    Ok((model, doc))
}
