//! Synthetic multi-domain 12-lead data built from Gaussian-bump beats.
//!
//! Each class owns a beat train (rate, PR interval, QRS width, T polarity,
//! P presence, RR irregularity). A record sums the trains of its classes,
//! projects them onto the leads with fixed weights, and adds the domain's
//! baseline wander and noise. Domains differ in sampling rate, amplitude,
//! wander, noise, morphology shifts and class priors.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::{parse_list, KvDoc};
use crate::error::{Error, Result};
use crate::harness::{LabelMap, ScoredClass};
use crate::record_io::{write_portable, DatasetManifest, EcgRecord, ManifestEntry, NUM_LEADS};
use crate::tensor::RngStreams;

pub const SUPPORTED_FS: [u32; 4] = [250, 257, 500, 1000];
pub const LABELS_FILE: &str = "labels.csv";

/// Beat morphology of one synthetic class.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthClass {
    pub code: String,
    pub name: String,
    pub abbreviation: String,
    pub rate_bpm: f64,
    /// P peak to R peak, seconds.
    pub pr_interval: f64,
    /// Standard deviation of the R bump, seconds.
    pub qrs_width: f64,
    pub r_amp: f64,
    pub p_amp: f64,
    /// +1 upright, -1 inverted.
    pub t_polarity: f64,
    /// Relative standard deviation of each RR interval.
    pub rr_irregularity: f64,
}

#[allow(clippy::too_many_arguments)]
fn class(code: &str, name: &str, abbr: &str, rate: f64, pr: f64, qrs: f64, r: f64, p: f64, t: f64, irr: f64) -> SynthClass {
    SynthClass {
        code: code.into(),
        name: name.into(),
        abbreviation: abbr.into(),
        rate_bpm: rate,
        pr_interval: pr,
        qrs_width: qrs,
        r_amp: r,
        p_amp: p,
        t_polarity: t,
        rr_irregularity: irr,
    }
}

/// The eight built-in classes, labelled with scored codes.
pub fn builtin_classes() -> Vec<SynthClass> {
    vec![
        class("426783006", "sinus rhythm", "NSR", 72.0, 0.16, 0.012, 1.0, 0.15, 1.0, 0.02),
        class("427084000", "sinus tachycardia", "STach", 125.0, 0.14, 0.012, 1.0, 0.15, 1.0, 0.02),
        class("426177001", "sinus bradycardia", "SB", 45.0, 0.18, 0.012, 1.0, 0.15, 1.0, 0.02),
        class("713427006", "complete right bundle branch block", "CRBBB", 70.0, 0.16, 0.035, 0.8, 0.15, -0.6, 0.02),
        class("59931005", "t wave inversion", "TInv", 68.0, 0.16, 0.012, 1.0, 0.15, -1.0, 0.02),
        class("164889003", "atrial fibrillation", "AF", 95.0, 0.16, 0.012, 1.0, 0.0, 0.8, 0.2),
        class("251146004", "low qrs voltages", "LQRSV", 74.0, 0.16, 0.012, 0.3, 0.08, 0.3, 0.02),
        class("270492004", "1st degree av block", "IAVB", 66.0, 0.32, 0.012, 1.0, 0.2, 1.0, 0.02),
    ]
}

/// Label map of the first `n` built-in classes.
pub fn synth_label_map(classes: &[SynthClass]) -> Result<LabelMap> {
    LabelMap::new(
        classes
            .iter()
            .map(|c| ScoredClass {
                name: c.name.clone(),
                code: c.code.clone(),
                abbreviation: c.abbreviation.clone(),
                equivalents: Vec::new(),
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDomainSpec {
    pub name: String,
    pub fs: u32,
    pub seconds: f64,
    pub amplitude: f64,
    pub wander_amp: f64,
    pub wander_freq: f64,
    pub noise_std: f64,
    /// Added to every class rate.
    pub rate_offset_bpm: f64,
    /// Multiplies every QRS width.
    pub qrs_width_factor: f64,
    /// Multiplies every T amplitude; negative flips polarity.
    pub t_scale: f64,
    /// Relative per-record jitter of the beat rate.
    pub rate_jitter: f64,
    /// Class sampling weights; empty means uniform.
    pub priors: Vec<f64>,
    /// Probability of a second label.
    pub co_occurrence: f64,
    pub records: usize,
    pub seed: u64,
}

impl SynthDomainSpec {
    pub fn new(name: &str, fs: u32, records: usize, seed: u64) -> Self {
        Self {
            name: name.into(),
            fs,
            seconds: 10.0,
            amplitude: 1.0,
            wander_amp: 0.0,
            wander_freq: 0.3,
            noise_std: 0.0,
            rate_offset_bpm: 0.0,
            qrs_width_factor: 1.0,
            t_scale: 1.0,
            rate_jitter: 0.0,
            priors: Vec::new(),
            co_occurrence: 0.0,
            records,
            seed,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(format!("domain {}: {m}", self.name)));
        if !SUPPORTED_FS.contains(&self.fs) {
            return fail(format!("fs {} not in {SUPPORTED_FS:?}", self.fs));
        }
        if self.records == 0 {
            return fail("record count must be at least 1".into());
        }
        if !(self.seconds > 0.0) || !(self.amplitude > 0.0) || !(self.qrs_width_factor > 0.0) {
            return fail("seconds, amplitude and qrs_width_factor must be positive".into());
        }
        if self.noise_std < 0.0 || self.wander_amp < 0.0 || !(0.0..=1.0).contains(&self.co_occurrence) {
            return fail("noise, wander must be non-negative and co_occurrence in [0, 1]".into());
        }
        if !self.priors.is_empty() {
            if self.priors.len() != num_classes {
                return fail(format!("{} priors for {num_classes} classes", self.priors.len()));
            }
            if self.priors.iter().any(|&p| p < 0.0) || self.priors.iter().sum::<f64>() <= 0.0 {
                return fail("priors must be non-negative with a positive sum".into());
            }
        }
        Ok(())
    }
}

/// Shifted domains for `--domains n`. Odd-numbered domains beyond the
/// first two drift furthest from the first.
pub fn default_domains(n: usize, num_classes: usize, per_domain: usize, seed: u64) -> Vec<SynthDomainSpec> {
    (0..n)
        .map(|d| {
            let fs = [500, 1000, 257, 250][d % 4];
            let mut s = SynthDomainSpec::new(&format!("D{}", d + 1), fs, per_domain, seed.wrapping_add(1_000_003 * d as u64));
            let k = d as f64;
            s.amplitude = [1.0, 1.3, 0.6, 2.0][d % 4];
            s.wander_amp = 0.05 + 0.1 * k;
            s.wander_freq = 0.2 + 0.1 * (d % 3) as f64;
            s.noise_std = 0.02 + 0.03 * k;
            s.rate_offset_bpm = [0.0, 3.0, 14.0, -10.0][d % 4];
            s.qrs_width_factor = [1.0, 1.05, 1.5, 0.8][d % 4];
            s.t_scale = [1.0, 0.9, 0.5, 1.4][d % 4];
            s.rate_jitter = 0.05;
            s.co_occurrence = 0.1;
            // rotate a decaying prior so each domain favours different classes
            s.priors = (0..num_classes).map(|c| 1.0 / (1.0 + ((c + d) % num_classes) as f64 * 0.35)).collect();
            s
        })
        .collect()
}

/// Applies `[<domain>] key = value` overrides.
pub fn apply_overrides(specs: &mut [SynthDomainSpec], mut doc: KvDoc) -> Result<()> {
    for s in specs.iter_mut() {
        let p = |k: &str| format!("{}.{k}", s.name);
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = doc.take_parsed(&p(stringify!($field)))? {
                    s.$field = v;
                }
            };
        }
        take!(fs);
        take!(seconds);
        take!(amplitude);
        take!(wander_amp);
        take!(wander_freq);
        take!(noise_std);
        take!(rate_offset_bpm);
        take!(qrs_width_factor);
        take!(t_scale);
        take!(rate_jitter);
        take!(co_occurrence);
        take!(records);
        take!(seed);
        if let Some(v) = doc.take(&p("priors")) {
            s.priors = parse_list(&v).map_err(|_| Error::InvalidConfig(format!("{}: bad priors {v:?}", s.name)))?;
        }
    }
    doc.finish()
}

fn gauss(t: f64, center: f64, sigma: f64) -> f64 {
    let z = (t - center) / sigma;
    (-0.5 * z * z).exp()
}

/// Fixed lead projection weights, identical for every domain and seed.
pub fn lead_weights() -> [f64; NUM_LEADS] {
    let mut rng = RngStreams::new(0x1EAD).stream("synth/leads", 0);
    std::array::from_fn(|i| {
        let base = rng.gen_range(0.4..1.2);
        // aVR looks at the heart from the opposite side
        if i == 3 {
            -base
        } else {
            base
        }
    })
}

/// Beat train of one class, unit amplitude, at `fs` over `n` samples.
fn beat_train<R: Rng>(c: &SynthClass, spec: &SynthDomainSpec, rate_scale: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let fs = spec.fs as f64;
    let rate = ((c.rate_bpm + spec.rate_offset_bpm) * rate_scale).max(20.0);
    let rr = 60.0 / rate;
    let qrs = c.qrs_width * spec.qrs_width_factor;
    let t_amp = 0.3 * c.t_polarity * spec.t_scale;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let duration = n as f64 / fs;

    let mut beats = Vec::new();
    let mut t = rng.gen_range(0.25..0.75) * rr;
    while t < duration {
        beats.push(t);
        let step = rr * (1.0 + c.rr_irregularity * normal.sample(rng));
        t += step.max(0.3 * rr);
    }

    let mut out = vec![0.0; n];
    for &b in &beats {
        // each bump only touches samples within 5 sigma
        let comps = [
            (b - c.pr_interval, 0.02, c.p_amp),
            (b - 2.5 * qrs, qrs, -0.12 * c.r_amp),
            (b, qrs, c.r_amp),
            (b + 2.5 * qrs, qrs, -0.2 * c.r_amp),
            (b + 0.28 + 0.5 * qrs, 0.05, t_amp),
        ];
        for (center, sigma, amp) in comps {
            if amp == 0.0 {
                continue;
            }
            let lo = (((center - 5.0 * sigma) * fs).floor().max(0.0)) as usize;
            let hi = ((((center + 5.0 * sigma) * fs).ceil()) as usize).min(n);
            for (i, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                *o += amp * gauss(i as f64 / fs, center, sigma);
            }
        }
    }
    out
}

fn sample_index<R: Rng>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0)
}

/// Draws the label set of record `index`.
pub fn sample_labels(spec: &SynthDomainSpec, classes: &[SynthClass], index: usize) -> Vec<String> {
    let mut rng = RngStreams::new(spec.seed).stream("synth/labels", index as u64);
    let mut weights = if spec.priors.is_empty() { vec![1.0; classes.len()] } else { spec.priors.clone() };
    let first = sample_index(&weights, &mut rng).expect("validated priors");
    let mut labels = vec![classes[first].code.clone()];
    if rng.gen_bool(spec.co_occurrence) {
        weights[first] = 0.0;
        if let Some(second) = sample_index(&weights, &mut rng) {
            labels.push(classes[second].code.clone());
        }
    }
    labels
}

/// Record `index` of a domain carrying the given class codes.
pub fn generate_record(spec: &SynthDomainSpec, classes: &[SynthClass], codes: &[String], index: usize) -> Result<EcgRecord> {
    spec.validate(classes.len())?;
    let chosen: Vec<&SynthClass> = codes
        .iter()
        .map(|code| classes.iter().find(|c| &c.code == code).ok_or_else(|| Error::UnknownClass(code.clone())))
        .collect::<Result<_>>()?;

    let streams = RngStreams::new(spec.seed);
    let mut rng = streams.stream("synth/beats", index as u64);
    let n = (spec.seconds * spec.fs as f64).round() as usize;
    let rate_scale = 1.0 + spec.rate_jitter * rng.gen_range(-1.0..1.0);

    let mut heart = vec![0.0; n];
    for c in &chosen {
        for (h, v) in heart.iter_mut().zip(beat_train(c, spec, rate_scale, n, &mut rng)) {
            *h += v;
        }
    }

    let weights = lead_weights();
    let mut noise_rng = streams.stream("synth/noise", index as u64);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let fs = spec.fs as f64;
    let mut leads = Vec::with_capacity(NUM_LEADS * n);
    for w in weights {
        let phase = noise_rng.gen_range(0.0..2.0 * PI);
        for (i, &h) in heart.iter().enumerate() {
            let t = i as f64 / fs;
            let mut v = w * h + spec.wander_amp * (2.0 * PI * spec.wander_freq * t + phase).sin();
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut noise_rng);
            }
            leads.push((spec.amplitude * v) as f32);
        }
    }
    EcgRecord::new(
        format!("{}_{index:05}", spec.name),
        spec.fs,
        NUM_LEADS,
        n,
        leads,
        codes.to_vec(),
        &spec.name,
    )
}

/// Writes every domain under `out/<domain>/` with its own manifest, plus
/// `out/labels.csv`. Returns the manifest paths.
pub fn generate_dataset(specs: &[SynthDomainSpec], classes: &[SynthClass], out: &Path) -> Result<Vec<PathBuf>> {
    if specs.is_empty() {
        return Err(Error::InvalidConfig("no synthetic domains requested".into()));
    }
    for s in specs {
        s.validate(classes.len())?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let labels_path = out.join(LABELS_FILE);
    fs::write(&labels_path, synth_label_map(classes)?.to_csv()).map_err(|e| Error::io(&labels_path, e))?;

    let mut manifests = Vec::new();
    for spec in specs {
        let dir = out.join(&spec.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let entries: Vec<ManifestEntry> = (0..spec.records)
            .into_par_iter()
            .map(|i| {
                let codes = sample_labels(spec, classes, i);
                let r = generate_record(spec, classes, &codes, i)?;
                let (hea, _) = write_portable(&r, &dir)?;
                Ok(ManifestEntry {
                    id: r.id.clone(),
                    path: hea,
                    domain: spec.name.clone(),
                    labels: r.labels.clone(),
                    fs: r.fs,
                    num_samples: r.num_samples(),
                })
            })
            .collect::<Result<_>>()?;
        let path = dir.join("manifest.csv");
        DatasetManifest::new(entries)?.write(&path)?;
        log::info!("{}: {} records at {} Hz", spec.name, spec.records, spec.fs);
        manifests.push(path);
    }
    Ok(manifests)
}
