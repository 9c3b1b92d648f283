//! The per-record signal chain: resample, fix length, low-pass, notch,
//! normalize.

use std::path::Path;

use rayon::prelude::*;

use crate::config::{join_list, KvDoc};
use crate::error::{Error, Result};
use crate::record_io::{load_record, write_portable, DatasetManifest, EcgRecord, ManifestEntry, NUM_LEADS};

use super::filter::{apply_filter, design_butterworth_highpass, design_butterworth_lowpass, design_notch, IirFilter};
use super::resample::Resampler;

/// Low-pass order applied by [`preprocess_record`].
pub const LOWPASS_ORDER: usize = 3;
/// Order of the high-pass used when `hp_alternative` replaces the notch.
pub const HIGHPASS_ORDER: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub target_fs: u32,
    pub target_len: usize,
    pub lp_cutoff: f64,
    pub notch_freq: f64,
    pub notch_q: f64,
    pub norm_range: (f64, f64),
    /// Replace the notch with a high-pass at `notch_freq`.
    pub hp_alternative: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_fs: 500,
            target_len: 5000,
            lp_cutoff: 20.0,
            notch_freq: 0.01,
            notch_q: 0.707,
            norm_range: (-1.0, 1.0),
            hp_alternative: false,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_len == 0 {
            return Err(Error::InvalidConfig("target_len must be positive".into()));
        }
        if !(self.target_fs as f64 > 2.0 * self.lp_cutoff) {
            return Err(Error::InvalidConfig(format!(
                "target_fs {} must exceed twice the low-pass cutoff {}",
                self.target_fs, self.lp_cutoff
            )));
        }
        let (lo, hi) = self.norm_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidConfig(format!("bad normalization range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Writes `preprocess.*` keys.
    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("preprocess.target_fs", self.target_fs);
        doc.set("preprocess.target_len", self.target_len);
        doc.set("preprocess.lp_cutoff", self.lp_cutoff);
        doc.set("preprocess.notch_freq", self.notch_freq);
        doc.set("preprocess.notch_q", self.notch_q);
        doc.set("preprocess.norm_range", join_list(&[self.norm_range.0, self.norm_range.1]));
        doc.set("preprocess.hp_alternative", self.hp_alternative);
    }

    /// Consumes `preprocess.*` keys over the defaults.
    pub fn take_kv(doc: &mut KvDoc) -> Result<Self> {
        let mut c = Self::default();
        if let Some(v) = doc.take_parsed("preprocess.target_fs")? {
            c.target_fs = v;
        }
        if let Some(v) = doc.take_parsed("preprocess.target_len")? {
            c.target_len = v;
        }
        if let Some(v) = doc.take_parsed("preprocess.lp_cutoff")? {
            c.lp_cutoff = v;
        }
        if let Some(v) = doc.take_parsed("preprocess.notch_freq")? {
            c.notch_freq = v;
        }
        if let Some(v) = doc.take_parsed("preprocess.notch_q")? {
            c.notch_q = v;
        }
        if let Some(v) = doc.take_list::<f64>("preprocess.norm_range")? {
            match v[..] {
                [lo, hi] => c.norm_range = (lo, hi),
                _ => return Err(Error::InvalidConfig("preprocess.norm_range needs two values".into())),
            }
        }
        if let Some(v) = doc.take_parsed("preprocess.hp_alternative")? {
            c.hp_alternative = v;
        }
        c.validate()?;
        Ok(c)
    }

    /// The two filters applied after resampling, in order.
    pub fn filters(&self) -> Result<[IirFilter; 2]> {
        let fs = self.target_fs as f64;
        let lp = design_butterworth_lowpass(LOWPASS_ORDER, self.lp_cutoff, fs)?;
        let second = if self.hp_alternative {
            design_butterworth_highpass(HIGHPASS_ORDER, self.notch_freq, fs)?
        } else {
            design_notch(self.notch_freq, self.notch_q, fs)?
        };
        Ok([lp, second])
    }
}

/// Keeps the first `target_len` samples or zero-pads at the end.
pub fn fix_length(signal: &[f64], target_len: usize) -> Vec<f64> {
    let mut out: Vec<f64> = signal.iter().take(target_len).copied().collect();
    out.resize(target_len, 0.0);
    out
}

/// Joint min-max mapping of all values into `range`.
///
/// A constant input maps to the range midpoint.
pub fn normalize(values: &[f64], range: (f64, f64)) -> Result<Vec<f64>> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("value {i} is {}", values[i])));
    }
    let (lo, hi) = range;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || max == min {
        return Ok(vec![(lo + hi) / 2.0; values.len()]);
    }
    let span = max - min;
    Ok(values
        .iter()
        .map(|&x| (lo + (x - min) / span * (hi - lo)).clamp(lo, hi))
        .collect())
}

/// Runs the full chain on every lead of `record`.
pub fn preprocess_record(record: &EcgRecord, cfg: &PreprocessConfig) -> Result<EcgRecord> {
    cfg.validate()?;
    if let Some(i) = record.samples().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!(
            "record {} sample {i} is {}",
            record.id,
            record.samples()[i]
        )));
    }
    let resampler = Resampler::new(record.fs, cfg.target_fs)?;
    let [lp, second] = cfg.filters()?;

    let mut all = Vec::with_capacity(NUM_LEADS * cfg.target_len);
    for lead in 0..NUM_LEADS {
        let x: Vec<f64> = record.lead(lead).iter().map(|&v| v as f64).collect();
        let x = resampler.process_prefix(&x, cfg.target_len);
        let x = fix_length(&x, cfg.target_len);
        let x = apply_filter(&lp, &x)?;
        let x = apply_filter(&second, &x)?;
        all.extend(x);
    }
    let normalized = normalize(&all, cfg.norm_range)?;
    record.with_samples(
        cfg.target_fs,
        cfg.target_len,
        normalized.into_iter().map(|v| v as f32).collect(),
    )
}

/// Preprocesses every entry into `out/<domain>/` as portable records and
/// returns the manifest of the written files.
pub fn preprocess_dataset(entries: &[ManifestEntry], cfg: &PreprocessConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let written: Vec<ManifestEntry> = entries
        .par_iter()
        .map(|e| {
            let mut rec = load_record(&e.path)?;
            rec.domain = e.domain.clone();
            let done = preprocess_record(&rec, cfg)?;
            let dir = out.join(&e.domain);
            std::fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
            let (hea, _) = write_portable(&done, &dir)?;
            Ok(ManifestEntry {
                id: done.id.clone(),
                path: hea,
                domain: e.domain.clone(),
                labels: done.labels.clone(),
                fs: done.fs,
                num_samples: done.num_samples(),
            })
        })
        .collect::<Result<_>>()?;
    DatasetManifest::new(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fix_length_cases() {
        let x: Vec<f64> = (0..6000).map(|i| i as f64).collect();
        assert_eq!(fix_length(&x, 5000), x[..5000]);
        let y = fix_length(&x[..4000], 5000);
        assert_eq!(y[..4000], x[..4000]);
        assert!(y[4000..].iter().all(|&v| v == 0.0));
        assert_eq!(fix_length(&x[..5000], 5000), x[..5000]);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[-2.0, 0.0, 2.0], (-1.0, 1.0)).unwrap(), [-1.0, 0.0, 1.0]);
        assert_eq!(normalize(&[0.0, 5.0, 10.0], (-1.0, 1.0)).unwrap(), [-1.0, 0.0, 1.0]);
        assert_eq!(normalize(&[3.0; 4], (-1.0, 1.0)).unwrap(), [0.0; 4]);
        assert!(matches!(normalize(&[1.0, f64::NAN], (-1.0, 1.0)), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn config_validation() {
        assert!(PreprocessConfig::default().validate().is_ok());
        let bad = PreprocessConfig { target_fs: 40, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PreprocessConfig { target_len: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn incart_like() -> EcgRecord {
        let n = 77000;
        let data: Vec<f32> = (0..12 * n)
            .map(|i| {
                let t = (i % n) as f64 / 257.0;
                ((2.0 * std::f64::consts::PI * 1.2 * t).sin() * (1 + i / n) as f64) as f32
            })
            .collect();
        EcgRecord::new("I01", 257, 12, n, data, vec!["164889003".into()], "INCART").unwrap()
    }

    #[test]
    fn incart_like_record_conforms() {
        let out = preprocess_record(&incart_like(), &PreprocessConfig::default()).unwrap();
        assert_eq!(out.fs, 500);
        assert_eq!(out.num_samples(), 5000);
        let s = out.samples();
        assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(s.iter().copied().fold(f32::INFINITY, f32::min), -1.0);
        assert_eq!(s.iter().copied().fold(f32::NEG_INFINITY, f32::max), 1.0);
        assert_eq!(out.labels, vec!["164889003"]);
    }

    #[test]
    fn kv_round_trip() {
        let cfg = PreprocessConfig { target_fs: 250, lp_cutoff: 30.0, hp_alternative: true, ..Default::default() };
        let mut doc = KvDoc::new();
        cfg.write_kv(&mut doc);
        let mut back = KvDoc::parse(&doc.render()).unwrap();
        assert_eq!(PreprocessConfig::take_kv(&mut back).unwrap(), cfg);
        back.finish().unwrap();
    }

    #[test]
    fn nan_record_rejected() {
        let mut data = vec![0.0f32; 12 * 100];
        data[7] = f32::NAN;
        let rec = EcgRecord::new("N", 500, 12, 100, data, vec![], "").unwrap();
        let err = preprocess_record(&rec, &PreprocessConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteInput(_)));
    }

    #[test]
    fn deterministic_bytes() {
        let rec = incart_like();
        let a = preprocess_record(&rec, &PreprocessConfig::default()).unwrap();
        let b = preprocess_record(&rec, &PreprocessConfig::default()).unwrap();
        let bits = |r: &EcgRecord| r.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
