//! ECG record ingestion.
//!
//! Two on-disk layouts are understood:
//!
//! * the raw layout: a WFDB-style text header (`<id>.hea`) next to a
//!   little-endian `i16` lead-major sample file, scaled to millivolts with
//!   the per-lead gain and offset from the header;
//! * the portable layout written by [`write_portable`]: the same text
//!   header with format `F32`, and a binary file that starts with the
//!   `EDG1` preamble followed by `f32` millivolt samples.
//!
//! See `docs/format.md` for the byte-level description.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Lead count every record must have after ingestion.
pub const NUM_LEADS: usize = 12;

/// Magic bytes opening a portable binary file.
pub const PORTABLE_MAGIC: &[u8; 4] = b"EDG1";
/// Size of the portable preamble: magic + num_leads + fs + num_samples.
pub const PORTABLE_PREAMBLE_LEN: usize = 16;

const RAW_FORMAT: &str = "16";
const PORTABLE_FORMAT: &str = "F32";

/// Per-lead signal description from a header line.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadSpec {
    pub file: String,
    pub format: String,
    /// ADC units per millivolt.
    pub gain: f64,
    /// ADC value corresponding to 0 mV.
    pub offset: f64,
    pub name: Option<String>,
}

/// Parsed header contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub id: String,
    pub num_leads: usize,
    pub fs: u32,
    pub num_samples: usize,
    pub leads: Vec<LeadSpec>,
    pub labels: Vec<String>,
    pub age: Option<String>,
    pub sex: Option<String>,
    pub domain: Option<String>,
}

/// One 12-lead recording.
///
/// Samples are stored lead-major in millivolts. Records are immutable once
/// constructed; all transformations return new records.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    pub fs: u32,
    pub labels: Vec<String>,
    pub domain: String,
    pub age: Option<String>,
    pub sex: Option<String>,
    num_samples: usize,
    leads: Vec<f32>,
}

impl EcgRecord {
    /// Builds a record from lead-major samples, checking the shape invariants.
    pub fn new(
        id: impl Into<String>,
        fs: u32,
        num_leads: usize,
        num_samples: usize,
        leads: Vec<f32>,
        labels: Vec<String>,
        domain: impl Into<String>,
    ) -> Result<Self> {
        if num_leads != NUM_LEADS {
            return Err(Error::UnsupportedLeadCount {
                found: num_leads,
                expected: NUM_LEADS,
            });
        }
        if fs == 0 {
            return Err(Error::MalformedHeader("sampling rate must be positive".into()));
        }
        if num_samples == 0 {
            return Err(Error::MalformedHeader("record has no samples".into()));
        }
        if leads.len() != num_leads * num_samples {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{} samples, got {}",
                num_leads,
                num_samples,
                leads.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            fs,
            labels: dedup_labels(labels),
            domain: domain.into(),
            age: None,
            sex: None,
            num_samples,
            leads,
        })
    }

    pub fn num_leads(&self) -> usize {
        NUM_LEADS
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn lead(&self, i: usize) -> &[f32] {
        &self.leads[i * self.num_samples..(i + 1) * self.num_samples]
    }

    /// All samples, lead-major.
    pub fn samples(&self) -> &[f32] {
        &self.leads
    }

    /// Replaces the sample matrix, keeping id, labels and provenance.
    pub fn with_samples(&self, fs: u32, num_samples: usize, leads: Vec<f32>) -> Result<Self> {
        let mut out = EcgRecord::new(
            self.id.clone(),
            fs,
            NUM_LEADS,
            num_samples,
            leads,
            self.labels.clone(),
            self.domain.clone(),
        )?;
        out.age = self.age.clone();
        out.sex = self.sex.clone();
        Ok(out)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        self.labels = dedup_labels(labels);
        self
    }
}

fn dedup_labels(labels: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    labels
        .into_iter()
        .filter(|l| seen.insert(l.clone()))
        .collect()
}

fn parse_gain(token: &str) -> Option<(f64, Option<f64>)> {
    // "1000", "1000/mV" or "1000(0)/mV" with an explicit baseline.
    let token = token.split('/').next().unwrap_or(token);
    if let Some(open) = token.find('(') {
        let close = token.find(')')?;
        let gain = token[..open].parse().ok()?;
        let baseline = token[open + 1..close].parse().ok()?;
        Some((gain, Some(baseline)))
    } else {
        Some((token.parse().ok()?, None))
    }
}

/// Parses WFDB-style header text.
///
/// Lead-count policy is not enforced here; see [`read_record`].
pub fn parse_header(text: &str) -> Result<Header> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .peekable();

    let first = loop {
        match lines.next() {
            Some(l) if l.starts_with('#') => continue,
            Some(l) => break l,
            None => return Err(Error::MalformedHeader("empty header".into())),
        }
    };
    let fields: Vec<&str> = first.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(Error::MalformedHeader(format!(
            "record line needs 4 fields, found {}: {first:?}",
            fields.len()
        )));
    }
    let id = fields[0].to_string();
    let num_leads: usize = fields[1]
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("non-numeric lead count {:?}", fields[1])))?;
    // WFDB allows "500/..." counter-frequency suffixes
    let fs_token = fields[2].split('/').next().unwrap_or(fields[2]);
    let fs: u32 = fs_token
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("non-numeric sampling rate {:?}", fields[2])))?;
    if fs == 0 {
        return Err(Error::MalformedHeader("sampling rate must be positive".into()));
    }
    let num_samples: usize = fields[3]
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("non-numeric sample count {:?}", fields[3])))?;

    let mut header = Header {
        id,
        num_leads,
        fs,
        num_samples,
        leads: Vec::with_capacity(num_leads),
        labels: Vec::new(),
        age: None,
        sex: None,
        domain: None,
    };

    for line in lines {
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some((key, value)) = comment.split_once(':') {
                let value = value.trim();
                match key.trim() {
                    "Dx" => {
                        header.labels = dedup_labels(
                            value
                                .split(',')
                                .map(str::trim)
                                .filter(|s| !s.is_empty())
                                .map(String::from)
                                .collect(),
                        );
                    }
                    "Age" => header.age = Some(value.to_string()),
                    "Sex" => header.sex = Some(value.to_string()),
                    "Domain" => header.domain = Some(value.to_string()),
                    _ => {}
                }
            }
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 4 {
            return Err(Error::MalformedHeader(format!("short lead line {line:?}")));
        }
        let (gain, baseline) = parse_gain(f[2])
            .ok_or_else(|| Error::MalformedHeader(format!("bad gain {:?}", f[2])))?;
        if gain == 0.0 || !gain.is_finite() {
            return Err(Error::MalformedHeader(format!("gain must be non-zero: {:?}", f[2])));
        }
        let offset = match baseline {
            Some(b) => b,
            None => f[3]
                .parse()
                .map_err(|_| Error::MalformedHeader(format!("bad offset {:?}", f[3])))?,
        };
        header.leads.push(LeadSpec {
            file: f[0].to_string(),
            format: f[1].to_string(),
            gain,
            offset,
            name: f.get(4..).filter(|r| !r.is_empty()).map(|r| r.join(" ")),
        });
    }

    if header.leads.len() != header.num_leads {
        return Err(Error::MalformedHeader(format!(
            "header declares {} leads but lists {}",
            header.num_leads,
            header.leads.len()
        )));
    }
    Ok(header)
}

/// Renders a header in the same syntax [`parse_header`] accepts.
pub fn render_header(h: &Header) -> String {
    let mut out = format!("{} {} {} {}\n", h.id, h.num_leads, h.fs, h.num_samples);
    for lead in &h.leads {
        let _ = write!(out, "{} {} {} {}", lead.file, lead.format, lead.gain, lead.offset);
        if let Some(name) = &lead.name {
            let _ = write!(out, " {name}");
        }
        out.push('\n');
    }
    if let Some(age) = &h.age {
        let _ = writeln!(out, "#Age: {age}");
    }
    if let Some(sex) = &h.sex {
        let _ = writeln!(out, "#Sex: {sex}");
    }
    let _ = writeln!(out, "#Dx: {}", h.labels.join(","));
    if let Some(domain) = &h.domain {
        let _ = writeln!(out, "#Domain: {domain}");
    }
    out
}

fn read_header_file(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_header(&text)
}

fn check_lead_count(h: &Header) -> Result<()> {
    if h.num_leads != NUM_LEADS {
        return Err(Error::UnsupportedLeadCount {
            found: h.num_leads,
            expected: NUM_LEADS,
        });
    }
    Ok(())
}

fn file_len(path: &Path) -> Result<u64> {
    Ok(fs::metadata(path).map_err(|e| Error::io(path, e))?.len())
}

fn assemble(h: &Header, leads: Vec<f32>) -> Result<EcgRecord> {
    let mut rec = EcgRecord::new(
        h.id.clone(),
        h.fs,
        h.num_leads,
        h.num_samples,
        leads,
        h.labels.clone(),
        h.domain.clone().unwrap_or_default(),
    )?;
    rec.age = h.age.clone();
    rec.sex = h.sex.clone();
    Ok(rec)
}

/// Reads a raw record: `i16` little-endian, lead-major, scaled to mV by
/// `(raw - offset) / gain`.
pub fn read_record(header_path: &Path, signal_path: &Path) -> Result<EcgRecord> {
    let h = read_header_file(header_path)?;
    read_raw_with_header(&h, signal_path)
}

fn read_raw_with_header(h: &Header, signal_path: &Path) -> Result<EcgRecord> {
    check_lead_count(h)?;
    let expected = (h.num_leads * h.num_samples * 2) as u64;
    let bytes = fs::read(signal_path).map_err(|e| Error::io(signal_path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: signal_path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut leads = Vec::with_capacity(h.num_leads * h.num_samples);
    for (lead, chunk) in h.leads.iter().zip(bytes.chunks_exact(h.num_samples * 2)) {
        leads.extend(chunk.chunks_exact(2).map(|b| {
            let raw = i16::from_le_bytes([b[0], b[1]]) as f64;
            ((raw - lead.offset) / lead.gain) as f32
        }));
    }
    assemble(h, leads)
}

/// Writes `<id>.hea` and `<id>.edg` into `dir`, returning both paths.
pub fn write_portable(record: &EcgRecord, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let header_path = dir.join(format!("{}.hea", record.id));
    let data_name = format!("{}.edg", record.id);
    let data_path = dir.join(&data_name);

    let header = Header {
        id: record.id.clone(),
        num_leads: NUM_LEADS,
        fs: record.fs,
        num_samples: record.num_samples,
        leads: (0..NUM_LEADS)
            .map(|i| LeadSpec {
                file: data_name.clone(),
                format: PORTABLE_FORMAT.into(),
                gain: 1.0,
                offset: 0.0,
                name: Some(LEAD_NAMES[i].into()),
            })
            .collect(),
        labels: record.labels.clone(),
        age: record.age.clone(),
        sex: record.sex.clone(),
        domain: Some(record.domain.clone()).filter(|d| !d.is_empty()),
    };

    let mut bytes = Vec::with_capacity(PORTABLE_PREAMBLE_LEN + record.leads.len() * 4);
    bytes.extend_from_slice(PORTABLE_MAGIC);
    bytes.extend_from_slice(&(NUM_LEADS as u32).to_le_bytes());
    bytes.extend_from_slice(&record.fs.to_le_bytes());
    bytes.extend_from_slice(&(record.num_samples as u32).to_le_bytes());
    for v in &record.leads {
        bytes.extend_from_slice(&v.to_le_bytes());
    }

    fs::write(&header_path, render_header(&header)).map_err(|e| Error::io(&header_path, e))?;
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    Ok((header_path, data_path))
}

/// Reads a record written by [`write_portable`].
pub fn read_portable(header_path: &Path, data_path: &Path) -> Result<EcgRecord> {
    let h = read_header_file(header_path)?;
    read_portable_with_header(&h, data_path)
}

fn read_portable_with_header(h: &Header, data_path: &Path) -> Result<EcgRecord> {
    check_lead_count(h)?;
    let expected = (PORTABLE_PREAMBLE_LEN + h.num_leads * h.num_samples * 4) as u64;
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: data_path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..4] != PORTABLE_MAGIC {
        return Err(Error::BadFormat(format!("{} lacks EDG1 magic", data_path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != h.num_leads || word(8) != h.fs as usize || word(12) != h.num_samples {
        return Err(Error::BadFormat(format!(
            "{} preamble disagrees with header",
            data_path.display()
        )));
    }
    let leads = bytes[PORTABLE_PREAMBLE_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    assemble(h, leads)
}

fn signal_path_for(header_path: &Path, h: &Header) -> Result<PathBuf> {
    let lead = h
        .leads
        .first()
        .ok_or_else(|| Error::MalformedHeader("header lists no leads".into()))?;
    if h.leads.iter().any(|l| l.file != lead.file || l.format != lead.format) {
        return Err(Error::MalformedHeader(
            "all leads must share one signal file and format".into(),
        ));
    }
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    Ok(dir.join(&lead.file))
}

/// Loads either layout, resolving the signal file from the header.
pub fn load_record(header_path: &Path) -> Result<EcgRecord> {
    let h = read_header_file(header_path)?;
    let signal = signal_path_for(header_path, &h)?;
    match h.leads[0].format.as_str() {
        PORTABLE_FORMAT => read_portable_with_header(&h, &signal),
        RAW_FORMAT => read_raw_with_header(&h, &signal),
        other => Err(Error::MalformedHeader(format!("unsupported signal format {other:?}"))),
    }
}

/// Checks a header/signal pair without decoding the samples.
fn probe_pair(header_path: &Path) -> Result<Header> {
    let h = read_header_file(header_path)?;
    check_lead_count(&h)?;
    let signal = signal_path_for(header_path, &h)?;
    let expected = match h.leads[0].format.as_str() {
        PORTABLE_FORMAT => (PORTABLE_PREAMBLE_LEN + h.num_leads * h.num_samples * 4) as u64,
        RAW_FORMAT => (h.num_leads * h.num_samples * 2) as u64,
        other => {
            return Err(Error::MalformedHeader(format!("unsupported signal format {other:?}")))
        }
    };
    let found = file_len(&signal)?;
    if found != expected {
        return Err(Error::SizeMismatch {
            path: signal,
            expected,
            found,
        });
    }
    Ok(h)
}

pub const LEAD_NAMES: [&str; NUM_LEADS] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Path of the header file.
    pub path: PathBuf,
    pub domain: String,
    pub labels: Vec<String>,
    pub fs: u32,
    pub num_samples: usize,
}

/// An enumerated dataset, ordered by record id.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub created_at: String,
}

/// A file that [`scan_dataset`] could not ingest.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

const MANIFEST_COLUMNS: &str = "id,path,domain,labels,fs,num_samples";

impl DatasetManifest {
    pub fn new(mut entries: Vec<ManifestEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidConfig(format!("duplicate record id {}", w[0].id)));
        }
        Ok(Self {
            entries,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV rendering; paths under `base` are written relative to it.
    pub fn to_csv(&self, base: Option<&Path>) -> String {
        let mut out = format!("# created_at={}\n{MANIFEST_COLUMNS}\n", self.created_at);
        for e in &self.entries {
            let path = base
                .and_then(|b| e.path.strip_prefix(b).ok())
                .unwrap_or(&e.path);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.id,
                path.display(),
                e.domain,
                e.labels.join(";"),
                e.fs,
                e.num_samples
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent();
        fs::write(path, self.to_csv(base)).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; relative entry paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut created_at = String::new();
        let mut entries = Vec::new();
        let mut seen_columns = false;
        for line in text.lines() {
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("created_at=") {
                    created_at = v.to_string();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !seen_columns {
                if line.trim() != MANIFEST_COLUMNS {
                    return Err(Error::BadFormat(format!("unexpected manifest columns {line:?}")));
                }
                seen_columns = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::BadFormat(format!("bad manifest row {line:?}")));
            }
            let p = PathBuf::from(f[1]);
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                path: if p.is_absolute() { p } else { base.join(p) },
                domain: f[2].to_string(),
                labels: f[3]
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect(),
                fs: f[4]
                    .parse()
                    .map_err(|_| Error::BadFormat(format!("bad fs in {line:?}")))?,
                num_samples: f[5]
                    .parse()
                    .map_err(|_| Error::BadFormat(format!("bad sample count in {line:?}")))?,
            });
        }
        let mut m = DatasetManifest::new(entries)?;
        m.created_at = created_at;
        Ok(m)
    }

    /// Loads every record, tagging each with its manifest domain.
    pub fn load_records(&self) -> Result<Vec<EcgRecord>> {
        self.entries
            .par_iter()
            .map(|e| {
                let mut r = load_record(&e.path)?;
                r.domain = e.domain.clone();
                Ok(r)
            })
            .collect()
    }
}

fn collect_headers(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_headers(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "hea") {
            out.push(path);
        }
    }
    Ok(())
}

/// Enumerates every valid header/signal pair under `dir`.
///
/// Unreadable pairs are returned in the skip report rather than dropped.
pub fn scan_dataset(dir: &Path, domain: &str) -> Result<(DatasetManifest, Vec<SkippedFile>)> {
    let mut headers = Vec::new();
    collect_headers(dir, &mut headers)?;
    headers.sort();

    let probed: Vec<(PathBuf, Result<Header>)> = headers
        .into_par_iter()
        .map(|p| {
            let r = probe_pair(&p);
            (p, r)
        })
        .collect();

    let mut skipped = Vec::new();
    let mut by_id = std::collections::BTreeMap::new();
    for (path, res) in probed {
        match res {
            Ok(h) => {
                if by_id.contains_key(&h.id) {
                    skipped.push(SkippedFile {
                        path,
                        reason: format!("duplicate record id {}", h.id),
                    });
                    continue;
                }
                by_id.insert(
                    h.id.clone(),
                    ManifestEntry {
                        id: h.id,
                        path,
                        domain: domain.to_string(),
                        labels: h.labels,
                        fs: h.fs,
                        num_samples: h.num_samples,
                    },
                );
            }
            Err(e) => skipped.push(SkippedFile {
                path,
                reason: e.to_string(),
            }),
        }
    }
    if by_id.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok((DatasetManifest::new(by_id.into_values().collect())?, skipped))
}
