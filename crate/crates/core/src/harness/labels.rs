use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::record_io::{EcgRecord, ManifestEntry};

const DEFAULT_MAP: &str = include_str!("../../data/dx_mapping_scored.csv");
const COLUMNS: [&str; 4] = ["Dx", "SNOMEDCTCode", "Abbreviation", "Equivalent"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredClass {
    pub name: String,
    pub code: String,
    pub abbreviation: String,
    /// Codes folded into this class on load.
    pub equivalents: Vec<String>,
}

/// Ordered scored classes. Position in the list is the model output index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    classes: Vec<ScoredClass>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    pub fn new(classes: Vec<ScoredClass>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidConfig("label map has no classes".into()));
        }
        let mut index = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            for code in std::iter::once(&c.code).chain(&c.equivalents) {
                if index.insert(code.clone(), i).is_some() {
                    return Err(Error::InvalidConfig(format!("code {code} listed twice in label map")));
                }
            }
        }
        Ok(Self { classes, index })
    }

    /// The bundled 24-class map.
    pub fn default_map() -> Self {
        Self::parse_csv(DEFAULT_MAP).expect("bundled label map is valid")
    }

    /// Header `Dx,SNOMEDCTCode,Abbreviation[,Equivalent]`; equivalents are
    /// separated by `;` or spaces.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty label map".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        if header.len() < 3 || header[..3] != COLUMNS[..3] || (header.len() == 4 && header[3] != COLUMNS[3]) || header.len() > 4 {
            return Err(Error::InvalidConfig(format!("label map header must be {}", COLUMNS.join(","))));
        }
        let mut classes = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != header.len() || f[1].is_empty() {
                return Err(Error::InvalidConfig(format!("bad label map row {line:?}")));
            }
            classes.push(ScoredClass {
                name: f[0].to_string(),
                code: f[1].to_string(),
                abbreviation: f[2].to_string(),
                equivalents: f
                    .get(3)
                    .map(|e| e.split([';', ' ']).filter(|s| !s.is_empty()).map(String::from).collect())
                    .unwrap_or_default(),
            });
        }
        Self::new(classes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", COLUMNS.join(","));
        for c in &self.classes {
            s.push_str(&format!("{},{},{},{}\n", c.name, c.code, c.abbreviation, c.equivalents.join(";")));
        }
        s
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ScoredClass] {
        &self.classes
    }

    pub fn codes(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.code.clone()).collect()
    }

    /// Output index of a code or one of its equivalents.
    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    /// Scored canonical codes of a label list, deduplicated, in first-seen
    /// order.
    pub fn scored(&self, labels: &[String]) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in labels {
            if let Some(i) = self.index_of(l) {
                let code = &self.classes[i].code;
                if !out.contains(code) {
                    out.push(code.clone());
                }
            }
        }
        out
    }

    /// Multi-hot target row.
    pub fn encode(&self, labels: &[String]) -> Vec<f32> {
        let mut row = vec![0.0; self.len()];
        for l in labels {
            if let Some(i) = self.index_of(l) {
                row[i] = 1.0;
            }
        }
        row
    }

    /// Checks that a run's stored code list matches this map.
    pub fn check_codes(&self, codes: &[String]) -> Result<()> {
        if self.codes() != codes {
            return Err(Error::LabelMapMismatch(format!(
                "expected {} classes {:?}..., found {} classes",
                self.len(),
                self.codes().first(),
                codes.len()
            )));
        }
        Ok(())
    }
}

/// Records removed per domain by scored-label filtering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterStats {
    /// domain -> (kept, dropped)
    pub per_domain: BTreeMap<String, (usize, usize)>,
}

impl FilterStats {
    fn note(&mut self, domain: &str, kept: bool) {
        let e = self.per_domain.entry(domain.to_string()).or_default();
        if kept {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }

    pub fn dropped(&self) -> usize {
        self.per_domain.values().map(|v| v.1).sum()
    }
}

/// Keeps only scored labels, rewritten to canonical codes, and drops
/// records left with none.
pub fn filter_scored(records: Vec<EcgRecord>, map: &LabelMap) -> (Vec<EcgRecord>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let labels = map.scored(&r.labels);
        stats.note(&r.domain, !labels.is_empty());
        if !labels.is_empty() {
            out.push(r.with_labels(labels));
        }
    }
    (out, stats)
}

/// [`filter_scored`] on manifest rows, so splits can be planned before any
/// signal is loaded.
pub fn filter_scored_entries(entries: Vec<ManifestEntry>, map: &LabelMap) -> (Vec<ManifestEntry>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut out = Vec::with_capacity(entries.len());
    for mut e in entries {
        let labels = map.scored(&e.labels);
        stats.note(&e.domain, !labels.is_empty());
        if !labels.is_empty() {
            e.labels = labels;
            out.push(e);
        }
    }
    (out, stats)
}
