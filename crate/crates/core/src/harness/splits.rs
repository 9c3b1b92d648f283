use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::tensor::RngStreams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Source => "source",
            Role::Target => "target",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Role::Source),
            "target" => Ok(Role::Target),
            _ => Err(Error::InvalidConfig(format!("domain role must be source or target, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSpec {
    pub name: String,
    pub role: Role,
    pub manifest: PathBuf,
}

/// Checks name uniqueness and that both roles are present.
pub fn validate_domains(domains: &[DomainSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for d in domains {
        if !seen.insert(d.name.as_str()) {
            return Err(Error::InvalidConfig(format!("domain {} listed twice", d.name)));
        }
    }
    for role in [Role::Source, Role::Target] {
        if !domains.iter().any(|d| d.role == role) {
            return Err(Error::InvalidConfig(format!("experiment needs at least one {role} domain")));
        }
    }
    Ok(())
}

/// Record ids of one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainIds {
    pub name: String,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSplit {
    pub domain: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub seed: u64,
    pub sources: Vec<SourceSplit>,
    pub targets: Vec<DomainIds>,
}

/// `(train, val, test)` sizes: val = round(0.1 n), test = round(0.2 n),
/// train takes the rest.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = (0.1 * n as f64).round() as usize;
    let test = (0.2 * n as f64).round() as usize;
    (n - val - test, val, test)
}

/// Shuffles each source with its own stream and cuts it 70/10/20.
pub fn make_splits(sources: &[DomainIds], targets: &[DomainIds], seed: u64) -> Result<SplitPlan> {
    let streams = RngStreams::new(seed);
    let mut source_ids = HashSet::new();
    let mut out = Vec::new();
    for s in sources {
        if s.ids.is_empty() {
            return Err(Error::EmptySource(s.name.clone()));
        }
        let mut ids = s.ids.clone();
        ids.sort();
        ids.shuffle(&mut streams.stream(&format!("split/{}", s.name), 0));
        let (tr, va, _) = split_counts(ids.len());
        let test = ids.split_off(tr + va);
        let val = ids.split_off(tr);
        source_ids.extend(ids.iter().chain(&val).chain(&test).cloned());
        out.push(SourceSplit { domain: s.name.clone(), train: ids, val, test });
    }
    for t in targets {
        if let Some(id) = t.ids.iter().find(|id| source_ids.contains(*id)) {
            return Err(Error::DomainOverlap(format!("record {id} of target {} is also in a source", t.name)));
        }
    }
    Ok(SplitPlan { seed, sources: out, targets: targets.to_vec() })
}

impl SplitPlan {
    pub fn train_ids(&self) -> Vec<String> {
        self.sources.iter().flat_map(|s| s.train.iter().cloned()).collect()
    }

    pub fn val_ids(&self) -> Vec<String> {
        self.sources.iter().flat_map(|s| s.val.iter().cloned()).collect()
    }

    pub fn test_ids(&self) -> Vec<String> {
        self.sources.iter().flat_map(|s| s.test.iter().cloned()).collect()
    }

    /// `id,domain,partition` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,domain,partition\n");
        for src in &self.sources {
            for (part, ids) in [("train", &src.train), ("val", &src.val), ("test", &src.test)] {
                for id in ids {
                    s.push_str(&format!("{id},{},{part}\n", src.domain));
                }
            }
        }
        for t in &self.targets {
            for id in &t.ids {
                s.push_str(&format!("{id},{},target\n", t.name));
            }
        }
        s
    }
}
