use std::fmt;
use std::str::FromStr;

use crate::config::{join_list, KvDoc};
use crate::error::{Error, Result};
use crate::tensor::LossKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Softmax,
    Sigmoid,
}

impl HeadMode {
    pub fn loss_kind(self) -> LossKind {
        match self {
            HeadMode::Softmax => LossKind::SoftmaxCe,
            HeadMode::Sigmoid => LossKind::SigmoidBce,
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Softmax => "softmax",
            HeadMode::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(HeadMode::Softmax),
            "sigmoid" => Ok(HeadMode::Sigmoid),
            _ => Err(Error::InvalidConfig(format!("head_mode must be softmax or sigmoid, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Taps on intermediate block activations feed the head.
    MultiScale,
    /// Plain ResNet head: GAP of the last stage only.
    Baseline,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::MultiScale => "multiscale",
            Variant::Baseline => "baseline",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiscale" => Ok(Variant::MultiScale),
            "baseline" => Ok(Variant::Baseline),
            _ => Err(Error::InvalidConfig(format!("variant must be multiscale or baseline, got {s:?}"))),
        }
    }
}

/// Which activation inside a basic block a tap reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TapPoint {
    /// relu(bn1(conv1(x)))
    Conv1,
    /// Block output relu(bn2(conv2(..)) + shortcut).
    Conv2,
}

/// A tap location: global block index (0-based across stages) and point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TapSite {
    pub block: usize,
    pub point: TapPoint,
}

impl fmt::Display for TapSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self.point {
            TapPoint::Conv1 => 1,
            TapPoint::Conv2 => 2,
        };
        write!(f, "b{}.c{}", self.block, c)
    }
}

impl FromStr for TapSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("tap site must look like b3.c1, got {s:?}"));
        let (b, c) = s.split_once('.').ok_or_else(bad)?;
        let block = b.strip_prefix('b').and_then(|b| b.parse().ok()).ok_or_else(bad)?;
        let point = match c {
            "c1" => TapPoint::Conv1,
            "c2" => TapPoint::Conv2,
            _ => return Err(bad()),
        };
        Ok(TapSite { block, point })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_leads: usize,
    pub num_classes: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_channels: usize,
    pub block_kernel: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub tap_channels: usize,
    pub dropout_rate: f64,
    pub head_mode: HeadMode,
    pub threshold: f64,
    /// `None` taps both convolutions of every block.
    pub taps: Option<Vec<TapSite>>,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_leads: 12,
            num_classes: 24,
            stem_kernel: 15,
            stem_stride: 2,
            stem_channels: 64,
            block_kernel: 3,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
            tap_channels: 32,
            dropout_rate: 0.1,
            head_mode: HeadMode::Sigmoid,
            threshold: 0.5,
            taps: None,
            variant: Variant::MultiScale,
        }
    }
}

impl ModelConfig {
    /// Two stages of one block each, 8 and 16 channels, four taps.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            num_classes,
            stem_kernel: 7,
            stem_channels: 8,
            stage_channels: vec![8, 16],
            blocks_per_stage: vec![1, 1],
            tap_channels: 4,
            ..Self::default()
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }

    /// Resolved tap list in forward order.
    pub fn tap_sites(&self) -> Vec<TapSite> {
        if self.variant == Variant::Baseline {
            return Vec::new();
        }
        match &self.taps {
            Some(t) => t.clone(),
            None => (0..self.num_blocks())
                .flat_map(|block| {
                    [TapPoint::Conv1, TapPoint::Conv2]
                        .into_iter()
                        .map(move |point| TapSite { block, point })
                })
                .collect(),
        }
    }

    pub fn head_inputs(&self) -> usize {
        match self.variant {
            Variant::MultiScale => self.tap_sites().len() * self.tap_channels,
            Variant::Baseline => *self.stage_channels.last().unwrap_or(&0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.in_leads == 0 || self.num_classes == 0 {
            return fail("in_leads and num_classes must be positive".into());
        }
        if self.stem_channels == 0 || self.stem_stride == 0 || self.tap_channels == 0 {
            return fail("stem_channels, stem_stride and tap_channels must be positive".into());
        }
        for (name, k) in [("stem_kernel", self.stem_kernel), ("block_kernel", self.block_kernel)] {
            if k == 0 || k % 2 == 0 {
                return fail(format!("{name} must be odd, got {k}"));
            }
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.blocks_per_stage.len() {
            return fail(format!(
                "stage_channels {:?} and blocks_per_stage {:?} must be non-empty and equally long",
                self.stage_channels, self.blocks_per_stage
            ));
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) {
            return fail("stage widths and block counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold must be in [0, 1], got {}", self.threshold));
        }
        if let Some(taps) = &self.taps {
            if self.variant == Variant::MultiScale && taps.is_empty() {
                return fail("multiscale variant needs at least one tap".into());
            }
            let mut seen = taps.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != taps.len() {
                return fail("duplicate tap sites".into());
            }
            if let Some(t) = taps.iter().find(|t| t.block >= self.num_blocks()) {
                return fail(format!("tap {t} refers to a missing block"));
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("model.in_leads", self.in_leads);
        doc.set("model.num_classes", self.num_classes);
        doc.set("model.stem_kernel", self.stem_kernel);
        doc.set("model.stem_stride", self.stem_stride);
        doc.set("model.stem_channels", self.stem_channels);
        doc.set("model.block_kernel", self.block_kernel);
        doc.set("model.stage_channels", join_list(&self.stage_channels));
        doc.set("model.blocks_per_stage", join_list(&self.blocks_per_stage));
        doc.set("model.tap_channels", self.tap_channels);
        doc.set("model.dropout_rate", self.dropout_rate);
        doc.set("model.head_mode", self.head_mode);
        doc.set("model.threshold", self.threshold);
        doc.set(
            "model.taps",
            match &self.taps {
                None => "all".to_string(),
                Some(t) => join_list(t),
            },
        );
        doc.set("model.variant", self.variant);
    }

    /// Consumes `model.*` keys, starting from defaults.
    pub fn take_kv(doc: &mut KvDoc) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = doc.take_parsed(concat!("model.", stringify!($field)))? {
                    c.$field = v;
                }
            };
        }
        take!(in_leads);
        take!(num_classes);
        take!(stem_kernel);
        take!(stem_stride);
        take!(stem_channels);
        take!(block_kernel);
        take!(tap_channels);
        take!(dropout_rate);
        take!(head_mode);
        take!(threshold);
        take!(variant);
        if let Some(v) = doc.take_list("model.stage_channels")? {
            c.stage_channels = v;
        }
        if let Some(v) = doc.take_list("model.blocks_per_stage")? {
            c.blocks_per_stage = v;
        }
        if let Some(t) = doc.take("model.taps") {
            c.taps = if t == "all" {
                None
            } else {
                Some(crate::config::parse_list(&t)?)
            };
        }
        c.validate()?;
        Ok(c)
    }
}
