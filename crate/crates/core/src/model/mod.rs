//! Multi-scale 1-D ResNet-18 and its plain-head baseline.

mod config;
mod graph;

pub use config::{HeadMode, ModelConfig, TapPoint, TapSite, Variant};
pub use graph::{ForwardOutput, ModelGraph, TraceRow};

use crate::tensor::{Scalar, Tensor};

/// Binary per-class decisions from `(N, C)` logits.
///
/// Softmax mode falls back to the argmax class when nothing clears the
/// threshold, so every row has at least one positive.
pub fn predict<T: Scalar>(logits: &Tensor<T>, head_mode: HeadMode, threshold: f64) -> Vec<Vec<bool>> {
    let c = logits.dim(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            match head_mode {
                HeadMode::Sigmoid => row.iter().map(|&z| sigmoid(z) >= threshold).collect(),
                HeadMode::Softmax => {
                    let p = softmax(&row);
                    let mut out: Vec<bool> = p.iter().map(|&q| q >= threshold).collect();
                    if !out.contains(&true) {
                        let best = p
                            .iter()
                            .enumerate()
                            .fold(0, |b, (i, &q)| if q > p[b] { i } else { b });
                        out[best] = true;
                    }
                    out
                }
            }
        })
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
