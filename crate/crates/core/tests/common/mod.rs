//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Polynomial product, coefficients in ascending powers.
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_pow(p: &[f64], n: usize) -> Vec<f64> {
    (0..n).fold(vec![1.0], |acc, _| poly_mul(&acc, p))
}

/// Normalized Butterworth denominator coefficients a_0..a_n in ascending
/// powers of s, from the product formula a_k = prod cos((m-1)g)/sin(m g).
pub fn butterworth_analog_coeffs(order: usize) -> Vec<f64> {
    let g = PI / (2.0 * order as f64);
    let mut a = vec![1.0];
    for k in 1..=order {
        let prev = a[k - 1];
        a.push(prev * ((k - 1) as f64 * g).cos() / (k as f64 * g).sin());
    }
    a
}

/// Digital Butterworth low-pass by substituting s = K(1-z^-1)/(1+z^-1)
/// into the prewarped analog prototype. Returns (b, a) in powers of z^-1.
pub fn butterworth_lowpass_oracle(order: usize, cutoff: f64, fs: f64) -> (Vec<f64>, Vec<f64>) {
    let k = 2.0 * fs;
    let wc = k * (PI * cutoff / fs).tan();
    let analog = butterworth_analog_coeffs(order);
    let minus = [1.0, -1.0];
    let plus = [1.0, 1.0];
    let mut den = vec![0.0; order + 1];
    for (j, aj) in analog.iter().enumerate() {
        let term = poly_mul(&poly_pow(&minus, j), &poly_pow(&plus, order - j));
        let scale = aj * (k / wc).powi(j as i32);
        for (d, t) in den.iter_mut().zip(term) {
            *d += scale * t;
        }
    }
    let num = poly_pow(&plus, order);
    let a0 = den[0];
    (num.iter().map(|v| v / a0).collect(), den.iter().map(|v| v / a0).collect())
}

/// Audio-EQ-cookbook notch. Returns (b, a) normalized so a[0] = 1.
pub fn rbj_notch(center: f64, q: f64, fs: f64) -> (Vec<f64>, Vec<f64>) {
    let w0 = 2.0 * PI * center / fs;
    let alpha = w0.sin() / (2.0 * q);
    let c = w0.cos();
    let a0 = 1.0 + alpha;
    (
        vec![1.0 / a0, -2.0 * c / a0, 1.0 / a0],
        vec![1.0, -2.0 * c / a0, (1.0 - alpha) / a0],
    )
}

/// |H(e^jw)| evaluated term by term.
pub fn gain(b: &[f64], a: &[f64], freq: f64, fs: f64) -> f64 {
    let w = 2.0 * PI * freq / fs;
    let eval = |c: &[f64]| {
        let (mut re, mut im) = (0.0, 0.0);
        for (k, v) in c.iter().enumerate() {
            re += v * (w * k as f64).cos();
            im -= v * (w * k as f64).sin();
        }
        (re * re + im * im).sqrt()
    };
    eval(b) / eval(a)
}

/// Direct nested-loop 1-D convolution over (N, C, L) data, zero padded.
pub fn naive_conv(
    x: &[f64],
    (n, c, l): (usize, usize, usize),
    w: &[f64],
    (co, k): (usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let lo = (l + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * lo];
    for ni in 0..n {
        for o in 0..co {
            for t in 0..lo {
                let mut acc = bias.get(o).copied().unwrap_or(0.0);
                for ci in 0..c {
                    for kk in 0..k {
                        let j = (t * stride + kk) as isize - pad as isize;
                        if j >= 0 && (j as usize) < l {
                            acc += x[(ni * c + ci) * l + j as usize] * w[(o * c + ci) * k + kk];
                        }
                    }
                }
                out[(ni * co + o) * lo + t] = acc;
            }
        }
    }
    out
}

/// Per-class (precision, recall, f1, support, predicted) counted one cell
/// at a time.
pub fn brute_force_metrics(pred: &[Vec<bool>], truth: &[Vec<bool>], classes: usize) -> Vec<(f64, f64, f64, usize, usize)> {
    (0..classes)
        .map(|c| {
            let mut tp = 0usize;
            let mut predicted = 0usize;
            let mut support = 0usize;
            for i in 0..pred.len() {
                if pred[i][c] {
                    predicted += 1;
                }
                if truth[i][c] {
                    support += 1;
                }
                if pred[i][c] && truth[i][c] {
                    tp += 1;
                }
            }
            let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
            let r = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
            let f = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (predicted + support) as f64 };
            (p, r, f, support, predicted)
        })
        .collect()
}

/// Whittaker-Shannon interpolation of `x` (sampled at `fs`) at time `t`.
pub fn sinc_interpolate(x: &[f64], fs: f64, t: f64) -> f64 {
    let pos = t * fs;
    x.iter()
        .enumerate()
        .map(|(n, v)| {
            let d = pos - n as f64;
            if d == 0.0 {
                *v
            } else {
                v * (PI * d).sin() / (PI * d)
            }
        })
        .sum()
}

/// Output length of a strided, padded convolution or pooling window.
pub fn out_len(l: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l + 2 * pad - k) / stride + 1
}
