//! Rational-ratio polyphase resampling.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Kaiser window shape parameter of the anti-alias filter.
pub const KAISER_BETA: f64 = 8.0;
/// Anti-alias cutoff as a fraction of the lower Nyquist frequency.
pub const CUTOFF_FRACTION: f64 = 0.9;
/// Sinc zero crossings kept on each side of the kernel center.
const ZERO_CROSSINGS: f64 = 16.0;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind.
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Prepared polyphase resampler for one `fs_in -> fs_out` ratio.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    half: usize,
    /// Prototype low-pass at the upsampled rate, indexed `n + half`.
    kernel: Vec<f64>,
}

impl Resampler {
    pub fn new(fs_in: u32, fs_out: u32) -> Result<Self> {
        if fs_in == 0 || fs_out == 0 {
            return Err(Error::InvalidRate(format!(
                "sampling rates must be positive ({fs_in} -> {fs_out})"
            )));
        }
        let g = gcd(fs_in as u64, fs_out as u64);
        let up = (fs_out as u64 / g) as usize;
        let down = (fs_in as u64 / g) as usize;

        let fs_up = fs_in as f64 * up as f64;
        let cutoff = CUTOFF_FRACTION * fs_in.min(fs_out) as f64 / 2.0;
        let norm = 2.0 * cutoff / fs_up;
        let half = (ZERO_CROSSINGS / norm).ceil() as usize;

        let i0_beta = bessel_i0(KAISER_BETA);
        let mut kernel: Vec<f64> = (0..=2 * half)
            .map(|i| {
                let n = i as f64 - half as f64;
                let r = n / half as f64;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                norm * sinc(norm * n) * w
            })
            .collect();

        // each polyphase branch gets exactly unit DC gain
        let mut branch_sum = vec![0.0; up];
        for (i, v) in kernel.iter().enumerate() {
            branch_sum[i % up] += v;
        }
        for (i, v) in kernel.iter_mut().enumerate() {
            *v /= branch_sum[i % up];
        }

        Ok(Self {
            up,
            down,
            half,
            kernel,
        })
    }

    /// Reduced `(L, M)` with `L / M = fs_out / fs_in`.
    pub fn ratio(&self) -> (usize, usize) {
        (self.up, self.down)
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len * self.up).div_ceil(self.down)
    }

    /// Computes the first `min(max_out, output_len)` output samples.
    pub fn process_prefix(&self, signal: &[f64], max_out: usize) -> Vec<f64> {
        if self.up == 1 && self.down == 1 {
            return signal[..signal.len().min(max_out)].to_vec();
        }
        let n_out = self.output_len(signal.len()).min(max_out);
        let (up, down, half) = (self.up as i64, self.down as i64, self.half as i64);
        let last = signal.len() as i64 - 1;
        (0..n_out as i64)
            .map(|k| {
                let center = k * down;
                let lo = (center - half + up - 1).div_euclid(up).max(0);
                let hi = (center + half).div_euclid(up).min(last);
                let mut acc = 0.0;
                let mut i = lo;
                while i <= hi {
                    acc += signal[i as usize] * self.kernel[(center - i * up + half) as usize];
                    i += 1;
                }
                acc
            })
            .collect()
    }

    pub fn process(&self, signal: &[f64]) -> Vec<f64> {
        self.process_prefix(signal, usize::MAX)
    }
}

/// Resamples `signal` from `fs_in` to `fs_out`.
///
/// Output length is `ceil(len * fs_out / fs_in)`; equal rates return the
/// input unchanged.
pub fn resample(signal: &[f64], fs_in: u32, fs_out: u32) -> Result<Vec<f64>> {
    Ok(Resampler::new(fs_in, fs_out)?.process(signal))
}
