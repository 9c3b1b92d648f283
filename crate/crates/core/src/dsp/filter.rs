//! IIR filter design and application.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    LowPass,
    HighPass,
    Notch,
}

/// How a filter was designed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterDesign {
    pub kind: FilterKind,
    pub order: usize,
    pub cutoff_hz: f64,
    pub fs_hz: f64,
    /// Quality factor, notch filters only.
    pub q: Option<f64>,
}

/// Rational transfer function `B(z) / A(z)` in powers of `z^-1`.
///
/// Invariants: `a[0] == 1`, every coefficient finite, all poles strictly
/// inside the unit circle.
#[derive(Debug, Clone, PartialEq)]
pub struct IirFilter {
    b: Vec<f64>,
    a: Vec<f64>,
    design: Option<FilterDesign>,
}

impl IirFilter {
    /// Normalizes by `a[0]` and checks finiteness and stability.
    pub fn new(b: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if b.is_empty() || a.is_empty() {
            return Err(Error::InvalidConfig("filter needs at least one b and one a coefficient".into()));
        }
        let a0 = a[0];
        if a0 == 0.0 || !a0.is_finite() {
            return Err(Error::InvalidConfig(format!("a[0] must be finite and non-zero, got {a0}")));
        }
        let b: Vec<f64> = b.into_iter().map(|v| v / a0).collect();
        let a: Vec<f64> = a.into_iter().map(|v| v / a0).collect();
        if b.iter().chain(&a).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite filter coefficient".into()));
        }
        if !is_stable(&a) {
            return Err(Error::InvalidConfig("filter has a pole on or outside the unit circle".into()));
        }
        Ok(Self { b, a, design: None })
    }

    pub fn identity() -> Self {
        Self {
            b: vec![1.0],
            a: vec![1.0],
            design: None,
        }
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn design(&self) -> Option<&FilterDesign> {
        self.design.as_ref()
    }

    /// Complex response at normalized angular frequency `w` (rad/sample).
    pub fn response_at(&self, w: f64) -> Complex64 {
        let zinv = Complex64::from_polar(1.0, -w);
        let eval = |c: &[f64]| {
            c.iter()
                .rev()
                .fold(Complex64::new(0.0, 0.0), |acc, &v| acc * zinv + v)
        };
        eval(&self.b) / eval(&self.a)
    }

    /// Magnitude response at `freq_hz` for a sampling rate of `fs_hz`.
    pub fn gain_at(&self, freq_hz: f64, fs_hz: f64) -> f64 {
        self.response_at(2.0 * PI * freq_hz / fs_hz).norm()
    }
}

/// Schur-Cohn step-down test: stable iff every reflection coefficient has
/// magnitude below one.
fn is_stable(a: &[f64]) -> bool {
    let mut poly: Vec<f64> = a.to_vec();
    while poly.len() > 1 && *poly.last().unwrap() == 0.0 {
        poly.pop();
    }
    while poly.len() > 1 {
        let n = poly.len() - 1;
        let k = poly[n] / poly[0];
        if k.abs() >= 1.0 || !k.is_finite() {
            return false;
        }
        let denom = 1.0 - k * k;
        poly = (0..n)
            .map(|i| (poly[i] - k * poly[n - i]) / denom)
            .collect();
    }
    true
}

fn validate_cutoff(cutoff: f64, fs: f64) -> Result<()> {
    if !(fs > 0.0) || !fs.is_finite() {
        return Err(Error::InvalidCutoff(format!("sampling rate must be positive, got {fs}")));
    }
    if !(cutoff > 0.0 && cutoff < fs / 2.0) {
        return Err(Error::InvalidCutoff(format!(
            "cutoff {cutoff} Hz must lie strictly between 0 and Nyquist ({} Hz)",
            fs / 2.0
        )));
    }
    Ok(())
}

/// Expands `prod (1 - r z^-1)` into real coefficients.
fn expand_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut poly = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); poly.len() + 1];
        for (i, &c) in poly.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        poly = next;
    }
    poly.into_iter().map(|c| c.re).collect()
}

fn butterworth(kind: FilterKind, order: usize, cutoff: f64, fs: f64) -> Result<IirFilter> {
    if order == 0 {
        return Err(Error::InvalidConfig("filter order must be positive".into()));
    }
    validate_cutoff(cutoff, fs)?;
    let k = 2.0 * fs;
    let warped = k * (PI * cutoff / fs).tan();
    let n = order as f64;

    let poles: Vec<Complex64> = (0..order)
        .map(|i| {
            let theta = PI * (2.0 * i as f64 + n + 1.0) / (2.0 * n);
            let proto = Complex64::from_polar(1.0, theta);
            let analog = match kind {
                FilterKind::LowPass => proto * warped,
                _ => warped / proto,
            };
            (k + analog) / (k - analog)
        })
        .collect();
    let zero = match kind {
        FilterKind::LowPass => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(1.0, 0.0),
    };
    let a = expand_roots(&poles);
    let mut b = expand_roots(&vec![zero; order]);

    // unity gain at DC (low-pass) or Nyquist (high-pass)
    let probe = match kind {
        FilterKind::LowPass => 0.0,
        _ => PI,
    };
    let mut f = IirFilter::new(b.clone(), a.clone())?;
    let g = f.response_at(probe);
    let scale = 1.0 / g.re;
    b.iter_mut().for_each(|v| *v *= scale);
    f = IirFilter::new(b, a)?;
    f.design = Some(FilterDesign {
        kind,
        order,
        cutoff_hz: cutoff,
        fs_hz: fs,
        q: None,
    });
    Ok(f)
}

/// Butterworth low-pass of the given order, designed by the bilinear
/// transform with the cutoff pre-warped.
pub fn design_butterworth_lowpass(order: usize, cutoff: f64, fs: f64) -> Result<IirFilter> {
    butterworth(FilterKind::LowPass, order, cutoff, fs)
}

/// Butterworth high-pass counterpart of [`design_butterworth_lowpass`].
pub fn design_butterworth_highpass(order: usize, cutoff: f64, fs: f64) -> Result<IirFilter> {
    butterworth(FilterKind::HighPass, order, cutoff, fs)
}

/// Second-order notch: bilinear image of `(s^2 + w0^2) / (s^2 + (w0/q) s + w0^2)`
/// with the center frequency pre-warped.
pub fn design_notch(center: f64, q: f64, fs: f64) -> Result<IirFilter> {
    validate_cutoff(center, fs)?;
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::InvalidCutoff(format!("notch Q must be positive, got {q}")));
    }
    let t = (PI * center / fs).tan();
    let t2 = t * t;
    let b = vec![1.0 + t2, 2.0 * t2 - 2.0, 1.0 + t2];
    let a = vec![1.0 + t / q + t2, 2.0 * t2 - 2.0, 1.0 - t / q + t2];
    let mut f = IirFilter::new(b, a)?;
    f.design = Some(FilterDesign {
        kind: FilterKind::Notch,
        order: 2,
        cutoff_hz: center,
        fs_hz: fs,
        q: Some(q),
    });
    Ok(f)
}

/// Forward-only filtering in transposed direct form II, zero initial state.
pub fn apply_filter(filter: &IirFilter, signal: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = signal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("sample {i} is {}", signal[i])));
    }
    let order = filter.b.len().max(filter.a.len());
    let b: Vec<f64> = (0..order).map(|i| filter.b.get(i).copied().unwrap_or(0.0)).collect();
    let a: Vec<f64> = (0..order).map(|i| filter.a.get(i).copied().unwrap_or(0.0)).collect();
    let mut state = vec![0.0; order];
    let mut out = Vec::with_capacity(signal.len());
    for &x in signal {
        let y = b[0] * x + state[0];
        for i in 1..order {
            state[i - 1] = b[i] * x - a[i] * y + state[i];
        }
        out.push(y);
    }
    Ok(out)
}
