mod common;

use std::f64::consts::PI;

use proptest::prelude::*;

use ecgdg::dsp::{
    apply_filter, design_butterworth_lowpass, design_notch, fix_length, normalize, preprocess_record, resample,
    PreprocessConfig, Resampler,
};
use ecgdg::record_io::{EcgRecord, NUM_LEADS};

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("length {} vs {}", a.len(), b.len()));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if (x - y).abs() > tol * y.abs().max(1e-12) + 1e-15 {
            return Err(format!("coefficient {i}: {x} vs {y}"));
        }
    }
    Ok(())
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn tone(freqs: &[f64], fs: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| freqs.iter().map(|f| (2.0 * PI * f * i as f64 / fs).sin()).sum())
        .collect()
}

proptest! {
    #[test]
    fn butterworth_matches_polynomial_oracle(
        order in 1usize..=6,
        fs in prop::sample::select(vec![100.0, 250.0, 257.0, 500.0, 1000.0]),
        frac in 0.02f64..0.4,
    ) {
        let cutoff = frac * fs;
        let f = design_butterworth_lowpass(order, cutoff, fs).unwrap();
        let (b, a) = common::butterworth_lowpass_oracle(order, cutoff, fs);
        prop_assert!(rel_close(f.b(), &b, 1e-9).is_ok(), "{:?}", rel_close(f.b(), &b, 1e-9));
        prop_assert!(rel_close(f.a(), &a, 1e-9).is_ok(), "{:?}", rel_close(f.a(), &a, 1e-9));
        prop_assert!((f.gain_at(cutoff, fs) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn notch_matches_cookbook(
        fs in prop::sample::select(vec![250.0, 500.0, 1000.0]),
        frac in 0.0001f64..0.45,
        q in 0.3f64..50.0,
    ) {
        let center = frac * fs;
        let f = design_notch(center, q, fs).unwrap();
        let (b, a) = common::rbj_notch(center, q, fs);
        prop_assert!(rel_close(f.b(), &b, 1e-9).is_ok());
        prop_assert!(rel_close(f.a(), &a, 1e-9).is_ok());
        prop_assert!(common::gain(f.b(), f.a(), center, fs) < 1e-6);
    }

    #[test]
    fn filtering_is_linear(
        x in prop::collection::vec(-10.0f64..10.0, 1..200),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        order in 1usize..=4,
    ) {
        let f = design_butterworth_lowpass(order, 20.0, 500.0).unwrap();
        let y: Vec<f64> = x.iter().rev().copied().collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
        let fx = apply_filter(&f, &x).unwrap();
        let fy = apply_filter(&f, &y).unwrap();
        let fm = apply_filter(&f, &mix).unwrap();
        for i in 0..x.len() {
            let want = alpha * fx[i] + beta * fy[i];
            prop_assert!((fm[i] - want).abs() < 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn impulse_response_decays(order in 1usize..=6, frac in 0.01f64..0.4) {
        let f = design_butterworth_lowpass(order, frac * 500.0, 500.0).unwrap();
        let mut x = vec![0.0; 20_000];
        x[0] = 1.0;
        let y = apply_filter(&f, &x).unwrap();
        prop_assert!(y[y.len() - 1000..].iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn resampled_length_is_ceiling(
        fs_in in prop::sample::select(vec![250u32, 257, 360, 500, 1000]),
        fs_out in prop::sample::select(vec![100u32, 250, 257, 500, 1000]),
        len in 1usize..3000,
    ) {
        let x = vec![0.5; len];
        let y = resample(&x, fs_in, fs_out).unwrap();
        prop_assert_eq!(y.len(), (len * fs_out as usize).div_ceil(fs_in as usize));
        prop_assert_eq!(Resampler::new(fs_in, fs_out).unwrap().output_len(len), y.len());
    }

    #[test]
    fn resample_round_trip_is_close(
        fs in prop::sample::select(vec![250u32, 257, 500, 1000]),
        fs_mid in prop::sample::select(vec![250u32, 257, 500, 1000]),
        f1 in 1.0f64..8.0,
        f2 in 8.0f64..25.0,
    ) {
        let n = 4 * fs as usize;
        let x = tone(&[f1, f2], fs as f64, n);
        let mid = resample(&x, fs, fs_mid).unwrap();
        let back = resample(&mid, fs_mid, fs).unwrap();
        let edge = n / 10;
        let diff: Vec<f64> = (edge..n - edge).map(|i| back[i] - x[i]).collect();
        let ratio = rms(&diff) / rms(&x[edge..n - edge]);
        prop_assert!(ratio < 0.02, "relative RMS error {}", ratio);
    }

    #[test]
    fn normalize_hits_both_ends(
        values in prop::collection::vec(-1e4f64..1e4, 2..500),
        lo in -5.0f64..0.0,
        width in 0.1f64..10.0,
    ) {
        let hi = lo + width;
        prop_assume!(values.iter().any(|v| *v != values[0]));
        let out = normalize(&values, (lo, hi)).unwrap();
        let min = out.iter().copied().fold(f64::INFINITY, f64::min);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(min, lo);
        prop_assert_eq!(max, hi);
    }

    #[test]
    fn fix_length_truncates_or_pads(x in prop::collection::vec(-1.0f64..1.0, 0..100), target in 0usize..150) {
        let y = fix_length(&x, target);
        prop_assert_eq!(y.len(), target);
        let keep = x.len().min(target);
        prop_assert_eq!(&y[..keep], &x[..keep]);
        prop_assert!(y[keep..].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn upsampled_sine_matches_band_limited_interpolation() {
    let x = tone(&[5.0], 250.0, 2500);
    let y = resample(&x, 250, 500).unwrap();
    assert_eq!(y.len(), 5000);
    let interior = &y[500..4500];
    let peak = interior.iter().copied().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((peak - 1.0).abs() < 0.02, "peak {peak}");
    for k in (1000..4000).step_by(97) {
        let want = common::sinc_interpolate(&x, 250.0, k as f64 / 500.0);
        assert!((y[k] - want).abs() < 0.02, "sample {k}: {} vs {want}", y[k]);
    }
}

#[test]
fn preprocessed_record_has_target_shape_and_range() {
    let n = 5000;
    let mut data = Vec::with_capacity(NUM_LEADS * n);
    for lead in 0..NUM_LEADS {
        data.extend(tone(&[1.0 + lead as f64], 500.0, n).into_iter().map(|v| (v * 2.0) as f32));
    }
    let rec = EcgRecord::new("p", 500, NUM_LEADS, n, data, vec!["426783006".into()], "D").unwrap();
    let cfg = PreprocessConfig { target_fs: 257, target_len: 2000, ..Default::default() };
    let out = preprocess_record(&rec, &cfg).unwrap();
    assert_eq!((out.fs, out.num_samples()), (257, 2000));
    let min = out.samples().iter().copied().fold(f32::INFINITY, f32::min);
    let max = out.samples().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    assert_eq!((min, max), (-1.0, 1.0));
    assert_eq!(out.labels, rec.labels);
}
