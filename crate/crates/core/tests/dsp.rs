use std::f64::consts::{FRAC_1_SQRT_2, PI};

use fiberlock_core::dsp::*;
use fiberlock_core::plant::{Detector, DriftConfig, Modulation, PathId, PlantConfig, PlantState};
use num_complex::Complex64;
use proptest::prelude::*;

const FS_DEC: f64 = 312_500.0;

#[test]
fn low_pass_corner_is_minus_three_db() {
    let c = design_biquad(&FilterSpec::low_pass(10.0, FS_DEC)).unwrap();
    let m = c.magnitude_db(10.0, FS_DEC);
    assert!((m + 3.0).abs() <= 0.5, "{m}");
    assert!(c.magnitude_db(0.01, FS_DEC).abs() < 1e-3);
    let h = design_biquad(&FilterSpec::high_pass(10.0, FS_DEC)).unwrap();
    assert!((h.magnitude_db(10.0, FS_DEC) + 3.0).abs() <= 0.5);
    assert!(h.magnitude_db(10e3, FS_DEC).abs() < 1e-3);
}

#[test]
fn all_pass_is_flat() {
    for (f0, q) in [(300.0, FRAC_1_SQRT_2), (40.0, 0.3), (5e3, 4.0)] {
        let c = design_biquad(&FilterSpec::all_pass(f0, FS_DEC, q)).unwrap();
        for i in 0..50 {
            // log-spaced 1 Hz .. 150 kHz
            let f = 10f64.powf(i as f64 * (150e3f64.log10() / 49.0));
            let m = c.magnitude_db(f, FS_DEC);
            assert!(m.abs() <= 0.1, "{f0} @ {f}: {m}");
        }
    }
}

#[test]
fn band_reject_notches_second_harmonic() {
    let c = design_biquad(&FilterSpec::band_reject(600.0, FS_DEC, 2.0)).unwrap();
    assert!(c.magnitude_db(600.0, FS_DEC) <= -20.0);
    assert!(c.magnitude_db(300.0, FS_DEC) >= -1.0, "{}", c.magnitude_db(300.0, FS_DEC));
    let bp = design_biquad(&FilterSpec::band_pass(200e3, 5e6, 10.0)).unwrap();
    assert!(bp.magnitude_db(200e3, 5e6).abs() < 1e-9);
    // ±300 Hz AM sidebands pass with negligible tilt
    assert!(bp.magnitude_db(200.3e3, 5e6).abs() < 0.01);
    assert!(bp.magnitude_db(0.1, 5e6) < -60.0);
}

#[test]
fn nyquist_corner_rejected() {
    assert!(matches!(
        design_biquad(&FilterSpec::low_pass(FS_DEC / 2.0, FS_DEC)),
        Err(DspError::AboveNyquist { .. })
    ));
    assert!(design_biquad(&FilterSpec::band_pass(100.0, FS_DEC, 0.0)).is_err());
}

#[test]
fn zero_input_gives_zero_output() {
    let mut f = Biquad::design(&FilterSpec::band_pass(1e3, FS_DEC, 5.0)).unwrap();
    for _ in 0..1000 {
        assert_eq!(filter_step(&mut f, 0.0), 0.0);
    }
}

/// `h[n]` from the pole pair: the all-pole part has response
/// `(p1^{n+1} − p2^{n+1}) / (p1 − p2)`, convolved with the numerator taps.
fn impulse_oracle(c: &Coefficients, n: usize) -> Vec<f64> {
    let (a1, a2) = (c.a[0], c.a[1]);
    let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
    let p1 = (-a1 + disc) / 2.0;
    let p2 = (-a1 - disc) / 2.0;
    let g = |k: i64| -> f64 {
        if k < 0 {
            return 0.0;
        }
        if (p1 - p2).norm() < 1e-12 {
            return ((k + 1) as f64 * p1.powi(k as i32)).re;
        }
        ((p1.powi(k as i32 + 1) - p2.powi(k as i32 + 1)) / (p1 - p2)).re
    };
    (0..n as i64).map(|k| c.b[0] * g(k) + c.b[1] * g(k - 1) + c.b[2] * g(k - 2)).collect()
}

#[test]
fn impulse_response_matches_closed_form() {
    let specs = [
        FilterSpec::low_pass(10.0, FS_DEC),
        FilterSpec::low_pass(30e3, 5e6),
        FilterSpec::high_pass(10.0, FS_DEC),
        FilterSpec::band_pass(200e3, 5e6, 10.0),
        FilterSpec::band_reject(600.0, FS_DEC, 2.0),
        FilterSpec::all_pass(300.0, FS_DEC, FRAC_1_SQRT_2),
        FilterSpec::low_pass(50e3, 312.5e3),
    ];
    for s in specs {
        let mut f = Biquad::design(&s).unwrap();
        let want = impulse_oracle(f.coefficients(), 400);
        for (n, w) in want.iter().enumerate() {
            let y = f.step(if n == 0 { 1.0 } else { 0.0 });
            assert!((y - w).abs() < 1e-9, "{s:?} n={n}: {y} vs {w}");
        }
    }
}

#[test]
fn allpass_for_phase_hits_target() {
    for target in [-0.3, -1.0, -2.5, -4.0, -6.0] {
        let c = allpass_for_phase(target, 300.0, FS_DEC, FRAC_1_SQRT_2).unwrap();
        let ph = c.response(300.0, FS_DEC).arg();
        let d = (ph - target).rem_euclid(2.0 * PI);
        assert!(d.min(2.0 * PI - d) < 1e-6, "{target}: {ph}");
    }
}

#[test]
fn integrator_examples() {
    let mut i = Integrator::new(2.0, 0.5);
    for _ in 0..100 {
        assert_eq!(integrator_step(&mut i, 0.0, 0.01), 0.5);
    }
    let mut i = Integrator::new(2.0, 0.0);
    let mut out = 0.0;
    for _ in 0..300 {
        out = integrator_step(&mut i, 1.0, 0.01);
    }
    assert!((out - 6.0).abs() < 1e-9);
    let mut i = Integrator::new(1.0, 0.0);
    for _ in 0..50 {
        integrator_step(&mut i, 1.0, 0.01);
    }
    i.hold();
    let frozen = i.state;
    for k in 0..50 {
        assert_eq!(integrator_step(&mut i, k as f64 - 20.0, 0.01), frozen);
    }
    i.release();
    assert!(integrator_step(&mut i, 1.0, 0.01) > frozen);
}

fn settled(cfg: &LockInConfig, mut signal: impl FnMut(u64, &mut [f64]), window: ReadWindow) -> (f64, f64) {
    let mut chain = LockInChain::new(*cfg).unwrap();
    let fs = cfg.sample_rate;
    let total = ((window.settle_s + window.average_s) * fs).round() as usize;
    let settle = (window.settle_s * fs).round() as u64;
    let mut buf = vec![0.0; 1 << 14];
    let (mut rel, mut raw, mut count) = (0.0, 0.0, 0.0);
    let mut done = 0usize;
    while done < total {
        let n = buf.len().min(total - done);
        signal(done as u64, &mut buf[..n]);
        chain.process(&buf[..n], done as u64, |o| {
            if o.index >= settle {
                rel += o.beta_rel;
                raw += o.raw;
                count += 1.0;
            }
        });
        done += n;
    }
    (rel / count, raw / count)
}

#[test]
fn lock_in_output_is_carrier_phase_independent() {
    let fs = 1.6e6;
    let cfg = calibrate_chain(&LockInConfig::homodyne(fs), ReadWindow::default()).unwrap();
    let w = ReadWindow::default();
    let outs: Vec<(f64, f64)> = (0..8)
        .map(|k| {
            let phi = k as f64 * PI / 4.0;
            settled(&cfg, |first, out| synthetic_am(&cfg, 0.02, phi, first, out), w)
        })
        .collect();
    let k0 = outs[0].0 / 0.02;
    for (rel, raw) in &outs {
        assert!((rel / 0.02 / k0 - 1.0).abs() < 0.01, "{rel}");
        assert!((raw / outs[0].1 - 1.0).abs() < 0.01, "{raw}");
    }
    // a calibrated chain reports the depth directly
    assert!((k0 - 1.0).abs() < 0.01);

    let (zero, _) = settled(&cfg, |first, out| synthetic_am(&cfg, 0.0, 0.7, first, out), w);
    assert!(zero.abs() < 1e-4 * 0.02, "{zero}");
}

#[test]
fn lock_in_is_linear_in_depth() {
    let fs = 1.6e6;
    let cfg = calibrate_chain(&LockInConfig::homodyne(fs), ReadWindow::default()).unwrap();
    let w = ReadWindow::default();
    for beta in [-0.03, -0.005, 0.01, 0.04] {
        let (got, _) = settled(&cfg, |first, out| synthetic_am(&cfg, beta, 1.1, first, out), w);
        assert!((got / beta - 1.0).abs() < 0.01, "{beta}: {got}");
    }
}

fn homodyne_beta(delta: f64, modulated: bool) -> f64 {
    let mut c = PlantConfig::default();
    c.sample_rate = 1.6e6;
    c.drift = DriftConfig::none();
    c.homodyne.noise_rms = 0.0;
    let mut p = PlantState::new(c).unwrap();
    p.set_shutters(true, true, false);
    p.set_great_circle(delta, 0.0);
    if modulated {
        p.set_modulation(Some(Modulation { path: PathId::Lo, piezo: 0, amplitude: 0.05 }));
    }
    let w = ReadWindow::default();
    let cfg = calibrate_chain(&LockInConfig::homodyne(p.sample_rate()), w).unwrap();
    let (rel, _) = settled(&cfg, |_, out| p.stream(Detector::Homodyne, out), w);
    rel
}

#[test]
fn end_to_end_error_is_odd_and_proportional() {
    let pairs: Vec<(f64, f64)> = [0.05, 0.1, 0.2]
        .iter()
        .map(|&d| (homodyne_beta(d, true), homodyne_beta(-d, true)))
        .collect();
    for (plus, minus) in &pairs {
        assert!(plus.abs() > 0.0 && plus.signum() != minus.signum());
        assert!((plus + minus).abs() <= 0.02 * plus.abs(), "{plus} vs {minus}");
    }
    // line through the origin against sin Δθ
    let xs: Vec<f64> = (-4..=4).map(|i| i as f64 * 0.1).collect();
    let ys: Vec<f64> = xs.iter().map(|&d| homodyne_beta(d, true)).collect();
    let sx: Vec<f64> = xs.iter().map(|d| d.sin()).collect();
    let k = sx.iter().zip(&ys).map(|(a, b)| a * b).sum::<f64>() / sx.iter().map(|a| a * a).sum::<f64>();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = sx.iter().zip(&ys).map(|(a, y)| (y - k * a).powi(2)).sum();
    assert!(1.0 - ss_res / ss_tot > 0.999);

    // carrier alone, no modulation: residual well below the 0.1 rad error
    let residual = homodyne_beta(0.1, false);
    let reference = homodyne_beta(0.1, true);
    assert!(residual.abs() < 0.01 * reference.abs(), "{residual} vs {reference}");
}

proptest! {
    #[test]
    fn designed_filters_are_stable(kind in 0usize..5, frac in 1e-4f64..0.45, q in 0.3f64..20.0,
                                   fs in prop::sample::select(vec![312_500.0, 1.6e6, 5e6])) {
        let f = frac * fs;
        let spec = match kind {
            0 => FilterSpec::low_pass(f, fs),
            1 => FilterSpec::high_pass(f, fs),
            2 => FilterSpec::band_pass(f, fs, q),
            3 => FilterSpec::band_reject(f, fs, q),
            _ => FilterSpec::all_pass(f, fs, q),
        };
        let c = design_biquad(&spec).unwrap();
        for r in c.pole_radii() {
            prop_assert!(r < 1.0 - 1e-6, "{:?}: {}", spec, r);
        }
    }

    #[test]
    fn filters_are_linear(x in prop::collection::vec(-1.0f64..1.0, 64), y in prop::collection::vec(-1.0f64..1.0, 64),
                          a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let proto = Biquad::design(&FilterSpec::band_pass(20e3, 312_500.0, 3.0)).unwrap();
        let run = |s: &[f64]| {
            let mut f = proto;
            s.iter().map(|&v| f.step(v)).collect::<Vec<_>>()
        };
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let hx = run(&x);
        let hy = run(&y);
        for (i, h) in run(&mixed).iter().enumerate() {
            prop_assert!((h - (a * hx[i] + b * hy[i])).abs() < 1e-9);
        }
    }
}
