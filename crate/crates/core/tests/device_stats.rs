use dvfault_core::device::{DeviceProfile, FaultParams, GlitchKind};
use dvfault_core::derive_rng;

fn params(f_h: f64, v_l: f64, t_d: f64) -> FaultParams {
    FaultParams {
        f_c: 3000.0,
        v_c: 1100.0,
        f_g: 1500.0,
        v_g: 800.0,
        f_h,
        v_l,
        t_w: 0.0,
        t_d,
    }
}

/// Profile with the crash and hang hazards switched off, so every draw is a
/// Poisson fault count.
fn hazard_free() -> DeviceProfile {
    DeviceProfile {
        stress_hazard_per_ms: 0.0,
        brownout_mv: None,
        max_stable_mhz: None,
        ..DeviceProfile::calibrated()
    }
}

#[test]
fn mean_fault_count_matches_rate_times_stress_times_duration() {
    let profile = hazard_free();
    let points = [(1735.0, 710.0, 2.0), (1700.0, 690.0, 1.0), (1750.0, 700.0, 3.0), (1600.0, 650.0, 2.5), (1800.0, 730.0, 0.5)];
    for (i, &(f, v, t_d)) in points.iter().enumerate() {
        let p = params(f, v, t_d);
        let mean = profile.fault_rate * profile.stress(&p) * t_d;
        assert!(mean > 0.0);
        let mut rng = derive_rng(99, &[i as u64]);
        let n = 10_000;
        let counts: Vec<f64> = (0..n)
            .map(|_| match profile.sample_glitch_kind(&p, &mut rng) {
                GlitchKind::Faults(k) => k as f64,
                GlitchKind::NoEffect => 0.0,
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        let observed = counts.iter().sum::<f64>() / n as f64;
        let se = (mean / n as f64).sqrt();
        assert!((observed - mean).abs() <= 3.0 * se, "point {i}: observed {observed}, expected {mean} (se {se})");
    }
}

#[test]
fn stress_free_cells_never_fault() {
    let profile = DeviceProfile::calibrated();
    for (i, &(f, v)) in [(1500.0, 800.0), (1600.0, 800.0), (1400.0, 700.0)].iter().enumerate() {
        let p = params(f, v, 5.0);
        assert_eq!(profile.stress(&p), 0.0);
        let mut rng = derive_rng(5, &[i as u64]);
        for _ in 0..10_000 {
            assert_eq!(profile.sample_glitch_kind(&p, &mut rng), GlitchKind::NoEffect);
        }
    }
}

#[test]
fn mean_fault_count_grows_with_duration_and_stress() {
    let profile = hazard_free();
    let mean_at = |f, v, t_d, stream| {
        let p = params(f, v, t_d);
        let mut rng = derive_rng(3, &[stream]);
        (0..10_000)
            .map(|_| match profile.sample_glitch_kind(&p, &mut rng) {
                GlitchKind::Faults(k) => k as f64,
                _ => 0.0,
            })
            .sum::<f64>()
            / 10_000.0
    };
    let by_duration: Vec<f64> = [0.5, 1.0, 2.0, 4.0].iter().enumerate().map(|(i, &t)| mean_at(1735.0, 710.0, t, i as u64)).collect();
    assert!(by_duration.windows(2).all(|w| w[0] <= w[1]), "{by_duration:?}");
    let by_voltage: Vec<f64> = [720.0, 710.0, 700.0, 690.0].iter().enumerate().map(|(i, &v)| mean_at(1735.0, v, 2.0, 10 + i as u64)).collect();
    assert!(by_voltage.windows(2).all(|w| w[0] <= w[1]), "{by_voltage:?}");
}
