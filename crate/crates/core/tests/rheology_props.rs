use msdscope::rheology::{gser, log_slope, moduli, smooth_external_msd, MaterialSpec, SmoothMethod};
use msdscope::MsdCurve;
use proptest::prelude::*;

fn power_law(c: f64, alpha: f64, n: usize) -> MsdCurve {
    let lags: Vec<f64> = (1..=n).map(|k| 0.01 * (k as f64).powf(1.3)).collect();
    let msd = lags.iter().map(|t| c * t.powf(alpha)).collect();
    MsdCurve::new(lags, msd).unwrap()
}

proptest! {
    #[test]
    fn loss_tangent_follows_the_slope(alpha in 0.05f64..0.95, c in 1e-3f64..10.0) {
        let mat = MaterialSpec { temperature: 300.0, radius: 4e-7 };
        let m = moduli(&power_law(c, alpha, 20), &mat).unwrap();
        for k in 0..m.len() {
            let tan = (std::f64::consts::FRAC_PI_2 * alpha).tan();
            prop_assert!((m.g_loss[k] / m.g_prime[k] / tan - 1.0).abs() < 1e-9);
            prop_assert!(!m.nonphysical[k] && m.defined[k]);
        }
    }

    #[test]
    fn smoothers_keep_power_laws(alpha in 0.2f64..1.8, c in 1e-2f64..10.0) {
        let curve = power_law(c, alpha, 40);
        for method in [SmoothMethod::Spline, SmoothMethod::Poly4] {
            let s = smooth_external_msd(&curve, method).unwrap();
            for a in log_slope(&s).unwrap().iter().skip(1).take(38) {
                prop_assert!((a - alpha).abs() < 1e-3, "{:?} {}", method, a);
            }
        }
    }
}

#[test]
fn moduli_scale_inversely_with_msd() {
    let mat = MaterialSpec { temperature: 293.0, radius: 1e-6 };
    let a = moduli(&power_law(1.0, 0.5, 10), &mat).unwrap();
    let b = moduli(&power_law(4.0, 0.5, 10), &mat).unwrap();
    for k in 0..10 {
        assert!((a.g_loss[k] / b.g_loss[k] - 4.0).abs() < 1e-12);
    }
}

#[test]
fn poly4_needs_five_points() {
    let c = power_law(1.0, 1.0, 4);
    assert!(smooth_external_msd(&c, SmoothMethod::Poly4).is_err());
    assert!(smooth_external_msd(&power_law(1.0, 1.0, 5), SmoothMethod::Poly4).is_ok());
}

#[test]
fn noisy_curve_is_smoothed_toward_the_trend() {
    let clean = power_law(2.0, 0.7, 60);
    let noisy = MsdCurve::new(
        clean.lags.clone(),
        clean.msd.iter().enumerate().map(|(k, v)| v * (1.0 + 0.05 * ((k * 7919) as f64).sin())).collect(),
    )
    .unwrap();
    let s = smooth_external_msd(&noisy, SmoothMethod::Spline).unwrap();
    let err = |c: &MsdCurve| c.msd.iter().zip(&clean.msd).map(|(a, b)| (a / b).ln().powi(2)).sum::<f64>();
    assert!(err(&s) < 0.5 * err(&noisy));
    let alpha = vec![-1.0; 60];
    assert!(gser(&s, &alpha, &MaterialSpec { temperature: 300.0, radius: 1e-6 }).unwrap().defined.iter().all(|d| !d));
}
