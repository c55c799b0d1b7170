use msdscope::gpr::{fit_1d, fit_fixed, matern52};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weights_reproduce_predictions(ys in prop::collection::vec(-3.0f64..3.0, 6), range in 0.3f64..5.0) {
        let x: Vec<Vec<f64>> = (0..6).map(|k| vec![k as f64 * 1.1]).collect();
        let gp = fit_fixed(&x, &ys, &[range], 1e-8).unwrap();
        let xs: Vec<f64> = (0..25).map(|k| k as f64 * 0.23 - 0.4).collect();
        let w = gp.weights_1d(&xs);
        let pred = gp.predict_1d(&xs);
        for (row, p) in w.iter().zip(&pred) {
            let lin: f64 = row.iter().zip(&ys).map(|(a, b)| a * b).sum();
            prop_assert!((lin - p).abs() < 1e-8 * (1.0 + p.abs()));
            // constant mean: weights sum to one
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn kernel_is_a_decreasing_correlation(d in 0.0f64..20.0, g in 0.1f64..10.0) {
        let k = matern52(d, g);
        prop_assert!(k > 0.0 && k <= 1.0);
        prop_assert!(matern52(d + 0.1, g) <= k);
    }
}

#[test]
fn fitted_model_interpolates_training_data() {
    let x: Vec<f64> = (0..8).map(|k| k as f64 * 0.5).collect();
    let y: Vec<f64> = x.iter().map(|v| v.sin() + 0.3 * v).collect();
    let gp = fit_1d(&x, &y).unwrap();
    for (p, t) in gp.predict_1d(&x).iter().zip(&y) {
        assert!((p - t).abs() < 1e-4);
    }
}
