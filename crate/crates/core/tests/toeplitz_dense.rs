use msdscope::toeplitz::{matvec, trace_pair, ToeplitzCov};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn dense(g: &[f64]) -> DMatrix<f64> {
    let n = g.len();
    DMatrix::from_fn(n, n, |r, c| g[r.abs_diff(c)])
}

/// Mixtures of AR(1) autocovariances plus a nugget are positive definite.
fn pd_gamma() -> impl Strategy<Value = Vec<f64>> {
    (1usize..48, prop::collection::vec((0.05f64..3.0, -0.97f64..0.97), 1..4), 1e-3f64..0.5).prop_map(
        |(n, parts, nugget)| {
            (0..n)
                .map(|k| parts.iter().map(|(w, r)| w * r.powi(k as i32)).sum::<f64>() + if k == 0 { nugget } else { 0.0 })
                .collect()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solve_and_logdet_match_cholesky(g in pd_gamma(), seed in 0u64..1000) {
        let n = g.len();
        let y: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin()).collect();
        let cov = ToeplitzCov::new(g.clone()).unwrap();
        let chol = dense(&g).cholesky().unwrap();
        let x_ref = chol.solve(&DVector::from_vec(y.clone()));
        let x = cov.solve(&y).unwrap();
        let scale = x_ref.amax().max(1.0);
        for i in 0..n {
            prop_assert!((x[i] - x_ref[i]).abs() <= 1e-8 * scale);
        }
        let logdet_ref = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        prop_assert!((cov.logdet().unwrap() - logdet_ref).abs() <= 1e-8 * logdet_ref.abs().max(1.0));
        let ld = cov.logdensity(&y).unwrap();
        prop_assert!((ld.logdet - logdet_ref).abs() <= 1e-8 * logdet_ref.abs().max(1.0));
    }

    #[test]
    fn trace_pair_matches_dense(g in pd_gamma(), a in 0.1f64..2.0, b in -1.0f64..1.0) {
        let n = g.len();
        let dr: Vec<f64> = (0..n).map(|k| a * (-(k as f64) / 3.0).exp()).collect();
        let ds: Vec<f64> = (0..n).map(|k| b * (k as f64 * 0.7).cos()).collect();
        let inv = dense(&g).try_inverse().unwrap();
        let want = (&inv * dense(&dr) * &inv * dense(&ds)).trace();
        let got = trace_pair(&ToeplitzCov::new(g).unwrap(), &dr, &ds).unwrap();
        prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-3), "{} vs {}", got, want);
    }

    #[test]
    fn matvec_is_the_dense_product(g in prop::collection::vec(-2.0f64..2.0, 1..40)) {
        let x: Vec<f64> = (0..g.len()).map(|i| i as f64 - 3.0).collect();
        let want = dense(&g) * DVector::from_vec(x.clone());
        for (a, b) in matvec(&g, &x).iter().zip(want.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn indefinite_first_row_is_rejected() {
    assert!(ToeplitzCov::new(vec![1.0, 2.0]).unwrap().solve(&[1.0, 1.0]).is_err());
}
