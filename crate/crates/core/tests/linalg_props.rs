use kshare::linalg::{
    bures_w2_sq, collaborative_value, estimate_gaussian_rows, sqrtm_psd, transport_map,
    GaussianSummary,
};
use kshare::rng::{normal_matrix, rng, SimRng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn orthogonal(d: usize, r: &mut SimRng) -> DMatrix<f64> {
    normal_matrix(d, d, r).qr().q()
}

/// `Q diag(l) Q^T` with eigenvalues spread log-uniformly over `[lo, lo * cond]`.
fn spectrum(q: &DMatrix<f64>, lo: f64, cond: f64, r: &mut SimRng) -> DMatrix<f64> {
    let d = q.nrows();
    let l = DVector::from_fn(d, |_, _| lo * cond.powf(r.random_range(0.0..1.0)));
    q * DMatrix::from_diagonal(&l) * q.transpose()
}

fn summary(d: usize, r: &mut SimRng) -> GaussianSummary {
    let q = orthogonal(d, r);
    let cov = spectrum(&q, 0.05, 50.0, r);
    let mean = DVector::from_fn(d, |_, _| r.random_range(-2.0..2.0));
    GaussianSummary::new(mean, cov, 16).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sqrtm_round_trip_up_to_cond_1e6(seed in any::<u64>(), d in 1usize..9, log_cond in 0.0f64..6.0) {
        let mut r = rng(seed);
        let q = orthogonal(d, &mut r);
        let s = spectrum(&q, 1e-3, 10f64.powf(log_cond), &mut r);
        let root = sqrtm_psd(&s).unwrap();
        prop_assert!((&root * &root - &s).norm() / s.norm() < 1e-8);
        prop_assert!((&root - root.transpose()).norm() < 1e-10 * root.norm());
    }

    #[test]
    fn bures_metric_axioms(seed in any::<u64>(), d in 1usize..7) {
        let mut r = rng(seed);
        let (a, b) = (summary(d, &mut r), summary(d, &mut r));
        let ab = bures_w2_sq(&a, &b).unwrap();
        let ba = bures_w2_sq(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-8);
        prop_assert!(ab >= -1e-12);
        prop_assert!(bures_w2_sq(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn bures_diagonal_closed_form(seed in any::<u64>(), d in 1usize..9) {
        let mut r = rng(seed);
        let la = DVector::from_fn(d, |_, _| r.random_range(1e-3..5.0));
        let lb = DVector::from_fn(d, |_, _| r.random_range(1e-3..5.0));
        let ma = DVector::from_fn(d, |_, _| r.random_range(-3.0..3.0));
        let mb = DVector::from_fn(d, |_, _| r.random_range(-3.0..3.0));
        let expect: f64 = (&ma - &mb).norm_squared()
            + la.iter().zip(lb.iter()).map(|(x, y): (&f64, &f64)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>();
        let a = GaussianSummary::new(ma, DMatrix::from_diagonal(&la), 4).unwrap();
        let b = GaussianSummary::new(mb, DMatrix::from_diagonal(&lb), 4).unwrap();
        prop_assert!((bures_w2_sq(&a, &b).unwrap() - expect).abs() < 1e-8 * expect.max(1.0));
    }

    #[test]
    fn collaborative_value_matches_bures_when_commuting(seed in any::<u64>(), d in 1usize..9) {
        let mut r = rng(seed);
        let q = orthogonal(d, &mut r);
        let a = GaussianSummary::new(DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0)), spectrum(&q, 0.01, 100.0, &mut r), 8).unwrap();
        let b = GaussianSummary::new(DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0)), spectrum(&q, 0.01, 100.0, &mut r), 8).unwrap();
        let cv = collaborative_value(&a, &b).unwrap();
        let w = bures_w2_sq(&a, &b).unwrap();
        prop_assert!((cv - w).abs() < 1e-8 * w.max(1.0), "{cv} vs {w}");
    }

    #[test]
    fn transport_pushes_source_onto_target(seed in any::<u64>(), d in 1usize..9) {
        let mut r = rng(seed);
        let (qs, qt) = (orthogonal(d, &mut r), orthogonal(d, &mut r));
        let src = spectrum(&qs, 0.01, 1e3, &mut r);
        let dst = spectrum(&qt, 0.01, 1e3, &mut r);
        let t = transport_map(&src, &dst).unwrap();
        prop_assert!((&t * &src * &t - &dst).norm() / dst.norm() < 1e-6);
        prop_assert!((&t - t.transpose()).norm() < 1e-8 * t.norm());
    }

    #[test]
    fn estimated_covariance_is_symmetric_psd(seed in any::<u64>(), m in 1usize..40, d in 1usize..8) {
        let mut r = rng(seed);
        let rows = normal_matrix(m, d, &mut r);
        let s = estimate_gaussian_rows(&rows, 1e-4).unwrap();
        prop_assert_eq!(&s.cov, &s.cov.transpose());
        let min = s.cov.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= 1e-4 - 1e-12, "min eigenvalue {min}");
    }
}

#[test]
fn population_covariance_by_hand() {
    // Independent oracle: explicit double loop with divisor m.
    let mut r = rng(11);
    let rows = normal_matrix(9, 3, &mut r);
    let s = estimate_gaussian_rows(&rows, 0.0).unwrap();
    let m = rows.nrows() as f64;
    let mean: Vec<f64> = (0..3).map(|j| rows.column(j).sum() / m).collect();
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = 0.0;
            for i in 0..rows.nrows() {
                acc += (rows[(i, a)] - mean[a]) * (rows[(i, b)] - mean[b]);
            }
            assert!((s.cov[(a, b)] - acc / m).abs() < 1e-10);
        }
        assert!((s.mean[a] - mean[a]).abs() < 1e-12);
    }
}
