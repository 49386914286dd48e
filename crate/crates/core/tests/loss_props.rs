use std::collections::BTreeMap;

use kshare::losses::{
    collaborative_batch, contrastive_batch, descriptive_batch, discriminative_loss, EmbeddingBatch,
};
use kshare::nn::{softmax_ce, ModelParams};
use kshare::rng::{normal_matrix, permutation, rng, SimRng};
use kshare::server::KnowledgeTable;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

const EPS: f64 = 1e-5;

fn fd(x: &DMatrix<f64>, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        let mut p = x.clone();
        p[(i, j)] += EPS;
        let mut m = x.clone();
        m[(i, j)] -= EPS;
        (f(&p) - f(&m)) / (2.0 * EPS)
    })
}

fn close(a: &DMatrix<f64>, n: &DMatrix<f64>) -> bool {
    let scale = a.norm().max(n.norm());
    scale < 1e-10 || (a - n).norm() / scale < 1e-3
}

fn pd(d: usize, r: &mut SimRng) -> DMatrix<f64> {
    let a = normal_matrix(d, d, r);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.2
}

fn batch(z: &DMatrix<f64>, y: &[usize]) -> EmbeddingBatch {
    EmbeddingBatch::new(z.clone(), y.to_vec()).unwrap()
}

fn table(classes: usize, d: usize, r: &mut SimRng) -> KnowledgeTable {
    let mut t = KnowledgeTable::new(classes, d);
    for c in 0..classes {
        t.set(c, DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0)), pd(d, r), None);
    }
    t
}

/// Labels with at least two of each class when `n` allows.
fn labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| (i / 2) % classes).collect()
}

fn away_from_kinks(z: &DMatrix<f64>, y: &[usize], margin: f64) -> bool {
    let n = z.nrows();
    (0..n).all(|i| {
        (i + 1..n).all(|j| {
            let d = (z.row(i) - z.row(j)).norm();
            d > 1e-3 && (y[i] == y[j] || (d - margin).abs() > 1e-3)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradients_match_finite_differences(
        seed in any::<u64>(),
        n in prop::sample::select(vec![2usize, 8, 32]),
        d in prop::sample::select(vec![2usize, 8]),
    ) {
        let mut r = rng(seed);
        let z = normal_matrix(n, d, &mut r) * 0.5;
        let y = labels(n, 2);
        if away_from_kinks(&z, &y, 1.0) {
            let (_, g) = contrastive_batch(&batch(&z, &y), 1.0).unwrap();
            prop_assert!(close(&g, &fd(&z, |m| contrastive_batch(&batch(m, &y), 1.0).unwrap().0)));
        }

        let t = table(2, d, &mut r);
        let (_, g) = collaborative_batch(&batch(&z, &y), &t, 1e-4).unwrap();
        let num = fd(&z, |m| collaborative_batch(&batch(m, &y), &t, 1e-4).unwrap().0);
        prop_assert!(close(&g, &num), "collaborative n={n} d={d}");

        let inv: BTreeMap<usize, DMatrix<f64>> = (0..2).map(|c| (c, pd(d, &mut r))).collect();
        let teacher = normal_matrix(n, d, &mut r);
        let (_, g) = descriptive_batch(&teacher, &z, &y, &inv).unwrap();
        prop_assert!(close(&g, &fd(&z, |m| descriptive_batch(&teacher, m, &y, &inv).unwrap().0)));
    }

    #[test]
    fn contrastive_is_permutation_invariant(seed in any::<u64>(), n in 2usize..16) {
        let mut r = rng(seed);
        let z = normal_matrix(n, 3, &mut r) * 0.6;
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let p = permutation(n, &mut r);
        let zp = z.select_rows(&p);
        let yp: Vec<usize> = p.iter().map(|&i| y[i]).collect();
        let (l, g) = contrastive_batch(&batch(&z, &y), 1.0).unwrap();
        let (lp, gp) = contrastive_batch(&batch(&zp, &yp), 1.0).unwrap();
        prop_assert!((l - lp).abs() < 1e-12 * l.abs().max(1.0));
        prop_assert!((g.select_rows(&p) - gp).norm() < 1e-12 * g.norm().max(1.0));
    }

    #[test]
    fn collaborative_is_translation_covariant(seed in any::<u64>(), n in 4usize..20) {
        let mut r = rng(seed);
        let d = 3;
        let z = normal_matrix(n, d, &mut r);
        let y = labels(n, 2);
        let t = table(2, d, &mut r);
        let shift = DVector::from_fn(d, |_, _| r.random_range(-5.0..5.0));
        let mut zs = z.clone();
        for mut row in zs.row_iter_mut() {
            row += shift.transpose();
        }
        let mut ts = KnowledgeTable::new(2, d);
        for c in 0..2 {
            let e = t.entry(c);
            ts.set(c, &e.mean + &shift, e.cov.clone(), None);
        }
        let a = collaborative_batch(&batch(&z, &y), &t, 1e-4).unwrap().0;
        let b = collaborative_batch(&batch(&zs, &y), &ts, 1e-4).unwrap().0;
        prop_assert!((a - b).abs() < 1e-8 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn discriminative_is_affine_in_alpha(seed in any::<u64>()) {
        let mut r = rng(seed);
        let lc = normal_matrix(7, 4, &mut r) * 3.0;
        let ld = normal_matrix(7, 4, &mut r) * 3.0;
        let y: Vec<usize> = (0..7).map(|_| r.random_range(0..4)).collect();
        let cc = softmax_ce(&lc, &y).unwrap().0;
        let cd = softmax_ce(&ld, &y).unwrap().0;
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let l = discriminative_loss(&lc, &ld, &y, alpha).unwrap().0;
            prop_assert!((l - (alpha * cc + (1.0 - alpha) * cd)).abs() < 1e-12);
            let lo = cc.min(cd) - 1e-12;
            let hi = cc.max(cd) + 1e-12;
            prop_assert!(l >= lo && l <= hi);
        }
    }

    #[test]
    fn softmax_is_finite_for_large_logits(seed in any::<u64>(), scale in 1.0f64..1e4) {
        let mut r = rng(seed);
        let logits = normal_matrix(5, 6, &mut r).map(|v| v.signum() * scale);
        let y: Vec<usize> = (0..5).map(|_| r.random_range(0..6)).collect();
        let (l, g) = softmax_ce(&logits, &y).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
        prop_assert!(g.iter().all(|v| v.is_finite()));
    }
}

/// Scalar parameter `(layer, row, col)` of a model, read and written by copy.
fn with_weight(m: &ModelParams, layer: usize, i: usize, j: usize, delta: f64) -> ModelParams {
    let mut layers = m.layers().to_vec();
    layers[layer].weight[(i, j)] += delta;
    ModelParams::new(m.role, layers).unwrap()
}

#[test]
fn contrastive_through_encoder_matches_finite_differences() {
    let mut r = rng(5);
    let enc = ModelParams::encoder(4, 6, 3, &mut r).unwrap();
    let x = normal_matrix(10, 4, &mut r);
    let y = labels(10, 3);
    let loss = |m: &ModelParams| {
        let z = m.predict(&x).unwrap();
        contrastive_batch(&batch(&z, &y), 1.0).unwrap().0
    };
    let trace = enc.forward(&x).unwrap();
    let (_, dz) = contrastive_batch(&batch(trace.output(), &y), 1.0).unwrap();
    let (grads, _) = enc.backward(&trace, &dz).unwrap();
    let analytic: Vec<f64> = grads.layers.iter().flat_map(|l| l.weight.iter().copied()).collect();
    let mut numeric = Vec::new();
    for (li, l) in enc.layers().iter().enumerate() {
        // Column-major to line up with the analytic flattening.
        for j in 0..l.weight.ncols() {
            for i in 0..l.weight.nrows() {
                numeric.push((loss(&with_weight(&enc, li, i, j, EPS)) - loss(&with_weight(&enc, li, i, j, -EPS))) / (2.0 * EPS));
            }
        }
    }
    let a = DVector::from_vec(analytic);
    let n = DVector::from_vec(numeric);
    assert!((&a - &n).norm() / a.norm().max(n.norm()) < 1e-3);
}
