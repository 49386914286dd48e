//! Loss families over embedding batches, each returning its value together
//! with the gradient on the embeddings it is differentiated against.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{estimate_gaussian_rows_with, sqrtm_psd, CovForm, PsdEigen};
use crate::nn::softmax_ce;
use crate::server::KnowledgeTable;

/// Embeddings (one per row) with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(vectors: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::NoSamples);
        }
        if labels.len() != vectors.nrows() {
            return Err(Error::dims(format!(
                "{} labels for {} embeddings",
                labels.len(),
                vectors.nrows()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embeddings".into()));
        }
        Ok(Self { vectors, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Row indices grouped by label, in increasing label order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            groups.entry(y).or_default().push(i);
        }
        groups
    }
}

/// Mean pairwise contrastive loss over all unordered pairs: Euclidean
/// distance for same-label pairs, `max(0, margin - distance)` otherwise.
pub fn contrastive_batch(batch: &EmbeddingBatch, margin: f64) -> Result<(f64, DMatrix<f64>)> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::NeedPair(n));
    }
    let z = &batch.vectors;
    let d = z.ncols();
    let pairs = (n * (n - 1) / 2) as f64;
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(n, d);
    let mut diff = DVector::zeros(d);
    for i in 0..n {
        for j in (i + 1)..n {
            for k in 0..d {
                diff[k] = z[(i, k)] - z[(j, k)];
            }
            let dist = diff.norm();
            // Sign of dL/d(dist) for this pair; zero at kinks and coincident points.
            let slope = if batch.labels[i] == batch.labels[j] {
                loss += dist;
                1.0
            } else if dist < margin {
                loss += margin - dist;
                -1.0
            } else {
                0.0
            };
            if slope != 0.0 && dist > 0.0 {
                let s = slope / (dist * pairs);
                for k in 0..d {
                    grad[(i, k)] += s * diff[k];
                    grad[(j, k)] -= s * diff[k];
                }
            }
        }
    }
    Ok((loss / pairs, grad))
}

/// Collaborative loss against the knowledge table, population covariance.
pub fn collaborative_batch(
    batch: &EmbeddingBatch,
    table: &KnowledgeTable,
    ridge: f64,
) -> Result<(f64, DMatrix<f64>)> {
    collaborative_batch_with(batch, table, ridge, CovForm::Population)
}

/// Sum over classes of `||mu_c - mu_R||^2 + ||Sigma_c^{1/2} - Sigma_R^{1/2}||_F^2`.
///
/// Classes with fewer than two samples in the batch or without an
/// initialized table entry contribute nothing.
pub fn collaborative_batch_with(
    batch: &EmbeddingBatch,
    table: &KnowledgeTable,
    ridge: f64,
    form: CovForm,
) -> Result<(f64, DMatrix<f64>)> {
    let d = batch.dim();
    if d != table.dim() {
        return Err(Error::dims(format!(
            "embeddings of dimension {d} against a table of dimension {}",
            table.dim()
        )));
    }
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(batch.len(), d);
    for (class, rows) in batch.by_class() {
        if class >= table.classes() {
            return Err(Error::LabelOutOfRange {
                label: class,
                classes: table.classes(),
            });
        }
        let Some(entry) = table.usable(class) else {
            continue;
        };
        let m = rows.len();
        if m < 2 {
            continue;
        }
        let sub = batch.vectors.select_rows(&rows);
        let summary = estimate_gaussian_rows_with(&sub, ridge, form)?;
        let eig = PsdEigen::new(&summary.cov)?;
        let root = eig.sqrt();
        let target_root = sqrtm_psd(&entry.cov)?;
        let mean_diff = &summary.mean - &entry.mean;
        let root_diff = &root - &target_root;
        loss += mean_diff.norm_squared() + root_diff.norm_squared();

        let cov_grad = eig.sqrt_pullback(&(&root_diff * 2.0));
        let mean_share = &mean_diff * (2.0 / m as f64);
        let cov_scale = 2.0 / form.divisor(m);
        for (local, &row) in rows.iter().enumerate() {
            let centered = sub.row(local).transpose() - &summary.mean;
            let g = &mean_share + &cov_grad * centered * cov_scale;
            for k in 0..d {
                grad[(row, k)] += g[k];
            }
        }
    }
    Ok((loss, grad))
}

/// `L_con + L_col`.
pub fn cognitive_loss(
    batch: &EmbeddingBatch,
    table: &KnowledgeTable,
    margin: f64,
    ridge: f64,
) -> Result<(f64, DMatrix<f64>)> {
    cognitive_loss_weighted(batch, table, margin, ridge, 1.0, CovForm::Population)
}

/// `L_con + col_weight * L_col`.
pub fn cognitive_loss_weighted(
    batch: &EmbeddingBatch,
    table: &KnowledgeTable,
    margin: f64,
    ridge: f64,
    col_weight: f64,
    form: CovForm,
) -> Result<(f64, DMatrix<f64>)> {
    let (con, mut grad) = contrastive_batch(batch, margin)?;
    let (col, col_grad) = collaborative_batch_with(batch, table, ridge, form)?;
    grad += col_grad * col_weight;
    Ok((con + col_weight * col, grad))
}

/// Summed Mahalanobis distance between teacher (`z_cog`) and student
/// (`z_des`) embeddings, using the inverse covariance of each sample's class.
/// The gradient is taken on `z_des` only.
pub fn descriptive_batch(
    z_cog: &DMatrix<f64>,
    z_des: &DMatrix<f64>,
    labels: &[usize],
    per_class_cov_inv: &BTreeMap<usize, DMatrix<f64>>,
) -> Result<(f64, DMatrix<f64>)> {
    if z_cog.shape() != z_des.shape() || labels.len() != z_cog.nrows() {
        return Err(Error::dims(format!(
            "teacher {:?}, student {:?}, {} labels",
            z_cog.shape(),
            z_des.shape(),
            labels.len()
        )));
    }
    let d = z_cog.ncols();
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(z_des.nrows(), d);
    for (i, &y) in labels.iter().enumerate() {
        let inv = per_class_cov_inv
            .get(&y)
            .ok_or(Error::MissingClassCovariance(y))?;
        if inv.shape() != (d, d) {
            return Err(Error::dims(format!("class {y} metric is {:?}", inv.shape())));
        }
        let v = (z_cog.row(i) - z_des.row(i)).transpose();
        let av = inv * &v;
        let dist = v.dot(&av).max(0.0).sqrt();
        loss += dist;
        if dist > 0.0 {
            for k in 0..d {
                grad[(i, k)] = -av[k] / dist;
            }
        }
    }
    Ok((loss, grad))
}

/// `alpha * CE(cognitive logits) + (1 - alpha) * CE(descriptive logits)`,
/// with gradients for both logit sets.
pub fn discriminative_loss(
    logits_cog: &DMatrix<f64>,
    logits_des: &DMatrix<f64>,
    labels: &[usize],
    alpha: f64,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} out of [0,1]")));
    }
    let (cc, g_cog) = softmax_ce(logits_cog, labels)?;
    let (cd, g_des) = softmax_ce(logits_des, labels)?;
    Ok((
        alpha * cc + (1.0 - alpha) * cd,
        g_cog * alpha,
        g_des * (1.0 - alpha),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::GaussianSummary;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn batch(rows: &[&[f64]], labels: &[usize]) -> EmbeddingBatch {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EmbeddingBatch::new(DMatrix::from_row_slice(rows.len(), d, &flat), labels.to_vec())
            .unwrap()
    }

    #[test]
    fn contrastive_examples() {
        let b = batch(&[&[0.0, 0.0], &[1.0, 0.0]], &[0, 0]);
        assert_abs_diff_eq!(contrastive_batch(&b, 1.0).unwrap().0, 1.0);

        let b = batch(&[&[0.0, 0.0], &[0.6, 0.0]], &[0, 1]);
        assert_abs_diff_eq!(contrastive_batch(&b, 1.0).unwrap().0, 0.4, epsilon = 1e-12);

        let b = batch(&[&[0.0, 0.0], &[2.0, 0.0]], &[0, 1]);
        let (l, g) = contrastive_batch(&b, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contrastive_needs_pair() {
        let b = batch(&[&[0.0, 0.0]], &[0]);
        let e = contrastive_batch(&b, 1.0).unwrap_err();
        assert!(e.to_string().contains("need a pair"));
    }

    #[test]
    fn coincident_points_have_zero_gradient() {
        let b = batch(&[&[1.0, 1.0], &[1.0, 1.0]], &[0, 0]);
        let (l, g) = contrastive_batch(&b, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collaborative_zero_at_match() {
        let b = batch(&[&[0.0, 0.0], &[2.0, 0.0], &[1.0, 1.0], &[1.0, -1.0]], &[0, 0, 0, 0]);
        let summary = estimate_gaussian_rows_with(&b.vectors, 1e-4, CovForm::Population).unwrap();
        let mut table = KnowledgeTable::new(1, 2);
        table.set(0, summary.mean.clone(), summary.cov.clone(), None);
        let (l, g) = collaborative_batch(&b, &table, 1e-4).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.norm() < 1e-8);

        let mut shifted = KnowledgeTable::new(1, 2);
        shifted.set(0, &summary.mean - dvector![1.0, 0.0], summary.cov, None);
        let (l, _) = collaborative_batch(&b, &shifted, 1e-4).unwrap();
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn collaborative_skips_cold_classes_and_singletons() {
        let b = batch(&[&[0.0, 0.0], &[2.0, 0.0], &[5.0, 5.0]], &[0, 0, 1]);
        let mut table = KnowledgeTable::new(2, 2);
        let (l, g) = collaborative_batch(&b, &table, 1e-4).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        table.set(1, dvector![0.0, 0.0], DMatrix::identity(2, 2), None);
        let (l, _) = collaborative_batch(&b, &table, 1e-4).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn collaborative_dimension_mismatch() {
        let b = batch(&[&[0.0, 0.0], &[2.0, 0.0]], &[0, 0]);
        let table = KnowledgeTable::new(1, 3);
        assert!(collaborative_batch(&b, &table, 1e-4).is_err());
    }

    #[test]
    fn collaborative_value_agrees_with_linalg() {
        let b = batch(&[&[0.0, 0.3], &[2.0, 0.1], &[1.0, 1.0]], &[0, 0, 0]);
        let mut table = KnowledgeTable::new(1, 2);
        table.set(
            0,
            dvector![0.5, 0.5],
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            None,
        );
        let (l, _) = collaborative_batch(&b, &table, 1e-4).unwrap();
        let s = estimate_gaussian_rows_with(&b.vectors, 1e-4, CovForm::Population).unwrap();
        let r = GaussianSummary::new(table.entry(0).mean.clone(), table.entry(0).cov.clone(), 0)
            .unwrap();
        assert_abs_diff_eq!(
            l,
            crate::linalg::collaborative_value(&s, &r).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn descriptive_examples() {
        let mut inv = BTreeMap::new();
        inv.insert(0, DMatrix::identity(2, 2));
        let z = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert_eq!(descriptive_batch(&z, &z, &[0], &inv).unwrap().0, 0.0);

        let cog = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let des = DMatrix::zeros(1, 2);
        let (l, g) = descriptive_batch(&cog, &des, &[0], &inv).unwrap();
        assert_abs_diff_eq!(l, 5.0);
        assert_abs_diff_eq!(g, DMatrix::from_row_slice(1, 2, &[-0.6, -0.8]), epsilon = 1e-15);

        let e = descriptive_batch(&cog, &des, &[1], &inv).unwrap_err();
        assert!(matches!(e, Error::MissingClassCovariance(1)));
    }

    #[test]
    fn discriminative_examples() {
        let cog = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        let des = DMatrix::from_row_slice(2, 2, &[-0.3, 0.2, 0.0, 1.0]);
        let labels = [0, 1];
        let (l1, _, gd) = discriminative_loss(&cog, &des, &labels, 1.0).unwrap();
        assert_abs_diff_eq!(l1, softmax_ce(&cog, &labels).unwrap().0);
        assert!(gd.iter().all(|&v| v == 0.0));
        let (l0, gc, _) = discriminative_loss(&cog, &des, &labels, 0.0).unwrap();
        assert_abs_diff_eq!(l0, softmax_ce(&des, &labels).unwrap().0);
        assert!(gc.iter().all(|&v| v == 0.0));

        let flat = DMatrix::zeros(3, 2);
        let (l, _, _) = discriminative_loss(&flat, &flat, &[0, 1, 1], 0.9).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);

        assert!(discriminative_loss(&flat, &flat, &[0, 1, 2], 0.5).is_err());
    }
}
