//! Datasets, federated partitioning and adversarial corruption.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x f`, one sample per row.
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::NoSamples);
        }
        if labels.len() != features.nrows() {
            return Err(Error::dims(format!(
                "{} labels for {} rows",
                labels.len(),
                features.nrows()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Split off the trailing `test_fraction` of rows as a test set.
    pub fn split(&self, test_fraction: f64) -> Result<(Dataset, Dataset)> {
        let n = self.len();
        let test = ((n as f64) * test_fraction).round() as usize;
        if test == 0 || test >= n {
            return Err(Error::InvalidArgument(format!(
                "test fraction {test_fraction} leaves an empty split of {n} samples"
            )));
        }
        let train: Vec<usize> = (0..n - test).collect();
        let held: Vec<usize> = (n - test..n).collect();
        Ok((self.subset(&train), self.subset(&held)))
    }

    /// CSV with columns `f0..f{f-1},label`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.feature_dim())
            .map(|j| format!("f{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (i, label) in self.labels.iter().enumerate() {
            for v in self.features.row(i).iter() {
                write!(out, "{v},")?;
            }
            writeln!(out, "{label}")?;
        }
        Ok(())
    }
}

/// Gaussian blobs, one per class, with isotropic spread and class means at
/// least `4 * spread` apart. Rows are shuffled.
pub fn synth_blobs(
    classes: usize,
    features: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class < 1 || features < 1 {
        return Err(Error::InvalidArgument(format!(
            "blobs need >= 2 classes, >= 1 feature and >= 1 sample per class \
             (got {classes}, {features}, {per_class})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("spread must be >= 0, got {spread}")));
    }
    let mut r = rng::rng(seed);
    let mut means = rng::normal_matrix(classes, features, &mut r);
    let mut min_dist = f64::INFINITY;
    for a in 0..classes {
        for b in (a + 1)..classes {
            min_dist = min_dist.min((means.row(a) - means.row(b)).norm());
        }
    }
    let required = 4.0 * spread;
    if min_dist < required {
        means *= required / min_dist.max(f64::MIN_POSITIVE);
    }
    let n = classes * per_class;
    let noise = rng::normal_matrix(n, features, &mut r);
    let order = rng::permutation(n, &mut r);
    let mut x = DMatrix::zeros(n, features);
    let mut labels = vec![0; n];
    for (row, &slot) in order.iter().enumerate() {
        let c = slot / per_class;
        labels[row] = c;
        for j in 0..features {
            x[(row, j)] = means[(c, j)] + spread * noise[(slot, j)];
        }
    }
    Dataset::new(x, labels, classes)
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse the IDX image and label files. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_file(images_path.as_ref())?;
    let labels = read_file(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32(images, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx(format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32(images, 4, "image")? as usize;
    let rows = read_u32(images, 8, "image")? as usize;
    let cols = read_u32(images, 12, "image")? as usize;
    let pixels = rows * cols;
    let body = &images[16..];
    if body.len() < count * pixels {
        return Err(Error::Truncated(format!(
            "image data: {} of {} bytes",
            body.len(),
            count * pixels
        )));
    }

    let magic = read_u32(labels, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx(format!("bad label magic {magic:#010x}")));
    }
    let label_count = read_u32(labels, 4, "label")? as usize;
    if label_count != count {
        return Err(Error::Idx(format!(
            "count mismatch: {count} images but {label_count} labels"
        )));
    }
    let label_body = &labels[8..];
    if label_body.len() < count {
        return Err(Error::Truncated(format!(
            "label data: {} of {count} bytes",
            label_body.len()
        )));
    }
    if count == 0 {
        return Err(Error::NoSamples);
    }

    let features = DMatrix::from_fn(count, pixels, |i, j| f64::from(body[i * pixels + j]) / 255.0);
    let ys: Vec<usize> = label_body[..count].iter().map(|&b| b as usize).collect();
    let classes = ys.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(features, ys, classes)
}

/// Encode images (`count x rows*cols` bytes) and labels in IDX format.
pub fn encode_idx(rows: u32, cols: u32, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let count = labels.len() as u32;
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, count] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}

/// One client's share of a parent dataset, materialized so that corruption
/// can alter it without touching the parent.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    /// Rows of the parent dataset, in local order.
    pub indices: Vec<usize>,
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ClientDataset {
    pub fn from_parent(client_id: usize, parent: &Dataset, indices: Vec<usize>) -> Self {
        let sub = parent.subset(&indices);
        Self {
            client_id,
            indices,
            features: sub.features,
            labels: sub.labels,
            classes: parent.classes,
        }
    }

    pub fn n_k(&self) -> usize {
        self.indices.len()
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn as_dataset(&self) -> Dataset {
        Dataset {
            features: self.features.clone(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    /// Each client holds exactly `labels` classes.
    LabelLimit { labels: usize },
}

/// Split `ds` among `clients` participants with `n_local` samples each.
pub fn partition(
    ds: &Dataset,
    scheme: PartitionScheme,
    clients: usize,
    n_local: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if clients == 0 || n_local == 0 {
        return Err(Error::Infeasible("need at least one client and one sample".into()));
    }
    let mut r = rng::rng(seed);
    match scheme {
        PartitionScheme::Iid => {
            if clients * n_local > ds.len() {
                return Err(Error::Infeasible(format!(
                    "{clients} clients x {n_local} samples exceeds {} available",
                    ds.len()
                )));
            }
            let order = rng::permutation(ds.len(), &mut r);
            Ok(order
                .chunks(n_local)
                .take(clients)
                .enumerate()
                .map(|(k, chunk)| ClientDataset::from_parent(k, ds, chunk.to_vec()))
                .collect())
        }
        PartitionScheme::LabelLimit { labels } => {
            if labels == 0 || labels > ds.classes {
                return Err(Error::Infeasible(format!(
                    "{labels} labels per client with {} classes",
                    ds.classes
                )));
            }
            if n_local < labels {
                return Err(Error::Infeasible(format!(
                    "{n_local} samples cannot cover {labels} labels"
                )));
            }
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
            for (i, &y) in ds.labels.iter().enumerate() {
                pools[y].push(i);
            }
            if let Some(c) = (0..ds.classes).find(|&c| pools[c].is_empty()) {
                return Err(Error::Infeasible(format!("class {c} has no samples")));
            }
            let mut queues: Vec<Vec<usize>> = pools
                .iter()
                .map(|pool| {
                    let perm = rng::permutation(pool.len(), &mut r);
                    perm.into_iter().map(|i| pool[i]).collect()
                })
                .collect();
            let mut out = Vec::with_capacity(clients);
            for k in 0..clients {
                let perm = rng::permutation(ds.classes, &mut r);
                let mut chosen: Vec<usize> = perm[..labels].to_vec();
                chosen.sort_unstable();
                let mut idx = Vec::with_capacity(n_local);
                for (slot, &c) in chosen.iter().enumerate() {
                    let take = n_local / labels + usize::from(slot < n_local % labels);
                    for _ in 0..take {
                        // Fall back to sampling with replacement once the pool is drained.
                        let i = queues[c]
                            .pop()
                            .unwrap_or_else(|| pools[c][r.random_range(0..pools[c].len())]);
                        idx.push(i);
                    }
                }
                let perm = rng::permutation(idx.len(), &mut r);
                let idx: Vec<usize> = perm.into_iter().map(|i| idx[i]).collect();
                out.push(ClientDataset::from_parent(k, ds, idx));
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Corruption {
    /// Each label is replaced by a different uniformly drawn class with probability `p`.
    LabelFlip { p: f64 },
    /// Each feature value is replaced by a draw from that feature's local
    /// empirical marginal with probability `p`.
    FeatureNoise { p: f64 },
}

pub fn corrupt(cd: &ClientDataset, mode: Corruption, seed: u64) -> Result<ClientDataset> {
    let p = match mode {
        Corruption::LabelFlip { p } | Corruption::FeatureNoise { p } => p,
    };
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("corruption probability {p} out of [0,1]")));
    }
    let mut r = rng::rng(seed);
    let mut out = cd.clone();
    match mode {
        Corruption::LabelFlip { p } => {
            for y in out.labels.iter_mut() {
                if r.random_bool(p) {
                    let shift = r.random_range(1..cd.classes);
                    *y = (*y + shift) % cd.classes;
                }
            }
        }
        Corruption::FeatureNoise { p } => {
            let n = cd.features.nrows();
            for j in 0..cd.features.ncols() {
                for i in 0..n {
                    if r.random_bool(p) {
                        out.features[(i, j)] = cd.features[(r.random_range(0..n), j)];
                    }
                }
            }
        }
    }
    Ok(out)
}
