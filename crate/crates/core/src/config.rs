//! Experiment configuration files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{corrupt, load_idx, partition, synth_blobs, Corruption, Dataset, PartitionScheme};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::settings::{ProtocolConfig, TrainConfig};
use crate::sim::{FederatedData, Schedule, ScheduleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Runner {
    #[default]
    Protocol,
    Fedavg,
    Single,
}

impl Runner {
    pub fn name(self) -> &'static str {
        match self {
            Runner::Protocol => "protocol",
            Runner::Fedavg => "fedavg",
            Runner::Single => "single",
        }
    }
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        features: usize,
        per_class: usize,
        spread: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// IDX files; without a separate test pair the trailing `test_fraction`
    /// of the training file is held out.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: 4,
            features: 8,
            per_class: 500,
            spread: 1.0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    #[default]
    Iid,
    LabelLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub scheme: SchemeKind,
    /// Classes per client for `label_limit`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<usize>,
    pub clients: usize,
    pub n_local: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            scheme: SchemeKind::Iid,
            labels: None,
            clients: 8,
            n_local: 200,
        }
    }
}

impl PartitionSpec {
    pub fn scheme(&self) -> Result<PartitionScheme> {
        match (self.scheme, self.labels) {
            (SchemeKind::Iid, None) => Ok(PartitionScheme::Iid),
            (SchemeKind::Iid, Some(_)) => {
                Err(Error::Config("partition.labels only applies to label_limit".into()))
            }
            (SchemeKind::LabelLimit, Some(labels)) => Ok(PartitionScheme::LabelLimit { labels }),
            (SchemeKind::LabelLimit, None) => {
                Err(Error::Config("partition.labels required for label_limit".into()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    LabelFlip,
    FeatureNoise,
}

/// One corruption applied to a group of clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionGroup {
    pub clients: Vec<usize>,
    pub mode: CorruptionMode,
    pub p: f64,
}

impl CorruptionGroup {
    pub fn corruption(&self) -> Corruption {
        match self.mode {
            CorruptionMode::LabelFlip => Corruption::LabelFlip { p: self.p },
            CorruptionMode::FeatureNoise => Corruption::FeatureNoise { p: self.p },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub runner: Runner,
    pub output_dir: PathBuf,
    pub n_gen: usize,
    pub hidden: usize,
    pub gating: bool,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub corruption: Vec<CorruptionGroup>,
    pub schedule: Schedule,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: None,
            runner: Runner::Protocol,
            output_dir: PathBuf::from("out"),
            n_gen: 800,
            hidden: 64,
            gating: true,
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
            partition: PartitionSpec::default(),
            corruption: Vec::new(),
            schedule: Schedule::default(),
        }
    }
}

fn fraction(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} out of (0,1): {v}")))
    }
}

impl SimConfig {
    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("seed missing".into()))
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.train.validate()?;
        if self.hidden < 1 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if self.output_dir.as_os_str().is_empty()
            || self.output_dir.components().any(|c| matches!(c, Component::ParentDir))
        {
            return Err(Error::Config(format!(
                "output_dir must be non-empty without '..': {}",
                self.output_dir.display()
            )));
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                features,
                per_class,
                spread,
                test_fraction,
            } => {
                if *classes < 2 {
                    return Err(Error::Config("dataset.classes must be >= 2".into()));
                }
                if *features < 1 || *per_class < 1 {
                    return Err(Error::Config(
                        "dataset.features and dataset.per_class must be >= 1".into(),
                    ));
                }
                if !(*spread > 0.0 && spread.is_finite()) {
                    return Err(Error::Config(format!("dataset.spread must be > 0, got {spread}")));
                }
                fraction("dataset.test_fraction", *test_fraction)?;
            }
            DatasetSpec::Idx {
                test_images,
                test_labels,
                test_fraction,
                ..
            } => {
                if test_images.is_some() != test_labels.is_some() {
                    return Err(Error::Config(
                        "dataset.test_images and dataset.test_labels go together".into(),
                    ));
                }
                fraction("dataset.test_fraction", *test_fraction)?;
            }
        }
        let k = self.partition.clients;
        if k < 1 || self.partition.n_local < 1 {
            return Err(Error::Config("partition.clients and partition.n_local must be >= 1".into()));
        }
        self.partition.scheme()?;
        let mut seen = BTreeSet::new();
        for g in &self.corruption {
            if !(0.0..=1.0).contains(&g.p) {
                return Err(Error::Config(format!("corruption.p out of [0,1]: {}", g.p)));
            }
            for &c in &g.clients {
                if c >= k {
                    return Err(Error::Config(format!("corruption client {c} does not exist")));
                }
                if !seen.insert(c) {
                    return Err(Error::Config(format!("client {c} is in two corruption groups")));
                }
            }
        }
        self.schedule.validate(k)?;
        if self.runner == Runner::Fedavg && self.schedule.mode != ScheduleMode::Sync {
            return Err(Error::Config("runner fedavg requires schedule.mode = sync".into()));
        }
        if self.n_gen < 2 {
            return Err(Error::Config("n_gen must be >= 2".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Load the dataset, split off the test set, partition and corrupt.
    pub fn build_data(&self) -> Result<FederatedData> {
        let seed = self.seed()?;
        let (train, test) = match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                features,
                per_class,
                spread,
                test_fraction,
            } => {
                let ds = synth_blobs(
                    *classes,
                    *features,
                    *per_class,
                    *spread,
                    rng::derive(seed, Stream::Data, 0, 0),
                )?;
                ds.split(*test_fraction)?
            }
            DatasetSpec::Idx {
                images,
                labels,
                test_images,
                test_labels,
                test_fraction,
            } => {
                let ds = load_idx(images, labels)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        let test = load_idx(ti, tl)?;
                        let classes = ds.classes.max(test.classes);
                        (
                            Dataset::new(ds.features, ds.labels, classes)?,
                            Dataset::new(test.features, test.labels, classes)?,
                        )
                    }
                    _ => ds.split(*test_fraction)?,
                }
            }
        };
        let mut clients = partition(
            &train,
            self.partition.scheme()?,
            self.partition.clients,
            self.partition.n_local,
            rng::derive(seed, Stream::Data, 1, 0),
        )?;
        for g in &self.corruption {
            for &c in &g.clients {
                clients[c] = corrupt(&clients[c], g.corruption(), rng::derive(seed, Stream::Corrupt, c as u64, 0))?;
            }
        }
        Ok(FederatedData { clients, test })
    }

    pub fn protocol_config(&self, classes: usize, feature_dim: usize) -> ProtocolConfig {
        ProtocolConfig {
            train: self.train.clone(),
            classes,
            feature_dim,
            hidden: self.hidden,
            n_gen: self.n_gen,
            gating: self.gating,
        }
    }
}

/// Parse TOML text. Relative dataset paths are left as written.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read, parse and validate a config file. Relative dataset paths are
/// resolved against the file's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<SimConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let DatasetSpec::Idx {
        images,
        labels,
        test_images,
        test_labels,
        ..
    } = &mut cfg.dataset
    {
        resolve(images);
        resolve(labels);
        test_images.as_mut().map(resolve);
        test_labels.as_mut().map(resolve);
    }
    Ok(cfg)
}
