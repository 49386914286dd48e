use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CovForm;

/// Hyperparameters shared by client training and server integration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Contrastive margin between different-class pairs.
    pub margin: f64,
    /// Weight of the cognitive-branch cross-entropy in the discriminative loss.
    pub alpha: f64,
    /// Confidence level of the trace gate.
    pub beta: f64,
    /// Ridge added to every covariance estimate.
    pub ridge: f64,
    pub local_epochs: usize,
    pub noise_dim: usize,
    pub embed_dim: usize,
    /// Relative weight of the collaborative term in the cognitive loss.
    pub col_weight: f64,
    pub cov_form: CovForm,
    pub des_noise: DesNoise,
    /// Train the generator's outputs for locally absent classes towards the
    /// pooled local embedding distribution.
    pub absent_marginal: bool,
    /// Largest gradient norm a client module steps on; 0 disables clipping.
    pub grad_clip: f64,
}

/// Generator input used while fitting the descriptive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesNoise {
    /// The teacher embedding whitened by its class Gaussian,
    /// `L_c^-1 (z - mu_c)` with `Sigma_c = L_c L_c^T`. Approximately standard
    /// normal, so fresh noise at the server samples the class distribution.
    #[default]
    Whitened,
    /// Fresh standard normal noise, unrelated to the teacher sample.
    Independent,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 64,
            margin: 1.0,
            alpha: 0.9,
            beta: 1.25,
            ridge: 1e-4,
            local_epochs: 1,
            noise_dim: 8,
            embed_dim: 8,
            col_weight: 1.0,
            cov_form: CovForm::Population,
            des_noise: DesNoise::Whitened,
            absent_marginal: true,
            grad_clip: 10.0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be > 0, got {v}")))
    }
}

fn positive_int(name: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be >= 1, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("learning_rate", self.learning_rate)?;
        positive_int("batch_size", self.batch_size)?;
        positive("margin", self.margin)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha out of [0,1]: {}", self.alpha)));
        }
        if !(self.beta > 1.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be > 1, got {}", self.beta)));
        }
        positive("ridge", self.ridge)?;
        positive_int("local_epochs", self.local_epochs)?;
        positive_int("noise_dim", self.noise_dim)?;
        positive_int("embed_dim", self.embed_dim)?;
        if self.des_noise == DesNoise::Whitened && self.noise_dim != self.embed_dim {
            return Err(Error::Config(format!(
                "des_noise = whitened needs noise_dim == embed_dim, got {} and {}",
                self.noise_dim, self.embed_dim
            )));
        }
        if !(self.col_weight >= 0.0 && self.col_weight.is_finite()) {
            return Err(Error::Config(format!(
                "col_weight must be >= 0, got {}",
                self.col_weight
            )));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip must be >= 0, got {}", self.grad_clip)));
        }
        Ok(())
    }
}

/// Everything the protocol needs beyond [`TrainConfig`]: problem shape,
/// hidden width and server-side generation size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    pub classes: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    /// Embeddings generated per upload, split evenly across classes.
    pub n_gen: usize,
    /// When false every class of every upload is learned.
    pub gating: bool,
}

impl ProtocolConfig {
    pub fn new(train: TrainConfig, classes: usize, feature_dim: usize) -> Self {
        Self {
            train,
            classes,
            feature_dim,
            hidden: 64,
            n_gen: 800,
            gating: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        positive_int("feature_dim", self.feature_dim)?;
        positive_int("hidden", self.hidden)?;
        if self.n_gen < 2 * self.classes {
            return Err(Error::Config(format!(
                "n_gen must give at least 2 samples per class, got {}",
                self.n_gen
            )));
        }
        Ok(())
    }

    /// Number of generated embeddings for class `c`.
    pub fn gen_per_class(&self, c: usize) -> usize {
        let base = self.n_gen / self.classes;
        base + usize::from(c < self.n_gen % self.classes)
    }
}
