//! Local training on one participant.
//!
//! A client owns an encoder (cognitive module), a conditional generator
//! (descriptive module) and a local copy of the classifier (discriminative
//! module). Only the generator ever leaves the client.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{estimate_gaussian_rows_with, sqrtm_psd, GaussianSummary};
use crate::losses::{
    collaborative_batch_with, contrastive_batch, descriptive_batch, discriminative_loss,
    EmbeddingBatch,
};
use crate::nn::{argmax_rows, noise_with_onehot, Gradients, ModelParams};
use crate::rng::{self, Stream};
use crate::server::{initial_classifier, KnowledgeTable};
use crate::settings::{DesNoise, ProtocolConfig};

/// What the server sends back after an integration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerBroadcast {
    pub classifier: ModelParams,
    pub table: KnowledgeTable,
    /// Server integration count when the snapshot was taken.
    pub version: u64,
}

/// The only artifact a client sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpload {
    pub client_id: usize,
    pub generator: ModelParams,
    pub timestamp: f64,
}

/// Mean losses over the final local epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalStats {
    pub l_con: f64,
    pub l_col: f64,
    pub l_des: f64,
    pub l_dis: f64,
    pub batches: usize,
}

/// Losses of one minibatch, in the order they were computed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    pub epoch: usize,
    pub size: usize,
    pub l_con: f64,
    pub l_col: f64,
    pub l_des: f64,
    pub l_dis: f64,
    /// Encoder update count when the cognitive loss was evaluated.
    pub cog_encoder_version: u64,
    /// Encoder update count when the descriptive targets were produced.
    pub des_encoder_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub encoder: ModelParams,
    pub generator: ModelParams,
    pub classifier: ModelParams,
    pub dataset: Arc<ClientDataset>,
    pub local_class_knowledge: BTreeMap<usize, GaussianSummary>,
    pub interaction_count: u64,
    pub stats: LocalStats,
}

/// Fresh client. All clients built from the same `seed` share identical
/// initial modules.
pub fn init_client(
    dataset: Arc<ClientDataset>,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<ClientState> {
    if dataset.n_k() == 0 {
        return Err(Error::NoSamples);
    }
    if dataset.features.ncols() != cfg.feature_dim {
        return Err(Error::dims(format!(
            "client data has {} features, config expects {}",
            dataset.features.ncols(),
            cfg.feature_dim
        )));
    }
    let t = &cfg.train;
    let mut r = rng::rng(rng::derive(seed, Stream::Init, 0, 0));
    let encoder = ModelParams::encoder(cfg.feature_dim, cfg.hidden, t.embed_dim, &mut r)?;
    let mut r = rng::rng(rng::derive(seed, Stream::Init, 1, 0));
    let generator =
        ModelParams::generator(t.noise_dim, cfg.classes, cfg.hidden, t.embed_dim, &mut r)?;
    let classifier = initial_classifier(cfg, seed)?;
    let mut state = ClientState {
        id: dataset.client_id,
        encoder,
        generator,
        classifier,
        dataset,
        local_class_knowledge: BTreeMap::new(),
        interaction_count: 0,
        stats: LocalStats::default(),
    };
    state.local_class_knowledge = class_knowledge(&state.encoder, &state.dataset, cfg)?;
    Ok(state)
}

/// Per-class Gaussian summaries of the encoder's embeddings of `data`.
fn class_knowledge(
    encoder: &ModelParams,
    data: &ClientDataset,
    cfg: &ProtocolConfig,
) -> Result<BTreeMap<usize, GaussianSummary>> {
    let z = encoder.predict(&data.features)?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in data.labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(c, rows)| {
            let s = estimate_gaussian_rows_with(
                &z.select_rows(&rows),
                cfg.train.ridge,
                cfg.train.cov_form,
            )?;
            Ok((c, s))
        })
        .collect()
}

/// Per-class inverse covariance, inverse Cholesky factor and mean.
struct ClassMetric {
    inv: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    whiten: DMatrix<f64>,
    mean: DVector<f64>,
}

impl ClassMetric {
    fn new(s: &GaussianSummary) -> Result<Self> {
        let chol = s
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::IllConditioned(s.cov.min()))?;
        let d = s.cov.nrows();
        let whiten = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::IllConditioned(s.cov.min()))?;
        Ok(ClassMetric {
            inv: chol.inverse(),
            sqrt: sqrtm_psd(&s.cov)?,
            whiten,
            mean: s.mean.clone(),
        })
    }

    fn whiten_rows(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut eps = z.clone();
        for i in 0..z.nrows() {
            let w = &self.whiten * (z.row(i).transpose() - &self.mean);
            eps.set_row(i, &w.transpose());
        }
        eps
    }
}

/// Right-multiply each gradient row by its class's covariance square root.
/// This turns the per-sample descriptive gradient into a unit step along
/// the whitened residual, whatever the scale of the class.
fn precondition(grad: &DMatrix<f64>, labels: &[usize], sqrt_of: impl Fn(usize) -> DMatrix<f64>) -> DMatrix<f64> {
    let mut out = grad.clone();
    for (i, &y) in labels.iter().enumerate() {
        let row = grad.row(i) * sqrt_of(y);
        out.set_row(i, &row);
    }
    out
}

fn class_metrics(
    knowledge: &BTreeMap<usize, GaussianSummary>,
) -> Result<BTreeMap<usize, ClassMetric>> {
    knowledge
        .iter()
        .map(|(&c, s)| Ok((c, ClassMetric::new(s)?)))
        .collect()
}

/// Rescale `g` so its norm does not exceed `max`; `max == 0` leaves it alone.
fn clip(mut g: Gradients, max: f64) -> Gradients {
    let norm = g.norm();
    if max > 0.0 && norm > max {
        g.scale(max / norm);
    }
    g
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged(format!("{name} is not finite")))
    }
}

/// One local pass: [`client_update_traced`] without the per-batch trace.
pub fn client_update(
    state: &ClientState,
    inbound: &ServerBroadcast,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<(ClientState, ClientUpload)> {
    let (s, u, _) = client_update_traced(state, inbound, cfg, seed)?;
    Ok((s, u))
}

/// Adopt the inbound classifier, then for every minibatch of every local
/// epoch: update the encoder on the cognitive loss, the generator on the
/// descriptive loss against the updated encoder, and finally all three
/// modules on the discriminative loss.
pub fn client_update_traced(
    state: &ClientState,
    inbound: &ServerBroadcast,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<(ClientState, ClientUpload, Vec<BatchTrace>)> {
    let t = &cfg.train;
    if inbound.classifier.input_dim() != state.encoder.output_dim()
        || inbound.table.dim() != state.encoder.output_dim()
        || inbound.classifier.output_dim() != cfg.classes
    {
        return Err(Error::dims("broadcast does not match client modules"));
    }
    let mut next = state.clone();
    next.classifier = inbound.classifier.clone();

    let data = Arc::clone(&state.dataset);
    let n = data.n_k();
    let mut r = rng::rng(seed);
    let mut traces = Vec::new();
    let mut encoder_version = 0u64;
    let lr = t.learning_rate;

    for epoch in 0..t.local_epochs {
        let metrics = class_metrics(&class_knowledge(&next.encoder, &data, cfg)?)?;
        let inverses: BTreeMap<usize, DMatrix<f64>> =
            metrics.iter().map(|(&c, m)| (c, m.inv.clone())).collect();
        let absent: Vec<usize> = (0..cfg.classes).filter(|c| !metrics.contains_key(c)).collect();
        let pooled = if t.absent_marginal && !absent.is_empty() {
            let z = next.encoder.predict(&data.features)?;
            let s = estimate_gaussian_rows_with(&z, t.ridge, t.cov_form)?;
            let metric = ClassMetric::new(&s)?;
            let inv: BTreeMap<usize, DMatrix<f64>> =
                absent.iter().map(|&c| (c, metric.inv.clone())).collect();
            Some((metric, inv))
        } else {
            None
        };
        let order = rng::permutation(n, &mut r);
        let mut sums = LocalStats::default();
        for chunk in order.chunks(t.batch_size.max(1)) {
            let x = data.features.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let m = chunk.len();

            // Cognitive module.
            let cog_version = encoder_version;
            let (mut l_con, mut l_col) = (0.0, 0.0);
            if m >= 2 {
                let trace = next.encoder.forward(&x)?;
                let batch = EmbeddingBatch::new(trace.output().clone(), labels.clone())?;
                let (con, mut grad) = contrastive_batch(&batch, t.margin)?;
                let (col, col_grad) =
                    collaborative_batch_with(&batch, &inbound.table, t.ridge, t.cov_form)?;
                l_con = finite("L_con", con)?;
                l_col = finite("L_col", col)?;
                grad += col_grad * t.col_weight;
                let (grads, _) = next.encoder.backward(&trace, &grad)?;
                next.encoder.sgd_step(&clip(grads, t.grad_clip), lr)?;
                encoder_version += 1;
            }

            // Descriptive module, against the updated encoder.
            let enc_trace = next.encoder.forward(&x)?;
            let noise = match t.des_noise {
                DesNoise::Independent => rng::normal_matrix(m, t.noise_dim, &mut r),
                DesNoise::Whitened => {
                    let z = enc_trace.output();
                    let mut eps = DMatrix::zeros(m, t.noise_dim);
                    for (i, y) in labels.iter().enumerate() {
                        let cm = &metrics[y];
                        let w = &cm.whiten * (z.row(i).transpose() - &cm.mean);
                        eps.set_row(i, &w.transpose());
                    }
                    eps
                }
            };
            let mut gen_grads = None;
            if let Some((metric, inv)) = &pooled {
                let z = enc_trace.output();
                let fake: Vec<usize> = (0..m).map(|_| absent[r.random_range(0..absent.len())]).collect();
                let eps = match t.des_noise {
                    DesNoise::Independent => rng::normal_matrix(m, t.noise_dim, &mut r),
                    DesNoise::Whitened => metric.whiten_rows(z),
                };
                let input = noise_with_onehot(&eps, &fake, cfg.classes);
                let tr = next.generator.forward(&input)?;
                let (_, g) = descriptive_batch(z, tr.output(), &fake, inv)?;
                let g = precondition(&g, &fake, |_| metric.sqrt.clone());
                gen_grads = Some(next.generator.backward(&tr, &(g / m as f64))?.0);
            }
            let gen_input = noise_with_onehot(&noise, &labels, cfg.classes);
            let gen_trace = next.generator.forward(&gen_input)?;
            let (l_des_sum, des_grad) =
                descriptive_batch(enc_trace.output(), gen_trace.output(), &labels, &inverses)?;
            // The loss is a batch sum; step on its per-sample mean so the
            // generator's step size does not grow with the batch.
            let l_des = finite("L_des", l_des_sum)? / m as f64;
            let des_grad = precondition(&des_grad, &labels, |y| metrics[&y].sqrt.clone());
            let (mut grads, _) = next.generator.backward(&gen_trace, &(des_grad / m as f64))?;
            if let Some(extra) = &gen_grads {
                grads.add_assign(extra);
            }
            next.generator.sgd_step(&clip(grads, t.grad_clip), lr)?;
            let des_version = encoder_version;

            // Discriminative module and the upstream modules.
            let gen_trace = next.generator.forward(&gen_input)?;
            let cls_cog = next.classifier.forward(enc_trace.output())?;
            let cls_des = next.classifier.forward(gen_trace.output())?;
            let (l_dis, g_cog, g_des) =
                discriminative_loss(cls_cog.output(), cls_des.output(), &labels, t.alpha)?;
            finite("L_dis", l_dis)?;
            let (mut cls_grads, dz_cog) = next.classifier.backward(&cls_cog, &g_cog)?;
            let (cls_grads_des, dz_des) = next.classifier.backward(&cls_des, &g_des)?;
            cls_grads.add_assign(&cls_grads_des);
            let (enc_grads, _) = next.encoder.backward(&enc_trace, &dz_cog)?;
            let (gen_grads, _) = next.generator.backward(&gen_trace, &dz_des)?;
            next.classifier.sgd_step(&clip(cls_grads, t.grad_clip), lr)?;
            next.encoder.sgd_step(&clip(enc_grads, t.grad_clip), lr)?;
            next.generator.sgd_step(&clip(gen_grads, t.grad_clip), lr)?;
            encoder_version += 1;

            sums.l_con += l_con;
            sums.l_col += l_col;
            sums.l_des += l_des;
            sums.l_dis += l_dis;
            sums.batches += 1;
            traces.push(BatchTrace {
                epoch,
                size: m,
                l_con,
                l_col,
                l_des,
                l_dis,
                cog_encoder_version: cog_version,
                des_encoder_version: des_version,
            });
        }
        let b = sums.batches.max(1) as f64;
        next.stats = LocalStats {
            l_con: sums.l_con / b,
            l_col: sums.l_col / b,
            l_des: sums.l_des / b,
            l_dis: sums.l_dis / b,
            batches: sums.batches,
        };
    }

    if t.local_epochs > 0 {
        next.local_class_knowledge = class_knowledge(&next.encoder, &data, cfg)?;
    }
    next.interaction_count += 1;
    let upload = ClientUpload {
        client_id: next.id,
        generator: next.generator.clone(),
        timestamp: 0.0,
    };
    Ok((next, upload, traces))
}

/// Fraction of `testset` for which `classifier(encoder(x))` predicts the label.
pub fn accuracy(encoder: &ModelParams, classifier: &ModelParams, testset: &Dataset) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::NoSamples);
    }
    let logits = classifier.predict(&encoder.predict(&testset.features)?)?;
    let hits = argmax_rows(&logits)
        .iter()
        .zip(&testset.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / testset.len() as f64)
}

/// Accuracy of the client's own encoder and current classifier.
pub fn local_accuracy(state: &ClientState, testset: &Dataset) -> Result<f64> {
    accuracy(&state.encoder, &state.classifier, testset)
}
