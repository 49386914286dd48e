//! Knowledge integration on the server.
//!
//! For every upload the server samples embeddings from the client's
//! generator per class, compares the trace of their covariance with the
//! representative covariance, trains the central classifier on the classes
//! that pass the gate, and replaces the representative covariance when the
//! upload is tighter by more than a factor `beta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::client::{ClientUpload, ServerBroadcast};
use crate::error::{Error, Result};
use crate::linalg::estimate_gaussian_rows_with;
use crate::nn::{noise_with_onehot, softmax_ce, ModelParams};
use crate::rng::{self, Stream};
use crate::settings::ProtocolConfig;

/// Representative Gaussian for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub initialized: bool,
    pub last_winner: Option<usize>,
}

/// Per-class collaborative cognition, indexed by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTable {
    dim: usize,
    entries: Vec<KnowledgeEntry>,
}

impl KnowledgeTable {
    /// Table with every entry uninitialized.
    pub fn new(classes: usize, dim: usize) -> Self {
        let blank = KnowledgeEntry {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
            initialized: false,
            last_winner: None,
        };
        Self {
            dim,
            entries: vec![blank; classes],
        }
    }

    pub fn from_entries(dim: usize, entries: Vec<KnowledgeEntry>) -> Result<Self> {
        for (c, e) in entries.iter().enumerate() {
            if e.mean.len() != dim || e.cov.shape() != (dim, dim) {
                return Err(Error::dims(format!("table entry {c} is not {dim}-dimensional")));
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, class: usize) -> &KnowledgeEntry {
        &self.entries[class]
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    /// The entry for `class` if it has been initialized.
    pub fn usable(&self, class: usize) -> Option<&KnowledgeEntry> {
        self.entries.get(class).filter(|e| e.initialized)
    }

    pub fn initialized_classes(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&c| self.entries[c].initialized)
            .collect()
    }

    /// Overwrite an entry and mark it initialized.
    pub fn set(
        &mut self,
        class: usize,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        winner: Option<usize>,
    ) {
        self.entries[class] = KnowledgeEntry {
            mean,
            cov,
            initialized: true,
            last_winner: winner,
        };
    }
}

/// One gate decision for one class of one upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub round: u32,
    pub time: f64,
    pub client: usize,
    pub class: usize,
    /// Trace of the covariance of the generated embeddings.
    pub trace_k: f64,
    /// Trace of the representative covariance; `None` for a cold entry.
    pub trace_r: Option<f64>,
    pub gated: bool,
    pub learned: bool,
    pub takeover: bool,
}

impl GateRecord {
    /// Recompute both decisions from the recorded traces.
    pub fn replay(&self, beta: f64) -> (bool, bool) {
        match self.trace_r {
            None => (true, false),
            Some(r) => (
                !self.gated || self.trace_k < beta * r,
                self.trace_k < r / beta,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub round: u32,
    pub time: f64,
    pub client: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub classifier: ModelParams,
    pub table: KnowledgeTable,
    pub gate_log: Vec<GateRecord>,
    pub rejections: Vec<Rejection>,
    /// Number of uploads integrated so far.
    pub version: u64,
    /// Round stamped onto new log records.
    pub round: u32,
}

/// The classifier every participant starts from.
pub fn initial_classifier(cfg: &ProtocolConfig, seed: u64) -> Result<ModelParams> {
    let mut r = rng::rng(rng::derive(seed, Stream::Init, 2, 0));
    ModelParams::classifier(cfg.train.embed_dim, cfg.hidden, cfg.classes, &mut r)
}

pub fn init_server(cfg: &ProtocolConfig, seed: u64) -> Result<ServerState> {
    Ok(ServerState {
        classifier: initial_classifier(cfg, seed)?,
        table: KnowledgeTable::new(cfg.classes, cfg.train.embed_dim),
        gate_log: Vec::new(),
        rejections: Vec::new(),
        version: 0,
        round: 0,
    })
}

/// Snapshot of the classifier and table for clients.
pub fn broadcast(server: &ServerState) -> ServerBroadcast {
    ServerBroadcast {
        classifier: server.classifier.clone(),
        table: server.table.clone(),
        version: server.version,
    }
}

/// Pure form of [`ServerState::integrate`].
pub fn integrate_upload(
    server: &ServerState,
    upload: &ClientUpload,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<ServerState> {
    let mut next = server.clone();
    next.integrate(upload, cfg, seed)?;
    Ok(next)
}

impl ServerState {
    pub fn integrate(&mut self, upload: &ClientUpload, cfg: &ProtocolConfig, seed: u64) -> Result<()> {
        let generator = &upload.generator;
        let d = self.table.dim();
        let classes = self.table.classes();
        if generator.output_dim() != d || generator.input_dim() != cfg.train.noise_dim + classes {
            return Err(Error::dims(format!(
                "generator maps {} -> {}, expected {} -> {d}",
                generator.input_dim(),
                generator.output_dim(),
                cfg.train.noise_dim + classes
            )));
        }
        let mut r = rng::rng(seed);

        let mut generated = Vec::with_capacity(classes);
        for c in 0..classes {
            let n = cfg.gen_per_class(c);
            let noise = rng::normal_matrix(n, cfg.train.noise_dim, &mut r);
            let input = noise_with_onehot(&noise, &vec![c; n], classes);
            let out = generator.predict(&input)?;
            if out.iter().any(|v| !v.is_finite()) {
                log::warn!("rejecting upload from client {}: degenerate generator", upload.client_id);
                self.rejections.push(Rejection {
                    round: self.round,
                    time: upload.timestamp,
                    client: upload.client_id,
                    reason: "degenerate generator".into(),
                });
                self.version += 1;
                return Ok(());
            }
            generated.push(out);
        }

        let beta = cfg.train.beta;
        let mut learn_rows: Vec<(usize, usize)> = Vec::new();
        for (c, emb) in generated.iter().enumerate() {
            let summary = estimate_gaussian_rows_with(emb, cfg.train.ridge, cfg.train.cov_form)?;
            let trace_k = summary.trace();
            let entry = self.table.entry(c);
            let (trace_r, learned, takeover) = if entry.initialized {
                let trace_r = entry.cov.trace();
                let learned = !cfg.gating || trace_k < beta * trace_r;
                (Some(trace_r), learned, trace_k < trace_r / beta)
            } else {
                (None, true, false)
            };
            if trace_r.is_none() {
                self.table
                    .set(c, summary.mean.clone(), summary.cov.clone(), Some(upload.client_id));
            } else if takeover {
                let mean = (&summary.mean + &entry.mean) * 0.5;
                self.table.set(c, mean, summary.cov, Some(upload.client_id));
            }
            if learned {
                learn_rows.extend((0..emb.nrows()).map(|i| (c, i)));
            }
            self.gate_log.push(GateRecord {
                round: self.round,
                time: upload.timestamp,
                client: upload.client_id,
                class: c,
                trace_k,
                trace_r,
                gated: cfg.gating,
                learned,
                takeover,
            });
        }

        // One shuffled SGD pass over the admitted embeddings.
        let order = rng::permutation(learn_rows.len(), &mut r);
        for chunk in order.chunks(cfg.train.batch_size.max(1)) {
            let x = DMatrix::from_fn(chunk.len(), d, |i, k| {
                let (c, row) = learn_rows[chunk[i]];
                generated[c][(row, k)]
            });
            let labels: Vec<usize> = chunk.iter().map(|&i| learn_rows[i].0).collect();
            let trace = self.classifier.forward(&x)?;
            let (loss, g) = softmax_ce(trace.output(), &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged("server classifier loss".into()));
            }
            let (grads, _) = self.classifier.backward(&trace, &g)?;
            self.classifier.sgd_step(&grads, cfg.train.learning_rate)?;
        }
        self.version += 1;
        Ok(())
    }

    /// Counts of (events, learned, skipped, takeovers, adoptions) in the gate log.
    pub fn gate_counts(&self) -> GateCounts {
        let mut c = GateCounts::default();
        for r in &self.gate_log {
            c.events += 1;
            if r.learned {
                c.learned += 1;
            } else {
                c.skipped += 1;
            }
            if r.takeover {
                c.takeovers += 1;
            }
            if r.trace_r.is_none() {
                c.adoptions += 1;
            }
        }
        c.rejected_uploads = self.rejections.len();
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCounts {
    pub events: usize,
    pub learned: usize,
    pub skipped: usize,
    pub takeovers: usize,
    pub adoptions: usize,
    pub rejected_uploads: usize,
}

impl std::ops::AddAssign for GateCounts {
    fn add_assign(&mut self, o: Self) {
        self.events += o.events;
        self.learned += o.learned;
        self.skipped += o.skipped;
        self.takeovers += o.takeovers;
        self.adoptions += o.adoptions;
        self.rejected_uploads += o.rejected_uploads;
    }
}
