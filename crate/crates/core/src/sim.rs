//! Discrete-event execution of the protocol and its baselines.
//!
//! Simulation time is abstract: each client has a fixed latency drawn once
//! from the run seed, stragglers add a fixed delay, and the server reacts
//! instantly. All randomness is keyed by (run seed, purpose, client,
//! interaction), so a client's local pass does not depend on the schedule
//! that triggered it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::client::{accuracy, client_update, init_client, ClientState, ServerBroadcast};
use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::nn::{softmax_ce, ModelParams};
use crate::rng::{self, Stream};
use crate::server::{broadcast, init_server, initial_classifier, GateCounts, GateRecord, ServerState};
use crate::settings::ProtocolConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    #[default]
    Sync,
    Async,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub mode: ScheduleMode,
    pub rounds: u32,
    pub straggler_fraction: f64,
    pub straggler_delay: f64,
    /// Client id -> interactions per round.
    pub active: BTreeMap<usize, u32>,
    /// Per-client latency is drawn uniformly from this range once per run.
    pub latency_min: f64,
    pub latency_max: f64,
    /// Interactions that make up one round in random mode.
    pub interactions_per_round: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Sync,
            rounds: 30,
            straggler_fraction: 0.0,
            straggler_delay: 5.0,
            active: BTreeMap::new(),
            latency_min: 1.0,
            latency_max: 1.0,
            interactions_per_round: 20,
        }
    }
}

impl Schedule {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.straggler_fraction) {
            return Err(Error::Config(format!(
                "straggler_fraction out of [0,1): {}",
                self.straggler_fraction
            )));
        }
        if !(self.straggler_delay >= 0.0 && self.straggler_delay.is_finite()) {
            return Err(Error::Config("straggler_delay must be >= 0".into()));
        }
        if !(self.latency_min > 0.0 && self.latency_max >= self.latency_min)
            || !self.latency_max.is_finite()
        {
            return Err(Error::Config(format!(
                "latency range [{}, {}] must be positive and ordered",
                self.latency_min, self.latency_max
            )));
        }
        for (&k, &m) in &self.active {
            if m < 1 {
                return Err(Error::Config(format!("active client {k} needs >= 1 interaction")));
            }
            if k >= clients {
                return Err(Error::Config(format!("active client {k} does not exist")));
            }
        }
        if self.interactions_per_round < 1 {
            return Err(Error::Config("interactions_per_round must be >= 1".into()));
        }
        Ok(())
    }

    fn interactions(&self, client: usize) -> u32 {
        self.active.get(&client).copied().unwrap_or(1)
    }

    fn straggler_count(&self, clients: usize) -> usize {
        (self.straggler_fraction * clients as f64).floor() as usize
    }
}

/// Client shards plus the shared test set.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub clients: Vec<ClientDataset>,
    pub test: Dataset,
}

impl FederatedData {
    fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::InvalidArgument("no clients".into()));
        }
        if self.test.is_empty() {
            return Err(Error::NoSamples);
        }
        for (i, c) in self.clients.iter().enumerate() {
            if c.client_id != i {
                return Err(Error::InvalidArgument(format!(
                    "client at position {i} has id {}",
                    c.client_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Entity {
    Global,
    Client(usize),
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entity::Global => f.write_str("global"),
            Entity::Client(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for Entity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub event_time: f64,
    pub round: u32,
    pub entity: Entity,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Summary {
    pub runner: String,
    pub rounds_completed: u32,
    pub global_accuracy: f64,
    pub per_client_accuracy: BTreeMap<usize, f64>,
    pub gate: GateCounts,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
    pub summary: Summary,
}

impl MetricsLog {
    fn push(&mut self, event_time: f64, round: u32, entity: Entity, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            event_time,
            round,
            entity,
            metric: metric.to_string(),
            value,
        });
    }

    /// `(round, value)` pairs of one metric for one entity.
    pub fn series(&self, entity: Entity, metric: &str) -> Vec<(u32, f64)> {
        self.records
            .iter()
            .filter(|r| r.entity == entity && r.metric == metric)
            .map(|r| (r.round, r.value))
            .collect()
    }

    /// Global accuracy recorded at the end of `round`.
    pub fn global_accuracy_at(&self, round: u32) -> Option<f64> {
        self.series(Entity::Global, "accuracy")
            .into_iter()
            .find(|(r, _)| *r == round)
            .map(|(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("event_time,round,entity,metric,value\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.event_time, r.round, r.entity, r.metric, r.value
            ));
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(
                &serde_json::to_string(r).map_err(|e| Error::Serialization(e.to_string()))?,
            );
            out.push('\n');
        }
        Ok(out)
    }

    pub fn summary_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.summary).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// One client interaction as seen by the event loop.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub time: f64,
    pub client: usize,
    /// Server version of the broadcast the client trained against.
    pub trained_on: u64,
    /// Server version of the most recent reply this client had received.
    pub last_reply: u64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: MetricsLog,
    pub server: Option<ServerState>,
    pub clients: Vec<ClientState>,
    pub gate_log: Vec<GateRecord>,
    pub interactions: Vec<InteractionRecord>,
}

fn latencies(schedule: &Schedule, clients: usize, seed: u64) -> Vec<f64> {
    (0..clients)
        .map(|k| {
            if schedule.latency_max > schedule.latency_min {
                let mut r = rng::rng(rng::derive(seed, Stream::Latency, k as u64, 0));
                r.random_range(schedule.latency_min..schedule.latency_max)
            } else {
                schedule.latency_min
            }
        })
        .collect()
}

fn pick_stragglers(count: usize, clients: usize, seed: u64, key: u64) -> BTreeSet<usize> {
    if count == 0 {
        return BTreeSet::new();
    }
    let mut r = rng::rng(rng::derive(seed, Stream::Straggler, key, 0));
    rng::permutation(clients, &mut r).into_iter().take(count).collect()
}

/// Accuracy of each client's encoder under the central classifier, and
/// their unweighted mean.
pub fn evaluate_global(
    server: &ServerState,
    clients: &[ClientState],
    testset: &Dataset,
) -> Result<(f64, BTreeMap<usize, f64>)> {
    let mut per = BTreeMap::new();
    for c in clients {
        per.insert(c.id, accuracy(&c.encoder, &server.classifier, testset)?);
    }
    let global = per.values().sum::<f64>() / per.len().max(1) as f64;
    Ok((global, per))
}

struct ProtocolRun<'a> {
    cfg: &'a ProtocolConfig,
    seed: u64,
    server: ServerState,
    clients: Vec<ClientState>,
    interactions: Vec<InteractionRecord>,
    last_reply: Vec<u64>,
    log: MetricsLog,
    counts_at_round_start: GateCounts,
}

impl<'a> ProtocolRun<'a> {
    fn new(cfg: &'a ProtocolConfig, data: &FederatedData, seed: u64) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let server = init_server(cfg, seed)?;
        let clients = data
            .clients
            .iter()
            .map(|d| init_client(Arc::new(d.clone()), cfg, seed))
            .collect::<Result<Vec<_>>>()?;
        let k = clients.len();
        Ok(Self {
            cfg,
            seed,
            server,
            clients,
            interactions: Vec::new(),
            last_reply: vec![0; k],
            log: MetricsLog::default(),
            counts_at_round_start: GateCounts::default(),
        })
    }

    /// Client `k` trains against `inbound`; the server integrates at `time`.
    fn interact(&mut self, k: usize, inbound: &ServerBroadcast, time: f64) -> Result<()> {
        let prior = self.clients[k].interaction_count;
        self.interactions.push(InteractionRecord {
            time,
            client: k,
            trained_on: inbound.version,
            last_reply: self.last_reply[k],
        });
        let id = self.clients[k].id as u64;
        let update_seed = rng::derive(self.seed, Stream::ClientUpdate, id, prior);
        let (state, mut upload) = client_update(&self.clients[k], inbound, self.cfg, update_seed)?;
        upload.timestamp = time;
        self.clients[k] = state;
        let integrate_seed = rng::derive(self.seed, Stream::Integrate, id, prior);
        self.server.integrate(&upload, self.cfg, integrate_seed)?;
        Ok(())
    }

    fn reply(&mut self, k: usize) -> ServerBroadcast {
        self.last_reply[k] = self.server.version;
        broadcast(&self.server)
    }

    fn close_round(&mut self, round: u32, time: f64, test: &Dataset) -> Result<()> {
        let (global, per) = evaluate_global(&self.server, &self.clients, test)?;
        for c in &self.clients {
            let e = Entity::Client(c.id);
            self.log.push(time, round, e, "accuracy", per[&c.id]);
            self.log.push(time, round, e, "l_con", c.stats.l_con);
            self.log.push(time, round, e, "l_col", c.stats.l_col);
            self.log.push(time, round, e, "l_des", c.stats.l_des);
            self.log.push(time, round, e, "l_dis", c.stats.l_dis);
            self.log.push(time, round, e, "interactions", c.interaction_count as f64);
        }
        let counts = self.server.gate_counts();
        let start = self.counts_at_round_start;
        self.log.push(time, round, Entity::Global, "accuracy", global);
        self.log.push(time, round, Entity::Global, "gate_learned", (counts.learned - start.learned) as f64);
        self.log.push(time, round, Entity::Global, "gate_skipped", (counts.skipped - start.skipped) as f64);
        self.log.push(
            time,
            round,
            Entity::Global,
            "gate_takeovers",
            (counts.takeovers - start.takeovers) as f64,
        );
        for (c, e) in self.server.table.entries().iter().enumerate() {
            if e.initialized {
                self.log.push(time, round, Entity::Global, &format!("table_trace_c{c}"), e.cov.trace());
            }
        }
        self.counts_at_round_start = counts;
        self.log.summary.rounds_completed = round;
        self.log.summary.global_accuracy = global;
        self.log.summary.per_client_accuracy = per;
        Ok(())
    }

    fn finish(mut self, runner: &str, error: Option<Error>) -> RunOutcome {
        self.log.summary.runner = runner.to_string();
        self.log.summary.gate = self.server.gate_counts();
        self.log.summary.aborted = error.map(|e| e.to_string());
        RunOutcome {
            log: self.log,
            gate_log: self.server.gate_log.clone(),
            server: Some(self.server),
            clients: self.clients,
            interactions: self.interactions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Arrival {
    time: f64,
    client: usize,
}

impl Eq for Arrival {}

impl Ord for Arrival {
    // Reversed so that `BinaryHeap` pops the earliest arrival, lowest id first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.client.cmp(&self.client))
    }
}

impl PartialOrd for Arrival {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn run_sync(run: &mut ProtocolRun, schedule: &Schedule, data: &FederatedData, lat: &[f64]) -> Result<()> {
    let k = run.clients.len();
    let mut time = 0.0;
    for round in 1..=schedule.rounds {
        run.server.round = round;
        let inbound = broadcast(&run.server);
        let stragglers =
            pick_stragglers(schedule.straggler_count(k), k, run.seed, round as u64);
        let finish = |c: usize| {
            time + lat[c] + if stragglers.contains(&c) { schedule.straggler_delay } else { 0.0 }
        };
        // Prompt clients first, then the delayed ones; each group in id order.
        let order: Vec<usize> = (0..k)
            .filter(|c| !stragglers.contains(c))
            .chain(stragglers.iter().copied())
            .collect();
        let mut end = time;
        for &c in &order {
            let t = finish(c);
            run.interact(c, &inbound, t)?;
            end = f64::max(end, t);
        }
        let mut clock: Vec<f64> = (0..k).map(finish).collect();
        for c in 0..k {
            run.reply(c);
        }
        let extra = run.clients.iter().map(|c| schedule.interactions(c.id)).max().unwrap_or(1);
        for step in 1..extra {
            for c in 0..k {
                if schedule.interactions(c) > step {
                    let inbound = run.reply(c);
                    clock[c] += lat[c];
                    run.interact(c, &inbound, clock[c])?;
                    end = f64::max(end, clock[c]);
                }
            }
        }
        for c in 0..k {
            run.reply(c);
        }
        time = end;
        run.close_round(round, time, &data.test)?;
    }
    Ok(())
}

fn run_async(run: &mut ProtocolRun, schedule: &Schedule, data: &FederatedData, lat: &[f64]) -> Result<()> {
    let k = run.clients.len();
    let stragglers = pick_stragglers(schedule.straggler_count(k), k, run.seed, u64::MAX);
    let period: Vec<f64> = (0..k)
        .map(|c| {
            lat[c] / schedule.interactions(c) as f64
                + if stragglers.contains(&c) { schedule.straggler_delay } else { 0.0 }
        })
        .collect();
    let initial = Arc::new(broadcast(&run.server));
    let mut pending: Vec<Arc<ServerBroadcast>> = (0..k).map(|_| Arc::clone(&initial)).collect();
    let mut heap: BinaryHeap<Arrival> =
        (0..k).map(|c| Arrival { time: period[c], client: c }).collect();
    let mut seen = BTreeSet::new();
    let mut round = 1;
    run.server.round = round;
    while let Some(first) = heap.pop() {
        // Arrivals at the same instant are integrated together, then answered.
        let mut batch = vec![first];
        while heap.peek().is_some_and(|a| a.time == first.time) {
            batch.push(heap.pop().expect("peeked"));
        }
        for a in &batch {
            let inbound = Arc::clone(&pending[a.client]);
            run.interact(a.client, &inbound, a.time)?;
            seen.insert(a.client);
        }
        let reply = Arc::new(broadcast(&run.server));
        for a in &batch {
            run.reply(a.client);
            pending[a.client] = Arc::clone(&reply);
            heap.push(Arrival {
                time: a.time + period[a.client],
                client: a.client,
            });
        }
        if seen.len() == k {
            run.close_round(round, first.time, &data.test)?;
            seen.clear();
            if round == schedule.rounds {
                break;
            }
            round += 1;
            run.server.round = round;
        }
    }
    Ok(())
}

fn run_random(run: &mut ProtocolRun, schedule: &Schedule, data: &FederatedData, lat: &[f64]) -> Result<()> {
    let k = run.clients.len();
    let mut time = 0.0;
    for round in 1..=schedule.rounds {
        run.server.round = round;
        let mut r = rng::rng(rng::derive(run.seed, Stream::RandomPick, round as u64, 0));
        for _ in 0..schedule.interactions_per_round {
            let c = r.random_range(0..k);
            let inbound = run.reply(c);
            time += lat[c];
            run.interact(c, &inbound, time)?;
        }
        run.close_round(round, time, &data.test)?;
    }
    Ok(())
}

/// Run the knowledge-sharing protocol and keep every artifact.
pub fn run_protocol_full(
    cfg: &ProtocolConfig,
    schedule: &Schedule,
    data: &FederatedData,
    seed: u64,
) -> Result<RunOutcome> {
    schedule.validate(data.clients.len())?;
    let mut run = ProtocolRun::new(cfg, data, seed)?;
    let lat = latencies(schedule, run.clients.len(), seed);
    let result = match schedule.mode {
        ScheduleMode::Sync => run_sync(&mut run, schedule, data, &lat),
        ScheduleMode::Async => run_async(&mut run, schedule, data, &lat),
        ScheduleMode::Random => run_random(&mut run, schedule, data, &lat),
    };
    if let Err(e) = &result {
        log::error!("protocol run aborted: {e}");
    }
    Ok(run.finish("protocol", result.err()))
}

pub fn run_protocol(
    cfg: &ProtocolConfig,
    schedule: &Schedule,
    data: &FederatedData,
    seed: u64,
) -> Result<MetricsLog> {
    Ok(run_protocol_full(cfg, schedule, data, seed)?.log)
}

/// Every client alone with its own server and gating disabled, for
/// `rounds * local_epochs` epochs.
pub fn run_single_device_full(
    cfg: &ProtocolConfig,
    rounds: u32,
    data: &FederatedData,
    seed: u64,
) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.gating = false;
    let schedule = Schedule {
        rounds,
        ..Schedule::default()
    };
    schedule.validate(data.clients.len())?;
    data.validate()?;
    let mut runs = Vec::with_capacity(data.clients.len());
    let mut error = None;
    for shard in &data.clients {
        let solo = FederatedData {
            clients: vec![ClientDataset {
                client_id: 0,
                ..shard.clone()
            }],
            test: data.test.clone(),
        };
        let mut run = ProtocolRun::new(&cfg, &solo, seed)?;
        // Keep the client's own id in every seed and record.
        run.clients[0].id = shard.client_id;
        let lat = latencies(&schedule, 1, seed);
        let result = run_sync(&mut run, &schedule, &solo, &lat);
        let outcome = run.finish("single", None);
        if let Err(e) = result {
            error = Some(e);
            runs.push(outcome);
            break;
        }
        runs.push(outcome);
    }
    Ok(merge_solo_runs(runs, error))
}

fn merge_solo_runs(runs: Vec<RunOutcome>, error: Option<Error>) -> RunOutcome {
    let mut log = MetricsLog::default();
    let mut records: Vec<(usize, MetricRecord)> = Vec::new();
    let mut gate = GateCounts::default();
    let mut gate_log = Vec::new();
    let mut clients = Vec::new();
    let mut per = BTreeMap::new();
    let rounds = runs.iter().map(|r| r.log.summary.rounds_completed).min().unwrap_or(0);
    for (pos, run) in runs.into_iter().enumerate() {
        for rec in run.log.records {
            match rec.entity {
                Entity::Client(_) => records.push((pos, rec)),
                Entity::Global if rec.metric.starts_with("table_trace") || rec.metric.starts_with("gate_") => {
                    records.push((pos, MetricRecord {
                        entity: Entity::Client(run.clients[0].id),
                        ..rec
                    }))
                }
                Entity::Global => {}
            }
        }
        gate += run.log.summary.gate;
        gate_log.extend(run.gate_log);
        per.insert(run.clients[0].id, run.log.summary.global_accuracy);
        clients.extend(run.clients);
    }
    // Each solo run's clock is its own; merge on round, then client, keeping
    // per-client order.
    records.sort_by(|(pa, a), (pb, b)| a.round.cmp(&b.round).then(pa.cmp(pb)));
    let mut round_time: BTreeMap<u32, f64> = BTreeMap::new();
    for (_, r) in &records {
        let t = round_time.entry(r.round).or_insert(r.event_time);
        *t = t.max(r.event_time);
    }
    for round in 1..=rounds {
        let t = round_time[&round];
        let mut accs = Vec::new();
        for (_, r) in records.iter().filter(|(_, r)| r.round == round) {
            if r.metric == "accuracy" {
                accs.push(r.value);
            }
            log.push(t, round, r.entity, &r.metric, r.value);
        }
        let global = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        log.push(t, round, Entity::Global, "accuracy", global);
    }
    log.summary = Summary {
        runner: "single".into(),
        rounds_completed: rounds,
        global_accuracy: per.values().sum::<f64>() / per.len().max(1) as f64,
        per_client_accuracy: per,
        gate,
        aborted: error.map(|e| e.to_string()),
    };
    RunOutcome {
        log,
        server: None,
        clients,
        gate_log,
        interactions: Vec::new(),
    }
}

pub fn run_single_device(
    cfg: &ProtocolConfig,
    rounds: u32,
    data: &FederatedData,
    seed: u64,
) -> Result<MetricsLog> {
    Ok(run_single_device_full(cfg, rounds, data, seed)?.log)
}

/// Encoder chained into a classifier: the model FedAvg shares.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainedModel {
    pub encoder: ModelParams,
    pub classifier: ModelParams,
}

impl ChainedModel {
    /// The same initial modules the protocol's clients start from.
    pub fn init(cfg: &ProtocolConfig, seed: u64) -> Result<Self> {
        let mut r = rng::rng(rng::derive(seed, Stream::Init, 0, 0));
        let encoder =
            ModelParams::encoder(cfg.feature_dim, cfg.hidden, cfg.train.embed_dim, &mut r)?;
        Ok(Self {
            encoder,
            classifier: initial_classifier(cfg, seed)?,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.encoder.max_abs().max(self.classifier.max_abs())
    }

    /// Minibatch SGD on softmax cross-entropy over `data`.
    pub fn train_local(&mut self, data: &ClientDataset, cfg: &ProtocolConfig, seed: u64) -> Result<()> {
        let t = &cfg.train;
        let mut r = rng::rng(seed);
        for _ in 0..t.local_epochs {
            let order = rng::permutation(data.n_k(), &mut r);
            for chunk in order.chunks(t.batch_size.max(1)) {
                let x = data.features.select_rows(chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
                let enc = self.encoder.forward(&x)?;
                let cls = self.classifier.forward(enc.output())?;
                let (loss, g) = softmax_ce(cls.output(), &labels)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged("FedAvg local loss is not finite".into()));
                }
                let (cg, dz) = self.classifier.backward(&cls, &g)?;
                let (eg, _) = self.encoder.backward(&enc, &dz)?;
                self.classifier.sgd_step(&cg, t.learning_rate)?;
                self.encoder.sgd_step(&eg, t.learning_rate)?;
            }
        }
        Ok(())
    }

    /// `w <- sum_k (n_k / n) w_k` over the given participants.
    pub fn average(models: &[(ChainedModel, usize)]) -> Result<ChainedModel> {
        let enc: Vec<(&ModelParams, f64)> =
            models.iter().map(|(m, n)| (&m.encoder, *n as f64)).collect();
        let cls: Vec<(&ModelParams, f64)> =
            models.iter().map(|(m, n)| (&m.classifier, *n as f64)).collect();
        Ok(ChainedModel {
            encoder: ModelParams::weighted_average(&enc)?,
            classifier: ModelParams::weighted_average(&cls)?,
        })
    }
}

/// Outcome of a FedAvg run: the log plus the final shared model.
#[derive(Debug, Clone)]
pub struct FedAvgOutcome {
    pub log: MetricsLog,
    pub model: ChainedModel,
    /// Participant ids per round.
    pub participants: Vec<Vec<usize>>,
    /// Largest parameter magnitude among each round's local models.
    pub local_max_abs: Vec<f64>,
}

pub fn run_fedavg_full(
    cfg: &ProtocolConfig,
    schedule: &Schedule,
    data: &FederatedData,
    seed: u64,
) -> Result<FedAvgOutcome> {
    if schedule.mode != ScheduleMode::Sync {
        return Err(Error::Config("FedAvg runs only on the sync schedule".into()));
    }
    cfg.validate()?;
    schedule.validate(data.clients.len())?;
    data.validate()?;
    let k = data.clients.len();
    let lat = latencies(schedule, k, seed);
    let mut model = ChainedModel::init(cfg, seed)?;
    let mut log = MetricsLog::default();
    let mut participants_log = Vec::new();
    let mut local_max_abs = Vec::new();
    let mut time = 0.0;
    let mut error = None;
    for round in 1..=schedule.rounds {
        let stragglers = pick_stragglers(schedule.straggler_count(k), k, seed, round as u64);
        let participants: Vec<usize> = (0..k).filter(|c| !stragglers.contains(c)).collect();
        let step = || -> Result<(ChainedModel, f64)> {
            let mut locals = Vec::with_capacity(participants.len());
            for &c in &participants {
                let mut local = model.clone();
                let s = rng::derive(seed, Stream::FedAvg, c as u64, round as u64);
                local.train_local(&data.clients[c], cfg, s)?;
                locals.push((local, data.clients[c].n_k()));
            }
            let max_abs = locals.iter().map(|(m, _)| m.max_abs()).fold(0.0, f64::max);
            Ok((ChainedModel::average(&locals)?, max_abs))
        };
        match step() {
            Ok((m, max_abs)) => {
                model = m;
                local_max_abs.push(max_abs);
            }
            Err(e) => {
                log::error!("FedAvg run aborted: {e}");
                error = Some(e.to_string());
                break;
            }
        }
        time += participants.iter().map(|&c| lat[c]).fold(0.0, f64::max);
        let acc = accuracy(&model.encoder, &model.classifier, &data.test)?;
        for c in 0..k {
            log.push(time, round, Entity::Client(c), "accuracy", acc);
        }
        log.push(time, round, Entity::Global, "accuracy", acc);
        log.push(time, round, Entity::Global, "participants", participants.len() as f64);
        log.summary.rounds_completed = round;
        log.summary.global_accuracy = acc;
        log.summary.per_client_accuracy = (0..k).map(|c| (c, acc)).collect();
        participants_log.push(participants);
    }
    log.summary.runner = "fedavg".into();
    log.summary.aborted = error;
    Ok(FedAvgOutcome {
        log,
        model,
        participants: participants_log,
        local_max_abs,
    })
}

pub fn run_fedavg(
    cfg: &ProtocolConfig,
    schedule: &Schedule,
    data: &FederatedData,
    seed: u64,
) -> Result<MetricsLog> {
    Ok(run_fedavg_full(cfg, schedule, data, seed)?.log)
}
