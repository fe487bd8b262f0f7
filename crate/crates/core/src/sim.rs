//! Deterministic discrete-event simulation of asynchronous training.
//!
//! Every client is always in flight: it is dispatched with a snapshot of the
//! global model, its update arrives after a service time, the server applies
//! it and the client is immediately dispatched again. Arrivals are processed
//! in `(time, seq)` order on a virtual clock.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::io::Write;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::aggregate::{swa_tail_average, Server, StepOutcome, StrategyConfig};
use crate::curve::{train_curve, train_local, CurveTrainConfig, ReparamVector, RoundKey};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Counters, RoundRecord, RunRecord, Score};
use crate::model::{dirichlet_partition_indices, make_synthetic, Dataset, DatasetId, ModelObjective, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{stream_rng, Stream};
use crate::update::ClientUpdate;

/// How long a client takes between dispatch and arrival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServiceTime {
    /// `LogNormal(0, sigma) · n_i / mean(n)`, drawn afresh at every dispatch.
    #[serde(rename = "lognormal")]
    LogNormal { sigma: f64 },
    /// Constant per-client times.
    Fixed { times: Vec<f64> },
}

impl Default for ServiceTime {
    fn default() -> Self {
        ServiceTime::LogNormal { sigma: 0.5 }
    }
}

/// Synthetic federated task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub class_sep: f64,
    /// Dirichlet concentration of the label partition.
    pub dirichlet_alpha: f64,
    /// Fraction of every client's samples held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Seed for data and partition; the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_val_fraction() -> f64 {
    0.2
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_samples: 3000,
            n_features: 10,
            n_classes: 10,
            class_sep: 2.0,
            dirichlet_alpha: 0.5,
            val_fraction: 0.2,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_clients: usize,
    /// Number of arrivals to process (dropped ones included).
    pub total_updates: u64,
    pub seed: u64,
    pub service_time: ServiceTime,
    pub max_staleness: Option<u64>,
    pub strategy: StrategyConfig,
    pub curve: CurveTrainConfig,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub eval_every: u64,
    /// Tail length of the SWA average reported next to the final model.
    pub swa_window: Option<usize>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clients == 0 {
            return bad("n_clients must be >= 1".into());
        }
        if self.total_updates == 0 {
            return bad("total_updates must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if self.swa_window == Some(0) {
            return bad("swa_window must be >= 1".into());
        }
        match &self.service_time {
            ServiceTime::LogNormal { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                return bad(format!("service_time.sigma = {sigma} must be >= 0"));
            }
            ServiceTime::Fixed { times } => {
                if times.len() != self.n_clients {
                    return bad(format!(
                        "service_time.times has {} entries for {} clients",
                        times.len(),
                        self.n_clients
                    ));
                }
                if times.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
                    return bad("service_time.times must be positive".into());
                }
            }
            _ => {}
        }
        let d = &self.data;
        if d.n_features != self.model.n_features || d.n_classes != self.model.n_classes {
            return bad(format!(
                "model expects {} features / {} classes but data has {} / {}",
                self.model.n_features, self.model.n_classes, d.n_features, d.n_classes
            ));
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return bad(format!("data.val_fraction = {} must lie in [0, 1)", d.val_fraction));
        }
        if !(d.dirichlet_alpha > 0.0) {
            return bad(format!("data.dirichlet_alpha = {} must be > 0", d.dirichlet_alpha));
        }
        if d.n_samples < self.n_clients {
            return bad(format!("{} samples cannot feed {} clients", d.n_samples, self.n_clients));
        }
        if !self.strategy.trains_curves() && self.curve.k_sgd == 0 {
            return bad(format!("{}: pointwise strategies need k_sgd >= 1", self.strategy.name));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.curve.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.strategy.validate()
    }
}

/// Client training and validation data.
#[derive(Debug, Clone)]
pub struct Federation {
    pub train: Vec<Dataset>,
    pub val: Vec<Dataset>,
}

impl Federation {
    /// Synthetic data split across clients by a Dirichlet label partition,
    /// then each client's share split into train and validation.
    pub fn synthetic(data: &DataConfig, n_clients: usize, run_seed: u64) -> Result<Self> {
        let seed = data.seed.unwrap_or(run_seed);
        let global = make_synthetic(data.n_classes, data.n_features, data.n_samples, data.class_sep, seed)?;
        let parts = dirichlet_partition_indices(&global, n_clients, data.dirichlet_alpha, seed)?;
        let mut train = Vec::with_capacity(n_clients);
        let mut val = Vec::with_capacity(n_clients);
        for (c, mut idx) in parts.into_iter().enumerate() {
            let mut rng = stream_rng(seed, Stream::Split, &[c as u64]);
            idx.shuffle(&mut rng);
            let n_val = if idx.len() < 2 { 0 } else { ((idx.len() as f64 * data.val_fraction) as usize).max(1) };
            let (v, t) = idx.split_at(n_val);
            let (mut v, mut t) = (v.to_vec(), t.to_vec());
            v.sort_unstable();
            t.sort_unstable();
            if v.is_empty() {
                // a single sample both trains and validates
                v = t.clone();
            }
            train.push(global.subset(&t, DatasetId::Client(c))?);
            val.push(global.subset(&v, DatasetId::Client(c))?);
        }
        Ok(Federation { train, val })
    }

    pub fn n_clients(&self) -> usize {
        self.train.len()
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.train.iter().map(Dataset::n_samples).collect()
    }
}

/// A scheduled arrival.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub client: usize,
}

impl Eq for Event {}

impl Ord for Event {
    // reversed so the max-heap pops the earliest (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Server-side model, version and the snapshots in-flight clients hold.
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub theta: ParamVector,
    pub version: u64,
    pub history: BTreeMap<u64, ParamVector>,
    pub per_client_origin: Vec<u64>,
}

impl GlobalState {
    pub fn new(theta: ParamVector, n_clients: usize) -> Self {
        let mut history = BTreeMap::new();
        history.insert(0, theta.clone());
        GlobalState { theta, version: 0, history, per_client_origin: vec![0; n_clients] }
    }

    pub fn snapshot(&self, version: u64) -> Result<&ParamVector> {
        self.history.get(&version).ok_or(Error::HistoryEvicted { origin: version })
    }

    fn advance(&mut self, theta: ParamVector) {
        self.version += 1;
        self.theta = theta;
        self.history.insert(self.version, self.theta.clone());
    }

    /// Forgets every snapshot older than the oldest in-flight origin.
    fn prune(&mut self) {
        let oldest = self.per_client_origin.iter().copied().min().unwrap_or(self.version);
        self.history = self.history.split_off(&oldest);
    }
}

/// `version_now − origin_version`.
pub fn measure_staleness(state: &GlobalState, update: &ClientUpdate) -> Result<u64> {
    if update.origin_version > state.version {
        return Err(Error::InvalidArgument(format!(
            "update from version {} is newer than the server ({})",
            update.origin_version, state.version
        )));
    }
    state.snapshot(update.origin_version)?;
    Ok(state.version - update.origin_version)
}

/// Builds the synthetic federation and runs the simulation.
pub fn run(cfg: &SimConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let fed = Federation::synthetic(&cfg.data, cfg.n_clients, cfg.seed)?;
    run_with(cfg, &fed, None)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Diverged { .. } | Error::TrainingDiverged { .. } | Error::NonFinite(_))
}

struct Tracker<'a> {
    spec: &'a ModelSpec,
    val: &'a [Dataset],
    rounds: Vec<RoundRecord>,
    last: Option<(u64, Score, Vec<Score>)>,
    best: Option<(u64, Score, Vec<Score>)>,
}

impl Tracker<'_> {
    fn record(&mut self, version: u64, theta: &ParamVector, staleness: u64, s_factor: f64) -> Result<Score> {
        if let Some((v, s, _)) = &self.last {
            if *v == version {
                return Ok(*s);
            }
        }
        let e = evaluate(self.spec, theta, self.val)?;
        self.rounds.push(RoundRecord { version, loss: e.global.loss, acc: e.global.acc, staleness, s_factor });
        if self.best.as_ref().is_none_or(|(_, b, _)| e.global.acc > b.acc) {
            self.best = Some((version, e.global, e.per_client.clone()));
        }
        self.last = Some((version, e.global, e.per_client));
        Ok(e.global)
    }
}

/// Runs the event loop on a prepared federation, optionally writing one JSON
/// line per arrival to `events`.
pub fn run_with(cfg: &SimConfig, fed: &Federation, mut events: Option<&mut dyn Write>) -> Result<RunRecord> {
    cfg.validate()?;
    if fed.n_clients() != cfg.n_clients {
        return Err(Error::Config(format!("federation has {} clients, config {}", fed.n_clients(), cfg.n_clients)));
    }
    let spec = &cfg.model;
    let n = cfg.n_clients;
    let sizes = fed.train_sizes();
    let weights = cfg.strategy.client_weighting.weights(&sizes);
    let mean_size = sizes.iter().sum::<usize>() as f64 / n as f64;
    let mut server = Server::new(cfg.strategy.clone())?;
    let mut state = GlobalState::new(spec.init_params(cfg.seed), n);

    let mut sched = stream_rng(cfg.seed, Stream::Scheduling, &[]);
    let lognormal = match cfg.service_time {
        ServiceTime::LogNormal { sigma } => Some(LogNormal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?),
        ServiceTime::Fixed { .. } => None,
    };
    let mut service = |client: usize| -> f64 {
        match (&cfg.service_time, &lognormal) {
            (ServiceTime::Fixed { times }, _) => times[client],
            (_, Some(d)) => sched.sample(d) * sizes[client] as f64 / mean_size,
            _ => unreachable!("lognormal distribution is built for lognormal service times"),
        }
    };

    let mut queue = BinaryHeap::new();
    let mut seq = 0u64;
    let mut rounds_dispatched = vec![0u64; n];
    for client in 0..n {
        queue.push(Event { time: service(client), seq, client });
        seq += 1;
    }

    let mut tracker = Tracker { spec, val: &fed.val, rounds: Vec::new(), last: None, best: None };
    tracker.record(0, &state.theta, 0, 1.0)?;
    let mut swa: VecDeque<ParamVector> = VecDeque::new();
    let swa_len = cfg.swa_window.unwrap_or(0);
    let push_swa = |swa: &mut VecDeque<ParamVector>, theta: &ParamVector| {
        if swa_len > 0 {
            if swa.len() == swa_len {
                swa.pop_front();
            }
            swa.push_back(theta.clone());
        }
    };
    push_swa(&mut swa, &state.theta);

    let mut counters = Counters::default();
    let mut failure = None;
    let mut last_staleness = 0;
    let mut last_s = 1.0;

    while counters.arrivals < cfg.total_updates {
        let ev = queue.pop().expect("every client is always in flight");
        let client = ev.client;
        counters.arrivals += 1;
        let origin = state.per_client_origin[client];
        let round = rounds_dispatched[client];
        rounds_dispatched[client] += 1;
        let mut update = ClientUpdate::new(client, origin, ReparamVector::zeros(0), weights[client]);
        let staleness = measure_staleness(&state, &update)?;
        let mut log_line = json!({
            "time": ev.time,
            "client": client,
            "origin": origin,
            "staleness": staleness,
        });

        if cfg.max_staleness.is_some_and(|bound| staleness > bound) {
            counters.dropped += 1;
            debug!("dropping update of client {client} with staleness {staleness}");
            log_line["status"] = json!("dropped");
        } else {
            counters.applied += 1;
            let result = client_update(cfg, fed, &state, &mut update, round)
                .and_then(|()| server.receive(&update, &state.theta, state.version, state.snapshot(origin)?));
            match result {
                Ok(Some(out)) => {
                    count_outcome(&mut counters, &out);
                    state.advance(out.theta);
                    push_swa(&mut swa, &state.theta);
                    last_staleness = staleness;
                    last_s = out.s_factor;
                    counters.max_applied_staleness = counters.max_applied_staleness.max(staleness);
                    log_line["status"] = json!("applied");
                    log_line["version"] = json!(state.version);
                    log_line["s_factor"] = json!(out.s_factor);
                    log_line["step"] = json!(out.step);
                    if state.version.is_multiple_of(cfg.eval_every) {
                        let s = tracker.record(state.version, &state.theta, staleness, out.s_factor)?;
                        log_line["loss"] = json!(s.loss);
                        log_line["acc"] = json!(s.acc);
                    }
                }
                Ok(None) => {
                    counters.max_applied_staleness = counters.max_applied_staleness.max(staleness);
                    log_line["status"] = json!("buffered");
                }
                Err(e) if is_divergence(&e) => {
                    warn!("{}: run diverged at arrival {}: {e}", cfg.strategy.name, counters.arrivals);
                    failure = Some(e.to_string());
                    log_line["status"] = json!("diverged");
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(w) = events.as_deref_mut() {
            writeln!(w, "{log_line}")?;
        }
        if failure.is_some() {
            break;
        }
        state.per_client_origin[client] = state.version;
        queue.push(Event { time: ev.time + service(client), seq, client });
        seq += 1;
        state.prune();
    }

    if failure.is_none() {
        match server.flush(&state.theta, state.version) {
            Ok(Some(out)) => {
                count_outcome(&mut counters, &out);
                state.advance(out.theta);
                push_swa(&mut swa, &state.theta);
                last_s = out.s_factor;
            }
            Ok(None) => {}
            Err(e) if is_divergence(&e) => failure = Some(e.to_string()),
            Err(e) => return Err(e),
        }
    }
    let final_score = tracker.record(state.version, &state.theta, last_staleness, last_s)?;
    let swa_score = if failure.is_none() && swa_len > 0 && !swa.is_empty() {
        let models: Vec<ParamVector> = swa.into_iter().collect();
        let avg = swa_tail_average(&models, models.len())?;
        Some(evaluate(spec, &avg, &fed.val)?.global)
    } else {
        None
    };
    let (_, _, per_client_final) = tracker.last.clone().expect("final model evaluated");
    let (best_version, best_score, per_client_best) = tracker.best.clone().expect("initial model evaluated");
    info!(
        "{} seed {}: {} arrivals, {} applied, {} dropped, final acc {:.4}",
        cfg.strategy.name, cfg.seed, counters.arrivals, counters.applied, counters.dropped, final_score.acc
    );
    Ok(RunRecord {
        strategy: cfg.strategy.name.clone(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        rounds: tracker.rounds,
        final_score,
        per_client_final,
        best_version,
        best_score,
        per_client_best,
        swa_score,
        counters,
        final_model: state.theta,
        failure,
    })
}

fn count_outcome(c: &mut Counters, out: &StepOutcome) {
    c.step_clamps += u64::from(out.step_clamped);
    c.scale_clamps += u64::from(out.scale_clamped);
    c.arc_fallbacks += u64::from(out.arc_fallback);
}

/// Local training of one client against its dispatch snapshot.
fn client_update(
    cfg: &SimConfig,
    fed: &Federation,
    state: &GlobalState,
    update: &mut ClientUpdate,
    round: u64,
) -> Result<()> {
    let theta_then = state.snapshot(update.origin_version)?;
    let obj = ModelObjective::new(&cfg.model, &fed.train[update.client]);
    let key = RoundKey::new(cfg.seed, update.client, round);
    update.reparam = if cfg.strategy.trains_curves() {
        train_curve(&obj, theta_then, &cfg.curve, key)?
    } else {
        let trained = train_local(&obj, theta_then, cfg.curve.k_sgd, &cfg.curve, key)?;
        let dim = theta_then.dim();
        ReparamVector { da: ParamVector::zeros(dim), db: ParamVector::zeros(dim), dc: &trained - theta_then }
    };
    Ok(())
}
