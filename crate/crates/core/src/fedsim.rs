//! Simulated federation: client sampling, local meta updates, averaging and
//! post-fine-tuning evaluation.
//!
//! Every random draw comes from a stream keyed by `(seed, client, round,
//! purpose)`, so the results do not depend on the number of worker threads
//! or on the order in which clients finish.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{sample_batch, ClientDataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::metagrad::{
    finetune_path, local_update, BatchSource, Engine, FullBatches, HessianApplication, HyperParams, LocalStreams,
    StochasticBatches,
};
use crate::nn::{Batch, ModelParams, ModelSpec};
use crate::rng::{Purpose, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Model initialization and client sampling.
    pub global: u64,
    /// Base key for per-client batch streams.
    pub client_base: u64,
}

impl Seeds {
    pub fn from_one(seed: u64) -> Self {
        Self {
            global: seed,
            client_base: seed ^ 0x9e37_79b9_7f4a_7c15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub n_clients: usize,
    /// Fraction r of clients sampled each round.
    pub participation: f64,
    /// Number of rounds K.
    pub rounds: usize,
    pub hp: HyperParams,
    pub engine: Engine,
    /// Fine-tuning steps applied before each evaluation. Every entry is
    /// evaluated each round.
    pub eval_nu: Vec<usize>,
    pub seeds: Seeds,
    #[serde(default)]
    pub hessian: HessianApplication,
    /// Evaluate with stochastic fine-tuning batches of this size instead of
    /// full-batch steps.
    #[serde(default)]
    pub stochastic_eval: Option<usize>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl FedConfig {
    pub fn participants_per_round(&self) -> usize {
        (self.participation * self.n_clients as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        if clients != self.n_clients {
            return Err(Error::InvalidConfig(format!(
                "config expects {} clients but {clients} were provided",
                self.n_clients
            )));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::InvalidConfig("participation must lie in (0, 1]".into()));
        }
        if self.participants_per_round() == 0 {
            return Err(Error::InvalidConfig(format!(
                "participation {} of {} clients selects nobody",
                self.participation, self.n_clients
            )));
        }
        if self.eval_nu.is_empty() {
            return Err(Error::InvalidConfig("eval_nu needs at least one entry".into()));
        }
        if self.stochastic_eval == Some(0) {
            return Err(Error::InvalidConfig("stochastic_eval batch size must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        self.hp.validate(self.engine)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub eval_nu: usize,
    pub mean_accuracy: f64,
    pub per_client: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Number of completed rounds; 0 is the initial model.
    pub round: usize,
    /// Clients that trained in this round, ascending. Empty for round 0.
    pub participants: Vec<usize>,
    /// SHA-256 of the global model's parameter bits.
    pub model_hash: String,
    pub evaluations: Vec<Evaluation>,
}

impl RoundRecord {
    pub fn evaluation(&self, eval_nu: usize) -> Option<&Evaluation> {
        self.evaluations.iter().find(|e| e.eval_nu == eval_nu)
    }
}

pub fn model_hash(w: &ModelParams) -> String {
    let mut h = Sha256::new();
    for x in w.values() {
        h.update(x.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// The clients drawn for `round`, uniformly without replacement, ascending.
pub fn sample_clients(cfg: &FedConfig, round: usize) -> Vec<usize> {
    let mut rng = RngStream::derive(cfg.seeds.global, u64::MAX, round as u64, Purpose::ClientSampling);
    let mut ids = rand::seq::index::sample(&mut rng, cfg.n_clients, cfg.participants_per_round()).into_vec();
    ids.sort_unstable();
    ids
}

fn client_streams(cfg: &FedConfig, client: usize, round: usize) -> LocalStreams {
    let key = |p| RngStream::derive(cfg.seeds.client_base, client as u64, round as u64, p);
    LocalStreams {
        grad: key(Purpose::GradientBatches),
        hess: key(Purpose::HessianBatches),
    }
}

/// τ local updates on one client starting from `global`.
pub fn client_update(
    spec: &ModelSpec,
    global: &ModelParams,
    client: &ClientDataset,
    cfg: &FedConfig,
    round: usize,
) -> Result<ModelParams> {
    let mut streams = client_streams(cfg, client.client_id, round);
    let mut w = global.clone();
    for _ in 0..cfg.hp.tau {
        let mut src = StochasticBatches {
            client,
            plan: &cfg.hp.batch_plan,
            streams: &mut streams,
        };
        w = local_update(spec, &w, &cfg.hp, cfg.engine, cfg.hessian, &mut src)?.updated;
    }
    Ok(w)
}

/// Runs closures over clients, on a thread pool when more than one worker
/// is configured. Results keep the input order.
struct Workers {
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    fn new(workers: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            let pool = if workers > 1 {
                Some(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(workers)
                        .build()
                        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?,
                )
            } else {
                None
            };
            Ok(Self { pool })
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = workers;
            Ok(Self {})
        }
    }

    fn map<T, F>(&self, items: &[usize], f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(|&i| f(i)).collect());
        }
        items.iter().map(|&i| f(i)).collect()
    }
}

/// One server round: sample, train locally, average. Returns the new global
/// model and the participants.
pub fn run_round(
    spec: &ModelSpec,
    clients: &[ClientDataset],
    cfg: &FedConfig,
    global: &ModelParams,
    round: usize,
) -> Result<(ModelParams, Vec<usize>)> {
    run_round_with(spec, clients, cfg, global, round, &Workers::new(cfg.workers)?)
}

fn run_round_with(
    spec: &ModelSpec,
    clients: &[ClientDataset],
    cfg: &FedConfig,
    global: &ModelParams,
    round: usize,
    workers: &Workers,
) -> Result<(ModelParams, Vec<usize>)> {
    let participants = sample_clients(cfg, round);
    let locals = workers.map(&participants, |id| {
        client_update(spec, global, &clients[id], cfg, round).map_err(|e| Error::ClientUpdate {
            client: id,
            source: Box::new(e),
        })
    })?;
    let mean = linalg::compensated_mean(locals.iter().map(ModelParams::values), global.dim());
    Ok((global.with_values(mean)?, participants))
}

/// Accuracy of `global` on every client's test split after fine-tuning on
/// that client's train split. Full-batch steps unless `stochastic` gives a
/// batch size; stochastic batches use a stream derived from
/// `(seed, client, round)` so repeated calls agree.
pub fn evaluate(
    spec: &ModelSpec,
    global: &ModelParams,
    clients: &[ClientDataset],
    alpha: f64,
    eval_nu: &[usize],
    stochastic: Option<(usize, u64, usize)>,
) -> Result<Vec<Evaluation>> {
    evaluate_with(spec, global, clients, alpha, eval_nu, stochastic, &Workers::new(1)?)
}

struct EvalBatches<'a> {
    client: &'a ClientDataset,
    size: usize,
    stream: RngStream,
}

impl BatchSource for EvalBatches<'_> {
    fn gradient_batch(&mut self, _step: usize) -> Result<std::borrow::Cow<'_, Batch>> {
        Ok(std::borrow::Cow::Owned(sample_batch(
            self.client,
            self.size,
            &mut self.stream,
        )?))
    }

    fn hessian_batch(&mut self, step: usize) -> Result<std::borrow::Cow<'_, Batch>> {
        self.gradient_batch(step)
    }
}

fn evaluate_with(
    spec: &ModelSpec,
    global: &ModelParams,
    clients: &[ClientDataset],
    alpha: f64,
    eval_nu: &[usize],
    stochastic: Option<(usize, u64, usize)>,
    workers: &Workers,
) -> Result<Vec<Evaluation>> {
    if clients.is_empty() {
        return Err(Error::EmptyData("client list"));
    }
    let max_nu = eval_nu.iter().copied().max().unwrap_or(0);
    let ids: Vec<usize> = (0..clients.len()).collect();
    let per_client: Vec<Vec<f64>> = workers.map(&ids, |i| {
        let client = &clients[i];
        if client.test.is_empty() {
            return Err(Error::EmptyData("client test split"));
        }
        let path = match stochastic {
            None => finetune_path(spec, global, alpha, max_nu, &mut FullBatches(&client.train))?,
            Some((size, seed, round)) => {
                let stream = RngStream::derive(seed, client.client_id as u64, round as u64, Purpose::Evaluation);
                finetune_path(spec, global, alpha, max_nu, &mut EvalBatches { client, size, stream })?
            }
        };
        eval_nu
            .iter()
            .map(|&nu| spec.accuracy(&path[nu], &client.test))
            .collect()
    })?;
    Ok(eval_nu
        .iter()
        .enumerate()
        .map(|(k, &nu)| {
            let accs: Vec<f64> = per_client.iter().map(|v| v[k]).collect();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            Evaluation {
                eval_nu: nu,
                mean_accuracy: mean,
                per_client: accs,
            }
        })
        .collect())
}

/// Runs `cfg.rounds` rounds from the seeded initial model. Returns K+1
/// records: round 0 evaluates the initial model, record k the model after k
/// rounds. `on_round` sees each record as soon as it is produced.
pub fn run_experiment_with(
    spec: &ModelSpec,
    clients: &[ClientDataset],
    cfg: &FedConfig,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<Vec<RoundRecord>> {
    cfg.validate(clients.len())?;
    let workers = Workers::new(cfg.workers)?;
    let mut w = spec.init_params(cfg.seeds.global);
    let eval = |w: &ModelParams, round: usize| {
        let stochastic = cfg.stochastic_eval.map(|size| (size, cfg.seeds.client_base, round));
        evaluate_with(spec, w, clients, cfg.hp.alpha, &cfg.eval_nu, stochastic, &workers)
    };
    let first = RoundRecord {
        round: 0,
        participants: Vec::new(),
        model_hash: model_hash(&w),
        evaluations: eval(&w, 0)?,
    };
    on_round(&first);
    let mut records = vec![first];
    for k in 0..cfg.rounds {
        let (next, participants) = run_round_with(spec, clients, cfg, &w, k, &workers)?;
        w = next;
        let record = RoundRecord {
            round: k + 1,
            participants,
            model_hash: model_hash(&w),
            evaluations: eval(&w, k + 1)?,
        };
        on_round(&record);
        records.push(record);
    }
    Ok(records)
}

pub fn run_experiment(spec: &ModelSpec, clients: &[ClientDataset], cfg: &FedConfig) -> Result<Vec<RoundRecord>> {
    run_experiment_with(spec, clients, cfg, |_| {})
}
