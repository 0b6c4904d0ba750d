//! Client/server round machinery: configuration, client sampling, local
//! adapter training (with the optional proximal term), aggregation and the
//! per-round log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, FederatedDataset, Instance, Vocab};
use crate::lora::{AdapterStack, LoraAdapter, LoraError, StackVars};
use crate::model::{Backbone, EmbeddingMode, Example, LossMask, ModelError};
use crate::seed::{derive_rng, derive_seed, purpose, Rng};
use crate::tensor::{sgd_step, Tape, TensorError};
use crate::weighting::SimMetric;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("training diverged on client {client} in round {round}: {source}")]
    Divergence {
        client: usize,
        round: usize,
        source: TensorError,
    },
    #[error("aggregation error from client {client}: {message}")]
    Aggregation { client: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FederationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Algorithm {
    FeddpaF,
    FeddpaT,
    Fedit,
    Fedlora,
    Local,
    Centralized,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::FeddpaF,
        Algorithm::FeddpaT,
        Algorithm::Fedit,
        Algorithm::Fedlora,
        Algorithm::Local,
        Algorithm::Centralized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FeddpaF => "FEDDPA_F",
            Algorithm::FeddpaT => "FEDDPA_T",
            Algorithm::Fedit => "FEDIT",
            Algorithm::Fedlora => "FEDLORA",
            Algorithm::Local => "LOCAL",
            Algorithm::Centralized => "CENTRALIZED",
        }
    }

    pub fn parse(s: &str) -> Option<Algorithm> {
        let norm = s.to_ascii_uppercase().replace(['-', ' '], "_");
        Algorithm::ALL.into_iter().find(|a| a.name() == norm)
    }

    /// Whether the procedure runs federated rounds.
    pub fn is_federated(self) -> bool {
        !matches!(self, Algorithm::Local | Algorithm::Centralized)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Aggregation {
    Fedavg,
    Fedprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SamplingMode {
    /// `⌈rate·M⌉` clients uniformly.
    Flat,
    /// `⌈rate·n⌉` clients from every task group of size `n`.
    PerTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub algorithm: Algorithm,
    pub num_clients: usize,
    pub rounds: usize,
    pub sample_rate: f64,
    pub sampling: SamplingMode,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rank: usize,
    /// Training mix weight of the local adapter.
    pub alpha: f64,
    /// Similarity scale; FEDDPA_T ties it to `alpha` unless overridden.
    pub lambda: Option<f64>,
    pub num_samples: usize,
    pub sim_metric: SimMetric,
    pub embedding_mode: EmbeddingMode,
    /// Instance-wise weighting at inference; otherwise the fixed `alpha`.
    pub dynamic_weighting: bool,
    /// Draw a fresh set of local instances for every test instance instead
    /// of one cached set per client.
    pub resample_per_instance: bool,
    pub aggregation: Aggregation,
    pub mu: f64,
    /// Second-phase epochs of FEDDPA_F / FEDLORA.
    pub finetune_epochs: Option<usize>,
    pub local_only_epochs: usize,
    pub centralized_epochs: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FeddpaT,
            num_clients: 8,
            rounds: 10,
            sample_rate: 1.0,
            sampling: SamplingMode::Flat,
            local_epochs: 5,
            batch_size: 32,
            lr: 1.0,
            rank: 8,
            alpha: 0.5,
            lambda: None,
            num_samples: 5,
            sim_metric: SimMetric::Cosine,
            embedding_mode: EmbeddingMode::Last,
            dynamic_weighting: true,
            resample_per_instance: false,
            aggregation: Aggregation::Fedavg,
            mu: 0.01,
            finetune_epochs: None,
            local_only_epochs: 50,
            centralized_epochs: 50,
            seed: 0,
            workers: 1,
        }
    }
}

impl FedConfig {
    /// Every violated invariant, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        if self.num_clients == 0 {
            e.push("num_clients must be at least 1".to_string());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            e.push(format!("sample_rate {} outside (0, 1]", self.sample_rate));
        }
        if self.batch_size == 0 {
            e.push("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            e.push(format!("lr {} must be finite and non-negative", self.lr));
        }
        if self.rank == 0 {
            e.push("rank must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            e.push(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l <= 1.0) {
                e.push(format!("lambda {l} outside (0, 1]"));
            }
        }
        if self.num_samples == 0 {
            e.push("num_samples must be at least 1".into());
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            e.push(format!("mu {} must be finite and non-negative", self.mu));
        }
        if self.workers == 0 {
            e.push("workers must be at least 1".into());
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(FederationError::Config(e))
        }
    }

    /// Similarity scale used at inference: 1 for FEDDPA_F, `alpha` for
    /// FEDDPA_T, unless set explicitly.
    pub fn effective_lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.algorithm {
            Algorithm::FeddpaT => self.alpha,
            _ => 1.0,
        })
    }

    pub fn effective_finetune_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or(self.local_epochs)
    }

    pub fn prox_mu(&self) -> Option<f64> {
        match self.aggregation {
            Aggregation::Fedprox => Some(self.mu),
            Aggregation::Fedavg => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub task: usize,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub examples: Vec<Example>,
    /// Private adapter; never serialized to the server.
    pub local_adapter: Option<LoraAdapter>,
}

/// One state per dataset client, with rendered training examples.
pub fn clients_from_dataset(ds: &FederatedDataset) -> Result<Vec<ClientState>> {
    let vocab = Vocab::standard();
    ds.clients
        .iter()
        .map(|c| {
            let examples = c
                .train
                .iter()
                .map(|i| data::render_example(&vocab, i))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(ClientState {
                id: c.id,
                task: c.task,
                train: c.train.clone(),
                test: ds.local_test(c.id).to_vec(),
                examples,
                local_adapter: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub clients: Vec<usize>,
    pub global_losses: Vec<Option<f64>>,
    pub local_losses: Vec<Option<f64>>,
    pub mean_loss: Option<f64>,
    pub bytes_down: usize,
    pub bytes_up: usize,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: LoraAdapter,
    pub round: usize,
    pub history: Vec<RoundLog>,
}

impl ServerState {
    pub fn new(backbone: &Backbone, config: &FedConfig) -> Result<Self> {
        Ok(Self {
            global: LoraAdapter::new(
                backbone.config(),
                config.rank,
                derive_seed(config.seed, &[purpose::ADAPTER_INIT, 0]),
            )?,
            round: 0,
            history: Vec::new(),
        })
    }
}

/// Fresh private adapter of a client.
pub fn initial_local_adapter(backbone: &Backbone, config: &FedConfig, client: usize) -> Result<LoraAdapter> {
    Ok(LoraAdapter::new(
        backbone.config(),
        config.rank,
        derive_seed(config.seed, &[purpose::ADAPTER_INIT, 1 + client as u64]),
    )?)
}

fn quota(rate: f64, n: usize) -> usize {
    // guard against 0.6·5 = 3.0000000000000004
    ((rate * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Sorted client ids. `groups` switches to per-task sampling.
pub fn sample_clients(num_clients: usize, groups: Option<&[Vec<usize>]>, rate: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(FederationError::Config(vec![format!("sample_rate {rate} outside (0, 1]")]));
    }
    let mut out = match groups {
        None => {
            let all: Vec<usize> = (0..num_clients).collect();
            all.choose_multiple(rng, quota(rate, num_clients)).copied().collect::<Vec<_>>()
        }
        Some(gs) => gs
            .iter()
            .flat_map(|g| g.choose_multiple(rng, quota(rate, g.len())).copied().collect::<Vec<_>>())
            .collect(),
    };
    if out.is_empty() {
        return Err(FederationError::Config(vec!["client selection is empty".into()]));
    }
    out.sort_unstable();
    Ok(out)
}

/// Hyper-parameters of one local training call.
#[derive(Debug, Clone, Copy)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Proximal weight `μ`; the anchor is passed separately.
    pub mu: Option<f64>,
}

/// SGD on the response-token loss. The trainable adapter occupies the
/// global slot alone, or the local slot next to a frozen `partner` with mix
/// weight `alpha`. Returns the mean batch loss, `None` without steps.
pub fn train_adapter(
    backbone: &Backbone,
    trainable: &mut LoraAdapter,
    partner: Option<(&LoraAdapter, f64)>,
    anchor: Option<&LoraAdapter>,
    examples: &[Example],
    spec: TrainSpec,
    rng: &mut Rng,
) -> std::result::Result<Option<f64>, ModelError> {
    if spec.epochs == 0 || examples.is_empty() {
        return Ok(None);
    }
    let prox = match (spec.mu, anchor) {
        (Some(mu), Some(a)) => Some((mu, a)),
        (Some(_), None) => return Err(ModelError::Input("proximal term needs an anchor adapter".into())),
        _ => None,
    };
    trainable.set_trainable(true);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut total = 0.0;
    let mut steps = 0usize;
    let result = (|| {
        for _ in 0..spec.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(spec.batch_size.max(1)) {
                let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
                let grads = {
                    let stack = match partner {
                        Some((g, alpha)) => AdapterStack::dual(g, trainable, alpha),
                        None => AdapterStack::single(trainable),
                    };
                    let mut tape = Tape::new();
                    let (loss, fwd) = backbone.lm_loss(&mut tape, &batch, &stack, LossMask::Response)?;
                    let own = if partner.is_some() {
                        StackVars::flat(&fwd.adapters.local)
                    } else {
                        StackVars::flat(&fwd.adapters.global)
                    };
                    let loss = match prox {
                        Some((mu, a)) => {
                            let mut reg = None;
                            for (v, anchor_t) in own.iter().zip(a.params()) {
                                let av = tape.leaf(anchor_t);
                                let d = tape.sub(*v, av)?;
                                let ss = tape.sum_squares(d);
                                reg = Some(match reg {
                                    None => ss,
                                    Some(r) => tape.add(r, ss)?,
                                });
                            }
                            let reg = tape.scale(reg.expect("adapter has buffers"), mu / 2.0);
                            tape.add(loss, reg)?
                        }
                        None => loss,
                    };
                    total += tape.value(loss)[0];
                    steps += 1;
                    let g = tape.backward(loss)?;
                    own.iter()
                        .map(|v| g.get(*v).map(<[f64]>::to_vec))
                        .collect::<Vec<_>>()
                };
                let mut params = trainable.params_mut();
                for (p, g) in params.iter_mut().zip(grads) {
                    p.accumulate_grad(&g.unwrap_or_else(|| vec![0.0; p.len()]))?;
                }
                sgd_step(&mut params, spec.lr)?;
            }
        }
        Ok(())
    })();
    trainable.set_trainable(false);
    result.map(|_| Some(total / steps as f64))
}

fn divergence(client: usize, round: usize, e: ModelError) -> FederationError {
    match e {
        ModelError::Tensor(source @ TensorError::NonFinite(_)) => FederationError::Divergence { client, round, source },
        other => FederationError::Model(other),
    }
}

/// Trains a copy of the broadcast adapter for `local_epochs` on the
/// client's data.
pub fn client_train_global(
    backbone: &Backbone,
    client: &ClientState,
    broadcast: &LoraAdapter,
    config: &FedConfig,
    round: usize,
) -> Result<(LoraAdapter, Option<f64>)> {
    let mut adapter = broadcast.clone();
    let mut rng = derive_rng(config.seed, &[purpose::CLIENT_GLOBAL, client.id as u64, round as u64]);
    let spec = TrainSpec {
        epochs: config.local_epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        mu: config.prox_mu(),
    };
    let loss = train_adapter(backbone, &mut adapter, None, Some(broadcast), &client.examples, spec, &mut rng)
        .map_err(|e| divergence(client.id, round, e))?;
    Ok((adapter, loss))
}

/// Trains the client's private adapter next to the frozen broadcast global
/// adapter, starting from its previous state.
pub fn client_train_local(
    backbone: &Backbone,
    client: &ClientState,
    global: &LoraAdapter,
    config: &FedConfig,
    round: usize,
) -> Result<(LoraAdapter, Option<f64>)> {
    let mut local = match &client.local_adapter {
        Some(l) => l.clone(),
        None => initial_local_adapter(backbone, config, client.id)?,
    };
    let mut rng = derive_rng(config.seed, &[purpose::CLIENT_LOCAL, client.id as u64, round as u64]);
    let spec = TrainSpec {
        epochs: config.local_epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        mu: None,
    };
    let loss = train_adapter(backbone, &mut local, Some((global, config.alpha)), None, &client.examples, spec, &mut rng)
        .map_err(|e| divergence(client.id, round, e))?;
    Ok((local, loss))
}

/// Unweighted mean of client adapters, summed in ascending client id.
pub fn server_aggregate(adapters: &[(usize, LoraAdapter)]) -> Result<LoraAdapter> {
    let mut sorted: Vec<&(usize, LoraAdapter)> = adapters.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let (_, first) = *sorted.first().ok_or(FederationError::Aggregation {
        client: 0,
        message: "no adapters to aggregate".into(),
    })?;
    let mut out = LoraAdapter::zeros_like(first);
    for (id, ad) in &sorted {
        if !ad.same_layout(first) {
            return Err(FederationError::Aggregation {
                client: *id,
                message: format!(
                    "rank {} / {} layers / dims {:?} differ from rank {} / {} layers / dims {:?}",
                    ad.rank(),
                    ad.n_layers(),
                    ad.dims(),
                    first.rank(),
                    first.n_layers(),
                    first.dims()
                ),
            });
        }
        for (o, p) in out.params_mut().into_iter().zip(ad.params()) {
            o.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
        }
    }
    let n = sorted.len() as f64;
    for p in out.params_mut() {
        p.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// A rayon pool of the configured size.
pub fn worker_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

struct ClientUpdate {
    id: usize,
    payload: Vec<u8>,
    global_loss: Option<f64>,
    local: Option<(LoraAdapter, Option<f64>)>,
}

/// sample → broadcast → client training → aggregate → log. Clients train in
/// parallel on `pool`; the outcome does not depend on the pool size.
pub fn run_round(
    backbone: &Backbone,
    server: &mut ServerState,
    clients: &mut [ClientState],
    groups: Option<&[Vec<usize>]>,
    config: &FedConfig,
    pool: &rayon::ThreadPool,
) -> Result<RoundLog> {
    use rayon::prelude::*;
    let round = server.round;
    let mut rng = derive_rng(config.seed, &[purpose::SAMPLING, round as u64]);
    let selected = sample_clients(clients.len(), groups, config.sample_rate, &mut rng)?;
    let payload = server.global.serialize();
    let train_local = config.algorithm == Algorithm::FeddpaT;
    let updates: Vec<Result<ClientUpdate>> = pool.install(|| {
        selected
            .par_iter()
            .map(|&id| {
                let client = &clients[id];
                let received = LoraAdapter::deserialize(&payload)?;
                let (trained, global_loss) = client_train_global(backbone, client, &received, config, round)?;
                let local = if train_local {
                    Some(client_train_local(backbone, client, &received, config, round)?)
                } else {
                    None
                };
                Ok(ClientUpdate {
                    id,
                    payload: trained.serialize(),
                    global_loss,
                    local,
                })
            })
            .collect()
    });
    let mut received = Vec::with_capacity(selected.len());
    let mut log = RoundLog {
        round,
        clients: selected.clone(),
        global_losses: Vec::new(),
        local_losses: Vec::new(),
        mean_loss: None,
        bytes_down: payload.len() * selected.len(),
        bytes_up: 0,
    };
    for u in updates {
        let u = u?;
        log.bytes_up += u.payload.len();
        received.push((u.id, LoraAdapter::deserialize(&u.payload)?));
        log.global_losses.push(u.global_loss);
        if let Some((adapter, loss)) = u.local {
            clients[u.id].local_adapter = Some(adapter);
            log.local_losses.push(loss);
        }
    }
    server.global = server_aggregate(&received)?;
    let losses: Vec<f64> = log.global_losses.iter().flatten().copied().collect();
    if !losses.is_empty() {
        log.mean_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    server.round += 1;
    server.history.push(log.clone());
    Ok(log)
}

/// Appends one JSON record per line.
pub fn append_round_log(path: &Path, log: &RoundLog) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(log).expect("log serializes"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn validation_lists_every_problem() {
        let c = FedConfig {
            sample_rate: 0.0,
            alpha: 1.5,
            lambda: Some(0.0),
            num_samples: 0,
            ..Default::default()
        };
        match c.validate() {
            Err(FederationError::Config(v)) => assert_eq!(v.len(), 4, "{v:?}"),
            other => panic!("{other:?}"),
        }
        assert!(FedConfig::default().validate().is_ok());
    }

    #[test]
    fn lambda_defaults_per_algorithm() {
        let t = FedConfig::default();
        assert_eq!(t.effective_lambda(), 0.5);
        let f = FedConfig {
            algorithm: Algorithm::FeddpaF,
            ..Default::default()
        };
        assert_eq!(f.effective_lambda(), 1.0);
    }

    #[test]
    fn quota_is_robust_to_rounding() {
        assert_eq!(quota(0.6, 5), 3);
        assert_eq!(quota(0.2, 5), 1);
        assert_eq!(quota(1.0, 8), 8);
        assert_eq!(quota(0.01, 8), 1);
    }

    #[test]
    fn full_rate_selects_everyone() {
        let mut rng = rng_from(1);
        assert_eq!(sample_clients(8, None, 1.0, &mut rng).unwrap(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn per_task_rate_picks_one_per_group() {
        let groups: Vec<Vec<usize>> = (0..8).map(|t| (0..5).map(|j| t * 5 + j).collect()).collect();
        let mut rng = rng_from(2);
        let s = sample_clients(40, Some(&groups), 0.2, &mut rng).unwrap();
        assert_eq!(s.len(), 8);
        for (t, g) in groups.iter().enumerate() {
            assert_eq!(s.iter().filter(|id| g.contains(id)).count(), 1, "task {t}");
        }
    }

    #[test]
    fn two_buffer_mean() {
        let cfg = crate::model::BackboneConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            ..Default::default()
        };
        let mut a = LoraAdapter::new(&cfg, 1, 1).unwrap();
        let mut b = a.clone();
        a.params_mut()[0].data_mut().copy_from_slice(&[1.0, 2.0, 0.0, 0.0]);
        b.params_mut()[0].data_mut().copy_from_slice(&[5.0, 6.0, 0.0, 0.0]);
        let m = server_aggregate(&[(1, b), (0, a.clone())]).unwrap();
        assert_eq!(m.params()[0].data(), &[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(server_aggregate(&[(3, a.clone())]).unwrap(), a);
    }

    #[test]
    fn mismatched_adapter_names_the_client() {
        let cfg = crate::model::BackboneConfig::default();
        let a = LoraAdapter::new(&cfg, 8, 1).unwrap();
        let b = LoraAdapter::new(&cfg, 4, 1).unwrap();
        match server_aggregate(&[(0, a), (7, b)]) {
            Err(FederationError::Aggregation { client, .. }) => assert_eq!(client, 7),
            other => panic!("{other:?}"),
        }
    }
}
