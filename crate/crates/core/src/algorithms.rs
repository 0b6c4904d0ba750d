//! End-to-end training procedures and the trained-system checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FederatedDataset;
use crate::federation::{
    clients_from_dataset, initial_local_adapter, run_round, train_adapter, worker_pool, Algorithm, ClientState,
    FedConfig, FederationError, RoundLog, SamplingMode, ServerState, TrainSpec,
};
use crate::lora::{self, CheckpointHeader, LoraAdapter, LoraError};
use crate::model::{Backbone, Example, ModelError};
use crate::seed::{derive_rng, derive_seed, purpose};

#[derive(Debug, Error)]
pub enum AlgorithmError {
    #[error("{0}")]
    Federation(#[from] FederationError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("round hook failed: {0}")]
    Hook(String),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AlgorithmError>;

/// Global adapter, per-client adapters and provenance of one training run.
///
/// FEDIT and CENTRALIZED fill only `global`; LOCAL and FEDLORA only
/// `locals`; FEDDPA_F and FEDDPA_T both.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSystem {
    pub algorithm: Algorithm,
    pub config: FedConfig,
    pub backbone_checksum: String,
    pub global: Option<LoraAdapter>,
    pub locals: BTreeMap<usize, LoraAdapter>,
    pub history: Vec<RoundLog>,
}

/// Called after every federated round with the new global adapter and the
/// client states.
pub type RoundHook<'h> = dyn FnMut(&RoundLog, &LoraAdapter, &[ClientState]) -> Result<()> + 'h;

fn groups_for(config: &FedConfig, clients: &[ClientState]) -> Option<Vec<Vec<usize>>> {
    match config.sampling {
        SamplingMode::Flat => None,
        SamplingMode::PerTask => {
            let mut by_task: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for c in clients {
                by_task.entry(c.task).or_default().push(c.id);
            }
            Some(by_task.into_values().collect())
        }
    }
}

fn check_clients(config: &FedConfig, clients: &[ClientState]) -> Result<()> {
    let mut errs = Vec::new();
    if clients.len() != config.num_clients {
        errs.push(format!(
            "num_clients is {} but the dataset has {} clients",
            config.num_clients,
            clients.len()
        ));
    }
    for (i, c) in clients.iter().enumerate() {
        if c.id != i {
            errs.push(format!("client at position {i} has id {}", c.id));
        }
        if c.examples.is_empty() {
            errs.push(format!("client {} has no training data", c.id));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(FederationError::Config(errs).into())
    }
}

/// `K` rounds of federated training of the global adapter; with FEDDPA_T
/// the clients' private adapters are trained in the same rounds.
pub fn federated_rounds(
    backbone: &Backbone,
    clients: &mut [ClientState],
    config: &FedConfig,
    mut hook: Option<&mut RoundHook<'_>>,
) -> Result<ServerState> {
    config.validate()?;
    check_clients(config, clients)?;
    let groups = groups_for(config, clients);
    let pool = worker_pool(config.workers);
    let mut server = ServerState::new(backbone, config)?;
    for _ in 0..config.rounds {
        let log = run_round(backbone, &mut server, clients, groups.as_deref(), config, &pool)?;
        log::info!(
            "{} round {} clients {:?} loss {:?}",
            config.algorithm.name(),
            log.round,
            log.clients,
            log.mean_loss
        );
        if let Some(h) = hook.as_mut() {
            h(&log, &server.global, clients)?;
        }
    }
    Ok(server)
}

fn train_fresh_or_copy(
    backbone: &Backbone,
    start: LoraAdapter,
    examples: &[Example],
    config: &FedConfig,
    epochs: usize,
    stream: &[u64],
) -> Result<LoraAdapter> {
    let mut adapter = start;
    let mut rng = derive_rng(config.seed, stream);
    let spec = TrainSpec {
        epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        mu: None,
    };
    train_adapter(backbone, &mut adapter, None, None, examples, spec, &mut rng)?;
    Ok(adapter)
}

/// Phase two of FEDDPA_F / FEDLORA: every client fine-tunes a copy of the
/// global adapter alone on its own data.
pub fn finetune_locals(
    backbone: &Backbone,
    clients: &[ClientState],
    global: &LoraAdapter,
    config: &FedConfig,
) -> Result<BTreeMap<usize, LoraAdapter>> {
    use rayon::prelude::*;
    let epochs = config.effective_finetune_epochs();
    let pool = worker_pool(config.workers);
    let out: Vec<Result<(usize, LoraAdapter)>> = pool.install(|| {
        clients
            .par_iter()
            .map(|c| {
                let a = train_fresh_or_copy(
                    backbone,
                    global.clone(),
                    &c.examples,
                    config,
                    epochs,
                    &[purpose::FINETUNE, c.id as u64],
                )?;
                Ok((c.id, a))
            })
            .collect()
    });
    out.into_iter().collect()
}

fn system(
    backbone: &Backbone,
    config: &FedConfig,
    algorithm: Algorithm,
    global: Option<LoraAdapter>,
    locals: BTreeMap<usize, LoraAdapter>,
    history: Vec<RoundLog>,
) -> TrainedSystem {
    TrainedSystem {
        algorithm,
        config: FedConfig {
            algorithm,
            ..config.clone()
        },
        backbone_checksum: backbone.checksum(),
        global,
        locals,
        history,
    }
}

/// Global training only.
pub fn fedit(backbone: &Backbone, clients: &mut [ClientState], config: &FedConfig, hook: Option<&mut RoundHook<'_>>) -> Result<TrainedSystem> {
    let cfg = FedConfig {
        algorithm: Algorithm::Fedit,
        ..config.clone()
    };
    let server = federated_rounds(backbone, clients, &cfg, hook)?;
    Ok(system(backbone, config, Algorithm::Fedit, Some(server.global), BTreeMap::new(), server.history))
}

/// Re-labels a FEDIT result as FEDDPA_F or FEDLORA by running the shared
/// fine-tuning phase. The global phase of all three is identical.
pub fn with_finetuned(
    backbone: &Backbone,
    clients: &[ClientState],
    base: &TrainedSystem,
    algorithm: Algorithm,
) -> Result<TrainedSystem> {
    let global = base
        .global
        .as_ref()
        .ok_or_else(|| AlgorithmError::Checkpoint("base system has no global adapter".into()))?;
    let config = FedConfig {
        algorithm,
        ..base.config.clone()
    };
    let locals = finetune_locals(backbone, clients, global, &config)?;
    let keep_global = match algorithm {
        Algorithm::FeddpaF => Some(global.clone()),
        Algorithm::Fedlora => None,
        other => {
            return Err(AlgorithmError::Checkpoint(format!(
                "{} has no fine-tuning phase",
                other.name()
            )))
        }
    };
    Ok(system(backbone, &config, algorithm, keep_global, locals, base.history.clone()))
}

/// Sequential variant: federated global adapter, then per-client
/// fine-tuned copies kept next to it.
pub fn feddpa_f(backbone: &Backbone, clients: &mut [ClientState], config: &FedConfig, hook: Option<&mut RoundHook<'_>>) -> Result<TrainedSystem> {
    let base = fedit(backbone, clients, config, hook)?;
    with_finetuned(backbone, clients, &base, Algorithm::FeddpaF)
}

/// Same schedule as [`feddpa_f`]; only the fine-tuned adapter is kept.
pub fn fedlora(backbone: &Backbone, clients: &mut [ClientState], config: &FedConfig, hook: Option<&mut RoundHook<'_>>) -> Result<TrainedSystem> {
    let base = fedit(backbone, clients, config, hook)?;
    with_finetuned(backbone, clients, &base, Algorithm::Fedlora)
}

/// Iterative variant: global and private adapters trained in every round.
pub fn feddpa_t(backbone: &Backbone, clients: &mut [ClientState], config: &FedConfig, hook: Option<&mut RoundHook<'_>>) -> Result<TrainedSystem> {
    let cfg = FedConfig {
        algorithm: Algorithm::FeddpaT,
        ..config.clone()
    };
    let server = federated_rounds(backbone, clients, &cfg, hook)?;
    let mut locals = BTreeMap::new();
    for c in clients.iter() {
        let l = match &c.local_adapter {
            Some(l) => l.clone(),
            None => initial_local_adapter(backbone, &cfg, c.id)?,
        };
        locals.insert(c.id, l);
    }
    Ok(system(backbone, &cfg, Algorithm::FeddpaT, Some(server.global), locals, server.history))
}

/// Each client trains its own adapter in isolation.
pub fn local_only(backbone: &Backbone, clients: &[ClientState], config: &FedConfig) -> Result<TrainedSystem> {
    use rayon::prelude::*;
    config.validate()?;
    let pool = worker_pool(config.workers);
    let out: Vec<Result<(usize, LoraAdapter)>> = pool.install(|| {
        clients
            .par_iter()
            .map(|c| {
                let start = initial_local_adapter(backbone, config, c.id)?;
                let a = train_fresh_or_copy(
                    backbone,
                    start,
                    &c.examples,
                    config,
                    config.local_only_epochs,
                    &[purpose::CLIENT_LOCAL, c.id as u64, u64::MAX],
                )?;
                Ok((c.id, a))
            })
            .collect()
    });
    let locals = out.into_iter().collect::<Result<_>>()?;
    Ok(system(backbone, config, Algorithm::Local, None, locals, Vec::new()))
}

/// One adapter on the pooled data of every client.
pub fn centralized(backbone: &Backbone, clients: &[ClientState], config: &FedConfig) -> Result<TrainedSystem> {
    config.validate()?;
    let pooled: Vec<Example> = clients.iter().flat_map(|c| c.examples.iter().cloned()).collect();
    let start = LoraAdapter::new(
        backbone.config(),
        config.rank,
        derive_seed(config.seed, &[purpose::ADAPTER_INIT, 0]),
    )?;
    let a = train_fresh_or_copy(
        backbone,
        start,
        &pooled,
        config,
        config.centralized_epochs,
        &[purpose::CENTRAL],
    )?;
    Ok(system(backbone, config, Algorithm::Centralized, Some(a), BTreeMap::new(), Vec::new()))
}

/// Builds client states from the dataset and dispatches on
/// `config.algorithm`.
pub fn train(
    backbone: &Backbone,
    dataset: &FederatedDataset,
    config: &FedConfig,
    hook: Option<&mut RoundHook<'_>>,
) -> Result<TrainedSystem> {
    config.validate()?;
    let mut clients = clients_from_dataset(dataset)?;
    check_clients(config, &clients)?;
    match config.algorithm {
        Algorithm::FeddpaF => feddpa_f(backbone, &mut clients, config, hook),
        Algorithm::FeddpaT => feddpa_t(backbone, &mut clients, config, hook),
        Algorithm::Fedit => fedit(backbone, &mut clients, config, hook),
        Algorithm::Fedlora => fedlora(backbone, &mut clients, config, hook),
        Algorithm::Local => local_only(backbone, &clients, config),
        Algorithm::Centralized => centralized(backbone, &clients, config),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SystemMeta {
    algorithm: Algorithm,
    config: FedConfig,
    backbone_checksum: String,
    has_global: bool,
    locals: Vec<usize>,
    history: Vec<RoundLog>,
    manifest_hash: Option<String>,
}

impl TrainedSystem {
    /// FedIT view of a FedDPA-T run. Global-adapter training in FedDPA-T
    /// never reads the local adapters, so its global trajectory is the FedIT
    /// trajectory for the same config and seed.
    pub fn global_view(&self) -> Self {
        Self {
            algorithm: Algorithm::Fedit,
            config: FedConfig {
                algorithm: Algorithm::Fedit,
                ..self.config.clone()
            },
            backbone_checksum: self.backbone_checksum.clone(),
            global: self.global.clone(),
            locals: BTreeMap::new(),
            history: self.history.clone(),
        }
    }

    /// `system.json`, `global.lora` and `local_<id>.lora` under `dir`.
    pub fn save(&self, dir: &Path, manifest_hash: Option<&str>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = SystemMeta {
            algorithm: self.algorithm,
            config: self.config.clone(),
            backbone_checksum: self.backbone_checksum.clone(),
            has_global: self.global.is_some(),
            locals: self.locals.keys().copied().collect(),
            history: self.history.clone(),
            manifest_hash: manifest_hash.map(str::to_string),
        };
        fs::write(
            dir.join("system.json"),
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )?;
        let header = |kind: &str, client: Option<usize>| CheckpointHeader {
            kind: kind.into(),
            client,
            manifest_hash: manifest_hash.map(str::to_string),
        };
        if let Some(g) = &self.global {
            lora::write_checkpoint(&dir.join("global.lora"), g, &header("global", None))?;
        }
        for (id, a) in &self.locals {
            lora::write_checkpoint(&dir.join(format!("local_{id}.lora")), a, &header("local", Some(*id)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<TrainedSystem> {
        let text = fs::read_to_string(dir.join("system.json"))?;
        let meta: SystemMeta =
            serde_json::from_str(&text).map_err(|e| AlgorithmError::Checkpoint(format!("system.json: {e}")))?;
        let global = if meta.has_global {
            Some(lora::read_checkpoint(&dir.join("global.lora"))?.1)
        } else {
            None
        };
        let mut locals = BTreeMap::new();
        for id in meta.locals {
            locals.insert(id, lora::read_checkpoint(&dir.join(format!("local_{id}.lora")))?.1);
        }
        Ok(TrainedSystem {
            algorithm: meta.algorithm,
            config: meta.config,
            backbone_checksum: meta.backbone_checksum,
            global,
            locals,
            history: meta.history,
        })
    }
}
