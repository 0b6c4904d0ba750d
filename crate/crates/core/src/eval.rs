//! ROUGE-1 scoring, per-client personalization and test-time scores,
//! unseen-task summaries, communication accounting and report writers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::TrainedSystem;
use crate::data::{self, FederatedDataset, Instance, Vocab};
use crate::federation::{Algorithm, ClientState, FedConfig};
use crate::lora::{self, AdapterStack, LoraAdapter, Mix};
use crate::model::{Backbone, BackboneConfig, ModelError, DEFAULT_MAX_NEW, STOP_TOKEN};
use crate::weighting::{self, WeightingContext, WeightingError, WeightingParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric error: {0}")]
    Metric(String),
    #[error("system error: {0}")]
    System(String),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Unigram F1 with clipped counts over whitespace-separated symbols.
pub fn rouge1(prediction: &str, reference: &str) -> Result<f64> {
    fn count(s: &str) -> HashMap<&str, usize> {
        let mut m: HashMap<&str, usize> = HashMap::new();
        for w in s.split_whitespace() {
            *m.entry(w).or_default() += 1;
        }
        m
    }
    let r = count(reference);
    let nr: usize = r.values().sum();
    if nr == 0 {
        return Err(EvalError::Metric("empty reference".into()));
    }
    let p = count(prediction);
    let np: usize = p.values().sum();
    if np == 0 {
        return Ok(0.0);
    }
    let overlap: usize = p.iter().map(|(w, c)| (*c).min(*r.get(w).unwrap_or(&0))).sum();
    if overlap == 0 {
        return Ok(0.0);
    }
    let precision = overlap as f64 / np as f64;
    let recall = overlap as f64 / nr as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Only the first `n` test instances of every task.
    pub subsample: Option<usize>,
    /// Score every training task, not just the client's own.
    pub test_time: bool,
    pub unseen: bool,
    pub max_new: usize,
    pub keep_instances: bool,
    pub keep_alphas: bool,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            subsample: None,
            test_time: true,
            unseen: true,
            max_new: DEFAULT_MAX_NEW,
            keep_instances: false,
            keep_alphas: false,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub task: usize,
    /// ROUGE-1 on the client's own task.
    pub personalization: f64,
    /// Mean over every training task with equal weight.
    pub test_time: Option<f64>,
    /// Indexed by training task; empty unless test-time scoring ran.
    pub task_scores: Vec<f64>,
    pub unseen_scores: Vec<f64>,
    pub mean_alpha_own: Option<f64>,
    pub mean_alpha_shifted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnseenSummary {
    pub task: String,
    pub avg: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub algorithm: Algorithm,
    pub personalization: f64,
    pub test_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundBytes {
    pub round: usize,
    pub down: usize,
    pub up: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub adapter_params: usize,
    pub backbone_params: usize,
    /// `adapter / (backbone + adapter)`.
    pub adapter_fraction: f64,
    pub payload_bytes: usize,
    pub bytes_down_per_round: usize,
    pub bytes_up_per_round: usize,
    pub total_bytes: usize,
    pub rounds: Vec<RoundBytes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub client: usize,
    pub task: String,
    pub instance: usize,
    pub prediction: String,
    pub reference: String,
    pub rouge1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub client: usize,
    pub task: String,
    pub instance: usize,
    pub scores: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub algorithm: Algorithm,
    pub manifest_hash: Option<String>,
    pub task_names: Vec<String>,
    pub clients: Vec<ClientMetrics>,
    pub avg_personalization: f64,
    pub avg_test_time: Option<f64>,
    pub unseen: Vec<UnseenSummary>,
    pub curves: Vec<CurvePoint>,
    pub comm: CommReport,
    /// Number of instance weights computed.
    pub weighting_calls: usize,
    pub mean_alpha_own: Option<f64>,
    pub mean_alpha_shifted: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub instances: Vec<InstanceScore>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub alphas: Vec<AlphaRecord>,
}

/// Closed-form adapter size: `layers × 2 targets × r × (d_in + d_out)`.
pub fn adapter_param_count(config: &BackboneConfig, rank: usize) -> usize {
    config.n_layers * 2 * rank * (config.d_model + config.d_model)
}

/// Byte accounting for `rounds` rounds with `per_round` clients; measured
/// per-round records are taken from `history` when given.
pub fn comm_report(
    config: &BackboneConfig,
    rank: usize,
    rounds: usize,
    per_round: usize,
    history: &[crate::federation::RoundLog],
) -> CommReport {
    let adapter_params = adapter_param_count(config, rank);
    let backbone_params = config.param_count();
    let payload_bytes = lora::HEADER_BYTES + adapter_params * 8;
    let measured: Vec<RoundBytes> = history
        .iter()
        .map(|h| RoundBytes {
            round: h.round,
            down: h.bytes_down,
            up: h.bytes_up,
        })
        .collect();
    let total_bytes = if measured.is_empty() {
        2 * payload_bytes * per_round * rounds
    } else {
        measured.iter().map(|r| r.down + r.up).sum()
    };
    CommReport {
        adapter_params,
        backbone_params,
        adapter_fraction: adapter_params as f64 / (backbone_params + adapter_params) as f64,
        payload_bytes,
        bytes_down_per_round: payload_bytes * per_round,
        bytes_up_per_round: payload_bytes * per_round,
        total_bytes,
        rounds: measured,
    }
}

/// How one client's model is assembled at inference.
enum Composition<'s> {
    Bare,
    Single(&'s LoraAdapter),
    Fixed(&'s LoraAdapter, &'s LoraAdapter, f64),
    Dynamic(&'s LoraAdapter, &'s LoraAdapter, WeightingContext),
}

fn missing(what: &str, client: usize) -> EvalError {
    EvalError::System(format!("no {what} adapter for client {client}"))
}

fn weighting_params(config: &FedConfig) -> WeightingParams {
    WeightingParams {
        lambda: config.effective_lambda(),
        num_samples: config.num_samples,
        metric: config.sim_metric,
        mode: config.embedding_mode,
        resample_per_instance: config.resample_per_instance,
        seed: config.seed,
    }
}

fn composition<'s>(
    backbone: &Backbone,
    system: &'s TrainedSystem,
    client: usize,
    train: &[Instance],
) -> Result<Composition<'s>> {
    let global = system.global.as_ref();
    let local = system.locals.get(&client);
    Ok(match system.algorithm {
        Algorithm::Fedit | Algorithm::Centralized => match global {
            Some(g) => Composition::Single(g),
            None => Composition::Bare,
        },
        Algorithm::Fedlora | Algorithm::Local => Composition::Single(local.ok_or_else(|| missing("local", client))?),
        Algorithm::FeddpaF | Algorithm::FeddpaT => {
            let g = global.ok_or_else(|| missing("global", client))?;
            let l = local.ok_or_else(|| missing("local", client))?;
            if system.config.dynamic_weighting {
                let ctx = weighting::build_context(backbone, Some(g), client, train, weighting_params(&system.config))?;
                Composition::Dynamic(g, l, ctx)
            } else {
                Composition::Fixed(g, l, system.config.alpha)
            }
        }
    })
}

struct TaskOutcome {
    score: f64,
    alphas: Vec<f64>,
    instances: Vec<InstanceScore>,
    alpha_records: Vec<AlphaRecord>,
}

fn score_task(
    backbone: &Backbone,
    comp: &Composition<'_>,
    client: usize,
    task_name: &str,
    test: &[Instance],
    opts: &EvalOptions,
    calls: &AtomicUsize,
) -> Result<TaskOutcome> {
    let vocab = Vocab::standard();
    let test = match opts.subsample {
        Some(n) => &test[..n.min(test.len())],
        None => test,
    };
    if test.is_empty() {
        return Err(EvalError::System(format!("task {task_name} has no test instances")));
    }
    let prompts = test
        .iter()
        .map(|i| data::render_prompt(&vocab, i))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut alphas = Vec::new();
    let mut alpha_records = Vec::new();
    let stack = match comp {
        Composition::Bare => AdapterStack::none(),
        Composition::Single(a) => AdapterStack::single(a),
        Composition::Fixed(g, l, a) => AdapterStack::dual(g, l, *a),
        Composition::Dynamic(g, l, ctx) => {
            let emb = backbone.embed_batch(Some(g), &prompts, ctx.params.mode)?;
            for (i, e) in emb.iter().enumerate() {
                let scores = ctx.scores(e, i)?;
                let a = weighting::alpha_from_scores(&scores, ctx.params.lambda);
                calls.fetch_add(1, Ordering::Relaxed);
                if opts.keep_alphas {
                    alpha_records.push(AlphaRecord {
                        client,
                        task: task_name.to_string(),
                        instance: i,
                        scores,
                        alpha: a,
                    });
                }
                alphas.push(a);
            }
            AdapterStack {
                global: Some(g),
                local: Some(l),
                mix: Mix::PerSequence(alphas.clone()),
            }
        }
    };
    let outputs = backbone.greedy_decode_batch(&stack, &prompts, opts.max_new, STOP_TOKEN)?;
    let mut total = 0.0;
    let mut instances = Vec::new();
    for (i, (inst, out)) in test.iter().zip(&outputs).enumerate() {
        let pred = vocab.decode(out);
        let s = rouge1(&pred, &inst.response)?;
        total += s;
        if opts.keep_instances {
            instances.push(InstanceScore {
                client,
                task: task_name.to_string(),
                instance: i,
                prediction: pred,
                reference: inst.response.clone(),
                rouge1: s,
            });
        }
    }
    Ok(TaskOutcome {
        score: total / test.len() as f64,
        alphas,
        instances,
        alpha_records,
    })
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

struct ClientOutcome {
    metrics: ClientMetrics,
    alphas_own: Vec<f64>,
    alphas_shifted: Vec<f64>,
    instances: Vec<InstanceScore>,
    alpha_records: Vec<AlphaRecord>,
}

/// Decodes every scored test instance with each client's composition.
pub fn evaluate(
    backbone: &Backbone,
    system: &TrainedSystem,
    dataset: &FederatedDataset,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    use rayon::prelude::*;
    if system.backbone_checksum != backbone.checksum() {
        return Err(EvalError::System("system was trained on a different backbone".into()));
    }
    let calls = AtomicUsize::new(0);
    let n_tasks = dataset.num_tasks();
    // compositions without per-client parts score each task once
    let shared = matches!(system.algorithm, Algorithm::Fedit | Algorithm::Centralized);
    let shared_scores: Option<(Vec<f64>, Vec<f64>)> = if shared {
        let comp = composition(backbone, system, 0, &[])?;
        let task_scores = (0..n_tasks)
            .map(|t| {
                score_task(backbone, &comp, 0, &dataset.tasks[t].name, &dataset.task_test[t], opts, &calls)
                    .map(|o| o.score)
            })
            .collect::<Result<Vec<_>>>()?;
        let unseen = if opts.unseen {
            dataset
                .unseen
                .iter()
                .zip(&dataset.unseen_test)
                .map(|(spec, test)| score_task(backbone, &comp, 0, &spec.name, test, opts, &calls).map(|o| o.score))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Some((task_scores, unseen))
    } else {
        None
    };
    let pool = crate::federation::worker_pool(opts.workers);
    let outcomes: Vec<Result<ClientOutcome>> = pool.install(|| {
        dataset
            .clients
            .par_iter()
            .map(|c| {
                if let Some((task_scores, unseen)) = &shared_scores {
                    return Ok(ClientOutcome {
                        metrics: ClientMetrics {
                            client: c.id,
                            task: c.task,
                            personalization: task_scores[c.task],
                            test_time: if opts.test_time { mean(task_scores) } else { None },
                            task_scores: if opts.test_time { task_scores.clone() } else { Vec::new() },
                            unseen_scores: unseen.clone(),
                            mean_alpha_own: None,
                            mean_alpha_shifted: None,
                        },
                        alphas_own: Vec::new(),
                        alphas_shifted: Vec::new(),
                        instances: Vec::new(),
                        alpha_records: Vec::new(),
                    });
                }
                let comp = composition(backbone, system, c.id, &c.train)?;
                let tasks: Vec<usize> = if opts.test_time { (0..n_tasks).collect() } else { vec![c.task] };
                let mut task_scores = vec![f64::NAN; n_tasks];
                let mut out = ClientOutcome {
                    metrics: ClientMetrics {
                        client: c.id,
                        task: c.task,
                        personalization: 0.0,
                        test_time: None,
                        task_scores: Vec::new(),
                        unseen_scores: Vec::new(),
                        mean_alpha_own: None,
                        mean_alpha_shifted: None,
                    },
                    alphas_own: Vec::new(),
                    alphas_shifted: Vec::new(),
                    instances: Vec::new(),
                    alpha_records: Vec::new(),
                };
                for t in tasks {
                    let o = score_task(backbone, &comp, c.id, &dataset.tasks[t].name, &dataset.task_test[t], opts, &calls)?;
                    task_scores[t] = o.score;
                    if t == c.task {
                        out.alphas_own.extend(o.alphas);
                    } else {
                        out.alphas_shifted.extend(o.alphas);
                    }
                    out.instances.extend(o.instances);
                    out.alpha_records.extend(o.alpha_records);
                }
                if opts.unseen {
                    for (spec, test) in dataset.unseen.iter().zip(&dataset.unseen_test) {
                        let o = score_task(backbone, &comp, c.id, &spec.name, test, opts, &calls)?;
                        out.metrics.unseen_scores.push(o.score);
                        out.instances.extend(o.instances);
                        out.alpha_records.extend(o.alpha_records);
                    }
                }
                out.metrics.personalization = task_scores[c.task];
                if opts.test_time {
                    out.metrics.test_time = mean(&task_scores);
                    out.metrics.task_scores = task_scores;
                }
                out.metrics.mean_alpha_own = mean(&out.alphas_own);
                out.metrics.mean_alpha_shifted = mean(&out.alphas_shifted);
                Ok(out)
            })
            .collect()
    });
    let mut clients = Vec::new();
    let mut own = Vec::new();
    let mut shifted = Vec::new();
    let mut instances = Vec::new();
    let mut alphas = Vec::new();
    for o in outcomes {
        let o = o?;
        own.extend(o.alphas_own);
        shifted.extend(o.alphas_shifted);
        instances.extend(o.instances);
        alphas.extend(o.alpha_records);
        clients.push(o.metrics);
    }
    let pers: Vec<f64> = clients.iter().map(|c| c.personalization).collect();
    let ttp: Vec<f64> = clients.iter().filter_map(|c| c.test_time).collect();
    let unseen = if opts.unseen {
        dataset
            .unseen
            .iter()
            .enumerate()
            .map(|(u, spec)| {
                let s: Vec<f64> = clients.iter().map(|c| c.unseen_scores[u]).collect();
                UnseenSummary {
                    task: spec.name.clone(),
                    avg: mean(&s).unwrap_or(0.0),
                    max: s.iter().copied().fold(0.0, f64::max),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let per_round = system.history.first().map(|h| h.clients.len()).unwrap_or(0);
    Ok(MetricsReport {
        algorithm: system.algorithm,
        manifest_hash: None,
        task_names: dataset.tasks.iter().map(|t| t.name.clone()).collect(),
        avg_personalization: mean(&pers).unwrap_or(0.0),
        avg_test_time: if opts.test_time { mean(&ttp) } else { None },
        clients,
        unseen,
        curves: Vec::new(),
        comm: comm_report(
            backbone.config(),
            system.config.rank,
            system.history.len(),
            per_round,
            &system.history,
        ),
        weighting_calls: calls.into_inner(),
        mean_alpha_own: mean(&own),
        mean_alpha_shifted: mean(&shifted),
        instances,
        alphas,
    })
}

/// Scores a mid-training state on a subsample: the current global adapter
/// alone, or with FEDDPA_T the fused composition with the current private
/// adapters.
pub fn curve_point(
    backbone: &Backbone,
    config: &FedConfig,
    round: usize,
    global: &LoraAdapter,
    clients: &[ClientState],
    dataset: &FederatedDataset,
    opts: &EvalOptions,
) -> Result<CurvePoint> {
    let mut locals = std::collections::BTreeMap::new();
    let algorithm = if config.algorithm == Algorithm::FeddpaT {
        for c in clients {
            let l = match &c.local_adapter {
                Some(l) => l.clone(),
                None => crate::federation::initial_local_adapter(backbone, config, c.id)
                    .map_err(|e| EvalError::System(e.to_string()))?,
            };
            locals.insert(c.id, l);
        }
        Algorithm::FeddpaT
    } else {
        Algorithm::Fedit
    };
    let system = TrainedSystem {
        algorithm,
        config: FedConfig {
            algorithm,
            ..config.clone()
        },
        backbone_checksum: backbone.checksum(),
        global: Some(global.clone()),
        locals,
        history: Vec::new(),
    };
    let opts = EvalOptions {
        unseen: false,
        keep_instances: false,
        keep_alphas: false,
        ..opts.clone()
    };
    let r = evaluate(backbone, &system, dataset, &opts)?;
    Ok(CurvePoint {
        round,
        algorithm: config.algorithm,
        personalization: r.avg_personalization,
        test_time: r.avg_test_time,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn write_json(path: &Path, report: &MetricsReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report).expect("report serializes"))?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| EvalError::System(format!("{}: {e}", path.display())))
}

/// `round,algorithm,personalization,test_time`.
pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("round,algorithm,personalization,test_time\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{:.6},{}",
            p.round,
            p.algorithm.name(),
            p.personalization,
            fmt_opt(p.test_time)
        );
    }
    s
}

/// One row per client: own-task score, test-time score, per-task scores.
pub fn clients_csv(report: &MetricsReport) -> String {
    let mut s = String::from("client,task,personalization,test_time");
    for n in &report.task_names {
        let _ = write!(s, ",{}", csv_field(n));
    }
    s.push('\n');
    for c in &report.clients {
        let _ = write!(
            s,
            "{},{},{:.6},{}",
            c.client,
            csv_field(&report.task_names[c.task]),
            c.personalization,
            fmt_opt(c.test_time)
        );
        for i in 0..report.task_names.len() {
            let _ = write!(s, ",{}", fmt_opt(c.task_scores.get(i).copied()));
        }
        s.push('\n');
    }
    s
}

pub fn instances_csv(rows: &[InstanceScore]) -> String {
    let mut s = String::from("client,task,instance,prediction,reference,rouge1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6}",
            r.client,
            csv_field(&r.task),
            r.instance,
            csv_field(&r.prediction),
            csv_field(&r.reference),
            r.rouge1
        );
    }
    s
}

pub fn alphas_csv(rows: &[AlphaRecord]) -> String {
    let mut s = String::from("client,task,instance,alpha,scores\n");
    for r in rows {
        let scores: Vec<String> = r.scores.iter().map(|x| format!("{x:.6}")).collect();
        let _ = writeln!(s, "{},{},{},{:.6},{}", r.client, csv_field(&r.task), r.instance, r.alpha, scores.join(";"));
    }
    s
}

/// Aligned table: one row per client with per-task columns, then averages.
pub fn table(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "algorithm: {}", report.algorithm.name());
    let _ = write!(s, "{:<8}{:<12}", "client", "task");
    for n in &report.task_names {
        let _ = write!(s, "{:>12}", n);
    }
    let _ = writeln!(s, "{:>10}{:>10}", "PERS", "TTP");
    let pct = |x: Option<f64>| x.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into());
    for c in &report.clients {
        let _ = write!(s, "{:<8}{:<12}", c.client, report.task_names[c.task]);
        for i in 0..report.task_names.len() {
            let _ = write!(s, "{:>12}", pct(c.task_scores.get(i).copied()));
        }
        let _ = writeln!(s, "{:>10}{:>10}", pct(Some(c.personalization)), pct(c.test_time));
    }
    let _ = writeln!(
        s,
        "average personalization {}  test-time {}",
        pct(Some(report.avg_personalization)),
        pct(report.avg_test_time)
    );
    for u in &report.unseen {
        let _ = writeln!(s, "unseen {:<10} AVG {:>7}  MAX {:>7}", u.task, pct(Some(u.avg)), pct(Some(u.max)));
    }
    let c = &report.comm;
    let _ = writeln!(
        s,
        "adapter params {} ({:.3}% of {}), payload {} bytes, total {} bytes",
        c.adapter_params,
        100.0 * c.adapter_fraction,
        c.backbone_params + c.adapter_params,
        c.payload_bytes,
        c.total_bytes
    );
    s
}

/// Side-by-side averages of several reports.
pub fn compare_table(reports: &[(String, MetricsReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28}{:<14}{:>10}{:>10}", "run", "algorithm", "PERS", "TTP");
    for (name, r) in reports {
        let _ = writeln!(
            s,
            "{:<28}{:<14}{:>10.2}{:>10}",
            name,
            r.algorithm.name(),
            100.0 * r.avg_personalization,
            r.avg_test_time.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into())
        );
    }
    s
}
