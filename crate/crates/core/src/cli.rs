//! Configuration-driven experiment runner behind the `feddpa` binary.
//!
//! A run is described by a TOML file with the sections `[run]`,
//! `[backbone]`, `[pretrain]`, `[data]`, `[fed]` and `[eval]`. Any key can
//! be overridden on the command line as `--section.key=value`, or as
//! `--key value` when the key name is unique across sections.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::algorithms::{self, AlgorithmError, TrainedSystem};
use crate::data::{self, DataError, DatasetManifest, FederatedDataset, SuiteSizes};
use crate::eval::{self, CurvePoint, EvalError, EvalOptions, MetricsReport};
use crate::federation::{FedConfig, FederationError, RoundLog};
use crate::lora::{self, LoraAdapter, LoraError};
use crate::model::{self, Backbone, BackboneConfig, ModelError, PretrainConfig};
use crate::weighting::WeightingError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{module}: {message}")]
    Runtime { module: &'static str, message: String },
}

impl CliError {
    /// 2 for configuration problems, 3 for everything that fails later.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime { .. } => 3,
        }
    }

    fn runtime(module: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Runtime {
            module,
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<FederationError> for CliError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::Config(errs) => CliError::Config(errs.join("; ")),
            other => CliError::runtime("federation", other),
        }
    }
}

impl From<AlgorithmError> for CliError {
    fn from(e: AlgorithmError) -> Self {
        match e {
            AlgorithmError::Federation(f) => f.into(),
            other => CliError::runtime("algorithms", other),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Config(m),
            other => CliError::runtime("model", other),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => CliError::Config(m),
            other => CliError::runtime("data", other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::runtime("eval", e)
    }
}

impl From<LoraError> for CliError {
    fn from(e: LoraError) -> Self {
        CliError::runtime("lora", e)
    }
}

impl From<WeightingError> for CliError {
    fn from(e: WeightingError) -> Self {
        CliError::runtime("weighting", e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime("io", e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
    /// Loaded when it exists, written after pretraining otherwise.
    pub backbone_checkpoint: Option<PathBuf>,
    /// Score the training state every `n` rounds; 0 disables curves.
    pub curve_every: usize,
    /// Test instances per task for curve points.
    pub curve_subsample: usize,
    /// Worker threads for client training and evaluation.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/latest"),
            backbone_checkpoint: None,
            curve_every: 0,
            curve_subsample: 50,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub unseen_tasks: bool,
    /// Split every task's training set into this many clients.
    pub subsets_per_task: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let sizes = SuiteSizes::default();
        Self {
            seed: 0,
            train_per_task: sizes.train_per_task,
            test_per_task: sizes.test_per_task,
            unseen_tasks: sizes.unseen_tasks,
            subsets_per_task: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub data: DataSection,
    pub fed: FedConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    /// Propagates the worker budget into the sections that consume it.
    fn normalized(mut self) -> Self {
        self.fed.workers = self.run.workers;
        self.eval.workers = self.run.workers;
        self
    }

    /// Every invariant violation across sections, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(FederationError::Config(list)) = self.fed.validate() {
            errs.extend(list);
        }
        if let Err(e) = self.backbone.validate() {
            errs.push(e.to_string());
        }
        if self.run.workers == 0 {
            errs.push("run.workers must be at least 1".into());
        }
        if self.data.subsets_per_task == 0 {
            errs.push("data.subsets_per_task must be at least 1".into());
        } else if self.data.train_per_task % self.data.subsets_per_task != 0 {
            errs.push(format!(
                "data.train_per_task {} is not divisible by data.subsets_per_task {}",
                self.data.train_per_task, self.data.subsets_per_task
            ));
        }
        let clients = data::TaskKind::TRAINING.len() * self.data.subsets_per_task.max(1);
        if self.fed.num_clients != clients {
            errs.push(format!(
                "fed.num_clients is {} but the dataset has {clients} clients",
                self.fed.num_clients
            ));
        }
        if self.pretrain.batch_size == 0 {
            errs.push("pretrain.batch_size must be at least 1".into());
        }
        if self.eval.max_new == 0 {
            errs.push("eval.max_new must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs.join("; ")))
        }
    }

    /// Hex SHA-256 over the canonical config JSON and the backbone
    /// checksum. File locations and worker counts are excluded, so moving a
    /// run or changing its parallelism keeps the hash.
    pub fn content_hash(&self, backbone_checksum: &str) -> String {
        let mut c = self.clone();
        c.run.out_dir = PathBuf::new();
        c.run.backbone_checkpoint = None;
        c.run.workers = 0;
        c.fed.workers = 0;
        c.eval.workers = 0;
        let text = serde_json::to_string(&c).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.update(b"\n");
        h.update(backbone_checksum.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Parsed `--key value` pairs and at most one sweep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub pairs: Vec<(String, String)>,
    pub sweep: Option<(String, Vec<String>)>,
}

/// Splits raw trailing arguments into `--config`, `--sweep` and overrides.
pub fn parse_overrides(args: &[String]) -> Result<Overrides> {
    let mut out = Overrides::default();
    let mut i = 0;
    while i < args.len() {
        let Some(flag) = args[i].strip_prefix("--") else {
            return Err(CliError::Config(format!("unexpected argument '{}'", args[i])));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None if i + 1 < args.len() && !args[i + 1].starts_with("--") => {
                i += 1;
                (flag.to_string(), args[i].clone())
            }
            None => (flag.to_string(), "true".to_string()),
        };
        i += 1;
        match key.as_str() {
            "config" => out.config = Some(PathBuf::from(value)),
            "sweep" => {
                if out.sweep.is_some() {
                    return Err(CliError::Config("only one --sweep is supported".into()));
                }
                let (k, vs) = value
                    .split_once('=')
                    .ok_or_else(|| CliError::Config(format!("--sweep expects key=v1,v2,...; got '{value}'")))?;
                let vs: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
                if vs.is_empty() {
                    return Err(CliError::Config(format!("--sweep {k} has no values")));
                }
                out.sweep = Some((k.to_string(), vs));
            }
            "" => return Err(CliError::Config("empty flag '--'".into())),
            _ => out.pairs.push((key, value)),
        }
    }
    Ok(out)
}

fn aliases(key: &str) -> &str {
    match key {
        "out" => "run.out_dir",
        "workers" => "run.workers",
        other => other,
    }
}

/// Resolves a possibly unqualified key against the default tree.
fn resolve_key(tree: &Map<String, Value>, key: &str) -> Result<(String, String)> {
    let key = aliases(key);
    if let Some((section, field)) = key.split_once('.') {
        let known = tree
            .get(section)
            .and_then(Value::as_object)
            .is_some_and(|s| s.contains_key(field));
        if !known {
            return Err(CliError::Config(format!("unknown key '{key}'")));
        }
        return Ok((section.to_string(), field.to_string()));
    }
    let hits: Vec<&String> = tree
        .iter()
        .filter(|(_, v)| v.as_object().is_some_and(|s| s.contains_key(key)))
        .map(|(k, _)| k)
        .collect();
    match hits.as_slice() {
        [one] => Ok(((*one).clone(), key.to_string())),
        [] => Err(CliError::Config(format!("unknown key '{key}'"))),
        many => Err(CliError::Config(format!(
            "ambiguous key '{key}'; use one of {}",
            many.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Interprets a command-line value against the type of the default.
fn parse_value(raw: &str, default: &Value) -> Value {
    if matches!(raw, "none" | "null") && default.is_null() {
        return Value::Null;
    }
    if let Value::String(d) = default {
        let is_enum = !d.is_empty() && d.chars().all(|c| c.is_ascii_uppercase() || c == '_' || c.is_ascii_digit());
        if is_enum {
            return Value::String(raw.to_ascii_uppercase().replace('-', "_"));
        }
        return Value::String(raw.to_string());
    }
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => {
            let v = t.remove("v").expect("parsed key");
            serde_json::to_value(v).unwrap_or_else(|_| Value::String(raw.to_string()))
        }
        Err(_) => Value::String(raw.to_string()),
    }
}

fn defaults_tree() -> Map<String, Value> {
    match serde_json::to_value(RunConfig::default()).expect("defaults serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    }
}

fn set_key(tree: &mut Map<String, Value>, defaults: &Map<String, Value>, key: &str, raw: &str) -> Result<()> {
    let (section, field) = resolve_key(defaults, key)?;
    let default = &defaults[&section][&field];
    let value = parse_value(raw, default);
    tree.entry(section)
        .or_insert_with(|| Value::Object(Map::new()))
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("'{key}' is not inside a section")))?
        .insert(field, value);
    Ok(())
}

fn merge(base: &mut Map<String, Value>, top: Map<String, Value>) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Object(b)), Value::Object(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn from_tree(tree: Map<String, Value>) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_value(Value::Object(tree)).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg.normalized())
}

/// Defaults, then the config file, then the overrides.
pub fn resolve_config(file: Option<&Path>, pairs: &[(String, String)]) -> Result<(RunConfig, Map<String, Value>)> {
    let defaults = defaults_tree();
    let mut tree = defaults.clone();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        match serde_json::to_value(table).map_err(|e| CliError::Config(e.to_string()))? {
            Value::Object(m) => merge(&mut tree, m),
            _ => unreachable!("a TOML table maps to an object"),
        }
    }
    for (k, v) in pairs {
        set_key(&mut tree, &defaults, k, v)?;
    }
    let cfg = from_tree(tree.clone())?;
    Ok((cfg, tree))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub backbone: u64,
    pub pretrain: u64,
    pub data: u64,
    pub fed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub hash: String,
    pub config: RunConfig,
    pub dataset: DatasetManifest,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    pub backbone_checksum: String,
}

/// Loads the configured checkpoint or pretrains (and caches) a backbone.
pub fn load_or_pretrain(cfg: &RunConfig) -> Result<Backbone> {
    if let Some(path) = &cfg.run.backbone_checkpoint {
        if path.exists() {
            let bb = Backbone::load(path)?;
            if bb.config() != &cfg.backbone {
                return Err(CliError::Config(format!(
                    "checkpoint {} was built with a different [backbone] section",
                    path.display()
                )));
            }
            info!("loaded backbone {} ({})", path.display(), short(&bb.checksum()));
            return Ok(bb);
        }
    }
    info!("pretraining backbone for {} steps", cfg.pretrain.steps);
    let (bb, losses) = model::pretrain(cfg.backbone.clone(), &cfg.pretrain)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        info!("pretraining loss {first:.4} -> {last:.4}");
    }
    if let Some(path) = &cfg.run.backbone_checkpoint {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        bb.save(path)?;
        info!("saved backbone to {}", path.display());
    }
    Ok(bb)
}

pub fn build_dataset(cfg: &RunConfig) -> Result<FederatedDataset> {
    let sizes = SuiteSizes {
        train_per_task: cfg.data.train_per_task,
        test_per_task: cfg.data.test_per_task,
        unseen_tasks: cfg.data.unseen_tasks,
        max_seq_len: cfg.backbone.max_seq_len,
    };
    let ds = data::build_suite(cfg.data.seed, sizes)?;
    if cfg.data.subsets_per_task > 1 {
        Ok(data::split_for_scaling(&ds, cfg.data.subsets_per_task)?)
    } else {
        Ok(ds)
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn with_hash_line(hash: &str, body: &str) -> String {
    format!("# manifest {hash}\n{body}")
}

#[derive(Serialize)]
struct RoundRecord<'a> {
    manifest_hash: &'a str,
    #[serde(flatten)]
    log: &'a RoundLog,
}

/// Writes every report for `report` under `out`.
pub fn write_reports(out: &Path, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(out)?;
    let hash = report.manifest_hash.clone().unwrap_or_default();
    eval::write_json(&out.join("metrics.json"), report)?;
    fs::write(out.join("table.txt"), with_hash_line(&hash, &eval::table(report)))?;
    fs::write(out.join("clients.csv"), with_hash_line(&hash, &eval::clients_csv(report)))?;
    fs::write(out.join("curves.csv"), with_hash_line(&hash, &eval::curves_csv(&report.curves)))?;
    if !report.instances.is_empty() {
        fs::write(out.join("instances.csv"), with_hash_line(&hash, &eval::instances_csv(&report.instances)))?;
    }
    if !report.alphas.is_empty() {
        fs::write(out.join("alphas.csv"), with_hash_line(&hash, &eval::alphas_csv(&report.alphas)))?;
    }
    Ok(())
}

/// Pretrain-or-load, build data, train, evaluate and write everything.
pub fn execute(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let out = cfg.run.out_dir.clone();
    let backbone = load_or_pretrain(cfg)?;
    let hash = cfg.content_hash(&backbone.checksum());
    fs::create_dir_all(&out)?;
    info!("run {} -> {}", short(&hash), out.display());
    let dataset = build_dataset(cfg)?;
    let manifest = RunManifest {
        hash: hash.clone(),
        config: cfg.clone(),
        dataset: dataset.manifest(),
        seeds: Seeds {
            backbone: cfg.backbone.seed,
            pretrain: cfg.pretrain.seed,
            data: cfg.data.seed,
            fed: cfg.fed.seed,
        },
        output_dir: out.clone(),
        backbone_checksum: backbone.checksum(),
    };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;

    let rounds_path = out.join("rounds.jsonl");
    fs::write(&rounds_path, "")?;
    let mut curves: Vec<CurvePoint> = Vec::new();
    let curve_opts = EvalOptions {
        subsample: Some(cfg.run.curve_subsample),
        unseen: false,
        keep_instances: false,
        keep_alphas: false,
        ..cfg.eval.clone()
    };
    let mut hook = |log: &RoundLog, global: &LoraAdapter, clients: &[crate::federation::ClientState]| -> algorithms::Result<()> {
        let mut line = serde_json::to_string(&RoundRecord {
            manifest_hash: &hash,
            log,
        })
        .expect("round log serializes");
        line.push('\n');
        use std::io::Write as _;
        fs::OpenOptions::new().append(true).open(&rounds_path)?.write_all(line.as_bytes())?;
        let done = log.round + 1;
        if cfg.run.curve_every > 0 && done % cfg.run.curve_every == 0 {
            let p = eval::curve_point(&backbone, &cfg.fed, done, global, clients, &dataset, &curve_opts)
                .map_err(|e| AlgorithmError::Hook(e.to_string()))?;
            curves.push(p);
        }
        Ok(())
    };
    let system = algorithms::train(&backbone, &dataset, &cfg.fed, Some(&mut hook))?;
    system.save(&out.join("system"), Some(&hash))?;
    info!("evaluating {}", cfg.fed.algorithm.name());
    let mut report = eval::evaluate(&backbone, &system, &dataset, &cfg.eval)?;
    report.manifest_hash = Some(hash);
    report.curves = curves;
    write_reports(&out, &report)?;
    Ok(report)
}

/// Runs the resolved config once, or once per sweep value in its own
/// subdirectory with a `sweep.csv` summary.
pub fn run(file: Option<&Path>, ov: &Overrides) -> Result<Vec<(PathBuf, MetricsReport)>> {
    let (base, tree) = resolve_config(file, &ov.pairs)?;
    base.validate()?;
    let Some((key, values)) = &ov.sweep else {
        let report = execute(&base)?;
        return Ok(vec![(base.run.out_dir.clone(), report)]);
    };
    let defaults = defaults_tree();
    let (section, field) = resolve_key(&defaults, key)?;
    let mut configs = Vec::new();
    for v in values {
        let mut t = tree.clone();
        set_key(&mut t, &defaults, &format!("{section}.{field}"), v)?;
        let mut cfg = from_tree(t)?;
        cfg.run.out_dir = base.run.out_dir.join(format!("{field}={v}"));
        cfg.validate()?;
        configs.push((v.clone(), cfg));
    }
    let mut results = Vec::new();
    let mut summary = String::from("value,algorithm,personalization,test_time,manifest_hash\n");
    for (v, cfg) in configs {
        let report = execute(&cfg)?;
        let _ = writeln!(
            summary,
            "{v},{},{:.6},{},{}",
            report.algorithm.name(),
            report.avg_personalization,
            report.avg_test_time.map(|x| format!("{x:.6}")).unwrap_or_default(),
            report.manifest_hash.as_deref().unwrap_or_default()
        );
        results.push((cfg.run.out_dir.clone(), report));
    }
    fs::create_dir_all(&base.run.out_dir)?;
    fs::write(base.run.out_dir.join("sweep.csv"), summary)?;
    Ok(results)
}

/// Re-evaluates the checkpoints of a finished run without training.
pub fn evaluate_run(run_dir: &Path, out: Option<&Path>, pairs: &[(String, String)]) -> Result<MetricsReport> {
    let text = fs::read_to_string(run_dir.join("manifest.json"))
        .map_err(|e| CliError::Config(format!("{}: {e}", run_dir.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let mut tree = match serde_json::to_value(&manifest.config).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    };
    let defaults = defaults_tree();
    for (k, v) in pairs {
        let (section, _) = resolve_key(&defaults, k)?;
        if section != "eval" && aliases(k) != "run.workers" {
            return Err(CliError::Config(format!(
                "evaluate only accepts eval.* and workers overrides, got '{k}'"
            )));
        }
        set_key(&mut tree, &defaults, k, v)?;
    }
    let cfg = from_tree(tree)?;
    let backbone = load_or_pretrain(&cfg)?;
    if backbone.checksum() != manifest.backbone_checksum {
        return Err(CliError::runtime("model", "backbone checksum differs from the run manifest"));
    }
    let dataset = build_dataset(&cfg)?;
    let system = TrainedSystem::load(&run_dir.join("system"))?;
    let mut report = eval::evaluate(&backbone, &system, &dataset, &cfg.eval)?;
    report.manifest_hash = Some(manifest.hash.clone());
    if let Ok(prev) = eval::read_json(&run_dir.join("metrics.json")) {
        report.curves = prev.curves;
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("eval"));
    write_reports(&out, &report)?;
    Ok(report)
}

/// Side-by-side table of several runs plus their merged curves.
pub fn compare(run_dirs: &[PathBuf]) -> Result<(String, String)> {
    if run_dirs.is_empty() {
        return Err(CliError::Config("compare needs at least one run directory".into()));
    }
    let mut reports = Vec::new();
    for d in run_dirs {
        let r = eval::read_json(&d.join("metrics.json"))?;
        reports.push((d.display().to_string(), r));
    }
    let table = eval::compare_table(&reports);
    let mut curves = String::from("run,round,algorithm,personalization,test_time\n");
    for (name, r) in &reports {
        for p in &r.curves {
            let _ = writeln!(
                curves,
                "{},{},{},{:.6},{}",
                name,
                p.round,
                p.algorithm.name(),
                p.personalization,
                p.test_time.map(|x| format!("{x:.6}")).unwrap_or_default()
            );
        }
    }
    Ok((table, curves))
}

#[derive(Serialize)]
struct MatrixJson {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize)]
struct LayerJson {
    query_a: MatrixJson,
    query_b: MatrixJson,
    value_a: MatrixJson,
    value_b: MatrixJson,
}

/// Adapter as JSON matrices in layer order.
pub fn adapter_json(adapter: &LoraAdapter) -> String {
    let m = |t: &crate::tensor::Tensor| MatrixJson {
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    };
    let layers: Vec<LayerJson> = adapter
        .layers()
        .iter()
        .map(|l| LayerJson {
            query_a: m(&l.query.a),
            query_b: m(&l.query.b),
            value_a: m(&l.value.a),
            value_b: m(&l.value.b),
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "rank": adapter.rank(), "layers": layers }))
        .expect("adapter serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportFormat {
    /// The binary wire payload.
    Lora,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "feddpa", version, about = "Federated dual-adapter personalization simulator")]
pub struct Cli {
    /// Log level for progress messages on stderr.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

/// Config-driven subcommands take `--config FILE`, any number of
/// `--section.key=value` overrides and (for `run`) one `--sweep key=v1,v2`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OPTIONS")]
    pub options: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a backbone and write its checkpoint.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Write the generated task splits as JSONL.
    BuildData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Train and evaluate one configuration (or a sweep).
    Run {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Re-evaluate a finished run from its checkpoints.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Compare the metrics of several runs.
    Compare {
        runs: Vec<PathBuf>,
        /// Also write the merged per-round curves here.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Copy one adapter of a finished run out of its checkpoint.
    ExportAdapter {
        #[arg(long)]
        run: PathBuf,
        /// `global` or a client id.
        #[arg(long, default_value = "global")]
        adapter: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "lora")]
        format: ExportFormat,
    },
}

fn no_sweep(ov: &Overrides, cmd: &str) -> Result<()> {
    if ov.sweep.is_some() {
        return Err(CliError::Config(format!("--sweep is only valid for run, not {cmd}")));
    }
    Ok(())
}

/// Executes a parsed command; stdout receives one JSON line per result.
pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { out, args } => {
            let ov = parse_overrides(&args.options)?;
            no_sweep(&ov, "pretrain")?;
            let (mut cfg, _) = resolve_config(ov.config.as_deref(), &ov.pairs)?;
            if let Err(e) = cfg.backbone.validate() {
                return Err(e.into());
            }
            cfg.run.backbone_checkpoint = None;
            let bb = load_or_pretrain(&cfg)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            bb.save(&out)?;
            println!(
                "{}",
                serde_json::json!({ "checkpoint": out, "checksum": bb.checksum(), "params": bb.param_count() })
            );
        }
        Command::BuildData { out, args } => {
            let ov = parse_overrides(&args.options)?;
            no_sweep(&ov, "build-data")?;
            let (cfg, _) = resolve_config(ov.config.as_deref(), &ov.pairs)?;
            let ds = build_dataset(&cfg)?;
            fs::create_dir_all(&out)?;
            for (t, spec) in ds.tasks.iter().enumerate() {
                data::save_jsonl(&out.join(format!("{}.train.jsonl", spec.name)), &ds.task_train[t])?;
                data::save_jsonl(&out.join(format!("{}.test.jsonl", spec.name)), &ds.task_test[t])?;
            }
            for (t, spec) in ds.unseen.iter().enumerate() {
                data::save_jsonl(&out.join(format!("{}.test.jsonl", spec.name)), &ds.unseen_test[t])?;
            }
            for c in &ds.clients {
                data::save_jsonl(&out.join(format!("client_{}.train.jsonl", c.id)), &c.train)?;
            }
            let manifest = serde_json::to_string_pretty(&ds.manifest()).expect("manifest serializes");
            fs::write(out.join("dataset.json"), &manifest)?;
            let hash = hex::encode(Sha256::digest(manifest.as_bytes()));
            println!("{}", serde_json::json!({ "out_dir": out, "dataset_hash": hash }));
        }
        Command::Run { args } => {
            let ov = parse_overrides(&args.options)?;
            for (dir, r) in run(ov.config.as_deref(), &ov)? {
                println!("{}", summary_line(&dir, &r));
            }
        }
        Command::Evaluate { run, out, args } => {
            let ov = parse_overrides(&args.options)?;
            no_sweep(&ov, "evaluate")?;
            if ov.config.is_some() {
                return Err(CliError::Config("evaluate reads its config from the run manifest".into()));
            }
            let r = evaluate_run(&run, out.as_deref(), &ov.pairs)?;
            let dir = out.unwrap_or_else(|| run.join("eval"));
            println!("{}", summary_line(&dir, &r));
        }
        Command::Compare { runs, curves } => {
            let (table, merged) = compare(&runs)?;
            print!("{table}");
            if let Some(path) = curves {
                fs::write(path, merged)?;
            }
        }
        Command::ExportAdapter {
            run,
            adapter,
            out,
            format,
        } => {
            let file = if adapter == "global" {
                "global.lora".to_string()
            } else {
                let id: usize = adapter
                    .parse()
                    .map_err(|_| CliError::Config(format!("--adapter expects 'global' or a client id, got '{adapter}'")))?;
                format!("local_{id}.lora")
            };
            let path = run.join("system").join(&file);
            if !path.exists() {
                return Err(CliError::runtime("lora", format!("{} does not exist", path.display())));
            }
            let (header, a) = lora::read_checkpoint(&path)?;
            match format {
                ExportFormat::Lora => fs::write(&out, a.serialize())?,
                ExportFormat::Json => fs::write(&out, adapter_json(&a))?,
            }
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "kind": header.kind,
                    "client": header.client,
                    "manifest_hash": header.manifest_hash,
                    "checksum": a.checksum(),
                })
            );
        }
    }
    Ok(())
}

fn summary_line(dir: &Path, r: &MetricsReport) -> String {
    serde_json::json!({
        "out_dir": dir,
        "algorithm": r.algorithm.name(),
        "manifest_hash": r.manifest_hash,
        "avg_personalization": r.avg_personalization,
        "avg_test_time": r.avg_test_time,
    })
    .to_string()
}
