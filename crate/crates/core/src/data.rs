//! Synthetic instruction tasks, the closed symbol vocabulary, client
//! partitioning and JSONL/manifest I/O.
//!
//! Every task renders as `Instruction: <keyword> <items…> Response:` followed
//! by a whitespace-separated answer. Tasks differ in their input→output
//! mapping, so each client's task is a distribution shift for every other
//! client.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng_from};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown symbol {symbol:?}")]
    UnknownSymbol { symbol: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const INSTRUCTION: &str = "Instruction:";
pub const RESPONSE: &str = "Response:";

const SPECIALS: [&str; 4] = ["<pad>", "<eos>", INSTRUCTION, RESPONSE];
const KEYWORDS: [&str; 10] = [
    "copy:", "reverse:", "sort:", "parity:", "sum:", "max:", "count:", "pattern:", "rotate:",
    "min:",
];
const WORDS: [&str; 2] = ["even", "odd"];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
const LETTERS: [&str; 26] = [
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p", "q", "r",
    "s", "t", "u", "v", "w", "x", "y", "z",
];
// unused by the built-in tasks; available to ingested JSONL data
const RESERVED: [&str; 12] = ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L"];

/// The fixed 64-symbol whitespace vocabulary shared by every task.
#[derive(Debug, Clone)]
pub struct Vocab {
    symbols: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        let symbols: Vec<&'static str> = SPECIALS
            .iter()
            .chain(&KEYWORDS)
            .chain(&WORDS)
            .chain(&DIGITS)
            .chain(&LETTERS)
            .chain(&RESERVED)
            .copied()
            .collect();
        let index = symbols.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        Self { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| DataError::UnknownSymbol {
                symbol: symbol.to_string(),
            })
    }

    pub fn symbol(&self, id: usize) -> Option<&'static str> {
        self.symbols.get(id).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|s| self.id(s)).collect()
    }

    /// Joins symbols with single spaces, skipping padding and end markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != EOS)
            .filter_map(|&i| self.symbol(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub task: usize,
    pub instruction: String,
    pub response: String,
}

impl Instance {
    /// `Instruction: {instruction} Response:` as a symbol string.
    pub fn prompt_text(&self) -> String {
        format!("{INSTRUCTION} {} {RESPONSE}", self.instruction)
    }
}

/// Token ids of the rendered prompt.
pub fn render_prompt(vocab: &Vocab, inst: &Instance) -> Result<Vec<usize>> {
    vocab.encode(&inst.prompt_text())
}

/// Prompt, response and a closing `<eos>`; the second value is the prompt
/// length, i.e. the index of the first response token.
pub fn render_example(vocab: &Vocab, inst: &Instance) -> Result<(Vec<usize>, usize)> {
    let mut tokens = render_prompt(vocab, inst)?;
    let prompt_len = tokens.len();
    tokens.extend(vocab.encode(&inst.response)?);
    tokens.push(EOS);
    Ok((tokens, prompt_len))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    Parity,
    ModSum,
    MaxToken,
    CountClass,
    Pattern,
    /// Held out of every training set; used for unseen-task evaluation.
    Rotate,
    /// Held out of every training set; used for unseen-task evaluation.
    MinToken,
}

impl TaskKind {
    pub const TRAINING: [TaskKind; 8] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::Sort,
        TaskKind::Parity,
        TaskKind::ModSum,
        TaskKind::MaxToken,
        TaskKind::CountClass,
        TaskKind::Pattern,
    ];
    pub const UNSEEN: [TaskKind; 2] = [TaskKind::Rotate, TaskKind::MinToken];

    pub fn keyword(self) -> &'static str {
        KEYWORDS[self as usize]
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::Parity => "parity",
            TaskKind::ModSum => "mod_sum",
            TaskKind::MaxToken => "max_token",
            TaskKind::CountClass => "count_class",
            TaskKind::Pattern => "pattern",
            TaskKind::Rotate => "rotate",
            TaskKind::MinToken => "min_token",
        }
    }

    /// Deterministic answer for the given input items.
    pub fn answer(self, items: &[&str]) -> Vec<String> {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match self {
            TaskKind::Copy => own(items),
            TaskKind::Reverse => items.iter().rev().map(|s| s.to_string()).collect(),
            TaskKind::Sort => {
                let mut v = own(items);
                v.sort();
                v
            }
            TaskKind::Rotate => {
                let mut v = own(items);
                if !v.is_empty() {
                    v.rotate_left(1);
                }
                v
            }
            TaskKind::Parity => {
                let sum: u32 = items.iter().filter_map(|s| s.parse::<u32>().ok()).sum();
                vec![if sum % 2 == 0 { "even" } else { "odd" }.to_string()]
            }
            TaskKind::ModSum => {
                let sum: u32 = items.iter().filter_map(|s| s.parse::<u32>().ok()).sum();
                vec![(sum % 10).to_string()]
            }
            TaskKind::MaxToken => items.iter().max().map(|s| s.to_string()).into_iter().collect(),
            TaskKind::MinToken => items.iter().min().map(|s| s.to_string()).into_iter().collect(),
            TaskKind::CountClass => {
                let digits = items.iter().filter(|s| DIGITS.contains(s)).count();
                vec![digits.to_string()]
            }
            TaskKind::Pattern => {
                // the instruction is a unit repeated twice; answer one more unit
                let half = items.len() / 2;
                own(&items[..half])
            }
        }
    }

    fn sample_items<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<&'static str> {
        let pick = |rng: &mut R, pool: &[&'static str], n: usize| -> Vec<&'static str> {
            (0..n).map(|_| *pool.choose(rng).expect("non-empty pool")).collect()
        };
        match self {
            TaskKind::Copy => {
                let n = rng.random_range(3..=5);
                pick(rng, &LETTERS[..8], n)
            }
            TaskKind::Reverse => {
                let n = rng.random_range(3..=5);
                pick(rng, &LETTERS[8..16], n)
            }
            TaskKind::Sort => {
                let n = rng.random_range(3..=5);
                pick(rng, &LETTERS[16..], n)
            }
            TaskKind::Rotate | TaskKind::MinToken => {
                let n = rng.random_range(3..=5);
                pick(rng, &LETTERS, n)
            }
            TaskKind::MaxToken => {
                let n = rng.random_range(6..=7);
                pick(rng, &LETTERS, n)
            }
            TaskKind::Parity => {
                let n = rng.random_range(3..=5);
                pick(rng, &DIGITS, n)
            }
            TaskKind::ModSum => {
                let n = rng.random_range(2..=3);
                pick(rng, &DIGITS, n)
            }
            TaskKind::CountClass => {
                let n = rng.random_range(3..=5);
                (0..n)
                    .map(|_| {
                        if rng.random_bool(0.5) {
                            *DIGITS.choose(rng).expect("non-empty")
                        } else {
                            *LETTERS.choose(rng).expect("non-empty")
                        }
                    })
                    .collect()
            }
            TaskKind::Pattern => {
                let p = rng.random_range(2..=3);
                let unit = pick(rng, &LETTERS, p);
                unit.iter().chain(unit.iter()).copied().collect()
            }
        }
    }

    /// Draws one instance of this task.
    pub fn generate<R: Rng + ?Sized>(self, task: usize, rng: &mut R) -> Instance {
        let items = self.sample_items(rng);
        Instance {
            task,
            instruction: format!("{} {}", self.keyword(), items.join(" ")),
            response: self.answer(&items).join(" "),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub kind: TaskKind,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSizes {
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// Also build the held-out tasks (never assigned to a client).
    pub unseen_tasks: bool,
    /// Longest rendered prompt + response + `<eos>` the backbone accepts.
    pub max_seq_len: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            train_per_task: 300,
            test_per_task: 200,
            unseen_tasks: true,
            max_seq_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    pub id: usize,
    pub task: usize,
    pub train: Vec<Instance>,
}

/// Per-task splits plus the client → task assignment.
///
/// A client's local test set is its task's test split; its shifted test
/// sets are every other task's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub task_train: Vec<Vec<Instance>>,
    pub task_test: Vec<Vec<Instance>>,
    pub clients: Vec<ClientData>,
    pub unseen: Vec<TaskSpec>,
    pub unseen_test: Vec<Vec<Instance>>,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn client(&self, id: usize) -> &ClientData {
        &self.clients[id]
    }

    pub fn local_test(&self, client: usize) -> &[Instance] {
        &self.task_test[self.clients[client].task]
    }

    /// Every other task's test split, in task order.
    pub fn shifted_tests(&self, client: usize) -> Vec<(usize, &[Instance])> {
        let own = self.clients[client].task;
        (0..self.tasks.len())
            .filter(|&t| t != own)
            .map(|t| (t, self.task_test[t].as_slice()))
            .collect()
    }

    /// Client ids grouped by task, ascending.
    pub fn task_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.tasks.len()];
        for c in &self.clients {
            groups[c.task].push(c.id);
        }
        groups
    }

    pub fn all_train(&self) -> Vec<Instance> {
        self.clients.iter().flat_map(|c| c.train.iter().cloned()).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            seed: self.seed,
            tasks: self.tasks.clone(),
            unseen: self.unseen.clone(),
            clients: self
                .clients
                .iter()
                .map(|c| ClientAssignment {
                    id: c.id,
                    task: c.task,
                    train_size: c.train.len(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAssignment {
    pub id: usize,
    pub task: usize,
    pub train_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub unseen: Vec<TaskSpec>,
    pub clients: Vec<ClientAssignment>,
}

/// Draws `train + test` instances with pairwise distinct instructions; the
/// first `train` go to the training split.
fn generate_splits(
    spec: &TaskSpec,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<(Vec<Instance>, Vec<Instance>)> {
    let mut rng = rng_from(spec.seed);
    let need = spec.train_size + spec.test_size;
    let mut seen = HashSet::with_capacity(need);
    let mut out = Vec::with_capacity(need);
    let mut attempts = 0usize;
    while out.len() < need {
        attempts += 1;
        if attempts > need * 200 + 10_000 {
            return Err(DataError::Generation(format!(
                "task {} could not produce {need} distinct instances",
                spec.name
            )));
        }
        let inst = spec.kind.generate(spec.id, &mut rng);
        if !seen.insert(inst.instruction.clone()) {
            continue;
        }
        let (tokens, _) = render_example(vocab, &inst)?;
        if tokens.len() > max_seq_len {
            return Err(DataError::Generation(format!(
                "task {} rendered {} tokens, limit {max_seq_len}",
                spec.name,
                tokens.len()
            )));
        }
        out.push(inst);
    }
    let test = out.split_off(spec.train_size);
    Ok((out, test))
}

/// Builds a suite with one client per task from an explicit list of kinds.
pub fn build_suite_with(kinds: &[TaskKind], seed: u64, sizes: SuiteSizes) -> Result<FederatedDataset> {
    if kinds.len() < 2 {
        return Err(DataError::Config("a suite needs at least two task kinds".into()));
    }
    let distinct: BTreeSet<_> = kinds.iter().collect();
    if distinct.len() != kinds.len() {
        return Err(DataError::Config("task kinds must be distinct".into()));
    }
    let vocab = Vocab::standard();
    let spec_for = |id: usize, kind: TaskKind, salt: u64| TaskSpec {
        id,
        name: kind.name().to_string(),
        kind,
        train_size: sizes.train_per_task,
        test_size: sizes.test_per_task,
        seed: derive_seed(seed, &[salt, id as u64]),
    };
    let tasks: Vec<TaskSpec> = kinds.iter().enumerate().map(|(i, &k)| spec_for(i, k, 0)).collect();
    let mut task_train = Vec::new();
    let mut task_test = Vec::new();
    for spec in &tasks {
        let (tr, te) = generate_splits(spec, &vocab, sizes.max_seq_len)?;
        task_train.push(tr);
        task_test.push(te);
    }
    let clients = tasks
        .iter()
        .map(|t| ClientData {
            id: t.id,
            task: t.id,
            train: task_train[t.id].clone(),
        })
        .collect();
    let mut unseen = Vec::new();
    let mut unseen_test = Vec::new();
    if sizes.unseen_tasks {
        for (j, &kind) in TaskKind::UNSEEN.iter().enumerate() {
            if kinds.contains(&kind) {
                continue;
            }
            let mut spec = spec_for(kinds.len() + j, kind, 1);
            spec.train_size = 0;
            let (_, te) = generate_splits(&spec, &vocab, sizes.max_seq_len)?;
            unseen.push(spec);
            unseen_test.push(te);
        }
    }
    Ok(FederatedDataset {
        seed,
        tasks,
        task_train,
        task_test,
        clients,
        unseen,
        unseen_test,
    })
}

/// The default eight-task suite, one client per task.
pub fn build_suite(seed: u64, sizes: SuiteSizes) -> Result<FederatedDataset> {
    build_suite_with(&TaskKind::TRAINING, seed, sizes)
}

/// Splits every task's training data into `subsets_per_task` equal disjoint
/// shards, one client each. Test splits stay shared per task. Client ids are
/// task-major: client `t·subsets + j` holds shard `j` of task `t`.
pub fn split_for_scaling(dataset: &FederatedDataset, subsets_per_task: usize) -> Result<FederatedDataset> {
    if subsets_per_task == 0 {
        return Err(DataError::Config("subsets_per_task must be at least 1".into()));
    }
    let mut clients = Vec::new();
    for (t, train) in dataset.task_train.iter().enumerate() {
        if train.len() % subsets_per_task != 0 {
            return Err(DataError::Config(format!(
                "task {t} has {} training instances, not divisible into {subsets_per_task} subsets",
                train.len()
            )));
        }
        let shard = train.len() / subsets_per_task;
        for j in 0..subsets_per_task {
            clients.push(ClientData {
                id: clients.len(),
                task: t,
                train: train[j * shard..(j + 1) * shard].to_vec(),
            });
        }
    }
    Ok(FederatedDataset {
        clients,
        ..dataset.clone()
    })
}

/// Instances from every training task drawn from an independent stream;
/// the backbone's language-modeling corpus.
pub fn pretraining_corpus(seed: u64, per_task: usize) -> Vec<Instance> {
    let mut out = Vec::with_capacity(per_task * TaskKind::TRAINING.len());
    for (i, kind) in TaskKind::TRAINING.iter().enumerate() {
        let mut rng = rng_from(derive_seed(seed, &[2, i as u64]));
        out.extend((0..per_task).map(|_| kind.generate(i, &mut rng)));
    }
    out
}

pub fn save_jsonl(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("instances always serialize");
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads `{task, instruction, response}` records; blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<Instance>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn small() -> SuiteSizes {
        SuiteSizes {
            train_per_task: 30,
            test_per_task: 20,
            ..SuiteSizes::default()
        }
    }

    #[test]
    fn vocab_has_64_unique_symbols() {
        let v = Vocab::standard();
        assert_eq!(v.len(), 64);
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<eos>").unwrap(), EOS);
        assert!(matches!(v.id("zz"), Err(DataError::UnknownSymbol { .. })));
    }

    #[test]
    fn copy_and_reverse_answers() {
        assert_eq!(TaskKind::Copy.answer(&["a", "b", "c"]).join(" "), "a b c");
        assert_eq!(TaskKind::Reverse.answer(&["a", "b", "c"]).join(" "), "c b a");
        assert_eq!(TaskKind::Sort.answer(&["c", "a", "b"]).join(" "), "a b c");
        assert_eq!(TaskKind::Parity.answer(&["1", "2"]).join(" "), "odd");
        assert_eq!(TaskKind::ModSum.answer(&["7", "8"]).join(" "), "5");
        assert_eq!(TaskKind::MaxToken.answer(&["c", "q", "b"]).join(" "), "q");
        assert_eq!(TaskKind::CountClass.answer(&["a", "3", "9"]).join(" "), "2");
        assert_eq!(TaskKind::Pattern.answer(&["a", "b", "a", "b"]).join(" "), "a b");
        assert_eq!(TaskKind::Rotate.answer(&["a", "b", "c"]).join(" "), "b c a");
    }

    #[test]
    fn copy_instance_renders_with_template() {
        let inst = Instance {
            task: 0,
            instruction: "copy: a b c".into(),
            response: "a b c".into(),
        };
        assert_eq!(inst.prompt_text(), "Instruction: copy: a b c Response:");
        let vocab = Vocab::standard();
        let (tokens, plen) = render_example(&vocab, &inst).unwrap();
        assert_eq!(plen, 6);
        assert_eq!(tokens.len(), 10);
        assert_eq!(*tokens.last().unwrap(), EOS);
    }

    #[test]
    fn reverse_generator_matches_independent_reverse() {
        let mut rng = rng_from(5);
        for _ in 0..1000 {
            let inst = TaskKind::Reverse.generate(1, &mut rng);
            let items: Vec<&str> = inst.instruction.split_whitespace().skip(1).collect();
            let mut manual = Vec::new();
            for i in (0..items.len()).rev() {
                manual.push(items[i]);
            }
            assert_eq!(inst.response, manual.join(" "));
        }
    }

    #[test]
    fn suite_is_deterministic_and_leak_free() {
        let a = build_suite(11, small()).unwrap();
        let b = build_suite(11, small()).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        assert_eq!(a.num_clients(), 8);
        for t in 0..a.num_tasks() {
            let train: HashSet<_> = a.task_train[t].iter().map(|i| &i.instruction).collect();
            assert!(a.task_test[t].iter().all(|i| !train.contains(&i.instruction)));
        }
        assert_eq!(a.unseen.len(), 2);
        assert!(a.clients.iter().all(|c| c.task < 8));
    }

    #[test]
    fn suite_needs_two_kinds() {
        assert!(build_suite_with(&[TaskKind::Copy], 0, small()).is_err());
    }

    #[test]
    fn overlong_rendering_is_rejected() {
        let sizes = SuiteSizes {
            max_seq_len: 5,
            ..small()
        };
        assert!(matches!(build_suite(0, sizes), Err(DataError::Generation(_))));
    }

    #[test]
    fn shifted_tests_exclude_own_task() {
        let d = build_suite(3, small()).unwrap();
        let shifted = d.shifted_tests(2);
        assert_eq!(shifted.len(), 7);
        assert!(shifted.iter().all(|(t, _)| *t != 2));
    }

    #[test]
    fn scaling_split_shards() {
        let d = build_suite(3, small()).unwrap();
        let s = split_for_scaling(&d, 5).unwrap();
        assert_eq!(s.num_clients(), 40);
        assert!(s.clients.iter().all(|c| c.train.len() == 6));
        assert_eq!(split_for_scaling(&d, 1).unwrap().clients, d.clients);
        assert!(matches!(split_for_scaling(&d, 7), Err(DataError::Config(_))));
    }

    #[test]
    fn jsonl_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"task\":0,\"instruction\":\"copy: a\",\"response\":\"a\"}\n{oops\n").unwrap();
        match load_jsonl(&p) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
