//! Tiny decoder-only transformer: frozen body plus output head, batched
//! forward with adapter stacks, instance embeddings, greedy decoding,
//! checkpoints and the short in-repo pretraining run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{self, Instance, Vocab, EOS, PAD};
use crate::lora::{fused_projection_var, AdapterStack, LoraAdapter, LoraError, Mix, RowMix, StackVars, Target};
use crate::seed::{derive_rng, rng_from};
use crate::tensor::{Adam, Optimizer, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            errs.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(errs.join("; ")))
        }
    }

    /// Parameters of the frozen body and head.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let block = 4 * d + 4 * d * d + 2 * d * self.d_ff;
        self.vocab_size * d * 2 + self.max_seq_len * d + self.n_layers * block + 2 * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmbeddingMode {
    Last,
    Avg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl Block {
    fn params(&self) -> [&Tensor; 10] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g,
            &self.ln2_b, &self.w1, &self.w2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 10] {
        let Block {
            ln1_g,
            ln1_b,
            wq,
            wk,
            wv,
            wo,
            ln2_g,
            ln2_b,
            w1,
            w2,
        } = self;
        [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, w2]
    }
}

/// Linear weights are `[d_out × d_in]` and applied as `x·Wᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head: Tensor,
}

/// Right-padded token ids `[batch × seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn pad<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        if lengths.contains(&0) {
            return Err(ModelError::Input("empty sequence".into()));
        }
        let seq = *lengths.iter().max().expect("non-empty");
        let mut ids = vec![PAD; seqs.len() * seq];
        for (row, s) in seqs.iter().enumerate() {
            ids[row * seq..row * seq + s.as_ref().len()].copy_from_slice(s.as_ref());
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            seq,
            lengths,
        })
    }
}

/// Tape handles produced by [`Backbone::forward_tape`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub logits: Var,
    pub hidden: Var,
    /// Backbone leaves in [`Backbone::params`] order.
    pub params: Vec<Var>,
    pub adapters: StackVars,
}

/// Which next-token targets enter the language-modeling loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Response tokens and the closing `<eos>`.
    Response,
    /// Every non-pad token after the first.
    All,
}

/// One training example: tokens and the index of the first response token.
pub type Example = (Vec<usize>, usize);

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(config.seed);
        let (v, d, f, l) = (config.vocab_size, config.d_model, config.d_ff, config.max_seq_len);
        let lin = |rng: &mut crate::seed::Rng, out: usize, inp: usize, extra: f64| {
            Tensor::randn(&[out, inp], extra / (inp as f64).sqrt(), rng)
        };
        let resid = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let tok_emb = Tensor::randn(&[v, d], 0.5, &mut rng);
        let pos_emb = Tensor::randn(&[l, d], 0.1, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_g: Tensor::from_fn(&[d], |_| 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq: lin(&mut rng, d, d, 1.0),
                wk: lin(&mut rng, d, d, 1.0),
                wv: lin(&mut rng, d, d, 1.0),
                wo: lin(&mut rng, d, d, resid),
                ln2_g: Tensor::from_fn(&[d], |_| 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w1: lin(&mut rng, f, d, 1.0),
                w2: lin(&mut rng, d, f, resid),
            })
            .collect();
        let head = lin(&mut rng, v, d, 1.0);
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Tensor::from_fn(&[d], |_| 1.0),
            lnf_b: Tensor::zeros(&[d]),
            head,
            config,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Canonical parameter order used by checkpoints, checksums and the
    /// pretraining optimizer.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.head]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let Backbone {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head,
            ..
        } = self;
        let mut out: Vec<&mut Tensor> = vec![tok_emb, pos_emb];
        for b in blocks.iter_mut() {
            out.extend(b.params_mut());
        }
        out.extend([lnf_g, lnf_b, head]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(!frozen);
            p.clear_grad();
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.requires_grad())
    }

    /// Hex SHA-256 over every parameter buffer in canonical order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_stack(&self, stack: &AdapterStack<'_>, batch: usize) -> Result<()> {
        for ad in stack.global.iter().chain(stack.local.iter()) {
            if ad.n_layers() != self.config.n_layers || ad.dims() != (self.config.d_model, self.config.d_model) {
                return Err(ModelError::Input(format!(
                    "adapter with {} layers and dims {:?} does not fit the backbone",
                    ad.n_layers(),
                    ad.dims()
                )));
            }
        }
        match &stack.mix {
            Mix::PerSequence(v) if v.len() != batch => Err(ModelError::Input(format!(
                "{} mixing weights for a batch of {batch}",
                v.len()
            ))),
            _ => Ok(()),
        }
    }

    /// Builds the forward graph. Logits and hidden states are
    /// `[batch·seq × vocab]` and `[batch·seq × d_model]`; `hidden` is the
    /// final layer-normed state fed to the head.
    pub fn forward_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        batch: &TokenBatch,
        stack: &AdapterStack<'a>,
    ) -> Result<TapeForward> {
        let c = &self.config;
        if batch.seq > c.max_seq_len {
            return Err(ModelError::Length {
                len: batch.seq,
                max: c.max_seq_len,
            });
        }
        self.check_stack(stack, batch.batch)?;
        let params: Vec<Var> = self.params().into_iter().map(|p| tape.leaf(p)).collect();
        let adapters = stack.register(tape);
        let mix = RowMix::from_mix(&stack.mix, batch.seq);
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let tok = tape.embedding(params[0], &batch.ids)?;
        let pos = tape.embedding(params[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..c.n_layers {
            let p = &params[2 + 10 * l..12 + 10 * l];
            let h = tape.layer_norm(x, p[0], p[1])?;
            let (gq, lq) = adapters.get(l, Target::Query);
            let q = fused_projection_var(tape, h, p[2], gq, lq, &mix)?;
            let k = tape.matmul_t(h, p[3], false, true)?;
            let (gv, lv) = adapters.get(l, Target::Value);
            let v = fused_projection_var(tape, h, p[4], gv, lv, &mix)?;
            let a = tape.causal_attention(q, k, v, batch.batch, batch.seq, c.n_heads)?;
            let o = tape.matmul_t(a, p[5], false, true)?;
            x = tape.add(x, o)?;
            let h2 = tape.layer_norm(x, p[6], p[7])?;
            let f = tape.matmul_t(h2, p[8], false, true)?;
            let f = tape.gelu(f);
            let f = tape.matmul_t(f, p[9], false, true)?;
            x = tape.add(x, f)?;
        }
        let n = params.len();
        let hidden = tape.layer_norm(x, params[n - 3], params[n - 2])?;
        let logits = tape.matmul_t(hidden, params[n - 1], false, true)?;
        Ok(TapeForward {
            logits,
            hidden,
            params,
            adapters,
        })
    }

    /// Logits `[seq × vocab]` and final hidden states `[seq × d_model]` of one
    /// sequence.
    pub fn forward(&self, tokens: &[usize], stack: &AdapterStack<'_>) -> Result<(Tensor, Tensor)> {
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        let batch = TokenBatch::pad(&[tokens])?;
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, &batch, stack)?;
        Ok((tape.to_tensor(out.logits), tape.to_tensor(out.hidden)))
    }

    /// Mean next-token cross-entropy over the masked targets of a batch.
    /// Each example is shifted by one: input `t[..n−1]`, target `t[1..]`.
    pub fn lm_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        examples: &[Example],
        stack: &AdapterStack<'a>,
        mask: LossMask,
    ) -> Result<(Var, TapeForward)> {
        if examples.iter().any(|(t, _)| t.len() < 2) {
            return Err(ModelError::Input("training example shorter than 2 tokens".into()));
        }
        let inputs: Vec<&[usize]> = examples.iter().map(|(t, _)| &t[..t.len() - 1]).collect();
        let batch = TokenBatch::pad(&inputs)?;
        let mut targets = vec![None; batch.batch * batch.seq];
        for (row, (t, prompt_len)) in examples.iter().enumerate() {
            for i in 0..t.len() - 1 {
                let keep = match mask {
                    LossMask::Response => i + 1 >= *prompt_len,
                    LossMask::All => t[i + 1] != PAD,
                };
                if keep {
                    targets[row * batch.seq + i] = Some(t[i + 1]);
                }
            }
        }
        let fwd = self.forward_tape(tape, &batch, stack)?;
        let loss = tape.cross_entropy(fwd.logits, &targets)?;
        Ok((loss, fwd))
    }

    /// Final hidden states of many sequences, batched. Rows are reduced to
    /// the last real position (`Last`) or the mean over real positions
    /// (`Avg`); padding never enters.
    pub fn embed_batch<S: AsRef<[usize]>>(
        &self,
        global: Option<&LoraAdapter>,
        seqs: &[S],
        mode: EmbeddingMode,
    ) -> Result<Vec<Vec<f64>>> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let batch = TokenBatch::pad(chunk)?;
            let stack = AdapterStack {
                global,
                local: None,
                mix: Mix::Fixed(0.0),
            };
            let mut tape = Tape::new();
            let fwd = self.forward_tape(&mut tape, &batch, &stack)?;
            let h = tape.value(fwd.hidden);
            for (row, &len) in batch.lengths.iter().enumerate() {
                let at = |i: usize| &h[(row * batch.seq + i) * d..(row * batch.seq + i + 1) * d];
                out.push(match mode {
                    EmbeddingMode::Last => at(len - 1).to_vec(),
                    EmbeddingMode::Avg => {
                        let mut m = vec![0.0; d];
                        for i in 0..len {
                            m.iter_mut().zip(at(i)).for_each(|(a, b)| *a += b);
                        }
                        m.iter_mut().for_each(|a| *a /= len as f64);
                        m
                    }
                });
            }
        }
        Ok(out)
    }

    /// Embedding of one instance with the global adapter attached alone.
    pub fn extract_embedding(
        &self,
        global: Option<&LoraAdapter>,
        tokens: &[usize],
        mode: EmbeddingMode,
    ) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(ModelError::Input("empty sequence".into()));
        }
        Ok(self.embed_batch(global, &[tokens], mode)?.remove(0))
    }

    /// Batched greedy decoding. `stack.mix` may carry one weight per prompt.
    /// Finished rows leave the batch, so each row's result depends only on
    /// its own prompt and weight.
    pub fn greedy_decode_batch<S: AsRef<[usize]>>(
        &self,
        stack: &AdapterStack<'_>,
        prompts: &[S],
        max_new: usize,
        stop: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let max = self.config.max_seq_len;
        for p in prompts {
            let len = p.as_ref().len();
            if len == 0 {
                return Err(ModelError::Input("empty prompt".into()));
            }
            if len + max_new > max {
                return Err(ModelError::Length {
                    len: len + max_new,
                    max,
                });
            }
        }
        self.check_stack(stack, prompts.len())?;
        let mut seqs: Vec<Vec<usize>> = prompts.iter().map(|p| p.as_ref().to_vec()).collect();
        let mut gen: Vec<Vec<usize>> = vec![Vec::new(); prompts.len()];
        let mut active: Vec<usize> = (0..prompts.len()).collect();
        let v = self.config.vocab_size;
        for _ in 0..max_new {
            if active.is_empty() {
                break;
            }
            let rows: Vec<&[usize]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
            let batch = TokenBatch::pad(&rows)?;
            let sub = AdapterStack {
                global: stack.global,
                local: stack.local,
                mix: match &stack.mix {
                    Mix::Fixed(a) => Mix::Fixed(*a),
                    Mix::PerSequence(w) => Mix::PerSequence(active.iter().map(|&i| w[i]).collect()),
                },
            };
            let mut tape = Tape::new();
            let fwd = self.forward_tape(&mut tape, &batch, &sub)?;
            let logits = tape.value(fwd.logits);
            let mut still = Vec::with_capacity(active.len());
            for (row, &i) in active.iter().enumerate() {
                let at = (row * batch.seq + batch.lengths[row] - 1) * v;
                let tok = argmax(&logits[at..at + v]);
                seqs[i].push(tok);
                gen[i].push(tok);
                if tok != stop {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(gen)
    }

    pub fn greedy_decode(
        &self,
        stack: &AdapterStack<'_>,
        prompt: &[usize],
        max_new: usize,
        stop: usize,
    ) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_batch(stack, &[prompt], max_new, stop)?.remove(0))
    }

    /// Copy of the backbone with the stack's deltas folded into `W_q`/`W_v`.
    /// Only a scalar mix can be merged.
    pub fn merged(&self, stack: &AdapterStack<'_>) -> Result<Backbone> {
        let alpha = match stack.mix {
            Mix::Fixed(a) => a,
            Mix::PerSequence(_) => {
                return Err(ModelError::Input("per-sequence mix cannot be merged".into()))
            }
        };
        self.check_stack(stack, 0)?;
        let (wg, wl) = match (stack.global, stack.local) {
            (Some(_), Some(_)) => (1.0 - alpha, alpha),
            _ => (1.0, 1.0),
        };
        let mut out = self.clone();
        for (ad, w) in [(stack.global, wg), (stack.local, wl)] {
            let Some(ad) = ad else { continue };
            for (l, t, delta) in ad.merge() {
                let target = match t {
                    Target::Query => &mut out.blocks[l].wq,
                    Target::Value => &mut out.blocks[l].wv,
                };
                target
                    .data_mut()
                    .iter_mut()
                    .zip(delta.data())
                    .for_each(|(x, d)| *x += w * d);
            }
        }
        Ok(out)
    }

    /// Binary checkpoint: `FDPB`, u32 version, u32 config length, JSON
    /// config, then every parameter as little-endian f64 in canonical order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Backbone> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| ModelError::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 12 || &bytes[..4] != CKPT_MAGIC {
            return Err(bad("not a backbone checkpoint"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != CKPT_VERSION {
            return Err(bad("unsupported version"));
        }
        let cfg_len = word(8) as usize;
        let body = 12 + cfg_len;
        if bytes.len() < body {
            return Err(bad("truncated config"));
        }
        let config: BackboneConfig =
            serde_json::from_slice(&bytes[12..body]).map_err(|e| bad(&e.to_string()))?;
        let mut model = Backbone::new(config)?;
        let want = body + model.param_count() * 8;
        if bytes.len() != want {
            return Err(bad(&format!("expected {want} bytes, found {}", bytes.len())));
        }
        let mut at = body;
        for p in model.params_mut() {
            for x in p.data_mut() {
                *x = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
                at += 8;
            }
            if !p.is_finite() {
                return Err(bad("non-finite parameter"));
            }
        }
        Ok(model)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"FDPB";
const CKPT_VERSION: u32 = 1;

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub corpus_per_task: usize,
    /// Replace each instruction's task keyword by a neutral symbol, so the
    /// body learns the symbol statistics of the tasks without learning
    /// which mapping a keyword asks for.
    pub mask_keyword: bool,
    pub loss: LossMask,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            lr: 3e-3,
            corpus_per_task: 250,
            mask_keyword: true,
            loss: LossMask::Response,
            seed: 1234,
        }
    }
}

pub const NEUTRAL_KEYWORD: &str = "A";

/// Language-modeling pretraining with Adam; the result is frozen.
/// Returns the backbone and the per-step losses.
pub fn pretrain(config: BackboneConfig, pc: &PretrainConfig) -> Result<(Backbone, Vec<f64>)> {
    let vocab = Vocab::standard();
    if config.vocab_size < vocab.len() {
        return Err(ModelError::Config(format!(
            "vocab_size {} below the {} task symbols",
            config.vocab_size,
            vocab.len()
        )));
    }
    if pc.batch_size == 0 || pc.corpus_per_task == 0 {
        return Err(ModelError::Config("pretraining batch and corpus must be positive".into()));
    }
    let corpus = data::pretraining_corpus(pc.seed, pc.corpus_per_task);
    let examples: Vec<Example> = corpus
        .iter()
        .map(|inst| {
            let inst = if pc.mask_keyword {
                mask_keyword(inst)
            } else {
                inst.clone()
            };
            data::render_example(&vocab, &inst)
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut model = Backbone::new(config)?;
    model.set_frozen(false);
    let mut opt = Adam::new(pc.lr);
    let mut rng = derive_rng(pc.seed, &[9]);
    let mut losses = Vec::with_capacity(pc.steps);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    for _ in 0..pc.steps {
        let mut batch = Vec::with_capacity(pc.batch_size);
        while batch.len() < pc.batch_size {
            if cursor == order.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                cursor = 0;
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        let grads = {
            let mut tape = Tape::new();
            let (loss, fwd) = model.lm_loss(&mut tape, &batch, &AdapterStack::none(), pc.loss)?;
            losses.push(tape.value(loss)[0]);
            let g = tape.backward(loss)?;
            fwd.params.iter().map(|v| g.get(*v).map(<[f64]>::to_vec)).collect::<Vec<_>>()
        };
        let mut params = model.params_mut();
        for (p, g) in params.iter_mut().zip(grads) {
            p.accumulate_grad(&g.unwrap_or_else(|| vec![0.0; p.len()]))?;
        }
        opt.step(&mut params)?;
    }
    model.set_frozen(true);
    Ok((model, losses))
}

fn mask_keyword(inst: &Instance) -> Instance {
    let mut words = inst.instruction.split_whitespace();
    let _ = words.next();
    let rest: Vec<&str> = words.collect();
    Instance {
        instruction: std::iter::once(NEUTRAL_KEYWORD).chain(rest).collect::<Vec<_>>().join(" "),
        ..inst.clone()
    }
}

/// Greedy decoding budget: longest response plus `<eos>`.
pub const DEFAULT_MAX_NEW: usize = 8;

pub const STOP_TOKEN: usize = EOS;
