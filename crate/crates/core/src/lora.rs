//! Low-rank adapters on the query and value projections, the dual-adapter
//! fused projection, merging, and the wire format exchanged with the server.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::BackboneConfig;
use crate::seed::rng_from;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank error: {0}")]
    Rank(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("malformed adapter payload at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LoraError>;

const MAGIC: &[u8; 4] = b"LORA";
const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Query,
    Value,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::Query, Target::Value];
}

/// `Δ = B·A` with `A: [r × d_in]`, `B: [d_out × r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraMatrixPair {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraMatrixPair {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Dense `B·A`, shaped like the frozen weight it modifies.
    pub fn delta(&self) -> Tensor {
        self.b.matmul(&self.a).expect("pair shapes are consistent")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLora {
    pub query: LoraMatrixPair,
    pub value: LoraMatrixPair,
}

impl LayerLora {
    pub fn get(&self, t: Target) -> &LoraMatrixPair {
        match t {
            Target::Query => &self.query,
            Target::Value => &self.value,
        }
    }
}

/// One adapter: a rank-`r` pair on `W_q` and `W_v` of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    rank: usize,
    d_in: usize,
    d_out: usize,
    layers: Vec<LayerLora>,
}

impl LoraAdapter {
    /// Fresh adapter: `A` uniform in `±1/√d_in`, `B` zero, so the delta is
    /// exactly zero.
    pub fn new(config: &BackboneConfig, rank: usize, seed: u64) -> Result<Self> {
        let d = config.d_model;
        if rank == 0 {
            return Err(LoraError::Rank("rank must be at least 1".into()));
        }
        if rank >= d {
            return Err(LoraError::Rank(format!(
                "rank {rank} must be below d_model {d}"
            )));
        }
        let mut rng = rng_from(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let pair = |rng: &mut crate::seed::Rng| LoraMatrixPair {
            a: Tensor::from_fn(&[rank, d], |_| rng.random_range(-bound..bound)),
            b: Tensor::zeros(&[d, rank]),
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerLora {
                query: pair(&mut rng),
                value: pair(&mut rng),
            })
            .collect();
        Ok(Self {
            rank,
            d_in: d,
            d_out: d,
            layers,
        })
    }

    /// Adapter with every buffer zero (the additive identity for averaging).
    pub fn zeros_like(other: &LoraAdapter) -> Self {
        let mut z = other.clone();
        for p in z.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = 0.0);
            p.clear_grad();
        }
        z
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }

    pub fn layers(&self) -> &[LayerLora] {
        &self.layers
    }

    pub fn pair(&self, layer: usize, target: Target) -> &LoraMatrixPair {
        self.layers[layer].get(target)
    }

    /// Parameters in wire order: per layer, query `A`, `B`, value `A`, `B`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.query.a, &l.query.b, &l.value.a, &l.value.b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let LayerLora { query, value } = l;
                [&mut query.a, &mut query.b, &mut value.a, &mut value.b]
            })
            .collect()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(flag);
            if !flag {
                p.clear_grad();
            }
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.params().iter().all(|p| p.requires_grad())
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    pub fn same_layout(&self, other: &LoraAdapter) -> bool {
        self.rank == other.rank
            && self.d_in == other.d_in
            && self.d_out == other.d_out
            && self.layers.len() == other.layers.len()
    }

    /// Dense `B·A` per `(layer, target)`.
    pub fn merge(&self) -> Vec<(usize, Target, Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                Target::ALL
                    .into_iter()
                    .map(move |t| (i, t, l.get(t).delta()))
            })
            .collect()
    }

    pub fn payload_len(&self) -> usize {
        HEADER_BYTES + self.param_count() * 8
    }

    /// Little-endian payload: magic, version, rank, layer count, `d_in`,
    /// `d_out`, then every buffer in [`params`](Self::params) order.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.rank as u32,
            self.layers.len() as u32,
            self.d_in as u32,
            self.d_out as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in self.params() {
            for x in p.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: &str| LoraError::Format {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < HEADER_BYTES {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(0, "bad magic"));
        }
        let word = |i: usize| {
            u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        };
        if word(0) != VERSION as usize {
            return Err(fmt(4, "unsupported version"));
        }
        let (rank, n_layers, d_in, d_out) = (word(1), word(2), word(3), word(4));
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(fmt(8, "rank out of range for the declared dimensions"));
        }
        let per_layer = 2 * (rank * d_in + d_out * rank);
        let want = HEADER_BYTES + n_layers * per_layer * 8;
        if bytes.len() != want {
            return Err(fmt(
                bytes.len().min(want),
                &format!("expected {want} bytes, found {}", bytes.len()),
            ));
        }
        let mut offset = HEADER_BYTES;
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = bytes[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
                return Err(fmt(offset + bad * 8, "non-finite value"));
            }
            offset += n * 8;
            Ok(Tensor::new(shape, data)?)
        };
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let qa = take(&[rank, d_in])?;
            let qb = take(&[d_out, rank])?;
            let va = take(&[rank, d_in])?;
            let vb = take(&[d_out, rank])?;
            layers.push(LayerLora {
                query: LoraMatrixPair { a: qa, b: qb },
                value: LoraMatrixPair { a: va, b: vb },
            });
        }
        Ok(Self {
            rank,
            d_in,
            d_out,
            layers,
        })
    }

    /// Hex SHA-256 of the serialized payload.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.serialize()))
    }
}

/// How the local adapter's share is set.
#[derive(Debug, Clone, PartialEq)]
pub enum Mix {
    Fixed(f64),
    /// One weight per sequence of the batch.
    PerSequence(Vec<f64>),
}

/// The adapters attached to one forward pass.
#[derive(Debug, Clone)]
pub struct AdapterStack<'s> {
    pub global: Option<&'s LoraAdapter>,
    pub local: Option<&'s LoraAdapter>,
    pub mix: Mix,
}

impl<'s> AdapterStack<'s> {
    pub fn none() -> Self {
        Self {
            global: None,
            local: None,
            mix: Mix::Fixed(0.0),
        }
    }

    pub fn single(adapter: &'s LoraAdapter) -> Self {
        Self {
            global: Some(adapter),
            local: None,
            mix: Mix::Fixed(0.0),
        }
    }

    pub fn dual(global: &'s LoraAdapter, local: &'s LoraAdapter, alpha: f64) -> Self {
        Self {
            global: Some(global),
            local: Some(local),
            mix: Mix::Fixed(alpha),
        }
    }

    pub fn dual_per_sequence(global: &'s LoraAdapter, local: &'s LoraAdapter, alphas: Vec<f64>) -> Self {
        Self {
            global: Some(global),
            local: Some(local),
            mix: Mix::PerSequence(alphas),
        }
    }

    /// Registers every attached adapter buffer as a tape leaf.
    pub fn register<'a>(&self, tape: &mut Tape<'a>) -> StackVars
    where
        's: 'a,
    {
        let reg = |tape: &mut Tape<'a>, ad: Option<&'s LoraAdapter>| {
            ad.map(|ad| {
                ad.layers()
                    .iter()
                    .map(|l| {
                        [
                            (tape.leaf(&l.query.a), tape.leaf(&l.query.b)),
                            (tape.leaf(&l.value.a), tape.leaf(&l.value.b)),
                        ]
                    })
                    .collect()
            })
        };
        let global = reg(tape, self.global);
        let local = reg(tape, self.local);
        StackVars { global, local }
    }
}

type PairVars = (Var, Var);

/// Tape handles of the attached adapters, indexed `[layer][target]`.
#[derive(Debug, Clone, Default)]
pub struct StackVars {
    pub global: Option<Vec<[PairVars; 2]>>,
    pub local: Option<Vec<[PairVars; 2]>>,
}

impl StackVars {
    pub fn get(&self, layer: usize, target: Target) -> (Option<PairVars>, Option<PairVars>) {
        let idx = target as usize;
        (
            self.global.as_ref().map(|g| g[layer][idx]),
            self.local.as_ref().map(|l| l[layer][idx]),
        )
    }

    /// Vars of one adapter slot, in [`LoraAdapter::params`] order.
    pub fn flat(slot: &Option<Vec<[PairVars; 2]>>) -> Vec<Var> {
        slot.iter()
            .flatten()
            .flat_map(|l| [l[0].0, l[0].1, l[1].0, l[1].1])
            .collect()
    }
}

/// Row weights for the fused sum: a scalar or one factor per row.
#[derive(Debug, Clone)]
pub enum RowMix {
    Scalar(f64),
    Rows(Vec<f64>),
}

impl RowMix {
    pub fn from_mix(mix: &Mix, seq: usize) -> Self {
        match mix {
            Mix::Fixed(a) => RowMix::Scalar(*a),
            Mix::PerSequence(v) => RowMix::Rows(
                v.iter()
                    .flat_map(|&a| std::iter::repeat_n(a, seq))
                    .collect(),
            ),
        }
    }
}

fn low_rank(tape: &mut Tape<'_>, h: Var, (a, b): PairVars) -> std::result::Result<Var, TensorError> {
    let ha = tape.matmul_t(h, a, false, true)?;
    tape.matmul_t(ha, b, false, true)
}

fn check_pair(tape: &Tape<'_>, w: Var, (a, b): PairVars) -> Result<()> {
    let ws = tape.shape(w);
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sb.len() != 2 || ws.len() != 2 || sa[1] != ws[1] || sb[0] != ws[0] || sa[0] != sb[1] {
        return Err(LoraError::Shape(format!(
            "adapter A {sa:?} / B {sb:?} do not fit weight {ws:?}"
        )));
    }
    Ok(())
}

/// `h·Wᵀ + (1−α)·h·A_gᵀB_gᵀ + α·h·A_lᵀB_lᵀ` on the tape; a lone adapter
/// enters with weight 1 and no adapter gives the frozen projection.
pub fn fused_projection_var(
    tape: &mut Tape<'_>,
    h: Var,
    w: Var,
    global: Option<PairVars>,
    local: Option<PairVars>,
    mix: &RowMix,
) -> Result<Var> {
    for p in global.iter().chain(local.iter()) {
        check_pair(tape, w, *p)?;
    }
    let base = tape.matmul_t(h, w, false, true)?;
    let delta = match (global, local) {
        (None, None) => return Ok(base),
        (Some(p), None) | (None, Some(p)) => low_rank(tape, h, p)?,
        (Some(g), Some(l)) => {
            let dg = low_rank(tape, h, g)?;
            let dl = low_rank(tape, h, l)?;
            let (sg, sl) = match mix {
                RowMix::Scalar(a) => (tape.scale(dg, 1.0 - a), tape.scale(dl, *a)),
                RowMix::Rows(r) => (
                    tape.row_scale(dg, r.iter().map(|a| 1.0 - a).collect())?,
                    tape.row_scale(dl, r.clone())?,
                ),
            };
            tape.add(sg, sl)?
        }
    };
    Ok(tape.add(base, delta)?)
}

/// Tensor-level fused projection of row vectors `h: [n × d_in]` through a
/// frozen `w: [d_out × d_in]`.
pub fn fused_projection(
    h: &Tensor,
    w: &Tensor,
    global: Option<&LoraMatrixPair>,
    local: Option<&LoraMatrixPair>,
    alpha: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hv = tape.leaf(h);
    let wv = tape.leaf(w);
    let g = global.map(|p| (tape.leaf(&p.a), tape.leaf(&p.b)));
    let l = local.map(|p| (tape.leaf(&p.a), tape.leaf(&p.b)));
    let out = fused_projection_var(&mut tape, hv, wv, g, l, &RowMix::Scalar(alpha))?;
    Ok(tape.to_tensor(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `global`, `local`, `finetuned`, `central`, …
    pub kind: String,
    pub client: Option<usize>,
    pub manifest_hash: Option<String>,
}

/// Writes a JSON header line followed by the raw payload.
pub fn write_checkpoint(path: &Path, adapter: &LoraAdapter, header: &CheckpointHeader) -> Result<()> {
    let mut f = fs::File::create(path)?;
    let line = serde_json::to_string(header).expect("header serializes");
    f.write_all(line.as_bytes())?;
    f.write_all(b"\n")?;
    f.write_all(&adapter.serialize())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, LoraAdapter)> {
    let bytes = fs::read(path)?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or(LoraError::Format {
        offset: 0,
        message: "missing header line".into(),
    })?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| LoraError::Format {
        offset: 0,
        message: format!("bad header: {e}"),
    })?;
    let payload = &bytes[nl + 1..];
    let adapter = LoraAdapter::deserialize(payload).map_err(|e| match e {
        LoraError::Format { offset, message } => LoraError::Format {
            offset: offset + nl + 1,
            message,
        },
        other => other,
    })?;
    Ok((header, adapter))
}
