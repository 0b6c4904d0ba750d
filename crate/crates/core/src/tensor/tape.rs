use std::borrow::Cow;

use super::gemm::{gemm, View, ViewMut};
use super::{Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through a single `exp`; saturates cleanly at ±1.
fn tanh(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        return u.tanh();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    RowScale(usize, Vec<f64>),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu { a: usize, tanh: Vec<f64> },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SumSquares(usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Dynamic computation graph, rebuilt for every forward pass.
///
/// Nodes are appended in execution order, so the node list is already
/// topologically sorted and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Folds the gradient of `v` into `tensor`'s grad slot.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Err(TensorError::State(format!(
                "no gradient recorded for node {}",
                v.0
            ))),
        }
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::Shape(format!("expected 2-D operand, got {other:?}"))),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: impl IntoIterator<Item = f64>, len: usize) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    buf.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// Registers a borrowed tensor as a leaf; it is differentiated iff
    /// `requires_grad` is set on the tensor.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Registers an owned constant (never differentiated).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), Cow::Owned(data), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shapes are consistent")
    }

    /// `op(a)·op(b)` where `op` optionally transposes a stored 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = dims2(self.shape(a))?;
        let (br, bc) = dims2(self.shape(b))?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::Shape(format!(
                "matmul inner dimensions differ: {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" },
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = View::row_major(self.value(a), ar, ac);
            let bv = View::row_major(self.value(b), br, bc);
            let av = if ta { av.t() } else { av };
            let bv = if tb { bv.t() } else { bv };
            gemm(1.0, av, bv, 0.0, ViewMut::row_major(&mut out, m, n));
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            vec![m, n],
            Cow::Owned(out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                ta,
                tb,
            },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Mul(a.0, b.0), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.needs(a.0);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Scale(a.0, s), ng)
    }

    /// Multiplies row `i` of a 2-D node by `factors[i]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let (r, c) = dims2(self.shape(a))?;
        if factors.len() != r {
            return Err(TensorError::Shape(format!(
                "row_scale: {} factors for {r} rows",
                factors.len()
            )));
        }
        let mut out = self.value(a).to_vec();
        for (row, f) in out.chunks_mut(c.max(1)).zip(&factors) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let ng = self.needs(a.0);
        Ok(self.push(vec![r, c], Cow::Owned(out), Op::RowScale(a.0, factors), ng))
    }

    /// Row-wise softmax of a 2-D node.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let ng = self.needs(a.0);
        Ok(self.push(vec![r, c], Cow::Owned(out), Op::Softmax(a.0), ng))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(TensorError::Shape(format!(
                "layer_norm: affine params must have length {c}"
            )));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            vec![r, c],
            Cow::Owned(out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let xs = self.value(a);
        let tanh: Vec<f64> = xs.iter().map(|&x| tanh(GELU_C * (x + 0.044715 * x * x * x))).collect();
        let out = xs.iter().zip(&tanh).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let ng = self.needs(a.0);
        let tanh = if ng { tanh } else { Vec::new() };
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Gelu { a: a.0, tanh }, ng)
    }

    /// Gathers rows `ids` of a 2-D `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table))?;
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { index: id, bound: v });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table.0);
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean token-level cross-entropy over positions whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = dims2(self.shape(logits))?;
        if targets.len() != r {
            return Err(TensorError::Shape(format!(
                "cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, t) in probs.chunks_mut(c).zip(targets) {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(TensorError::Index { index: t, bound: c });
            }
            softmax_in_place(row);
            total -= row[t].max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::State(
                "cross_entropy: no target positions".into(),
            ));
        }
        let loss = total / count as f64;
        let ng = self.needs(logits.0);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Multi-head causal self-attention over `batch` sequences of length
    /// `seq` packed row-wise in `q`, `k`, `v` (each `[batch·seq × d]`).
    /// Position `i` attends to positions `j ≤ i` of its own sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (r, d) = dims2(self.shape(q))?;
        if self.shape(k) != [r, d] || self.shape(v) != [r, d] {
            return Err(TensorError::Shape("attention q/k/v shapes differ".into()));
        }
        if r != batch * seq || heads == 0 || d % heads != 0 {
            return Err(TensorError::Shape(format!(
                "attention: {r} rows for batch {batch} x seq {seq}, d {d}, heads {heads}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; r * d];
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(
                    scale,
                    View::strided(&qs[off..], seq, dh, d, 1),
                    View::strided(&ks[off..], seq, dh, d, 1).t(),
                    0.0,
                    ViewMut::row_major(p, seq, seq),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm(
                    1.0,
                    View::row_major(p, seq, seq),
                    View::strided(&vs[off..], seq, dh, d, 1),
                    0.0,
                    ViewMut::strided(&mut out[off..], seq, dh, d, 1),
                );
            }
        }
        let ng = self.needs(q.0) || self.needs(k.0) || self.needs(v.0);
        Ok(self.push(
            vec![r, d],
            Cow::Owned(out),
            Op::CausalAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// `Σ x²` as a scalar node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum();
        let ng = self.needs(a.0);
        self.push(vec![1], Cow::Owned(vec![s]), Op::SumSquares(a.0), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(a.0);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a.0), ng)
    }

    /// Reverse sweep from a scalar `loss`. Every node that depends on a
    /// `requires_grad` leaf receives a gradient; gradients of nodes used
    /// more than once are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(TensorError::NonFinite("loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = &grads[idx] {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(TensorError::NonFinite(format!("gradient of leaf {idx}")));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = dims2(&self.nodes[a].shape)?;
                let (br, bc) = dims2(&self.nodes[b].shape)?;
                let (m, n) = (node.shape[0], node.shape[1]);
                let gv = View::row_major(g, m, n);
                let av = View::row_major(&self.nodes[a].value, ar, ac);
                let bv = View::row_major(&self.nodes[b].value, br, bc);
                let opa = if ta { av.t() } else { av };
                let opb = if tb { bv.t() } else { bv };
                if self.needs(a) {
                    let buf = grads[a].get_or_insert_with(|| vec![0.0; ar * ac]);
                    if ta {
                        // dA = op(B)·dCᵀ
                        gemm(1.0, opb, gv.t(), 1.0, ViewMut::row_major(buf, ar, ac));
                    } else {
                        // dA = dC·op(B)ᵀ
                        gemm(1.0, gv, opb.t(), 1.0, ViewMut::row_major(buf, ar, ac));
                    }
                }
                if self.needs(b) {
                    let buf = grads[b].get_or_insert_with(|| vec![0.0; br * bc]);
                    if tb {
                        // dB = dCᵀ·op(A)
                        gemm(1.0, gv.t(), opa, 1.0, ViewMut::row_major(buf, br, bc));
                    } else {
                        // dB = op(A)ᵀ·dC
                        gemm(1.0, opa.t(), gv, 1.0, ViewMut::row_major(buf, br, bc));
                    }
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if self.needs(x) {
                        add_into(&mut grads[x], g.iter().copied(), g.len());
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    add_into(&mut grads[a], g.iter().copied(), g.len());
                }
                if self.needs(b) {
                    add_into(&mut grads[b], g.iter().map(|x| -x), g.len());
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = &self.nodes[b].value;
                    add_into(&mut grads[a], g.iter().zip(bv.iter()).map(|(x, y)| x * y), g.len());
                }
                if self.needs(b) {
                    let av = &self.nodes[a].value;
                    add_into(&mut grads[b], g.iter().zip(av.iter()).map(|(x, y)| x * y), g.len());
                }
            }
            &Op::Scale(a, s) => {
                if self.needs(a) {
                    add_into(&mut grads[a], g.iter().map(|x| x * s), g.len());
                }
            }
            Op::RowScale(a, factors) => {
                let a = *a;
                if self.needs(a) {
                    let c = node.shape[1].max(1);
                    let it = g.iter().enumerate().map(|(i, x)| x * factors[i / c]);
                    add_into(&mut grads[a], it, g.len());
                }
            }
            &Op::Softmax(a) => {
                if self.needs(a) {
                    let c = node.shape[1].max(1);
                    let y = &node.value;
                    let mut dx = vec![0.0; g.len()];
                    for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dxr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_into(&mut grads[a], dx, g.len());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (r, c) = (node.shape[0], node.shape[1]);
                let gm = &self.nodes[gamma].value;
                if self.needs(gamma) {
                    let buf = grads[gamma].get_or_insert_with(|| vec![0.0; c]);
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if self.needs(beta) {
                    let buf = grads[beta].get_or_insert_with(|| vec![0.0; c]);
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += g[i * c + j];
                        }
                    }
                }
                if self.needs(x) {
                    let buf = grads[x].get_or_insert_with(|| vec![0.0; r * c]);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gm[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            buf[i * c + j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu { a, tanh } => {
                let a = *a;
                if self.needs(a) {
                    let xs = &self.nodes[a].value;
                    let it = xs.iter().zip(tanh).zip(g).map(|((&x, &t), &gi)| {
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    });
                    add_into(&mut grads[a], it, g.len());
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if self.needs(table) {
                    let (v, d) = dims2(&self.nodes[table].shape)?;
                    let buf = grads[table].get_or_insert_with(|| vec![0.0; v * d]);
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[id * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let logits = *logits;
                if self.needs(logits) {
                    let c = self.nodes[logits].shape[1];
                    let s = g[0] / *count as f64;
                    let buf = grads[logits].get_or_insert_with(|| vec![0.0; probs.len()]);
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                self.attention_backward(
                    (*q, *k, *v),
                    (*batch, *seq, *heads),
                    probs,
                    node.shape[1],
                    g,
                    grads,
                );
            }
            &Op::SumSquares(a) => {
                if self.needs(a) {
                    let xs = &self.nodes[a].value;
                    add_into(&mut grads[a], xs.iter().map(|x| 2.0 * x * g[0]), xs.len());
                }
            }
            &Op::Sum(a) => {
                if self.needs(a) {
                    let n = self.nodes[a].value.len();
                    add_into(&mut grads[a], std::iter::repeat_n(g[0], n), n);
                }
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        (q, k, v): (usize, usize, usize),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[f64],
        d: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let r = batch * seq;
        let (qs, ks, vs) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let mut dq = vec![0.0; r * d];
        let mut dk = vec![0.0; r * d];
        let mut dv = vec![0.0; r * d];
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let go = View::strided(&g[off..], seq, dh, d, 1);
                // dP = dO·Vᵀ
                gemm(
                    1.0,
                    go,
                    View::strided(&vs[off..], seq, dh, d, 1).t(),
                    0.0,
                    ViewMut::row_major(&mut dp, seq, seq),
                );
                // dV = Pᵀ·dO
                gemm(
                    1.0,
                    View::row_major(p, seq, seq).t(),
                    go,
                    1.0,
                    ViewMut::strided(&mut dv[off..], seq, dh, d, 1),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        dr[j] = if j <= i { pr[j] * (dr[j] - dot) } else { 0.0 };
                    }
                }
                gemm(
                    scale,
                    View::row_major(&dp, seq, seq),
                    View::strided(&ks[off..], seq, dh, d, 1),
                    1.0,
                    ViewMut::strided(&mut dq[off..], seq, dh, d, 1),
                );
                gemm(
                    scale,
                    View::row_major(&dp, seq, seq).t(),
                    View::strided(&qs[off..], seq, dh, d, 1),
                    1.0,
                    ViewMut::strided(&mut dk[off..], seq, dh, d, 1),
                );
            }
        }
        for (x, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(x) {
                add_into(&mut grads[x], buf, r * d);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap().with_requires_grad(true)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::zeros(&[1, 3]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.softmax(v).unwrap();
        for p in tape.value(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_of_equal_logits_is_ln2() {
        let x = Tensor::zeros(&[1, 2]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let l = tape.cross_entropy(v, &[Some(0)]).unwrap();
        assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_vanishes_for_confident_logits() {
        let x = Tensor::new(&[1, 3], vec![200.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let l = tape.cross_entropy(v, &[Some(0)]).unwrap();
        assert!(tape.value(l)[0] < 1e-80);
    }

    #[test]
    fn cross_entropy_ignores_padding_targets() {
        let x = Tensor::new(&[2, 2], vec![0.0, 0.0, 5.0, -5.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let l = tape.cross_entropy(v, &[Some(1), None]).unwrap();
        assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let x = Tensor::zeros(&[1, 2]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        assert_eq!(
            tape.cross_entropy(v, &[Some(2)]).unwrap_err(),
            TensorError::Index { index: 2, bound: 2 }
        );
    }

    #[test]
    fn embedding_rejects_bad_id() {
        let table = Tensor::zeros(&[4, 2]);
        let mut tape = Tape::new();
        let v = tape.leaf(&table);
        assert!(matches!(
            tape.embedding(v, &[1, 4]),
            Err(TensorError::Index { index: 4, bound: 4 })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let x = t(&[2], &[1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let y = tape.scale(v, 2.0);
        assert!(matches!(tape.backward(y), Err(TensorError::Shape(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        // f(x) = sum(x * x) through Mul with both inputs the same node
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let y = tape.mul(v, v).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let w = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = t(&[1, 2], &[1.0, 1.0]);
        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        let xv = tape.leaf(&x);
        let y = tape.matmul(xv, wv).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(wv).is_none());
        assert_eq!(g.get(xv).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn nan_loss_is_reported() {
        let x = t(&[1], &[f64::NAN]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v);
        assert!(matches!(tape.backward(s), Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn attention_first_position_copies_value() {
        // with one position visible, output row 0 equals v row 0
        let q = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let k = Tensor::from_fn(&[3, 4], |i| (i as f64).cos());
        let v = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let o = tape.causal_attention(qv, kv, vv, 1, 3, 2).unwrap();
        assert_eq!(&tape.value(o)[..4], &v.data()[..4]);
    }
}
