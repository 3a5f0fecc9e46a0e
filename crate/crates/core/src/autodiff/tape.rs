use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, inverse_perm, matmul_nt_raw, matmul_raw, matmul_tn_raw,
    permute3_raw, Precision, Tensor,
};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Which part of the model a node belongs to, for cost attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Backbone,
    Side,
    Head,
    BaselineInsert,
}

impl Region {
    pub const ALL: [Region; 4] = [
        Region::Backbone,
        Region::Side,
        Region::Head,
        Region::BaselineInsert,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Param,
    Constant,
    MatMul,
    Add,
    AddBias,
    Scale,
    ScaleConst,
    Gelu,
    LayerNorm,
    Attention,
    MeanRows,
    SelectRow,
    Permute,
    ConcatRows,
    SliceRows,
    Sum,
    CrossEntropy,
}

#[derive(Debug, Clone)]
enum Op {
    Param(String),
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Scale(usize, usize),
    ScaleConst(usize, f64),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanRows(usize),
    SelectRow(usize, usize),
    Permute {
        x: usize,
        dims: [usize; 3],
        perm: [usize; 3],
    },
    ConcatRows(usize, usize),
    SliceRows {
        x: usize,
        start: usize,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        label: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Param(_) => OpKind::Param,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleConst(..) => OpKind::ScaleConst,
            Op::Gelu(_) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Attention { .. } => OpKind::Attention,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::SelectRow(..) => OpKind::SelectRow,
            Op::Permute { .. } => OpKind::Permute,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Param(_) | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Scale(a, b)
            | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::ScaleConst(x, _)
            | Op::Gelu(x)
            | Op::MeanRows(x)
            | Op::SelectRow(x, _)
            | Op::Permute { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Sum(x)
            | Op::CrossEntropy { logits: x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    caches_output: bool,
    /// Elements held internally for backward (attention probabilities).
    internal_cached: usize,
    region: Region,
    fwd_macs: u64,
    bwd_macs: u64,
}

/// Read-only view of one recorded node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapeNode {
    pub id: usize,
    pub op_kind: OpKind,
    pub inputs: Vec<usize>,
    pub shape: Vec<usize>,
    pub needs_grad: bool,
    pub caches_output: bool,
    pub fwd_macs: u64,
    pub bwd_macs: u64,
    pub region: Region,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionStats {
    pub fwd_macs: u64,
    pub bwd_macs: u64,
    pub cached_bytes: u64,
}

/// Aggregate accounting over a tape.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapeStats {
    pub total_fwd_macs: u64,
    pub total_bwd_macs: u64,
    pub cached_bytes: u64,
    pub per_region: BTreeMap<Region, RegionStats>,
}

impl TapeStats {
    pub fn region(&self, region: Region) -> RegionStats {
        self.per_region.get(&region).copied().unwrap_or_default()
    }
}

/// Gradients of trainable parameters, keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Reverse-mode tape with per-node cost accounting.
///
/// A node needs a gradient iff one of its inputs does, or it is a trainable
/// parameter leaf. Backward only visits such nodes, so subgraphs fed purely
/// by frozen parameters and constants cost nothing in the backward pass.
/// Tensors an op must retain for its backward rule are flagged when the op
/// is recorded, mirroring frameworks that save activations eagerly.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    region: Region,
    param_nodes: HashMap<String, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::F32)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            region: Region::Backbone,
            param_nodes: HashMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Sets the region for subsequently recorded nodes, returning the old one.
    pub fn set_region(&mut self, region: Region) -> Region {
        std::mem::replace(&mut self.region, region)
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn node(&self, v: Var) -> TapeNode {
        self.view(v.0)
    }

    pub fn nodes(&self) -> Vec<TapeNode> {
        (0..self.nodes.len()).map(|i| self.view(i)).collect()
    }

    fn view(&self, id: usize) -> TapeNode {
        let n = &self.nodes[id];
        TapeNode {
            id,
            op_kind: n.op.kind(),
            inputs: n.op.inputs(),
            shape: n.value.shape().to_vec(),
            needs_grad: n.needs_grad,
            caches_output: n.caches_output,
            fwd_macs: n.fwd_macs,
            bwd_macs: n.bwd_macs,
            region: n.region,
        }
    }

    fn ng(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    fn save(&mut self, id: usize) {
        if !matches!(self.nodes[id].op, Op::Param(_)) {
            self.nodes[id].caches_output = true;
        }
    }

    fn push(&mut self, op: Op, value: Tensor, fwd_macs: u64, op_name: &'static str) -> Result<Var> {
        let value = value.with_precision(self.precision).check_finite(op_name)?;
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            caches_output: false,
            internal_cached: 0,
            region: self.region,
            fwd_macs,
            bwd_macs: 0,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.0 < self.nodes.len() {
            Ok(v.0)
        } else {
            Err(Error::NotOnTape(v.0))
        }
    }

    /// Records a parameter leaf. Repeated calls for the same name on one tape
    /// return the same node, so gradients accumulate across uses.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(Var(id));
        }
        let p = store.get(name)?;
        let value = p.value.clone().with_precision(self.precision).check_finite("param")?;
        self.nodes.push(Node {
            op: Op::Param(name.to_string()),
            value,
            needs_grad: p.trainable,
            caches_output: false,
            internal_cached: 0,
            region: self.region,
            fwd_macs: 0,
            bwd_macs: 0,
        });
        let id = self.nodes.len() - 1;
        self.param_nodes.insert(name.to_string(), id);
        Ok(Var(id))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, value, 0, "constant")
    }

    /// `a[m×k] · b[k×n]`. Costs `m·k·n` MACs forward and the same again for
    /// each input that needs a gradient.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.val(a).as_matrix("matmul")?;
        let (k2, n) = self.val(b).as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.val(a).shape().to_vec(),
                rhs: self.val(b).shape().to_vec(),
            });
        }
        let out = Tensor::new(&[m, n], matmul_raw(self.val(a).data(), self.val(b).data(), m, k, n))?;
        if self.ng(a) {
            self.save(b);
        }
        if self.ng(b) {
            self.save(a);
        }
        self.push(Op::MatMul(a, b), out, (m * k * n) as u64, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let out = self.val(a).add(self.val(b))?;
        self.push(Op::Add(a, b), out, 0, "add")
    }

    /// Adds a length-`n` vector to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.check(x)?, self.check(bias)?);
        let (m, n) = self.val(x).as_matrix("add_bias")?;
        if self.val(b).numel() != n {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.val(x).shape().to_vec(),
                rhs: self.val(b).shape().to_vec(),
            });
        }
        let bias = self.val(b).data();
        let mut data = self.val(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push(Op::AddBias(x, b), out, 0, "add_bias")
    }

    /// Multiplies `x` by a one-element tensor `alpha`.
    pub fn scale(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (x, a) = (self.check(x)?, self.check(alpha)?);
        if self.val(a).numel() != 1 {
            return Err(Error::Shape {
                op: "scale",
                lhs: self.val(x).shape().to_vec(),
                rhs: self.val(a).shape().to_vec(),
            });
        }
        let s = self.val(a).item();
        let out = self.val(x).map(|v| v * s);
        if self.ng(a) {
            self.save(x);
        }
        self.push(Op::Scale(x, a), out, 0, "scale")
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.val(x).map(|v| v * c);
        self.push(Op::ScaleConst(x, c), out, 0, "scale_const")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.val(x).map(gelu_scalar);
        let var = self.push(Op::Gelu(x), out, 0, "gelu")?;
        if self.ng(var.0) {
            self.save(x);
        }
        Ok(var)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (x, g, b) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (m, d) = self.val(x).as_matrix("layer_norm")?;
        if self.val(g).numel() != d || self.val(b).numel() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.val(x).shape().to_vec(),
                rhs: self.val(g).shape().to_vec(),
            });
        }
        let (gv, bv) = (self.val(g).data(), self.val(b).data());
        let mut data = Vec::with_capacity(m * d);
        for row in self.val(x).data().chunks(d) {
            let (mean, rstd) = row_moments(row);
            data.extend(
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) * rstd * gv[j] + bv[j]),
            );
        }
        let out = Tensor::new(&[m, d], data)?;
        let var = self.push(Op::LayerNorm { x, gamma: g, beta: b }, out, 0, "layer_norm")?;
        if self.ng(var.0) {
            self.save(x);
        }
        Ok(var)
    }

    /// Multi-head scaled dot-product attention of `q[nq×d]` over `k, v[nk×d]`.
    ///
    /// Forward costs `2·nq·nk·d` MACs. Backward follows the matmul rule for
    /// the score product `q·kᵀ` and the weighted sum `p·v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (q, k, v) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (nq, d) = self.val(q).as_matrix("attention")?;
        let (nk, dk) = self.val(k).as_matrix("attention")?;
        if dk != d || self.val(v).shape() != [nk, d] || heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: self.val(q).shape().to_vec(),
                rhs: self.val(k).shape().to_vec(),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            let ph = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            for i in 0..nq {
                let qrow = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                let prow = &mut ph[i * nk..(i + 1) * nk];
                for (j, p) in prow.iter_mut().enumerate() {
                    let krow = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                    *p = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(prow);
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                    orow.iter_mut().zip(vrow).for_each(|(o, v)| *o += p * v);
                }
            }
        }
        let out = Tensor::new(&[nq, d], out)?;
        let (qng, kng, vng) = (self.ng(q), self.ng(k), self.ng(v));
        if kng {
            self.save(q);
        }
        if qng {
            self.save(k);
        }
        if qng || kng {
            self.save(v);
        }
        let n_probs = probs.len();
        let var = self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            out,
            (2 * nq * nk * d) as u64,
            "attention",
        )?;
        if qng || kng || vng {
            self.nodes[var.0].internal_cached = n_probs;
        }
        Ok(var)
    }

    /// Column means of `x[m×n]` as a `[1×n]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let (m, n) = self.val(x).as_matrix("mean_rows")?;
        let mut acc = vec![0.0; n];
        for row in self.val(x).data().chunks(n) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= m as f64);
        let out = Tensor::new(&[1, n], acc)?;
        self.push(Op::MeanRows(x), out, 0, "mean_rows")
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let x = self.check(x)?;
        let (m, n) = self.val(x).as_matrix("select_row")?;
        if row >= m {
            return Err(Error::Shape {
                op: "select_row",
                lhs: vec![m, n],
                rhs: vec![row],
            });
        }
        let out = Tensor::new(&[1, n], self.val(x).data()[row * n..(row + 1) * n].to_vec())?;
        self.push(Op::SelectRow(x, row), out, 0, "select_row")
    }

    /// Views `x` as `[d0, d1, d2]`, permutes axes so output axis `i` is input
    /// axis `perm[i]`, and returns the `[o0·o1 × o2]` matrix.
    pub fn permute3(&mut self, x: Var, dims: [usize; 3], perm: [usize; 3]) -> Result<Var> {
        let x = self.check(x)?;
        if dims.iter().product::<usize>() != self.val(x).numel() {
            return Err(Error::Shape {
                op: "permute3",
                lhs: self.val(x).shape().to_vec(),
                rhs: dims.to_vec(),
            });
        }
        let mut sorted = perm;
        sorted.sort_unstable();
        if sorted != [0, 1, 2] {
            return Err(Error::config(format!("invalid permutation {perm:?}")));
        }
        let data = permute3_raw(self.val(x).data(), dims, perm);
        let out = Tensor::new(&[dims[perm[0]] * dims[perm[1]], dims[perm[2]]], data)?;
        self.push(Op::Permute { x, dims, perm }, out, 0, "permute3")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.check(x).and_then(|id| self.val(id).as_matrix("transpose"))?;
        self.permute3(x, [1, m, n], [0, 2, 1])
    }

    /// Stacks `a[m1×n]` above `b[m2×n]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (m1, n) = self.val(a).as_matrix("concat_rows")?;
        let (m2, n2) = self.val(b).as_matrix("concat_rows")?;
        if n != n2 {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: vec![m1, n],
                rhs: vec![m2, n2],
            });
        }
        let mut data = self.val(a).data().to_vec();
        data.extend_from_slice(self.val(b).data());
        let out = Tensor::new(&[m1 + m2, n], data)?;
        self.push(Op::ConcatRows(a, b), out, 0, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.check(x)?;
        let (m, n) = self.val(x).as_matrix("slice_rows")?;
        if start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let out = Tensor::new(&[len, n], self.val(x).data()[start * n..(start + len) * n].to_vec())?;
        self.push(Op::SliceRows { x, start }, out, 0, "slice_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let s = self.val(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), 0, "sum")
    }

    /// Softmax cross-entropy of a single row of logits against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.check(logits)?;
        let c = self.val(x).numel();
        if label >= c {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.val(x).shape().to_vec(),
                rhs: vec![label],
            });
        }
        let data = self.val(x).data();
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - data[label];
        let var = self.push(
            Op::CrossEntropy { logits: x, label },
            Tensor::scalar(loss),
            0,
            "cross_entropy",
        )?;
        if self.ng(var.0) {
            self.save(x);
        }
        Ok(var)
    }

    /// Accumulated accounting. Backward MACs reflect the most recent
    /// [`backward`](Self::backward) call.
    pub fn tape_stats(&self) -> TapeStats {
        let mut stats = TapeStats::default();
        for r in Region::ALL {
            stats.per_region.insert(r, RegionStats::default());
        }
        let bytes = self.precision.bytes() as u64;
        for n in &self.nodes {
            let cached = if n.caches_output { n.value.numel() } else { 0 } + n.internal_cached;
            let entry = stats.per_region.entry(n.region).or_default();
            entry.fwd_macs += n.fwd_macs;
            entry.bwd_macs += n.bwd_macs;
            entry.cached_bytes += cached as u64 * bytes;
        }
        for r in stats.per_region.values() {
            stats.total_fwd_macs += r.fwd_macs;
            stats.total_bwd_macs += r.bwd_macs;
            stats.cached_bytes += r.cached_bytes;
        }
        stats
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every
    /// trainable parameter that reaches it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let loss = self.check(loss)?;
        if self.val(loss).numel() != 1 {
            return Err(Error::NotScalar(self.val(loss).shape().to_vec()));
        }
        for n in &mut self.nodes {
            n.bwd_macs = 0;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        let mut out = Gradients::new();
        if !self.ng(loss) {
            return Ok(out);
        }
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let macs = self.backward_node(id, &g, &mut grads)?;
            self.nodes[id].bwd_macs = macs;
            if let Op::Param(name) = &self.nodes[id].op {
                let t = Tensor::new(self.nodes[id].value.shape(), g)?.check_finite("backward")?;
                out.insert(name.clone(), t);
            }
        }
        Ok(out)
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<u64> {
        let node = &self.nodes[id];
        let mut macs = 0u64;
        let acc = |grads: &mut [Option<Vec<f64>>], target: usize, contrib: Vec<f64>| {
            match &mut grads[target] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.val(*a).as_matrix("matmul")?;
                let n = self.val(*b).cols();
                if self.ng(*a) {
                    acc(grads, *a, matmul_nt_raw(g, self.val(*b).data(), m, n, k));
                    macs += (m * k * n) as u64;
                }
                if self.ng(*b) {
                    acc(grads, *b, matmul_tn_raw(self.val(*a).data(), g, m, k, n));
                    macs += (m * k * n) as u64;
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.ng(x) {
                        acc(grads, x, g.to_vec());
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.ng(*x) {
                    acc(grads, *x, g.to_vec());
                }
                if self.ng(*b) {
                    let n = self.val(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Scale(x, a) => {
                let s = self.val(*a).item();
                if self.ng(*x) {
                    acc(grads, *x, g.iter().map(|v| v * s).collect());
                }
                if self.ng(*a) {
                    let d = g.iter().zip(self.val(*x).data()).map(|(g, x)| g * x).sum();
                    acc(grads, *a, vec![d]);
                }
            }
            Op::ScaleConst(x, c) => {
                if self.ng(*x) {
                    acc(grads, *x, g.iter().map(|v| v * c).collect());
                }
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(g, x)| g * gelu_grad_scalar(*x))
                    .collect();
                acc(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (m, d) = self.val(*x).as_matrix("layer_norm")?;
                let gv = self.val(*gamma).data();
                let mut dx = vec![0.0; m * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (i, row) in self.val(*x).data().chunks(d).enumerate() {
                    let (mean, rstd) = row_moments(row);
                    let grow = &g[i * d..(i + 1) * d];
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gv).map(|(g, w)| g * w).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                if self.ng(*x) {
                    acc(grads, *x, dx);
                }
                if self.ng(*gamma) {
                    acc(grads, *gamma, dgamma);
                }
                if self.ng(*beta) {
                    acc(grads, *beta, dbeta);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (nq, d) = self.val(*q).as_matrix("attention")?;
                let nk = self.val(*k).rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qng, kng, vng) = (self.ng(*q), self.ng(*k), self.ng(*v));
                let (qd, kd, vd) = (self.val(*q).data(), self.val(*k).data(), self.val(*v).data());
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nk * d];
                let mut dv = vec![0.0; nk * d];
                let unit = (nq * nk * d) as u64;
                for h in 0..*heads {
                    let ph = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let col = |r: usize| r * d + h * dh..r * d + (h + 1) * dh;
                    if vng {
                        for i in 0..nq {
                            let grow = &g[col(i)];
                            for j in 0..nk {
                                let p = ph[i * nk + j];
                                dv[col(j)].iter_mut().zip(grow).for_each(|(a, b)| *a += p * b);
                            }
                        }
                    }
                    if qng || kng {
                        for i in 0..nq {
                            let grow = &g[col(i)];
                            let prow = &ph[i * nk..(i + 1) * nk];
                            let dp: Vec<f64> = (0..nk)
                                .map(|j| grow.iter().zip(&vd[col(j)]).map(|(a, b)| a * b).sum())
                                .collect();
                            let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for j in 0..nk {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                if qng {
                                    let krow = &kd[col(j)];
                                    dq[col(i)].iter_mut().zip(krow).for_each(|(a, b)| *a += ds * b);
                                }
                                if kng {
                                    let qrow = &qd[col(i)];
                                    dk[col(j)].iter_mut().zip(qrow).for_each(|(a, b)| *a += ds * b);
                                }
                            }
                        }
                    }
                }
                if qng || kng {
                    macs += unit;
                }
                if vng {
                    macs += unit;
                    acc(grads, *v, dv);
                }
                if qng {
                    macs += unit;
                    acc(grads, *q, dq);
                }
                if kng {
                    macs += unit;
                    acc(grads, *k, dk);
                }
            }
            Op::MeanRows(x) => {
                let m = self.val(*x).rows();
                let n = g.len();
                let d: Vec<f64> = (0..m * n).map(|i| g[i % n] / m as f64).collect();
                acc(grads, *x, d);
            }
            Op::SelectRow(x, row) => {
                let n = g.len();
                let mut d = vec![0.0; self.val(*x).numel()];
                d[row * n..(row + 1) * n].copy_from_slice(g);
                acc(grads, *x, d);
            }
            Op::Permute { x, dims, perm } => {
                let out_dims = [dims[perm[0]], dims[perm[1]], dims[perm[2]]];
                acc(grads, *x, permute3_raw(g, out_dims, inverse_perm(*perm)));
            }
            Op::ConcatRows(a, b) => {
                let split = self.val(*a).numel();
                if self.ng(*a) {
                    acc(grads, *a, g[..split].to_vec());
                }
                if self.ng(*b) {
                    acc(grads, *b, g[split..].to_vec());
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.val(*x).cols();
                let mut d = vec![0.0; self.val(*x).numel()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                acc(grads, *x, d);
            }
            Op::Sum(x) => {
                acc(grads, *x, vec![g[0]; self.val(*x).numel()]);
            }
            Op::CrossEntropy { logits, label } => {
                let data = self.val(*logits).data();
                let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = data.iter().map(|v| (v - max).exp()).sum();
                let d = data
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let p = (v - max).exp() / z;
                        g[0] * (p - if j == *label { 1.0 } else { 0.0 })
                    })
                    .collect();
                acc(grads, *logits, d);
            }
        }
        Ok(macs)
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
