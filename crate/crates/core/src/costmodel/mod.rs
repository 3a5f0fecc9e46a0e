//! Analytical training-cost model: learned parameters, forward and backward
//! MACs, cached activations and optimizer state, with no tensors allocated.
//!
//! MACs are reported as "GFLOPs" (1 MAC = 1 FLOP). Backward MACs and cached
//! bytes come from a shape-only replay of the tape's own rules, so on toy
//! configurations they agree with tape measurements exactly.

mod graph;
mod ledger;

use serde::{Deserialize, Serialize};

pub use graph::ledger_stats;

use crate::adapters::{build_side_network, LosaConfig, SideLayer};
use crate::autodiff::{Region, TapeStats};
use crate::backbone::{BackboneConfig, Pooling};
use crate::baselines::AdaptationMethod;
use crate::error::{Error, Result};
use crate::model::model_manifest;

/// Classifier width used when a caller has no dataset in mind.
pub const DEFAULT_NUM_CLASSES: usize = 1000;

/// All memory figures assume 32-bit storage.
const BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
}

impl OptimizerSpec {
    pub fn sgd_momentum() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
        }
    }

    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
        }
    }

    pub fn slots(&self) -> u64 {
        match self.kind {
            OptimizerKind::SgdMomentum => 1,
            OptimizerKind::Adam => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub param_bytes: u64,
    pub grad_bytes: u64,
    pub optimizer_state_bytes: u64,
    pub cached_activation_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub method: String,
    pub learned_params: u64,
    pub fwd_gmacs: f64,
    pub bwd_gmacs: f64,
    pub cached_activation_bytes: u64,
    pub optimizer_state_bytes: u64,
    pub total_train_bytes: u64,
}

fn block_params(w: usize, m: usize) -> usize {
    2 * w + 4 * (w * w + w) + 2 * w + (w * m + m) + (m * w + w)
}

fn map_params(arch: &BackboneConfig) -> usize {
    if arch.pool == Pooling::Map {
        arch.width + block_params(arch.width, arch.mlp_dim) - 2 * arch.width
    } else {
        0
    }
}

fn attn_params(d: usize) -> usize {
    4 * (d * d + d)
}

fn mlp_params(d: usize, m: usize) -> usize {
    2 * d * m + m + d
}

fn backbone_params(arch: &BackboneConfig) -> usize {
    let d = arch.width;
    arch.patch_dim() * d
        + d
        + if arch.cls_token { d } else { 0 }
        + arch.num_tokens() * d
        + arch.depth * block_params(d, arch.mlp_dim)
        + 2 * d
        + map_params(arch)
}

fn bias_params(arch: &BackboneConfig) -> usize {
    let (d, m) = (arch.width, arch.mlp_dim);
    let map = if arch.pool == Pooling::Map { 6 * d + m } else { 0 };
    d + arch.depth * (7 * d + m) + d + map
}

fn losa_params(cfg: &LosaConfig, arch: &BackboneConfig) -> Result<usize> {
    let side = build_side_network(cfg, arch)?;
    let r = cfg.rank;
    let adaptor = |len: usize| 2 * r * len + 1 + if cfg.use_biases { r + len } else { 0 };
    let total = side
        .layers
        .iter()
        .map(|layer| match layer {
            SideLayer::Adaptor(a) => adaptor(a.axis_len()),
            SideLayer::Video { spatial, temporal } => adaptor(spatial.axis_len()) + adaptor(temporal.axis_len()),
            SideLayer::Transformer { width, .. } => (width * r + r) + block_params(r, 4 * r) + (r * width + width),
        })
        .sum();
    Ok(total)
}

/// Learned parameters of `method` on `arch`, excluding the classifier.
pub fn count_params(arch: &BackboneConfig, method: &AdaptationMethod) -> Result<u64> {
    arch.validate()?;
    method.validate(arch)?;
    let (d, m, l) = (arch.width, arch.mlp_dim, arch.depth);
    let pool_sites = usize::from(arch.pool == Pooling::Map);
    let n = match method {
        AdaptationMethod::Losa(cfg) => losa_params(cfg, arch)?,
        AdaptationMethod::Lora(cfg) => (l + pool_sites) * cfg.components.len() * 2 * cfg.rank * d,
        AdaptationMethod::BitFit => bias_params(arch),
        AdaptationMethod::PromptTuning(p) => p.prompts * p.layers * d,
        AdaptationMethod::Lst(cfg) => {
            let s = cfg.d_side;
            (l + 1) * (d * s + s) + l * block_params(s, 4 * s) + s * d + d
        }
        AdaptationMethod::LinearProbe => 0,
        AdaptationMethod::FullFinetune => backbone_params(arch),
        AdaptationMethod::LastK { k } => k * block_params(d, m) + 2 * d + map_params(arch),
        AdaptationMethod::AttnOnly => (l + pool_sites) * attn_params(d),
        AdaptationMethod::MlpOnly => (l + pool_sites) * mlp_params(d, m),
    };
    Ok(n as u64)
}

/// Inference forward MACs in billions for one input.
pub fn count_forward_flops(arch: &BackboneConfig, method: &AdaptationMethod, num_classes: usize) -> Result<f64> {
    Ok(ledger_stats(arch, method, num_classes, BYTES)?.total_fwd_macs as f64 / 1e9)
}

/// Backward MACs in billions for one training example.
pub fn count_backward_flops(arch: &BackboneConfig, method: &AdaptationMethod, num_classes: usize) -> Result<f64> {
    Ok(ledger_stats(arch, method, num_classes, BYTES)?.total_bwd_macs as f64 / 1e9)
}

/// Batch-1 training memory at 32-bit: every parameter, gradients and
/// optimizer state for trainable ones, and activations cached for backward.
pub fn estimate_train_memory(
    arch: &BackboneConfig,
    method: &AdaptationMethod,
    opt: OptimizerSpec,
    num_classes: usize,
) -> Result<MemoryBreakdown> {
    let manifest = model_manifest(arch, method, num_classes)?;
    let total: u64 = manifest.iter().map(|e| e.spec.numel() as u64).sum();
    let trainable: u64 = manifest
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.spec.numel() as u64)
        .sum();
    let cached = ledger_stats(arch, method, num_classes, BYTES)?.cached_bytes;
    let param_bytes = total * BYTES;
    let grad_bytes = trainable * BYTES;
    let optimizer_state_bytes = opt.slots() * trainable * BYTES;
    Ok(MemoryBreakdown {
        param_bytes,
        grad_bytes,
        optimizer_state_bytes,
        cached_activation_bytes: cached,
        total_bytes: param_bytes + grad_bytes + optimizer_state_bytes + cached,
    })
}

pub fn cost_report(
    arch_name: &str,
    arch: &BackboneConfig,
    method: &AdaptationMethod,
    opt: OptimizerSpec,
    num_classes: usize,
) -> Result<CostReport> {
    let stats: TapeStats = ledger_stats(arch, method, num_classes, BYTES)?;
    let mem = estimate_train_memory(arch, method, opt, num_classes)?;
    Ok(CostReport {
        arch: arch_name.to_string(),
        method: method.name().to_string(),
        learned_params: count_params(arch, method)?,
        fwd_gmacs: stats.total_fwd_macs as f64 / 1e9,
        bwd_gmacs: stats.total_bwd_macs as f64 / 1e9,
        cached_activation_bytes: mem.cached_activation_bytes,
        optimizer_state_bytes: mem.optimizer_state_bytes,
        total_train_bytes: mem.total_bytes,
    })
}

/// Backward MACs attributed to the backbone region.
pub fn backbone_backward_macs(arch: &BackboneConfig, method: &AdaptationMethod, num_classes: usize) -> Result<u64> {
    Ok(ledger_stats(arch, method, num_classes, BYTES)?
        .region(Region::Backbone)
        .bwd_macs)
}

/// Indices of points not dominated by another point with cost no higher
/// and accuracy no lower, one of them strictly. Input order is preserved.
pub fn pareto_indices(points: &[(f64, f64)]) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Empty("pareto_frontier input"));
    }
    if points.iter().any(|(c, a)| c.is_nan() || a.is_nan()) {
        return Err(Error::NonFinite { op: "pareto_frontier" });
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        let (ci, ai) = points[i];
        let (cj, aj) = points[j];
        ci.total_cmp(&cj).then(aj.total_cmp(&ai))
    });
    let mut keep = vec![false; points.len()];
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut g = 0;
    while g < order.len() {
        let cost = points[order[g]].0;
        let mut end = g;
        while end < order.len() && points[order[end]].0 == cost {
            end += 1;
        }
        // sorted by accuracy descending within a cost group
        let group_max = points[order[g]].1;
        for &i in &order[g..end] {
            let a = points[i].1;
            keep[i] = a == group_max && a > best_cheaper;
        }
        best_cheaper = best_cheaper.max(group_max);
        g = end;
    }
    Ok((0..points.len()).filter(|&i| keep[i]).collect())
}

pub fn pareto_frontier(points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    Ok(pareto_indices(points)?.into_iter().map(|i| points[i]).collect())
}
