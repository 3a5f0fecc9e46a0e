//! Low-rank parallel paths on backbone projections.
//!
//! Each selected projection `W` gains `x·A·B` with `A: d×r` Gaussian and
//! `B: r×d` zero, so the adapted model starts equal to the frozen one. The
//! `mlp` component is a single `d→d` low-rank path across the whole MLP
//! branch; unlike the attention paths it cannot be folded into existing
//! weights.

use crate::autodiff::{ParamStore, Region, Tape, Var};
use crate::backbone::{BackboneConfig, BlockHook, BlockSite, Init, ParamSpec, Pooling, Projection};
use crate::error::{Error, Result};

use super::method::{LoraComponent, LoraConfig};

pub(crate) fn site_prefix(site: BlockSite) -> String {
    match site {
        BlockSite::Layer(i) => format!("lora.block{i}"),
        BlockSite::Pool => "lora.pool".to_string(),
    }
}

pub(crate) fn lora_sites(arch: &BackboneConfig) -> Vec<BlockSite> {
    let mut sites: Vec<BlockSite> = (1..=arch.depth).map(BlockSite::Layer).collect();
    if arch.pool == Pooling::Map {
        sites.push(BlockSite::Pool);
    }
    sites
}

pub(crate) fn lora_param_specs(arch: &BackboneConfig, cfg: &LoraConfig) -> Vec<ParamSpec> {
    let (d, r) = (arch.width, cfg.rank);
    let mut specs = Vec::new();
    for site in lora_sites(arch) {
        let prefix = site_prefix(site);
        for c in LoraComponent::ALL.into_iter().filter(|c| cfg.has(*c)) {
            specs.push(ParamSpec::new(
                format!("{prefix}.{}.a", c.key()),
                &[d, r],
                Init::TruncNormal(1.0 / (d as f64).sqrt()),
            ));
            specs.push(ParamSpec::new(format!("{prefix}.{}.b", c.key()), &[r, d], Init::Zeros));
        }
    }
    specs
}

pub(crate) struct LoraHook<'a> {
    pub cfg: &'a LoraConfig,
}

impl LoraHook<'_> {
    fn path(&self, tape: &mut Tape, store: &ParamStore, site: BlockSite, c: LoraComponent, input: Var, base: Var) -> Result<Var> {
        if !self.cfg.has(c) {
            return Ok(base);
        }
        let prefix = format!("{}.{}", site_prefix(site), c.key());
        let prev = tape.set_region(Region::BaselineInsert);
        let a = tape.param(store, &format!("{prefix}.a"))?;
        let b = tape.param(store, &format!("{prefix}.b"))?;
        let h = tape.matmul(input, a)?;
        let h = tape.matmul(h, b)?;
        let out = tape.add(base, h)?;
        tape.set_region(prev);
        Ok(out)
    }
}

fn component(p: Projection) -> LoraComponent {
    match p {
        Projection::Q => LoraComponent::Q,
        Projection::K => LoraComponent::K,
        Projection::V => LoraComponent::V,
        Projection::Out => LoraComponent::Out,
    }
}

impl BlockHook for LoraHook<'_> {
    fn projection(&self, tape: &mut Tape, store: &ParamStore, site: BlockSite, proj: Projection, input: Var, base: Var) -> Result<Var> {
        self.path(tape, store, site, component(proj), input, base)
    }

    fn mlp(&self, tape: &mut Tape, store: &ParamStore, site: BlockSite, input: Var, base: Var) -> Result<Var> {
        self.path(tape, store, site, LoraComponent::Mlp, input, base)
    }
}

/// Folds every attention path into its projection, `W' = W + A·B`, and
/// drops the LoRA parameters.
pub(crate) fn merge_into(store: &mut ParamStore, arch: &BackboneConfig, cfg: &LoraConfig) -> Result<()> {
    if cfg.has(LoraComponent::Mlp) {
        return Err(Error::Unsupported(
            "the mlp LoRA path spans a nonlinearity and cannot be merged".into(),
        ));
    }
    for site in lora_sites(arch) {
        let prefix = site_prefix(site);
        let target = match site {
            BlockSite::Layer(i) => format!("backbone.block{i}.mhsa"),
            BlockSite::Pool => "backbone.pool.mhsa".to_string(),
        };
        for p in Projection::ALL {
            let c = component(p);
            if !cfg.has(c) {
                continue;
            }
            let a = store
                .remove(&format!("{prefix}.{}.a", c.key()))
                .ok_or_else(|| Error::UnknownParameter(format!("{prefix}.{}.a", c.key())))?;
            let b = store
                .remove(&format!("{prefix}.{}.b", c.key()))
                .ok_or_else(|| Error::UnknownParameter(format!("{prefix}.{}.b", c.key())))?;
            let delta = a.value.matmul(&b.value)?;
            let w = store.get_mut(&format!("{target}.{}.weight", p.key()))?;
            w.value = w.value.add(&delta)?;
        }
    }
    Ok(())
}
