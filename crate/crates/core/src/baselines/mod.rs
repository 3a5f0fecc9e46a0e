//! Reference adaptation methods wrapping the same backbone: LoRA, BitFit,
//! prompt tuning, ladder side tuning and selective finetuning.

mod lora;
mod lst;
mod method;
mod prompt;

pub use method::{
    AdaptationMethod, LoraComponent, LoraConfig, LstConfig, PromptConfig, LORA_MAX_RANK, PROMPT_MAX,
};

pub(crate) use lora::{lora_param_specs, merge_into, LoraHook};
pub(crate) use lst::{lst_forward, lst_param_specs};
pub(crate) use prompt::{prompt_param_specs, strip_prompts, PromptHook};

use crate::adapters::init_losa;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::model::Model;

/// Subsets of backbone parameters that selective finetuning can unfreeze.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectiveMode {
    Linear,
    LastK(usize),
    AttnOnly,
    MlpOnly,
    Full,
}

impl SelectiveMode {
    pub fn method(self) -> AdaptationMethod {
        match self {
            SelectiveMode::Linear => AdaptationMethod::LinearProbe,
            SelectiveMode::LastK(k) => AdaptationMethod::LastK { k },
            SelectiveMode::AttnOnly => AdaptationMethod::AttnOnly,
            SelectiveMode::MlpOnly => AdaptationMethod::MlpOnly,
            SelectiveMode::Full => AdaptationMethod::FullFinetune,
        }
    }
}

/// Whether backbone parameter `name` is trained under `method`.
pub fn backbone_trainable(method: &AdaptationMethod, arch: &BackboneConfig, name: &str) -> bool {
    let Some(rest) = name.strip_prefix("backbone.") else {
        return false;
    };
    match method {
        AdaptationMethod::BitFit => name.ends_with(".bias"),
        AdaptationMethod::FullFinetune => true,
        AdaptationMethod::AttnOnly => name.contains(".mhsa."),
        AdaptationMethod::MlpOnly => name.contains(".mlp."),
        AdaptationMethod::LastK { k } => {
            if rest.starts_with("norm.") || rest.starts_with("pool.") {
                return true;
            }
            block_index(rest).is_some_and(|i| i + k > arch.depth)
        }
        _ => false,
    }
}

fn block_index(rest: &str) -> Option<usize> {
    let tail = rest.strip_prefix("block")?;
    tail.split('.').next()?.parse().ok()
}

/// Folds LoRA paths into the backbone weights, returning a plain backbone.
pub fn merge_lora(model: &Model) -> Result<Backbone> {
    let AdaptationMethod::Lora(cfg) = &model.method else {
        return Err(Error::Unsupported(format!(
            "merge_lora needs a LoRA model, got `{}`",
            model.method.name()
        )));
    };
    let mut store = model.store.clone();
    merge_into(&mut store, &model.arch, cfg)?;
    let names: Vec<String> = store
        .names()
        .filter(|n| !n.starts_with("backbone."))
        .map(str::to_string)
        .collect();
    for n in names {
        store.remove(&n);
    }
    store.set_trainable_where(|_| true, false);
    Ok(Backbone {
        cfg: model.arch.clone(),
        store,
    })
}

pub fn apply_lora(b: &Backbone, rank: usize, components: &[LoraComponent], num_classes: usize, seed: u64) -> Result<Model> {
    let cfg = LoraConfig {
        rank,
        components: components.to_vec(),
    };
    Model::new(b, AdaptationMethod::Lora(cfg), num_classes, seed)
}

pub fn apply_bitfit(b: &Backbone, num_classes: usize, seed: u64) -> Result<Model> {
    Model::new(b, AdaptationMethod::BitFit, num_classes, seed)
}

pub fn apply_prompt_tuning(b: &Backbone, prompts: usize, layers: usize, num_classes: usize, seed: u64) -> Result<Model> {
    Model::new(
        b,
        AdaptationMethod::PromptTuning(PromptConfig { prompts, layers }),
        num_classes,
        seed,
    )
}

pub fn apply_lst(b: &Backbone, d_side: usize, num_classes: usize, seed: u64) -> Result<Model> {
    Model::new(b, AdaptationMethod::Lst(LstConfig::new(d_side)), num_classes, seed)
}

pub fn apply_selective(b: &Backbone, mode: SelectiveMode, num_classes: usize, seed: u64) -> Result<Model> {
    Model::new(b, mode.method(), num_classes, seed)
}

/// Attaches a LoSA side network (see [`init_losa`]).
pub fn apply_losa(b: &Backbone, cfg: crate::adapters::LosaConfig, num_classes: usize, seed: u64) -> Result<Model> {
    init_losa(&cfg, &b.cfg, seed)?;
    Model::new(b, AdaptationMethod::Losa(cfg), num_classes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{backbone_param_specs, preset};

    fn count(arch: &BackboneConfig, m: &AdaptationMethod) -> usize {
        backbone_param_specs(arch)
            .iter()
            .filter(|s| backbone_trainable(m, arch, &s.name))
            .map(|s| s.numel())
            .sum()
    }

    #[test]
    fn selective_counts_on_vit_g() {
        let g = preset("vit-g").unwrap();
        let full = count(&g, &AdaptationMethod::FullFinetune) as f64;
        assert!((full / 1.0e9 - 1.0).abs() < 0.1, "{full}");
        let attn = count(&g, &AdaptationMethod::AttnOnly) as f64;
        assert!((attn / 320.0e6 - 1.0).abs() < 0.1, "{attn}");
        let bias = count(&g, &AdaptationMethod::BitFit) as f64;
        assert!((bias / 0.7e6 - 1.0).abs() < 0.1, "{bias}");
        assert_eq!(count(&g, &AdaptationMethod::LinearProbe), 0);
    }

    #[test]
    fn last_k_selects_tail_blocks() {
        let arch = crate::backbone::toy();
        let m = AdaptationMethod::LastK { k: 1 };
        assert!(backbone_trainable(&m, &arch, "backbone.block4.mlp.fc1.weight"));
        assert!(!backbone_trainable(&m, &arch, "backbone.block3.mlp.fc1.weight"));
        assert!(backbone_trainable(&m, &arch, "backbone.norm.weight"));
        assert!(!backbone_trainable(&m, &arch, "backbone.embed.weight"));
    }
}
