use serde::{Deserialize, Serialize};

use crate::adapters::LosaConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraComponent {
    Q,
    K,
    V,
    Out,
    Mlp,
}

impl LoraComponent {
    pub const ALL: [LoraComponent; 5] = [
        LoraComponent::Q,
        LoraComponent::K,
        LoraComponent::V,
        LoraComponent::Out,
        LoraComponent::Mlp,
    ];

    pub fn key(self) -> &'static str {
        match self {
            LoraComponent::Q => "q",
            LoraComponent::K => "k",
            LoraComponent::V => "v",
            LoraComponent::Out => "out",
            LoraComponent::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub components: Vec<LoraComponent>,
}

impl LoraConfig {
    pub fn all(rank: usize) -> Self {
        Self {
            rank,
            components: LoraComponent::ALL.to_vec(),
        }
    }

    pub fn has(&self, c: LoraComponent) -> bool {
        self.components.contains(&c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Fresh prompts prepended at each prompted layer.
    pub prompts: usize,
    /// Number of initial layers receiving prompts.
    pub layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstConfig {
    pub d_side: usize,
    #[serde(default = "default_lst_heads")]
    pub heads: usize,
}

fn default_lst_heads() -> usize {
    4
}

impl LstConfig {
    pub fn new(d_side: usize) -> Self {
        Self {
            d_side,
            heads: default_lst_heads(),
        }
    }
}

/// One adaptation strategy and its hyperparameters. In JSON the tag lives
/// under `"method"` and the hyperparameters under `"params"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", content = "params", rename_all = "snake_case")]
pub enum AdaptationMethod {
    Losa(LosaConfig),
    Lora(LoraConfig),
    #[serde(rename = "bitfit")]
    BitFit,
    PromptTuning(PromptConfig),
    Lst(LstConfig),
    LinearProbe,
    FullFinetune,
    LastK { k: usize },
    AttnOnly,
    MlpOnly,
}

pub const LORA_MAX_RANK: usize = 256;
pub const PROMPT_MAX: usize = 24;

impl AdaptationMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AdaptationMethod::Losa(_) => "losa",
            AdaptationMethod::Lora(_) => "lora",
            AdaptationMethod::BitFit => "bitfit",
            AdaptationMethod::PromptTuning(_) => "prompt_tuning",
            AdaptationMethod::Lst(_) => "lst",
            AdaptationMethod::LinearProbe => "linear_probe",
            AdaptationMethod::FullFinetune => "full_finetune",
            AdaptationMethod::LastK { .. } => "last_k",
            AdaptationMethod::AttnOnly => "attn_only",
            AdaptationMethod::MlpOnly => "mlp_only",
        }
    }

    /// Methods whose training never backpropagates into the backbone.
    pub fn skips_backbone_backward(&self) -> bool {
        matches!(
            self,
            AdaptationMethod::Losa(_) | AdaptationMethod::Lst(_) | AdaptationMethod::LinearProbe
        ) || matches!(self, AdaptationMethod::PromptTuning(p) if p.prompts == 0)
    }

    pub fn validate(&self, arch: &BackboneConfig) -> Result<()> {
        match self {
            AdaptationMethod::Losa(cfg) => cfg.validate(arch),
            AdaptationMethod::Lora(cfg) => {
                if cfg.components.is_empty() {
                    return Err(Error::config("LoRA needs at least one component"));
                }
                if !(1..=LORA_MAX_RANK).contains(&cfg.rank) {
                    return Err(Error::config(format!(
                        "LoRA rank {} outside 1..={LORA_MAX_RANK}",
                        cfg.rank
                    )));
                }
                Ok(())
            }
            AdaptationMethod::PromptTuning(p) => {
                if p.prompts > PROMPT_MAX {
                    return Err(Error::config(format!(
                        "prompt count {} exceeds {PROMPT_MAX}",
                        p.prompts
                    )));
                }
                if p.prompts > 0 && !(1..=arch.depth).contains(&p.layers) {
                    return Err(Error::config(format!(
                        "prompted layers {} outside 1..={}",
                        p.layers, arch.depth
                    )));
                }
                Ok(())
            }
            AdaptationMethod::Lst(cfg) => {
                if cfg.d_side == 0 || cfg.heads == 0 || cfg.d_side % cfg.heads != 0 {
                    return Err(Error::config(format!(
                        "LST width {} must be a positive multiple of {} heads",
                        cfg.d_side, cfg.heads
                    )));
                }
                Ok(())
            }
            AdaptationMethod::LastK { k } => {
                if *k == 0 || *k > arch.depth {
                    return Err(Error::config(format!(
                        "last_k {k} outside 1..={}",
                        arch.depth
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let m: AdaptationMethod =
            serde_json::from_str(r#"{"method": "lora", "params": {"rank": 8, "components": ["q", "mlp"]}}"#)
                .unwrap();
        assert_eq!(
            m,
            AdaptationMethod::Lora(LoraConfig {
                rank: 8,
                components: vec![LoraComponent::Q, LoraComponent::Mlp]
            })
        );
        let b: AdaptationMethod = serde_json::from_str(r#"{"method": "bitfit"}"#).unwrap();
        assert_eq!(b, AdaptationMethod::BitFit);
        let k: AdaptationMethod = serde_json::from_str(r#"{"method": "last_k", "params": {"k": 2}}"#).unwrap();
        assert_eq!(k, AdaptationMethod::LastK { k: 2 });
    }

    #[test]
    fn validation() {
        let arch = crate::backbone::toy();
        let empty = AdaptationMethod::Lora(LoraConfig {
            rank: 4,
            components: vec![],
        });
        assert!(empty.validate(&arch).is_err());
        assert!(AdaptationMethod::Lora(LoraConfig::all(0)).validate(&arch).is_err());
        assert!(AdaptationMethod::LastK { k: 5 }.validate(&arch).is_err());
        assert!(AdaptationMethod::PromptTuning(PromptConfig { prompts: 2, layers: 5 })
            .validate(&arch)
            .is_err());
    }
}
