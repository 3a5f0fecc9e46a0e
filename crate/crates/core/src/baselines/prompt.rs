//! Deep visual prompt tuning with prompts accumulating across layers.
//!
//! Each of the first `layers` blocks prepends `prompts` fresh learnable
//! tokens, so block `i ≤ layers` sees `n + prompts·i` tokens and later
//! blocks see `n + prompts·layers`. Prompt outputs are stripped before
//! pooling.

use crate::autodiff::{ParamStore, Region, Tape, Var};
use crate::backbone::{BackboneConfig, BlockHook, Init, ParamSpec};
use crate::error::Result;

use super::method::PromptConfig;

pub(crate) fn prompt_param_specs(arch: &BackboneConfig, cfg: &PromptConfig) -> Vec<ParamSpec> {
    if cfg.prompts == 0 {
        return Vec::new();
    }
    (1..=cfg.layers)
        .map(|i| ParamSpec::new(format!("prompt.block{i}"), &[cfg.prompts, arch.width], Init::TruncNormal(0.02)))
        .collect()
}

pub(crate) struct PromptHook<'a> {
    pub cfg: &'a PromptConfig,
}

impl BlockHook for PromptHook<'_> {
    fn block_input(&self, tape: &mut Tape, store: &ParamStore, layer: usize, x: Var) -> Result<Var> {
        if self.cfg.prompts == 0 || layer > self.cfg.layers {
            return Ok(x);
        }
        let prev = tape.set_region(Region::BaselineInsert);
        let p = tape.param(store, &format!("prompt.block{layer}"))?;
        let out = tape.concat_rows(p, x);
        tape.set_region(prev);
        out
    }
}

/// Drops the accumulated prompt rows, keeping the last `n` tokens.
pub(crate) fn strip_prompts(tape: &mut Tape, cfg: &PromptConfig, n: usize, x: Var) -> Result<Var> {
    if cfg.prompts == 0 {
        return Ok(x);
    }
    tape.slice_rows(x, cfg.prompts * cfg.layers, n)
}
