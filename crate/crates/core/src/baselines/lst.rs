//! Ladder side tuning: a narrow transformer running beside the frozen
//! backbone, fed by down-projected taps.
//!
//! `s_0 = down_0(b_0)` starts from the backbone input; each layer adds
//! `down_i(b_i)` and applies a width-`d_side` block. The result is projected
//! back to width `d` by a zero-initialised `up` and added to `b_L`.

use crate::autodiff::{ParamStore, Region, Tape, Var};
use crate::backbone::{
    block_specs, linear, linear_specs, transformer_block, BackboneConfig, BackboneOutputs, BlockSite, Init,
    NoHook, ParamSpec,
};
use crate::error::Result;

use super::method::LstConfig;

pub(crate) fn lst_param_specs(arch: &BackboneConfig, cfg: &LstConfig) -> Vec<ParamSpec> {
    let (d, s) = (arch.width, cfg.d_side);
    let mut v = Vec::new();
    for i in 0..=arch.depth {
        v.extend(linear_specs(&format!("lst.down{i}"), d, s, true));
    }
    for i in 1..=arch.depth {
        v.extend(block_specs(&format!("lst.block{i}"), s, 4 * s));
    }
    v.push(ParamSpec::new("lst.up.weight", &[s, d], Init::Zeros));
    v.push(ParamSpec::new("lst.up.bias", &[d], Init::Zeros));
    v
}

pub(crate) fn lst_forward(tape: &mut Tape, store: &ParamStore, cfg: &LstConfig, outs: &BackboneOutputs) -> Result<Var> {
    let prev = tape.set_region(Region::Side);
    let mut s = linear(tape, store, "lst.down0", outs.tokens_in)?;
    for (i, &b) in outs.taps.iter().enumerate() {
        let layer = i + 1;
        let h = linear(tape, store, &format!("lst.down{layer}"), b)?;
        let h = tape.add(s, h)?;
        s = transformer_block(
            tape,
            store,
            &format!("lst.block{layer}"),
            cfg.heads,
            BlockSite::Layer(layer),
            h,
            &NoHook,
        )?
        .out;
    }
    let up = linear(tape, store, "lst.up", s)?;
    let out = tape.add(outs.final_out, up);
    tape.set_region(prev);
    out
}
