//! The model forward pass traced through the [`Ledger`], one walk per
//! (architecture, method) pair.

use crate::adapters::{build_side_network, AdaptorLayer, Axis, SideInput, SideLayer, SideNetwork};
use crate::autodiff::{Region, TapeStats};
use crate::backbone::{BackboneConfig, Pooling, Projection, TapKind};
use crate::baselines::{AdaptationMethod, LoraComponent, LoraConfig, LstConfig, PromptConfig};
use crate::error::{Error, Result};
use crate::model::model_manifest;

use super::ledger::{Id, Ledger, ParamTable};

#[derive(Clone, Copy)]
enum Site {
    Layer(usize),
    Pool,
}

struct Walk<'a, 'b> {
    l: Ledger<'a>,
    arch: &'b BackboneConfig,
    lora: Option<&'b LoraConfig>,
    prompt: Option<&'b PromptConfig>,
}

impl Walk<'_, '_> {
    fn linear(&mut self, prefix: &str, x: Id) -> Result<Id> {
        let w = self.l.param(&format!("{prefix}.weight"))?;
        let h = self.l.matmul(x, w)?;
        let bias = format!("{prefix}.bias");
        if self.l.has_param(&bias) {
            let b = self.l.param(&bias)?;
            Ok(self.l.add(h, b))
        } else {
            Ok(h)
        }
    }

    fn norm(&mut self, prefix: &str, x: Id) -> Result<Id> {
        let g = self.l.param(&format!("{prefix}.weight"))?;
        let b = self.l.param(&format!("{prefix}.bias"))?;
        Ok(self.l.layer_norm(x, g, b))
    }

    fn lora_path(&mut self, site: Site, c: LoraComponent, input: Id, base: Id) -> Result<Id> {
        match self.lora {
            Some(cfg) if cfg.has(c) => {
                let prefix = match site {
                    Site::Layer(i) => format!("lora.block{i}.{}", c.key()),
                    Site::Pool => format!("lora.pool.{}", c.key()),
                };
                let prev = self.l.set_region(Region::BaselineInsert);
                let a = self.l.param(&format!("{prefix}.a"))?;
                let b = self.l.param(&format!("{prefix}.b"))?;
                let h = self.l.matmul(input, a)?;
                let h = self.l.matmul(h, b)?;
                let out = self.l.add(base, h);
                self.l.set_region(prev);
                Ok(out)
            }
            _ => Ok(base),
        }
    }

    fn mlp(&mut self, prefix: &str, h: Id) -> Result<Id> {
        let u = self.linear(&format!("{prefix}.fc1"), h)?;
        let u = self.l.gelu(u);
        self.linear(&format!("{prefix}.fc2"), u)
    }

    /// Returns (out, mhsa branch, mlp branch).
    fn block(&mut self, prefix: &str, heads: usize, site: Option<Site>, x: Id) -> Result<(Id, Id, Id)> {
        let h = self.norm(&format!("{prefix}.norm1"), x)?;
        let mut qkv = [h; 3];
        for (slot, (p, c)) in qkv.iter_mut().zip([
            (Projection::Q, LoraComponent::Q),
            (Projection::K, LoraComponent::K),
            (Projection::V, LoraComponent::V),
        ]) {
            let base = self.linear(&format!("{prefix}.mhsa.{}", p.key()), h)?;
            *slot = match site {
                Some(s) => self.lora_path(s, c, h, base)?,
                None => base,
            };
        }
        let a = self.l.attention(qkv[0], qkv[1], qkv[2], heads);
        let base = self.linear(&format!("{prefix}.mhsa.out"), a)?;
        let mhsa = match site {
            Some(s) => self.lora_path(s, LoraComponent::Out, a, base)?,
            None => base,
        };
        let x = self.l.add(x, mhsa);
        let h = self.norm(&format!("{prefix}.norm2"), x)?;
        let m = self.mlp(&format!("{prefix}.mlp"), h)?;
        let m = match site {
            Some(s) => self.lora_path(s, LoraComponent::Mlp, h, m)?,
            None => m,
        };
        Ok((self.l.add(x, m), mhsa, m))
    }

    fn adaptor(&mut self, a: &AdaptorLayer, x: Id) -> Result<Id> {
        let g = a.geometry;
        let (fwd, back): (Option<Vec<usize>>, Option<Vec<usize>>) = match a.axis {
            Axis::Channel => (None, None),
            Axis::Token => (Some(vec![g.width, g.tokens]), Some(vec![g.tokens, g.width])),
            Axis::Spatial => (
                Some(vec![g.n_temporal * g.width, g.n_spatial]),
                Some(vec![g.tokens, g.width]),
            ),
            Axis::Temporal => (
                Some(vec![g.n_spatial * g.width, g.n_temporal]),
                Some(vec![g.tokens, g.width]),
            ),
        };
        let h = match fwd {
            Some(s) => self.l.reshape_op(x, s),
            None => x,
        };
        let h = self.linear(&format!("{}.down", a.prefix), h)?;
        let h = self.l.gelu(h);
        let h = self.linear(&format!("{}.up", a.prefix), h)?;
        let h = match back {
            Some(s) => self.l.reshape_op(h, s),
            None => h,
        };
        let alpha = self.l.param(&format!("{}.alpha", a.prefix))?;
        Ok(self.l.scale(h, alpha))
    }

    fn side(&mut self, side: &SideNetwork, final_out: Id, tokens_in: Id, taps: &[Id]) -> Result<Id> {
        let prev = self.l.set_region(Region::Side);
        let mut y = match side.cfg.side_input {
            SideInput::BackboneOutput => final_out,
            SideInput::BackboneInput => tokens_in,
        };
        for (layer, &t) in side.layers.iter().zip(&side.tap_indices) {
            let b = *taps
                .get(t - 1)
                .ok_or_else(|| Error::config(format!("tap index {t} out of range")))?;
            let h = self.l.add(b, y);
            let g = match layer {
                SideLayer::Adaptor(a) => self.adaptor(a, h)?,
                SideLayer::Video { spatial, temporal } => {
                    let s = self.adaptor(spatial, h)?;
                    let t = self.adaptor(temporal, h)?;
                    self.l.add(s, t)
                }
                SideLayer::Transformer { prefix, heads, .. } => {
                    let d = self.linear(&format!("{prefix}.down"), h)?;
                    let (o, _, _) = self.block(&format!("{prefix}.block"), *heads, None, d)?;
                    self.linear(&format!("{prefix}.up"), o)?
                }
            };
            y = self.l.add(g, y);
        }
        self.l.set_region(prev);
        Ok(y)
    }

    fn lst(&mut self, cfg: &LstConfig, final_out: Id, tokens_in: Id, taps: &[Id]) -> Result<Id> {
        let prev = self.l.set_region(Region::Side);
        let mut s = self.linear("lst.down0", tokens_in)?;
        for (i, &b) in taps.iter().enumerate() {
            let layer = i + 1;
            let h = self.linear(&format!("lst.down{layer}"), b)?;
            let h = self.l.add(s, h);
            s = self.block(&format!("lst.block{layer}"), cfg.heads, None, h)?.0;
        }
        let up = self.linear("lst.up", s)?;
        let out = self.l.add(final_out, up);
        self.l.set_region(prev);
        Ok(out)
    }

    fn pool(&mut self, y: Id) -> Result<Id> {
        let prev = self.l.set_region(Region::Head);
        let z = self.norm("backbone.norm", y)?;
        let d = self.arch.width;
        let pooled = match self.arch.pool {
            Pooling::Cls | Pooling::Mean => self.l.reshape_op(z, vec![1, d]),
            Pooling::Map => {
                let probe = self.l.param("backbone.pool.probe")?;
                let mut qkv = [z; 3];
                for (slot, (p, c, input)) in qkv.iter_mut().zip([
                    (Projection::Q, LoraComponent::Q, probe),
                    (Projection::K, LoraComponent::K, z),
                    (Projection::V, LoraComponent::V, z),
                ]) {
                    let base = self.linear(&format!("backbone.pool.mhsa.{}", p.key()), input)?;
                    *slot = self.lora_path(Site::Pool, c, input, base)?;
                }
                let a = self.l.attention(qkv[0], qkv[1], qkv[2], self.arch.heads);
                let base = self.linear("backbone.pool.mhsa.out", a)?;
                let o = self.lora_path(Site::Pool, LoraComponent::Out, a, base)?;
                let h = self.norm("backbone.pool.norm", o)?;
                let m = self.mlp("backbone.pool.mlp", h)?;
                let m = self.lora_path(Site::Pool, LoraComponent::Mlp, h, m)?;
                self.l.add(o, m)
            }
        };
        self.l.set_region(prev);
        Ok(pooled)
    }
}

/// Per-example forward/backward accounting of one training step, derived
/// analytically. `bytes_per_elem` is 4 for 32-bit runs.
pub fn ledger_stats(
    arch: &BackboneConfig,
    method: &AdaptationMethod,
    num_classes: usize,
    bytes_per_elem: u64,
) -> Result<TapeStats> {
    let table: ParamTable = model_manifest(arch, method, num_classes)?
        .into_iter()
        .map(|e| (e.spec.name, (e.spec.shape, e.trainable)))
        .collect();
    let side = match method {
        AdaptationMethod::Losa(cfg) => Some(build_side_network(cfg, arch)?),
        _ => None,
    };
    let mut w = Walk {
        l: Ledger::new(&table),
        arch,
        lora: match method {
            AdaptationMethod::Lora(c) => Some(c),
            _ => None,
        },
        prompt: match method {
            AdaptationMethod::PromptTuning(c) if c.prompts > 0 => Some(c),
            _ => None,
        },
    };
    let (d, n) = (arch.width, arch.num_tokens());

    let patches = w.l.constant(&[arch.num_patches(), arch.patch_dim()]);
    let mut x = w.linear("backbone.embed", patches)?;
    if arch.cls_token {
        let cls = w.l.param("backbone.cls")?;
        x = w.l.concat_rows(cls, x);
    }
    let pos = w.l.param("backbone.pos")?;
    let tokens_in = w.l.add(x, pos);

    let tap = match method {
        AdaptationMethod::Losa(c) => c.tap,
        _ => TapKind::EncoderOutput,
    };
    let mut taps = Vec::new();
    let mut x = tokens_in;
    for i in 1..=arch.depth {
        if w.prompt.is_some_and(|p| i <= p.layers) {
            let prev = w.l.set_region(Region::BaselineInsert);
            let prompt = w.l.param(&format!("prompt.block{i}"))?;
            x = w.l.concat_rows(prompt, x);
            w.l.set_region(prev);
        }
        let (out, mhsa, mlp) = w.block(&format!("backbone.block{i}"), arch.heads, Some(Site::Layer(i)), x)?;
        match tap {
            TapKind::EncoderOutput => taps.push(out),
            TapKind::MhsaOutput => taps.push(mhsa),
            TapKind::MlpOutput => taps.push(mlp),
            TapKind::Both => taps.extend([mhsa, mlp]),
        }
        x = out;
    }
    let y = match method {
        AdaptationMethod::Losa(_) => {
            let side = side.as_ref().expect("built above");
            w.side(side, x, tokens_in, &taps)?
        }
        AdaptationMethod::Lst(cfg) => w.lst(cfg, x, tokens_in, &taps)?,
        AdaptationMethod::PromptTuning(_) if w.prompt.is_some() => {
            w.l.set_region(Region::BaselineInsert);
            let s = w.l.reshape_op(x, vec![n, d]);
            w.l.set_region(Region::Backbone);
            s
        }
        _ => x,
    };
    let pooled = w.pool(y)?;
    w.l.set_region(Region::Head);
    let logits = w.linear("head", pooled)?;
    let loss = w.l.cross_entropy(logits);
    Ok(w.l.finish(loss, bytes_per_elem))
}
