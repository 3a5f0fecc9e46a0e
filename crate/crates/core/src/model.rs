//! A backbone plus one adaptation method plus a linear classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{build_side_network, side_forward, SideNetwork};
use crate::autodiff::{ParamStore, Region, Tape, Var};
use crate::backbone::{
    backbone_param_specs, encode, linear, linear_specs, patchify, pool_features, Backbone, BackboneConfig,
    BlockHook, NoHook, ParamSpec, TapKind,
};
use crate::baselines::{
    backbone_trainable, lora_param_specs, lst_forward, lst_param_specs, prompt_param_specs, strip_prompts,
    AdaptationMethod, LoraHook, PromptHook,
};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

pub const HEAD_PREFIX: &str = "head.";

/// One parameter of a model, described without allocating it.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub spec: ParamSpec,
    pub trainable: bool,
}

fn head_specs(arch: &BackboneConfig, num_classes: usize) -> Vec<ParamSpec> {
    linear_specs("head", arch.width, num_classes, true)
}

/// Parameters the method inserts next to the backbone.
pub fn method_param_specs(arch: &BackboneConfig, method: &AdaptationMethod) -> Result<Vec<ParamSpec>> {
    method.validate(arch)?;
    Ok(match method {
        AdaptationMethod::Losa(cfg) => build_side_network(cfg, arch)?.param_specs(),
        AdaptationMethod::Lora(cfg) => lora_param_specs(arch, cfg),
        AdaptationMethod::PromptTuning(cfg) => prompt_param_specs(arch, cfg),
        AdaptationMethod::Lst(cfg) => lst_param_specs(arch, cfg),
        _ => Vec::new(),
    })
}

/// Every parameter of `(arch, method)` with its trainability, in build order.
pub fn model_manifest(arch: &BackboneConfig, method: &AdaptationMethod, num_classes: usize) -> Result<Vec<ManifestEntry>> {
    arch.validate()?;
    if num_classes == 0 {
        return Err(Error::config("num_classes must be positive"));
    }
    let mut out: Vec<ManifestEntry> = backbone_param_specs(arch)
        .into_iter()
        .map(|spec| ManifestEntry {
            trainable: backbone_trainable(method, arch, &spec.name),
            spec,
        })
        .collect();
    out.extend(
        method_param_specs(arch, method)?
            .into_iter()
            .chain(head_specs(arch, num_classes))
            .map(|spec| ManifestEntry { spec, trainable: true }),
    );
    Ok(out)
}

/// Trainable parameter count outside the classifier.
pub fn manifest_learned_params(entries: &[ManifestEntry]) -> usize {
    entries
        .iter()
        .filter(|e| e.trainable && !e.spec.name.starts_with(HEAD_PREFIX))
        .map(|e| e.spec.numel())
        .sum()
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: BackboneConfig,
    pub method: AdaptationMethod,
    pub num_classes: usize,
    pub store: ParamStore,
    side: Option<SideNetwork>,
}

impl Model {
    /// Copies the backbone weights and initialises everything else. The
    /// classifier draws from its own stream so models differing only in
    /// method share an identical head for a given seed.
    pub fn new(backbone: &Backbone, method: AdaptationMethod, num_classes: usize, seed: u64) -> Result<Self> {
        let arch = backbone.cfg.clone();
        let manifest = model_manifest(&arch, &method, num_classes)?;
        let mut store = ParamStore::new();
        let mut method_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for e in manifest {
            let name = e.spec.name.clone();
            let value = if name.starts_with("backbone.") {
                let v = backbone.store.value(&name)?;
                if v.shape() != e.spec.shape.as_slice() {
                    return Err(Error::Shape {
                        op: "Model::new",
                        lhs: v.shape().to_vec(),
                        rhs: e.spec.shape.clone(),
                    });
                }
                v.clone()
            } else if name.starts_with(HEAD_PREFIX) {
                e.spec.materialize(&mut head_rng)
            } else {
                e.spec.materialize(&mut method_rng)
            };
            store.insert(name, value, e.trainable);
        }
        Self::from_store(arch, method, num_classes, store)
    }

    /// Wraps an existing parameter store, e.g. one loaded from a checkpoint.
    pub fn from_store(arch: BackboneConfig, method: AdaptationMethod, num_classes: usize, store: ParamStore) -> Result<Self> {
        method.validate(&arch)?;
        let side = match &method {
            AdaptationMethod::Losa(cfg) => Some(build_side_network(cfg, &arch)?),
            _ => None,
        };
        for e in model_manifest(&arch, &method, num_classes)? {
            let v = store.value(&e.spec.name)?;
            if v.shape() != e.spec.shape.as_slice() {
                return Err(Error::Shape {
                    op: "Model::from_store",
                    lhs: v.shape().to_vec(),
                    rhs: e.spec.shape.clone(),
                });
            }
        }
        Ok(Self {
            arch,
            method,
            num_classes,
            store,
            side,
        })
    }

    /// A linear-probe model over `backbone` carrying `donor`'s classifier.
    pub fn with_head_of(backbone: &Backbone, donor: &Model) -> Result<Self> {
        let mut m = Model::new(backbone, AdaptationMethod::LinearProbe, donor.num_classes, 0)?;
        for name in ["head.weight", "head.bias"] {
            m.store.get_mut(name)?.value = donor.store.value(name)?.clone();
        }
        Ok(m)
    }

    pub fn side_network(&self) -> Option<&SideNetwork> {
        self.side.as_ref()
    }

    /// Trainable parameter count excluding the classifier.
    pub fn learned_params(&self) -> usize {
        self.store.trainable_count(|n| !n.starts_with(HEAD_PREFIX))
    }

    pub fn backbone_snapshot(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .filter(|p| p.name.starts_with("backbone."))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Pooled `[1×d]` features of one input.
    pub fn features(&self, tape: &mut Tape, input: &Tensor) -> Result<Var> {
        let lora_hook;
        let prompt_hook;
        let hook: &dyn BlockHook = match &self.method {
            AdaptationMethod::Lora(cfg) => {
                lora_hook = LoraHook { cfg };
                &lora_hook
            }
            AdaptationMethod::PromptTuning(cfg) => {
                prompt_hook = PromptHook { cfg };
                &prompt_hook
            }
            _ => &NoHook,
        };
        let tap = match &self.method {
            AdaptationMethod::Losa(cfg) => cfg.tap,
            _ => TapKind::EncoderOutput,
        };
        let prev = tape.set_region(Region::Backbone);
        let tokens = patchify(tape, &self.arch, &self.store, input)?;
        let outs = encode(tape, &self.arch, &self.store, tokens, tap, hook)?;
        let y = match &self.method {
            AdaptationMethod::Losa(_) => {
                let side = self.side.as_ref().ok_or_else(|| Error::config("LoSA model without side network"))?;
                side_forward(tape, &self.store, side, &outs)?
            }
            AdaptationMethod::Lst(cfg) => lst_forward(tape, &self.store, cfg, &outs)?,
            AdaptationMethod::PromptTuning(cfg) => {
                tape.set_region(Region::BaselineInsert);
                strip_prompts(tape, cfg, self.arch.num_tokens(), outs.final_out)?
            }
            _ => outs.final_out,
        };
        let pooled = pool_features(tape, &self.arch, &self.store, y, hook)?;
        tape.set_region(prev);
        Ok(pooled)
    }

    pub fn logits(&self, tape: &mut Tape, input: &Tensor) -> Result<Var> {
        let f = self.features(tape, input)?;
        let prev = tape.set_region(Region::Head);
        let out = linear(tape, &self.store, "head", f);
        tape.set_region(prev);
        out
    }

    pub fn loss(&self, tape: &mut Tape, input: &Tensor, label: usize) -> Result<Var> {
        let logits = self.logits(tape, input)?;
        let prev = tape.set_region(Region::Head);
        let out = tape.cross_entropy(logits, label);
        tape.set_region(prev);
        out
    }

    /// Logits on a fresh tape, as a plain vector.
    pub fn predict(&self, input: &Tensor, precision: Precision) -> Result<Vec<f64>> {
        let mut tape = Tape::new(precision);
        let l = self.logits(&mut tape, input)?;
        Ok(tape.value(l).data().to_vec())
    }
}
