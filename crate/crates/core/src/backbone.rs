//! Vision-transformer backbone (image and unfactorised video) with named tap
//! points exposing per-layer activations.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Region, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// How token features are reduced to one vector before the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Take the class token (requires `cls_token`).
    Cls,
    /// Average over tokens.
    Mean,
    /// Multi-head attention pooling with a learned probe query.
    Map,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub patch: usize,
    #[serde(default = "one")]
    pub tubelet_t: usize,
    pub image_size: usize,
    #[serde(default = "one")]
    pub frames: usize,
    #[serde(default = "three")]
    pub channels: usize,
    #[serde(default)]
    pub cls_token: bool,
    pub pool: Pooling,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("patch", self.patch),
            ("tubelet_t", self.tubelet_t),
            ("image_size", self.image_size),
            ("frames", self.frames),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.frames % self.tubelet_t != 0 {
            return Err(Error::config(format!(
                "frames {} not divisible by tubelet_t {}",
                self.frames, self.tubelet_t
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.pool == Pooling::Cls && !self.cls_token {
            return Err(Error::config("cls pooling requires cls_token"));
        }
        Ok(())
    }

    /// Spatial tokens per frame group, `(image_size / patch)²`.
    pub fn n_spatial(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    /// Temporal token groups, `frames / tubelet_t`.
    pub fn n_temporal(&self) -> usize {
        self.frames / self.tubelet_t
    }

    pub fn num_patches(&self) -> usize {
        self.n_spatial() * self.n_temporal()
    }

    /// Sequence length seen by every block.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.cls_token)
    }

    /// Flattened tubelet length, `tubelet_t · patch² · channels`.
    pub fn patch_dim(&self) -> usize {
        self.tubelet_t * self.patch * self.patch * self.channels
    }

    pub fn is_video(&self) -> bool {
        self.frames > 1
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.frames, self.image_size, self.image_size, self.channels]
    }
}

/// Named architecture presets. Large presets are only used shape-wise by the
/// cost model; allocating them is possible but not something tests do.
pub fn preset(name: &str) -> Result<BackboneConfig> {
    let big = |depth, width, mlp_dim| BackboneConfig {
        depth,
        width,
        heads: 16,
        mlp_dim,
        patch: 14,
        tubelet_t: 1,
        image_size: 224,
        frames: 1,
        channels: 3,
        cls_token: false,
        pool: Pooling::Map,
    };
    let cfg = match name {
        "vit-b" => BackboneConfig {
            depth: 12,
            width: 768,
            heads: 12,
            mlp_dim: 3072,
            patch: 16,
            tubelet_t: 1,
            image_size: 224,
            frames: 1,
            channels: 3,
            cls_token: true,
            pool: Pooling::Cls,
        },
        "vit-h" => big(32, 1280, 5120),
        "vit-g" => big(40, 1408, 6144),
        "vit-G" => big(48, 1664, 8192),
        "vit-e" => big(56, 1792, 15360),
        "vivit-g" => BackboneConfig {
            frames: 32,
            tubelet_t: 2,
            ..big(40, 1408, 6144)
        },
        "toy" => toy(),
        "toy-video" => BackboneConfig {
            frames: 4,
            tubelet_t: 2,
            ..toy()
        },
        other => return Err(Error::config(format!("unknown architecture `{other}`"))),
    };
    Ok(cfg)
}

pub const PRESET_NAMES: [&str; 8] = [
    "vit-b", "vit-h", "vit-g", "vit-G", "vit-e", "vivit-g", "toy", "toy-video",
];

/// The desk-scale backbone used for training experiments.
pub fn toy() -> BackboneConfig {
    BackboneConfig {
        depth: 4,
        width: 64,
        heads: 4,
        mlp_dim: 256,
        patch: 4,
        tubelet_t: 1,
        image_size: 16,
        frames: 1,
        channels: 3,
        cls_token: false,
        pool: Pooling::Mean,
    }
}

/// Architectures keyed by name, loadable from a JSON object whose values
/// mirror [`BackboneConfig`]. Built-in presets are always available.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ArchRegistry {
    #[serde(flatten)]
    entries: BTreeMap<String, BackboneConfig>,
}

impl ArchRegistry {
    pub fn builtin() -> Self {
        let entries = PRESET_NAMES
            .iter()
            .map(|n| (n.to_string(), preset(n).expect("builtin preset")))
            .collect();
        Self { entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let loaded: ArchRegistry = serde_json::from_str(&text)?;
        let mut reg = Self::builtin();
        for (name, cfg) in loaded.entries {
            cfg.validate()?;
            reg.entries.insert(name, cfg);
        }
        Ok(reg)
    }

    pub fn get(&self, name: &str) -> Result<BackboneConfig> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::config(format!("unknown architecture `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Which per-layer activation is exposed to a side network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TapKind {
    /// Residual stream after the whole block.
    #[default]
    EncoderOutput,
    /// Attention branch output, before its residual add.
    MhsaOutput,
    /// MLP branch output, before its residual add.
    MlpOutput,
    /// Attention then MLP branch outputs of every layer (2L taps).
    Both,
}

impl TapKind {
    pub fn count(self, depth: usize) -> usize {
        match self {
            TapKind::Both => 2 * depth,
            _ => depth,
        }
    }
}

/// Activations of one forward pass, all `[n×d]`.
#[derive(Debug, Clone)]
pub struct BackboneOutputs {
    pub final_out: Var,
    pub taps: Vec<Var>,
    pub tokens_in: Var,
}

/// Location of a transformer block: an encoder layer (1-based) or the
/// attention-pooling block of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockSite {
    Layer(usize),
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    Out,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::Out];

    pub fn key(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::Out => "out",
        }
    }
}

/// Extension points inside transformer blocks, used by methods that modify
/// the backbone computation. Defaults leave the block untouched.
pub trait BlockHook {
    /// Rewrites the sequence entering an encoder layer.
    fn block_input(&self, _tape: &mut Tape, _store: &ParamStore, _layer: usize, x: Var) -> Result<Var> {
        Ok(x)
    }

    /// Adjusts the output of an attention projection given its input.
    fn projection(
        &self,
        _tape: &mut Tape,
        _store: &ParamStore,
        _site: BlockSite,
        _proj: Projection,
        _input: Var,
        base: Var,
    ) -> Result<Var> {
        Ok(base)
    }

    /// Adjusts the MLP branch output given the MLP input.
    fn mlp(&self, _tape: &mut Tape, _store: &ParamStore, _site: BlockSite, _input: Var, base: Var) -> Result<Var> {
        Ok(base)
    }
}

/// A hook that changes nothing.
pub struct NoHook;

impl BlockHook for NoHook {}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    TruncNormal(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize(&self, rng: &mut ChaCha8Rng) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, 1.0),
            Init::TruncNormal(std) => Tensor::trunc_normal(&self.shape, std, rng),
        }
    }
}

pub(crate) fn linear_specs(prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::new(
        format!("{prefix}.weight"),
        &[fan_in, fan_out],
        Init::TruncNormal(1.0 / (fan_in as f64).sqrt()),
    )];
    if bias {
        v.push(ParamSpec::new(format!("{prefix}.bias"), &[fan_out], Init::Zeros));
    }
    v
}

pub(crate) fn norm_specs(prefix: &str, width: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), &[width], Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), &[width], Init::Zeros),
    ]
}

/// Parameters of one pre-norm transformer block at `prefix`.
pub(crate) fn block_specs(prefix: &str, width: usize, mlp_dim: usize) -> Vec<ParamSpec> {
    let mut v = norm_specs(&format!("{prefix}.norm1"), width);
    for p in Projection::ALL {
        v.extend(linear_specs(&format!("{prefix}.mhsa.{}", p.key()), width, width, true));
    }
    v.extend(norm_specs(&format!("{prefix}.norm2"), width));
    v.extend(linear_specs(&format!("{prefix}.mlp.fc1"), width, mlp_dim, true));
    v.extend(linear_specs(&format!("{prefix}.mlp.fc2"), mlp_dim, width, true));
    v
}

/// Every backbone parameter, in construction order, without allocating.
pub fn backbone_param_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    let d = cfg.width;
    let mut v = linear_specs("backbone.embed", cfg.patch_dim(), d, true);
    if cfg.cls_token {
        v.push(ParamSpec::new("backbone.cls", &[1, d], Init::TruncNormal(0.02)));
    }
    v.push(ParamSpec::new(
        "backbone.pos",
        &[cfg.num_tokens(), d],
        Init::TruncNormal(0.02),
    ));
    for i in 1..=cfg.depth {
        v.extend(block_specs(&format!("backbone.block{i}"), d, cfg.mlp_dim));
    }
    v.extend(norm_specs("backbone.norm", d));
    if cfg.pool == Pooling::Map {
        v.push(ParamSpec::new("backbone.pool.probe", &[1, d], Init::TruncNormal(0.02)));
        for p in Projection::ALL {
            v.extend(linear_specs(&format!("backbone.pool.mhsa.{}", p.key()), d, d, true));
        }
        v.extend(norm_specs("backbone.pool.norm", d));
        v.extend(linear_specs("backbone.pool.mlp.fc1", d, cfg.mlp_dim, true));
        v.extend(linear_specs("backbone.pool.mlp.fc2", cfg.mlp_dim, d, true));
    }
    v
}

pub(crate) fn materialize_into(store: &mut ParamStore, specs: &[ParamSpec], trainable: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in specs {
        store.insert(s.name.clone(), s.materialize(&mut rng), trainable);
    }
}

/// A frozen-by-default backbone.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub store: ParamStore,
}

/// Builds and initialises a backbone; every parameter starts frozen.
pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<Backbone> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    materialize_into(&mut store, &backbone_param_specs(cfg), false, seed);
    Ok(Backbone {
        cfg: cfg.clone(),
        store,
    })
}

impl Backbone {
    pub fn param_count(&self) -> usize {
        self.store.total_count()
    }

    pub fn patchify(&self, tape: &mut Tape, input: &Tensor) -> Result<Var> {
        patchify(tape, &self.cfg, &self.store, input)
    }

    pub fn forward_with_taps(&self, tape: &mut Tape, tokens: Var, tap: TapKind) -> Result<BackboneOutputs> {
        encode(tape, &self.cfg, &self.store, tokens, tap, &NoHook)
    }
}

/// Splits `[frames×H×W×C]` into non-overlapping tubelets, one row per token
/// in `(t, y, x)` order with each row flattened as `(dt, dy, dx, c)`.
pub fn extract_patches(input: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let expected = cfg.input_shape();
    if input.shape() != expected {
        return Err(Error::Shape {
            op: "patchify",
            lhs: input.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let (p, tt, c, s) = (cfg.patch, cfg.tubelet_t, cfg.channels, cfg.image_size);
    let side = s / p;
    let data = input.data();
    let mut out = Vec::with_capacity(input.numel());
    for t in 0..cfg.n_temporal() {
        for gy in 0..side {
            for gx in 0..side {
                for dt in 0..tt {
                    let f = t * tt + dt;
                    for dy in 0..p {
                        let y = gy * p + dy;
                        let start = ((f * s + y) * s + gx * p) * c;
                        out.extend_from_slice(&data[start..start + p * c]);
                    }
                }
            }
        }
    }
    Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], out)
}

pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let h = tape.matmul(x, w)?;
    let bias = format!("{prefix}.bias");
    if store.contains(&bias) {
        let b = tape.param(store, &bias)?;
        tape.add_bias(h, b)
    } else {
        Ok(h)
    }
}

pub(crate) fn norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b)
}

/// Linear patch embedding, optional class token, learned positions → `[n×d]`.
pub fn patchify(tape: &mut Tape, cfg: &BackboneConfig, store: &ParamStore, input: &Tensor) -> Result<Var> {
    let patches = extract_patches(input, cfg)?;
    let x = tape.constant(patches)?;
    let mut h = linear(tape, store, "backbone.embed", x)?;
    if cfg.cls_token {
        let cls = tape.param(store, "backbone.cls")?;
        h = tape.concat_rows(cls, h)?;
    }
    let pos = tape.param(store, "backbone.pos")?;
    tape.add(h, pos)
}

pub(crate) struct BlockOut {
    pub out: Var,
    pub mhsa: Var,
    pub mlp: Var,
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
pub(crate) fn transformer_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    site: BlockSite,
    x: Var,
    hook: &dyn BlockHook,
) -> Result<BlockOut> {
    let h = norm(tape, store, &format!("{prefix}.norm1"), x)?;
    let mut qkv = [h; 3];
    for (slot, p) in qkv.iter_mut().zip([Projection::Q, Projection::K, Projection::V]) {
        let base = linear(tape, store, &format!("{prefix}.mhsa.{}", p.key()), h)?;
        *slot = hook.projection(tape, store, site, p, h, base)?;
    }
    let a = tape.attention(qkv[0], qkv[1], qkv[2], heads)?;
    let base = linear(tape, store, &format!("{prefix}.mhsa.out"), a)?;
    let mhsa = hook.projection(tape, store, site, Projection::Out, a, base)?;
    let x = tape.add(x, mhsa)?;
    let h = norm(tape, store, &format!("{prefix}.norm2"), x)?;
    let mlp = mlp_branch(tape, store, &format!("{prefix}.mlp"), h)?;
    let mlp = hook.mlp(tape, store, site, h, mlp)?;
    let out = tape.add(x, mlp)?;
    Ok(BlockOut { out, mhsa, mlp })
}

pub(crate) fn mlp_branch(tape: &mut Tape, store: &ParamStore, prefix: &str, h: Var) -> Result<Var> {
    let u = linear(tape, store, &format!("{prefix}.fc1"), h)?;
    let u = tape.gelu(u)?;
    linear(tape, store, &format!("{prefix}.fc2"), u)
}

/// Runs every encoder layer over `tokens`, collecting taps per `tap`.
pub fn encode(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    store: &ParamStore,
    tokens: Var,
    tap: TapKind,
    hook: &dyn BlockHook,
) -> Result<BackboneOutputs> {
    let expected = [cfg.num_tokens(), cfg.width];
    if tape.shape(tokens) != expected {
        return Err(Error::Shape {
            op: "forward_with_taps",
            lhs: tape.shape(tokens).to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let prev = tape.set_region(Region::Backbone);
    let mut x = tokens;
    let mut taps = Vec::with_capacity(tap.count(cfg.depth));
    for i in 1..=cfg.depth {
        let input = hook.block_input(tape, store, i, x)?;
        let b = transformer_block(
            tape,
            store,
            &format!("backbone.block{i}"),
            cfg.heads,
            BlockSite::Layer(i),
            input,
            hook,
        )?;
        match tap {
            TapKind::EncoderOutput => taps.push(b.out),
            TapKind::MhsaOutput => taps.push(b.mhsa),
            TapKind::MlpOutput => taps.push(b.mlp),
            TapKind::Both => taps.extend([b.mhsa, b.mlp]),
        }
        x = b.out;
    }
    tape.set_region(prev);
    Ok(BackboneOutputs {
        final_out: x,
        taps,
        tokens_in: tokens,
    })
}

/// Final norm and pooling of `[n×d]` features into a `[1×d]` row.
pub fn pool_features(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    store: &ParamStore,
    y: Var,
    hook: &dyn BlockHook,
) -> Result<Var> {
    let prev = tape.set_region(Region::Head);
    let z = norm(tape, store, "backbone.norm", y)?;
    let pooled = match cfg.pool {
        Pooling::Cls => tape.select_row(z, 0)?,
        Pooling::Mean => tape.mean_rows(z)?,
        Pooling::Map => map_pool(tape, cfg, store, z, hook)?,
    };
    tape.set_region(prev);
    Ok(pooled)
}

fn map_pool(tape: &mut Tape, cfg: &BackboneConfig, store: &ParamStore, z: Var, hook: &dyn BlockHook) -> Result<Var> {
    let probe = tape.param(store, "backbone.pool.probe")?;
    let site = BlockSite::Pool;
    let mut qkv = [z; 3];
    for (slot, (p, input)) in qkv
        .iter_mut()
        .zip([(Projection::Q, probe), (Projection::K, z), (Projection::V, z)])
    {
        let base = linear(tape, store, &format!("backbone.pool.mhsa.{}", p.key()), input)?;
        *slot = hook.projection(tape, store, site, p, input, base)?;
    }
    let a = tape.attention(qkv[0], qkv[1], qkv[2], cfg.heads)?;
    let base = linear(tape, store, "backbone.pool.mhsa.out", a)?;
    let o = hook.projection(tape, store, site, Projection::Out, a, base)?;
    let h = norm(tape, store, "backbone.pool.norm", o)?;
    let mlp = mlp_branch(tape, store, "backbone.pool.mlp", h)?;
    let mlp = hook.mlp(tape, store, site, h, mlp)?;
    tape.add(o, mlp)
}

/// Convenience: embed and encode a single input on a fresh tape.
pub fn forward_input(
    backbone: &Backbone,
    input: &Tensor,
    tap: TapKind,
    precision: Precision,
) -> Result<(Tape, BackboneOutputs)> {
    let mut tape = Tape::new(precision);
    let tokens = backbone.patchify(&mut tape, input)?;
    let outs = backbone.forward_with_taps(&mut tape, tokens, tap)?;
    Ok((tape, outs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(depth: usize) -> BackboneConfig {
        BackboneConfig {
            depth,
            width: 8,
            heads: 2,
            mlp_dim: 16,
            patch: 2,
            image_size: 4,
            ..toy()
        }
    }

    fn input(cfg: &BackboneConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&cfg.input_shape(), 1.0, &mut rng)
    }

    #[test]
    fn preset_parameter_totals() {
        let total = |name: &str| -> usize {
            backbone_param_specs(&preset(name).unwrap())
                .iter()
                .map(ParamSpec::numel)
                .sum()
        };
        let g = total("vit-g") as f64;
        assert!((g / 1.0e9 - 1.0).abs() < 0.10, "vit-g {g}");
        let b = total("vit-b") as f64;
        assert!((b / 86.0e6 - 1.0).abs() < 0.02, "vit-b {b}");
    }

    #[test]
    fn token_counts() {
        let g = preset("vit-g").unwrap();
        assert_eq!(g.num_tokens(), 256);
        assert_eq!(preset("vivit-g").unwrap().num_tokens(), 4096);
        assert_eq!(preset("vit-b").unwrap().num_tokens(), 197);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut cfg = tiny(0);
        assert!(cfg.validate().is_err());
        cfg.depth = 1;
        cfg.image_size = 5;
        assert!(cfg.validate().is_err());
        cfg.image_size = 4;
        cfg.frames = 3;
        cfg.tubelet_t = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patchify_token_count_matches_formula() {
        for name in ["toy", "toy-video"] {
            let cfg = preset(name).unwrap();
            let b = build_backbone(&cfg, 0).unwrap();
            let mut tape = Tape::default();
            let tokens = b.patchify(&mut tape, &input(&cfg, 1)).unwrap();
            assert_eq!(tape.shape(tokens), [cfg.num_tokens(), cfg.width]);
        }
    }

    #[test]
    fn extract_patches_layout() {
        let cfg = BackboneConfig {
            channels: 1,
            frames: 2,
            tubelet_t: 2,
            ..tiny(1)
        };
        let data: Vec<f64> = (0..32).map(f64::from).collect();
        let x = Tensor::new(&cfg.input_shape(), data).unwrap();
        let p = extract_patches(&x, &cfg).unwrap();
        assert_eq!(p.shape(), [4, 8]);
        // first tubelet: frame 0 rows 0-1 cols 0-1, then frame 1 same
        assert_eq!(&p.data()[..8], &[0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
    }

    #[test]
    fn tap_shapes_and_ordering() {
        let cfg = tiny(2);
        let b = build_backbone(&cfg, 3).unwrap();
        let (tape, outs) = forward_input(&b, &input(&cfg, 4), TapKind::EncoderOutput, Precision::F64).unwrap();
        assert_eq!(outs.taps.len(), 2);
        for t in &outs.taps {
            assert_eq!(tape.shape(*t), [cfg.num_tokens(), cfg.width]);
        }
        assert_eq!(tape.value(*outs.taps.last().unwrap()), tape.value(outs.final_out));

        let (tape, both) = forward_input(&b, &input(&cfg, 4), TapKind::Both, Precision::F64).unwrap();
        assert_eq!(both.taps.len(), 4);
        let (_, mhsa) = forward_input(&b, &input(&cfg, 4), TapKind::MhsaOutput, Precision::F64).unwrap();
        let (_, mlp) = forward_input(&b, &input(&cfg, 4), TapKind::MlpOutput, Precision::F64).unwrap();
        let _ = (mhsa, mlp);
        // mhsa1, mlp1, mhsa2, mlp2: block output = input + mhsa + mlp
        let x0 = tape.value(both.tokens_in);
        let rebuilt = x0
            .add(tape.value(both.taps[0]))
            .unwrap()
            .add(tape.value(both.taps[1]))
            .unwrap();
        let (t2, enc) = forward_input(&b, &input(&cfg, 4), TapKind::EncoderOutput, Precision::F64).unwrap();
        assert!(rebuilt.max_abs_diff(t2.value(enc.taps[0])) < 1e-12);
    }

    #[test]
    fn frozen_backbone_has_no_backward_cost() {
        let cfg = tiny(2);
        let b = build_backbone(&cfg, 5).unwrap();
        let (mut tape, outs) = forward_input(&b, &input(&cfg, 6), TapKind::EncoderOutput, Precision::F32).unwrap();
        let loss = tape.sum(outs.final_out).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.is_empty());
        assert_eq!(tape.tape_stats().total_bwd_macs, 0);
    }

    #[test]
    fn registry_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arch.json");
        let mut custom = toy();
        custom.depth = 2;
        std::fs::write(
            &path,
            serde_json::to_string(&BTreeMap::from([("mini", custom.clone())])).unwrap(),
        )
        .unwrap();
        let reg = ArchRegistry::load(&path).unwrap();
        assert_eq!(reg.get("mini").unwrap(), custom);
        assert_eq!(reg.get("vit-g").unwrap(), preset("vit-g").unwrap());
    }
}
