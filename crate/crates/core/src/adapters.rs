//! Low-rank side adaptation: a parallel network of low-rank adaptor
//! functions that refines frozen backbone activations.
//!
//! Side layer `i` computes `y_i = g_i(b_{t_i} + y_{i-1}) + y_{i-1}` where
//! `g(x) = α · W_u · GeLU(W_d · x)` acts along either the channel axis or
//! the token axis (spatial plus temporal for video). `y_0` is the backbone
//! output, and `W_u` starts at zero so the network begins as the identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Region, Tape, Var};
use crate::backbone::{
    block_specs, linear, linear_specs, transformer_block, BackboneConfig, BackboneOutputs,
    BlockSite, Init, NoHook, ParamSpec, TapKind,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Channel,
    Token,
    Spatial,
    Temporal,
}

/// Which side-layer ordinals mix tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixerParity {
    /// Odd ordinals mix tokens, even ordinals mix channels.
    #[default]
    OddToken,
    /// Even ordinals mix tokens; the first side layer mixes channels.
    EvenToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SideInput {
    #[default]
    BackboneOutput,
    BackboneInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    LowRankMixer,
    LowRankMlp,
    Transformer,
}

/// Number of backbone taps feeding the side network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum KLayers {
    #[default]
    All,
    Count(usize),
}

impl Serialize for KLayers {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KLayers::All => s.serialize_str("all"),
            KLayers::Count(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KLayers {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) => Ok(KLayers::Count(k)),
            Raw::Str(s) if s == "all" => Ok(KLayers::All),
            Raw::Str(s) => s
                .parse()
                .map(KLayers::Count)
                .map_err(|_| serde::de::Error::custom(format!("k_layers: expected \"all\" or an integer, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LosaConfig {
    pub rank: usize,
    #[serde(default)]
    pub k_layers: KLayers,
    #[serde(default)]
    pub tap: TapKind,
    #[serde(default)]
    pub side_input: SideInput,
    #[serde(default = "default_true")]
    pub use_biases: bool,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub parity: MixerParity,
    /// Attention heads of the `transformer` variant's width-`rank` block.
    #[serde(default = "default_heads")]
    pub transformer_heads: usize,
}

fn default_true() -> bool {
    true
}

fn default_heads() -> usize {
    4
}

impl LosaConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            k_layers: KLayers::All,
            tap: TapKind::EncoderOutput,
            side_input: SideInput::BackboneOutput,
            use_biases: true,
            variant: Variant::LowRankMixer,
            parity: MixerParity::OddToken,
            transformer_heads: default_heads(),
        }
    }

    pub fn with_layers(mut self, k: usize) -> Self {
        self.k_layers = KLayers::Count(k);
        self
    }

    /// Number of side layers for a backbone of `depth` layers.
    pub fn num_layers(&self, depth: usize) -> Result<usize> {
        let total = self.tap.count(depth);
        match self.k_layers {
            KLayers::All => Ok(total),
            KLayers::Count(k) if k <= total => Ok(k),
            KLayers::Count(k) => Err(Error::config(format!(
                "k_layers {k} exceeds the {total} available taps"
            ))),
        }
    }

    pub fn validate(&self, bcfg: &BackboneConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("LoSA rank must be at least 1"));
        }
        self.num_layers(bcfg.depth)?;
        if self.variant == Variant::Transformer
            && (self.transformer_heads == 0 || self.rank % self.transformer_heads != 0)
        {
            return Err(Error::config(format!(
                "transformer variant: rank {} not divisible by {} heads",
                self.rank, self.transformer_heads
            )));
        }
        Ok(())
    }
}

/// Token layout of the features a side layer operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGeometry {
    pub tokens: usize,
    pub n_spatial: usize,
    pub n_temporal: usize,
    pub width: usize,
}

impl TokenGeometry {
    pub fn of(cfg: &BackboneConfig) -> Self {
        Self {
            tokens: cfg.num_tokens(),
            n_spatial: cfg.n_spatial(),
            n_temporal: cfg.n_temporal(),
            width: cfg.width,
        }
    }

    pub fn axis_len(&self, axis: Axis) -> usize {
        match axis {
            Axis::Channel => self.width,
            Axis::Token => self.tokens,
            Axis::Spatial => self.n_spatial,
            Axis::Temporal => self.n_temporal,
        }
    }
}

/// One adaptor function `g`, with weights stored under `prefix`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptorLayer {
    pub prefix: String,
    pub axis: Axis,
    pub rank: usize,
    pub use_biases: bool,
    pub geometry: TokenGeometry,
}

impl AdaptorLayer {
    pub fn axis_len(&self) -> usize {
        self.geometry.axis_len(self.axis)
    }

    /// `2·r·axis_len + 1`, plus `r + axis_len` with biases.
    pub fn param_count(&self) -> usize {
        let (r, a) = (self.rank, self.axis_len());
        2 * r * a + 1 + if self.use_biases { r + a } else { 0 }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (r, a, p) = (self.rank, self.axis_len(), &self.prefix);
        let mut v = vec![
            ParamSpec::new(format!("{p}.down.weight"), &[a, r], Init::TruncNormal(1.0 / (a as f64).sqrt())),
            ParamSpec::new(format!("{p}.up.weight"), &[r, a], Init::Zeros),
            ParamSpec::new(format!("{p}.alpha"), &[1], Init::Ones),
        ];
        if self.use_biases {
            v.push(ParamSpec::new(format!("{p}.down.bias"), &[r], Init::Zeros));
            v.push(ParamSpec::new(format!("{p}.up.bias"), &[a], Init::Zeros));
        }
        v
    }
}

/// One side-network stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SideLayer {
    Adaptor(AdaptorLayer),
    /// Token mixing on video features, factorised over space and time.
    Video {
        spatial: AdaptorLayer,
        temporal: AdaptorLayer,
    },
    /// Down-projection, width-`rank` transformer block, up-projection.
    Transformer {
        prefix: String,
        rank: usize,
        heads: usize,
        width: usize,
    },
}

impl SideLayer {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            SideLayer::Adaptor(a) => a.param_specs(),
            SideLayer::Video { spatial, temporal } => {
                let mut v = spatial.param_specs();
                v.extend(temporal.param_specs());
                v
            }
            SideLayer::Transformer {
                prefix,
                rank,
                width,
                ..
            } => {
                let mut v = linear_specs(&format!("{prefix}.down"), *width, *rank, true);
                v.extend(block_specs(&format!("{prefix}.block"), *rank, 4 * rank));
                v.push(ParamSpec::new(format!("{prefix}.up.weight"), &[*rank, *width], Init::Zeros));
                v.push(ParamSpec::new(format!("{prefix}.up.bias"), &[*width], Init::Zeros));
                v
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            SideLayer::Adaptor(a) => adaptor_apply(tape, store, a, x),
            SideLayer::Video { spatial, temporal } => video_token_adaptor(tape, store, spatial, temporal, x),
            SideLayer::Transformer { prefix, heads, .. } => {
                let h = linear(tape, store, &format!("{prefix}.down"), x)?;
                let b = transformer_block(
                    tape,
                    store,
                    &format!("{prefix}.block"),
                    *heads,
                    BlockSite::Layer(0),
                    h,
                    &NoHook,
                )?;
                linear(tape, store, &format!("{prefix}.up"), b.out)
            }
        }
    }
}

/// The full side network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideNetwork {
    pub cfg: LosaConfig,
    pub layers: Vec<SideLayer>,
    /// 1-based index into the backbone tap list for each layer.
    pub tap_indices: Vec<usize>,
}

impl SideNetwork {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers.iter().flat_map(SideLayer::param_specs).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(SideLayer::param_count).sum()
    }
}

/// Mixing axis of side layer `i` (1-based). Under the default parity odd
/// ordinals mix tokens and even ordinals mix channels.
pub fn mixer_axis_for(i: usize, parity: MixerParity) -> Axis {
    let odd = i % 2 != 0;
    match (parity, odd) {
        (MixerParity::OddToken, true) | (MixerParity::EvenToken, false) => Axis::Token,
        _ => Axis::Channel,
    }
}

/// `k` evenly spaced layer indices in `1..=total`, always ending at `total`.
pub fn select_tap_layers(total: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > total {
        return Err(Error::config(format!(
            "cannot select {k} taps from {total} layers"
        )));
    }
    Ok((1..=k).map(|j| (2 * j * total + k) / (2 * k)).collect())
}

/// Builds the side network and its freshly initialised, trainable parameters.
pub fn init_losa(cfg: &LosaConfig, bcfg: &BackboneConfig, seed: u64) -> Result<(SideNetwork, ParamStore)> {
    cfg.validate(bcfg)?;
    let side = build_side_network(cfg, bcfg)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in side.param_specs() {
        store.insert(s.name.clone(), s.materialize(&mut rng), true);
    }
    Ok((side, store))
}

/// Layer schedule without any parameters.
pub fn build_side_network(cfg: &LosaConfig, bcfg: &BackboneConfig) -> Result<SideNetwork> {
    cfg.validate(bcfg)?;
    let geometry = TokenGeometry::of(bcfg);
    let k = cfg.num_layers(bcfg.depth)?;
    let tap_indices = if k == 0 {
        Vec::new()
    } else {
        select_tap_layers(cfg.tap.count(bcfg.depth), k)?
    };
    let adaptor = |prefix: String, axis| AdaptorLayer {
        prefix,
        axis,
        rank: cfg.rank,
        use_biases: cfg.use_biases,
        geometry,
    };
    let mut layers = Vec::with_capacity(k);
    for i in 1..=k {
        let prefix = format!("side.layer{i}");
        let layer = match cfg.variant {
            Variant::Transformer => SideLayer::Transformer {
                prefix,
                rank: cfg.rank,
                heads: cfg.transformer_heads,
                width: bcfg.width,
            },
            Variant::LowRankMlp => SideLayer::Adaptor(adaptor(prefix, Axis::Channel)),
            Variant::LowRankMixer => match mixer_axis_for(i, cfg.parity) {
                Axis::Token if bcfg.is_video() => {
                    if bcfg.cls_token {
                        return Err(Error::config(
                            "video token mixing needs n = n_t·n_s tokens; disable cls_token",
                        ));
                    }
                    SideLayer::Video {
                        spatial: adaptor(format!("{prefix}.spatial"), Axis::Spatial),
                        temporal: adaptor(format!("{prefix}.temporal"), Axis::Temporal),
                    }
                }
                axis => SideLayer::Adaptor(adaptor(prefix, axis)),
            },
        };
        layers.push(layer);
    }
    Ok(SideNetwork {
        cfg: cfg.clone(),
        layers,
        tap_indices,
    })
}

/// `α · (W_u · GeLU(W_d · x + b_d) + b_u)` along the layer's axis; the
/// output has the shape of `x`.
pub fn adaptor_apply(tape: &mut Tape, store: &ParamStore, layer: &AdaptorLayer, x: Var) -> Result<Var> {
    let g = layer.geometry;
    if tape.shape(x) != [g.tokens, g.width] {
        return Err(Error::Shape {
            op: "adaptor_apply",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![g.tokens, g.width],
        });
    }
    // (dims, perm) that bring the mixed axis last; the inverse restores [n×d]
    let (forward, backward) = match layer.axis {
        Axis::Channel => (None, None),
        Axis::Token => (
            Some(([1, g.tokens, g.width], [0, 2, 1])),
            Some(([1, g.width, g.tokens], [0, 2, 1])),
        ),
        Axis::Spatial | Axis::Temporal if g.n_spatial * g.n_temporal != g.tokens => {
            return Err(Error::Shape {
                op: "adaptor_apply",
                lhs: vec![g.tokens],
                rhs: vec![g.n_temporal, g.n_spatial],
            })
        }
        Axis::Spatial => (
            Some(([g.n_temporal, g.n_spatial, g.width], [0, 2, 1])),
            Some(([g.n_temporal, g.width, g.n_spatial], [0, 2, 1])),
        ),
        Axis::Temporal => (
            Some(([g.n_temporal, g.n_spatial, g.width], [1, 2, 0])),
            Some(([g.n_spatial, g.width, g.n_temporal], [2, 0, 1])),
        ),
    };
    let h = match forward {
        Some((dims, perm)) => tape.permute3(x, dims, perm)?,
        None => x,
    };
    let p = &layer.prefix;
    let h = linear(tape, store, &format!("{p}.down"), h)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, store, &format!("{p}.up"), h)?;
    let h = match backward {
        Some((dims, perm)) => tape.permute3(h, dims, perm)?,
        None => h,
    };
    let alpha = tape.param(store, &format!("{p}.alpha"))?;
    tape.scale(h, alpha)
}

/// `g_spatial(x) + g_temporal(x)` for `x` laid out as `[n_t·n_s × d]`.
pub fn video_token_adaptor(
    tape: &mut Tape,
    store: &ParamStore,
    spatial: &AdaptorLayer,
    temporal: &AdaptorLayer,
    x: Var,
) -> Result<Var> {
    if spatial.axis != Axis::Spatial || temporal.axis != Axis::Temporal {
        return Err(Error::config("video token adaptor needs spatial and temporal layers"));
    }
    let s = adaptor_apply(tape, store, spatial, x)?;
    let t = adaptor_apply(tape, store, temporal, x)?;
    tape.add(s, t)
}

/// Runs the side recurrence over the backbone taps and returns `y_K`.
pub fn side_forward(tape: &mut Tape, store: &ParamStore, side: &SideNetwork, outs: &BackboneOutputs) -> Result<Var> {
    let prev = tape.set_region(Region::Side);
    let mut y = match side.cfg.side_input {
        SideInput::BackboneOutput => outs.final_out,
        SideInput::BackboneInput => outs.tokens_in,
    };
    for (layer, &t) in side.layers.iter().zip(&side.tap_indices) {
        let b = *outs
            .taps
            .get(t - 1)
            .ok_or_else(|| Error::config(format!("tap index {t} out of range ({} taps)", outs.taps.len())))?;
        if tape.shape(b) != tape.shape(y) {
            return Err(Error::Shape {
                op: "side_forward",
                lhs: tape.shape(b).to_vec(),
                rhs: tape.shape(y).to_vec(),
            });
        }
        let h = tape.add(b, y)?;
        let g = layer.apply(tape, store, h)?;
        y = tape.add(g, y)?;
    }
    tape.set_region(prev);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::preset;

    #[test]
    fn mixer_schedule_follows_odd_token_rule() {
        let axes: Vec<Axis> = (1..=6).map(|i| mixer_axis_for(i, MixerParity::OddToken)).collect();
        assert_eq!(
            axes,
            [Axis::Token, Axis::Channel, Axis::Token, Axis::Channel, Axis::Token, Axis::Channel]
        );
        assert_eq!(mixer_axis_for(1, MixerParity::EvenToken), Axis::Channel);
        assert_eq!(mixer_axis_for(2, MixerParity::EvenToken), Axis::Token);
    }

    #[test]
    fn tap_selection() {
        assert_eq!(select_tap_layers(40, 1).unwrap(), [40]);
        assert_eq!(select_tap_layers(40, 40).unwrap(), (1..=40).collect::<Vec<_>>());
        assert_eq!(select_tap_layers(40, 8).unwrap(), [5, 10, 15, 20, 25, 30, 35, 40]);
        assert!(select_tap_layers(40, 0).is_err());
        assert!(select_tap_layers(40, 41).is_err());
    }

    #[test]
    fn vit_g_side_network_count() {
        let g = preset("vit-g").unwrap();
        let side = build_side_network(&LosaConfig::new(64), &g).unwrap();
        // 20·(2·64·1408 + 1 + 64 + 1408) + 20·(2·64·256 + 1 + 64 + 256)
        assert_eq!(side.param_count(), 4_295_720);
        assert_eq!(side.layers.len(), 40);
    }

    #[test]
    fn vit_b_side_network_counts() {
        let b = preset("vit-b").unwrap();
        let count = |r| build_side_network(&LosaConfig::new(r), &b).unwrap().param_count();
        assert_eq!(count(16), 191_274);
        assert_eq!(count(8), 98_538);
        assert_eq!(count(4), 52_170);
    }

    #[test]
    fn adaptor_formula_without_biases() {
        let g = preset("vit-g").unwrap();
        let mut cfg = LosaConfig::new(64).with_layers(1);
        cfg.use_biases = false;
        cfg.parity = MixerParity::EvenToken;
        let side = build_side_network(&cfg, &g).unwrap();
        assert_eq!(side.param_count(), 2 * 64 * 1408 + 1);
    }

    #[test]
    fn k_layers_json_forms() {
        let all: LosaConfig = serde_json::from_str(r#"{"rank": 4, "k_layers": "all"}"#).unwrap();
        assert_eq!(all.k_layers, KLayers::All);
        let some: LosaConfig = serde_json::from_str(r#"{"rank": 4, "k_layers": 3}"#).unwrap();
        assert_eq!(some.k_layers, KLayers::Count(3));
        let back: LosaConfig = serde_json::from_str(&serde_json::to_string(&some).unwrap()).unwrap();
        assert_eq!(back, some);
    }

    #[test]
    fn video_token_layers_split_space_and_time() {
        let v = preset("vivit-g").unwrap();
        let side = build_side_network(&LosaConfig::new(64).with_layers(2), &v).unwrap();
        assert!(matches!(side.layers[0], SideLayer::Video { .. }));
        assert!(matches!(side.layers[1], SideLayer::Adaptor(AdaptorLayer { axis: Axis::Channel, .. })));
        let expected = (2 * 64 * 256 + 1 + 64 + 256) + (2 * 64 * 16 + 1 + 64 + 16) + (2 * 64 * 1408 + 1 + 64 + 1408);
        assert_eq!(side.param_count(), expected);
    }

    #[test]
    fn video_with_cls_token_is_not_factorable() {
        let mut v = preset("toy-video").unwrap();
        v.cls_token = true;
        assert!(build_side_network(&LosaConfig::new(4), &v).is_err());
    }
}
