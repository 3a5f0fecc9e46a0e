#![allow(dead_code)]

use losa_core::autodiff::{ParamStore, Tape, Var};
use losa_core::backbone::{toy, BackboneConfig};
use losa_core::{Precision, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Smallest backbone that still has heads, an MLP and more than one token.
pub fn tiny(depth: usize) -> BackboneConfig {
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

pub fn inputs(cfg: &BackboneConfig, count: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| Tensor::randn(&cfg.input_shape(), 1.0, &mut r))
        .collect()
}

/// Reduces any matrix to a scalar through fixed random row and column
/// weights, `Σᵢⱼ uᵢ yᵢⱼ wⱼ`, so every output element reaches the loss.
pub fn contract(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let (m, n) = (shape[0], shape[1]);
    let mut r = rng(seed ^ 0x5eed);
    let w: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let u: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(&[n, 1], w)?)?;
    let u = tape.constant(Tensor::new(&[1, m], u)?)?;
    let col = tape.matmul(y, w)?;
    tape.matmul(u, col)
}

/// Central-difference check of every trainable parameter in `store` against
/// the tape gradient of `f`. Returns the worst relative error, measured per
/// parameter tensor as `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 1e-8)`.
pub fn gradcheck<F>(store: &ParamStore, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let loss = f(&mut tape, store).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |s: &ParamStore| {
        let mut t = Tape::new(Precision::F64);
        let l = f(&mut t, s).unwrap();
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for name in store.trainable_names() {
        let numel = store.value(&name).unwrap().numel();
        let mut numeric = vec![0.0; numel];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.value(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().value.data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe);
            probe.get_mut(&name).unwrap().value.data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe);
            probe.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let analytic = grads
            .get(&name)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    worst
}

/// Reference Pareto set: indices no other point dominates.
pub fn brute_pareto(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            let (ci, ai) = points[i];
            !points
                .iter()
                .any(|&(c, a)| c <= ci && a >= ai && (c < ci || a > ai))
        })
        .collect()
}

pub type Loss = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

fn store_of(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, (name, shape)) in entries.iter().enumerate() {
        s.insert(*name, randn(shape, seed * 31 + i as u64), true);
    }
    s
}

/// Every tape primitive wrapped into a scalar loss over fresh random
/// parameters. Frozen inputs are mixed in where the op has several operands.
pub fn primitive_cases(seed: u64) -> Vec<(&'static str, ParamStore, Loss)> {
    let p = |t: &mut Tape, s: &ParamStore, n: &str| t.param(s, n);
    let mut cases: Vec<(&'static str, ParamStore, Loss)> = Vec::new();
    cases.push((
        "matmul",
        store_of(&[("a", &[3, 4]), ("b", &[4, 2])], seed),
        Box::new(move |t, s| {
            let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
            let y = t.matmul(a, b)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "add",
        store_of(&[("a", &[3, 4]), ("b", &[3, 4])], seed),
        Box::new(move |t, s| {
            let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
            let y = t.add(a, b)?;
            let y = t.gelu(y)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "add_bias",
        store_of(&[("x", &[3, 4]), ("b", &[4])], seed),
        Box::new(move |t, s| {
            let (x, b) = (p(t, s, "x")?, p(t, s, "b")?);
            let y = t.add_bias(x, b)?;
            let y = t.gelu(y)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "scale",
        store_of(&[("x", &[3, 4]), ("alpha", &[1])], seed),
        Box::new(move |t, s| {
            let (x, a) = (p(t, s, "x")?, p(t, s, "alpha")?);
            let y = t.scale(x, a)?;
            let y = t.gelu(y)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "scale_const",
        store_of(&[("x", &[3, 4])], seed),
        Box::new(move |t, s| {
            let x = p(t, s, "x")?;
            let y = t.scale_const(x, -1.7)?;
            let y = t.gelu(y)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "gelu",
        store_of(&[("x", &[3, 5])], seed),
        Box::new(move |t, s| {
            let x = p(t, s, "x")?;
            let y = t.gelu(x)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "layer_norm",
        store_of(&[("x", &[3, 6]), ("g", &[6]), ("b", &[6])], seed),
        Box::new(move |t, s| {
            let (x, g, b) = (p(t, s, "x")?, p(t, s, "g")?, p(t, s, "b")?);
            let y = t.layer_norm(x, g, b)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "attention",
        store_of(&[("q", &[2, 4]), ("k", &[5, 4]), ("v", &[5, 4])], seed),
        Box::new(move |t, s| {
            let (q, k, v) = (p(t, s, "q")?, p(t, s, "k")?, p(t, s, "v")?);
            let y = t.attention(q, k, v, 2)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "mean_rows",
        store_of(&[("x", &[4, 3])], seed),
        Box::new(move |t, s| {
            let x = p(t, s, "x")?;
            let x = t.gelu(x)?;
            let y = t.mean_rows(x)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "select_row",
        store_of(&[("x", &[4, 3])], seed),
        Box::new(move |t, s| {
            let x = p(t, s, "x")?;
            let x = t.gelu(x)?;
            let y = t.select_row(x, 2)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "permute3",
        store_of(&[("x", &[6, 4])], seed),
        Box::new(move |t, s| {
            let x = p(t, s, "x")?;
            let y = t.permute3(x, [2, 3, 4], [2, 0, 1])?;
            let y = t.gelu(y)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "transpose",
        store_of(&[("x", &[3, 5])], seed),
        Box::new(move |t, s| {
            let x = p(t, s, "x")?;
            let y = t.transpose(x)?;
            let y = t.gelu(y)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "concat_rows",
        store_of(&[("a", &[2, 3]), ("b", &[3, 3])], seed),
        Box::new(move |t, s| {
            let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
            let y = t.concat_rows(a, b)?;
            let y = t.gelu(y)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "slice_rows",
        store_of(&[("x", &[5, 3])], seed),
        Box::new(move |t, s| {
            let x = p(t, s, "x")?;
            let x = t.gelu(x)?;
            let y = t.slice_rows(x, 1, 3)?;
            contract(t, y, seed)
        }),
    ));
    cases.push((
        "sum",
        store_of(&[("x", &[3, 3])], seed),
        Box::new(move |t, s| {
            let x = p(t, s, "x")?;
            let y = t.gelu(x)?;
            t.sum(y)
        }),
    ));
    cases.push((
        "cross_entropy",
        store_of(&[("x", &[1, 5])], seed),
        Box::new(move |t, s| {
            let x = p(t, s, "x")?;
            t.cross_entropy(x, (seed % 5) as usize)
        }),
    ));
    cases
}

/// Overwrites every trainable parameter with random values so zero-initialised
/// projections do not hide gradient paths.
pub fn randomize_trainable(store: &mut ParamStore, std: f64, seed: u64) {
    let mut r = rng(seed);
    for p in store.iter_mut().filter(|p| p.trainable) {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::randn(&shape, std, &mut r);
    }
}
