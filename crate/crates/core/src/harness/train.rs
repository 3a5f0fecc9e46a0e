use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::load_backbone;
use super::data::{gen_synthetic, load_dataset, Dataset, SyntheticTaskSpec};
use super::report::RunReport;
use super::schedule::LrSchedule;
use crate::autodiff::{Tape, TapeStats};
use crate::backbone::{build_backbone, ArchRegistry, Backbone};
use crate::baselines::AdaptationMethod;
use crate::costmodel::{cost_report, ledger_stats, OptimizerSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticTaskSpec),
    Dir { train: PathBuf, test: PathBuf },
}

/// A full experiment description. In JSON the method sits at top level as
/// `"method"` plus `"params"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_arch")]
    pub arch: String,
    /// Optional JSON registry extending the built-in architecture presets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_registry: Option<PathBuf>,
    #[serde(flatten)]
    pub method: AdaptationMethod,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    /// L2 penalty coefficient added to the gradient of every updated parameter.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    /// Checkpoint whose backbone weights are adapted; a fresh random
    /// backbone is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
}

fn default_arch() -> String {
    "toy".into()
}

fn default_momentum() -> f64 {
    0.9
}

fn default_lr() -> f64 {
    0.05
}

fn default_warmup() -> usize {
    50
}

fn default_steps() -> usize {
    2000
}

fn default_batch() -> usize {
    32
}

impl TrainConfig {
    pub fn new(method: AdaptationMethod, data: DataSource) -> Self {
        Self {
            arch: default_arch(),
            arch_registry: None,
            method,
            momentum: default_momentum(),
            base_lr: default_lr(),
            weight_decay: 0.0,
            warmup_steps: default_warmup(),
            steps: default_steps(),
            batch_size: default_batch(),
            seed: 0,
            data,
            backbone: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.steps == 0 || self.warmup_steps >= self.steps {
            return Err(Error::config(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("momentum in [0, 1) and a positive finite base_lr required"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }

    pub fn registry(&self) -> Result<ArchRegistry> {
        match &self.arch_registry {
            Some(p) => ArchRegistry::load(p),
            None => Ok(ArchRegistry::builtin()),
        }
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synthetic(spec) => {
                let d = gen_synthetic(spec)?;
                Ok((d.train, d.test))
            }
            DataSource::Dir { train, test } => Ok((load_dataset(train)?, load_dataset(test)?)),
        }
    }

    pub fn load_backbone(&self) -> Result<Backbone> {
        let arch = self.registry()?.get(&self.arch)?;
        match &self.backbone {
            Some(dir) => {
                let b = load_backbone(dir)?;
                if b.cfg != arch {
                    return Err(Error::config(format!(
                        "checkpoint backbone does not match architecture `{}`",
                        self.arch
                    )));
                }
                Ok(b)
            }
            None => build_backbone(&arch, self.seed),
        }
    }
}

/// Top-1 predictions of `model` on every input.
pub fn predict_all(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    data.inputs
        .iter()
        .map(|x| {
            let logits = model.predict(x, Precision::F32)?;
            Ok(argmax(&logits))
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy as a fraction.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let preds = predict_all(model, data)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub stats: TapeStats,
    pub seconds: f64,
}

/// One SGD-momentum step on a batch; `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
pub fn sgd_step(
    model: &mut Model,
    batch: &[(&crate::tensor::Tensor, usize)],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut BTreeMap<String, Vec<f64>>,
    step: usize,
) -> Result<StepOutcome> {
    let start = Instant::now();
    let diverged = |loss: f64| Error::Diverged { step, lr, loss };
    let mut tape = Tape::new(Precision::F32);
    let mut total = None;
    for &(x, y) in batch {
        let l = model.loss(&mut tape, x, y).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(f64::NAN),
            other => other,
        })?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or(Error::Empty("batch"))?;
    let mean = tape
        .scale_const(total, 1.0 / batch.len() as f64)
        .map_err(|_| diverged(f64::NAN))?;
    let loss = tape.value(mean).item();
    if !loss.is_finite() {
        return Err(diverged(loss));
    }
    let grads = tape.backward(mean).map_err(|e| match e {
        Error::NonFinite { .. } => diverged(loss),
        other => other,
    })?;
    for (name, g) in grads {
        let p = model.store.get_mut(&name)?;
        let v = velocity.entry(name).or_insert_with(|| vec![0.0; g.numel()]);
        for ((w, vi), gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi + weight_decay * *w;
            *w -= lr * *vi;
        }
    }
    Ok(StepOutcome {
        loss,
        stats: tape.tape_stats(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains `model` in place and reports accuracy, costs and timings.
pub fn train(cfg: &TrainConfig, model: &mut Model, train_set: &Dataset, test_set: &Dataset) -> Result<RunReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if train_set.num_classes != model.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model {}",
            train_set.num_classes, model.num_classes
        )));
    }
    let initial_accuracy = evaluate(model, test_set)?;
    let sched = cfg.schedule();
    let mut sampler = Sampler::new(train_set.len(), cfg.seed);
    let mut velocity = BTreeMap::new();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut seconds = Vec::with_capacity(cfg.steps);
    let mut measured = TapeStats::default();
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.next()).collect();
        let batch: Vec<_> = idx.iter().map(|&i| (&train_set.inputs[i], train_set.labels[i])).collect();
        let out = sgd_step(model, &batch, sched.lr(step), cfg.momentum, cfg.weight_decay, &mut velocity, step)?;
        loss_curve.push(out.loss);
        seconds.push(out.seconds);
        measured = out.stats;
    }
    let final_accuracy = evaluate(model, test_set)?;
    let analytic = ledger_stats(&model.arch, &model.method, model.num_classes, Precision::F32.bytes() as u64)?;
    let cost = cost_report(
        &cfg.arch,
        &model.arch,
        &model.method,
        OptimizerSpec::sgd_momentum(),
        model.num_classes,
    )?;
    Ok(RunReport {
        arch: cfg.arch.clone(),
        method: model.method.name().to_string(),
        seed: cfg.seed,
        learned_params: model.learned_params() as u64,
        initial_accuracy,
        final_accuracy,
        loss_curve,
        cost,
        measured_bwd_macs_per_example: measured.total_bwd_macs / cfg.batch_size as u64,
        analytic_bwd_macs_per_example: analytic.total_bwd_macs,
        measured,
        wall_clock_ms_per_step: median(&seconds) * 1e3,
        config: cfg.clone(),
    })
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

/// Builds the model described by `cfg`, trains it, and returns both.
pub fn run(cfg: &TrainConfig) -> Result<(Model, RunReport)> {
    cfg.validate()?;
    let backbone = cfg.load_backbone()?;
    let (train_set, test_set) = cfg.load_data()?;
    let mut model = Model::new(&backbone, cfg.method.clone(), train_set.num_classes, cfg.seed)?;
    let report = train(cfg, &mut model, &train_set, &test_set)?;
    Ok((model, report))
}

/// Trains a full backbone from scratch on a source task, standing in for
/// large-scale pretraining.
pub fn pretrain(cfg: &TrainConfig) -> Result<(Model, RunReport)> {
    if cfg.method != AdaptationMethod::FullFinetune {
        return Err(Error::config("pretraining trains the whole backbone; use method full_finetune"));
    }
    run(cfg)
}
