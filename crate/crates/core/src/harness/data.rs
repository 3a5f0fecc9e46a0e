//! Synthetic classification tasks built from planted oriented gratings.
//!
//! The `source` family labels an image by which of `K` orientation bins a
//! grating falls in. The `shifted` family moves every bin boundary by half a
//! bin, so each target boundary lies where source-trained features are most
//! invariant, and perturbs frequency, contrast and noise by `shift`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::blob::{read_tensor, write_atomic, write_tensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Source,
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub image_size: usize,
    #[serde(default = "one")]
    pub frames: usize,
    #[serde(default = "three")]
    pub channels: usize,
    pub generator: Generator,
    /// Strength of the statistics perturbation of the shifted family.
    #[serde(default = "one_f")]
    pub shift: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn one_f() -> f64 {
    1.0
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.image_size < 4 || self.frames == 0 || self.channels == 0 {
            return Err(Error::config("image_size ≥ 4, frames ≥ 1 and channels ≥ 1 required"));
        }
        Ok(())
    }
}

/// Inputs shaped `[frames × H × W × C]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticData> {
    spec.validate()?;
    Ok(SyntheticData {
        train: gen_split(spec, spec.train_samples, 0),
        test: gen_split(spec, spec.test_samples, 1),
    })
}

fn gen_split(spec: &SyntheticTaskSpec, count: usize, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut labels: Vec<usize> = (0..count).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let inputs = labels.iter().map(|&l| render(spec, l, &mut rng)).collect();
    Dataset {
        inputs,
        labels,
        num_classes: spec.num_classes,
    }
}

struct Grating {
    theta: f64,
    /// Cycles per pixel.
    freq: f64,
    phase: f64,
    drift: f64,
    contrast: f64,
    color: Vec<f64>,
    top: usize,
    left: usize,
    size: usize,
}

fn render(spec: &SyntheticTaskSpec, label: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (s, k, c) = (spec.image_size, spec.num_classes, spec.channels);
    let color: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.0)).collect();
    let phase = rng.gen_range(0.0..2.0 * PI);
    let drift = if rng.gen_bool(0.5) { PI / 4.0 } else { -PI / 4.0 };
    let g = match spec.generator {
        Generator::Source => {
            let size = s / 2;
            let jitter = 0.25 * PI / k as f64;
            Grating {
                theta: PI * label as f64 / k as f64 + rng.gen_range(-jitter..=jitter),
                freq: 0.25,
                phase,
                drift,
                contrast: 1.0,
                color,
                top: rng.gen_range(0..=s - size),
                left: rng.gen_range(0..=s - size),
                size,
            }
        }
        Generator::Shifted => {
            let size = s / 2;
            let jitter = 0.25 * PI / k as f64;
            Grating {
                theta: PI * (label as f64 + 0.5) / k as f64 + rng.gen_range(-jitter..=jitter),
                freq: 0.25 * (1.0 + 0.5 * spec.shift),
                phase,
                drift,
                contrast: 1.0 - 0.3 * spec.shift.clamp(0.0, 2.0),
                color,
                top: rng.gen_range(0..=s - size),
                left: rng.gen_range(0..=s - size),
                size,
            }
        }
    };
    let sigma = 0.3
        * match spec.generator {
            Generator::Source => 1.0,
            Generator::Shifted => 1.0 + 0.5 * spec.shift,
        };
    let (ct, st) = (g.theta.cos(), g.theta.sin());
    let mut data = Vec::with_capacity(spec.frames * s * s * c);
    for t in 0..spec.frames {
        for y in 0..s {
            for x in 0..s {
                let inside = (g.top..g.top + g.size).contains(&y) && (g.left..g.left + g.size).contains(&x);
                let wave = if inside {
                    let u = (x as f64) * ct + (y as f64) * st;
                    g.contrast * (2.0 * PI * g.freq * u + g.phase + g.drift * t as f64).sin()
                } else {
                    0.0
                };
                for ch in 0..c {
                    let n: f64 = StandardNormal.sample(rng);
                    data.push(wave * g.color[ch] + sigma * n);
                }
            }
        }
    }
    Tensor::new(&[spec.frames, s, s, c], data).expect("shape matches data")
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetIndex {
    num_classes: usize,
    inputs: PathBuf,
    labels: Vec<usize>,
}

/// Writes `index.json` plus one rank-5 `inputs.bin` holding `[N, F, H, W, C]`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut shape = vec![ds.len()];
    shape.extend_from_slice(ds.inputs[0].shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for x in &ds.inputs {
        data.extend_from_slice(x.data());
    }
    write_tensor(&dir.join("inputs.bin"), &Tensor::new(&shape, data)?)?;
    let index = DatasetIndex {
        num_classes: ds.num_classes,
        inputs: "inputs.bin".into(),
        labels: ds.labels.clone(),
    };
    write_atomic(&dir.join("index.json"), serde_json::to_string_pretty(&index)?.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.json");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let blob_path = dir.join(&index.inputs);
    let all = read_tensor(&blob_path)?;
    let shape = all.shape().to_vec();
    if shape.len() != 5 || shape[0] != index.labels.len() {
        return Err(Error::Format {
            path: blob_path,
            reason: format!("expected [{}, F, H, W, C], found {shape:?}", index.labels.len()),
        });
    }
    if let Some(&bad) = index.labels.iter().find(|&&l| l >= index.num_classes) {
        return Err(Error::Format {
            path: index_path,
            reason: format!("label {bad} outside {} classes", index.num_classes),
        });
    }
    let per: usize = shape[1..].iter().product();
    let inputs = all
        .data()
        .chunks(per.max(1))
        .map(|c| Tensor::new(&shape[1..], c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        inputs,
        labels: index.labels,
        num_classes: index.num_classes,
    })
}
