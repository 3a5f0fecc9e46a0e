//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Runs without the libtest harness so the
//! timing criterion is not disturbed by concurrently running tests.

mod common;

use std::time::Instant;

use losa_core::adapters::{LosaConfig, MixerParity, SideInput};
use losa_core::autodiff::{Region, Tape};
use losa_core::backbone::{build_backbone, preset, toy, Backbone, BackboneConfig};
use losa_core::baselines::{
    apply_bitfit, apply_lora, apply_losa, apply_lst, merge_lora, AdaptationMethod, LoraComponent, LoraConfig,
    LstConfig, PromptConfig,
};
use losa_core::costmodel::{count_forward_flops, count_params, ledger_stats, pareto_frontier, DEFAULT_NUM_CLASSES};
use losa_core::harness::{
    gen_synthetic, pretrain, sgd_step, train, DataSource, Generator, RunReport, SyntheticTaskSpec, TrainConfig,
};
use losa_core::{Model, Precision};
use rand::Rng;

use common::*;

struct Suite {
    failed: Vec<String>,
}

impl Suite {
    fn check(&mut self, id: &str, ok: bool, detail: impl AsRef<str>) {
        println!("{} [{id}] {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
        if !ok {
            self.failed.push(id.to_string());
        }
    }
}

fn within(actual: f64, expected: f64, rel: f64) -> bool {
    ((actual - expected) / expected).abs() <= rel
}

fn millions(n: u64) -> f64 {
    n as f64 / 1e6
}

fn losa(rank: usize) -> AdaptationMethod {
    AdaptationMethod::Losa(LosaConfig::new(rank))
}

fn param_counts(s: &mut Suite) {
    let g = preset("vit-g").unwrap();
    let n = count_params(&g, &losa(64)).unwrap();
    s.check(
        "1a",
        within(millions(n), 4.298, 0.001),
        format!("vit-g LoSA r=64 learns {n} params, expected 4.298M +-0.1%"),
    );

    let mut ok = true;
    let mut got = Vec::new();
    for (k, want) in [(1, 0.184), (2, 0.217), (4, 0.431), (8, 0.861), (40, 4.298)] {
        let mut cfg = LosaConfig::new(64).with_layers(k);
        cfg.parity = MixerParity::EvenToken;
        let n = count_params(&g, &AdaptationMethod::Losa(cfg)).unwrap();
        ok &= within(millions(n), want, 0.02);
        got.push(format!("k={k}:{:.3}M", millions(n)));
    }
    s.check("1b", ok, format!("vit-g LoSA layer sweep {} within 2%", got.join(" ")));

    let b = preset("vit-b").unwrap();
    let mut ok = true;
    let mut got = Vec::new();
    for (r, want) in [(4, 0.05), (8, 0.10), (16, 0.19)] {
        let m = millions(count_params(&b, &losa(r)).unwrap());
        let rounded = (m * 100.0).round() / 100.0;
        ok &= (rounded - want).abs() < 1e-9;
        got.push(format!("r={r}:{m:.4}M"));
    }
    s.check("1c", ok, format!("vit-b LoSA rank sweep {} rounds to 0.05/0.10/0.19", got.join(" ")));

    let mut ok = true;
    let mut got = Vec::new();
    for (r, want) in [(1, 0.58), (4, 2.31), (8, 4.62), (16, 9.24), (32, 18.47)] {
        let n = count_params(&g, &AdaptationMethod::Lora(LoraConfig::all(r))).unwrap();
        ok &= within(millions(n), want, 0.02);
        got.push(format!("r={r}:{:.3}M", millions(n)));
    }
    s.check("1d", ok, format!("vit-g LoRA rank sweep {} within 2%", got.join(" ")));

    let mut ok = true;
    for (p, l) in [(1, 1), (8, 12), (16, 24), (24, 40)] {
        let n = count_params(&g, &AdaptationMethod::PromptTuning(PromptConfig { prompts: p, layers: l })).unwrap();
        ok &= within(n as f64, (p * l * g.width) as f64, 0.02);
    }
    s.check("1e", ok, "prompt tuning params equal P*L_p*d within 2%");
}

fn flops(s: &mut Suite) {
    let g = preset("vit-g").unwrap();
    let c = DEFAULT_NUM_CLASSES;
    let cases = [
        ("2a", "plain", AdaptationMethod::LinearProbe, 267.4, 0.02),
        ("2b", "LoSA r=64", losa(64), 269.4, 0.02),
        ("2c", "LoRA r=32 all", AdaptationMethod::Lora(LoraConfig::all(32)), 272.2, 0.02),
        ("2d", "LST d=48", AdaptationMethod::Lst(LstConfig::new(48)), 274.9, 0.03),
        (
            "2e",
            "prompt P=16 L=24",
            AdaptationMethod::PromptTuning(PromptConfig { prompts: 16, layers: 24 }),
            571.8,
            0.03,
        ),
        (
            "2f",
            "prompt P=24 L=24",
            AdaptationMethod::PromptTuning(PromptConfig { prompts: 24, layers: 24 }),
            731.6,
            0.03,
        ),
    ];
    for (id, label, m, want, tol) in cases {
        let f = count_forward_flops(&g, &m, c).unwrap();
        s.check(
            id,
            within(f, want, tol),
            format!("vit-g {label} forward {f:.2} GFLOPs, expected {want} +-{}%", tol * 100.0),
        );
    }
}

fn frozen_backprop(s: &mut Suite) {
    let bb = build_backbone(&toy(), 3).unwrap();
    let data = inputs(&bb.cfg, 4, 40);
    let labels = [0usize, 1, 2, 3];
    let probe = |model: &mut Model| -> (usize, u64, bool) {
        let mut tape = Tape::new(Precision::F32);
        let mut total = None;
        for (x, &y) in data.iter().zip(&labels) {
            let l = model.loss(&mut tape, x, y).unwrap();
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l).unwrap(),
            });
        }
        let grads = tape.backward(total.unwrap()).unwrap();
        let bb_grads = grads.keys().filter(|k| k.starts_with("backbone.")).count();
        let bb_bwd = tape.tape_stats().region(Region::Backbone).bwd_macs;
        let before = model.backbone_snapshot();
        let batch: Vec<_> = data.iter().zip(labels).collect();
        let mut vel = Default::default();
        sgd_step(model, &batch, 0.1, 0.9, 0.0, &mut vel, 0).unwrap();
        (bb_grads, bb_bwd, before == model.backbone_snapshot())
    };
    let (g, macs, same) = probe(&mut apply_losa(&bb, LosaConfig::new(8), 4, 1).unwrap());
    s.check(
        "3a",
        g == 0 && macs == 0 && same,
        format!("LoSA: {g} backbone grads, {macs} backbone bwd MACs, weights unchanged={same}"),
    );
    let (g, macs, same) = probe(&mut apply_lora(&bb, 4, &LoraComponent::ALL, 4, 1).unwrap());
    s.check(
        "3b",
        g == 0 && macs > 0 && same,
        format!("LoRA: {g} backbone grads, {macs} backbone bwd MACs (nonzero), weights unchanged={same}"),
    );
    let (g, macs, same) = probe(&mut Model::new(&bb, AdaptationMethod::FullFinetune, 4, 1).unwrap());
    s.check(
        "3c",
        g > 0 && macs > 0 && !same,
        format!("Full: {g} backbone grads, {macs} backbone bwd MACs, weights changed={}", !same),
    );
}

fn gradient_check(s: &mut Suite) {
    let seeds = 20u64;
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    let mut primitives = 0;
    for seed in 0..seeds {
        for (name, store, f) in primitive_cases(seed) {
            let e = gradcheck(&store, f);
            if e > worst {
                worst = e;
                worst_name = name;
            }
            primitives += 1;
        }
    }
    s.check(
        "4a",
        worst < FD_TOL,
        format!("{primitives} primitive checks over {seeds} seeds at F64, worst rel err {worst:.2e} ({worst_name})"),
    );

    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let bb = build_backbone(&tiny(2), seed).unwrap();
        let mut cfg = LosaConfig::new(2);
        cfg.side_input = if seed % 2 == 0 { SideInput::BackboneOutput } else { SideInput::BackboneInput };
        let mut model = apply_losa(&bb, cfg, 3, seed).unwrap();
        randomize_trainable(&mut model.store, 0.5, seed + 100);
        let x = inputs(&bb.cfg, 1, seed + 7).remove(0);
        let (arch, method) = (model.arch.clone(), model.method.clone());
        let e = gradcheck(&model.store.clone(), |t, st| {
            Model::from_store(arch.clone(), method.clone(), 3, st.clone())?.loss(t, &x, (seed % 3) as usize)
        });
        worst = worst.max(e);
    }
    s.check(
        "4b",
        worst < FD_TOL,
        format!("end-to-end 2-layer LoSA over {seeds} seeds at F64, worst rel err {worst:.2e}"),
    );
}

fn identity_at_init(s: &mut Suite) {
    let bb = build_backbone(&toy(), 5).unwrap();
    let xs = inputs(&bb.cfg, 100, 50);
    let frozen = Model::new(&bb, AdaptationMethod::LinearProbe, 10, 9).unwrap();
    let reference: Vec<Vec<u64>> = xs
        .iter()
        .map(|x| frozen.predict(x, Precision::F32).unwrap().iter().map(|v| v.to_bits()).collect())
        .collect();
    let models = [
        ("LoSA", apply_losa(&bb, LosaConfig::new(8), 10, 9).unwrap()),
        ("LoRA", apply_lora(&bb, 4, &LoraComponent::ALL, 10, 9).unwrap()),
        ("LST", apply_lst(&bb, 16, 10, 9).unwrap()),
        ("BitFit", apply_bitfit(&bb, 10, 9).unwrap()),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, m) in &models {
        let same = xs.iter().zip(&reference).all(|(x, r)| {
            let got: Vec<u64> = m.predict(x, Precision::F32).unwrap().iter().map(|v| v.to_bits()).collect();
            &got == r
        });
        ok &= same;
        detail.push(format!("{name}={same}"));
    }
    s.check("5", ok, format!("bit-identical logits at init on 100 inputs: {}", detail.join(" ")));
}

pub fn ledger_pairs() -> Vec<(&'static str, AdaptationMethod)> {
    let mut both = LosaConfig::new(8);
    both.tap = losa_core::backbone::TapKind::Both;
    let mut tf = LosaConfig::new(16);
    tf.variant = losa_core::adapters::Variant::Transformer;
    let prompt = AdaptationMethod::PromptTuning(PromptConfig { prompts: 4, layers: 2 });
    vec![
        ("toy", AdaptationMethod::LinearProbe),
        ("toy", losa(8)),
        ("toy", AdaptationMethod::Losa(both)),
        ("toy", AdaptationMethod::Losa(tf)),
        ("toy", AdaptationMethod::Lora(LoraConfig::all(4))),
        ("toy", AdaptationMethod::BitFit),
        ("toy", prompt.clone()),
        ("toy", AdaptationMethod::Lst(LstConfig::new(16))),
        ("toy", AdaptationMethod::FullFinetune),
        ("toy", AdaptationMethod::LastK { k: 2 }),
        ("toy", AdaptationMethod::AttnOnly),
        ("toy", AdaptationMethod::MlpOnly),
        ("toy-video", losa(8)),
        ("toy-video", AdaptationMethod::Lora(LoraConfig::all(4))),
        ("toy-video", prompt),
        ("toy-video", AdaptationMethod::FullFinetune),
    ]
}

fn ledger_matches_tape(s: &mut Suite) {
    let mut matched = 0;
    let mut bad = Vec::new();
    let pairs = ledger_pairs();
    for (arch, method) in &pairs {
        let cfg: BackboneConfig = preset(arch).unwrap();
        let bb = build_backbone(&cfg, 2).unwrap();
        let model = Model::new(&bb, method.clone(), 10, 2).unwrap();
        let x = inputs(&cfg, 1, 3).remove(0);
        let mut tape = Tape::new(Precision::F32);
        let loss = model.loss(&mut tape, &x, 1).unwrap();
        tape.backward(loss).unwrap();
        let measured = tape.tape_stats().total_bwd_macs;
        let analytic = ledger_stats(&cfg, method, 10, 4).unwrap().total_bwd_macs;
        if measured == analytic {
            matched += 1;
        } else {
            bad.push(format!("{arch}/{}: tape {measured} vs ledger {analytic}", method.name()));
        }
    }
    s.check(
        "6",
        bad.is_empty() && matched >= 12,
        format!("analytic == measured backward MACs on {matched}/{} toy pairs {}", pairs.len(), bad.join("; ")),
    );
}

fn task(generator: Generator, train_samples: usize, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        num_classes: 4,
        image_size: 16,
        frames: 1,
        channels: 3,
        generator,
        shift: 1.0,
        train_samples,
        test_samples: 256,
        seed,
    }
}

fn adapt(bb: &Backbone, method: AdaptationMethod, lr: f64, steps: usize, seed: u64, data: &losa_core::harness::SyntheticData) -> RunReport {
    let mut cfg = TrainConfig::new(method.clone(), DataSource::Synthetic(task(Generator::Shifted, 1, 0)));
    cfg.base_lr = lr;
    cfg.steps = steps;
    cfg.warmup_steps = steps / 10;
    cfg.seed = seed;
    let mut model = Model::new(bb, method, 4, seed).unwrap();
    train(&cfg, &mut model, &data.train, &data.test).unwrap()
}

fn desk_scale(s: &mut Suite) {
    let start = Instant::now();
    let mut pre = TrainConfig::new(
        AdaptationMethod::FullFinetune,
        DataSource::Synthetic(SyntheticTaskSpec { shift: 0.0, ..task(Generator::Source, 2048, 11) }),
    );
    pre.steps = 300;
    pre.warmup_steps = 30;
    pre.weight_decay = 0.01;
    let (pretrained, pre_report) = pretrain(&pre).unwrap();
    let bb = losa_core::harness::extract_backbone(&pretrained);
    let shifted = gen_synthetic(&task(Generator::Shifted, 1024, 22)).unwrap();

    let mut side = LosaConfig::new(32);
    side.side_input = SideInput::BackboneInput;
    let side = AdaptationMethod::Losa(side);
    let (mut lp, mut ls, mut full) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 1..=3 {
        lp.push(adapt(&bb, AdaptationMethod::LinearProbe, 0.2, 600, seed, &shifted));
        ls.push(adapt(&bb, side.clone(), 0.2, 600, seed, &shifted));
        full.push(adapt(&bb, AdaptationMethod::FullFinetune, 0.05, 400, seed, &shifted));
        println!(
            "     seed {seed}: linear probe {:.3}, LoSA {:.3}, full {:.3}",
            lp.last().unwrap().final_accuracy,
            ls.last().unwrap().final_accuracy,
            full.last().unwrap().final_accuracy
        );
    }
    let mean = |v: &[RunReport], f: fn(&RunReport) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let acc = |r: &RunReport| 100.0 * r.final_accuracy;
    let ms = |r: &RunReport| r.wall_clock_ms_per_step;
    let (a_lp, a_ls, a_full) = (mean(&lp, acc), mean(&ls, acc), mean(&full, acc));
    println!("     pretraining reached {:.3} on the source task", pre_report.final_accuracy);
    s.check(
        "7a",
        a_ls >= a_lp + 5.0,
        format!("mean accuracy LoSA {a_ls:.1} >= linear probe {a_lp:.1} + 5"),
    );
    s.check(
        "7b",
        a_ls >= a_full - 3.0,
        format!("mean accuracy LoSA {a_ls:.1} within 3 points of full {a_full:.1}"),
    );
    let (t_ls, t_full) = (mean(&ls, ms), mean(&full, ms));
    s.check(
        "7c",
        t_ls <= 0.7 * t_full,
        format!("LoSA {t_ls:.1} ms/step <= 0.7 x full {t_full:.1} ms/step"),
    );

    let lora_model = Model::new(&bb, AdaptationMethod::Lora(LoraConfig::all(4)), 4, 1).unwrap();
    let mut lora_model = lora_model;
    let batch: Vec<_> = shifted.train.inputs[..32]
        .iter()
        .zip(shifted.train.labels[..32].iter().copied())
        .collect();
    let lora_stats = sgd_step(&mut lora_model, &batch, 0.0, 0.9, 0.0, &mut Default::default(), 0)
        .unwrap()
        .stats;
    let bytes = [
        lp[0].measured.cached_bytes,
        ls[0].measured.cached_bytes,
        lora_stats.cached_bytes,
        full[0].measured.cached_bytes,
    ];
    s.check(
        "7d",
        bytes.windows(2).all(|w| w[0] < w[1]),
        format!("cached bytes per batch LP {} < LoSA {} < LoRA {} < Full {}", bytes[0], bytes[1], bytes[2], bytes[3]),
    );
    let secs = start.elapsed().as_secs_f64();
    s.check("7e", secs < 900.0, format!("desk-scale experiment took {secs:.0}s < 900s"));
}

fn lora_merge(s: &mut Suite) {
    let bb = build_backbone(&toy(), 8).unwrap();
    let comps = [LoraComponent::Q, LoraComponent::K, LoraComponent::V, LoraComponent::Out];
    let mut model = apply_lora(&bb, 4, &comps, 10, 4).unwrap();
    randomize_trainable(&mut model.store, 0.1, 77);
    let merged = Model::with_head_of(&merge_lora(&model).unwrap(), &model).unwrap();
    let xs = inputs(&bb.cfg, 100, 60);
    let worst = xs
        .iter()
        .map(|x| {
            let a = model.predict(x, Precision::F64).unwrap();
            let b = merged.predict(x, Precision::F64).unwrap();
            a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    s.check("8a", worst < 1e-5, format!("merged vs unmerged logits max diff {worst:.2e} < 1e-5 on 100 inputs"));

    let plain = Model::new(&bb, AdaptationMethod::LinearProbe, 10, 4).unwrap();
    let fwd = |m: &Model| {
        let mut t = Tape::new(Precision::F32);
        m.logits(&mut t, &xs[0]).unwrap();
        t.tape_stats().total_fwd_macs
    };
    let (fm, fp, fu) = (fwd(&merged), fwd(&plain), fwd(&model));
    s.check(
        "8b",
        fm == fp && fu > fp,
        format!("merged forward MACs {fm} == plain {fp} (unmerged {fu})"),
    );
}

fn pareto(s: &mut Suite) {
    let mut r = rng(2024);
    let mut bad = 0;
    for i in 0..1000 {
        let n = r.gen_range(1..60);
        let coarse = i % 2 == 0;
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                if coarse {
                    (r.gen_range(0..8) as f64, r.gen_range(0..8) as f64)
                } else {
                    (r.gen_range(0.0..10.0), r.gen_range(0.0..1.0))
                }
            })
            .collect();
        let want: Vec<(f64, f64)> = brute_pareto(&pts).into_iter().map(|i| pts[i]).collect();
        let mut got = pareto_frontier(&pts).unwrap();
        let mut want_sorted = want.clone();
        let key = |a: &(f64, f64), b: &(f64, f64)| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1));
        got.sort_by(key);
        want_sorted.sort_by(key);
        if got != want_sorted {
            bad += 1;
        }
    }
    s.check("9", bad == 0, format!("pareto_frontier matches brute force on {} of 1000 random sets", 1000 - bad));
}

fn main() {
    let mut s = Suite { failed: Vec::new() };
    param_counts(&mut s);
    flops(&mut s);
    frozen_backprop(&mut s);
    gradient_check(&mut s);
    identity_at_init(&mut s);
    ledger_matches_tape(&mut s);
    lora_merge(&mut s);
    pareto(&mut s);
    desk_scale(&mut s);
    if s.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {}", s.failed.join(", "));
        std::process::exit(1);
    }
}
