use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use losa_core::backbone::ArchRegistry;
use losa_core::baselines::AdaptationMethod;
use losa_core::costmodel::{
    cost_report, pareto_indices, CostReport, OptimizerSpec, DEFAULT_NUM_CLASSES,
};
use losa_core::harness::{
    collect_reports, emit_report, evaluate, gen_synthetic, load_checkpoint, load_dataset, pretrain,
    run, save_checkpoint, save_dataset, write_table, RunReport, SyntheticTaskSpec, TrainConfig,
    REPORT_DIR_ENV,
};

#[derive(Parser)]
#[command(name = "losa", version, about = "Side-network adaptation of frozen vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one adaptation run described by a JSON config.
    Train(TrainArgs),
    /// Train a full backbone on a source task and save it as a checkpoint.
    Pretrain(TrainArgs),
    /// Accuracy of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Analytic parameter, FLOP and memory costs of a method.
    Cost(CostArgs),
    /// Accuracy/cost Pareto frontier over saved run reports.
    Pareto {
        #[arg(long, env = REPORT_DIR_ENV)]
        reports: PathBuf,
        /// Cost axis: params, fwd, bwd or memory.
        #[arg(long, default_value = "memory")]
        axis: String,
    },
    /// Collects run reports into one CSV table.
    Report {
        #[arg(long, env = REPORT_DIR_ENV)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a synthetic task to train/ and test/ dataset directories.
    GenData {
        /// JSON file holding a synthetic task spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Directory for the trained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report path; defaults to `<LOSA_REPORT_DIR>/<method>_seed<seed>.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value = "vit-g")]
    arch: String,
    /// JSON registry adding architectures to the built-in presets.
    #[arg(long)]
    arch_registry: Option<PathBuf>,
    /// losa, lora, bitfit, prompt_tuning, lst, linear_probe, full_finetune,
    /// last_k, attn_only or mlp_only.
    #[arg(long)]
    method: String,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    k_layers: Option<usize>,
    #[arg(long)]
    tap: Option<String>,
    #[arg(long)]
    side_input: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    parity: Option<String>,
    #[arg(long)]
    no_biases: bool,
    /// Comma-separated LoRA components (q,k,v,out,mlp); all when omitted.
    #[arg(long, value_delimiter = ',')]
    components: Option<Vec<String>>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    prompt_layers: Option<usize>,
    #[arg(long)]
    d_side: Option<usize>,
    /// Trained blocks for last_k.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_NUM_CLASSES)]
    num_classes: usize,
    #[arg(long, default_value = "sgd")]
    optimizer: String,
    /// Print JSON only.
    #[arg(long)]
    json: bool,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a, false),
        Command::Pretrain(a) => cmd_train(a, true),
        Command::Eval { checkpoint, data } => {
            let model = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let acc = evaluate(&model, &ds)?;
            println!("{}", json!({ "method": model.method.name(), "samples": ds.len(), "accuracy": acc }));
            Ok(())
        }
        Command::Cost(a) => cmd_cost(a),
        Command::Pareto { reports, axis } => cmd_pareto(&reports, &axis),
        Command::Report { runs, out } => {
            let reports: Vec<RunReport> = collect_reports(&runs)?.into_iter().map(|(_, r)| r).collect();
            write_table(&reports, &out)?;
            eprintln!("wrote {} rows to {}", reports.len(), out.display());
            Ok(())
        }
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SyntheticTaskSpec = serde_json::from_str(&text)?;
            let d = gen_synthetic(&spec)?;
            save_dataset(&d.train, &out.join("train"))?;
            save_dataset(&d.test, &out.join("test"))?;
            Ok(())
        }
    }
}

fn cmd_train(a: TrainArgs, pre: bool) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg: TrainConfig = serde_json::from_str(&text).context("parsing train config")?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
        cfg.warmup_steps = cfg.warmup_steps.min(s.saturating_sub(1));
    }
    if let Some(lr) = a.lr {
        cfg.base_lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    let path = match a.report {
        Some(p) => Some(p),
        None => std::env::var_os(REPORT_DIR_ENV)
            .map(|d| Path::new(&d).join(format!("{}_seed{}.json", cfg.method.name(), cfg.seed))),
    };
    // fail before training rather than after
    if let Some(parent) = path.as_deref().and_then(Path::parent) {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            bail!("report directory {} does not exist", parent.display());
        }
    }
    let (model, report) = if pre { pretrain(&cfg)? } else { run(&cfg)? };
    if let Some(dir) = &a.checkpoint {
        save_checkpoint(&model, dir)?;
    }
    if let Some(p) = &path {
        emit_report(&report, p)?;
    }
    println!(
        "{} seed {}: accuracy {:.4} -> {:.4}, {} learned params, {:.2} ms/step",
        report.method,
        report.seed,
        report.initial_accuracy,
        report.final_accuracy,
        report.learned_params,
        report.wall_clock_ms_per_step
    );
    Ok(())
}

fn method_from_args(a: &CostArgs) -> Result<AdaptationMethod> {
    let mut p = Map::new();
    let mut put = |k: &str, v: Value| {
        p.insert(k.to_string(), v);
    };
    match a.method.as_str() {
        "losa" => {
            put("rank", json!(a.rank.context("losa needs --rank")?));
            if let Some(k) = a.k_layers {
                put("k_layers", json!(k));
            }
            for (key, v) in [
                ("tap", &a.tap),
                ("side_input", &a.side_input),
                ("variant", &a.variant),
                ("parity", &a.parity),
            ] {
                if let Some(v) = v {
                    put(key, json!(v));
                }
            }
            if a.no_biases {
                put("use_biases", json!(false));
            }
        }
        "lora" => {
            put("rank", json!(a.rank.context("lora needs --rank")?));
            let comps = a
                .components
                .clone()
                .unwrap_or_else(|| ["q", "k", "v", "out", "mlp"].map(String::from).to_vec());
            put("components", json!(comps));
        }
        "prompt_tuning" => {
            put("prompts", json!(a.prompts.context("prompt_tuning needs --prompts")?));
            put("layers", json!(a.prompt_layers.context("prompt_tuning needs --prompt-layers")?));
        }
        "lst" => put("d_side", json!(a.d_side.context("lst needs --d-side")?)),
        "last_k" => put("k", json!(a.k.context("last_k needs --k")?)),
        _ => {}
    }
    let v = if p.is_empty() {
        json!({ "method": a.method })
    } else {
        json!({ "method": a.method, "params": p })
    };
    serde_json::from_value(v).with_context(|| format!("invalid method `{}`", a.method))
}

fn cmd_cost(a: CostArgs) -> Result<()> {
    let registry = match &a.arch_registry {
        Some(p) => ArchRegistry::load(p)?,
        None => ArchRegistry::builtin(),
    };
    let arch = registry.get(&a.arch)?;
    let method = method_from_args(&a)?;
    let opt = match a.optimizer.as_str() {
        "sgd" => OptimizerSpec::sgd_momentum(),
        "adam" => OptimizerSpec::adam(),
        o => bail!("unknown optimizer `{o}` (sgd or adam)"),
    };
    let r = cost_report(&a.arch, &arch, &method, opt, a.num_classes)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    if !a.json {
        print_cost_table(&r);
    }
    Ok(())
}

fn print_cost_table(r: &CostReport) {
    let gb = |b: u64| format!("{:.3} GB", b as f64 / 1e9);
    let rows = [
        ("arch", r.arch.clone()),
        ("method", r.method.clone()),
        ("learned params", format!("{} ({:.3}M)", r.learned_params, r.learned_params as f64 / 1e6)),
        ("forward GFLOPs", format!("{:.2}", r.fwd_gmacs)),
        ("backward GFLOPs", format!("{:.2}", r.bwd_gmacs)),
        ("cached activations", gb(r.cached_activation_bytes)),
        ("optimizer state", gb(r.optimizer_state_bytes)),
        ("total train memory", gb(r.total_train_bytes)),
    ];
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in rows {
        println!("{k:<w$}  {v}");
    }
}

fn cmd_pareto(dir: &Path, axis: &str) -> Result<()> {
    let reports = collect_reports(dir)?;
    let cost = |r: &RunReport| -> Result<f64> {
        Ok(match axis {
            "params" => r.learned_params as f64,
            "fwd" => r.cost.fwd_gmacs,
            "bwd" => r.cost.bwd_gmacs,
            "memory" => r.cost.total_train_bytes as f64,
            a => bail!("unknown axis `{a}` (params, fwd, bwd or memory)"),
        })
    };
    let points = reports
        .iter()
        .map(|(_, r)| Ok((cost(r)?, r.final_accuracy)))
        .collect::<Result<Vec<_>>>()?;
    let front: Vec<Value> = pareto_indices(&points)?
        .into_iter()
        .map(|i| {
            let (path, r) = &reports[i];
            json!({
                "report": path.display().to_string(),
                "method": r.method,
                "seed": r.seed,
                "cost": points[i].0,
                "accuracy": r.final_accuracy,
            })
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&json!({ "axis": axis, "frontier": front }))?);
    Ok(())
}
