use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use m3l_core::checkpoint::Checkpoint;
use m3l_core::config::{FlatConfig, RunConfig};
use m3l_core::data::Dataset;
use m3l_core::eval::{evaluate, to_csv, Scenario};
use m3l_core::experiment::{
    best_alpha, fills_for, load_dataset, run_bench, run_training, sweep_alpha, sweep_markdown, BenchPlan, ALPHA_GRID,
};
use m3l_core::fusion::{Fill, ModelKind};
use m3l_core::gradsuite::{run_suite, suite_markdown, SUITE_SEEDS};
use m3l_core::semisup::{EvalNetwork, TrainMode};

#[derive(Parser)]
#[command(name = "m3l-lab", version, about = "RGB-D fusion segmentation with masked-modality mean-teacher training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark to disk.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing dataset in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model and keep its best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from the weights of this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under the missing-modality scenarios.
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        /// Scenario to run; repeat for several. Defaults to all three.
        #[arg(long = "scenario")]
        scenarios: Vec<Scenario>,
        /// Fill for the missing modality. Defaults to every fill the model supports.
        #[arg(long)]
        fill: Option<Fill>,
        /// Evaluate the validation split instead of the test split.
        #[arg(long)]
        val: bool,
    },
    /// Train and test a grid of models, modes, fractions and seeds.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "lf")]
        models: Vec<ModelKind>,
        #[arg(long, value_delimiter = ',', default_value = "sup_only,sup_md,mt,mt_md,m3l")]
        modes: Vec<TrainMode>,
        /// Labeled fractions. Defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Train once per fusion weight and report validation mIoU.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Finite-difference check of every op and model.
    GradCheck {
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Elements checked per model parameter; all when omitted.
        #[arg(long)]
        max_elements: Option<usize>,
        /// Scale analytic gradients by this factor (negative control).
        #[arg(long, default_value_t = 1.0, hide = true)]
        corrupt: f64,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long = "labeled-fraction")]
    labeled_fraction: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long = "eval-network")]
    eval_network: Option<EvalNetwork>,
    /// Dataset directory written by gen-data; generated in memory otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other setting as `dotted.key=value` (value parsed as JSON when possible).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<FlatConfig> {
        let mut o = FlatConfig::new();
        let mut put = |k: &str, v: Value| o.insert(k.to_string(), v);
        if let Some(s) = self.seed {
            put("trainer.seed", s.into());
        }
        if let Some(m) = self.mode {
            put("trainer.mode", m.as_str().into());
        }
        if let Some(m) = self.model {
            put("model", m.as_str().into());
        }
        if let Some(f) = self.labeled_fraction {
            put("data.labeled_fraction", f.into());
        }
        if let Some(a) = self.alpha {
            put("fusion.alpha", a.into());
        }
        if let Some(n) = self.iters {
            put("trainer.total_iters", n.into());
        }
        if let Some(n) = self.eval_network {
            put("trainer.eval_network", serde_json::to_value(n)?);
        }
        if let Some(d) = &self.data {
            put("data.root", d.display().to_string().into());
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            put(k, v);
        }
        Ok(o)
    }

    fn resolve_on(&self, base: &RunConfig) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => base.clone(),
        };
        Ok(base.with_overrides(&self.overrides()?)?)
    }

    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_on(&RunConfig::default())
    }

    fn out_dir(&self, cfg: &RunConfig, leaf: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new(&cfg.out_dir).join(leaf))
    }
}

fn threads() -> Result<usize> {
    match std::env::var("M3L_LAB_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("M3L_LAB_THREADS must be a positive integer, got `{v}`")),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn gen_data(common: &Common, force: bool) -> Result<()> {
    let cfg = common.resolve()?;
    let out = common.out_dir(&cfg, "data");
    if out.exists() && std::fs::read_dir(&out)?.next().is_some() {
        if !force {
            bail!("{} is not empty; pass --force to overwrite", out.display());
        }
        for split in ["train", "val", "test"] {
            let dir = out.join(split);
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
        }
    }
    let ds = Dataset::synthetic(&cfg.scene, &cfg.data)?;
    ds.write(&out)?;
    let mut saved = cfg.clone();
    saved.data.root = None;
    saved.save(&out.join("config.json"))?;
    println!(
        "wrote {} scenes ({} labeled, {} unlabeled, {} val, {} test) to {}",
        ds.len(),
        ds.split.labeled.len(),
        ds.split.unlabeled.len(),
        ds.split.val.len(),
        ds.split.test.len(),
        out.display()
    );
    Ok(())
}

fn train(common: &Common, init: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let out = common.out_dir(&cfg, &cfg.run_name);
    let ds = load_dataset(&cfg)?;
    let init = match init {
        Some(p) => Some(Checkpoint::<f32>::load(p).with_context(|| format!("loading {}", p.display()))?.params),
        None => None,
    };
    let run = run_training(&cfg, &ds, init, Some(&out))?;
    println!(
        "{} {}: best val mIoU {:.2} at iteration {}; wrote {}",
        cfg.model,
        cfg.trainer.mode,
        100.0 * run.val_miou,
        run.best_iteration,
        out.display()
    );
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, scenarios: &[Scenario], fill: Option<Fill>, val: bool) -> Result<()> {
    let ck = Checkpoint::<f32>::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = common.resolve_on(&ck.manifest.run_config()?)?;
    let model = cfg.model_spec()?;
    let ds = load_dataset(&cfg)?;
    let scenarios = if scenarios.is_empty() { Scenario::ALL.to_vec() } else { scenarios.to_vec() };
    let fills = match fill {
        Some(f) => vec![f],
        None => fills_for(cfg.model),
    };
    let indices = if val { &ds.split.val } else { &ds.split.test };
    let meta = (cfg.trainer.mode.as_str(), ds.split.labeled_fraction, cfg.trainer.seed);
    let reports = fills
        .into_iter()
        .map(|f| evaluate(&model, &ck.params, &ds, indices, &scenarios, f, meta, cfg.trainer.eval_batch))
        .collect::<m3l_core::Result<Vec<_>>>()?;
    let csv = to_csv(&reports)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&out)?;
    let path = out.join(if val { "eval_val.csv" } else { "eval.csv" });
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    for r in &reports {
        match r.mm_robust {
            Some(m) => println!("mm_robust fill={}: mIoU {:.2}", r.fill, 100.0 * m.miou),
            None => println!("mm_robust fill={}: absent (needs all three scenarios)", r.fill),
        }
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn bench(common: &Common, models: &[ModelKind], modes: &[TrainMode], fractions: &[f64], seeds: &[u64]) -> Result<()> {
    let cfg = common.resolve()?;
    let root = common.out_dir(&cfg, "bench");
    let fractions = if fractions.is_empty() { vec![cfg.data.labeled_fraction] } else { fractions.to_vec() };
    let plan = BenchPlan::grid(models, modes, &fractions, seeds);
    let workers = threads()?;
    eprintln!("{} cells on {workers} worker(s) under {}", plan.cells.len(), root.display());
    let summary = run_bench(&cfg, &plan, &root, workers, &|msg| eprintln!("{msg}"))?;
    print!("{}", std::fs::read_to_string(root.join("table.md"))?);
    eprintln!("{} cell(s) reused from earlier runs", summary.skipped);
    Ok(())
}

fn sweep(common: &Common, values: &[f64]) -> Result<()> {
    let cfg = common.resolve()?;
    let values = if values.is_empty() { ALPHA_GRID.to_vec() } else { values.to_vec() };
    let root = common.out_dir(&cfg, "sweep-alpha");
    let ds = load_dataset(&cfg)?;
    let rows = sweep_alpha(&cfg, &values, &ds, Some(&root))?;
    let mut csv = String::from("alpha,val_mIoU,best_iteration\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.alpha, r.val_miou, r.best_iteration));
    }
    std::fs::write(root.join("sweep.csv"), csv)?;
    let table = sweep_markdown(&rows);
    std::fs::write(root.join("sweep.md"), &table)?;
    print!("{table}");
    if let Some(best) = best_alpha(&rows) {
        println!("best alpha: {} (val mIoU {:.2})", best.alpha, 100.0 * best.val_miou);
    }
    Ok(())
}

fn grad_check(seeds: &[u64], max_elements: Option<usize>, corrupt: f64) -> Result<bool> {
    let seeds = if seeds.is_empty() { SUITE_SEEDS.to_vec() } else { seeds.to_vec() };
    let report = run_suite(&seeds, max_elements, corrupt)?;
    print!("{}", suite_markdown(&report));
    let ok = report.passed();
    println!(
        "{} checks over seeds {seeds:?}: max relative error {:.3e}, {}",
        report.entries.len(),
        report.max_rel_error(),
        if ok { "all passed" } else { "FAILED" }
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, force } => gen_data(&common, force)?,
        Command::Train { common, init } => train(&common, init.as_deref())?,
        Command::Eval {
            common,
            checkpoint,
            scenarios,
            fill,
            val,
        } => eval(&common, &checkpoint, &scenarios, fill, val)?,
        Command::Bench {
            common,
            models,
            modes,
            fractions,
            seeds,
        } => bench(&common, &models, &modes, &fractions, &seeds)?,
        Command::SweepAlpha { common, values } => sweep(&common, &values)?,
        Command::GradCheck {
            seeds,
            max_elements,
            corrupt,
        } => return grad_check(&seeds, max_elements, corrupt),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
