//! Training runs, benchmark cells and fusion-weight sweeps on top of the
//! trainer, with their on-disk artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{bench_markdown, evaluate, to_csv, EvalReport, Scenario};
use crate::fusion::{Fill, ModelKind, SegModel};
use crate::numerics::ParamStore;
use crate::semisup::{history_csv, train, HistoryRow, TrainMode};

/// The generated benchmark, or the on-disk dataset named by `data.root`.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.root {
        Some(root) => Dataset::load(Path::new(root)),
        None => Dataset::synthetic(&cfg.scene, &cfg.data),
    }
}

/// The fills a model can be evaluated with.
pub fn fills_for(kind: ModelKind) -> Vec<Fill> {
    if kind.has_mask_tokens() {
        vec![Fill::LearnedToken, Fill::Zeros]
    } else {
        vec![Fill::Zeros]
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub history: Vec<HistoryRow>,
    pub best_iteration: usize,
    pub val_miou: f64,
    pub best: ParamStore<f32>,
}

/// Train one configuration. With `out`, writes the merged config, the
/// metrics history and the best checkpoint there.
pub fn run_training(cfg: &RunConfig, ds: &Dataset, init: Option<ParamStore<f32>>, out: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    let model = cfg.model_spec()?;
    if ds.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            ds.num_classes,
            model.num_classes()
        )));
    }
    let init = match init {
        Some(p) => {
            let fresh = model.init_params::<f32>(cfg.trainer.seed)?;
            if !fresh.same_layout(&p) {
                return Err(Error::Config("initial checkpoint does not match the model".into()));
            }
            p
        }
        None => model.init_params(cfg.trainer.seed)?,
    };
    let outcome = train(&model, &cfg.trainer, ds, init)?;
    let run = TrainRun {
        history: outcome.history,
        best_iteration: outcome.best.iteration,
        val_miou: outcome.best.val_miou,
        best: outcome.best.params,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.save(&dir.join("config.json"))?;
        write(&dir.join("history.csv"), &history_csv(&run.history))?;
        Checkpoint::new(cfg, run.best_iteration, Some(run.val_miou), run.best.clone()).save(&dir.join("best.ntc"))?;
    }
    Ok(run)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Test-set reports over all three scenarios, one per applicable fill.
pub fn evaluate_test(cfg: &RunConfig, model: &SegModel, params: &ParamStore<f32>, ds: &Dataset) -> Result<Vec<EvalReport>> {
    fills_for(model.kind)
        .into_iter()
        .map(|fill| {
            evaluate(
                model,
                params,
                ds,
                &ds.split.test,
                &Scenario::ALL,
                fill,
                (cfg.trainer.mode.as_str(), ds.split.labeled_fraction, cfg.trainer.seed),
                cfg.trainer.eval_batch,
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub model: ModelKind,
    pub mode: TrainMode,
    pub fraction: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn dir_name(&self) -> String {
        format!("{}-{}-f{}-s{}", self.model, self.mode, self.fraction, self.seed)
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.model = self.model;
        c.trainer.mode = self.mode;
        c.trainer.seed = self.seed;
        c.data.labeled_fraction = self.fraction;
        c.run_name = self.dir_name();
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub best_iteration: usize,
    pub val_miou: f64,
    pub reports: Vec<EvalReport>,
}

/// Train and test one cell; artifacts go to `dir` when given.
pub fn run_cell(base: &RunConfig, key: CellKey, ds: &Dataset, dir: Option<&Path>) -> Result<CellResult> {
    let cfg = key.apply(base);
    let run = run_training(&cfg, ds, None, dir)?;
    let reports = evaluate_test(&cfg, &cfg.model_spec()?, &run.best, ds)?;
    let result = CellResult {
        key,
        best_iteration: run.best_iteration,
        val_miou: run.val_miou,
        reports,
    };
    if let Some(dir) = dir {
        write(&dir.join("test.csv"), &to_csv(&result.reports)?)?;
        let json = serde_json::to_string_pretty(&result)?;
        write(&dir.join("done.json"), &json)?;
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchPlan {
    pub cells: Vec<CellKey>,
}

impl BenchPlan {
    pub fn grid(models: &[ModelKind], modes: &[TrainMode], fractions: &[f64], seeds: &[u64]) -> Self {
        let mut cells = Vec::new();
        for &fraction in fractions {
            for &model in models {
                for &mode in modes {
                    for &seed in seeds {
                        cells.push(CellKey { model, mode, fraction, seed });
                    }
                }
            }
        }
        BenchPlan { cells }
    }
}

#[derive(Clone, Debug)]
pub struct BenchSummary {
    pub cells: Vec<CellResult>,
    /// Per (model, mode, fraction, fill) medians over seeds.
    pub medians: Vec<EvalReport>,
    pub skipped: usize,
}

fn group_medians(cells: &[CellResult]) -> Result<Vec<EvalReport>> {
    let mut groups: BTreeMap<(String, String, u64, String), Vec<EvalReport>> = BTreeMap::new();
    for c in cells {
        for r in &c.reports {
            groups
                .entry((r.method.clone(), r.mode.clone(), r.fraction.to_bits(), r.fill.to_string()))
                .or_default()
                .push(r.clone());
        }
    }
    groups.values().map(|v| EvalReport::median_of(v)).collect()
}

/// Run every cell of `plan` under `root`, skipping cells whose `done.json`
/// marker already exists, with up to `workers` cells in flight.
pub fn run_bench(
    base: &RunConfig,
    plan: &BenchPlan,
    root: &Path,
    workers: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<BenchSummary> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    base.save(&root.join("config.json"))?;
    let mut datasets: BTreeMap<u64, Dataset> = BTreeMap::new();
    for key in &plan.cells {
        if let std::collections::btree_map::Entry::Vacant(v) = datasets.entry(key.fraction.to_bits()) {
            let mut c = base.clone();
            c.data.labeled_fraction = key.fraction;
            v.insert(load_dataset(&c)?);
        }
    }
    let slots: Vec<Mutex<Option<Result<CellResult>>>> = plan.cells.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let skipped = Mutex::new(0usize);
    let cell_dir = |k: &CellKey| -> PathBuf { root.join("cells").join(k.dir_name()) };
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(plan.cells.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(key) = plan.cells.get(i) else { break };
                let dir = cell_dir(key);
                let marker = dir.join("done.json");
                let result = if marker.exists() {
                    *skipped.lock().expect("counter lock") += 1;
                    progress(&format!("skip {} (done)", key.dir_name()));
                    std::fs::read_to_string(&marker)
                        .map_err(|e| Error::io(&marker, e))
                        .and_then(|t| Ok(serde_json::from_str::<CellResult>(&t)?))
                } else {
                    progress(&format!("run  {}", key.dir_name()));
                    run_cell(base, *key, &datasets[&key.fraction.to_bits()], Some(&dir))
                };
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    let cells = slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    let medians = group_medians(&cells)?;
    let all: Vec<EvalReport> = cells.iter().flat_map(|c| c.reports.clone()).collect();
    write(&root.join("results.csv"), &to_csv(&all)?)?;
    write(&root.join("medians.csv"), &to_csv(&medians)?)?;
    write(&root.join("table.md"), &bench_markdown(&medians))?;
    Ok(BenchSummary {
        cells,
        medians,
        skipped: skipped.into_inner().expect("counter lock"),
    })
}

/// Default fusion-weight grid.
pub const ALPHA_GRID: [f64; 6] = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub val_miou: f64,
    pub best_iteration: usize,
}

/// Train once per `alpha` and report the best validation mIoU of each.
pub fn sweep_alpha(base: &RunConfig, alphas: &[f64], ds: &Dataset, root: Option<&Path>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut cfg = base.clone();
        cfg.fusion.alpha = alpha;
        cfg.run_name = format!("alpha-{alpha}");
        let dir = root.map(|r| r.join(&cfg.run_name));
        let run = run_training(&cfg, ds, None, dir.as_deref())?;
        rows.push(SweepRow {
            alpha,
            val_miou: run.val_miou,
            best_iteration: run.best_iteration,
        });
    }
    Ok(rows)
}

/// The row with the highest validation mIoU (the first on ties).
pub fn best_alpha(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b) if b.val_miou >= r.val_miou => Some(b),
        _ => Some(r),
    })
}

pub fn sweep_markdown(rows: &[SweepRow]) -> String {
    let best = best_alpha(rows).map(|r| r.alpha);
    let mut out = String::from("| alpha | val mIoU |\n|---|---|\n");
    for r in rows {
        if Some(r.alpha) == best {
            out.push_str(&format!("| {} | **{:.2}** |\n", r.alpha, 100.0 * r.val_miou));
        } else {
            out.push_str(&format!("| {} | {:.2} |\n", r.alpha, 100.0 * r.val_miou));
        }
    }
    out
}
