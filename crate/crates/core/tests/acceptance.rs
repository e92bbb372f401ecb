//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! The benchmark experiment writes its cells under `M3L_ACCEPTANCE_DIR` when
//! set (finished cells are reused on the next run), otherwise under a fresh
//! temporary directory. `M3L_LAB_THREADS` caps the worker count.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{small_config, small_dataset};
use m3l_core::backbone::Modality;
use m3l_core::checkpoint::Checkpoint;
use m3l_core::config::RunConfig;
use m3l_core::eval::{mm_robust, to_csv, ConfusionMatrix, EvalReport, Metrics, Scenario};
use m3l_core::experiment::{evaluate_test, run_bench, run_training, BenchPlan, CellKey};
use m3l_core::fusion::{Fill, FusionConfig, Heads, MaskState, ModelKind, SegModel};
use m3l_core::gradsuite::{run_suite, SUITE_SEEDS};
use m3l_core::losses::{cross_entropy, ohem_ce, IGNORE};
use m3l_core::numerics::{Graph, NdArray, ParamStore};
use m3l_core::semisup::{choose_mask, ema_update, make_pseudo_labels, train, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;
type Outcome = Result<(bool, String)>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn c1_mm_arithmetic() -> Outcome {
    let mm = |v: [f64; 3]| {
        let m = |x: f64| Metrics { miou: x, macc: x, pixacc: x };
        let parts = BTreeMap::from([
            (Scenario::Rgbd, m(v[0])),
            (Scenario::RgbOnly, m(v[1])),
            (Scenario::DepthOnly, m(v[2])),
        ]);
        mm_robust(&parts).map(|r| r.miou)
    };
    let a = mm([40.05, 39.93, 44.10])?;
    let b = mm([33.96, 25.09, 42.09])?;
    let ok = (a - 41.36).abs() < 0.005 && (b - 33.71).abs() < 0.005;
    Ok((ok, format!("{a:.4} vs 41.36, {b:.4} vs 33.71")))
}

fn c2_gradients() -> Outcome {
    let report = run_suite(&SUITE_SEEDS, None, 1.0)?;
    let worst = report
        .per_name()
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e, _)| format!("{n} {e:.2e}"))
        .unwrap_or_default();
    let models = ["model_lf", "model_tf", "model_urn", "model_uni_rgb", "model_uni_depth"];
    let covered = models
        .iter()
        .all(|m| report.entries.iter().filter(|e| e.name == *m).count() == SUITE_SEEDS.len());
    Ok((
        report.passed() && covered && report.max_rel_error() < 1e-4,
        format!("{} checks over seeds {SUITE_SEEDS:?}, worst {worst}", report.entries.len()),
    ))
}

fn c3_reductions() -> Outcome {
    // (a) LF with alpha = 1 against the uni-modal models on shared weights.
    let fusion = FusionConfig { alpha: 1.0, ..FusionConfig::default() };
    let lf = SegModel::tiny(ModelKind::Lf, fusion.clone())?;
    let mut store = lf.init_params::<f64>(3)?;
    let mut r = rng(4);
    for (_, e) in store.iter_mut() {
        e.value.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.1..0.1));
    }
    let mut g = Graph::no_grad();
    let img = |g: &mut Graph<f64>, c: usize, r: &mut ChaCha8Rng| {
        let d = (0..2 * c * 64).map(|_| r.gen()).collect();
        g.constant(NdArray::from_vec([2, c, 8, 8], d).expect("shape"))
    };
    let (x_rgb, x_depth) = (img(&mut g, 3, &mut r), img(&mut g, 1, &mut r));
    let out = lf.forward(&mut g, &store, Some(x_rgb), Some(x_depth), &[MaskState::NONE; 2])?;
    let Heads::Triple(heads) = out.heads else { unreachable!("lf has three heads") };
    let mut diff_a = 0.0f64;
    for (kind, head) in [(ModelKind::UniRgb, heads.rgb), (ModelKind::UniDepth, heads.depth)] {
        let uni = SegModel::tiny(kind, fusion.clone())?;
        let mut shared = ParamStore::new();
        for (name, e) in uni.init_params::<f64>(0)?.iter() {
            shared.insert_entry(name.clone(), store.value(name)?.clone(), e.group, e.trainable)?;
        }
        let y = uni.forward(&mut g, &shared, Some(x_rgb), Some(x_depth), &[MaskState::NONE; 2])?;
        diff_a = diff_a.max(g.value(y.primary()).max_abs_diff(g.value(head)));
    }

    // (b) m3l without pseudo-labels or EMA against sup_only.
    let base = small_config(ModelKind::Lf, TrainMode::SupOnly);
    let ds = small_dataset(&base);
    let model = base.model_spec()?;
    let init = model.init_params::<f32>(0)?;
    let sup = train(&model, &base.trainer, &ds, init.clone())?;
    let mut reduced = base.trainer.clone();
    reduced.mode = TrainMode::M3l;
    reduced.lambda_pseudo = 0.0;
    reduced.ema = false;
    let m3l = train(&model, &reduced, &ds, init)?;
    let same_b = sup.history.len() == m3l.history.len()
        && sup.history.iter().zip(&m3l.history).all(|(a, b)| {
            a.l_s.to_bits() == b.l_s.to_bits() && a.l_total.to_bits() == b.l_total.to_bits() && a.val_miou == b.val_miou
        });

    // (c) OHEM keeping everything is plain cross-entropy.
    let mut diff_c = 0.0f64;
    for case in 0..50 {
        let mut r = rng(100 + case);
        let logits: Vec<f64> = (0..4 * 64).map(|_| r.gen_range(-4.0..4.0)).collect();
        let labels: Vec<u8> = (0..64).map(|_| if r.gen_bool(0.1) { IGNORE } else { r.gen_range(0..4) }).collect();
        let mut g = Graph::no_grad();
        let x = g.constant(NdArray::from_vec([1, 4, 8, 8], logits).expect("shape"));
        let o = ohem_ce(&mut g, x, &labels, 1.0, 64)?;
        let c = cross_entropy(&mut g, x, &labels)?;
        diff_c = diff_c.max((g.value(o).item() - g.value(c).item()).abs());
    }
    Ok((
        diff_a < 1e-6 && same_b && diff_c < 1e-7,
        format!("(a) max |logit diff| {diff_a:.1e}; (b) bit-identical {same_b}; (c) max |diff| {diff_c:.1e}"),
    ))
}

fn brute_metrics(pred: &[u8], gt: &[u8], classes: u8) -> Metrics {
    let valid: Vec<(u8, u8)> = pred.iter().zip(gt).filter(|p| *p.1 != IGNORE).map(|(&p, &t)| (p, t)).collect();
    let (mut iou, mut ni, mut acc, mut na) = (0.0, 0, 0.0, 0);
    for c in 0..classes {
        let inter = valid.iter().filter(|&&(p, t)| p == c && t == c).count();
        let union = valid.iter().filter(|&&(p, t)| p == c || t == c).count();
        let gt_c = valid.iter().filter(|&&(_, t)| t == c).count();
        if union > 0 {
            iou += inter as f64 / union as f64;
            ni += 1;
        }
        if gt_c > 0 {
            acc += inter as f64 / gt_c as f64;
            na += 1;
        }
    }
    let correct = valid.iter().filter(|(p, t)| p == t).count();
    Metrics {
        miou: iou / ni as f64,
        macc: acc / na as f64,
        pixacc: correct as f64 / valid.len() as f64,
    }
}

fn ohem_sort_oracle(logits: &[f64], labels: &[u8], c: usize, threshold: f64, min_kept: usize) -> f64 {
    let px = labels.len();
    let mut probs: Vec<(f64, usize)> = Vec::new();
    for p in 0..px {
        if labels[p] == IGNORE {
            continue;
        }
        let z: Vec<f64> = (0..c).map(|k| logits[k * px + p]).collect();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
        probs.push(((z[labels[p] as usize] - mx).exp() / s, p));
    }
    probs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let hard = probs.iter().filter(|q| q.0 < threshold).count();
    let keep = if hard >= min_kept { hard } else { min_kept.min(probs.len()) };
    if keep == 0 {
        return 0.0;
    }
    probs[..keep].iter().map(|q| -q.0.ln()).sum::<f64>() / keep as f64
}

fn c4_oracles() -> Outcome {
    let mut metric_ok = true;
    for case in 0..50 {
        let mut r = rng(200 + case);
        let classes = r.gen_range(2..6u8);
        let pred: Vec<u8> = (0..64).map(|_| r.gen_range(0..classes)).collect();
        let mut gt: Vec<u8> = (0..64).map(|_| if r.gen_bool(0.1) { IGNORE } else { r.gen_range(0..classes) }).collect();
        gt[0] = 0;
        let mut cm = ConfusionMatrix::new(classes as usize);
        cm.accumulate(&pred, &gt)?;
        metric_ok &= cm.metrics()? == brute_metrics(&pred, &gt, classes);
    }

    let mut ohem_err = 0.0f64;
    for case in 0..50 {
        let mut r = rng(300 + case);
        let c = 4;
        let logits: Vec<f64> = (0..c * 64).map(|_| r.gen_range(-4.0..4.0)).collect();
        let labels: Vec<u8> = (0..64).map(|_| if r.gen_bool(0.1) { IGNORE } else { r.gen_range(0..c as u8) }).collect();
        let threshold = r.gen_range(0.05..1.0);
        let min_kept = r.gen_range(1..80);
        let mut g = Graph::no_grad();
        let x = g.constant(NdArray::from_vec([1, c, 8, 8], logits.clone()).expect("shape"));
        let loss = ohem_ce(&mut g, x, &labels, threshold, min_kept)?;
        let got = g.value(loss).item();
        ohem_err = ohem_err.max((got - ohem_sort_oracle(&logits, &labels, c, threshold, min_kept)).abs());
    }

    let mut ema_err = 0.0f64;
    for case in 0..20 {
        let mut r = rng(400 + case);
        let t0: Vec<f64> = (0..16).map(|_| r.gen_range(-3.0..3.0)).collect();
        let s: Vec<f64> = (0..16).map(|_| r.gen_range(-3.0..3.0)).collect();
        let (alpha, steps) = (r.gen_range(0.5..0.999), r.gen_range(1..30));
        let store = |v: &[f64]| {
            let mut p = ParamStore::new();
            p.insert("w", NdArray::from_vec([16], v.to_vec()).expect("shape"), m3l_core::numerics::Group::Other)
                .expect("fresh store");
            p
        };
        let (mut teacher, student) = (store(&t0), store(&s));
        for _ in 0..steps {
            ema_update(&mut teacher, &student, alpha)?;
        }
        let a = alpha.powi(steps);
        for (i, v) in teacher.value("w")?.data().iter().enumerate() {
            ema_err = ema_err.max((v - (a * t0[i] + (1.0 - a) * s[i])).abs());
        }
    }

    let mut argmax_ok = true;
    for case in 0..20 {
        let mut r = rng(500 + case);
        let (b, c) = (2, r.gen_range(2..6));
        let data: Vec<f64> = (0..b * c * 16).map(|_| r.gen_range(0..4) as f64).collect();
        let labels = make_pseudo_labels(&NdArray::from_vec([b, c, 4, 4], data.clone())?)?;
        for bi in 0..b {
            for p in 0..16 {
                let at = |k: usize| data[(bi * c + k) * 16 + p];
                let best = (1..c).fold(0, |best, k| if at(k) > at(best) { k } else { best });
                argmax_ok &= labels[bi * 16 + p] as usize == best;
            }
        }
    }
    Ok((
        metric_ok && ohem_err < 1e-6 && ema_err < 1e-7 && argmax_ok,
        format!("metrics exact {metric_ok}; OHEM max err {ohem_err:.1e}; EMA max err {ema_err:.1e}; argmax {argmax_ok}"),
    ))
}

fn c5_masking() -> Outcome {
    let cfg = small_config(ModelKind::Lf, TrainMode::M3l);
    let ds = small_dataset(&cfg);
    let run = run_training(&cfg, &ds, None, None)?;
    let model = cfg.model_spec()?;
    let mut all_same = true;
    let mut checked = 0;
    for fill in [Fill::LearnedToken, Fill::Zeros] {
        for missing in Modality::ALL {
            let masks = [MaskState::new(Some(missing), fill); 4];
            let mut reference = None;
            for seed in [Some(1u64), Some(2), Some(3), None] {
                let mut g = Graph::<f32>::no_grad();
                let mut r = rng(77);
                let mut img = |c: usize| NdArray::from_vec([4, c, 8, 8], (0..4 * c * 64).map(|_| r.gen()).collect()).expect("shape");
                let (present_rgb, present_depth) = (img(3), img(1));
                let other = seed.map(|s| {
                    let mut r = rng(s);
                    NdArray::from_vec([4, missing.channels(), 8, 8], (0..4 * missing.channels() * 64).map(|_| r.gen::<f32>() * 10.0 - 5.0).collect())
                        .expect("shape")
                });
                let (x_rgb, x_depth) = match missing {
                    Modality::Rgb => (other, Some(present_depth)),
                    Modality::Depth => (Some(present_rgb), other),
                };
                let x_rgb = x_rgb.map(|a| g.constant(a));
                let x_depth = x_depth.map(|a| g.constant(a));
                let out = model.forward(&mut g, &run.best, x_rgb, x_depth, &masks)?;
                let y = g.value(out.primary()).clone();
                match &reference {
                    None => reference = Some(y),
                    Some(r0) => all_same &= *r0 == y,
                }
                checked += 1;
            }
        }
    }
    Ok((all_same, format!("{checked} forwards across both fills and both missing modalities")))
}

fn c7_determinism() -> Outcome {
    let cfg = small_config(ModelKind::Tf, TrainMode::M3l);
    let ds = small_dataset(&cfg);
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let mut csvs = Vec::new();
    for d in &dirs {
        let run = run_training(&cfg, &ds, None, Some(d.path()))?;
        let reports = evaluate_test(&cfg, &cfg.model_spec()?, &run.best, &ds)?;
        csvs.push((std::fs::read(d.path().join("history.csv"))?, to_csv(&reports)?));
    }
    let same_csv = csvs[0] == csvs[1];
    let ck = Checkpoint::<f32>::load(&dirs[0].path().join("best.ntc"))?;
    let reloaded = Checkpoint::<f32>::load(&dirs[1].path().join("best.ntc"))?;
    let model = cfg.model_spec()?;
    let forward = |p: &ParamStore<f32>| -> Result<NdArray<f32>> {
        let mut g = Graph::<f32>::no_grad();
        let r = g.constant(NdArray::full([2, 3, 8, 8], 0.25));
        let d = g.constant(NdArray::full([2, 1, 8, 8], 0.75));
        let out = model.forward(&mut g, p, Some(r), Some(d), &[MaskState::NONE; 2])?;
        Ok(g.value(out.primary()).clone())
    };
    let run = run_training(&cfg, &ds, None, None)?;
    let same_forward = forward(&run.best)? == forward(&ck.params)? && ck.params == reloaded.params;
    Ok((
        same_csv && same_forward,
        format!("metrics CSVs identical {same_csv}; reloaded forward bit-exact {same_forward}"),
    ))
}

fn c8_mask_proportions() -> Outcome {
    let mut r = rng(8);
    let mut counts = [0usize; 3];
    for _ in 0..30_000 {
        counts[match choose_mask(&mut r).masked {
            None => 0,
            Some(Modality::Rgb) => 1,
            Some(Modality::Depth) => 2,
        }] += 1;
    }
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / 30_000.0).collect();
    Ok((
        f.iter().all(|v| (0.32..=0.35).contains(v)),
        format!("none {:.4}, rgb {:.4}, depth {:.4}", f[0], f[1], f[2]),
    ))
}

fn bench_config() -> Result<RunConfig> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/bench.json");
    Ok(RunConfig::load(&path)?)
}

fn workers() -> usize {
    std::env::var("M3L_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

struct Medians(Vec<EvalReport>);

impl Medians {
    fn get(&self, method: &str, mode: &str, fill: Fill) -> Option<&EvalReport> {
        self.0.iter().find(|r| r.method == method && r.mode == mode && r.fill == fill)
    }

    fn miou(&self, method: &str, mode: &str, fill: Fill, s: Scenario) -> f64 {
        self.get(method, mode, fill).and_then(|r| r.scenarios.get(&s)).map_or(f64::NAN, |m| 100.0 * m.miou)
    }

    fn mm(&self, method: &str, mode: &str, fill: Fill) -> f64 {
        self.get(method, mode, fill).and_then(|r| r.mm_robust).map_or(f64::NAN, |m| 100.0 * m.miou)
    }

    /// MM-Robust at the better of the two fills.
    fn best_mm(&self, mode: &str) -> f64 {
        self.mm("lf", mode, Fill::LearnedToken).max(self.mm("lf", mode, Fill::Zeros))
    }

    /// rgbd mIoU minus the worse missing-modality mIoU.
    fn drop(&self, mode: &str, fill: Fill) -> f64 {
        let rgbd = self.miou("lf", mode, fill, Scenario::Rgbd);
        rgbd - self
            .miou("lf", mode, fill, Scenario::RgbOnly)
            .min(self.miou("lf", mode, fill, Scenario::DepthOnly))
    }
}

fn c6_experiment() -> Result<Vec<(String, bool, String)>> {
    let base = bench_config()?;
    let fraction = base.data.labeled_fraction;
    let mut cells = Vec::new();
    for seed in SUITE_SEEDS {
        for (model, mode) in [
            (ModelKind::Lf, TrainMode::SupOnly),
            (ModelKind::UniRgb, TrainMode::SupOnly),
            (ModelKind::UniDepth, TrainMode::SupOnly),
            (ModelKind::Lf, TrainMode::Mt),
            (ModelKind::Lf, TrainMode::MtMd),
            (ModelKind::Lf, TrainMode::M3l),
        ] {
            cells.push(CellKey { model, mode, fraction, seed });
        }
    }
    let plan = BenchPlan { cells };
    let (_tmp, root): (Option<tempfile::TempDir>, PathBuf) = match std::env::var_os("M3L_ACCEPTANCE_DIR") {
        Some(d) => (None, PathBuf::from(d)),
        None => {
            let t = tempfile::tempdir()?;
            let p = t.path().to_path_buf();
            (Some(t), p)
        }
    };
    let n = workers();
    println!("criterion 6: {} runs on {n} worker(s) under {}", plan.cells.len(), root.display());
    let summary = run_bench(&base, &plan, &root, n, &|msg| println!("  {msg}"))?;
    println!("{}", std::fs::read_to_string(root.join("table.md"))?);
    let m = Medians(summary.medians);

    let lf = m.miou("lf", "sup_only", Fill::Zeros, Scenario::Rgbd);
    let uni = m
        .miou("uni_rgb", "sup_only", Fill::Zeros, Scenario::Rgbd)
        .max(m.miou("uni_depth", "sup_only", Fill::Zeros, Scenario::Rgbd));
    let m3l = m.mm("lf", "m3l", Fill::LearnedToken);
    let mt = m.best_mm("mt");
    let mt_md = m.best_mm("mt_md");
    let mt_drop = m.drop("mt", Fill::Zeros);
    let m3l_drop = m.drop("m3l", Fill::LearnedToken);
    Ok(vec![
        (
            "6a".into(),
            lf - uni >= 2.0,
            format!("LF sup_only rgbd {lf:.2} vs best uni-modal {uni:.2} (margin {:.2}, need >= 2)", lf - uni),
        ),
        (
            "6b".into(),
            m3l - mt >= 3.0,
            format!("MM-Robust m3l {m3l:.2} vs mt {mt:.2} (margin {:.2}, need >= 3)", m3l - mt),
        ),
        (
            "6c".into(),
            mt_drop >= 10.0 && m3l_drop <= 0.5 * mt_drop,
            format!("worst-case drop: mt zero-fill {mt_drop:.2} (need >= 10), m3l {m3l_drop:.2} (need <= {:.2})", 0.5 * mt_drop),
        ),
        (
            "6d".into(),
            m3l >= mt_md && mt_md >= mt,
            format!("MM-Robust m3l {m3l:.2} >= mt_md {mt_md:.2} >= mt {mt:.2}"),
        ),
    ])
}

fn report(results: &mut Vec<(String, bool)>, id: &str, started: Instant, outcome: Outcome) {
    let secs = started.elapsed().as_secs_f64();
    let (ok, detail) = match outcome {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    println!("{} criterion {id}: {detail} [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
    results.push((id.to_string(), ok));
}

fn main() {
    let mut results = Vec::new();
    let checks: [(&str, fn() -> Outcome); 7] = [
        ("1", c1_mm_arithmetic),
        ("2", c2_gradients),
        ("3", c3_reductions),
        ("4", c4_oracles),
        ("5", c5_masking),
        ("7", c7_determinism),
        ("8", c8_mask_proportions),
    ];
    for (id, f) in checks {
        report(&mut results, id, Instant::now(), f());
    }
    let started = Instant::now();
    match c6_experiment() {
        Ok(parts) => {
            for (id, ok, detail) in parts {
                report(&mut results, &id, started, Ok((ok, detail)));
            }
        }
        Err(e) => report(&mut results, "6", started, Err(e)),
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
