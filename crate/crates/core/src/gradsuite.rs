//! Finite-difference checks of every differentiable op and of the full
//! models with their training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::Modality;
use crate::error::Result;
use crate::fusion::{ensemble, linear_fuse, Fill, FusionConfig, MaskState, ModelKind, SegModel};
use crate::losses::{supervised_loss, total_loss, unsupervised_loss, OhemConfig};
use crate::numerics::gradcheck::{grad_check_all, GradCheckOptions};
use crate::numerics::{Graph, Group, NdArray, ParamStore, Var};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    /// Worst error per check name, in first-seen order.
    pub fn per_name(&self) -> Vec<(String, f64, bool)> {
        let mut out: Vec<(String, f64, bool)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(n, ..)| *n == e.name) {
                Some(row) => {
                    row.1 = row.1.max(e.max_rel_error);
                    row.2 &= e.passed;
                }
                None => out.push((e.name.clone(), e.max_rel_error, e.passed)),
            }
        }
        out
    }
}

type Builder = Box<dyn FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

struct Case {
    name: &'static str,
    store: ParamStore<f64>,
    build: Builder,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NdArray<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    NdArray::from_vec(shape.to_vec(), data).expect("shape")
}

/// Values bounded away from zero, so a kink never sits inside the stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    NdArray::from_vec(shape.to_vec(), data).expect("shape")
}

/// Reduce `y` to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn store(rng: &mut ChaCha8Rng, items: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in items {
        s.insert(*name, random(rng, shape, -1.0, 1.0), Group::Other).expect("unique");
    }
    s
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, $store:expr, |$g:ident, $s:ident| $body:expr) => {
            cases.push(Case {
                name: $name,
                store: $store,
                build: Box::new(move |$g: &mut Graph<f64>, $s: &ParamStore<f64>| {
                    let y = $body;
                    weighted($g, y, seed)
                }),
            })
        };
    }
    let ab = |rng: &mut ChaCha8Rng, sb: &[usize]| store(rng, &[("a", &[2, 3, 4]), ("b", sb)]);
    case!("add", ab(&mut rng, &[3, 4]), |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.add(a, b)?
    });
    case!("sub", ab(&mut rng, &[2, 1, 4]), |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.sub(a, b)?
    });
    case!("mul", ab(&mut rng, &[2, 1, 4]), |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.mul(a, b)?
    });
    case!("mul_same", ab(&mut rng, &[2, 3, 4]), |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.mul(a, b)?
    });
    case!("scale", store(&mut rng, &[("x", &[3, 4])]), |g, s| {
        let x = g.param(s, "x")?;
        g.scale(x, -1.7)?
    });
    case!("add_scalar", store(&mut rng, &[("x", &[3, 4])]), |g, s| {
        let x = g.param(s, "x")?;
        let y = g.add_scalar(x, 0.3)?;
        g.mul(y, y)?
    });
    case!("gelu", store(&mut rng, &[("x", &[3, 5])]), |g, s| {
        let x = g.param(s, "x")?;
        let x = g.scale(x, 3.0)?;
        g.gelu(x)?
    });
    let mut relu_store = ParamStore::new();
    relu_store.insert("x", off_zero(&mut rng, &[4, 5]), Group::Other).expect("unique");
    case!("relu", relu_store, |g, s| {
        let x = g.param(s, "x")?;
        g.relu(x)?
    });
    case!("sigmoid", store(&mut rng, &[("x", &[3, 5])]), |g, s| {
        let x = g.param(s, "x")?;
        let x = g.scale(x, 4.0)?;
        g.sigmoid(x)?
    });
    case!("matmul", store(&mut rng, &[("a", &[2, 3, 4]), ("b", &[4, 5])]), |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.matmul(a, b)?
    });
    case!("matmul_batched", store(&mut rng, &[("a", &[2, 3, 4]), ("b", &[2, 4, 2])]), |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.matmul(a, b)?
    });
    case!("permute", store(&mut rng, &[("x", &[2, 3, 4])]), |g, s| {
        let x = g.param(s, "x")?;
        g.permute(x, &[2, 0, 1])?
    });
    case!("transpose", store(&mut rng, &[("x", &[2, 3, 4])]), |g, s| {
        let x = g.param(s, "x")?;
        g.transpose(x)?
    });
    case!("reshape", store(&mut rng, &[("x", &[2, 6])]), |g, s| {
        let x = g.param(s, "x")?;
        g.reshape(x, &[3, 4])?
    });
    case!("broadcast_to", store(&mut rng, &[("x", &[1, 4])]), |g, s| {
        let x = g.param(s, "x")?;
        g.broadcast_to(x, &[3, 4])?
    });
    case!("concat", store(&mut rng, &[("a", &[2, 2, 3]), ("b", &[2, 1, 3])]), |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.concat(&[a, b, a], 1)?
    });
    case!("slice", store(&mut rng, &[("x", &[2, 5, 3])]), |g, s| {
        let x = g.param(s, "x")?;
        g.slice(x, 1, 1, 3)?
    });
    case!("sum", store(&mut rng, &[("x", &[3, 4])]), |g, s| {
        let x = g.param(s, "x")?;
        let y = g.mul(x, x)?;
        g.sum(y)?
    });
    case!("mean", store(&mut rng, &[("x", &[3, 4])]), |g, s| {
        let x = g.param(s, "x")?;
        let y = g.mul(x, x)?;
        g.mean(y)?
    });
    case!(
        "layer_norm",
        store(&mut rng, &[("x", &[3, 5]), ("gamma", &[5]), ("beta", &[5])]),
        |g, s| {
            let (x, ga, be) = (g.param(s, "x")?, g.param(s, "gamma")?, g.param(s, "beta")?);
            g.layer_norm(x, ga, be, 1e-6)?
        }
    );
    case!("softmax", store(&mut rng, &[("x", &[2, 4, 3])]), |g, s| {
        let x = g.param(s, "x")?;
        g.softmax(x, 1)?
    });
    case!("bilinear_up", store(&mut rng, &[("x", &[1, 2, 3, 3])]), |g, s| {
        let x = g.param(s, "x")?;
        g.bilinear_resize(x, 5, 4)?
    });
    case!("bilinear_down", store(&mut rng, &[("x", &[1, 2, 5, 4])]), |g, s| {
        let x = g.param(s, "x")?;
        g.bilinear_resize(x, 2, 3)?
    });
    case!("patch_unfold", store(&mut rng, &[("x", &[2, 2, 5, 5])]), |g, s| {
        let x = g.param(s, "x")?;
        g.patch_unfold(x, 3, 2)?
    });
    case!("select", store(&mut rng, &[("a", &[3, 2, 2]), ("b", &[3, 2, 2])]), |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.select(&[true, false, true], a, b)?
    });
    case!("gather", store(&mut rng, &[("x", &[2, 5])]), |g, s| {
        let x = g.param(s, "x")?;
        let y = g.gather(x, &[4, 0])?;
        g.mul(y, y)?
    });
    let targets: Vec<usize> = (0..8).map(|_| rng.gen_range(0..3)).collect();
    let weights: Vec<f64> = (0..8).map(|i| if i == 5 { 0.0 } else { rng.gen_range(0.1..1.0) }).collect();
    case!("pixel_cross_entropy", store(&mut rng, &[("x", &[2, 3, 2, 2])]), |g, s| {
        let x = g.param(s, "x")?;
        let x = g.scale(x, 3.0)?;
        g.pixel_cross_entropy(x, &targets, &weights)?
    });
    case!("linear_fuse", store(&mut rng, &[("a", &[2, 3]), ("b", &[2, 3])]), |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let (x, y) = linear_fuse(g, a, b, 0.7)?;
        g.concat(&[x, y], 0)?
    });
    case!(
        "ensemble",
        store(&mut rng, &[("a", &[1, 2, 3]), ("b", &[1, 2, 3]), ("l", &[1])]),
        |g, s| {
            let (a, b, l) = (g.param(s, "a")?, g.param(s, "b")?, g.param(s, "l")?);
            ensemble(g, a, b, l)?
        }
    );
    cases
}

/// Random inputs, labels and masks for one model check.
fn model_case(kind: ModelKind, seed: u64) -> Result<Case> {
    // A threshold near the typical initial score makes exchanges happen.
    let fusion = FusionConfig {
        exchange_threshold: 0.45,
        sparsity_weight: 0.1,
        ..FusionConfig::default()
    };
    let model = SegModel::tiny(kind, fusion)?;
    let mut store = model.init_params::<f64>(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    // Move off the initialisation: zero biases and tokens would leave a
    // zero-filled branch with all-zero tokens, where layer norm is too
    // curved for a finite-difference stencil.
    for (_, e) in store.iter_mut() {
        let noise = random(&mut rng, e.value.shape(), -0.2, 0.2);
        for (v, n) in e.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let rgb = random(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let depth = random(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let mut labels: Vec<u8> = (0..128).map(|_| rng.gen_range(0..3)).collect();
    labels[7] = crate::losses::IGNORE;
    let pseudo: Vec<u8> = (0..128).map(|_| rng.gen_range(0..3)).collect();
    let fill = if kind.has_mask_tokens() { Fill::LearnedToken } else { Fill::Zeros };
    let masked = match kind.unimodal() {
        Some(m) => m.other(),
        None => Modality::Depth,
    };
    let masks = [MaskState::NONE, MaskState::new(Some(masked), fill)];
    let name = match kind {
        ModelKind::Lf => "model_lf",
        ModelKind::Tf => "model_tf",
        ModelKind::Urn => "model_urn",
        ModelKind::UniRgb => "model_uni_rgb",
        ModelKind::UniDepth => "model_uni_depth",
    };
    let ohem = OhemConfig {
        min_kept_floor: 8,
        ..OhemConfig::default()
    };
    Ok(Case {
        name,
        store,
        build: Box::new(move |g, s| {
            let (r, d) = (g.constant(rgb.clone()), g.constant(depth.clone()));
            let sup_out = model.forward(g, s, Some(r), Some(d), &[MaskState::NONE; 2])?;
            let l_s = supervised_loss(g, &sup_out, &labels, &ohem)?;
            let out = model.forward(g, s, Some(r), Some(d), &masks)?;
            let l_u = unsupervised_loss(g, &out, &pseudo)?;
            let sparsity = out.sparsity.map(|v| (v, model.fusion.sparsity_weight));
            total_loss(g, l_s.mean, Some((l_u.mean, 0.5)), sparsity)
        }),
    })
}

pub const SUITE_SEEDS: [u64; 3] = [0, 1, 2];

fn run_case(mut case: Case, seed: u64, opts: &GradCheckOptions) -> Result<SuiteEntry> {
    let reports = grad_check_all(&case.store, opts, &mut case.build)?;
    Ok(SuiteEntry {
        name: case.name.to_string(),
        seed,
        checked: reports.iter().map(|r| r.checked).sum(),
        max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        passed: reports.iter().all(|r| r.passed),
    })
}

/// Every op and every model kind over `seeds`. `model_elements` caps the
/// checked elements per model parameter. A `corrupt` factor other than 1
/// turns the run into a negative control.
pub fn run_suite(seeds: &[u64], model_elements: Option<usize>, corrupt: f64) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for &seed in seeds {
        let opts = GradCheckOptions {
            seed,
            corrupt,
            ..GradCheckOptions::default()
        };
        for case in op_cases(seed) {
            report.entries.push(run_case(case, seed, &opts)?);
        }
        let model_opts = GradCheckOptions {
            max_elements: model_elements,
            ..opts.clone()
        };
        for kind in ModelKind::ALL {
            report.entries.push(run_case(model_case(kind, seed)?, seed, &model_opts)?);
        }
    }
    Ok(report)
}

pub fn suite_markdown(report: &SuiteReport) -> String {
    let mut out = String::from("| check | max rel error | result |\n|---|---|---|\n");
    for (name, err, ok) in report.per_name() {
        out.push_str(&format!("| {name} | {err:.3e} | {} |\n", if ok { "pass" } else { "FAIL" }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_and_corruption_fails() {
        let mut ok = SuiteReport::default();
        let opts = GradCheckOptions::default();
        for case in op_cases(5) {
            ok.entries.push(run_case(case, 5, &opts).unwrap());
        }
        assert!(ok.passed(), "{}", suite_markdown(&ok));
        let bad_opts = GradCheckOptions {
            corrupt: 1.01,
            ..opts
        };
        let bad = run_case(op_cases(5).remove(0), 5, &bad_opts).unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn model_checks_pass() {
        let report = run_suite(&[0], Some(6), 1.0).unwrap();
        assert!(report.passed(), "{}", suite_markdown(&report));
        println!("{}", suite_markdown(&report));
    }
}
