//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor so that near-zero gradients compare absolutely.
    pub abs_floor: f64,
    /// Check at most this many elements per parameter (sampled), `None` for all.
    pub max_elements: Option<usize>,
    /// Multiplier applied to the analytic gradient. Anything but 1 is a
    /// negative control that should fail.
    pub corrupt: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_elements: None,
            corrupt: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub param: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval_scalar<F>(store: &ParamStore<f64>, build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::no_grad();
    let out = build(&mut g, store)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", format!("output must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Check the gradient of the scalar built by `build` with respect to `param`.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    param: &str,
    opts: &GradCheckOptions,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    Ok(grad_check_many(store, &[param], opts, &mut build)?.remove(0))
}

/// Check several parameters, sharing one analytic backward pass.
pub fn grad_check_many<F>(
    store: &ParamStore<f64>,
    params: &[&str],
    opts: &GradCheckOptions,
    build: &mut F,
) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("output must be scalar, got {:?}", g.shape(out)),
        ));
    }
    let grads = g.backward(out)?;
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut reports = Vec::with_capacity(params.len());
    for &name in params {
        let n = store.value(name)?.len();
        let zeros;
        let analytic = match grads.get(name) {
            Some(a) => a.data(),
            None => {
                zeros = vec![0.0; n];
                &zeros
            }
        };
        let mut idx: Vec<usize> = match opts.max_elements {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        idx.sort_unstable();
        let mut worst = 0.0f64;
        for &i in &idx {
            let orig = store.value(name)?.data()[i];
            probe.get_mut(name)?.value.data_mut()[i] = orig + opts.step;
            let fp = eval_scalar(&probe, build)?;
            probe.get_mut(name)?.value.data_mut()[i] = orig - opts.step;
            let fm = eval_scalar(&probe, build)?;
            probe.get_mut(name)?.value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[i] * opts.corrupt;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            worst = worst.max(rel);
        }
        reports.push(GradCheckReport {
            param: name.to_string(),
            checked: idx.len(),
            max_rel_error: worst,
            tolerance: opts.tolerance,
            passed: worst < opts.tolerance,
        });
    }
    Ok(reports)
}

/// Check every trainable parameter in `store`.
pub fn grad_check_all<F>(store: &ParamStore<f64>, opts: &GradCheckOptions, mut build: F) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    grad_check_many(store, &refs, opts, &mut build)
}
