//! Segmentation objectives over `[B, C, H, W]` logits and `u8` label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ModelOutput;
use crate::numerics::{Graph, Scalar, Var};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OhemConfig {
    pub threshold: f64,
    /// `min_kept = max(min_kept_floor, valid / min_kept_divisor)`.
    pub min_kept_floor: usize,
    pub min_kept_divisor: usize,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            threshold: 0.7,
            min_kept_floor: 256,
            min_kept_divisor: 16,
        }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("ohem threshold {} outside (0, 1]", self.threshold)));
        }
        if self.min_kept_floor == 0 || self.min_kept_divisor == 0 {
            return Err(Error::Config("ohem min_kept floor and divisor must be positive".into()));
        }
        Ok(())
    }

    pub fn min_kept(&self, valid: usize) -> usize {
        self.min_kept_floor.max(valid / self.min_kept_divisor)
    }
}

fn check_labels<T: Scalar>(g: &Graph<T>, logits: Var, labels: &[u8]) -> Result<(usize, usize)> {
    let s = g.shape(logits);
    if s.len() < 2 {
        return Err(Error::shape("loss", format!("logits need [B, C, ..], got {s:?}")));
    }
    let c = s[1];
    let px = s[0] * s[2..].iter().product::<usize>();
    if labels.len() != px {
        return Err(Error::shape("loss", format!("{} labels for {px} pixels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE && l as usize >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            classes: c,
        });
    }
    Ok((c, px))
}

fn targets(labels: &[u8]) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| if l == IGNORE { 0 } else { l as usize })
        .collect()
}

/// Mean cross-entropy over the non-ignored pixels of the batch. A batch with
/// no valid pixel gives 0.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    check_labels(g, logits, labels)?;
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    let w = if valid == 0 {
        T::zero()
    } else {
        T::one() / T::from_f64(valid as f64)
    };
    let weights: Vec<T> = labels
        .iter()
        .map(|&l| if l == IGNORE { T::zero() } else { w })
        .collect();
    g.pixel_cross_entropy(logits, &targets(labels), &weights)
}

/// Softmax probability of the labelled class at every pixel (ignored pixels
/// get `None`).
pub fn true_class_probs<T: Scalar>(g: &Graph<T>, logits: Var, labels: &[u8]) -> Result<Vec<Option<f64>>> {
    let (c, _) = check_labels(g, logits, labels)?;
    let s = g.shape(logits);
    let hw: usize = s[2..].iter().product();
    let x = g.value(logits).data();
    let mut out = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            out.push(None);
            continue;
        }
        let (b, p) = (i / hw, i % hw);
        let base = b * c * hw + p;
        let mx = (0..c).map(|k| x[base + k * hw].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (x[base + k * hw].as_f64() - mx).exp()).sum();
        out.push(Some((x[base + l as usize * hw].as_f64() - mx).exp() / z));
    }
    Ok(out)
}

/// Indices of the pixels OHEM trains on: every valid pixel whose true-class
/// probability is below `threshold`, or, if that leaves fewer than
/// `min_kept`, the `min_kept` lowest-probability pixels (ties by index).
pub fn ohem_select(probs: &[Option<f64>], threshold: f64, min_kept: usize) -> Vec<usize> {
    let mut valid: Vec<(f64, usize)> = probs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (p, i)))
        .collect();
    let hard: Vec<usize> = valid.iter().filter(|(p, _)| *p < threshold).map(|&(_, i)| i).collect();
    if hard.len() >= min_kept {
        return hard;
    }
    valid.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = valid.into_iter().take(min_kept).map(|(_, i)| i).collect();
    kept.sort_unstable();
    kept
}

/// Cross-entropy averaged over the pixels chosen by [`ohem_select`].
pub fn ohem_ce<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8], threshold: f64, min_kept: usize) -> Result<Var> {
    if !(threshold > 0.0 && threshold <= 1.0) || min_kept == 0 {
        return Err(Error::InvalidArgument(format!(
            "ohem needs threshold in (0, 1] and min_kept >= 1, got {threshold} and {min_kept}"
        )));
    }
    let probs = true_class_probs(g, logits, labels)?;
    let kept = ohem_select(&probs, threshold, min_kept);
    let mut weights = vec![T::zero(); labels.len()];
    if !kept.is_empty() {
        let w = T::one() / T::from_f64(kept.len() as f64);
        for i in kept {
            weights[i] = w;
        }
    }
    g.pixel_cross_entropy(logits, &targets(labels), &weights)
}

/// OHEM with the configured threshold and batch-dependent `min_kept`.
pub fn ohem_default<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8], cfg: &OhemConfig) -> Result<Var> {
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    ohem_ce(g, logits, labels, cfg.threshold, cfg.min_kept(valid))
}

/// A loss averaged over a model's heads, with the per-head terms kept.
#[derive(Clone, Debug)]
pub struct HeadLosses {
    pub mean: Var,
    pub per_head: Vec<Var>,
}

fn average_heads<T: Scalar>(g: &mut Graph<T>, per_head: Vec<Var>) -> Result<HeadLosses> {
    let mut acc = per_head[0];
    for &h in &per_head[1..] {
        acc = g.add(acc, h)?;
    }
    let mean = g.scale(acc, T::one() / T::from_f64(per_head.len() as f64))?;
    Ok(HeadLosses { mean, per_head })
}

/// OHEM against ground truth, averaged over every head of the output.
pub fn supervised_loss<T: Scalar>(g: &mut Graph<T>, out: &ModelOutput, labels: &[u8], cfg: &OhemConfig) -> Result<HeadLosses> {
    let per_head = out
        .all_heads()
        .into_iter()
        .map(|h| ohem_default(g, h, labels, cfg))
        .collect::<Result<Vec<_>>>()?;
    average_heads(g, per_head)
}

/// Plain cross-entropy against hard pseudo-labels, averaged over heads.
pub fn unsupervised_loss<T: Scalar>(g: &mut Graph<T>, out: &ModelOutput, pseudo: &[u8]) -> Result<HeadLosses> {
    if pseudo.contains(&IGNORE) {
        return Err(Error::InvalidArgument("pseudo-labels cannot contain the ignore value".into()));
    }
    let per_head = out
        .all_heads()
        .into_iter()
        .map(|h| cross_entropy(g, h, pseudo))
        .collect::<Result<Vec<_>>>()?;
    average_heads(g, per_head)
}

/// `l_s + lambda_pseudo * l_u (+ sparsity_weight * sparsity)` as a graph node.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    l_s: Var,
    l_u: Option<(Var, f64)>,
    sparsity: Option<(Var, f64)>,
) -> Result<Var> {
    let mut total = l_s;
    for (term, weight) in [l_u, sparsity].into_iter().flatten() {
        if weight < 0.0 {
            return Err(Error::InvalidArgument(format!("negative loss weight {weight}")));
        }
        let t = g.scale(term, T::from_f64(weight))?;
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Scalar loss values of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_s: f64,
    pub l_u: f64,
    pub l_total: f64,
    /// Per-head supervised terms: ensemble, rgb, depth (or the single head).
    pub sup_heads: Vec<f64>,
    pub unsup_heads: Vec<f64>,
    pub sparsity: Option<f64>,
    pub lambda_pseudo: f64,
    pub sparsity_weight: f64,
}

impl LossReport {
    pub fn compose(
        l_s: f64,
        l_u: f64,
        lambda_pseudo: f64,
        sparsity: Option<f64>,
        sparsity_weight: f64,
        sup_heads: Vec<f64>,
        unsup_heads: Vec<f64>,
    ) -> Self {
        let mut r = LossReport {
            l_s,
            l_u,
            l_total: 0.0,
            sup_heads,
            unsup_heads,
            sparsity,
            lambda_pseudo,
            sparsity_weight,
        };
        r.l_total = r.expected_total();
        r
    }

    /// The total recomputed from the components.
    pub fn expected_total(&self) -> f64 {
        self.l_s + self.lambda_pseudo * self.l_u + self.sparsity.map_or(0.0, |s| self.sparsity_weight * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NdArray;

    fn logits(g: &mut Graph<f64>, c: usize, hw: usize, vals: &[f64]) -> Var {
        g.constant(NdArray::from_f64_slice([1, c, 1, hw], vals).unwrap())
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut g = Graph::new();
        let x = logits(&mut g, 4, 3, &[0.0; 12]);
        let l = cross_entropy(&mut g, x, &[0, 3, 2]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_pixel() {
        let mut g = Graph::new();
        let x = logits(&mut g, 2, 1, &[10.0, 0.0]);
        let l = cross_entropy(&mut g, x, &[0]).unwrap();
        let want = (1.0 + (-10f64).exp()).ln();
        assert!((g.value(l).item() - want).abs() < 1e-15);
        assert!((want - 4.5399e-5).abs() < 1e-9);
    }

    #[test]
    fn all_ignored_is_zero_with_zero_gradient() {
        use crate::numerics::{Group, ParamStore};
        let mut s = ParamStore::<f64>::new();
        s.insert("x", NdArray::from_f64_slice([1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), Group::Other)
            .unwrap();
        let mut g = Graph::new();
        let x = g.param(&s, "x").unwrap();
        let l = cross_entropy(&mut g, x, &[IGNORE, IGNORE]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get("x").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let mut g = Graph::new();
        let x = logits(&mut g, 2, 1, &[0.0, 0.0]);
        assert!(matches!(
            cross_entropy(&mut g, x, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn forced_keep_single_pixel() {
        let mut g = Graph::new();
        // p(class 0) = 0.99
        let z = (0.99f64 / 0.01).ln();
        let x = logits(&mut g, 2, 1, &[z, 0.0]);
        let l = ohem_ce(&mut g, x, &[0], 0.7, 1).unwrap();
        assert!((g.value(l).item() + 0.99f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ohem_reduces_to_ce_when_everything_is_hard() {
        let mut g = Graph::new();
        let x = logits(&mut g, 3, 4, &[0.1, 0.2, 0.0, -0.3, 0.0, 0.1, 0.2, 0.3, -0.1, 0.0, 0.1, 0.0]);
        let labels = [0, 1, 2, IGNORE];
        let a = ohem_ce(&mut g, x, &labels, 0.7, 1).unwrap();
        let b = cross_entropy(&mut g, x, &labels).unwrap();
        assert_eq!(g.value(a).item(), g.value(b).item());
    }

    #[test]
    fn report_total_is_composed_exactly() {
        let r = LossReport::compose(2.0, 3.0, 1.0, None, 0.0, vec![], vec![]);
        assert_eq!(r.l_total, 5.0);
        let r = LossReport::compose(0.3, 0.7, 0.0, Some(0.2), 1e-3, vec![], vec![]);
        assert_eq!(r.l_total, 0.3 + 0.0 * 0.7 + 1e-3 * 0.2);
    }
}
