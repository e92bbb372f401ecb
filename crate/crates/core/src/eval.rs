//! Segmentation metrics and the missing-modality evaluation protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Modality;
use crate::data::augment::resize_sample;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::fusion::{Fill, MaskState, SegModel};
use crate::losses::IGNORE;
use crate::numerics::{resize_bilinear, Graph, ParamStore, Scalar};
use crate::semisup::TrainMode;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape("confusion", format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    /// Count every non-ignored pixel.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("accumulate", format!("{} predictions, {} labels", pred.len(), gt.len())));
        }
        for (&p, &t) in pred.iter().zip(gt) {
            if t == IGNORE {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: p.max(t),
                    classes: self.classes,
                });
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("merge", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// mIoU over classes present in ground truth or prediction, mAcc over
    /// classes present in ground truth, and overall pixel accuracy.
    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyConfusion);
        }
        let c = self.classes;
        let (mut iou_sum, mut iou_n, mut acc_sum, mut acc_n, mut diag) = (0.0, 0usize, 0.0, 0usize, 0u64);
        for k in 0..c {
            let tp = self.get(k, k);
            let gt: u64 = (0..c).map(|p| self.get(k, p)).sum();
            let pred: u64 = (0..c).map(|t| self.get(t, k)).sum();
            diag += tp;
            let union = gt + pred - tp;
            if union > 0 {
                iou_sum += tp as f64 / union as f64;
                iou_n += 1;
            }
            if gt > 0 {
                acc_sum += tp as f64 / gt as f64;
                acc_n += 1;
            }
        }
        Ok(Metrics {
            miou: iou_sum / iou_n as f64,
            macc: acc_sum / acc_n as f64,
            pixacc: diag as f64 / total as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub macc: f64,
    pub pixacc: f64,
}

impl Metrics {
    fn map3(parts: &[Metrics], f: impl Fn(&[f64]) -> f64) -> Metrics {
        let pick = |g: fn(&Metrics) -> f64| f(&parts.iter().map(g).collect::<Vec<_>>());
        Metrics {
            miou: pick(|m| m.miou),
            macc: pick(|m| m.macc),
            pixacc: pick(|m| m.pixacc),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Rgbd,
    RgbOnly,
    DepthOnly,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Rgbd, Scenario::RgbOnly, Scenario::DepthOnly];

    /// The modality this scenario withholds.
    pub fn missing(self) -> Option<Modality> {
        match self {
            Scenario::Rgbd => None,
            Scenario::RgbOnly => Some(Modality::Depth),
            Scenario::DepthOnly => Some(Modality::Rgb),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Rgbd => "rgbd",
            Scenario::RgbOnly => "rgb_only",
            Scenario::DepthOnly => "depth_only",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

/// Average of the three scenario results. Errors unless all three are given.
pub fn mm_robust(parts: &BTreeMap<Scenario, Metrics>) -> Result<Metrics> {
    let vals = Scenario::ALL
        .iter()
        .map(|s| {
            parts
                .get(s)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("missing scenario {s}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::map3(&vals, |v| (v[0] + v[1] + v[2]) / 3.0))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub mode: String,
    pub fraction: f64,
    pub seed: u64,
    pub fill: Fill,
    pub scenarios: BTreeMap<Scenario, Metrics>,
    /// Present only when all three scenarios were evaluated.
    pub mm_robust: Option<Metrics>,
}

impl EvalReport {
    pub fn new(method: &str, mode: &str, fraction: f64, seed: u64, fill: Fill, scenarios: BTreeMap<Scenario, Metrics>) -> Self {
        let mm = mm_robust(&scenarios).ok();
        EvalReport {
            method: method.to_string(),
            mode: mode.to_string(),
            fraction,
            seed,
            fill,
            scenarios,
            mm_robust: mm,
        }
    }

    /// Per-scenario medians over several reports of the same cell. The
    /// aggregate's MM-Robust is the mean of the median scenarios.
    pub fn median_of(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("no reports to aggregate".into()))?;
        let mut scenarios = BTreeMap::new();
        for &s in first.scenarios.keys() {
            let parts = reports
                .iter()
                .map(|r| {
                    r.scenarios
                        .get(&s)
                        .copied()
                        .ok_or_else(|| Error::InvalidArgument(format!("report lacks scenario {s}")))
                })
                .collect::<Result<Vec<_>>>()?;
            scenarios.insert(s, Metrics::map3(&parts, median));
        }
        Ok(EvalReport::new(&first.method, &first.mode, first.fraction, first.seed, first.fill, scenarios))
    }
}

/// Run the protocol for one scenario on the samples at `indices`: resize the
/// inputs to the model size, predict with the missing modality absent,
/// resize logits back to the label size, then take the argmax.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_scenario<T: Scalar>(
    model: &SegModel,
    store: &ParamStore<T>,
    dataset: &Dataset,
    indices: &[usize],
    scenario: Scenario,
    fill: Fill,
    batch_size: usize,
) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    let (mh, mw) = (model.encoder.image_h, model.encoder.image_w);
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples = chunk.iter().map(|&i| dataset.get(i)).collect::<Result<Vec<_>>>()?;
        let resized: Vec<_> = samples.iter().map(|s| resize_sample(s, mh, mw)).collect();
        let batch = Batch::stack(&resized)?;
        let missing = scenario.missing();
        let mask = MaskState::new(missing, fill);
        let masks = vec![mask; batch.size];
        let mut g = Graph::<T>::no_grad();
        let rgb = (missing != Some(Modality::Rgb)).then(|| g.constant(batch.rgb_array()));
        let depth = (missing != Some(Modality::Depth)).then(|| g.constant(batch.depth_array()));
        let out = model.forward(&mut g, store, rgb, depth, &masks)?;
        let logits = g.value(out.primary());
        let c = model.num_classes();
        for (b, s) in samples.iter().enumerate() {
            let gt = s
                .label
                .as_ref()
                .ok_or_else(|| Error::Dataset("evaluation sample has no label map".into()))?;
            let one = logits.index_axis0(b);
            let full = resize_bilinear(&one, s.height, s.width)?;
            let (_, pred) = full.argmax(0)?;
            debug_assert_eq!(pred.len(), s.height * s.width);
            let pred: Vec<u8> = pred.into_iter().map(|p| p.min(c - 1) as u8).collect();
            cm.accumulate(&pred, gt)?;
        }
    }
    cm.metrics()
}

/// Evaluate several scenarios into one report.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar>(
    model: &SegModel,
    store: &ParamStore<T>,
    dataset: &Dataset,
    indices: &[usize],
    scenarios: &[Scenario],
    fill: Fill,
    meta: (&str, f64, u64),
    batch_size: usize,
) -> Result<EvalReport> {
    let mut parts = BTreeMap::new();
    for &s in scenarios {
        parts.insert(s, evaluate_scenario(model, store, dataset, indices, s, fill, batch_size)?);
    }
    Ok(EvalReport::new(model.kind.as_str(), meta.0, meta.1, meta.2, fill, parts))
}

const CSV_HEADER: &str = "method,mode,fraction,seed,scenario,fill,miou,macc,pixacc";

/// One line per (report, scenario); MM-Robust is derived on parse.
pub fn to_csv(reports: &[EvalReport]) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for field in [&r.method, &r.mode] {
            if field.contains([',', '\n', '"']) {
                return Err(Error::InvalidArgument(format!("field `{field}` cannot be written to CSV")));
            }
        }
        for (s, m) in &r.scenarios {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.method, r.mode, r.fraction, r.seed, s, r.fill, m.miou, m.macc, m.pixacc
            ));
        }
    }
    Ok(out)
}

pub fn parse_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("unexpected CSV header".into()));
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("line {}: expected 9 fields", n + 2)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", n + 2)));
        let fraction = num(f[2])?;
        let seed: u64 = f[3].parse().map_err(|e| Error::Format(format!("line {}: {e}", n + 2)))?;
        let scenario: Scenario = f[4].parse()?;
        let fill: Fill = f[5].parse()?;
        let m = Metrics {
            miou: num(f[6])?,
            macc: num(f[7])?,
            pixacc: num(f[8])?,
        };
        let same = |r: &EvalReport| r.method == f[0] && r.mode == f[1] && r.fraction == fraction && r.seed == seed && r.fill == fill;
        match reports.last_mut() {
            Some(r) if same(r) && !r.scenarios.contains_key(&scenario) => {
                r.scenarios.insert(scenario, m);
            }
            _ => reports.push(EvalReport::new(f[0], f[1], fraction, seed, fill, BTreeMap::from([(scenario, m)]))),
        }
    }
    for r in &mut reports {
        r.mm_robust = mm_robust(&r.scenarios).ok();
    }
    Ok(reports)
}

/// Markdown table of mIoU (x100) per scenario and MM-Robust, one row per
/// report, sorted by fraction then method; column maxima in bold.
pub fn bench_markdown(reports: &[EvalReport]) -> String {
    let mut rows: Vec<&EvalReport> = reports.iter().collect();
    // Modes in ablation order, unknown names last.
    let rank = |m: &str| TrainMode::ALL.iter().position(|t| t.as_str() == m).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| {
        a.fraction
            .total_cmp(&b.fraction)
            .then_with(|| a.method.cmp(&b.method))
            .then_with(|| rank(&a.mode).cmp(&rank(&b.mode)))
            .then_with(|| a.mode.cmp(&b.mode))
            .then_with(|| a.fill.as_str().cmp(b.fill.as_str()))
    });
    let cell = |r: &EvalReport, col: usize| -> Option<f64> {
        match col {
            0 => r.scenarios.get(&Scenario::RgbOnly).map(|m| m.miou),
            1 => r.scenarios.get(&Scenario::DepthOnly).map(|m| m.miou),
            2 => r.scenarios.get(&Scenario::Rgbd).map(|m| m.miou),
            _ => r.mm_robust.map(|m| m.miou),
        }
    };
    let maxima: Vec<Option<f64>> = (0..4)
        .map(|c| rows.iter().filter_map(|r| cell(r, c)).reduce(f64::max))
        .collect();
    let mut out =
        String::from("| Method | Mode | Fraction | Fill | RGB | Depth | RGBD | MM-Robust |\n|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!("| {} | {} | {} | {} |", r.method, r.mode, r.fraction, r.fill));
        for (c, max) in maxima.iter().enumerate() {
            match cell(r, c) {
                Some(v) if Some(v) == *max => out.push_str(&format!(" **{:.2}** |", 100.0 * v)),
                Some(v) => out.push_str(&format!(" {:.2} |", 100.0 * v)),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}
