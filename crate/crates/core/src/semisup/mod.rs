//! Supervised, mean-teacher and masked-modality mean-teacher training.

pub mod optim;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Modality;
use crate::data::{augment, AugmentConfig, Batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_scenario, Scenario};
use crate::fusion::{Fill, MaskState, SegModel};
use crate::losses::{supervised_loss, total_loss, unsupervised_loss, LossReport, OhemConfig};
use crate::numerics::{Graph, NdArray, ParamStore, Scalar, Var};

pub use optim::{poly_factor, AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SupOnly,
    SupMd,
    Mt,
    MtMd,
    M3l,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::SupOnly,
        TrainMode::SupMd,
        TrainMode::Mt,
        TrainMode::MtMd,
        TrainMode::M3l,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::SupOnly => "sup_only",
            TrainMode::SupMd => "sup_md",
            TrainMode::Mt => "mt",
            TrainMode::MtMd => "mt_md",
            TrainMode::M3l => "m3l",
        }
    }

    /// Whether the mode trains on pseudo-labels from an EMA teacher.
    pub fn uses_teacher(self) -> bool {
        matches!(self, TrainMode::Mt | TrainMode::MtMd | TrainMode::M3l)
    }

    pub fn uses_masking(self) -> bool {
        matches!(self, TrainMode::SupMd | TrainMode::MtMd | TrainMode::M3l)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown training mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalNetwork {
    Student,
    Teacher,
}

impl FromStr for EvalNetwork {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(EvalNetwork::Student),
            "teacher" => Ok(EvalNetwork::Teacher),
            _ => Err(Error::InvalidArgument(format!("unknown network `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: TrainMode,
    pub alpha_ema: f64,
    /// Turning this off freezes the teacher at its initial copy.
    pub ema: bool,
    pub lambda_pseudo: f64,
    /// Probabilities of masking none, rgb, depth.
    pub mask_proportions: [f64; 3],
    /// Fill used for masked training inputs; models without mask tokens
    /// always use zeros.
    pub mask_fill: Fill,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub total_iters: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_network: EvalNetwork,
    pub eval_batch: usize,
    pub ohem: OhemConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            mode: TrainMode::M3l,
            alpha_ema: 0.99,
            ema: true,
            lambda_pseudo: 1.0,
            mask_proportions: [1.0 / 3.0; 3],
            mask_fill: Fill::LearnedToken,
            batch_labeled: 8,
            batch_unlabeled: 8,
            total_iters: 2000,
            lr_encoder: 1e-4,
            lr_decoder: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            poly_power: 0.9,
            seed: 0,
            eval_every: 100,
            eval_network: EvalNetwork::Student,
            eval_batch: 16,
            ohem: OhemConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha_ema > 0.0 && self.alpha_ema < 1.0) {
            return bad(format!("alpha_ema {} outside (0, 1)", self.alpha_ema));
        }
        if !(self.lambda_pseudo >= 0.0) {
            return bad("lambda_pseudo must be non-negative".into());
        }
        let p = self.mask_proportions;
        if p.iter().any(|&v| !(v >= 0.0)) || ((p[0] + p[1] + p[2]) - 1.0).abs() > 1e-9 {
            return bad(format!("mask_proportions {p:?} must be non-negative and sum to 1"));
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
            ("eps", self.eps),
            ("poly_power", self.poly_power),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if self.batch_labeled == 0 || self.total_iters == 0 || self.eval_every == 0 || self.eval_batch == 0 {
            return bad("batch_labeled, total_iters, eval_every and eval_batch must be positive".into());
        }
        if self.eval_network == EvalNetwork::Teacher && !self.mode.uses_teacher() {
            return bad(format!("mode {} has no teacher to evaluate", self.mode));
        }
        self.ohem.validate()?;
        if !(self.augment.min_scale > 0.0 && self.augment.max_scale >= self.augment.min_scale) {
            return bad("augment scales must satisfy 0 < min_scale <= max_scale".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr_encoder: self.lr_encoder,
            lr_decoder: self.lr_decoder,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            poly_power: self.poly_power,
            total_iters: self.total_iters,
        }
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student` for every entry.
pub fn ema_update<T: Scalar>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, alpha: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::InvalidArgument("teacher and student entries differ".into()));
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = T::from_f64(alpha * tv.as_f64() + (1.0 - alpha) * sv.as_f64());
        }
    }
    Ok(())
}

/// Per-pixel argmax over the class axis of `[B, C, H, W]` (or `[C, H, W]`)
/// logits, ties going to the lowest class.
pub fn make_pseudo_labels<T: Scalar>(logits: &NdArray<T>) -> Result<Vec<u8>> {
    let axis = match logits.ndim() {
        4 => 1,
        3 => 0,
        n => return Err(Error::shape("pseudo_labels", format!("expected 3 or 4 axes, got {n}"))),
    };
    if logits.shape()[axis] > u8::MAX as usize {
        return Err(Error::shape("pseudo_labels", "too many classes for u8 labels"));
    }
    let (_, idx) = logits.argmax(axis)?;
    Ok(idx.into_iter().map(|c| c as u8).collect())
}

/// Draw which modality (if any) to hide from one sample.
pub fn choose_mask_with(rng: &mut impl Rng, proportions: [f64; 3], fill: Fill) -> MaskState {
    let u: f64 = rng.gen();
    let masked = if u < proportions[0] {
        None
    } else if u < proportions[0] + proportions[1] {
        Some(Modality::Rgb)
    } else {
        Some(Modality::Depth)
    };
    MaskState::new(masked, fill)
}

/// Uniform over none / rgb / depth with the learned-token fill.
pub fn choose_mask(rng: &mut impl Rng) -> MaskState {
    choose_mask_with(rng, [1.0 / 3.0; 3], Fill::LearnedToken)
}

const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const STREAM_MASK: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Endless reshuffled passes over one index pool, with augmentation drawn
/// from the pool's own random stream.
#[derive(Clone, Debug)]
pub struct PoolSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl PoolSampler {
    pub fn new(pool: Vec<usize>, rng: ChaCha8Rng) -> Self {
        PoolSampler {
            pool,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    pub fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.pool.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    /// Draw and augment `n` samples at the model resolution.
    pub fn next_batch(&mut self, ds: &Dataset, n: usize, aug: &AugmentConfig, h: usize, w: usize) -> Result<Option<Batch>> {
        let idx = self.next_indices(n);
        if idx.is_empty() {
            return Ok(None);
        }
        let mut samples = Vec::with_capacity(idx.len());
        for i in idx {
            let s = ds.get(i)?;
            samples.push(augment(&s, aug, h, w, &mut self.rng));
        }
        Batch::stack(&samples).map(Some)
    }
}

/// Student, EMA teacher and optimizer state.
#[derive(Clone, Debug)]
pub struct TeacherStudentState<T> {
    pub student: ParamStore<T>,
    pub teacher: ParamStore<T>,
    pub iteration: usize,
    pub optimizer: AdamW,
}

pub struct Trainer<'a, T: Scalar> {
    pub model: &'a SegModel,
    pub cfg: TrainerConfig,
    pub state: TeacherStudentState<T>,
    mask_rng: ChaCha8Rng,
}

fn sum_heads<T: Scalar>(g: &Graph<T>, heads: &[Var]) -> Vec<f64> {
    heads.iter().map(|&h| g.value(h).item().as_f64()).collect()
}

fn inputs<T: Scalar>(g: &mut Graph<T>, b: &Batch) -> (Option<Var>, Option<Var>) {
    (Some(g.constant(b.rgb_array())), Some(g.constant(b.depth_array())))
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// The teacher starts as an exact copy of `student`.
    pub fn new(model: &'a SegModel, cfg: TrainerConfig, student: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let optimizer = AdamW::new(cfg.adamw());
        let mask_rng = stream(cfg.seed, STREAM_MASK);
        Ok(Trainer {
            model,
            state: TeacherStudentState {
                teacher: student.clone(),
                student,
                iteration: 0,
                optimizer,
            },
            cfg,
            mask_rng,
        })
    }

    fn training_fill(&self) -> Fill {
        if self.model.kind.has_mask_tokens() {
            self.cfg.mask_fill
        } else {
            Fill::Zeros
        }
    }

    fn draw_masks(&mut self, n: usize) -> Vec<MaskState> {
        let fill = self.training_fill();
        (0..n)
            .map(|_| choose_mask_with(&mut self.mask_rng, self.cfg.mask_proportions, fill))
            .collect()
    }

    /// One optimisation step. `unlabeled` is ignored by supervised modes.
    pub fn train_step(&mut self, labeled: &Batch, unlabeled: Option<&Batch>) -> Result<LossReport> {
        if labeled.size == 0 {
            return Err(Error::InvalidArgument("empty labeled batch".into()));
        }
        let mode = self.cfg.mode;
        let model = self.model;
        let t = self.state.iteration;
        let mut g = Graph::<T>::new();

        let sup_masks = if mode == TrainMode::SupMd {
            self.draw_masks(labeled.size)
        } else {
            vec![MaskState::NONE; labeled.size]
        };
        let (rgb, depth) = inputs(&mut g, labeled);
        let out_s = model.forward(&mut g, &self.state.student, rgb, depth, &sup_masks)?;
        let sup = supervised_loss(&mut g, &out_s, &labeled.labels, &self.cfg.ohem)?;
        let mut sparsity: Vec<Var> = out_s.sparsity.into_iter().collect();

        let mut unsup = None;
        if mode.uses_teacher() {
            let ubatch = match unlabeled {
                Some(u) => labeled.concat(u)?,
                None => labeled.clone(),
            };
            let student_masks = match mode {
                TrainMode::Mt => vec![MaskState::NONE; ubatch.size],
                _ => self.draw_masks(ubatch.size),
            };
            let teacher_masks = if mode == TrainMode::MtMd {
                student_masks.clone()
            } else {
                vec![MaskState::NONE; ubatch.size]
            };
            let pseudo = {
                let mut gt = Graph::<T>::no_grad();
                let (r, d) = inputs(&mut gt, &ubatch);
                let out_t = model.forward(&mut gt, &self.state.teacher, r, d, &teacher_masks)?;
                make_pseudo_labels(gt.value(out_t.primary()))?
            };
            let (r, d) = inputs(&mut g, &ubatch);
            let out_u = model.forward(&mut g, &self.state.student, r, d, &student_masks)?;
            unsup = Some(unsupervised_loss(&mut g, &out_u, &pseudo)?);
            sparsity.extend(out_u.sparsity);
        }

        let sparsity_term = match sparsity.len() {
            0 => None,
            n => {
                let mut acc = sparsity[0];
                for &s in &sparsity[1..] {
                    acc = g.add(acc, s)?;
                }
                Some(g.scale(acc, T::one() / T::from_f64(n as f64))?)
            }
        };
        let sparsity_weight = model.fusion.sparsity_weight;
        let total = total_loss(
            &mut g,
            sup.mean,
            unsup.as_ref().map(|u| (u.mean, self.cfg.lambda_pseudo)),
            sparsity_term.map(|s| (s, sparsity_weight)),
        )?;

        let grads = g.backward(total)?;
        grads.accumulate_into(&mut self.state.student)?;
        self.state.optimizer.step(&mut self.state.student, t)?;
        if mode.uses_teacher() && self.cfg.ema {
            ema_update(&mut self.state.teacher, &self.state.student, self.cfg.alpha_ema)?;
        }
        self.state.iteration += 1;

        let scalar = |v: Var| g.value(v).item().as_f64();
        let mut report = LossReport::compose(
            scalar(sup.mean),
            unsup.as_ref().map_or(0.0, |u| scalar(u.mean)),
            if unsup.is_some() { self.cfg.lambda_pseudo } else { 0.0 },
            sparsity_term.map(scalar),
            sparsity_weight,
            sum_heads(&g, &sup.per_head),
            unsup.as_ref().map_or(Vec::new(), |u| sum_heads(&g, &u.per_head)),
        );
        report.l_total = scalar(total);
        if !report.l_total.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                msg: "training loss is not finite".into(),
            });
        }
        Ok(report)
    }

    /// Parameters used for validation and testing.
    pub fn eval_params(&self) -> &ParamStore<T> {
        match self.cfg.eval_network {
            EvalNetwork::Student => &self.state.student,
            EvalNetwork::Teacher => &self.state.teacher,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub mode: TrainMode,
    pub l_s: f64,
    pub l_u: f64,
    pub l_total: f64,
    pub val_miou: Option<f64>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("iteration,mode,L_s,L_u,L_total,val_mIoU\n");
    for r in rows {
        let val = r.val_miou.map_or(String::new(), |v| v.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.mode, r.l_s, r.l_u, r.l_total, val
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct BestSnapshot<T> {
    pub iteration: usize,
    pub val_miou: f64,
    pub params: ParamStore<T>,
}

pub struct TrainOutcome<'a, T: Scalar> {
    pub trainer: Trainer<'a, T>,
    pub history: Vec<HistoryRow>,
    pub best: BestSnapshot<T>,
}

/// Run `total_iters` steps, validating on the rgbd scenario every
/// `eval_every` iterations and after the last one. The best snapshot is the
/// earliest one with the highest validation mIoU.
pub fn train<'a, T: Scalar>(
    model: &'a SegModel,
    cfg: &TrainerConfig,
    dataset: &Dataset,
    init: ParamStore<T>,
) -> Result<TrainOutcome<'a, T>> {
    dataset.check_trainable()?;
    let mut trainer = Trainer::new(model, cfg.clone(), init)?;
    let (h, w) = (model.encoder.image_h, model.encoder.image_w);
    let mut labeled = PoolSampler::new(dataset.split.labeled.clone(), stream(cfg.seed, STREAM_LABELED));
    let mut unlabeled = PoolSampler::new(dataset.split.unlabeled.clone(), stream(cfg.seed, STREAM_UNLABELED));
    let mut history = Vec::with_capacity(cfg.total_iters);
    let mut best: Option<BestSnapshot<T>> = None;
    for it in 1..=cfg.total_iters {
        let lb = labeled
            .next_batch(dataset, cfg.batch_labeled, &cfg.augment, h, w)?
            .ok_or_else(|| Error::Dataset("no labeled samples".into()))?;
        let ub = if cfg.mode.uses_teacher() && cfg.batch_unlabeled > 0 {
            unlabeled.next_batch(dataset, cfg.batch_unlabeled, &cfg.augment, h, w)?
        } else {
            None
        };
        let report = trainer.train_step(&lb, ub.as_ref())?;
        let mut row = HistoryRow {
            iteration: it,
            mode: cfg.mode,
            l_s: report.l_s,
            l_u: report.l_u,
            l_total: report.l_total,
            val_miou: None,
        };
        if it % cfg.eval_every == 0 || it == cfg.total_iters {
            let params = trainer.eval_params();
            let m = evaluate_scenario(
                model,
                params,
                dataset,
                &dataset.split.val,
                Scenario::Rgbd,
                Fill::LearnedToken,
                cfg.eval_batch,
            )?;
            row.val_miou = Some(m.miou);
            if best.as_ref().map_or(true, |b| m.miou > b.val_miou) {
                best = Some(BestSnapshot {
                    iteration: it,
                    val_miou: m.miou,
                    params: params.clone(),
                });
            }
        }
        history.push(row);
    }
    Ok(TrainOutcome {
        trainer,
        history,
        best: best.expect("the last iteration is always evaluated"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Group;

    #[test]
    fn ema_closed_form() {
        let mut t = ParamStore::<f64>::new();
        let mut s = ParamStore::<f64>::new();
        t.insert("a", NdArray::zeros([2]), Group::Other).unwrap();
        s.insert("a", NdArray::full([2], 1.0), Group::Other).unwrap();
        ema_update(&mut t, &s, 0.99).unwrap();
        assert!((t.value("a").unwrap().data()[0] - 0.01).abs() < 1e-15);
        let mut t2 = t.clone();
        ema_update(&mut t2, &t, 0.5).unwrap();
        assert_eq!(t2, t);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.value("a").unwrap(), s.value("a").unwrap());
        s.insert("b", NdArray::zeros([1]), Group::Other).unwrap();
        assert!(ema_update(&mut t, &s, 0.9).is_err());
    }

    #[test]
    fn pseudo_label_ties_and_dominance() {
        let flat = NdArray::<f32>::zeros([1, 3, 2, 2]);
        assert_eq!(make_pseudo_labels(&flat).unwrap(), vec![0; 4]);
        let mut d = vec![0.0; 12];
        for p in 0..4 {
            d[2 * 4 + p] = 5.0;
        }
        let x = NdArray::from_f64_slice([3, 2, 2], &d).unwrap();
        assert_eq!(make_pseudo_labels::<f64>(&x).unwrap(), vec![2; 4]);
    }

    #[test]
    fn mask_draws_are_reproducible() {
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| choose_mask(&mut r).masked).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert!(choose_mask(&mut ChaCha8Rng::seed_from_u64(0)).fill == Fill::LearnedToken);
    }

    #[test]
    fn sampler_covers_pool_each_pass() {
        let mut s = PoolSampler::new(vec![4, 5, 6], stream(0, 1));
        let mut a = s.next_indices(3);
        a.sort();
        assert_eq!(a, vec![4, 5, 6]);
        assert_eq!(s.next_indices(7).len(), 7);
        assert!(PoolSampler::new(vec![], stream(0, 1)).next_indices(2).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        let c = TrainerConfig {
            mask_proportions: [0.5, 0.5, 0.5],
            ..TrainerConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainerConfig {
            mode: TrainMode::SupOnly,
            eval_network: EvalNetwork::Teacher,
            ..TrainerConfig::default()
        };
        assert!(c.validate().is_err());
        assert!("m3l".parse::<TrainMode>().is_ok());
        assert!("m4l".parse::<TrainMode>().is_err());
    }
}
