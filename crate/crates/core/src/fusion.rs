//! The segmentation models: Linear Fusion, TokenFusion, URN and uni-modal.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    self, decode, encode_branches, init_decoder, init_encoder_body, init_ln_bank, init_stem, Branch,
    DecoderConfig, EncoderConfig, EncoderHook, EncoderNames, Modality, NoHook, StageConfig, StageFeatures,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Group, NdArray, ParamStore, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lf,
    Tf,
    Urn,
    UniRgb,
    UniDepth,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Lf,
        ModelKind::Tf,
        ModelKind::Urn,
        ModelKind::UniRgb,
        ModelKind::UniDepth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lf => "lf",
            ModelKind::Tf => "tf",
            ModelKind::Urn => "urn",
            ModelKind::UniRgb => "uni_rgb",
            ModelKind::UniDepth => "uni_depth",
        }
    }

    /// Models owning one learned mask token per modality.
    pub fn has_mask_tokens(self) -> bool {
        matches!(self, ModelKind::Lf | ModelKind::Tf)
    }

    /// Models whose output is the three-head prediction.
    pub fn is_dual_head(self) -> bool {
        matches!(self, ModelKind::Lf | ModelKind::Tf)
    }

    pub fn unimodal(self) -> Option<Modality> {
        match self {
            ModelKind::UniRgb => Some(Modality::Rgb),
            ModelKind::UniDepth => Some(Modality::Depth),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub alpha: f64,
    pub exchange_threshold: f64,
    pub sparsity_weight: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: 0.8,
            exchange_threshold: 0.02,
            sparsity_weight: 1e-3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.exchange_threshold >= 0.0 && self.exchange_threshold < 1.0) {
            return Err(Error::Config(format!(
                "exchange_threshold {} outside [0, 1)",
                self.exchange_threshold
            )));
        }
        if !(self.sparsity_weight >= 0.0) {
            return Err(Error::Config("sparsity_weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    LearnedToken,
    Zeros,
}

impl Fill {
    pub fn as_str(self) -> &'static str {
        match self {
            Fill::LearnedToken => "learned_token",
            Fill::Zeros => "zeros",
        }
    }
}

impl FromStr for Fill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned_token" => Ok(Fill::LearnedToken),
            "zeros" => Ok(Fill::Zeros),
            _ => Err(Error::InvalidArgument(format!("unknown fill `{s}`"))),
        }
    }
}

impl fmt::Display for Fill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which modality (if any) a sample is missing and how it is filled in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MaskState {
    pub masked: Option<Modality>,
    pub fill: Fill,
}

impl MaskState {
    pub const NONE: MaskState = MaskState {
        masked: None,
        fill: Fill::LearnedToken,
    };

    pub fn new(masked: Option<Modality>, fill: Fill) -> Self {
        MaskState { masked, fill }
    }
}

/// The three logit maps of a dual-branch model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegPrediction {
    pub rgb: Var,
    pub depth: Var,
    pub ens: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    Triple(SegPrediction),
    Single(Var),
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub heads: Heads,
    /// Mean token score, TokenFusion only.
    pub sparsity: Option<Var>,
}

impl ModelOutput {
    /// The map used for evaluation: the ensemble or the single head.
    pub fn primary(&self) -> Var {
        match self.heads {
            Heads::Triple(p) => p.ens,
            Heads::Single(v) => v,
        }
    }

    /// All heads in the order ensemble, rgb, depth (or the single head).
    pub fn all_heads(&self) -> Vec<Var> {
        match self.heads {
            Heads::Triple(p) => vec![p.ens, p.rgb, p.depth],
            Heads::Single(v) => vec![v],
        }
    }
}

/// Simultaneous convex mixing of two token sets.
pub fn linear_fuse<T: Scalar>(g: &mut Graph<T>, e_m: Var, e_mbar: Var, alpha: f64) -> Result<(Var, Var)> {
    if g.shape(e_m) != g.shape(e_mbar) {
        return Err(Error::shape(
            "linear_fuse",
            format!("{:?} vs {:?}", g.shape(e_m), g.shape(e_mbar)),
        ));
    }
    let a = T::from_f64(alpha);
    let b = T::from_f64(1.0 - alpha);
    let am = g.scale(e_m, a)?;
    let bmbar = g.scale(e_mbar, b)?;
    let ambar = g.scale(e_mbar, a)?;
    let bm = g.scale(e_m, b)?;
    Ok((g.add(am, bmbar)?, g.add(ambar, bm)?))
}

/// `sigmoid(lambda_raw) * y_rgb + (1 - sigmoid(lambda_raw)) * y_depth`.
pub fn ensemble<T: Scalar>(g: &mut Graph<T>, y_rgb: Var, y_depth: Var, lambda_raw: Var) -> Result<Var> {
    if g.shape(y_rgb) != g.shape(y_depth) {
        return Err(Error::shape(
            "ensemble",
            format!("{:?} vs {:?}", g.shape(y_rgb), g.shape(y_depth)),
        ));
    }
    let lam = g.sigmoid(lambda_raw)?;
    let neg = g.scale(lam, -T::one())?;
    let rest = g.add_scalar(neg, T::one())?;
    let a = g.mul(y_rgb, lam)?;
    let b = g.mul(y_depth, rest)?;
    g.add(a, b)
}

/// Keep token rows of `e_m` whose score is at least `tau`, take the rest from
/// `e_mbar`. Scores are plain values: the selection carries no gradient.
pub fn token_exchange<T: Scalar>(g: &mut Graph<T>, e_m: Var, e_mbar: Var, scores: &[T], tau: f64) -> Result<Var> {
    let tau = T::from_f64(tau);
    let keep: Vec<bool> = scores.iter().map(|&s| s >= tau).collect();
    g.select(&keep, e_m, e_mbar)
}

fn mask_token_name(m: Modality) -> String {
    format!("mask_token.{}", m.name())
}

/// Replace every stage-1 token of the masked rows by the learned token.
fn inject_token<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    modality: Modality,
    rows: &[bool],
    tokens: Var,
) -> Result<Var> {
    if !rows.iter().any(|&r| r) {
        return Ok(tokens);
    }
    let shape = g.shape(tokens).to_vec();
    let tok = g.param(store, &mask_token_name(modality))?;
    let tok = g.reshape(tok, &[1, 1, shape[2]])?;
    let tok = g.broadcast_to(tok, &shape)?;
    g.select(rows, tok, tokens)
}

struct TokenRows {
    /// Per branch, which samples get the learned token.
    rows: Vec<(Modality, Vec<bool>)>,
}

impl TokenRows {
    fn inject<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, stage: usize, tokens: &mut [Var]) -> Result<()> {
        if stage != 0 {
            return Ok(());
        }
        for (t, (m, rows)) in tokens.iter_mut().zip(&self.rows) {
            *t = inject_token(g, store, *m, rows, *t)?;
        }
        Ok(())
    }
}

struct LinearFusionHook {
    alpha: f64,
    tokens: TokenRows,
}

impl<T: Scalar> EncoderHook<T> for LinearFusionHook {
    fn after_embed(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, stage: usize, tokens: &mut [Var]) -> Result<()> {
        self.tokens.inject(g, store, stage, tokens)
    }

    fn after_layer(&mut self, g: &mut Graph<T>, _: &ParamStore<T>, _: usize, _: usize, tokens: &mut [Var]) -> Result<()> {
        if self.alpha != 1.0 {
            let (a, b) = linear_fuse(g, tokens[0], tokens[1], self.alpha)?;
            tokens[0] = a;
            tokens[1] = b;
        }
        Ok(())
    }
}

struct TokenFusionHook<T> {
    tau: f64,
    tokens: TokenRows,
    pending: Vec<Var>,
    all_scores: Vec<Var>,
    _t: std::marker::PhantomData<T>,
}

fn score_prefix(m: Modality, stage: usize, layer: usize) -> String {
    format!("encoder.score.{}.s{stage}.b{layer}", m.name())
}

impl<T: Scalar> EncoderHook<T> for TokenFusionHook<T> {
    fn after_embed(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, stage: usize, tokens: &mut [Var]) -> Result<()> {
        self.tokens.inject(g, store, stage, tokens)
    }

    fn attention_scale(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stage: usize,
        layer: usize,
        tokens: &[Var],
    ) -> Result<Vec<Option<Var>>> {
        self.pending.clear();
        for (&t, m) in tokens.iter().zip(Modality::ALL) {
            let p = score_prefix(m, stage, layer);
            let h = backbone::linear(g, store, &format!("{p}.fc1"), t)?;
            let h = g.gelu(h)?;
            let s = backbone::linear(g, store, &format!("{p}.fc2"), h)?;
            let s = g.sigmoid(s)?;
            self.pending.push(s);
            self.all_scores.push(s);
        }
        Ok(self.pending.iter().map(|&s| Some(s)).collect())
    }

    fn after_layer(&mut self, g: &mut Graph<T>, _: &ParamStore<T>, _: usize, _: usize, tokens: &mut [Var]) -> Result<()> {
        let s0 = g.value(self.pending[0]).data().to_vec();
        let s1 = g.value(self.pending[1]).data().to_vec();
        let (t0, t1) = (tokens[0], tokens[1]);
        tokens[0] = token_exchange(g, t0, t1, &s0, self.tau)?;
        tokens[1] = token_exchange(g, t1, t0, &s1, self.tau)?;
        Ok(())
    }
}

/// A segmentation network of one of the benchmark's kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegModel {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub fusion: FusionConfig,
}

impl SegModel {
    pub fn new(kind: ModelKind, encoder: EncoderConfig, decoder: DecoderConfig, fusion: FusionConfig) -> Result<Self> {
        encoder.validate()?;
        decoder.validate()?;
        fusion.validate()?;
        Ok(SegModel {
            kind,
            encoder,
            decoder,
            fusion,
        })
    }

    /// An 8x8, two-stage, three-class model small enough for finite
    /// differences.
    pub fn tiny(kind: ModelKind, fusion: FusionConfig) -> Result<Self> {
        let stage = |embed_dim, num_heads| StageConfig {
            patch: 2,
            stride: 2,
            embed_dim,
            num_layers: 1,
            num_heads,
        };
        let enc = EncoderConfig {
            stages: vec![stage(4, 2), stage(8, 1)],
            image_h: 8,
            image_w: 8,
            mlp_ratio: 2,
        };
        SegModel::new(
            kind,
            enc,
            DecoderConfig {
                embed_dim: 4,
                num_classes: 3,
            },
            fusion,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes
    }

    /// Fresh parameters drawn from a seeded generator. The same seed gives
    /// the same values in every dtype up to rounding.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = &self.encoder;
        match self.kind {
            ModelKind::Lf | ModelKind::Tf => {
                init_encoder_body(&mut store, &mut rng, enc, "encoder")?;
                for m in Modality::ALL {
                    let names = EncoderNames::shared(m);
                    init_stem(&mut store, &mut rng, enc, &names.stem, m)?;
                    init_ln_bank(&mut store, enc, &names.ln)?;
                    store.insert(mask_token_name(m), NdArray::zeros([enc.stage1_dim()]), Group::Other)?;
                }
                store.insert("ensemble.lambda_raw", NdArray::zeros([1]), Group::Other)?;
                if self.kind == ModelKind::Tf {
                    for m in Modality::ALL {
                        for (s, st) in enc.stages.iter().enumerate() {
                            for l in 0..st.num_layers {
                                let p = score_prefix(m, s, l);
                                let d = st.embed_dim;
                                backbone::insert_linear(&mut store, &mut rng, &format!("{p}.fc1"), d, d)?;
                                backbone::insert_linear(&mut store, &mut rng, &format!("{p}.fc2"), d, 1)?;
                            }
                        }
                    }
                }
            }
            ModelKind::Urn => {
                for m in Modality::ALL {
                    let names = EncoderNames::separate(m);
                    init_encoder_body(&mut store, &mut rng, enc, &names.body)?;
                    init_stem(&mut store, &mut rng, enc, &names.stem, m)?;
                    init_ln_bank(&mut store, enc, &names.ln)?;
                }
            }
            ModelKind::UniRgb | ModelKind::UniDepth => {
                let m = self.kind.unimodal().expect("uni-modal kind");
                let names = EncoderNames::shared(m);
                init_encoder_body(&mut store, &mut rng, enc, &names.body)?;
                init_stem(&mut store, &mut rng, enc, &names.stem, m)?;
                init_ln_bank(&mut store, enc, &names.ln)?;
            }
        }
        init_decoder(&mut store, &mut rng, enc, &self.decoder)?;
        Ok(store)
    }

    /// Run the model on a batch. `masks` holds one entry per sample. A
    /// modality may be `None` only if every sample masks it.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        rgb: Option<Var>,
        depth: Option<Var>,
        masks: &[MaskState],
    ) -> Result<ModelOutput> {
        let batch = masks.len();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (h, w) = (self.encoder.image_h, self.encoder.image_w);
        let needed: Vec<Modality> = match self.kind.unimodal() {
            Some(m) => vec![m],
            None => Modality::ALL.to_vec(),
        };
        for mk in masks {
            if let (Some(m), Fill::LearnedToken) = (mk.masked, mk.fill) {
                if needed.contains(&m) && !self.kind.has_mask_tokens() {
                    return Err(Error::InvalidArgument(format!(
                        "{} has no learned token for a missing {} input",
                        self.kind,
                        m.name()
                    )));
                }
            }
        }
        let mut inputs = Vec::new();
        let mut token_rows = Vec::new();
        for &m in &needed {
            let given = match m {
                Modality::Rgb => rgb,
                Modality::Depth => depth,
            };
            let masked: Vec<bool> = masks.iter().map(|mk| mk.masked == Some(m)).collect();
            let zeroed: Vec<bool> = masks
                .iter()
                .map(|mk| mk.masked == Some(m) && mk.fill == Fill::Zeros)
                .collect();
            let shape = [batch, m.channels(), h, w];
            let x = match given {
                Some(x) => {
                    if g.shape(x) != shape {
                        return Err(Error::shape(
                            "forward",
                            format!("{} input {:?}, expected {shape:?}", m.name(), g.shape(x)),
                        ));
                    }
                    if zeroed.iter().any(|&z| z) {
                        let zeros = g.constant(NdArray::zeros(shape));
                        g.select(&zeroed, zeros, x)?
                    } else {
                        x
                    }
                }
                None if masked.iter().all(|&v| v) => g.constant(NdArray::zeros(shape)),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "{} input absent but not masked for every sample",
                        m.name()
                    )))
                }
            };
            inputs.push(x);
            let learned: Vec<bool> = masks
                .iter()
                .map(|mk| mk.masked == Some(m) && mk.fill == Fill::LearnedToken)
                .collect();
            token_rows.push((m, learned));
        }
        let tokens = TokenRows { rows: token_rows };

        match self.kind {
            ModelKind::Lf | ModelKind::Tf => {
                let branches: Vec<Branch> = Modality::ALL
                    .iter()
                    .zip(&inputs)
                    .map(|(&m, &x)| Branch {
                        input: x,
                        modality: m,
                        names: EncoderNames::shared(m),
                    })
                    .collect();
                let (sets, sparsity) = if self.kind == ModelKind::Lf {
                    let mut hook = LinearFusionHook {
                        alpha: self.fusion.alpha,
                        tokens,
                    };
                    (encode_branches(g, store, &self.encoder, &branches, &mut hook)?, None)
                } else {
                    let mut hook = TokenFusionHook::<T> {
                        tau: self.fusion.exchange_threshold,
                        tokens,
                        pending: Vec::new(),
                        all_scores: Vec::new(),
                        _t: std::marker::PhantomData,
                    };
                    let sets = encode_branches(g, store, &self.encoder, &branches, &mut hook)?;
                    let means = hook
                        .all_scores
                        .iter()
                        .map(|&s| g.mean(s))
                        .collect::<Result<Vec<_>>>()?;
                    let cat = g.concat(&means, 0)?;
                    (sets, Some(g.mean(cat)?))
                };
                let (y_rgb, y_depth) = decode_pair(g, store, &sets[0].stages, &sets[1].stages, h, w)?;
                let lam = g.param(store, "ensemble.lambda_raw")?;
                let ens = ensemble(g, y_rgb, y_depth, lam)?;
                Ok(ModelOutput {
                    heads: Heads::Triple(SegPrediction {
                        rgb: y_rgb,
                        depth: y_depth,
                        ens,
                    }),
                    sparsity,
                })
            }
            ModelKind::Urn => {
                let branches: Vec<Branch> = Modality::ALL
                    .iter()
                    .zip(&inputs)
                    .map(|(&m, &x)| Branch {
                        input: x,
                        modality: m,
                        names: EncoderNames::separate(m),
                    })
                    .collect();
                let sets = encode_branches(g, store, &self.encoder, &branches, &mut NoHook)?;
                let mut fused = Vec::with_capacity(sets[0].stages.len());
                for (a, b) in sets[0].stages.iter().zip(&sets[1].stages) {
                    let sum = g.add(a.tokens, b.tokens)?;
                    let avg = g.scale(sum, T::from_f64(0.5))?;
                    fused.push(StageFeatures { tokens: avg, ..*a });
                }
                let y = decode(g, store, &fused, h, w)?;
                Ok(ModelOutput {
                    heads: Heads::Single(y),
                    sparsity: None,
                })
            }
            ModelKind::UniRgb | ModelKind::UniDepth => {
                let m = needed[0];
                let branches = [Branch {
                    input: inputs[0],
                    modality: m,
                    names: EncoderNames::shared(m),
                }];
                let sets = encode_branches(g, store, &self.encoder, &branches, &mut NoHook)?;
                let y = decode(g, store, &sets[0].stages, h, w)?;
                Ok(ModelOutput {
                    heads: Heads::Single(y),
                    sparsity: None,
                })
            }
        }
    }
}

/// Decode two branches with the shared decoder in one batched pass.
fn decode_pair<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    a: &[StageFeatures],
    b: &[StageFeatures],
    h: usize,
    w: usize,
) -> Result<(Var, Var)> {
    let batch = g.shape(a[0].tokens)[0];
    let mut joint = Vec::with_capacity(a.len());
    for (fa, fb) in a.iter().zip(b) {
        let t = g.concat(&[fa.tokens, fb.tokens], 0)?;
        joint.push(StageFeatures { tokens: t, ..*fa });
    }
    let y = decode(g, store, &joint, h, w)?;
    Ok((g.slice(y, 0, 0, batch)?, g.slice(y, 0, batch, batch)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny(kind: ModelKind) -> SegModel {
        SegModel::tiny(kind, FusionConfig::default()).unwrap()
    }

    fn image(g: &mut Graph<f64>, c: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..2 * c * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        g.constant(NdArray::from_vec([2, c, 8, 8], data).unwrap())
    }

    #[test]
    fn linear_fuse_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(NdArray::scalar(2.0));
        let b = g.constant(NdArray::scalar(0.0));
        let (x, y) = linear_fuse(&mut g, a, b, 0.5).unwrap();
        assert_eq!((g.value(x).item(), g.value(y).item()), (1.0, 1.0));
        let (x, y) = linear_fuse(&mut g, a, b, 1.0).unwrap();
        assert_eq!((g.value(x).item(), g.value(y).item()), (2.0, 0.0));
        let (p, q) = linear_fuse(&mut g, a, b, 0.3).unwrap();
        let (q2, p2) = linear_fuse(&mut g, b, a, 0.3).unwrap();
        assert_eq!(g.value(p), g.value(p2));
        assert_eq!(g.value(q), g.value(q2));
    }

    #[test]
    fn ensemble_endpoints() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(NdArray::from_f64_slice([2], &[1.0, 3.0]).unwrap());
        let d = g.constant(NdArray::from_f64_slice([2], &[-1.0, 5.0]).unwrap());
        let zero = g.constant(NdArray::scalar(0.0));
        let e = ensemble(&mut g, r, d, zero).unwrap();
        assert_eq!(g.value(e).data(), &[0.0, 4.0]);
        let big = g.constant(NdArray::scalar(60.0));
        let e = ensemble(&mut g, r, d, big).unwrap();
        assert!(g.value(e).max_abs_diff(g.value(r)) < 1e-12);
        let e = ensemble(&mut g, r, r, big).unwrap();
        assert!(g.value(e).max_abs_diff(g.value(r)) < 1e-15);
    }

    #[test]
    fn token_exchange_rows() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(NdArray::from_f64_slice([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(NdArray::from_f64_slice([2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = token_exchange(&mut g, a, b, &[0.9, 0.0], 0.02).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 7.0, 8.0]);
        let y = token_exchange(&mut g, a, b, &[0.5, 0.5], 0.02).unwrap();
        assert_eq!(g.value(y).data(), g.value(a).data());
        let y = token_exchange(&mut g, a, b, &[0.01, 0.0], 0.02).unwrap();
        assert_eq!(g.value(y).data(), g.value(b).data());
    }

    #[test]
    fn every_kind_produces_class_maps() {
        for kind in ModelKind::ALL {
            let model = tiny(kind);
            let store = model.init_params::<f64>(3).unwrap();
            let mut g = Graph::no_grad();
            let r = image(&mut g, 3, 1);
            let d = image(&mut g, 1, 2);
            let out = model.forward(&mut g, &store, Some(r), Some(d), &[MaskState::NONE; 2]).unwrap();
            for v in out.all_heads() {
                assert_eq!(g.shape(v), &[2, 3, 8, 8], "{kind}");
            }
            assert_eq!(out.sparsity.is_some(), kind == ModelKind::Tf);
        }
    }

    #[test]
    fn learned_token_masking_ignores_the_masked_input() {
        for kind in [ModelKind::Lf, ModelKind::Tf] {
            let model = tiny(kind);
            let mut store = model.init_params::<f64>(5).unwrap();
            store.get_mut("mask_token.depth").unwrap().value =
                NdArray::from_f64_slice([4], &[0.3, -0.2, 0.1, 0.5]).unwrap();
            let masks = [MaskState::new(Some(Modality::Depth), Fill::LearnedToken); 2];
            let run = |seed: Option<u64>| {
                let mut g = Graph::no_grad();
                let r = image(&mut g, 3, 1);
                let d = seed.map(|s| image(&mut g, 1, s));
                let out = model.forward(&mut g, &store, Some(r), d, &masks).unwrap();
                g.value(out.primary()).clone()
            };
            let a = run(Some(10));
            assert_eq!(a, run(Some(11)));
            assert_eq!(a, run(None));
        }
    }

    #[test]
    fn models_without_tokens_reject_token_fill() {
        let model = tiny(ModelKind::Urn);
        let store = model.init_params::<f64>(5).unwrap();
        let mut g = Graph::no_grad();
        let r = image(&mut g, 3, 1);
        let masks = [MaskState::new(Some(Modality::Depth), Fill::LearnedToken); 2];
        assert!(model.forward(&mut g, &store, Some(r), None, &masks).is_err());
        let masks = [MaskState::new(Some(Modality::Depth), Fill::Zeros); 2];
        assert!(model.forward(&mut g, &store, Some(r), None, &masks).is_ok());
        let masks = [MaskState::NONE; 2];
        assert!(model.forward(&mut g, &store, Some(r), None, &masks).is_err());
    }

    #[test]
    fn parameter_counts() {
        let lf = tiny(ModelKind::Lf).init_params::<f32>(0).unwrap();
        let uni = tiny(ModelKind::UniRgb).init_params::<f32>(0).unwrap();
        let urn = tiny(ModelKind::Urn).init_params::<f32>(0).unwrap();
        for name in uni.names() {
            assert!(lf.contains(name), "{name}");
        }
        let uni_enc = backbone::count_params(&uni, "encoder.");
        let dec = backbone::count_params(&uni, "decoder.");
        let depth_stem = backbone::count_params(&lf, "encoder.stem.depth");
        let ln_bank = backbone::count_params(&lf, "encoder.ln.depth");
        assert_eq!(lf.num_values(), uni.num_values() + depth_stem + ln_bank + 1 + 2 * 4);
        let depth_uni_enc = uni_enc - backbone::count_params(&uni, "encoder.stem.rgb")
            + backbone::count_params(&lf, "encoder.stem.depth");
        assert_eq!(urn.num_values(), uni_enc + depth_uni_enc + dec);
    }
}
