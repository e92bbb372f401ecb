//! Hierarchical transformer encoder and all-MLP decoder.
//!
//! Several branches can be encoded in lockstep so that fusion code can read
//! and rewrite every branch's tokens between layers. Branches address their
//! weights through [`EncoderNames`]: branches that share a body prefix share
//! those weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Group, NdArray, ParamStore, Scalar, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Rgb, Modality::Depth];

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Depth => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Rgb => Modality::Depth,
            Modality::Depth => Modality::Rgb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub patch: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stages: Vec<StageConfig>,
    pub image_h: usize,
    pub image_w: usize,
    /// Hidden width of the feed-forward block as a multiple of the embed dim.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stages: vec![
                StageConfig {
                    patch: 4,
                    stride: 4,
                    embed_dim: 32,
                    num_layers: 2,
                    num_heads: 1,
                },
                StageConfig {
                    patch: 2,
                    stride: 2,
                    embed_dim: 64,
                    num_layers: 2,
                    num_heads: 2,
                },
            ],
            image_h: 64,
            image_w: 64,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.len() > 4 {
            return Err(Error::Config(format!(
                "encoder needs 1 to 4 stages, got {}",
                self.stages.len()
            )));
        }
        if self.image_h == 0 || self.image_w == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("image size and mlp_ratio must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.patch == 0 || s.stride == 0 || s.embed_dim == 0 || s.num_layers == 0 || s.num_heads == 0 {
                return Err(Error::Config(format!("stage {i}: all sizes must be positive")));
            }
            if s.embed_dim % s.num_heads != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: embed_dim {} not divisible by num_heads {}",
                    s.embed_dim, s.num_heads
                )));
            }
        }
        Ok(())
    }

    /// Token grid size of every stage.
    pub fn grid_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.image_h, self.image_w);
        self.stages
            .iter()
            .map(|s| {
                h = h.div_ceil(s.stride);
                w = w.div_ceil(s.stride);
                (h, w)
            })
            .collect()
    }

    pub fn stage1_dim(&self) -> usize {
        self.stages[0].embed_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            embed_dim: 64,
            num_classes: 5,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("decoder embed_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter prefixes used by one encoder branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderNames {
    pub body: String,
    pub stem: String,
    pub ln: String,
}

impl EncoderNames {
    /// Shared body, per-modality stem and layer-norm bank.
    pub fn shared(modality: Modality) -> Self {
        EncoderNames {
            body: "encoder".into(),
            stem: format!("encoder.stem.{}", modality.name()),
            ln: format!("encoder.ln.{}", modality.name()),
        }
    }

    /// A fully independent encoder for one modality.
    pub fn separate(modality: Modality) -> Self {
        let root = format!("encoder.{}", modality.name());
        EncoderNames {
            stem: format!("{root}.stem"),
            ln: format!("{root}.ln"),
            body: root,
        }
    }
}

pub(crate) fn group_of(name: &str) -> Group {
    if name.starts_with("encoder.") {
        Group::Encoder
    } else if name.starts_with("decoder.") {
        Group::Decoder
    } else {
        Group::Other
    }
}

fn xavier<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> NdArray<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64(rng.gen_range(-a..a)))
        .collect();
    NdArray::from_vec([fan_in, fan_out], data).expect("positive dims")
}

pub(crate) fn insert_linear<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let group = group_of(prefix);
    store.insert(format!("{prefix}.weight"), xavier(rng, fan_in, fan_out), group)?;
    store.insert(format!("{prefix}.bias"), NdArray::zeros([fan_out]), group)
}

fn insert_ln<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<()> {
    let group = group_of(prefix);
    store.insert(format!("{prefix}.gamma"), NdArray::full([dim], T::one()), group)?;
    store.insert(format!("{prefix}.beta"), NdArray::zeros([dim]), group)
}

fn stage_in_dim(cfg: &EncoderConfig, s: usize, modality: Modality) -> usize {
    let c = if s == 0 {
        modality.channels()
    } else {
        cfg.stages[s - 1].embed_dim
    };
    c * cfg.stages[s].patch * cfg.stages[s].patch
}

/// Shared body weights: later-stage patch embeddings, attention and FF.
pub fn init_encoder_body<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    cfg: &EncoderConfig,
    body: &str,
) -> Result<()> {
    cfg.validate()?;
    for (s, st) in cfg.stages.iter().enumerate() {
        let d = st.embed_dim;
        if s > 0 {
            insert_linear(store, rng, &format!("{body}.s{s}.embed"), stage_in_dim(cfg, s, Modality::Rgb), d)?;
        }
        for l in 0..st.num_layers {
            let p = format!("{body}.s{s}.b{l}");
            insert_linear(store, rng, &format!("{p}.attn.qkv"), d, 3 * d)?;
            insert_linear(store, rng, &format!("{p}.attn.proj"), d, d)?;
            insert_linear(store, rng, &format!("{p}.ff.fc1"), d, cfg.mlp_ratio * d)?;
            insert_linear(store, rng, &format!("{p}.ff.fc2"), cfg.mlp_ratio * d, d)?;
        }
    }
    Ok(())
}

/// The stage-1 patch embedding of one modality.
pub fn init_stem<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    cfg: &EncoderConfig,
    stem: &str,
    modality: Modality,
) -> Result<()> {
    insert_linear(store, rng, stem, stage_in_dim(cfg, 0, modality), cfg.stages[0].embed_dim)
}

/// Every layer-norm site of the encoder for one branch.
pub fn init_ln_bank<T: Scalar>(store: &mut ParamStore<T>, cfg: &EncoderConfig, ln: &str) -> Result<()> {
    for (s, st) in cfg.stages.iter().enumerate() {
        let d = st.embed_dim;
        insert_ln(store, &format!("{ln}.s{s}.embed"), d)?;
        for l in 0..st.num_layers {
            insert_ln(store, &format!("{ln}.s{s}.b{l}.ln1"), d)?;
            insert_ln(store, &format!("{ln}.s{s}.b{l}.ln2"), d)?;
        }
        insert_ln(store, &format!("{ln}.s{s}.out"), d)?;
    }
    Ok(())
}

pub fn init_decoder<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
) -> Result<()> {
    dec.validate()?;
    let e = dec.embed_dim;
    for (s, st) in enc.stages.iter().enumerate() {
        insert_linear(store, rng, &format!("decoder.s{s}"), st.embed_dim, e)?;
    }
    insert_linear(store, rng, "decoder.fuse", enc.stages.len() * e, e)?;
    insert_linear(store, rng, "decoder.cls", e, dec.num_classes)
}

/// `x @ W + b` over the last axis.
pub fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// `[B, N, D]` tokens to a `[B, D, h, w]` grid.
pub fn tokens_to_grid<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape("tokens_to_grid", format!("{s:?} is not a {h}x{w} token set")));
    }
    let t = g.permute(x, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], h, w])
}

/// `[B, D, h, w]` grid to `[B, h*w, D]` tokens.
pub fn grid_to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("grid_to_tokens", format!("need [B, D, h, w], got {s:?}")));
    }
    let t = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(t, &[0, 2, 1])
}

fn attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let qkv = linear(g, store, &format!("{prefix}.qkv"), x)?;
    // [B, N, 3, H, dh] -> [3, B, H, N, dh]
    let qkv = g.reshape(qkv, &[b, n, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let q = g.slice(qkv, 0, 0, 1)?;
    let k = g.slice(qkv, 0, 1, 1)?;
    let v = g.slice(qkv, 0, 2, 1)?;
    let q = g.reshape(q, &[b, heads, n, dh])?;
    let k = g.reshape(k, &[b, heads, n, dh])?;
    let v = g.reshape(v, &[b, heads, n, dh])?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()))?;
    let attn = g.softmax(scores, 3)?;
    let out = g.matmul(attn, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, n, d])?;
    linear(g, store, &format!("{prefix}.proj"), out)
}

/// One pre-norm transformer block. `scale`, when given, multiplies the
/// normalized attention input per token.
#[allow(clippy::too_many_arguments)]
pub fn block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    names: &EncoderNames,
    stage: usize,
    layer: usize,
    heads: usize,
    x: Var,
    scale: Option<Var>,
) -> Result<Var> {
    let body = format!("{}.s{stage}.b{layer}", names.body);
    let ln = format!("{}.s{stage}.b{layer}", names.ln);
    let mut h = layer_norm(g, store, &format!("{ln}.ln1"), x)?;
    if let Some(s) = scale {
        h = g.mul(h, s)?;
    }
    let a = attention(g, store, &format!("{body}.attn"), h, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, store, &format!("{ln}.ln2"), x)?;
    let h = linear(g, store, &format!("{body}.ff.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, store, &format!("{body}.ff.fc2"), h)?;
    g.add(x, h)
}

/// Final token grid of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageFeatures {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

/// Everything one branch produced: the output of every layer and the
/// normalized final tokens of every stage.
#[derive(Clone, Debug, Default)]
pub struct TokenSet {
    pub layers: Vec<Vec<Var>>,
    pub stages: Vec<StageFeatures>,
}

pub struct Branch {
    pub input: Var,
    pub modality: Modality,
    pub names: EncoderNames,
}

/// Callbacks that let a fusion scheme act between encoder layers. Every
/// slice holds one entry per branch, in branch order.
pub trait EncoderHook<T: Scalar> {
    fn after_embed(
        &mut self,
        _g: &mut Graph<T>,
        _store: &ParamStore<T>,
        _stage: usize,
        _tokens: &mut [Var],
    ) -> Result<()> {
        Ok(())
    }

    fn attention_scale(
        &mut self,
        _g: &mut Graph<T>,
        _store: &ParamStore<T>,
        _stage: usize,
        _layer: usize,
        tokens: &[Var],
    ) -> Result<Vec<Option<Var>>> {
        Ok(vec![None; tokens.len()])
    }

    fn after_layer(
        &mut self,
        _g: &mut Graph<T>,
        _store: &ParamStore<T>,
        _stage: usize,
        _layer: usize,
        _tokens: &mut [Var],
    ) -> Result<()> {
        Ok(())
    }
}

pub struct NoHook;

impl<T: Scalar> EncoderHook<T> for NoHook {}

fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    names: &EncoderNames,
    stage: usize,
    grid: Var,
) -> Result<Var> {
    let st = &cfg.stages[stage];
    let patches = g.patch_unfold(grid, st.patch, st.stride)?;
    let prefix = if stage == 0 {
        names.stem.clone()
    } else {
        format!("{}.s{stage}.embed", names.body)
    };
    let tokens = linear(g, store, &prefix, patches)?;
    layer_norm(g, store, &format!("{}.s{stage}.embed", names.ln), tokens)
}

/// Encode several branches layer by layer, calling `hook` between layers.
pub fn encode_branches<T: Scalar, H: EncoderHook<T>>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    branches: &[Branch],
    hook: &mut H,
) -> Result<Vec<TokenSet>> {
    let batch = branches
        .first()
        .map(|b| g.shape(b.input)[0])
        .ok_or_else(|| Error::InvalidArgument("no encoder branches".into()))?;
    for br in branches {
        let want = [batch, br.modality.channels(), cfg.image_h, cfg.image_w];
        if g.shape(br.input) != want {
            return Err(Error::shape(
                "encode",
                format!(
                    "{} input {:?}, expected {want:?}",
                    br.modality.name(),
                    g.shape(br.input)
                ),
            ));
        }
    }
    let grids = cfg.grid_sizes();
    let mut sets = vec![TokenSet::default(); branches.len()];
    let mut inputs: Vec<Var> = branches.iter().map(|b| b.input).collect();
    for (s, st) in cfg.stages.iter().enumerate() {
        let (h, w) = grids[s];
        let mut tokens = branches
            .iter()
            .zip(&inputs)
            .map(|(br, &x)| patch_embed(g, store, cfg, &br.names, s, x))
            .collect::<Result<Vec<_>>>()?;
        hook.after_embed(g, store, s, &mut tokens)?;
        for l in 0..st.num_layers {
            let scales = hook.attention_scale(g, store, s, l, &tokens)?;
            for (i, br) in branches.iter().enumerate() {
                tokens[i] = block(g, store, &br.names, s, l, st.num_heads, tokens[i], scales[i])?;
            }
            hook.after_layer(g, store, s, l, &mut tokens)?;
            for (set, &t) in sets.iter_mut().zip(&tokens) {
                if set.layers.len() <= s {
                    set.layers.push(Vec::new());
                }
                set.layers[s].push(t);
            }
        }
        for (i, br) in branches.iter().enumerate() {
            let out = layer_norm(g, store, &format!("{}.s{s}.out", br.names.ln), tokens[i])?;
            sets[i].stages.push(StageFeatures { tokens: out, h, w });
            inputs[i] = tokens_to_grid(g, out, h, w)?;
        }
    }
    Ok(sets)
}

/// Encode a single branch.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    branch: Branch,
) -> Result<TokenSet> {
    Ok(encode_branches(g, store, cfg, &[branch], &mut NoHook)?.remove(0))
}

/// All-MLP decoder: per-stage projection, upsampling to the stage-1 grid,
/// fusion and per-pixel classification, resized to `(out_h, out_w)`.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    features: &[StageFeatures],
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidArgument("decode needs at least one stage".into()))?;
    let classes = store.value("decoder.cls.bias")?.len();
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let (h1, w1) = (first.h, first.w);
    let mut maps = Vec::with_capacity(features.len());
    for (s, f) in features.iter().enumerate() {
        let p = linear(g, store, &format!("decoder.s{s}"), f.tokens)?;
        let grid = tokens_to_grid(g, p, f.h, f.w)?;
        maps.push(g.bilinear_resize(grid, h1, w1)?);
    }
    let cat = g.concat(&maps, 1)?;
    let t = grid_to_tokens(g, cat)?;
    let t = linear(g, store, "decoder.fuse", t)?;
    let t = g.relu(t)?;
    let logits = linear(g, store, "decoder.cls", t)?;
    let grid = tokens_to_grid(g, logits, h1, w1)?;
    g.bilinear_resize(grid, out_h, out_w)
}

/// Number of scalar values held by parameters whose names start with `prefix`.
pub fn count_params<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> usize {
    store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(_, e)| e.value.len())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (EncoderConfig, DecoderConfig) {
        let enc = EncoderConfig {
            stages: vec![
                StageConfig {
                    patch: 2,
                    stride: 2,
                    embed_dim: 4,
                    num_layers: 1,
                    num_heads: 2,
                },
                StageConfig {
                    patch: 2,
                    stride: 2,
                    embed_dim: 8,
                    num_layers: 1,
                    num_heads: 1,
                },
            ],
            image_h: 8,
            image_w: 8,
            mlp_ratio: 2,
        };
        (
            enc,
            DecoderConfig {
                embed_dim: 4,
                num_classes: 3,
            },
        )
    }

    fn store(enc: &EncoderConfig, dec: &DecoderConfig) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        init_encoder_body(&mut s, &mut rng, enc, "encoder").unwrap();
        for m in Modality::ALL {
            init_stem(&mut s, &mut rng, enc, &EncoderNames::shared(m).stem, m).unwrap();
            init_ln_bank(&mut s, enc, &EncoderNames::shared(m).ln).unwrap();
        }
        init_decoder(&mut s, &mut rng, enc, dec).unwrap();
        s
    }

    fn input(g: &mut Graph<f64>, c: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..2 * c * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        g.constant(NdArray::from_vec([2, c, 8, 8], data).unwrap())
    }

    #[test]
    fn shapes_and_determinism() {
        let (enc, dec) = tiny();
        let s = store(&enc, &dec);
        let run = || {
            let mut g = Graph::<f64>::no_grad();
            let x = input(&mut g, 3, 7);
            let set = encode(
                &mut g,
                &s,
                &enc,
                Branch {
                    input: x,
                    modality: Modality::Rgb,
                    names: EncoderNames::shared(Modality::Rgb),
                },
            )
            .unwrap();
            assert_eq!(g.shape(set.layers[0][0]), &[2, 16, 4]);
            assert_eq!(g.shape(set.stages[1].tokens), &[2, 4, 8]);
            let y = decode(&mut g, &s, &set.stages, 8, 8).unwrap();
            assert_eq!(g.shape(y), &[2, 3, 8, 8]);
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn identical_banks_give_identical_tokens() {
        let (enc, dec) = tiny();
        let s = store(&enc, &dec);
        let names = EncoderNames::shared(Modality::Rgb);
        let mut g = Graph::<f64>::no_grad();
        let x = input(&mut g, 3, 3);
        let branches = [
            Branch {
                input: x,
                modality: Modality::Rgb,
                names: names.clone(),
            },
            Branch {
                input: x,
                modality: Modality::Rgb,
                names,
            },
        ];
        let sets = encode_branches(&mut g, &s, &enc, &branches, &mut NoHook).unwrap();
        for (a, b) in sets[0].layers.iter().flatten().zip(sets[1].layers.iter().flatten()) {
            assert_eq!(g.value(*a), g.value(*b));
        }
    }

    #[test]
    fn zero_decoder_gives_zero_logits() {
        let (enc, dec) = tiny();
        let mut s = store(&enc, &dec);
        for (n, e) in s.iter_mut() {
            if n.starts_with("decoder.") {
                e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::<f64>::no_grad();
        let x = input(&mut g, 1, 2);
        let set = encode(
            &mut g,
            &s,
            &enc,
            Branch {
                input: x,
                modality: Modality::Depth,
                names: EncoderNames::shared(Modality::Depth),
            },
        )
        .unwrap();
        let y = decode(&mut g, &s, &set.stages, 8, 8).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let (mut enc, dec) = tiny();
        let s = store(&enc, &dec);
        let mut g = Graph::<f64>::no_grad();
        let x = input(&mut g, 1, 2);
        let r = encode(
            &mut g,
            &s,
            &enc,
            Branch {
                input: x,
                modality: Modality::Rgb,
                names: EncoderNames::shared(Modality::Rgb),
            },
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
        enc.stages[0].num_heads = 3;
        assert!(enc.validate().is_err());
        assert!(DecoderConfig {
            embed_dim: 4,
            num_classes: 1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn grid_arithmetic() {
        let enc = EncoderConfig::default();
        assert_eq!(enc.grid_sizes(), vec![(16, 16), (8, 8)]);
        let odd = EncoderConfig {
            image_h: 30,
            image_w: 17,
            ..EncoderConfig::default()
        };
        assert_eq!(odd.grid_sizes(), vec![(8, 5), (4, 3)]);
    }
}
