//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so walking them backwards is a
//! reverse topological order. Each node's gradient is consumed exactly once,
//! after all of its consumers have added their contributions.

use std::collections::{BTreeMap, HashMap};

use super::array::{numel, strides, BilinearTaps, NdArray, Scalar};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    Relu,
    Sigmoid,
}

/// Geometry of a strided patch extraction over `[B, C, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub patch: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PatchGeometry {
    /// Output grid is `ceil(H / stride)`; overlapping patches get symmetric padding.
    pub fn new(in_h: usize, in_w: usize, patch: usize, stride: usize) -> Result<Self> {
        if patch == 0 || stride == 0 || in_h == 0 || in_w == 0 {
            return Err(Error::shape("patch_unfold", "patch, stride and input size must be positive"));
        }
        Ok(PatchGeometry {
            patch,
            stride,
            pad: patch.saturating_sub(stride) / 2,
            out_h: in_h.div_ceil(stride),
            out_w: in_w.div_ceil(stride),
        })
    }
}

enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var, usize),
    Bilinear(Var, BilinearTaps),
    Unfold(Var, PatchGeometry),
    Select {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    PixelCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(Unary::Gelu, _) => "gelu",
            Op::Unary(Unary::Relu, _) => "relu",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Bilinear(..) => "bilinear_resize",
            Op::Unfold(..) => "patch_unfold",
            Op::Select { .. } => "select",
            Op::Gather { .. } => "gather",
            Op::PixelCe { .. } => "pixel_cross_entropy",
        }
    }
}

struct Node<T> {
    value: NdArray<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-use record of one forward evaluation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    track_params: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the parameters that took part in a graph, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub params: BTreeMap<String, NdArray<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&NdArray<T>> {
        self.params.get(name)
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, g) in &self.params {
            store.accumulate_grad(name, g)?;
        }
        Ok(())
    }
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each linear index of `out`, the linear index into a broadcast input.
fn bcast_index(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let n = out.len();
    let pad = n - inp.len();
    let in_strides = strides(inp);
    let mut eff = vec![0usize; n];
    for d in 0..inp.len() {
        if inp[d] != 1 {
            eff[d + pad] = in_strides[d];
        }
    }
    let total = numel(out);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        idx.push(off);
        for d in (0..n).rev() {
            counter[d] += 1;
            off += eff[d];
            if counter[d] < out[d] {
                break;
            }
            off -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Ways an input of a broadcast op maps onto the output.
enum Mapping {
    Same,
    /// Input repeats with period `n` (a suffix of the output shape, or a scalar).
    Cyclic(usize),
    Indexed(Vec<usize>),
}

fn mapping(out: &[usize], inp: &[usize]) -> Mapping {
    if out == inp {
        return Mapping::Same;
    }
    let n_in = numel(inp);
    let trimmed: Vec<usize> = inp.iter().copied().skip_while(|&d| d == 1).collect();
    if n_in == 1 || (trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..]) {
        return Mapping::Cyclic(n_in);
    }
    Mapping::Indexed(bcast_index(out, inp))
}

fn reduce_grad<T: Scalar>(grad: Vec<T>, out: &[usize], inp: &[usize]) -> Vec<T> {
    match mapping(out, inp) {
        Mapping::Same => grad,
        Mapping::Cyclic(n) => {
            let mut acc = vec![T::zero(); n];
            for chunk in grad.chunks_exact(n) {
                for (a, &g) in acc.iter_mut().zip(chunk) {
                    *a = *a + g;
                }
            }
            acc
        }
        Mapping::Indexed(idx) => {
            let mut acc = vec![T::zero(); numel(inp)];
            for (&j, &g) in idx.iter().zip(&grad) {
                acc[j] = acc[j] + g;
            }
            acc
        }
    }
}

/// `tanh` through one `exp`, which is markedly cheaper than libm's `tanh`.
fn tanh_exp<T: Scalar>(u: T) -> T {
    let two = T::from_f64(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044715;

fn gelu_tanh<T: Scalar>(x: T) -> T {
    tanh_exp(T::from_f64(GELU_C) * (x + T::from_f64(GELU_K) * x * x * x))
}

fn gelu_value<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * x * (T::one() + gelu_tanh(x))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::from_f64(GELU_C), T::from_f64(GELU_K), T::from_f64(0.5));
    let t = gelu_tanh(x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * k * x * x)
}

fn tile<T: Copy>(src: &[T], total: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        out.extend_from_slice(src);
    }
    out
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    // Unit axes do not affect the memory order.
    let kept: Vec<usize> = axes.iter().copied().filter(|&a| shape[a] != 1).collect();
    if kept.windows(2).all(|w| w[0] < w[1]) {
        return (out_shape, data.to_vec());
    }
    let dims: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = kept.iter().map(|&a| in_strides[a]).collect();
    let n = dims.len();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let inner = dims[n - 1];
    let inner_stride = src_strides[n - 1];
    let outer = total / inner;
    let mut counter = vec![0usize; n - 1];
    let mut off = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&data[off..off + inner]);
        } else {
            out.extend((0..inner).map(|i| data[off + i * inner_stride]));
        }
        for d in (0..n - 1).rev() {
            counter[d] += 1;
            off += src_strides[d];
            if counter[d] < dims[d] {
                break;
            }
            off -= src_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    (out_shape, out)
}

/// Split `shape` around `axis` into (outer, len, inner) extents.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
        }
    }

    /// A graph whose parameters are read as constants; `backward` yields nothing.
    pub fn no_grad() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Read a named parameter. Repeated reads return the same node, so
    /// gradients from every use accumulate onto one entry.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store.get(name)?;
        self.nodes.push(Node {
            value: entry.value.clone(),
            op: Op::Leaf,
            needs_grad: self.track_params && entry.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shapes(&sa, &sb).ok_or_else(|| {
            Error::shape("broadcast", format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let da = self.value(a).data();
        let db = self.value(b).data();
        let total = numel(&out_shape);
        let data: Vec<T> = match (mapping(&out_shape, &sa), mapping(&out_shape, &sb)) {
            (Mapping::Same, Mapping::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (Mapping::Same, Mapping::Cyclic(n)) => {
                let mut out = Vec::with_capacity(total);
                for ca in da.chunks_exact(n) {
                    out.extend(ca.iter().zip(db).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            (Mapping::Cyclic(n), Mapping::Same) => {
                let mut out = Vec::with_capacity(total);
                for cb in db.chunks_exact(n) {
                    out.extend(da.iter().zip(cb).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            _ => {
                let ia = bcast_index(&out_shape, &sa);
                let ib = bcast_index(&out_shape, &sb);
                ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
            }
        };
        let value = NdArray::from_vec(out_shape, data)?;
        self.push(value, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let value = match kind {
            Unary::Gelu => self.value(x).map(gelu_value),
            Unary::Relu => self.value(x).map(|v| v.max(T::zero())),
            Unary::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push(value, Op::Unary(kind, x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    // ---- linear algebra & layout ------------------------------------

    /// `[.., M, K] x [.., K, N] -> [.., M, N]` with broadcast batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("need >=2-D operands, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {sa:?} x {sb:?}"),
            ));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let lead = broadcast_shapes(lead_a, lead_b).ok_or_else(|| {
            Error::shape("matmul", format!("batch dimensions differ: {sa:?} x {sb:?}"))
        })?;
        let batches = numel(&lead);
        let mut out = vec![T::zero(); batches * m * n];
        let da = self.value(a).data();
        let db = self.value(b).data();
        if lead_b.is_empty() || numel(lead_b) == 1 && lead_a == lead.as_slice() {
            // One GEMM over all rows of `a`.
            let rows = batches * m;
            unsafe {
                T::gemm(
                    rows, k, n, T::one(), da.as_ptr(), k as isize, 1, db.as_ptr(), n as isize, 1,
                    T::zero(), out.as_mut_ptr(), n as isize, 1,
                );
            }
        } else {
            let ia = bcast_index(&lead, lead_a);
            let ib = bcast_index(&lead, lead_b);
            for bi in 0..batches {
                unsafe {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        da.as_ptr().add(ia[bi] * m * k),
                        k as isize,
                        1,
                        db.as_ptr().add(ib[bi] * k * n),
                        n as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(bi * m * n),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let value = NdArray::from_vec(shape, out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("invalid axes {axes:?} for {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, axes);
        let value = NdArray::from_vec(out_shape, data)?;
        self.push(value, Op::Permute(x, axes.to_vec()), &[x])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::shape("transpose", "need at least 2 dimensions"));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match broadcast_shapes(&sx, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("cannot broadcast {sx:?} to {shape:?}"),
                ))
            }
        }
        let src = self.value(x).data();
        let data: Vec<T> = match mapping(shape, &sx) {
            Mapping::Same => src.to_vec(),
            Mapping::Cyclic(_) => tile(src, numel(shape)),
            Mapping::Indexed(idx) => idx.iter().map(|&i| src[i]).collect(),
        };
        let value = NdArray::from_vec(shape.to_vec(), data)?;
        self.push(value, Op::BroadcastTo(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total_len = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d])
            {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?}")));
            }
            total_len += s[axis];
        }
        let (outer, _, inner) = around_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total_len;
        let value = NdArray::from_vec(shape, data)?;
        self.push(value, Op::Concat(xs.to_vec(), axis), xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = around_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * full + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = NdArray::from_vec(out_shape, data)?;
        self.push(value, Op::Slice { x, axis, start }, &[x])
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = NdArray::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.value(x).len() as f64);
        let value = NdArray::scalar(self.value(x).sum() / n);
        self.push(value, Op::MeanAll(x), &[x])
    }

    // ---- normalization & activations ---------------------------------

    /// Standardize over the last axis, then apply `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {shape:?} with gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let eps = T::from_f64(eps);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = src.len() / d;
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + bt[i];
            }
        }
        let value = NdArray::from_vec(shape, out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = around_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for c in 0..len {
                    mx = mx.max(src[base + c * inner]);
                }
                let mut total = T::zero();
                for c in 0..len {
                    let e = (src[base + c * inner] - mx).exp();
                    out[base + c * inner] = e;
                    total = total + e;
                }
                for c in 0..len {
                    out[base + c * inner] = out[base + c * inner] / total;
                }
            }
        }
        let value = NdArray::from_vec(shape, out)?;
        self.push(value, Op::Softmax(x, axis), &[x])
    }

    // ---- spatial -----------------------------------------------------

    /// Bilinear resize of the last two axes (align-corners = false).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let taps = BilinearTaps::new(&shape, out_h, out_w)?;
        let mut out = vec![T::zero(); taps.planes * out_h * out_w];
        taps.forward(self.value(x).data(), &mut out);
        let n = shape.len();
        let mut out_shape = shape;
        out_shape[n - 2] = out_h;
        out_shape[n - 1] = out_w;
        let value = NdArray::from_vec(out_shape, out)?;
        self.push(value, Op::Bilinear(x, taps), &[x])
    }

    /// Extract `P x P` patches from `[B, C, H, W]` into `[B, Ho*Wo, C*P*P]`,
    /// features ordered `(c, py, px)`. Out-of-range taps read zero.
    pub fn patch_unfold(&mut self, x: Var, patch: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("patch_unfold", format!("need [B, C, H, W], got {shape:?}")));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let geo = PatchGeometry::new(h, w, patch, stride)?;
        let feat = c * patch * patch;
        let tokens = geo.out_h * geo.out_w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * tokens * feat];
        let taps = unfold_taps(&geo, c, h, w);
        for (o, s) in out.chunks_exact_mut(tokens * feat).zip(src.chunks_exact(c * h * w)) {
            for &(d, si) in &taps {
                o[d] = s[si];
            }
        }
        let value = NdArray::from_vec(vec![b, tokens, feat], out)?;
        self.push(value, Op::Unfold(x, geo), &[x])
    }

    // ---- selection ----------------------------------------------------

    /// Row-wise choice between `a` and `b`: row `r` comes from `a` when
    /// `mask[r]`. Rows are the `mask.len()` equal blocks of the flattened arrays.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if self.shape(b) != shape.as_slice() {
            return Err(Error::shape("select", format!("{shape:?} vs {:?}", self.shape(b))));
        }
        let total = numel(&shape);
        if mask.is_empty() || total % mask.len() != 0 {
            return Err(Error::shape(
                "select",
                format!("{} mask rows do not tile {shape:?}", mask.len()),
            ));
        }
        let row = total / mask.len();
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(total);
        for (r, &keep) in mask.iter().enumerate() {
            let src = if keep { da } else { db };
            out.extend_from_slice(&src[r * row..(r + 1) * row]);
        }
        let value = NdArray::from_vec(shape, out)?;
        self.push(
            value,
            Op::Select {
                mask: mask.to_vec(),
                a,
                b,
            },
            &[a, b],
        )
    }

    /// Pick one entry per row along the last axis: `[.., C] -> [..]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let rows = numel(&shape) / c;
        if idx.len() != rows {
            return Err(Error::shape("gather", format!("{} indices for {rows} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let src = self.value(x).data();
        let data: Vec<T> = idx.iter().enumerate().map(|(r, &i)| src[r * c + i]).collect();
        let out_shape = if shape.len() > 1 {
            shape[..shape.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let value = NdArray::from_vec(out_shape, data)?;
        self.push(
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Weighted sum of per-pixel cross-entropy over `[B, C, ..spatial]` logits.
    ///
    /// `targets` and `weights` are indexed by `(b, pixel)`. Pixels with zero
    /// weight contribute nothing and their targets are not inspected.
    pub fn pixel_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("pixel_cross_entropy", format!("need [B, C, ..], got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let px: usize = shape[2..].iter().product();
        if targets.len() != b * px || weights.len() != b * px {
            return Err(Error::shape(
                "pixel_cross_entropy",
                format!(
                    "{} targets / {} weights for {} pixels",
                    targets.len(),
                    weights.len(),
                    b * px
                ),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for bi in 0..b {
            for p in 0..px {
                let base = bi * c * px + p;
                let mut mx = T::neg_infinity();
                for ci in 0..c {
                    mx = mx.max(src[base + ci * px]);
                }
                let mut z = T::zero();
                for ci in 0..c {
                    let e = (src[base + ci * px] - mx).exp();
                    probs[base + ci * px] = e;
                    z = z + e;
                }
                for ci in 0..c {
                    probs[base + ci * px] = probs[base + ci * px] / z;
                }
                let w = weights[bi * px + p];
                if w != T::zero() {
                    let t = targets[bi * px + p];
                    if t >= c {
                        return Err(Error::LabelOutOfRange { label: t, classes: c });
                    }
                    // -log softmax = logsumexp - logit
                    let nll = mx + z.ln() - src[base + t * px];
                    total = total + w * nll;
                }
            }
        }
        let value = NdArray::scalar(total);
        self.push(
            value,
            Op::PixelCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ---- backward -----------------------------------------------------

    /// Gradients of a scalar output with respect to every tracked parameter.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].needs_grad {
            return Ok(Gradients::default());
        }
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        let mut params = BTreeMap::new();
        for (name, v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                params.insert(name.clone(), NdArray::from_vec(self.shape(*v).to_vec(), g)?);
            }
        }
        Ok(Gradients { params })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.needs(*a) {
                    let local: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => {
                            let other = self.broadcast_values(*b, out_shape);
                            g.iter().zip(&other).map(|(&x, &y)| x * y).collect()
                        }
                    };
                    let red = reduce_grad(local, out_shape, sa);
                    self.acc(grads, *a, red);
                }
                if self.needs(*b) {
                    let local: Vec<T> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|&x| -x).collect(),
                        Binary::Mul => {
                            let other = self.broadcast_values(*a, out_shape);
                            g.iter().zip(&other).map(|(&x, &y)| x * y).collect()
                        }
                    };
                    let red = reduce_grad(local, out_shape, sb);
                    self.acc(grads, *b, red);
                }
            }
            Op::Scale(x, c) => {
                let local: Vec<T> = g.iter().map(|&v| v * *c).collect();
                self.acc(grads, *x, local);
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Unary(kind, x) => {
                let xs = self.value(*x).data();
                let local: Vec<T> = match kind {
                    Unary::Gelu => xs.iter().zip(g).map(|(&v, &d)| gelu_grad(v) * d).collect(),
                    Unary::Relu => xs
                        .iter()
                        .zip(g)
                        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                    Unary::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &d)| d * y * (T::one() - y))
                        .collect(),
                };
                self.acc(grads, *x, local);
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inverse[a] = d;
                }
                let (_, data) = permute_data(g, out_shape, &inverse);
                self.acc(grads, *x, data);
            }
            Op::BroadcastTo(x) => {
                let red = reduce_grad(g.to_vec(), out_shape, self.shape(*x));
                self.acc(grads, *x, red);
            }
            Op::Concat(xs, axis) => {
                let (outer, total_len, inner) = around_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let off = (o * total_len + offset) * inner;
                            part.extend_from_slice(&g[off..off + len * inner]);
                        }
                        self.acc(grads, v, part);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let full_shape = self.shape(*x);
                let (outer, full, inner) = around_axis(full_shape, *axis);
                let len = out_shape[*axis];
                let mut part = vec![T::zero(); numel(full_shape)];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    part[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.acc(grads, *x, part);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let v = g[0] / T::from_f64(n as f64);
                self.acc(grads, *x, vec![v; n]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let rows = g.len() / d;
                let gm = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                            db[j] = db[j] + g[r * d + j];
                        }
                    }
                    if self.needs(*gamma) {
                        self.acc(grads, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        self.acc(grads, *beta, db);
                    }
                }
                if self.needs(*x) {
                    let dn = T::from_f64(d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xhat[r * d + j];
                        }
                        let (m1, m2) = (s1 / dn, s2 / dn);
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            dx[r * d + j] = rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = around_axis(out_shape, *axis);
                let y = node.value.data();
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for c in 0..len {
                            dot = dot + g[base + c * inner] * y[base + c * inner];
                        }
                        for c in 0..len {
                            let k = base + c * inner;
                            dx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Bilinear(x, taps) => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                taps.backward(g, &mut dx);
                self.acc(grads, *x, dx);
            }
            Op::Unfold(x, geo) => {
                let s = self.shape(*x);
                let (_, c, h, w) = (s[0], s[1], s[2], s[3]);
                let feat = c * geo.patch * geo.patch;
                let tokens = geo.out_h * geo.out_w;
                let mut dx = vec![T::zero(); numel(s)];
                let taps = unfold_taps(geo, c, h, w);
                for (d, gs) in dx.chunks_exact_mut(c * h * w).zip(g.chunks_exact(tokens * feat)) {
                    for &(o, si) in &taps {
                        d[si] = d[si] + gs[o];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Select { mask, a, b } => {
                let row = g.len() / mask.len();
                for (target, want) in [(*a, true), (*b, false)] {
                    if !self.needs(target) {
                        continue;
                    }
                    let mut part = vec![T::zero(); g.len()];
                    for (r, &m) in mask.iter().enumerate() {
                        if m == want {
                            part[r * row..(r + 1) * row].copy_from_slice(&g[r * row..(r + 1) * row]);
                        }
                    }
                    self.acc(grads, target, part);
                }
            }
            Op::Gather { x, idx } => {
                let c = *self.shape(*x).last().unwrap();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * c + i] = g[r];
                }
                self.acc(grads, *x, dx);
            }
            Op::PixelCe {
                logits,
                targets,
                weights,
                probs,
            } => {
                let s = self.shape(*logits);
                let (b, c) = (s[0], s[1]);
                let px = numel(&s[2..]);
                let mut dx = vec![T::zero(); probs.len()];
                for bi in 0..b {
                    for p in 0..px {
                        let w = weights[bi * px + p];
                        if w == T::zero() {
                            continue;
                        }
                        let scale = g[0] * w;
                        let t = targets[bi * px + p];
                        for ci in 0..c {
                            let k = bi * c * px + ci * px + p;
                            let onehot = if ci == t { T::one() } else { T::zero() };
                            dx[k] = scale * (probs[k] - onehot);
                        }
                    }
                }
                self.acc(grads, *logits, dx);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, &c) in existing.iter_mut().zip(&contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn broadcast_values(&self, v: Var, out_shape: &[usize]) -> Vec<T> {
        let src = self.value(v).data();
        match mapping(out_shape, self.shape(v)) {
            Mapping::Same => src.to_vec(),
            Mapping::Cyclic(_) => tile(src, numel(out_shape)),
            Mapping::Indexed(idx) => idx.iter().map(|&i| src[i]).collect(),
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let lead = broadcast_shapes(lead_a, lead_b).expect("checked in forward");
        let batches = numel(&lead);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut ga = self.needs(a).then(|| vec![T::zero(); da.len()]);
        let mut gb = self.needs(b).then(|| vec![T::zero(); db.len()]);
        if lead_b.is_empty() || numel(lead_b) == 1 && lead_a == lead.as_slice() {
            let rows = batches * m;
            if let Some(ga) = ga.as_mut() {
                // dA = dC @ B^T
                unsafe {
                    T::gemm(
                        rows, n, k, T::one(), g.as_ptr(), n as isize, 1, db.as_ptr(), 1, n as isize,
                        T::zero(), ga.as_mut_ptr(), k as isize, 1,
                    );
                }
            }
            if let Some(gb) = gb.as_mut() {
                // dB = A^T @ dC
                unsafe {
                    T::gemm(
                        k, rows, n, T::one(), da.as_ptr(), 1, k as isize, g.as_ptr(), n as isize, 1,
                        T::zero(), gb.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        } else {
            let ia = bcast_index(&lead, lead_a);
            let ib = bcast_index(&lead, lead_b);
            for bi in 0..batches {
                let gp = unsafe { g.as_ptr().add(bi * m * n) };
                if let Some(ga) = ga.as_mut() {
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            gp,
                            n as isize,
                            1,
                            db.as_ptr().add(ib[bi] * k * n),
                            1,
                            n as isize,
                            T::one(),
                            ga.as_mut_ptr().add(ia[bi] * m * k),
                            k as isize,
                            1,
                        );
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    unsafe {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            da.as_ptr().add(ia[bi] * m * k),
                            1,
                            k as isize,
                            gp,
                            n as isize,
                            1,
                            T::one(),
                            gb.as_mut_ptr().add(ib[bi] * k * n),
                            n as isize,
                            1,
                        );
                    }
                }
            }
        }
        if let Some(ga) = ga {
            self.acc(grads, a, ga);
        }
        if let Some(gb) = gb {
            self.acc(grads, b, gb);
        }
    }
}

/// (output offset, source offset) within one sample for every in-range tap.
fn unfold_taps(geo: &PatchGeometry, c: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let p = geo.patch;
    let feat = c * p * p;
    let mut taps = Vec::with_capacity(geo.out_h * geo.out_w * feat);
    for oy in 0..geo.out_h {
        for ox in 0..geo.out_w {
            let t = oy * geo.out_w + ox;
            for ci in 0..c {
                for py in 0..p {
                    let y = (oy * geo.stride + py) as isize - geo.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for px in 0..p {
                        let x = (ox * geo.stride + px) as isize - geo.pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let f = (ci * p + py) * p + px;
                        taps.push((t * feat + f, (ci * h + y as usize) * w + x as usize));
                    }
                }
            }
        }
    }
    taps
}
