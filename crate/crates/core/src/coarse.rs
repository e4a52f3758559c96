//! Coarse stage: class-token attention fusion, soft thresholding and
//! gate-guided global attention over the coarse patch grid.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::init::ParamInit;
use crate::numerics::{argmin_argmax, DType, Tape, Tensor, Var};

/// Tolerance for the row-stochastic sanity check on attention inputs.
pub const STOCHASTIC_TOL: f64 = 1e-5;

/// Default soft-threshold temperature.
pub const DEFAULT_TEMPERATURE: f64 = 10.0;

/// Encoder layer indices fused by the default configuration.
pub const DEFAULT_LAYER_IDS: [usize; 4] = [1, 4, 8, 11];

/// The four-layer selections from a 12-layer encoder, by configuration
/// letter. `C` is the default.
pub fn layer_preset(name: &str) -> Option<[usize; 4]> {
    match name {
        "A" | "a" => Some([0, 3, 6, 9]),
        "B" | "b" => Some([1, 4, 7, 10]),
        "C" | "c" => Some(DEFAULT_LAYER_IDS),
        "D" | "d" => Some([2, 5, 8, 11]),
        _ => None,
    }
}

/// One layer's attention probabilities.
#[derive(Debug, Clone)]
pub enum AttentionLayer {
    /// Full `B×heads×T×T` attention.
    Dense(Tensor),
    /// Only the class-token rows `B×heads×T` of a logical `B×heads×T×T`
    /// tensor; the remaining rows are never read.
    ClsRows(Tensor),
}

impl AttentionLayer {
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let s = match self {
            AttentionLayer::Dense(t) => {
                if t.rank() != 4 || t.shape()[2] != t.shape()[3] {
                    return Err(Error::shape(format!(
                        "dense attention must be B×H×T×T, got {:?}",
                        t.shape()
                    )));
                }
                t.shape()
            }
            AttentionLayer::ClsRows(t) => {
                if t.rank() != 3 {
                    return Err(Error::shape(format!(
                        "class-token rows must be B×H×T, got {:?}",
                        t.shape()
                    )));
                }
                t.shape()
            }
        };
        Ok((s[0], s[1], s[2]))
    }

    /// Logical `[B, heads, T, T]` shape.
    pub fn logical_shape(&self) -> [usize; 4] {
        let (b, h, t) = self.dims().expect("validated on construction");
        [b, h, t, t]
    }

    fn cls_row(&self, b: usize, h: usize, cls: usize) -> &[f64] {
        let (_, heads, t) = self.dims().expect("validated on construction");
        match self {
            AttentionLayer::Dense(x) => {
                let start = ((b * heads + h) * t + cls) * t;
                &x.data()[start..start + t]
            }
            AttentionLayer::ClsRows(x) => {
                let start = (b * heads + h) * t;
                &x.data()[start..start + t]
            }
        }
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let t = self.dims().expect("validated on construction").2;
        match self {
            AttentionLayer::Dense(x) | AttentionLayer::ClsRows(x) => x.data().chunks(t),
        }
    }
}

/// Attention maps from the selected encoder layers.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    layers: Vec<AttentionLayer>,
    cls_index: usize,
    layer_ids: Vec<usize>,
}

impl AttentionStack {
    pub fn new(layers: Vec<AttentionLayer>, cls_index: usize, layer_ids: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("attention stack needs at least one layer"));
        }
        if layer_ids.len() != layers.len() {
            return Err(Error::invalid(format!(
                "{} layer ids for {} layers",
                layer_ids.len(),
                layers.len()
            )));
        }
        let (b0, _, t0) = layers[0].dims()?;
        for l in &layers {
            let (b, _, t) = l.dims()?;
            if (b, t) != (b0, t0) {
                return Err(Error::shape("attention layers disagree on batch or token count"));
            }
        }
        if cls_index >= t0 {
            return Err(Error::invalid(format!("class token {cls_index} out of {t0} tokens")));
        }
        if grid_side(t0 - 1).is_none() {
            return Err(Error::shape(format!(
                "{t0} tokens is not one class token plus a square patch grid"
            )));
        }
        let stack = AttentionStack {
            layers,
            cls_index,
            layer_ids,
        };
        let bad = stack.stochastic_violations();
        if bad > 0 {
            log::warn!("{bad} attention rows are not row-stochastic within {STOCHASTIC_TOL}");
        }
        Ok(stack)
    }

    pub fn layers(&self) -> &[AttentionLayer] {
        &self.layers
    }

    pub fn cls_index(&self) -> usize {
        self.cls_index
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    pub fn batch(&self) -> usize {
        self.layers[0].logical_shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.layers[0].logical_shape()[2]
    }

    pub fn patches(&self) -> usize {
        self.tokens() - 1
    }

    /// Number of stored rows whose sum is off by more than [`STOCHASTIC_TOL`].
    pub fn stochastic_violations(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.rows())
            .filter(|r| (r.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL)
            .count()
    }
}

/// Side length of a square grid with `n` cells.
pub fn grid_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n && n > 0).then_some(s)
}

/// Head-averaged class-token attention to every patch of one layer,
/// min-max normalised per sample. Shape `B×N_patches`.
pub fn extract_cls_attention(stack: &AttentionStack, layer: usize) -> Result<Tensor> {
    let l = stack
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} out of {}", stack.layers.len())))?;
    let [b, heads, t, _] = l.logical_shape();
    let cls = stack.cls_index;
    let n = t - 1;
    let mut out = vec![0.0; b * n];
    for bi in 0..b {
        let dst = &mut out[bi * n..(bi + 1) * n];
        for h in 0..heads {
            let row = l.cls_row(bi, h, cls);
            let patches = row[..cls].iter().chain(&row[cls + 1..]);
            for (d, v) in dst.iter_mut().zip(patches) {
                *d += v;
            }
        }
        let inv = 1.0 / heads as f64;
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    let scores = Tensor::new(&[b, n], out)?;
    Ok(crate::numerics::minmax_normalize(&scores, true))
}

/// Learnable fusion logits; the fusion weights are their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    logits: Vec<f64>,
}

impl LayerWeights {
    pub fn uniform(layers: usize) -> Self {
        LayerWeights {
            logits: vec![0.0; layers],
        }
    }

    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("layer logits must be finite and non-empty"));
        }
        Ok(LayerWeights { logits })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        let t = Tensor::new(&[self.logits.len()], self.logits.clone()).expect("non-empty");
        crate::numerics::softmax_lastdim(&t)
            .expect("finite logits")
            .into_data()
    }
}

/// Convex combination of per-layer scores with softmax-normalised weights.
pub fn fuse_layers(per_layer: &[Tensor], weights: &LayerWeights) -> Result<Tensor> {
    if per_layer.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} score maps for {} layer weights",
            per_layer.len(),
            weights.len()
        )));
    }
    let shape = per_layer[0].shape();
    if per_layer.iter().any(|s| s.shape() != shape) {
        return Err(Error::shape("per-layer score maps differ in shape"));
    }
    let mut out = vec![0.0; per_layer[0].numel()];
    for (s, w) in per_layer.iter().zip(weights.weights()) {
        for (o, v) in out.iter_mut().zip(s.data()) {
            *o += w * v;
        }
    }
    Tensor::new(shape, out)
}

/// `σ((s − τ_b) · λ)` with one threshold per sample (leading axis).
pub fn soft_select(scores: &Tensor, tau: &[f64], lambda: f64) -> Result<Tensor> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {lambda}")));
    }
    let b = scores.shape()[0];
    if tau.len() != b {
        return Err(Error::shape(format!("{} thresholds for batch {b}", tau.len())));
    }
    let per = scores.numel() / b;
    let data = scores
        .data()
        .chunks(per)
        .zip(tau)
        .flat_map(|(row, &t)| row.iter().map(move |&s| 1.0 / (1.0 + (-(s - t) * lambda).exp())))
        .collect();
    Tensor::new(scores.shape(), data)
}

/// Tape form of [`soft_select`]; `tau` broadcasts against `scores`.
pub fn soft_select_var(tape: &mut Tape, scores: &Var, tau: &Var, lambda: f64) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {lambda}")));
    }
    let d = tape.sub(scores, tau)?;
    let z = tape.scale(&d, lambda)?;
    tape.sigmoid(&z)
}

/// Concatenates `B×1` columns into `B×k`.
fn concat_cols(tape: &mut Tape, cols: &[&Var]) -> Result<Var> {
    let b = cols[0].shape()[0];
    let k = cols.len();
    let mut acc: Option<Var> = None;
    for (j, c) in cols.iter().enumerate() {
        let idx: Vec<u32> = (0..b).map(|r| (r * k + j) as u32).collect();
        let placed = tape.scatter_add(c, Rc::new(idx), 1, &[b, k])?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &placed)?,
            None => placed,
        });
    }
    Ok(acc.expect("at least one column"))
}

/// Learned per-sample threshold: a two-layer perceptron over the score
/// statistics `[mean, std, max]` with a sigmoid output.
#[derive(Debug, Clone)]
pub struct ThresholdSelector {
    pub w1: Rc<Tensor>,
    pub b1: Rc<Tensor>,
    pub w2: Rc<Tensor>,
    pub b2: Rc<Tensor>,
}

impl ThresholdSelector {
    pub const HIDDEN: usize = 8;

    /// Small weights and a zero output bias, so thresholds start near 0.5.
    pub fn init(init: &mut ParamInit) -> Self {
        ThresholdSelector {
            w1: init.uniform(&[3, Self::HIDDEN]),
            b1: init.zeros(&[Self::HIDDEN]),
            w2: init.uniform(&[Self::HIDDEN, 1]),
            b2: init.zeros(&[1]),
        }
    }

    /// Thresholds in `(0, 1)`, shape `B×1`, for scores shaped `B×N`.
    pub fn forward(&self, tape: &mut Tape, scores: &Var) -> Result<Var> {
        let s = scores.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("threshold selector expects B×N, got {s:?}")));
        }
        let b = s[0];
        let mean = tape.mean_last(scores)?;
        let mean = tape.reshape(&mean, &[b, 1])?;
        let centered = tape.sub(scores, &mean)?;
        let sq = tape.mul(&centered, &centered)?;
        let var = tape.mean_last(&sq)?;
        let var = tape.add_scalar(&var, 1e-12)?;
        let std = tape.powf(&var, 0.5)?;
        let std = tape.reshape(&std, &[b, 1])?;
        let argmax: Vec<usize> = scores
            .data()
            .chunks(s[1])
            .map(|r| argmin_argmax(r).1)
            .collect();
        let max = tape.pick_cols(scores, &argmax)?;
        let stats = concat_cols(tape, &[&mean, &std, &max])?;

        let (w1, b1) = (tape.param(&self.w1), tape.param(&self.b1));
        let (w2, b2) = (tape.param(&self.w2), tape.param(&self.b2));
        let h = tape.linear(&stats, &w1, Some(&b1))?;
        let h = tape.gelu(&h)?;
        let o = tape.linear(&h, &w2, Some(&b2))?;
        tape.sigmoid(&o)
    }

    pub fn evaluate(&self, scores: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::inference(DType::F64);
        let s = tape.leaf(scores.clone());
        Ok(self.forward(&mut tape, &s)?.value().data().to_vec())
    }
}

/// How the layer weights are spread over the patch tokens in the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaExpand {
    /// Linear interpolation of the L weights to N equally spaced positions.
    #[default]
    Interp,
    /// No weighting: the gate is the soft selection alone.
    Ones,
}

impl std::str::FromStr for AlphaExpand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interp" => Ok(AlphaExpand::Interp),
            "ones" => Ok(AlphaExpand::Ones),
            other => Err(Error::invalid(format!("unknown alpha-expand mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for AlphaExpand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AlphaExpand::Interp => "interp",
            AlphaExpand::Ones => "ones",
        })
    }
}

/// `L×N` matrix mapping L samples at equally spaced positions onto N
/// positions by linear interpolation.
pub fn interpolation_matrix(l: usize, n: usize) -> Tensor {
    let mut m = vec![0.0; l * n];
    for j in 0..n {
        if l == 1 {
            m[j] = 1.0;
            continue;
        }
        let t = if n == 1 {
            0.0
        } else {
            j as f64 * (l - 1) as f64 / (n - 1) as f64
        };
        let lo = (t.floor() as usize).min(l - 1);
        let hi = (lo + 1).min(l - 1);
        let frac = t - lo as f64;
        m[lo * n + j] += 1.0 - frac;
        m[hi * n + j] += frac;
    }
    Tensor::new(&[l, n], m).expect("non-empty")
}

/// Row index maps between `[B, N, heads, d]` and `[B, heads, N, d]`.
pub(crate) fn head_split_index(batch: usize, n: usize, heads: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(batch * n * heads);
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..n {
                idx.push(((b * n + t) * heads + h) as u32);
            }
        }
    }
    idx
}

pub(crate) fn head_merge_index(batch: usize, n: usize, heads: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(batch * n * heads);
    for b in 0..batch {
        for t in 0..n {
            for h in 0..heads {
                idx.push(((b * heads + h) * n + t) as u32);
            }
        }
    }
    idx
}

/// Element index maps between `B×C×N` and `B×N×C` layouts.
pub(crate) fn channels_last_index(batch: usize, c: usize, n: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(batch * c * n);
    for b in 0..batch {
        for t in 0..n {
            for ch in 0..c {
                idx.push((b * c * n + ch * n + t) as u32);
            }
        }
    }
    idx
}

pub(crate) fn channels_first_index(batch: usize, c: usize, n: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(batch * c * n);
    for b in 0..batch {
        for ch in 0..c {
            for t in 0..n {
                idx.push((b * n * c + t * c + ch) as u32);
            }
        }
    }
    idx
}

/// Multi-head attention with input and output projections.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub heads: usize,
    pub w_q: Rc<Tensor>,
    pub b_q: Rc<Tensor>,
    pub w_k: Rc<Tensor>,
    pub b_k: Rc<Tensor>,
    pub w_v: Rc<Tensor>,
    pub b_v: Rc<Tensor>,
    pub w_o: Rc<Tensor>,
    pub b_o: Rc<Tensor>,
}

impl MhaParams {
    pub fn init(init: &mut ParamInit, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        Ok(MhaParams {
            heads,
            w_q: init.uniform(&[channels, channels]),
            b_q: init.uniform(&[channels]),
            w_k: init.uniform(&[channels, channels]),
            b_k: init.uniform(&[channels]),
            w_v: init.uniform(&[channels, channels]),
            b_v: init.uniform(&[channels]),
            w_o: init.uniform(&[channels, channels]),
            b_o: init.uniform(&[channels]),
        })
    }

    /// Scaled dot-product attention of `query` tokens over `kv` tokens,
    /// both `B×N×C`.
    pub fn forward(&self, tape: &mut Tape, query: &Var, kv: &Var) -> Result<Var> {
        let s = query.shape().to_vec();
        let (b, n, c) = (s[0], s[1], s[2]);
        let (h, d) = (self.heads, c / self.heads);
        let p = |tape: &mut Tape, w: &Rc<Tensor>| tape.param(w);
        let (wq, bq, wk, bk) = (p(tape, &self.w_q), p(tape, &self.b_q), p(tape, &self.w_k), p(tape, &self.b_k));
        let (wv, bv, wo, bo) = (p(tape, &self.w_v), p(tape, &self.b_v), p(tape, &self.w_o), p(tape, &self.b_o));
        let q = tape.linear(query, &wq, Some(&bq))?;
        let k = tape.linear(kv, &wk, Some(&bk))?;
        let v = tape.linear(kv, &wv, Some(&bv))?;
        let split = Rc::new(head_split_index(b, n, h));
        let q = tape.gather(&q, Rc::clone(&split), d, &[b, h, n, d])?;
        let k = tape.gather(&k, Rc::clone(&split), d, &[b, h, n, d])?;
        let v = tape.gather(&v, split, d, &[b, h, n, d])?;
        let logits = tape.matmul_t(&q, &k, false, true)?;
        let logits = tape.scale(&logits, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax(&logits)?;
        let out = tape.matmul(&attn, &v)?;
        let merged = tape.gather(&out, Rc::new(head_merge_index(b, n, h)), d, &[b, n, c])?;
        tape.linear(&merged, &wo, Some(&bo))
    }
}

/// `1×1` convolution over `concat[F, F_attn]` (2C → C), stored as the two
/// halves of its weight.
#[derive(Debug, Clone)]
pub struct ConvFuse {
    pub w_feat: Rc<Tensor>,
    pub w_attn: Rc<Tensor>,
    pub bias: Rc<Tensor>,
}

impl ConvFuse {
    /// Identity on the feature half, zero on the attention half.
    pub fn init(init: &mut ParamInit, channels: usize) -> Self {
        ConvFuse {
            w_feat: init.eye(channels),
            w_attn: init.zeros(&[channels, channels]),
            bias: init.zeros(&[channels]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoarseParams {
    pub layer_weights: LayerWeights,
    pub selector: ThresholdSelector,
    pub mha: MhaParams,
    pub fuse: ConvFuse,
    pub temperature: f64,
    pub alpha_expand: AlphaExpand,
}

impl CoarseParams {
    pub fn init(init: &mut ParamInit, channels: usize, heads: usize, layers: usize) -> Result<Self> {
        Ok(CoarseParams {
            layer_weights: LayerWeights::uniform(layers),
            selector: ThresholdSelector::init(init),
            mha: MhaParams::init(init, channels, heads)?,
            fuse: ConvFuse::init(init, channels),
            temperature: DEFAULT_TEMPERATURE,
            alpha_expand: AlphaExpand::Interp,
        })
    }
}

/// Coarse-stage results as tape values.
pub struct CoarseVars {
    /// Guided features `F′`, `B×C×H×W`.
    pub features: Var,
    /// Soft coarse mask `M_c`, `B×1×H×W`.
    pub mask: Var,
    /// Per-sample threshold, `B×1`.
    pub tau: Var,
}

/// Coarse-stage results.
#[derive(Debug, Clone)]
pub struct CoarseOutput {
    pub features: Tensor,
    pub mask: Tensor,
    pub tau: Vec<f64>,
    pub fused_scores: Tensor,
}

/// Gate-guided global attention over the coarse grid.
///
/// Tokens are the flattened features. The gate is the soft selection of the
/// fused scores at the learned threshold, weighted by the expanded layer
/// weights; it scales the key/value tokens, and the attention output is
/// fused back with the input features by a `1×1` convolution.
pub fn guided_global_attention(
    tape: &mut Tape,
    features: &Var,
    fused: &Var,
    params: &CoarseParams,
) -> Result<CoarseVars> {
    let fs = features.shape().to_vec();
    if fs.len() != 4 {
        return Err(Error::shape(format!("coarse features must be B×C×H×W, got {fs:?}")));
    }
    let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let n = h * w;
    if fused.shape() != [b, n] {
        return Err(Error::shape(format!(
            "fused scores {:?} do not match a {h}×{w} grid with batch {b}",
            fused.shape()
        )));
    }
    let x = tape.gather(features, Rc::new(channels_last_index(b, c, n)), 1, &[b, n, c])?;
    let tau = params.selector.forward(tape, fused)?;
    let gate = soft_select_var(tape, fused, &tau, params.temperature)?;
    let w_soft = match params.alpha_expand {
        AlphaExpand::Interp => {
            let l = params.layer_weights.len();
            let logits = tape.leaf(Tensor::new(&[1, l], params.layer_weights.logits().to_vec())?);
            let alpha = tape.softmax(&logits)?;
            let interp = tape.leaf(interpolation_matrix(l, n));
            let alpha_exp = tape.matmul(&alpha, &interp)?;
            tape.mul(&gate, &alpha_exp)?
        }
        AlphaExpand::Ones => gate,
    };
    let col = tape.reshape(&w_soft, &[b, n, 1])?;
    let kv = tape.mul(&x, &col)?;
    let attended = params.mha.forward(tape, &x, &kv)?;

    let wf = tape.param(&params.fuse.w_feat);
    let wa = tape.param(&params.fuse.w_attn);
    let bias = tape.param(&params.fuse.bias);
    let from_feat = tape.matmul(&x, &wf)?;
    let from_attn = tape.matmul(&attended, &wa)?;
    let fused_tokens = tape.add(&from_feat, &from_attn)?;
    let fused_tokens = tape.add(&fused_tokens, &bias)?;
    let out = tape.gather(&fused_tokens, Rc::new(channels_first_index(b, c, n)), 1, &[b, c, h, w])?;

    let mask = tape.reshape(&w_soft, &[b, 1, h, w])?;
    Ok(CoarseVars {
        features: out,
        mask,
        tau,
    })
}

/// Runs [`guided_global_attention`] forward only.
pub fn run_coarse(features: &Tensor, fused: &Tensor, params: &CoarseParams, dtype: DType) -> Result<CoarseOutput> {
    let mut tape = Tape::inference(dtype);
    let f = tape.leaf(features.clone());
    let s = tape.leaf(fused.clone());
    let out = guided_global_attention(&mut tape, &f, &s, params)?;
    Ok(CoarseOutput {
        features: out.features.to_tensor(),
        mask: out.mask.to_tensor(),
        tau: out.tau.data().to_vec(),
        fused_scores: s.to_tensor(),
    })
}

/// Per-layer extraction and fusion for every layer of `stack`.
pub fn fused_scores(stack: &AttentionStack, weights: &LayerWeights) -> Result<Tensor> {
    let per_layer = (0..stack.layers().len())
        .map(|l| extract_cls_attention(stack, l))
        .collect::<Result<Vec<_>>>()?;
    fuse_layers(&per_layer, weights)
}
