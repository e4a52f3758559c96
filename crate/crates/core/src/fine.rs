//! Fine stage: mask-guided sparse window attention at four times the coarse
//! resolution, producing the fine soft mask.

use std::rc::Rc;

use crate::coarse::{channels_last_index, head_merge_index, head_split_index, soft_select_var, ThresholdSelector, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::init::ParamInit;
use crate::numerics::{DType, Tape, Tensor, Var, PAD_INDEX};

pub const DEFAULT_WINDOW: usize = 6;
pub const DEFAULT_SCALE: usize = 4;
pub const MLP_RATIO: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Rows per chunk when the residual MLP runs without recording.
const MLP_CHUNK_ROWS: usize = 4096;

/// Window geometry for one attention pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub size: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(size: usize, shift: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("window size must be at least 1"));
        }
        if shift >= size {
            return Err(Error::invalid(format!("shift {shift} must be below window size {size}")));
        }
        Ok(WindowSpec { size, shift })
    }

    pub fn unshifted(size: usize) -> Result<Self> {
        Self::new(size, 0)
    }

    /// The half-window shift used by the second pass.
    pub fn shifted(size: usize) -> Result<Self> {
        Self::new(size, size / 2)
    }

    pub fn tokens(&self) -> usize {
        self.size * self.size
    }
}

/// Geometry of a partition, enough to undo it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadRecord {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub window: usize,
    pub shift: usize,
    /// One flag per window slot; `false` marks zero padding.
    pub valid: Vec<bool>,
}

impl PadRecord {
    pub fn windows_per_image(&self) -> usize {
        (self.padded_height / self.window) * (self.padded_width / self.window)
    }

    pub fn num_windows(&self) -> usize {
        self.batch * self.windows_per_image()
    }
}

/// Token rows for every window slot after rolling the grid by `shift` and
/// zero-padding bottom/right to a multiple of `ws`.
pub(crate) fn partition_index(batch: usize, h: usize, w: usize, ws: usize, shift: usize) -> (Vec<u32>, PadRecord) {
    let (ph, pw) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
    let (nwy, nwx) = (ph / ws, pw / ws);
    let total = batch * nwy * nwx * ws * ws;
    let mut idx = Vec::with_capacity(total);
    let mut valid = Vec::with_capacity(total);
    for b in 0..batch {
        for wy in 0..nwy {
            for wx in 0..nwx {
                for iy in 0..ws {
                    for ix in 0..ws {
                        let (y, x) = (wy * ws + iy, wx * ws + ix);
                        if y < h && x < w {
                            let (sy, sx) = ((y + shift) % h, (x + shift) % w);
                            idx.push((b * h * w + sy * w + sx) as u32);
                            valid.push(true);
                        } else {
                            idx.push(PAD_INDEX);
                            valid.push(false);
                        }
                    }
                }
            }
        }
    }
    let record = PadRecord {
        batch,
        height: h,
        width: w,
        padded_height: ph,
        padded_width: pw,
        window: ws,
        shift,
        valid,
    };
    (idx, record)
}

/// Window-slot row for every grid token: crops the padding and rolls back.
pub(crate) fn reverse_index(r: &PadRecord) -> Vec<u32> {
    let (h, w, ws) = (r.height, r.width, r.window);
    let nwx = r.padded_width / ws;
    let nwin = r.windows_per_image();
    let mut idx = Vec::with_capacity(r.batch * h * w);
    for b in 0..r.batch {
        for y in 0..h {
            for x in 0..w {
                let ry = (y + h - r.shift % h) % h;
                let rx = (x + w - r.shift % w) % w;
                let win = b * nwin + (ry / ws) * nwx + rx / ws;
                idx.push((win * ws * ws + (ry % ws) * ws + rx % ws) as u32);
            }
        }
    }
    idx
}

fn apply_rows(src: &Tensor, idx: &[u32], block: usize, shape: &[usize]) -> Result<Tensor> {
    let mut out = vec![0.0; idx.len() * block];
    for (dst, &i) in out.chunks_mut(block).zip(idx) {
        if i != PAD_INDEX {
            let i = i as usize;
            dst.copy_from_slice(&src.data()[i * block..(i + 1) * block]);
        }
    }
    Ok(Tensor::new(shape, out)?.with_dtype(src.dtype()))
}

fn grid_dims(tokens: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *tokens.shape() {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::shape(format!("tokens must be B×H×W×C, got {:?}", tokens.shape()))),
    }
}

/// Splits `B×H×W×C` tokens into non-overlapping `ws×ws` windows, shaped
/// `(B·windows)×ws²×C`. Grids not divisible by `ws` are zero-padded.
pub fn window_partition(tokens: &Tensor, spec: &WindowSpec) -> Result<(Tensor, PadRecord)> {
    let (b, h, w, c) = grid_dims(tokens)?;
    let (idx, record) = partition_index(b, h, w, spec.size, 0);
    let windows = apply_rows(tokens, &idx, c, &[record.num_windows(), spec.tokens(), c])?;
    Ok((windows, record))
}

/// Inverse of [`window_partition`], cropping any padding.
pub fn window_reverse(windows: &Tensor, record: &PadRecord) -> Result<Tensor> {
    let s = windows.shape();
    if s.len() != 3 || s[0] != record.num_windows() || s[1] != record.window * record.window {
        return Err(Error::shape(format!("windows {s:?} do not match the pad record")));
    }
    let c = s[2];
    let idx = reverse_index(record);
    apply_rows(windows, &idx, c, &[record.batch, record.height, record.width, c])
}

/// Toroidal roll of a `B×H×W×C` grid: `out[y][x] = in[(y+shift) mod H][(x+shift) mod W]`.
/// Rolling by `-shift` undoes it exactly.
pub fn cyclic_shift(tokens: &Tensor, shift: isize) -> Result<Tensor> {
    let (b, h, w, c) = grid_dims(tokens)?;
    if shift.unsigned_abs() >= h.min(w) {
        return Err(Error::invalid(format!("|shift| {shift} must be below {}", h.min(w))));
    }
    let sy = shift.rem_euclid(h as isize) as usize;
    let sx = shift.rem_euclid(w as isize) as usize;
    let mut idx = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                idx.push((bi * h * w + ((y + sy) % h) * w + (x + sx) % w) as u32);
            }
        }
    }
    apply_rows(tokens, &idx, c, tokens.shape())
}

/// Logit modulation applied within windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairwiseMode {
    /// Multiply logit `(i, j)` by `m_i · m_j`, clamped to `[0, 1]`.
    #[default]
    OuterProduct,
    Off,
}

impl std::str::FromStr for PairwiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outer-product" | "outer" => Ok(PairwiseMode::OuterProduct),
            "off" => Ok(PairwiseMode::Off),
            other => Err(Error::invalid(format!("unknown pairwise mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PairwiseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairwiseMode::OuterProduct => "outer-product",
            PairwiseMode::Off => "off",
        })
    }
}

/// Swin-style relative offset index for every pair of slots in a window,
/// into a table of `(2ws−1)²` rows.
pub fn relative_position_index(ws: usize) -> Vec<usize> {
    let l = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(l * l);
    for i in 0..l {
        for j in 0..l {
            let dy = i / ws + ws - 1 - j / ws;
            let dx = i % ws + ws - 1 - j % ws;
            idx.push(dy * span + dx);
        }
    }
    idx
}

#[derive(Debug, Clone)]
pub struct SparseAttnParams {
    pub heads: usize,
    pub window: usize,
    pub w_q: Rc<Tensor>,
    pub w_k: Rc<Tensor>,
    pub w_v: Rc<Tensor>,
    /// `(2ws−1)² × heads`.
    pub rel_bias: Rc<Tensor>,
    /// Learnable key/value amplification factor, shape `[1]`.
    pub alpha_scale: Rc<Tensor>,
    pub pairwise: PairwiseMode,
}

impl SparseAttnParams {
    pub fn init(init: &mut ParamInit, channels: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        if window == 0 {
            return Err(Error::invalid("window size must be at least 1"));
        }
        let span = 2 * window - 1;
        Ok(SparseAttnParams {
            heads,
            window,
            w_q: init.uniform(&[channels, channels]),
            w_k: init.uniform(&[channels, channels]),
            w_v: init.uniform(&[channels, channels]),
            rel_bias: init.zeros(&[span * span, heads]),
            alpha_scale: Rc::new(Tensor::scalar(1.0)),
            pairwise: PairwiseMode::OuterProduct,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn set_alpha_scale(&mut self, v: f64) {
        self.alpha_scale = Rc::new(Tensor::scalar(v));
    }
}

/// Output of [`sparse_window_attention`].
pub struct WindowAttention {
    /// `windows×L×C`.
    pub output: Var,
    /// Attention probabilities, `windows×heads×L×L`.
    pub weights: Var,
}

/// Mask-modulated multi-head attention inside each window.
///
/// `windows` is `nW×L×C` with `L = ws²`, `mask` the soft token mask `nW×L`
/// and `valid` one flag per slot. Keys and values are scaled by
/// `1 + α·m_j`; logits are `Q·K′ᵀ/√d + B`, optionally multiplied by the
/// pairwise weight `m_i·m_j`, and padded keys are excluded from the softmax.
pub fn sparse_window_attention(
    tape: &mut Tape,
    windows: &Var,
    mask: &Var,
    valid: &[bool],
    params: &SparseAttnParams,
) -> Result<WindowAttention> {
    let (nw, l, c) = match *windows.shape() {
        [nw, l, c] => (nw, l, c),
        _ => return Err(Error::shape(format!("windows must be nW×L×C, got {:?}", windows.shape()))),
    };
    if mask.shape() != [nw, l] || valid.len() != nw * l {
        return Err(Error::shape(format!(
            "token mask {:?} / {} validity flags do not match windows {:?}",
            mask.shape(),
            valid.len(),
            windows.shape()
        )));
    }
    if l != params.window * params.window || c != params.channels() {
        return Err(Error::shape(format!(
            "windows {:?} do not match a {}×{} window with {} channels",
            windows.shape(),
            params.window,
            params.window,
            params.channels()
        )));
    }
    let (h, d) = (params.heads, c / params.heads);

    let wq = tape.param(&params.w_q);
    let wk = tape.param(&params.w_k);
    let wv = tape.param(&params.w_v);
    let alpha = tape.param(&params.alpha_scale);
    let amp = tape.mul(mask, &alpha)?;
    let amp = tape.add_scalar(&amp, 1.0)?;
    let amp = tape.reshape(&amp, &[nw, l, 1])?;

    let split = Rc::new(head_split_index(nw, l, h));
    let q = {
        let q = tape.matmul(windows, &wq)?;
        tape.gather(&q, Rc::clone(&split), d, &[nw, h, l, d])?
    };
    let k = {
        let k = tape.matmul(windows, &wk)?;
        let k = tape.mul(&k, &amp)?;
        tape.gather(&k, Rc::clone(&split), d, &[nw, h, l, d])?
    };
    let v = {
        let v = tape.matmul(windows, &wv)?;
        let v = tape.mul(&v, &amp)?;
        tape.gather(&v, split, d, &[nw, h, l, d])?
    };
    drop(amp);

    let logits = {
        let raw = tape.matmul_t(&q, &k, false, true)?;
        drop((q, k));
        let scaled = tape.scale(&raw, 1.0 / (d as f64).sqrt())?;
        drop(raw);
        let table = tape.param(&params.rel_bias);
        let rel = relative_position_index(params.window);
        let mut idx = Vec::with_capacity(h * l * l);
        for head in 0..h {
            for &r in &rel {
                idx.push((r * h + head) as u32);
            }
        }
        let bias = tape.gather(&table, Rc::new(idx), 1, &[h, l, l])?;
        tape.add(&scaled, &bias)?
    };
    let logits = match params.pairwise {
        PairwiseMode::OuterProduct => {
            let mi = tape.reshape(mask, &[nw, 1, l, 1])?;
            let mj = tape.reshape(mask, &[nw, 1, 1, l])?;
            let p = tape.mul(&mi, &mj)?;
            let p = tape.clamp(&p, 0.0, 1.0)?;
            tape.mul(&logits, &p)?
        }
        PairwiseMode::Off => logits,
    };
    let weights = tape.softmax_masked(&logits, Some((valid, h * l)))?;
    drop(logits);
    let out = tape.matmul(&weights, &v)?;
    drop(v);
    let output = tape.gather(&out, Rc::new(head_merge_index(nw, l, h)), d, &[nw, l, c])?;
    Ok(WindowAttention { output, weights })
}

/// One windowed attention pass over a `B×H×W×C` grid with soft mask
/// `B×H×W`, rolling by `shift` before partitioning and back afterwards.
pub fn window_attention_pass(
    tape: &mut Tape,
    tokens: &Var,
    mask: &Var,
    params: &SparseAttnParams,
    shift: usize,
) -> Result<Var> {
    let (b, h, w, c) = match *tokens.shape() {
        [b, h, w, c] => (b, h, w, c),
        _ => return Err(Error::shape(format!("tokens must be B×H×W×C, got {:?}", tokens.shape()))),
    };
    if mask.shape() != [b, h, w] {
        return Err(Error::shape(format!(
            "mask {:?} does not match token grid {:?}",
            mask.shape(),
            tokens.shape()
        )));
    }
    let ws = params.window;
    let (idx, record) = partition_index(b, h, w, ws, shift);
    let idx = Rc::new(idx);
    let nw = record.num_windows();
    let xw = tape.gather(tokens, Rc::clone(&idx), c, &[nw, ws * ws, c])?;
    let mw = tape.gather(mask, idx, 1, &[nw, ws * ws])?;
    let attn = sparse_window_attention(tape, &xw, &mw, &record.valid, params)?;
    drop((xw, mw));
    let WindowAttention { output, weights } = attn;
    drop(weights);
    tape.gather(&output, Rc::new(reverse_index(&record)), c, &[b, h, w, c])
}

/// Pre-norm residual feed-forward: `MLP(LayerNorm(x)) + x`.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub ln_gamma: Rc<Tensor>,
    pub ln_beta: Rc<Tensor>,
    pub w1: Rc<Tensor>,
    pub b1: Rc<Tensor>,
    pub w2: Rc<Tensor>,
    pub b2: Rc<Tensor>,
}

impl MlpParams {
    /// Zero output projection, so the residual starts as the identity.
    pub fn init(init: &mut ParamInit, channels: usize) -> Self {
        let hidden = channels * MLP_RATIO;
        MlpParams {
            ln_gamma: Rc::new(Tensor::full(&[channels], 1.0).expect("valid")),
            ln_beta: init.zeros(&[channels]),
            w1: init.uniform(&[channels, hidden]),
            b1: init.zeros(&[hidden]),
            w2: init.zeros(&[hidden, channels]),
            b2: init.zeros(&[channels]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let shape = x.shape().to_vec();
        let c = *shape.last().expect("rank >= 1");
        let rows = x.value().numel() / c;
        let flat = tape.reshape(x, &[rows, c])?;
        let delta = tape.map_rows(&flat, MLP_CHUNK_ROWS, |t, xs| {
            let (g, b) = (t.param(&self.ln_gamma), t.param(&self.ln_beta));
            let (w1, b1) = (t.param(&self.w1), t.param(&self.b1));
            let (w2, b2) = (t.param(&self.w2), t.param(&self.b2));
            let n = t.layer_norm(xs, LAYER_NORM_EPS)?;
            let n = t.mul(&n, &g)?;
            let n = t.add(&n, &b)?;
            let hdn = t.linear(&n, &w1, Some(&b1))?;
            let hdn = t.gelu(&hdn)?;
            t.linear(&hdn, &w2, Some(&b2))
        })?;
        let y = tape.add(&delta, &flat)?;
        tape.reshape(&y, &shape)
    }
}

/// Parameters of the two-pass refinement block; both passes share them.
#[derive(Debug, Clone)]
pub struct SwinBlockParams {
    pub attn: SparseAttnParams,
    pub mlp: MlpParams,
}

/// Unshifted then half-window-shifted window attention, each followed by
/// the residual MLP. Output shape equals input shape.
pub fn refined_swin_block(tape: &mut Tape, tokens: &Var, mask: &Var, params: &SwinBlockParams) -> Result<Var> {
    let spec = WindowSpec::shifted(params.attn.window)?;
    let x = window_attention_pass(tape, tokens, mask, &params.attn, 0)?;
    let x = params.mlp.forward(tape, &x)?;
    let y = window_attention_pass(tape, &x, mask, &params.attn, spec.shift)?;
    drop(x);
    params.mlp.forward(tape, &y)
}

/// `3×3` convolution over a `B×H×W×C` grid with zero padding.
#[derive(Debug, Clone)]
pub struct RefineConv {
    /// Nine `C×C` taps in row-major `(dy, dx)` order.
    pub taps: Vec<Rc<Tensor>>,
    pub bias: Rc<Tensor>,
}

impl RefineConv {
    /// Identity centre tap, zero elsewhere.
    pub fn init(init: &mut ParamInit, channels: usize) -> Self {
        let taps = (0..9)
            .map(|t| if t == 4 { init.eye(channels) } else { init.zeros(&[channels, channels]) })
            .collect();
        RefineConv {
            taps,
            bias: init.zeros(&[channels]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let (b, h, w, c) = match *x.shape() {
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::shape(format!("conv input must be B×H×W×C, got {:?}", x.shape()))),
        };
        let mut acc: Option<Var> = None;
        for (t, tap) in self.taps.iter().enumerate() {
            let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
            let mut idx = Vec::with_capacity(b * h * w);
            for bi in 0..b {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let (sy, sx) = (y + dy, xx + dx);
                        idx.push(if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            PAD_INDEX
                        } else {
                            (bi * h * w + sy as usize * w + sx as usize) as u32
                        });
                    }
                }
            }
            let shifted = tape.gather(x, Rc::new(idx), c, &[b * h * w, c])?;
            let wt = tape.param(tap);
            let contrib = tape.matmul(&shifted, &wt)?;
            drop(shifted);
            acc = Some(match acc {
                Some(a) => tape.add(&a, &contrib)?,
                None => contrib,
            });
        }
        let bias = tape.param(&self.bias);
        let y = tape.add(&acc.expect("nine taps"), &bias)?;
        tape.reshape(&y, &[b, h, w, c])
    }
}

#[derive(Debug, Clone)]
pub struct FineParams {
    pub scale: usize,
    pub conv: RefineConv,
    pub block: SwinBlockParams,
    pub selector: ThresholdSelector,
    pub temperature: f64,
}

impl FineParams {
    pub fn init(init: &mut ParamInit, channels: usize, heads: usize, window: usize, scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::invalid("fine scale must be at least 1"));
        }
        Ok(FineParams {
            scale,
            conv: RefineConv::init(init, channels),
            block: SwinBlockParams {
                attn: SparseAttnParams::init(init, channels, heads, window)?,
                mlp: MlpParams::init(init, channels),
            },
            selector: ThresholdSelector::init(init),
            temperature: DEFAULT_TEMPERATURE,
        })
    }
}

pub struct FineVars {
    /// Fine soft mask `M_f`, `B×1×H_out×W_out`.
    pub mask: Var,
    /// Per-sample fine threshold, `B×1`.
    pub tau: Var,
    /// Normalised token scores, `B×1×H_t×W_t`.
    pub scores: Var,
    /// Upsampled coarse mask guiding the window attention, `B×1×H_t×W_t`.
    pub guidance: Var,
    /// Shape of the upsampled feature map, `B×C×H_t×W_t`.
    pub tokens_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FineOutput {
    pub mask: Tensor,
    pub tau: Vec<f64>,
    pub scores: Tensor,
    pub guidance: Tensor,
    pub tokens_shape: Vec<usize>,
}

/// Upsamples the coarse features and mask, refines the features with a
/// `3×3` convolution and the two-pass window block, scores tokens by their
/// channel norm, thresholds them softly and resizes the result to
/// `out_h×out_w`.
pub fn fine_pass(
    tape: &mut Tape,
    coarse_features: &Var,
    coarse_mask: &Var,
    params: &FineParams,
    out_hw: (usize, usize),
) -> Result<FineVars> {
    let (b, c, hc, wc) = match *coarse_features.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => {
            return Err(Error::shape(format!(
                "coarse features must be B×C×H×W, got {:?}",
                coarse_features.shape()
            )))
        }
    };
    if coarse_mask.shape() != [b, 1, hc, wc] {
        return Err(Error::shape(format!(
            "coarse mask {:?} does not match features {:?}",
            coarse_mask.shape(),
            coarse_features.shape()
        )));
    }
    let (hf, wf) = (hc * params.scale, wc * params.scale);
    let n = hf * wf;
    let (tokens, tokens_shape) = {
        let up = tape.upsample(coarse_features, params.scale)?;
        let shape = up.shape().to_vec();
        let t = tape.gather(&up, Rc::new(channels_last_index(b, c, n)), 1, &[b, n, c])?;
        drop(up);
        (tape.reshape(&t, &[b, hf, wf, c])?, shape)
    };
    let guidance = tape.upsample(coarse_mask, params.scale)?;
    let mask = tape.reshape(&guidance, &[b, hf, wf])?;
    let refined = params.conv.forward(tape, &tokens)?;
    drop(tokens);
    let x = refined_swin_block(tape, &refined, &mask, &params.block)?;
    drop(refined);
    let norms = tape.l2_norm(&x)?;
    drop(x);
    let norms = tape.reshape(&norms, &[b, n])?;
    let scores = tape.minmax_rows(&norms)?;
    let tau = params.selector.forward(tape, &scores)?;
    let m = soft_select_var(tape, &scores, &tau, params.temperature)?;
    let m = tape.reshape(&m, &[b, 1, hf, wf])?;
    let mask = tape.resize_bilinear(&m, out_hw.0, out_hw.1)?;
    let scores = tape.reshape(&scores, &[b, 1, hf, wf])?;
    Ok(FineVars {
        mask,
        tau,
        scores,
        guidance,
        tokens_shape,
    })
}

/// Runs [`fine_pass`] forward only.
pub fn run_fine(
    coarse_features: &Tensor,
    coarse_mask: &Tensor,
    params: &FineParams,
    out_hw: (usize, usize),
    dtype: DType,
) -> Result<FineOutput> {
    let mut tape = Tape::inference(dtype);
    let f = tape.leaf(coarse_features.clone());
    let m = tape.leaf(coarse_mask.clone());
    let out = fine_pass(&mut tape, &f, &m, params, out_hw)?;
    Ok(FineOutput {
        mask: out.mask.to_tensor(),
        tau: out.tau.data().to_vec(),
        scores: out.scores.to_tensor(),
        guidance: out.guidance.to_tensor(),
        tokens_shape: out.tokens_shape,
    })
}
