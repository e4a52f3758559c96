//! Forward kernels shared by the free-function API and the tape.

use crate::error::{Error, Result};
use crate::numerics::counter::OpCounter;
use crate::numerics::tensor::{DType, Tensor, MAX_RANK};

/// `c (+)= op(a) * op(b)` where `op` optionally transposes. `op(a)` is m×k and
/// `op(b)` is k×n; storage is row-major in the untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain two-dimensional matrix product, counted on `counter`.
pub fn matmul(a: &Tensor, b: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul expects rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(false, false, m, k, n, a.data(), b.data(), &mut out, false);
    counter.add((m * k * n) as u128);
    Ok(Tensor::from_parts(vec![m, n], out, a.dtype()).with_dtype(a.dtype()))
}

/// Numpy-style broadcasting of two shapes padded to rank 4.
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    out4: [usize; MAX_RANK],
    sa: [usize; MAX_RANK],
    sb: [usize; MAX_RANK],
}

fn pad4(shape: &[usize]) -> [usize; MAX_RANK] {
    let mut out = [1; MAX_RANK];
    out[MAX_RANK - shape.len()..].copy_from_slice(shape);
    out
}

fn strides4(shape: &[usize; MAX_RANK]) -> [usize; MAX_RANK] {
    let mut s = [0; MAX_RANK];
    let mut acc = 1;
    for d in (0..MAX_RANK).rev() {
        s[d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    s
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let (pa, pb) = (pad4(a), pad4(b));
        let mut out4 = [1; MAX_RANK];
        for d in 0..MAX_RANK {
            out4[d] = match (pa[d], pb[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::shape(format!(
                        "shapes {a:?} and {b:?} do not broadcast"
                    )))
                }
            };
        }
        let rank = a.len().max(b.len());
        Ok(Broadcast {
            out_shape: out4[MAX_RANK - rank..].to_vec(),
            out4,
            sa: strides4(&pa),
            sb: strides4(&pb),
        })
    }

    /// Calls `f(out_index, a_index, b_index)` in row-major output order.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d0, d1, d2, d3] = self.out4;
        let (sa, sb) = (self.sa, self.sb);
        let mut o = 0;
        for i0 in 0..d0 {
            for i1 in 0..d1 {
                let base_a = i0 * sa[0] + i1 * sa[1];
                let base_b = i0 * sb[0] + i1 * sb[1];
                for i2 in 0..d2 {
                    let ra = base_a + i2 * sa[2];
                    let rb = base_b + i2 * sb[2];
                    for i3 in 0..d3 {
                        f(o, ra + i3 * sa[3], rb + i3 * sb[3]);
                        o += 1;
                    }
                }
            }
        }
    }

    pub fn numel(&self) -> usize {
        self.out4.iter().product()
    }
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let dtype = a.dtype();
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| op(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data, dtype));
    }
    let bc = Broadcast::new(a.shape(), b.shape())?;
    let mut out = vec![0.0; bc.numel()];
    let (ad, bd) = (a.data(), b.data());
    bc.for_each(|o, ia, ib| out[o] = op(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(bc.out_shape, out, dtype))
}

/// Softmax over contiguous rows of length `len` in place. Rows belonging to
/// group `r / rows_per_group` only see the keys enabled in that group's mask;
/// masked keys get exactly zero weight.
pub(crate) fn softmax_rows(
    data: &mut [f64],
    len: usize,
    mask: Option<(&[bool], usize)>,
) -> Result<()> {
    for (r, row) in data.chunks_mut(len).enumerate() {
        let keys = mask.map(|(m, per)| &m[(r / per) * len..(r / per + 1) * len]);
        let valid = |j: usize| keys.is_none_or(|k| k[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if valid(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::invalid("softmax row with no valid keys"));
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if valid(j) { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

/// Numerically stabilised softmax over the last dimension.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    x.check_finite("softmax_lastdim input")?;
    let (_, len) = x.last_dim_split();
    let mut out = x.clone();
    softmax_rows(out.data_mut(), len, None)?;
    Ok(out.with_dtype(x.dtype()))
}

/// Affine map of each sample (or of the whole tensor) onto `[0, 1]`.
/// A constant slice maps to 0.5 everywhere.
/// Whether a slice spanning `[lo, hi]` is constant up to rounding at the
/// given precision.
pub(crate) fn is_flat(lo: f64, hi: f64, dtype: DType) -> bool {
    let rel = match dtype {
        DType::F32 => 1e-5,
        DType::F64 => 1e-10,
    };
    hi - lo <= rel * lo.abs().max(hi.abs())
}

pub fn minmax_normalize(x: &Tensor, per_sample: bool) -> Tensor {
    let slice_len = if per_sample {
        x.numel() / x.shape()[0]
    } else {
        x.numel()
    };
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(slice_len) {
        let lo = chunk.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !is_flat(lo, hi, x.dtype()) {
            let inv = 1.0 / (hi - lo);
            for v in chunk.iter_mut() {
                *v = (*v - lo) * inv;
            }
        } else {
            chunk.fill(0.5);
        }
    }
    out.with_dtype(x.dtype())
}

/// Source taps for one axis of an align-corners=false bilinear resize.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn resize_forward(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (ty, tx) = (resize_taps(h, oh), resize_taps(w, ow));
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, t) in ty.iter().enumerate() {
            let (r0, r1) = (&src[t.lo * w..(t.lo + 1) * w], &src[t.hi * w..(t.hi + 1) * w]);
            for (ox, s) in tx.iter().enumerate() {
                let top = r0[s.lo] + (r0[s.hi] - r0[s.lo]) * s.frac;
                let bottom = r1[s.lo] + (r1[s.hi] - r1[s.lo]) * s.frac;
                dst[oy * ow + ox] = top + (bottom - top) * t.frac;
            }
        }
    }
    out
}

/// Adjoint of [`resize_forward`].
pub(crate) fn resize_backward(g: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (ty, tx) = (resize_taps(h, oh), resize_taps(w, ow));
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, t) in ty.iter().enumerate() {
            for (ox, s) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                let (wy0, wy1) = (1.0 - t.frac, t.frac);
                let (wx0, wx1) = (1.0 - s.frac, s.frac);
                dst[t.lo * w + s.lo] += v * wy0 * wx0;
                dst[t.lo * w + s.hi] += v * wy0 * wx1;
                dst[t.hi * w + s.lo] += v * wy1 * wx0;
                dst[t.hi * w + s.hi] += v * wy1 * wx1;
            }
        }
    }
    out
}

/// Bilinear resize of a `B×C×H×W` tensor to `out_h×out_w`
/// (half-pixel centres, edge clamped).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "bilinear resize expects B×C×H×W, got {:?}",
            x.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear resize to an empty extent"));
    }
    let s = x.shape();
    let planes = s[0] * s[1];
    let data = resize_forward(x.data(), planes, s[2], s[3], out_h, out_w);
    Ok(Tensor::from_parts(vec![s[0], s[1], out_h, out_w], data, x.dtype()).with_dtype(x.dtype()))
}

/// Bilinear upsampling by an integer factor; factor 1 is the identity.
pub fn bilinear_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "bilinear upsample expects B×C×H×W, got {:?}",
            x.shape()
        )));
    }
    bilinear_resize(x, x.shape()[2] * factor, x.shape()[3] * factor)
}

pub(crate) fn round_in_place(data: &mut [f64], dtype: DType) {
    if dtype == DType::F32 {
        for v in data {
            *v = *v as f32 as f64;
        }
    }
}
