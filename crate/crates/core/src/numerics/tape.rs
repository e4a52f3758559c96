//! Reverse-mode differentiation over a small, fixed op set.
//!
//! Every op is evaluated eagerly. When the tape is recording it also keeps
//! a node with whatever the backward rule needs; a non-recording tape keeps
//! nothing, so intermediates are freed as soon as their [`Var`] is dropped.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::counter::OpCounter;
use crate::numerics::kernels::{self, gemm, Broadcast};
use crate::numerics::tensor::{check_shape, DType, Tensor};

/// Marks a padded slot in a gather index; the gathered block is all zeros.
pub const PAD_INDEX: u32 = u32::MAX;

/// A value on the tape.
#[derive(Debug, Clone)]
pub struct Var {
    id: usize,
    value: Rc<Tensor>,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }
}

#[derive(Debug, Clone, Copy)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

enum Op {
    MatMul {
        a: Rc<Tensor>,
        b: Rc<Tensor>,
        ta: bool,
        tb: bool,
        dims: MatDims,
    },
    Add {
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Mul {
        a: Rc<Tensor>,
        b: Rc<Tensor>,
    },
    Sigmoid {
        y: Rc<Tensor>,
    },
    LogSoftmax {
        y: Rc<Tensor>,
    },
    Softmax {
        y: Rc<Tensor>,
    },
    LayerNorm {
        y: Rc<Tensor>,
        inv_std: Vec<f64>,
    },
    L2Norm {
        x: Rc<Tensor>,
        norm: Rc<Tensor>,
    },
    Resize {
        in_shape: Vec<usize>,
        out_h: usize,
        out_w: usize,
    },
    Gather {
        idx: Rc<Vec<u32>>,
        block: usize,
        in_shape: Vec<usize>,
    },
    ScatterAdd {
        idx: Rc<Vec<u32>>,
        block: usize,
        in_shape: Vec<usize>,
    },
    Reshape {
        in_shape: Vec<usize>,
    },
    Ln {
        x: Rc<Tensor>,
    },
    Recip {
        y: Rc<Tensor>,
    },
    Pow {
        x: Rc<Tensor>,
        exponent: f64,
    },
    Clamp {
        x: Rc<Tensor>,
        lo: f64,
        hi: f64,
    },
    SumLast {
        in_shape: Vec<usize>,
    },
    SumAll {
        in_shape: Vec<usize>,
    },
}

struct Node {
    out: usize,
    inputs: Vec<usize>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], keyed by [`Var`] identity.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient with respect to `v`; exactly zero when `v` did not
    /// contribute to the differentiated value.
    pub fn wrt(&self, v: &Var) -> Tensor {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::from_parts(v.shape().to_vec(), vec![0.0; v.value.numel()], DType::F64),
        }
    }
}

pub struct Tape {
    recording: bool,
    dtype: DType,
    counter: OpCounter,
    nodes: Vec<Node>,
    next_id: usize,
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn reduce_to(g: &Tensor, out_shape: &[usize], target: &[usize]) -> Tensor {
    if out_shape == target {
        return g.clone();
    }
    let bc = Broadcast::new(target, out_shape).expect("shapes broadcast in forward");
    let mut acc = vec![0.0; target.iter().product()];
    let gd = g.data();
    bc.for_each(|o, it, _| acc[it] += gd[o]);
    Tensor::from_parts(target.to_vec(), acc, DType::F64)
}

impl Tape {
    /// A tape that records nodes for [`Tape::backward`].
    pub fn recording(dtype: DType) -> Self {
        Tape {
            recording: true,
            dtype,
            counter: OpCounter::new(),
            nodes: Vec::new(),
            next_id: 0,
        }
    }

    /// A forward-only tape.
    pub fn inference(dtype: DType) -> Self {
        Tape {
            recording: false,
            ..Tape::recording(dtype)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut OpCounter {
        &mut self.counter
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn fresh_id(&mut self) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Inserts an input value.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let t = t.with_dtype(self.dtype);
        Var {
            id: self.fresh_id(),
            value: Rc::new(t),
        }
    }

    /// Inserts a shared parameter without copying it when precision allows.
    pub fn param(&mut self, t: &Rc<Tensor>) -> Var {
        let value = if self.dtype == DType::F32 && t.dtype() != DType::F32 {
            Rc::new((**t).clone().with_dtype(DType::F32))
        } else {
            Rc::clone(t)
        };
        Var {
            id: self.fresh_id(),
            value,
        }
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    fn push(
        &mut self,
        name: &'static str,
        mut out: Tensor,
        inputs: &[&Var],
        make_op: impl FnOnce(&Rc<Tensor>) -> Op,
    ) -> Result<Var> {
        kernels::round_in_place(out.data_mut(), self.dtype);
        let out = out.with_dtype(self.dtype);
        out.check_finite(name)?;
        let value = Rc::new(out);
        let id = self.fresh_id();
        if self.recording {
            let op = make_op(&value);
            self.nodes.push(Node {
                out: id,
                inputs: inputs.iter().map(|v| v.id).collect(),
                op,
            });
        }
        Ok(Var { id, value })
    }

    /// Matrix product `op(a) · op(b)` where `op` optionally swaps the last
    /// two axes. `b` may be rank 2 (shared across a's leading axes) or have
    /// the same leading axes as `a`.
    pub fn matmul_t(&mut self, a: &Var, b: &Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank >= 2: {sa:?} x {sb:?}")));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {sa:?}{} x {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let dims = if sb.len() == 2 && sa.len() > 2 {
            if ta {
                return Err(Error::shape("shared-rhs matmul cannot transpose lhs"));
            }
            MatDims {
                batch: 1,
                m: batch * m,
                k,
                n,
                shared_b: true,
            }
        } else if sb.len() == sa.len() && &sb[..sb.len() - 2] == lead {
            MatDims {
                batch,
                m,
                k,
                n,
                shared_b: false,
            }
        } else {
            return Err(Error::shape(format!("matmul batch axes differ: {sa:?} x {sb:?}")));
        };
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        let (ad, bd) = (a.data(), b.data());
        let (sza, szb, szc) = (dims.m * k, k * n, dims.m * n);
        for bi in 0..dims.batch {
            let bslice = if dims.shared_b { bd } else { &bd[bi * szb..(bi + 1) * szb] };
            gemm(
                ta,
                tb,
                dims.m,
                k,
                n,
                &ad[bi * sza..(bi + 1) * sza],
                bslice,
                &mut out[bi * szc..(bi + 1) * szc],
                false,
            );
        }
        self.counter
            .add(dims.batch as u128 * dims.m as u128 * k as u128 * n as u128);
        let out = Tensor::from_parts(out_shape, out, self.dtype);
        let (av, bv) = (Rc::clone(&a.value), Rc::clone(&b.value));
        self.push("matmul", out, &[a, b], |_| Op::MatMul {
            a: av,
            b: bv,
            ta,
            tb,
            dims,
        })
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::broadcast_binary(a.value(), b.value(), |x, y| x + y)?;
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        self.push("add", out, &[a, b], |_| Op::Add { a_shape, b_shape })
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::broadcast_binary(a.value(), b.value(), |x, y| x * y)?;
        let (av, bv) = (Rc::clone(&a.value), Rc::clone(&b.value));
        self.push("mul", out, &[a, b], |_| Op::Mul { a: av, b: bv })
    }

    pub fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let out = x.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push("sigmoid", out, &[x], |y| Op::Sigmoid { y: Rc::clone(y) })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: &Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis where keys can be excluded. `mask` holds
    /// one validity row per group of `rows_per_group` consecutive rows;
    /// excluded keys receive exactly zero weight.
    pub fn softmax_masked(&mut self, x: &Var, mask: Option<(&[bool], usize)>) -> Result<Var> {
        let (rows, len) = x.value().last_dim_split();
        if let Some((m, per)) = mask {
            if per == 0 || rows % per != 0 || m.len() != (rows / per) * len {
                return Err(Error::shape(format!(
                    "softmax mask of {} entries does not fit {rows} rows of {len}",
                    m.len()
                )));
            }
        }
        let mut out = x.to_tensor();
        kernels::softmax_rows(out.data_mut(), len, mask)?;
        self.push("softmax", out, &[x], |y| Op::Softmax { y: Rc::clone(y) })
    }

    /// Log of the softmax over the last axis, computed without forming the
    /// softmax itself.
    pub fn log_softmax(&mut self, x: &Var) -> Result<Var> {
        let (_, len) = x.value().last_dim_split();
        let mut out = x.to_tensor();
        for row in out.data_mut().chunks_mut(len) {
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push("log_softmax", out, &[x], |y| Op::LogSoftmax { y: Rc::clone(y) })
    }

    /// Normalisation over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: &Var, eps: f64) -> Result<Var> {
        let (rows, len) = x.value().last_dim_split();
        let mut out = x.to_tensor();
        let mut inv_std = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(len) {
            let mean = row.iter().sum::<f64>() / len as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push("layer_norm", out, &[x], |y| Op::LayerNorm {
            y: Rc::clone(y),
            inv_std,
        })
    }

    /// Euclidean norm over the last axis (the axis is removed).
    pub fn l2_norm(&mut self, x: &Var) -> Result<Var> {
        let (_, len) = x.value().last_dim_split();
        let data: Vec<f64> = x
            .data()
            .chunks(len)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::from_parts(drop_last(x.shape()), data, self.dtype);
        let xv = Rc::clone(&x.value);
        self.push("l2_norm", out, &[x], |norm| Op::L2Norm {
            x: xv,
            norm: Rc::clone(norm),
        })
    }

    /// Bilinear resize of a `B×C×H×W` value.
    pub fn resize_bilinear(&mut self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::bilinear_resize(x.value(), out_h, out_w)?;
        let in_shape = x.shape().to_vec();
        self.push("resize_bilinear", out, &[x], |_| Op::Resize {
            in_shape,
            out_h,
            out_w,
        })
    }

    pub fn upsample(&mut self, x: &Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be at least 1"));
        }
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("upsample expects B×C×H×W, got {s:?}")));
        }
        let (h, w) = (s[2] * factor, s[3] * factor);
        self.resize_bilinear(x, h, w)
    }

    /// Views `x` as rows of `block` values and picks rows by `idx`
    /// ([`PAD_INDEX`] yields a zero row). The result has shape `out_shape`.
    pub fn gather(&mut self, x: &Var, idx: Rc<Vec<u32>>, block: usize, out_shape: &[usize]) -> Result<Var> {
        let n = check_shape(out_shape)?;
        if block == 0 || !x.value().numel().is_multiple_of(block) || n != idx.len() * block {
            return Err(Error::shape(format!(
                "gather of {} rows x {block} into {out_shape:?} from {:?}",
                idx.len(),
                x.shape()
            )));
        }
        let rows = x.value().numel() / block;
        let src = x.data();
        let mut out = vec![0.0; n];
        for (dst, &i) in out.chunks_mut(block).zip(idx.iter()) {
            if i != PAD_INDEX {
                let i = i as usize;
                if i >= rows {
                    return Err(Error::shape(format!("gather index {i} out of {rows} rows")));
                }
                dst.copy_from_slice(&src[i * block..(i + 1) * block]);
            }
        }
        let out = Tensor::from_parts(out_shape.to_vec(), out, self.dtype);
        let in_shape = x.shape().to_vec();
        self.push("gather", out, &[x], |_| Op::Gather { idx, block, in_shape })
    }

    /// Adjoint of [`Tape::gather`]: row `i` of `x` is added into row
    /// `idx[i]` of a zero value of shape `out_shape`.
    pub fn scatter_add(&mut self, x: &Var, idx: Rc<Vec<u32>>, block: usize, out_shape: &[usize]) -> Result<Var> {
        let n = check_shape(out_shape)?;
        if block == 0 || n % block != 0 || x.value().numel() != idx.len() * block {
            return Err(Error::shape(format!(
                "scatter of {:?} with {} rows x {block} into {out_shape:?}",
                x.shape(),
                idx.len()
            )));
        }
        let rows = n / block;
        let mut out = vec![0.0; n];
        for (src, &i) in x.data().chunks(block).zip(idx.iter()) {
            if i != PAD_INDEX {
                let i = i as usize;
                if i >= rows {
                    return Err(Error::shape(format!("scatter index {i} out of {rows} rows")));
                }
                for (d, s) in out[i * block..(i + 1) * block].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let out = Tensor::from_parts(out_shape.to_vec(), out, self.dtype);
        let in_shape = x.shape().to_vec();
        self.push("scatter_add", out, &[x], |_| Op::ScatterAdd { idx, block, in_shape })
    }

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = x.to_tensor().reshape(shape)?;
        let in_shape = x.shape().to_vec();
        self.push("reshape", out, &[x], |_| Op::Reshape { in_shape })
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, x: &Var) -> Result<Var> {
        if let Some(index) = x.data().iter().position(|&v| v <= 0.0) {
            return Err(Error::NonFinite { op: "ln", index });
        }
        let out = x.value().map(f64::ln);
        let xv = Rc::clone(&x.value);
        self.push("ln", out, &[x], |_| Op::Ln { x: xv })
    }

    pub fn recip(&mut self, x: &Var) -> Result<Var> {
        let out = x.value().map(|v| 1.0 / v);
        self.push("recip", out, &[x], |y| Op::Recip { y: Rc::clone(y) })
    }

    /// `x^exponent` for positive `x` (any `x` when the exponent is a
    /// non-negative integer).
    pub fn powf(&mut self, x: &Var, exponent: f64) -> Result<Var> {
        let integral = exponent.fract() == 0.0 && exponent >= 0.0;
        if !integral {
            if let Some(index) = x.data().iter().position(|&v| v <= 0.0) {
                return Err(Error::NonFinite { op: "powf", index });
            }
        }
        let out = x.value().map(|v| v.powf(exponent));
        let xv = Rc::clone(&x.value);
        self.push("powf", out, &[x], |_| Op::Pow { x: xv, exponent })
    }

    pub fn clamp(&mut self, x: &Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        let out = x.value().map(|v| v.clamp(lo, hi));
        let xv = Rc::clone(&x.value);
        self.push("clamp", out, &[x], |_| Op::Clamp { x: xv, lo, hi })
    }

    /// Sum over the last axis (the axis is removed).
    pub fn sum_last(&mut self, x: &Var) -> Result<Var> {
        let (_, len) = x.value().last_dim_split();
        let data = x.data().chunks(len).map(|r| r.iter().sum()).collect();
        let out = Tensor::from_parts(drop_last(x.shape()), data, self.dtype);
        let in_shape = x.shape().to_vec();
        self.push("sum_last", out, &[x], |_| Op::SumLast { in_shape })
    }

    pub fn sum_all(&mut self, x: &Var) -> Result<Var> {
        let out = Tensor::scalar(x.value().sum());
        let in_shape = x.shape().to_vec();
        self.push("sum_all", out, &[x], |_| Op::SumAll { in_shape })
    }

    // Composites built only from the ops above.

    pub fn scale(&mut self, x: &Var, s: f64) -> Result<Var> {
        let c = self.scalar(s);
        self.mul(x, &c)
    }

    pub fn add_scalar(&mut self, x: &Var, s: f64) -> Result<Var> {
        let c = self.scalar(s);
        self.add(x, &c)
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, &nb)
    }

    pub fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let r = self.recip(b)?;
        self.mul(a, &r)
    }

    pub fn mean_last(&mut self, x: &Var) -> Result<Var> {
        let n = *x.shape().last().expect("rank >= 1");
        let s = self.sum_last(x)?;
        self.scale(&s, 1.0 / n as f64)
    }

    pub fn mean_all(&mut self, x: &Var) -> Result<Var> {
        let n = x.value().numel();
        let s = self.sum_all(x)?;
        self.scale(&s, 1.0 / n as f64)
    }

    /// Smooth GELU approximation `x · σ(1.702 x)`.
    pub fn gelu(&mut self, x: &Var) -> Result<Var> {
        let z = self.scale(x, 1.702)?;
        let s = self.sigmoid(&z)?;
        self.mul(x, &s)
    }

    /// `x · w + b` over the last axis.
    pub fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(&y, b),
            None => Ok(y),
        }
    }

    /// Picks one element per row of a rank-2 value: `out[r] = x[r, cols[r]]`,
    /// shaped `rows × 1`.
    pub fn pick_cols(&mut self, x: &Var, cols: &[usize]) -> Result<Var> {
        let s = x.shape();
        if s.len() != 2 || cols.len() != s[0] || cols.iter().any(|&c| c >= s[1]) {
            return Err(Error::shape(format!("pick_cols {cols:?} from {s:?}")));
        }
        let idx: Vec<u32> = cols.iter().enumerate().map(|(r, &c)| (r * s[1] + c) as u32).collect();
        self.gather(x, Rc::new(idx), 1, &[s[0], 1])
    }

    /// Per-row min-max normalisation of a rank-2 value onto `[0, 1]`; a row
    /// that is constant up to rounding maps to 0.5 with zero gradient.
    pub fn minmax_rows(&mut self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("minmax_rows expects rank 2, got {s:?}")));
        }
        let (rows, len) = (s[0], s[1]);
        let (mut lo_idx, mut hi_idx) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
        let (mut pad, mut offset) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
        for row in x.data().chunks(len) {
            let (lo, hi) = argmin_argmax(row);
            lo_idx.push(lo);
            hi_idx.push(hi);
            let flat = kernels::is_flat(row[lo], row[hi], self.dtype);
            pad.push(if flat { 1.0 } else { 0.0 });
            offset.push(if flat { 0.5 } else { 0.0 });
        }
        let lo = self.pick_cols(x, &lo_idx)?;
        let hi = self.pick_cols(x, &hi_idx)?;
        let keep: Vec<f64> = pad.iter().map(|p| 1.0 - p).collect();
        let keep = self.leaf(Tensor::from_parts(vec![rows, 1], keep, DType::F64));
        let diff = self.sub(x, &lo)?;
        let num = self.mul(&diff, &keep)?;
        let range = self.sub(&hi, &lo)?;
        let pad = self.leaf(Tensor::from_parts(vec![rows, 1], pad, DType::F64));
        let offset = self.leaf(Tensor::from_parts(vec![rows, 1], offset, DType::F64));
        let den = self.add(&range, &pad)?;
        let scaled = self.div(&num, &den)?;
        self.add(&scaled, &offset)
    }

    /// Applies a row-wise function in chunks of `chunk_rows` rows when not
    /// recording, bounding the size of intermediates. `x` is viewed as
    /// `rows × last`; `f` must treat rows independently.
    pub fn map_rows(
        &mut self,
        x: &Var,
        chunk_rows: usize,
        mut f: impl FnMut(&mut Tape, &Var) -> Result<Var>,
    ) -> Result<Var> {
        let (rows, len) = x.value().last_dim_split();
        if self.recording || rows <= chunk_rows {
            return f(self, x);
        }
        let mut out: Vec<f64> = Vec::new();
        let mut out_last = 0;
        for start in (0..rows).step_by(chunk_rows) {
            let end = (start + chunk_rows).min(rows);
            let chunk = Tensor::from_parts(
                vec![end - start, len],
                x.data()[start * len..end * len].to_vec(),
                self.dtype,
            );
            let cv = self.leaf(chunk);
            let y = f(self, &cv)?;
            out_last = *y.shape().last().expect("rank >= 1");
            if out.is_empty() {
                out.reserve(rows * out_last);
            }
            out.extend_from_slice(y.data());
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = out_last;
        Ok(self.leaf(Tensor::from_parts(shape, out, self.dtype)))
    }

    /// Reverse sweep from a single-element value.
    pub fn backward(&self, root: &Var) -> Result<Grads> {
        if !self.recording {
            return Err(Error::invalid("backward on a non-recording tape"));
        }
        if root.value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a single-element root, got {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.next_id];
        grads[root.id] = Some(Tensor::from_parts(root.shape().to_vec(), vec![1.0], DType::F64));
        for node in self.nodes.iter().rev() {
            let Some(g) = grads[node.out].take() else {
                continue;
            };
            let input_grads = node.op.backward(&g)?;
            grads[node.out] = Some(g);
            for (&input, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// First index of the minimum and of the maximum.
pub(crate) fn argmin_argmax(row: &[f64]) -> (usize, usize) {
    let (mut lo, mut hi) = (0, 0);
    for (i, &v) in row.iter().enumerate() {
        if v < row[lo] {
            lo = i;
        }
        if v > row[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_parts(shape.to_vec(), data, DType::F64)
}

impl Op {
    fn backward(&self, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let gd = g.data();
        Ok(match self {
            Op::MatMul { a, b, ta, tb, dims } => {
                let (ta, tb) = (*ta, *tb);
                let MatDims { batch, m, k, n, shared_b } = *dims;
                let mut da = vec![0.0; a.numel()];
                let mut db = vec![0.0; b.numel()];
                let (sza, szb, szc) = (m * k, k * n, m * n);
                for bi in 0..batch {
                    let gs = &gd[bi * szc..(bi + 1) * szc];
                    let asl = &a.data()[bi * sza..(bi + 1) * sza];
                    let (bsl, dbs) = if shared_b {
                        (b.data(), &mut db[..])
                    } else {
                        (&b.data()[bi * szb..(bi + 1) * szb], &mut db[bi * szb..(bi + 1) * szb])
                    };
                    let das = &mut da[bi * sza..(bi + 1) * sza];
                    if ta {
                        gemm(tb, true, k, n, m, bsl, gs, das, false);
                    } else {
                        gemm(false, !tb, m, n, k, gs, bsl, das, false);
                    }
                    if tb {
                        gemm(true, ta, n, m, k, gs, asl, dbs, shared_b);
                    } else {
                        gemm(!ta, false, k, m, n, asl, gs, dbs, shared_b);
                    }
                }
                vec![Some(t64(a.shape(), da)), Some(t64(b.shape(), db))]
            }
            Op::Add { a_shape, b_shape } => vec![
                Some(reduce_to(g, g.shape(), a_shape)),
                Some(reduce_to(g, g.shape(), b_shape)),
            ],
            Op::Mul { a, b } => {
                if a.shape() == b.shape() {
                    let ga = gd.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                    let gb = gd.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                    vec![Some(t64(a.shape(), ga)), Some(t64(b.shape(), gb))]
                } else {
                    let bc = Broadcast::new(a.shape(), b.shape())?;
                    let mut ga = vec![0.0; a.numel()];
                    let mut gb = vec![0.0; b.numel()];
                    let (ad, bd) = (a.data(), b.data());
                    bc.for_each(|o, ia, ib| {
                        ga[ia] += gd[o] * bd[ib];
                        gb[ib] += gd[o] * ad[ia];
                    });
                    vec![Some(t64(a.shape(), ga)), Some(t64(b.shape(), gb))]
                }
            }
            Op::Sigmoid { y } => {
                let gx = gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                vec![Some(t64(y.shape(), gx))]
            }
            Op::LogSoftmax { y } => {
                let (_, len) = y.last_dim_split();
                let mut gx = vec![0.0; y.numel()];
                for ((gr, yr), out) in gd.chunks(len).zip(y.data().chunks(len)).zip(gx.chunks_mut(len)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                vec![Some(t64(y.shape(), gx))]
            }
            Op::Softmax { y } => {
                let (_, len) = y.last_dim_split();
                let mut gx = vec![0.0; y.numel()];
                for ((gr, yr), out) in gd.chunks(len).zip(y.data().chunks(len)).zip(gx.chunks_mut(len)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(t64(y.shape(), gx))]
            }
            Op::LayerNorm { y, inv_std } => {
                let (_, len) = y.last_dim_split();
                let mut gx = vec![0.0; y.numel()];
                for (r, ((gr, yr), out)) in gd
                    .chunks(len)
                    .zip(y.data().chunks(len))
                    .zip(gx.chunks_mut(len))
                    .enumerate()
                {
                    let mean_g = gr.iter().sum::<f64>() / len as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / len as f64;
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                vec![Some(t64(y.shape(), gx))]
            }
            Op::L2Norm { x, norm } => {
                let (_, len) = x.last_dim_split();
                let mut gx = vec![0.0; x.numel()];
                for (r, (xr, out)) in x.data().chunks(len).zip(gx.chunks_mut(len)).enumerate() {
                    let nrm = norm.data()[r];
                    if nrm > 0.0 {
                        for (o, xv) in out.iter_mut().zip(xr) {
                            *o = gd[r] * xv / nrm;
                        }
                    }
                }
                vec![Some(t64(x.shape(), gx))]
            }
            Op::Resize { in_shape, out_h, out_w } => {
                let planes = in_shape[0] * in_shape[1];
                let gx = kernels::resize_backward(gd, planes, in_shape[2], in_shape[3], *out_h, *out_w);
                vec![Some(t64(in_shape, gx))]
            }
            Op::Gather { idx, block, in_shape } => {
                let mut gx = vec![0.0; in_shape.iter().product()];
                for (src, &i) in gd.chunks(*block).zip(idx.iter()) {
                    if i != PAD_INDEX {
                        let i = i as usize;
                        for (d, s) in gx[i * block..(i + 1) * block].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                vec![Some(t64(in_shape, gx))]
            }
            Op::ScatterAdd { idx, block, in_shape } => {
                let mut gx = vec![0.0; in_shape.iter().product()];
                for (dst, &i) in gx.chunks_mut(*block).zip(idx.iter()) {
                    if i != PAD_INDEX {
                        let i = i as usize;
                        dst.copy_from_slice(&gd[i * block..(i + 1) * block]);
                    }
                }
                vec![Some(t64(in_shape, gx))]
            }
            Op::Reshape { in_shape } => vec![Some(t64(in_shape, gd.to_vec()))],
            Op::Ln { x } => {
                let gx = gd.iter().zip(x.data()).map(|(g, v)| g / v).collect();
                vec![Some(t64(x.shape(), gx))]
            }
            Op::Recip { y } => {
                let gx = gd.iter().zip(y.data()).map(|(g, v)| -g * v * v).collect();
                vec![Some(t64(y.shape(), gx))]
            }
            Op::Pow { x, exponent } => {
                let e = *exponent;
                let gx = gd
                    .iter()
                    .zip(x.data())
                    .map(|(g, v)| if e == 0.0 { 0.0 } else { g * e * v.powf(e - 1.0) })
                    .collect();
                vec![Some(t64(x.shape(), gx))]
            }
            Op::Clamp { x, lo, hi } => {
                let gx = gd
                    .iter()
                    .zip(x.data())
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                vec![Some(t64(x.shape(), gx))]
            }
            Op::SumLast { in_shape } => {
                let len = *in_shape.last().expect("rank >= 1");
                let gx = gd.iter().flat_map(|&g| std::iter::repeat_n(g, len)).collect();
                vec![Some(t64(in_shape, gx))]
            }
            Op::SumAll { in_shape } => {
                vec![Some(t64(in_shape, vec![gd[0]; in_shape.iter().product()]))]
            }
        })
    }
}
