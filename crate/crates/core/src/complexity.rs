//! Multiply-count models for global, windowed and sparse windowed attention,
//! a counter-instrumented reference kernel to check them, and the
//! patch/pixel redundancy metric.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::rc::Rc;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fine::{partition_index, reverse_index};
use crate::numerics::{DType, Tape, Tensor, PAD_INDEX};

/// Largest token count the reference kernel will run on.
pub const MAX_MEASURED_TOKENS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    /// Global multi-head self-attention.
    Msa,
    /// Window attention.
    Wmsa,
    /// Window attention over the top `⌈ρ·M²⌉` keys of each window.
    Wssa,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Msa, Mechanism::Wmsa, Mechanism::Wssa];
}

impl FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msa" => Ok(Mechanism::Msa),
            "wmsa" | "w-msa" => Ok(Mechanism::Wmsa),
            "wssa" | "w-ssa" => Ok(Mechanism::Wssa),
            other => Err(Error::invalid(format!("unknown attention mechanism `{other}`"))),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Msa => "msa",
            Mechanism::Wmsa => "wmsa",
            Mechanism::Wssa => "wssa",
        })
    }
}

/// How the window terms are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Convention {
    /// `2M²hw` and `2ρM²hw`, without a channel factor.
    #[default]
    Literal,
    /// `2M²hwC` and `2ρM²hwC`, the form the multiply counter measures.
    Swin,
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Literal => "literal",
            Convention::Swin => "swin",
        })
    }
}

fn checked(parts: &[u128], what: &'static str) -> Result<u128> {
    parts
        .iter()
        .try_fold(1u128, |acc, &p| acc.checked_mul(p))
        .ok_or(Error::Overflow(what))
}

fn check_positive(args: &[(&str, usize)]) -> Result<()> {
    match args.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::invalid(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("sparsity factor must lie in (0, 1], got {rho}")))
    }
}

/// `round(n·ρ)` with ties rounded up, computed exactly from the binary
/// expansion of `ρ`.
fn scale_exact(n: u128, rho: f64) -> Result<u128> {
    let bits = rho.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mantissa, exp) = if exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp - 1075)
    };
    let prod = n.checked_mul(mantissa as u128).ok_or(Error::Overflow("sparse window term"))?;
    if exp >= 0 {
        return prod.checked_shl(exp as u32).ok_or(Error::Overflow("sparse window term"));
    }
    let shift = (-exp) as u32;
    if shift >= 128 {
        return Ok(0);
    }
    let half = 1u128 << (shift - 1);
    Ok((prod >> shift) + u128::from(prod & ((1u128 << shift) - 1) >= half))
}

fn projection_term(h: usize, w: usize, c: usize) -> Result<u128> {
    checked(&[4, h as u128, w as u128, c as u128, c as u128], "projection term")
}

/// `4hwC² + 2(hw)²C`.
pub fn flops_msa(h: usize, w: usize, c: usize) -> Result<u128> {
    check_positive(&[("h", h), ("w", w), ("C", c)])?;
    let hw = h as u128 * w as u128;
    let attn = checked(&[2, hw, hw, c as u128], "global attention term")?;
    projection_term(h, w, c)?
        .checked_add(attn)
        .ok_or(Error::Overflow("global attention cost"))
}

fn window_term(h: usize, w: usize, c: usize, m: usize, conv: Convention) -> Result<u128> {
    let c = match conv {
        Convention::Literal => 1,
        Convention::Swin => c as u128,
    };
    checked(&[2, m as u128, m as u128, h as u128, w as u128, c], "window attention term")
}

/// `4hwC² + 2M²hw`.
pub fn flops_wmsa(h: usize, w: usize, c: usize, m: usize) -> Result<u128> {
    flops_wmsa_with(h, w, c, m, Convention::Literal)
}

pub fn flops_wmsa_with(h: usize, w: usize, c: usize, m: usize, conv: Convention) -> Result<u128> {
    check_positive(&[("h", h), ("w", w), ("C", c), ("M", m)])?;
    projection_term(h, w, c)?
        .checked_add(window_term(h, w, c, m, conv)?)
        .ok_or(Error::Overflow("window attention cost"))
}

/// `4hwC² + 2ρM²hw`, with the second term rounded half up to an integer.
pub fn flops_wssa(h: usize, w: usize, c: usize, m: usize, rho: f64) -> Result<u128> {
    flops_wssa_with(h, w, c, m, rho, Convention::Literal)
}

pub fn flops_wssa_with(h: usize, w: usize, c: usize, m: usize, rho: f64, conv: Convention) -> Result<u128> {
    check_positive(&[("h", h), ("w", w), ("C", c), ("M", m)])?;
    check_rho(rho)?;
    projection_term(h, w, c)?
        .checked_add(scale_exact(window_term(h, w, c, m, conv)?, rho)?)
        .ok_or(Error::Overflow("sparse window attention cost"))
}

/// Problem size for a cost evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostArgs {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub window: usize,
    pub rho: f64,
}

pub fn analytic_cost(mechanism: Mechanism, a: &CostArgs, conv: Convention) -> Result<u128> {
    match mechanism {
        Mechanism::Msa => flops_msa(a.h, a.w, a.channels),
        Mechanism::Wmsa => flops_wmsa_with(a.h, a.w, a.channels, a.window, conv),
        Mechanism::Wssa => flops_wssa_with(a.h, a.w, a.channels, a.window, a.rho, conv),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub mechanism: Mechanism,
    pub args: CostArgs,
    pub convention: Convention,
    pub analytic_msa: u128,
    pub analytic_wmsa: u128,
    pub analytic_wssa: u128,
    /// Multiplies in the four `C×C` projections.
    pub counted_projection: Option<u128>,
    /// Multiplies in the score and value products.
    pub counted_attention: Option<u128>,
}

impl FlopReport {
    /// Analytic values only, for sizes too large to run.
    pub fn analytic(mechanism: Mechanism, args: CostArgs, convention: Convention) -> Result<Self> {
        Ok(FlopReport {
            mechanism,
            args,
            convention,
            analytic_msa: analytic_cost(Mechanism::Msa, &args, convention)?,
            analytic_wmsa: analytic_cost(Mechanism::Wmsa, &args, convention)?,
            analytic_wssa: analytic_cost(Mechanism::Wssa, &args, convention)?,
            counted_projection: None,
            counted_attention: None,
        })
    }

    pub fn analytic_value(&self) -> u128 {
        match self.mechanism {
            Mechanism::Msa => self.analytic_msa,
            Mechanism::Wmsa => self.analytic_wmsa,
            Mechanism::Wssa => self.analytic_wssa,
        }
    }

    pub fn counted(&self) -> Option<u128> {
        Some(self.counted_projection? + self.counted_attention?)
    }

    /// `counted / analytic`, when counted.
    pub fn ratio(&self) -> Option<f64> {
        self.counted().map(|c| c as f64 / self.analytic_value() as f64)
    }
}

/// Formats an integer with comma thousands separators.
pub fn group_thousands(n: u128) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn report_cells(r: &FlopReport, grouped: bool) -> [String; 9] {
    let num = |n: u128| if grouped { group_thousands(n) } else { n.to_string() };
    let a = &r.args;
    [
        r.mechanism.to_string(),
        a.h.to_string(),
        a.w.to_string(),
        a.channels.to_string(),
        a.window.to_string(),
        format!("{}", a.rho),
        num(r.analytic_value()),
        r.counted().map(num).unwrap_or_else(|| "-".into()),
        r.ratio().map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
    ]
}

const COLUMNS: [&str; 9] = ["mechanism", "h", "w", "C", "M", "rho", "analytic", "counted", "ratio"];

/// Aligned plain-text table with grouped digits.
pub fn format_table(reports: &[FlopReport]) -> String {
    let rows: Vec<[String; 9]> = reports.iter().map(|r| report_cells(r, true)).collect();
    let mut widths = COLUMNS.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "{cell:>w$}");
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&mut out, &COLUMNS);
    for row in &rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

pub fn to_csv(reports: &[FlopReport]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        out.push_str(&report_cells(r, false).join(","));
        out.push('\n');
    }
    out
}

/// Runs a single-head reference attention kernel with the multiply counter
/// enabled and reports it next to the analytic models.
///
/// Projections cost `4hwC²`. Scores and value mixing cost `hw·K·C` each,
/// where `K` is the number of keys a query sees: `hw` globally, `M²` in a
/// window and `⌈ρM²⌉` when each window keeps only its highest-norm keys.
pub fn measure_attention_cost(mechanism: Mechanism, args: CostArgs, convention: Convention) -> Result<FlopReport> {
    let mut report = FlopReport::analytic(mechanism, args, convention)?;
    let CostArgs { h, w, channels: c, window: m, rho } = args;
    let n = h * w;
    if n > MAX_MEASURED_TOKENS {
        return Err(Error::invalid(format!(
            "measured runs are limited to {MAX_MEASURED_TOKENS} tokens, got {n}"
        )));
    }
    let mut tape = Tape::inference(DType::F64);
    let x = tape.leaf(Tensor::from_fn(&[n, c], |i| (i as f64 * 0.618).sin())?);
    let weight = |tape: &mut Tape, k: usize| -> Result<_> {
        Ok(tape.leaf(Tensor::from_fn(&[c, c], |i| ((i + k * c * c) as f64 * 0.37).cos() / c as f64)?))
    };
    let (wq, wk, wv, wo) = (weight(&mut tape, 0)?, weight(&mut tape, 1)?, weight(&mut tape, 2)?, weight(&mut tape, 3)?);
    tape.counter_mut().enable();
    let q = tape.matmul(&x, &wq)?;
    let k = tape.matmul(&x, &wk)?;
    let v = tape.matmul(&x, &wv)?;
    let projections_in = tape.counter().count();

    let mixed = match mechanism {
        Mechanism::Msa => {
            let s = tape.matmul_t(&q, &k, false, true)?;
            let a = tape.softmax(&s)?;
            tape.matmul(&a, &v)?
        }
        Mechanism::Wmsa | Mechanism::Wssa => {
            let (idx, record) = partition_index(1, h, w, m, 0);
            let nw = record.num_windows();
            let l = m * m;
            let idx = Rc::new(idx);
            let qw = tape.gather(&q, Rc::clone(&idx), c, &[nw, l, c])?;
            let kw = tape.gather(&k, Rc::clone(&idx), c, &[nw, l, c])?;
            let vw = tape.gather(&v, Rc::clone(&idx), c, &[nw, l, c])?;
            let (keys, values, valid) = if mechanism == Mechanism::Wssa {
                check_rho(rho)?;
                let kept = ((rho * l as f64).ceil() as usize).clamp(1, l);
                let sel = top_keys(kw.value(), &record.valid, l, kept);
                let sel_valid: Vec<bool> = sel.iter().map(|&i| i != PAD_INDEX).collect();
                let sel = Rc::new(sel);
                let ks = tape.gather(&kw, Rc::clone(&sel), c, &[nw, kept, c])?;
                let vs = tape.gather(&vw, sel, c, &[nw, kept, c])?;
                (ks, vs, sel_valid)
            } else {
                (kw, vw, record.valid.clone())
            };
            let s = tape.matmul_t(&qw, &keys, false, true)?;
            let a = tape.softmax_masked(&s, Some((&valid, l)))?;
            let out = tape.matmul(&a, &values)?;
            tape.gather(&out, Rc::new(reverse_index(&record)), c, &[n, c])?
        }
    };
    let attention = tape.counter().count() - projections_in;
    let _ = tape.matmul(&mixed, &wo)?;
    let projections = tape.counter().count() - attention;
    report.counted_projection = Some(projections);
    report.counted_attention = Some(attention);
    Ok(report)
}

/// Row indices of the `kept` highest-norm valid keys in each window, padded
/// with [`PAD_INDEX`] when a window has fewer valid keys.
fn top_keys(keys: &Tensor, valid: &[bool], l: usize, kept: usize) -> Vec<u32> {
    let c = keys.shape()[2];
    let nw = keys.shape()[0];
    let mut out = Vec::with_capacity(nw * kept);
    for win in 0..nw {
        let mut order: Vec<(f64, usize)> = (0..l)
            .filter(|&t| valid[win * l + t])
            .map(|t| {
                let row = &keys.data()[(win * l + t) * c..(win * l + t + 1) * c];
                (row.iter().map(|v| v * v).sum::<f64>(), t)
            })
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for slot in 0..kept {
            out.push(match order.get(slot) {
                Some(&(_, t)) => (win * l + t) as u32,
                None => PAD_INDEX,
            });
        }
    }
    out
}

fn entropy(labels: &[u32]) -> f64 {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let n = labels.len() as f64;
    let mut sorted: Vec<usize> = counts.into_values().collect();
    sorted.sort_unstable();
    sorted
        .into_iter()
        .map(|k| {
            let p = k as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `1 − H(patch labels) / H(pixel labels)` with empirical natural-log
/// entropies, clamped to `[0, 1]`. Zero pixel entropy gives 0.
pub fn redundancy_metric(patch_labels: &[u32], pixel_labels: &[u32]) -> Result<f64> {
    if patch_labels.is_empty() || pixel_labels.is_empty() {
        return Err(Error::invalid("label maps must be non-empty"));
    }
    let hp = entropy(pixel_labels);
    if hp == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 - entropy(patch_labels) / hp).clamp(0.0, 1.0))
}

/// Most frequent label inside each `patch×patch` block of an `h×w` map;
/// ties go to the smallest label. Edge blocks may be partial.
pub fn patch_majority(labels: &[u32], h: usize, w: usize, patch: usize) -> Result<Vec<u32>> {
    if labels.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape(format!("{} labels for a {h}×{w} map", labels.len())));
    }
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let (ph, pw) = (h.div_ceil(patch), w.div_ceil(patch));
    let mut out = Vec::with_capacity(ph * pw);
    for py in 0..ph {
        for px in 0..pw {
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for y in py * patch..((py + 1) * patch).min(h) {
                for x in px * patch..((px + 1) * patch).min(w) {
                    *counts.entry(labels[y * w + x]).or_default() += 1;
                }
            }
            let best = counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(l, _)| l)
                .expect("non-empty block");
            out.push(best);
        }
    }
    Ok(out)
}
