//! Self-contained verification suites run by the `gradcheck` and
//! `selftest` subcommands.

use std::fmt::Write as _;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grct, pgm, run_pipeline, synth_inputs, PipelineConfig};
use crate::coarse::{guided_global_attention, soft_select, soft_select_var, CoarseParams};
use crate::complexity::{flops_msa, flops_wmsa, flops_wssa, measure_attention_cost, Convention, CostArgs, Mechanism};
use crate::error::Result;
use crate::fine::{
    cyclic_shift, fine_pass, sparse_window_attention, window_partition, window_reverse, FineParams, SparseAttnParams,
    WindowSpec,
};
use crate::init::ParamInit;
use crate::losses::{
    bce_dice_loss_var, ce_label_smoothing_var, focal_loss_var, total_loss_var, FocalParams, LossWeights,
};
use crate::numerics::{grad_check, DType, Tape, Tensor, Var, DEFAULT_EPS};

/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => CheckResult {
                name: name.into(),
                passed,
                detail,
            },
            Err(e) => CheckResult {
                name: name.into(),
                passed: false,
                detail: format!("error: {e}"),
            },
        }
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

pub fn format_results(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{tag}  {:<width$}  {}", r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(out, "{} checks, {failed} failed", results.len());
    out
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn gradient(name: &str, x: &Tensor, f: impl Fn(&mut Tape, &Var) -> Result<Var>) -> CheckResult {
    CheckResult::from(
        name,
        grad_check(f, x, DEFAULT_EPS).map(|r| {
            (
                r.max_rel_error <= GRAD_TOL,
                format!("max relative error {:.3e} (limit {GRAD_TOL:.0e})", r.max_rel_error),
            )
        }),
    )
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(tape: &mut Tape, y: &Var) -> Result<Var> {
    let w = Tensor::from_fn(y.shape(), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4)?;
    let w = tape.leaf(w);
    let p = tape.mul(y, &w)?;
    tape.sum_all(&p)
}

/// Finite-difference checks of every differentiable stage and loss.
pub fn gradient_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let build = || -> Result<_> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = ParamInit::new(seed);
        let coarse = CoarseParams::init(&mut init, 4, 2, 3)?;
        let mut attn = SparseAttnParams::init(&mut init, 4, 2, 2)?;
        attn.rel_bias = Rc::new(random(&mut rng, attn.rel_bias.shape(), -0.5, 0.5)?);
        attn.set_alpha_scale(0.7);
        let mut fine = FineParams::init(&mut init, 4, 2, 3, 2)?;
        fine.block.mlp.w2 = init.uniform(fine.block.mlp.w2.shape());
        Ok((coarse, attn, fine))
    };
    let (coarse, attn, fine) = match build() {
        Ok(p) => p,
        Err(e) => {
            out.push(CheckResult::from("parameter setup", Err(e)));
            return out;
        }
    };
    let draw = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| random(rng, shape, lo, hi).expect("valid shape");

    let scores = draw(&mut rng, &[2, 6], 0.0, 1.0);
    let tau = draw(&mut rng, &[2, 1], 0.3, 0.7);
    out.push(gradient("soft_select", &scores, |t, s| {
        let tau = t.leaf(tau.clone());
        let g = soft_select_var(t, s, &tau, 10.0)?;
        probe(t, &g)
    }));

    let feats = draw(&mut rng, &[1, 4, 3, 3], -1.0, 1.0);
    let fused = draw(&mut rng, &[1, 9], 0.0, 1.0);
    out.push(gradient("guided_global_attention (features)", &feats, |t, f| {
        let s = t.leaf(fused.clone());
        let o = guided_global_attention(t, f, &s, &coarse)?;
        let a = probe(t, &o.features)?;
        let b = probe(t, &o.mask)?;
        t.add(&a, &b)
    }));
    out.push(gradient("guided_global_attention (scores)", &fused, |t, s| {
        let f = t.leaf(feats.clone());
        let o = guided_global_attention(t, &f, s, &coarse)?;
        let a = probe(t, &o.features)?;
        let b = probe(t, &o.mask)?;
        t.add(&a, &b)
    }));

    let windows = draw(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let mask = draw(&mut rng, &[2, 4], 0.0, 1.0);
    let valid = [true, true, true, false, true, true, true, true];
    out.push(gradient("sparse_window_attention (tokens)", &windows, |t, x| {
        let m = t.leaf(mask.clone());
        let o = sparse_window_attention(t, x, &m, &valid, &attn)?;
        probe(t, &o.output)
    }));
    out.push(gradient("sparse_window_attention (mask)", &mask, |t, m| {
        let x = t.leaf(windows.clone());
        let o = sparse_window_attention(t, &x, m, &valid, &attn)?;
        probe(t, &o.output)
    }));

    let cf = draw(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
    let cm = draw(&mut rng, &[1, 1, 4, 4], 0.1, 0.9);
    out.push(gradient("fine_pass (8×8 token grid)", &cf, |t, f| {
        let m = t.leaf(cm.clone());
        let o = fine_pass(t, f, &m, &fine, (12, 12))?;
        t.sum_all(&o.mask)
    }));

    let pred = draw(&mut rng, &[1, 1, 4, 4], 0.05, 0.95);
    let target = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i * 5 + 3) % 3 == 0) as u8 as f64).expect("valid");
    out.push(gradient("focal_loss", &pred, |t, p| {
        focal_loss_var(t, p, &target, FocalParams::default())
    }));
    out.push(gradient("bce_dice_loss", &pred, |t, p| bce_dice_loss_var(t, p, &target)));
    let logits = draw(&mut rng, &[1, 3, 2, 3], -2.0, 2.0);
    let labels = [0, 2, 1, 255, 1, 0];
    out.push(gradient("ce_label_smoothing", &logits, |t, l| {
        ce_label_smoothing_var(t, l, &labels, 0.1)
    }));
    let parts = draw(&mut rng, &[3], 0.1, 2.0);
    out.push(gradient("total_loss", &parts, |t, x| {
        let pick = |t: &mut Tape, i: u32| t.gather(x, Rc::new(vec![i]), 1, &[1]);
        let (a, b, c) = (pick(t, 0)?, pick(t, 1)?, pick(t, 2)?);
        total_loss_var(t, &a, &b, &c, &LossWeights::default())
    }));
    out
}

fn round_trips(rng: &mut ChaCha8Rng, cases: usize) -> Result<(bool, String)> {
    for _ in 0..cases {
        let (b, h, w, c) = (
            rng.gen_range(1..=2),
            rng.gen_range(1..=13),
            rng.gen_range(1..=13),
            rng.gen_range(1..=4),
        );
        let ws = rng.gen_range(1..=7);
        let x = random(rng, &[b, h, w, c], -1e3, 1e3)?;
        let (win, rec) = window_partition(&x, &WindowSpec::unshifted(ws)?)?;
        if window_reverse(&win, &rec)? != x {
            return Ok((false, format!("partition round trip failed for {:?} ws={ws}", x.shape())));
        }
        let limit = h.min(w) as isize;
        let s = rng.gen_range(-(limit - 1)..=(limit - 1));
        if cyclic_shift(&cyclic_shift(&x, s)?, -s)? != x {
            return Ok((false, format!("shift round trip failed for {:?} s={s}", x.shape())));
        }
    }
    Ok((true, format!("{cases} random shapes bit-exact")))
}

fn softmax_rows(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let len = rng.gen_range(1..=40);
        let x = random(rng, &[3, len], -30.0, 30.0)?;
        let mut t = Tape::inference(DType::F64);
        let v = t.leaf(x);
        let mask: Vec<bool> = (0..len).map(|j| j == 0 || rng.gen_bool(0.7)).collect();
        for y in [t.softmax(&v)?, t.softmax_masked(&v, Some((&mask, 3)))?] {
            for row in y.data().chunks(len) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok((worst <= 1e-9, format!("worst row-sum deviation {worst:.2e}")))
}

fn gate_monotone(rng: &mut ChaCha8Rng, pairs: usize) -> Result<(bool, String)> {
    let a = random(rng, &[pairs, 1], -2.0, 3.0)?;
    let b = random(rng, &[pairs, 1], -2.0, 3.0)?;
    let tau: Vec<f64> = (0..pairs).map(|_| rng.gen_range(0.0..1.0)).collect();
    let lambda = rng.gen_range(0.5..50.0);
    let ga = soft_select(&a, &tau, lambda)?;
    let gb = soft_select(&b, &tau, lambda)?;
    let mut bad = 0;
    for i in 0..pairs {
        let (sa, sb, xa, xb) = (a.data()[i], b.data()[i], ga.data()[i], gb.data()[i]);
        let ordered = if sa <= sb { xa <= xb } else { xa >= xb };
        if !ordered || !(0.0..=1.0).contains(&xa) || !(0.0..=1.0).contains(&xb) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{pairs} pairs, {bad} violations")))
}

fn flop_values() -> Result<(bool, String)> {
    let got = (
        flops_msa(64, 64, 256)?,
        flops_wmsa(64, 64, 256, 6)?,
        flops_wssa(64, 64, 256, 6, 0.5)?,
    );
    let ok = got == (9_663_676_416, 1_074_036_736, 1_073_889_280);
    Ok((ok, format!("{} / {} / {}", got.0, got.1, got.2)))
}

fn counted_costs() -> Result<(bool, String)> {
    let args = |rho| CostArgs {
        h: 12,
        w: 12,
        channels: 4,
        window: 6,
        rho,
    };
    let msa = measure_attention_cost(Mechanism::Msa, CostArgs { h: 8, w: 8, ..args(1.0) }, Convention::Literal)?;
    let mut ok = msa.counted() == Some(msa.analytic_value());
    for (m, rho) in [(Mechanism::Wmsa, 1.0), (Mechanism::Wssa, 0.5), (Mechanism::Wssa, 0.25)] {
        let r = measure_attention_cost(m, args(rho), Convention::Swin)?;
        ok &= r.counted() == Some(r.analytic_value());
    }
    Ok((ok, "counted multiplies equal analytic terms".into()))
}

fn file_formats(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut ok = true;
    for rank in 1..=4 {
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=4)).collect();
        for d in [DType::F32, DType::F64] {
            let t = random(rng, &shape, -1e6, 1e6)?.with_dtype(d);
            let back = grct::decode(&grct::encode(&t)?)?;
            ok &= back.shape() == t.shape()
                && back.dtype() == d
                && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    let bytes = pgm::encode(&Tensor::new(&[2, 2], vec![0.0, 0.5, 0.5, 1.0])?)?;
    ok &= bytes.ends_with(&[0x00, 0x80, 0x80, 0xFF]);
    Ok((ok, "GRCT round trip and PGM rounding".into()))
}

fn small_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        coarse_h: 8,
        coarse_w: 8,
        fine_scale: 2,
        out_h: 32,
        out_w: 32,
        channels: 16,
        heads: 4,
        coarse_heads: 2,
        window: 3,
        seed,
        ..PipelineConfig::default()
    }
}

fn pipeline_runs(seed: u64) -> Result<(bool, String)> {
    let cfg = small_config(seed);
    let inputs = synth_inputs(&cfg)?;
    let a = run_pipeline(&cfg, &inputs)?;
    let b = run_pipeline(&cfg, &synth_inputs(&cfg)?)?;
    let same = grct::encode(&a.fine_mask)? == grct::encode(&b.fine_mask)?
        && grct::encode(&a.coarse_mask)? == grct::encode(&b.coarse_mask)?
        && a.report.to_text() == b.report.to_text();
    let in_range = [&a.coarse_mask, &a.fine_mask]
        .iter()
        .all(|m| m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    Ok((
        same && in_range,
        format!("deterministic: {same}, masks within [0, 1]: {in_range}"),
    ))
}

/// Property checks over randomised inputs.
pub fn selftest_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        CheckResult::from("window and shift round trips", round_trips(&mut rng, 1000)),
        CheckResult::from("softmax row sums", softmax_rows(&mut rng)),
        CheckResult::from("soft gate monotone and bounded", gate_monotone(&mut rng, 10_000)),
        CheckResult::from("attention cost formulas", flop_values()),
        CheckResult::from("counted attention cost", counted_costs()),
        CheckResult::from("tensor and image files", file_formats(&mut rng)),
        CheckResult::from("pipeline determinism and ranges", pipeline_runs(seed)),
    ];
    out.extend(gradient_suite(seed));
    out
}
