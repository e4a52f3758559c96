//! End-to-end driver: synthetic encoder outputs through the coarse and fine
//! stages, with file output and a plain-text report.

pub mod config;
pub mod grct;
pub mod pgm;
pub mod synth;
pub mod verify;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use config::{PipelineConfig, Scenario};
pub use synth::{synth_inputs, Region, SynthInputs};

use crate::coarse::{fused_scores, guided_global_attention, run_coarse, CoarseOutput, CoarseParams};
use crate::complexity::{group_thousands, Convention, CostArgs, FlopReport, Mechanism};
use crate::error::{Error, Result};
use crate::fine::{fine_pass, run_fine, FineOutput, FineParams};
use crate::init::ParamInit;
use crate::numerics::{Tape, Tensor};

/// Seeded parameters of both stages.
#[derive(Debug, Clone)]
pub struct Model {
    pub coarse: CoarseParams,
    pub fine: FineParams,
}

impl Model {
    pub fn init(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = ParamInit::new(cfg.seed);
        let mut coarse = CoarseParams::init(&mut init, cfg.channels, cfg.coarse_heads, cfg.layer_ids.len())?;
        coarse.temperature = cfg.lambda_c;
        coarse.alpha_expand = cfg.alpha_expand;
        let mut fine = FineParams::init(&mut init, cfg.channels, cfg.heads, cfg.window, cfg.fine_scale)?;
        fine.temperature = cfg.lambda_f;
        fine.block.attn.pairwise = cfg.pairwise;
        fine.block.attn.set_alpha_scale(cfg.alpha_scale);
        Ok(Model { coarse, fine })
    }
}

/// Mean fine mask inside and outside the planted rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    pub inside: f64,
    pub outside: f64,
}

impl Localization {
    pub fn margin(&self) -> f64 {
        self.inside - self.outside
    }
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    /// Labelled tensor shapes along the pipeline.
    pub shapes: Vec<(&'static str, Vec<usize>)>,
    pub tau_coarse: Vec<f64>,
    pub tau_fine: Vec<f64>,
    pub multiplies_coarse: u128,
    pub multiplies_fine: u128,
    pub flops: Vec<FlopReport>,
    pub block: Option<Region>,
    pub localization: Option<Localization>,
    pub attention_violations: usize,
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("×")
}

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ")
}

impl PipelineReport {
    pub fn shape(&self, label: &str) -> Option<&[usize]> {
        self.shapes.iter().find(|(l, _)| *l == label).map(|(_, s)| s.as_slice())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let _ = writeln!(out, "seed: {}", c.seed);
        let _ = writeln!(out, "dtype: {}", c.dtype);
        let _ = writeln!(out, "scenario: {}", c.scenario);
        out.push_str("\nshapes\n");
        let width = self.shapes.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
        for (label, s) in &self.shapes {
            let _ = writeln!(out, "  {label:<width$}  {}", shape_str(s));
        }
        out.push_str("\nthresholds\n");
        let _ = writeln!(out, "  coarse  {}", floats(&self.tau_coarse));
        let _ = writeln!(out, "  fine    {}", floats(&self.tau_fine));
        out.push_str("\nmatmul multiplies\n");
        let _ = writeln!(out, "  coarse stage  {}", group_thousands(self.multiplies_coarse));
        let _ = writeln!(out, "  fine stage    {}", group_thousands(self.multiplies_fine));
        let conv = self.flops.first().map(|f| f.convention).unwrap_or_default();
        let _ = writeln!(out, "\nanalytic attention cost ({conv} convention)");
        for f in &self.flops {
            let a = &f.args;
            let _ = writeln!(
                out,
                "  {:<5} h={} w={} C={} M={} rho={}  {}",
                f.mechanism.to_string(),
                a.h,
                a.w,
                a.channels,
                a.window,
                a.rho,
                group_thousands(f.analytic_value())
            );
        }
        if self.attention_violations > 0 {
            let _ = writeln!(out, "\nnon-stochastic attention rows: {}", self.attention_violations);
        }
        if let (Some(r), Some(l)) = (self.block, self.localization) {
            out.push_str("\nplanted block\n");
            let _ = writeln!(out, "  coarse region  y={} x={} h={} w={}", r.y0, r.x0, r.h, r.w);
            let _ = writeln!(out, "  fine mask mean inside   {:.6}", l.inside);
            let _ = writeln!(out, "  fine mask mean outside  {:.6}", l.outside);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// `B×C×H_c×W_c` guided coarse features.
    pub coarse_features: Tensor,
    /// `M_c`, `B×1×H_c×W_c`.
    pub coarse_mask: Tensor,
    /// `M_f`, `B×1×H_out×W_out`.
    pub fine_mask: Tensor,
    pub report: PipelineReport,
}

fn check_inputs(cfg: &PipelineConfig, inputs: &SynthInputs) -> Result<()> {
    let expected = [cfg.batch, cfg.channels, cfg.coarse_h, cfg.coarse_w];
    if inputs.features.shape() != expected {
        return Err(Error::shape(format!(
            "features {:?} do not match the configured {expected:?}",
            inputs.features.shape()
        )));
    }
    let s = &inputs.stack;
    if s.batch() != cfg.batch || s.patches() != cfg.coarse_h * cfg.coarse_w || s.layers().len() != cfg.layer_ids.len() {
        return Err(Error::shape(format!(
            "attention stack (batch {}, {} patches, {} layers) does not match the config",
            s.batch(),
            s.patches(),
            s.layers().len()
        )));
    }
    Ok(())
}

fn cost_reports(cfg: &PipelineConfig) -> Result<Vec<FlopReport>> {
    let conv = if cfg.swin_convention { Convention::Swin } else { Convention::Literal };
    let (hf, wf) = cfg.fine_hw();
    let coarse = CostArgs {
        h: cfg.coarse_h,
        w: cfg.coarse_w,
        channels: cfg.channels,
        window: cfg.window,
        rho: cfg.rho,
    };
    let fine = CostArgs { h: hf, w: wf, ..coarse };
    Ok(vec![
        FlopReport::analytic(Mechanism::Msa, coarse, conv)?,
        FlopReport::analytic(Mechanism::Wmsa, fine, conv)?,
        FlopReport::analytic(Mechanism::Wssa, fine, conv)?,
    ])
}

/// Mean of `mask` (`B×1×H×W`) inside and outside a coarse-grid rectangle,
/// mapping each output pixel to the coarse cell it falls in.
pub fn localization(mask: &Tensor, region: &Region, coarse_hw: (usize, usize)) -> Localization {
    let s = mask.shape();
    let (h, w) = (s[2], s[3]);
    let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for plane in mask.data().chunks(h * w) {
        for (i, &v) in plane.iter().enumerate() {
            let (cy, cx) = ((i / w) * coarse_hw.0 / h, (i % w) * coarse_hw.1 / w);
            if region.contains(cy, cx) {
                a += v;
                na += 1;
            } else {
                b += v;
                nb += 1;
            }
        }
    }
    Localization {
        inside: a / na.max(1) as f64,
        outside: b / nb.max(1) as f64,
    }
}

/// Coarse stage then fine stage on one inference tape.
pub fn run_pipeline(cfg: &PipelineConfig, inputs: &SynthInputs) -> Result<PipelineOutput> {
    cfg.validate()?;
    check_inputs(cfg, inputs)?;
    let model = Model::init(cfg)?;
    let fused = fused_scores(&inputs.stack, &model.coarse.layer_weights)?;

    let mut tape = Tape::inference(cfg.dtype);
    tape.counter_mut().enable();
    let features = tape.leaf(inputs.features.clone());
    let scores = tape.leaf(fused);
    let coarse = guided_global_attention(&mut tape, &features, &scores, &model.coarse)?;
    drop((features, scores));
    let multiplies_coarse = tape.counter().count();
    let fine = fine_pass(&mut tape, &coarse.features, &coarse.mask, &model.fine, cfg.out_hw())?;
    let multiplies_fine = tape.counter().count() - multiplies_coarse;

    let (ih, iw) = cfg.image_hw();
    let b = cfg.batch;
    let shapes = vec![
        ("input image (nominal)", vec![b, 3, ih, iw]),
        ("encoder output", inputs.features.shape().to_vec()),
        ("coarse patch tokens", coarse.features.shape().to_vec()),
        ("soft coarse mask", coarse.mask.shape().to_vec()),
        ("upsampled fine tokens", fine.tokens_shape.clone()),
        ("sparse guidance mask", fine.guidance.shape().to_vec()),
        ("final fine logits", fine.mask.shape().to_vec()),
    ];
    let fine_mask = fine.mask.to_tensor();
    let localization = inputs
        .block
        .map(|r| localization(&fine_mask, &r, (cfg.coarse_h, cfg.coarse_w)));
    let report = PipelineReport {
        config: cfg.clone(),
        shapes,
        tau_coarse: coarse.tau.data().to_vec(),
        tau_fine: fine.tau.data().to_vec(),
        multiplies_coarse,
        multiplies_fine,
        flops: cost_reports(cfg)?,
        block: inputs.block,
        localization,
        attention_violations: inputs.stack.stochastic_violations(),
    };
    Ok(PipelineOutput {
        coarse_features: coarse.features.to_tensor(),
        coarse_mask: coarse.mask.to_tensor(),
        fine_mask,
        report,
    })
}

/// Coarse stage alone.
pub fn run_coarse_stage(cfg: &PipelineConfig, inputs: &SynthInputs) -> Result<CoarseOutput> {
    cfg.validate()?;
    check_inputs(cfg, inputs)?;
    let model = Model::init(cfg)?;
    let fused = fused_scores(&inputs.stack, &model.coarse.layer_weights)?;
    run_coarse(&inputs.features, &fused, &model.coarse, cfg.dtype)
}

/// Fine stage alone, on coarse features `B×C×H_c×W_c` and mask `B×1×H_c×W_c`.
pub fn run_fine_stage(cfg: &PipelineConfig, features: &Tensor, mask: &Tensor) -> Result<FineOutput> {
    cfg.validate()?;
    let expected = [cfg.batch, cfg.channels, cfg.coarse_h, cfg.coarse_w];
    if features.shape() != expected || mask.shape() != [cfg.batch, 1, cfg.coarse_h, cfg.coarse_w] {
        return Err(Error::shape(format!(
            "coarse features {:?} / mask {:?} do not match the configured {expected:?}",
            features.shape(),
            mask.shape()
        )));
    }
    let model = Model::init(cfg)?;
    run_fine(features, mask, &model.fine, cfg.out_hw(), cfg.dtype)
}

/// Slices sample `b` of a `B×1×H×W` mask.
fn sample(mask: &Tensor, b: usize) -> Result<Tensor> {
    let s = mask.shape();
    let plane = s[2] * s[3];
    Ok(Tensor::new(&[s[2], s[3]], mask.data()[b * plane..(b + 1) * plane].to_vec())?.with_dtype(mask.dtype()))
}

/// Writes a mask as GRCT plus one PGM per sample; returns the paths.
pub fn write_mask(dir: &Path, stem: &str, mask: &Tensor) -> Result<Vec<PathBuf>> {
    let mut paths = vec![dir.join(format!("{stem}.grct"))];
    grct::write(&paths[0], mask)?;
    let batch = mask.shape()[0];
    for b in 0..batch {
        let name = if batch == 1 { format!("{stem}.pgm") } else { format!("{stem}_{b}.pgm") };
        let p = dir.join(name);
        pgm::write(&p, &sample(mask, b)?)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Writes both masks, the coarse features, the effective config and the
/// report into `dir`.
pub fn write_outputs(dir: &Path, out: &PipelineOutput) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = write_mask(dir, "coarse_mask", &out.coarse_mask)?;
    paths.extend(write_mask(dir, "fine_mask", &out.fine_mask)?);
    let feats = dir.join("coarse_features.grct");
    grct::write(&feats, &out.coarse_features)?;
    paths.push(feats);
    let cfg = dir.join("config.txt");
    std::fs::write(&cfg, out.report.config.to_text())?;
    paths.push(cfg);
    let rep = dir.join("report.txt");
    std::fs::write(&rep, out.report.to_text())?;
    paths.push(rep);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn mini() -> PipelineConfig {
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
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn mini_shape_chain() {
        let cfg = mini();
        let out = run_pipeline(&cfg, &synth_inputs(&cfg).unwrap()).unwrap();
        let r = &out.report;
        assert_eq!(r.shape("input image (nominal)"), Some(&[1, 3, 128, 128][..]));
        assert_eq!(r.shape("soft coarse mask"), Some(&[1, 1, 8, 8][..]));
        assert_eq!(r.shape("upsampled fine tokens"), Some(&[1, 16, 16, 16][..]));
        assert_eq!(r.shape("sparse guidance mask"), Some(&[1, 1, 16, 16][..]));
        assert_eq!(out.fine_mask.shape(), &[1, 1, 32, 32]);
        assert!(out.fine_mask.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(r.multiplies_coarse > 0 && r.multiplies_fine > 0);
        assert!(r.to_text().contains("final fine logits      1×1×32×32"));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cfg = mini();
        let inputs = synth_inputs(&cfg).unwrap();
        let other = PipelineConfig { coarse_h: 4, coarse_w: 4, ..mini() };
        assert!(run_pipeline(&other, &inputs).is_err());
    }

    #[test]
    fn batch_masks_get_one_pgm_each() {
        let cfg = PipelineConfig { batch: 2, ..mini() };
        let out = run_pipeline(&cfg, &synth_inputs(&cfg).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_mask(dir.path(), "fine_mask", &out.fine_mask).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[2].ends_with("fine_mask_1.pgm"));
    }
}
