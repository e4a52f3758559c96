//! Command-line front end for the `grcsam` binary.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::coarse::AlphaExpand;
use crate::complexity::{format_table, measure_attention_cost, to_csv, Convention, CostArgs, FlopReport, Mechanism};
use crate::error::{Error, Result};
use crate::losses::{self, FocalParams, LossWeights, DEFAULT_LABEL_SMOOTHING};
use crate::numerics::{DType, Tensor};
use crate::pipeline::verify::{all_passed, format_results, gradient_suite, selftest_suite};
use crate::pipeline::{
    grct, run_coarse_stage, run_fine_stage, run_pipeline, synth_inputs, write_mask, write_outputs, PipelineConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Largest grid on which `flops` also runs the instrumented kernels.
pub const MAX_COUNTED_TOKENS: usize = 4096;

#[derive(Debug, Parser)]
#[command(name = "grcsam", version, about = "Coarse-to-fine mask prompt generation on synthetic encoder outputs")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Line-oriented `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files (created if missing).
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_parser = parse_from_str::<DType>)]
    pub dtype: Option<DType>,
    #[arg(long, global = true, value_parser = parse_from_str::<AlphaExpand>)]
    pub alpha_expand: Option<AlphaExpand>,
    /// Include the channel factor in the windowed attention costs.
    #[arg(long, global = true)]
    pub swin_convention: bool,
    /// Override any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coarse then fine stage; writes GRCT and PGM outputs plus a report.
    Pipeline,
    /// Coarse stage only.
    Coarse,
    /// Fine stage, on saved coarse outputs or on a fresh coarse run.
    Fine {
        /// Coarse features `B×C×H_c×W_c` (GRCT).
        #[arg(long, requires = "mask")]
        features: Option<PathBuf>,
        /// Coarse mask `B×1×H_c×W_c` (GRCT).
        #[arg(long, requires = "features")]
        mask: Option<PathBuf>,
    },
    /// Attention cost table for MSA, W-MSA and W-SSA.
    Flops {
        /// Extra keep ratios for W-SSA rows.
        #[arg(long = "sweep", value_delimiter = ',', value_name = "RHO,...")]
        sweep: Vec<f64>,
        /// Skip the instrumented kernels.
        #[arg(long)]
        analytic_only: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck,
    /// Every property suite, including the gradient checks.
    Selftest,
    /// Evaluate the losses on GRCT inputs.
    Losses {
        /// Probabilities in [0, 1].
        #[arg(long, requires = "target")]
        pred: Option<PathBuf>,
        /// Binary targets, same shape as `--pred`.
        #[arg(long, requires = "pred")]
        target: Option<PathBuf>,
        /// Class logits `B×K×H×W`.
        #[arg(long, requires = "labels")]
        logits: Option<PathBuf>,
        /// Integer labels `B×H×W`; 255 marks ignored pixels.
        #[arg(long, requires = "logits")]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LABEL_SMOOTHING)]
        smoothing: f64,
    },
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Config from defaults, then `--config`, then `--set`, then dedicated flags.
pub fn resolve_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    for o in &g.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(d) = g.dtype {
        cfg.dtype = d;
    }
    if let Some(a) = g.alpha_expand {
        cfg.alpha_expand = a;
    }
    if g.swin_convention {
        cfg.swin_convention = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                _ => {
                    let _ = e.print();
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(&cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_VERIFY_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn print(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn list_written(files: &[PathBuf]) -> Result<()> {
    let mut text = String::from("wrote\n");
    for f in files {
        text.push_str(&format!("  {}\n", f.display()));
    }
    print(&text)
}

fn taus(v: &[f64]) -> String {
    v.iter().map(|t| format!("{t:.6}")).collect::<Vec<_>>().join(", ")
}

/// `Ok(false)` signals a failed verification.
fn dispatch(cli: &Cli) -> Result<bool> {
    let cfg = resolve_config(&cli.global)?;
    let dir = cli.global.out_dir.as_path();
    match &cli.command {
        Command::Pipeline => cmd_pipeline(&cfg, dir).map(|_| true),
        Command::Coarse => cmd_coarse(&cfg, dir).map(|_| true),
        Command::Fine { features, mask } => cmd_fine(&cfg, dir, features.as_deref(), mask.as_deref()).map(|_| true),
        Command::Flops { sweep, analytic_only } => cmd_flops(&cfg, dir, sweep, *analytic_only).map(|_| true),
        Command::Gradcheck => report_checks(&gradient_suite(cfg.seed)),
        Command::Selftest => report_checks(&selftest_suite(cfg.seed)),
        Command::Losses {
            pred,
            target,
            logits,
            labels,
            smoothing,
        } => cmd_losses(pred.as_deref(), target.as_deref(), logits.as_deref(), labels.as_deref(), *smoothing)
            .map(|_| true),
    }
}

fn report_checks(results: &[crate::pipeline::verify::CheckResult]) -> Result<bool> {
    print(&format_results(results))?;
    Ok(all_passed(results))
}

fn cmd_pipeline(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let inputs = synth_inputs(cfg)?;
    log::info!("running pipeline with seed {}", cfg.seed);
    let out = run_pipeline(cfg, &inputs)?;
    let files = write_outputs(dir, &out)?;
    print(&out.report.to_text())?;
    list_written(&files)
}

fn cmd_coarse(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let inputs = synth_inputs(cfg)?;
    let out = run_coarse_stage(cfg, &inputs)?;
    std::fs::create_dir_all(dir)?;
    let mut files = write_mask(dir, "coarse_mask", &out.mask)?;
    let feats = dir.join("coarse_features.grct");
    grct::write(&feats, &out.features)?;
    files.push(feats);
    print(&format!(
        "coarse features  {:?}\ncoarse mask      {:?}\ncoarse tau       {}\n",
        out.features.shape(),
        out.mask.shape(),
        taus(&out.tau)
    ))?;
    list_written(&files)
}

fn cmd_fine(cfg: &PipelineConfig, dir: &Path, features: Option<&Path>, mask: Option<&Path>) -> Result<()> {
    let (features, mask) = match (features, mask) {
        (Some(f), Some(m)) => (grct::read(f)?.with_dtype(cfg.dtype), grct::read(m)?.with_dtype(cfg.dtype)),
        _ => {
            let coarse = run_coarse_stage(cfg, &synth_inputs(cfg)?)?;
            (coarse.features, coarse.mask)
        }
    };
    let out = run_fine_stage(cfg, &features, &mask)?;
    std::fs::create_dir_all(dir)?;
    let files = write_mask(dir, "fine_mask", &out.mask)?;
    print(&format!(
        "fine tokens  {:?}\nfine mask    {:?}\nfine tau     {}\n",
        out.tokens_shape,
        out.mask.shape(),
        taus(&out.tau)
    ))?;
    list_written(&files)
}

fn cmd_flops(cfg: &PipelineConfig, dir: &Path, sweep: &[f64], analytic_only: bool) -> Result<()> {
    let conv = if cfg.swin_convention { Convention::Swin } else { Convention::Literal };
    let base = CostArgs {
        h: cfg.h,
        w: cfg.w,
        channels: cfg.channels,
        window: cfg.window,
        rho: cfg.rho,
    };
    let mut rows = vec![(Mechanism::Msa, base), (Mechanism::Wmsa, base), (Mechanism::Wssa, base)];
    rows.extend(sweep.iter().map(|&rho| (Mechanism::Wssa, CostArgs { rho, ..base })));
    let count = !analytic_only && cfg.h * cfg.w <= MAX_COUNTED_TOKENS;
    let reports = rows
        .into_iter()
        .map(|(m, a)| {
            if count {
                measure_attention_cost(m, a, conv)
            } else {
                FlopReport::analytic(m, a, conv)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("flops.csv");
    std::fs::write(&csv, to_csv(&reports))?;
    print(&format!("{conv} convention\n"))?;
    print(&format_table(&reports))?;
    list_written(&[csv])
}

fn read_labels(path: &Path) -> Result<(Vec<usize>, Vec<u32>)> {
    let t = grct::read(path)?;
    let labels = t
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::invalid(format!("label {v} is not a non-negative integer")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((t.shape().to_vec(), labels))
}

fn cmd_losses(
    pred: Option<&Path>,
    target: Option<&Path>,
    logits: Option<&Path>,
    labels: Option<&Path>,
    smoothing: f64,
) -> Result<()> {
    if pred.is_none() && logits.is_none() {
        return Err(Error::invalid("losses needs --pred/--target, --logits/--labels, or both"));
    }
    let mut text = String::new();
    let mut binary = None;
    if let (Some(p), Some(t)) = (pred, target) {
        let (p, t) = (grct::read(p)?, grct::read(t)?);
        let focal = losses::focal_loss(&p, &t, FocalParams::default())?;
        let bce_dice = losses::bce_dice_loss(&p, &t)?;
        text.push_str(&format!("focal     {focal:.9}\nbce_dice  {bce_dice:.9}\n"));
        binary = Some((focal, bce_dice));
    }
    let mut ce = None;
    if let (Some(l), Some(y)) = (logits, labels) {
        let logits: Tensor = grct::read(l)?;
        let (_, labels) = read_labels(y)?;
        let v = losses::ce_label_smoothing(&logits, &labels, smoothing)?;
        text.push_str(&format!("ce        {v:.9}\n"));
        ce = Some(v);
    }
    if let (Some((focal, bce_dice)), Some(ce)) = (binary, ce) {
        let total = losses::total_loss(focal, bce_dice, ce, &LossWeights::default());
        text.push_str(&format!("total     {total:.9}\n"));
    }
    print(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_globals_after_subcommand() {
        let cli = Cli::try_parse_from(["grcsam", "flops", "--set", "C=64", "--seed", "3", "--dtype", "f64"]).unwrap();
        let cfg = resolve_config(&cli.global).unwrap();
        assert_eq!(cfg.channels, 64);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.dtype, DType::F64);
    }

    #[test]
    fn flags_override_set() {
        let cli = Cli::try_parse_from(["grcsam", "pipeline", "--set", "seed=1", "--seed", "9"]).unwrap();
        assert_eq!(resolve_config(&cli.global).unwrap().seed, 9);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["grcsam", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["grcsam", "pipeline", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["grcsam", "flops", "--set", "nope=1"]), EXIT_USAGE);
        assert_eq!(run(["grcsam", "losses"]), EXIT_USAGE);
        assert_eq!(run(["grcsam", "fine", "--features", "x.grct"]), EXIT_USAGE);
    }

    #[test]
    fn flops_writes_csv_with_literal_value() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let code = run([
            "grcsam", "flops", "--analytic-only", "--out-dir", out, "--set", "C=256", "--set", "h=64", "--set", "w=64",
            "--set", "M=6", "--set", "rho=0.5",
        ]);
        assert_eq!(code, EXIT_OK);
        let csv = std::fs::read_to_string(dir.path().join("flops.csv")).unwrap();
        assert!(csv.lines().any(|l| l.starts_with("wssa,") && l.contains(",1073889280,")));
    }
}
