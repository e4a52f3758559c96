use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::coarse::{layer_preset, AlphaExpand, DEFAULT_LAYER_IDS, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::fine::{PairwiseMode, DEFAULT_SCALE, DEFAULT_WINDOW};
use crate::numerics::DType;

/// Synthetic input family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scenario {
    Uniform,
    #[default]
    PlantedBlock,
    Random,
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Scenario::Uniform),
            "planted-block" | "planted" => Ok(Scenario::PlantedBlock),
            "random" => Ok(Scenario::Random),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Uniform => "uniform",
            Scenario::PlantedBlock => "planted-block",
            Scenario::Random => "random",
        })
    }
}

/// Every tunable of a run. The text form is one `key = value` per line;
/// `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub batch: usize,
    pub coarse_h: usize,
    pub coarse_w: usize,
    /// Pixels per coarse patch in the nominal input image.
    pub patch_size: usize,
    pub fine_scale: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub channels: usize,
    pub coarse_heads: usize,
    pub heads: usize,
    pub window: usize,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub alpha_scale: f64,
    pub layer_ids: Vec<usize>,
    pub cls_index: usize,
    pub alpha_expand: AlphaExpand,
    pub pairwise: PairwiseMode,
    pub scenario: Scenario,
    pub seed: u64,
    pub dtype: DType,
    pub h: usize,
    pub w: usize,
    pub rho: f64,
    pub swin_convention: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            batch: 1,
            coarse_h: 64,
            coarse_w: 64,
            patch_size: 16,
            fine_scale: DEFAULT_SCALE,
            out_h: 1024,
            out_w: 1024,
            channels: 256,
            coarse_heads: 8,
            heads: 8,
            window: DEFAULT_WINDOW,
            lambda_c: DEFAULT_TEMPERATURE,
            lambda_f: DEFAULT_TEMPERATURE,
            alpha_scale: 1.0,
            layer_ids: DEFAULT_LAYER_IDS.to_vec(),
            cls_index: 0,
            alpha_expand: AlphaExpand::Interp,
            pairwise: PairwiseMode::OuterProduct,
            scenario: Scenario::PlantedBlock,
            seed: 42,
            dtype: DType::F32,
            h: 64,
            w: 64,
            rho: 0.5,
            swin_convention: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
    }
}

fn parse_layers(v: &str) -> Result<Vec<usize>> {
    if let Some(ids) = layer_preset(v) {
        return Ok(ids.to_vec());
    }
    v.split(',')
        .map(|s| parse::<usize>("layer_ids", s.trim()))
        .collect()
}

impl PipelineConfig {
    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "batch" => self.batch = parse(key, v)?,
            "coarse_h" => self.coarse_h = parse(key, v)?,
            "coarse_w" => self.coarse_w = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "fine_scale" => self.fine_scale = parse(key, v)?,
            "out_h" => self.out_h = parse(key, v)?,
            "out_w" => self.out_w = parse(key, v)?,
            "channels" | "C" => self.channels = parse(key, v)?,
            "coarse_heads" => self.coarse_heads = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "window" | "M" => self.window = parse(key, v)?,
            "lambda_c" => self.lambda_c = parse(key, v)?,
            "lambda_f" => self.lambda_f = parse(key, v)?,
            "alpha_scale" => self.alpha_scale = parse(key, v)?,
            "layer_ids" => self.layer_ids = parse_layers(v)?,
            "cls_index" => self.cls_index = parse(key, v)?,
            "alpha_expand" => self.alpha_expand = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "pairwise" => self.pairwise = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "scenario" => self.scenario = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "dtype" => self.dtype = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "h" => self.h = parse(key, v)?,
            "w" => self.w = parse(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "swin_convention" => self.swin_convention = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    /// Parses the text form on top of the defaults and validates the result.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_text(&text)
    }

    pub fn to_text(&self) -> String {
        let layers: Vec<String> = self.layer_ids.iter().map(usize::to_string).collect();
        let entries: [(&str, String); 25] = [
            ("batch", self.batch.to_string()),
            ("coarse_h", self.coarse_h.to_string()),
            ("coarse_w", self.coarse_w.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("fine_scale", self.fine_scale.to_string()),
            ("out_h", self.out_h.to_string()),
            ("out_w", self.out_w.to_string()),
            ("channels", self.channels.to_string()),
            ("coarse_heads", self.coarse_heads.to_string()),
            ("heads", self.heads.to_string()),
            ("window", self.window.to_string()),
            ("lambda_c", self.lambda_c.to_string()),
            ("lambda_f", self.lambda_f.to_string()),
            ("alpha_scale", self.alpha_scale.to_string()),
            ("layer_ids", layers.join(",")),
            ("cls_index", self.cls_index.to_string()),
            ("alpha_expand", self.alpha_expand.to_string()),
            ("pairwise", self.pairwise.to_string()),
            ("scenario", self.scenario.to_string()),
            ("seed", self.seed.to_string()),
            ("dtype", self.dtype.to_string()),
            ("h", self.h.to_string()),
            ("w", self.w.to_string()),
            ("rho", self.rho.to_string()),
            ("swin_convention", self.swin_convention.to_string()),
        ];
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("batch", self.batch),
            ("coarse_h", self.coarse_h),
            ("coarse_w", self.coarse_w),
            ("patch_size", self.patch_size),
            ("fine_scale", self.fine_scale),
            ("out_h", self.out_h),
            ("out_w", self.out_w),
            ("channels", self.channels),
            ("coarse_heads", self.coarse_heads),
            ("heads", self.heads),
            ("window", self.window),
            ("h", self.h),
            ("w", self.w),
        ];
        if let Some((k, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be at least 1")));
        }
        for (k, heads) in [("heads", self.heads), ("coarse_heads", self.coarse_heads)] {
            if !self.channels.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "channels {} not divisible by {k} {heads}",
                    self.channels
                )));
            }
        }
        for (k, v) in [("lambda_c", self.lambda_c), ("lambda_f", self.lambda_f)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        if !(self.alpha_scale >= 0.0 && self.alpha_scale.is_finite()) {
            return Err(Error::Config(format!(
                "`alpha_scale` must be non-negative, got {}",
                self.alpha_scale
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("`rho` must lie in (0, 1], got {}", self.rho)));
        }
        if self.layer_ids.is_empty() {
            return Err(Error::Config("`layer_ids` must not be empty".into()));
        }
        if self.cls_index > self.coarse_h * self.coarse_w {
            return Err(Error::Config(format!(
                "`cls_index` {} outside {} tokens",
                self.cls_index,
                self.coarse_h * self.coarse_w + 1
            )));
        }
        Ok(())
    }

    pub fn fine_hw(&self) -> (usize, usize) {
        (self.coarse_h * self.fine_scale, self.coarse_w * self.fine_scale)
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    /// Nominal input image extent implied by the coarse grid.
    pub fn image_hw(&self) -> (usize, usize) {
        (self.coarse_h * self.patch_size, self.coarse_w * self.patch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_aliases_and_presets() {
        let c = PipelineConfig::parse_text(
            "# mini run\nC = 32  # channels\nM=4\nheads = 4\ncoarse_heads=2\nlayer_ids = A\nrho = 0.25\n\nswin_convention = yes\n",
        )
        .unwrap();
        assert_eq!((c.channels, c.window, c.rho), (32, 4, 0.25));
        assert_eq!(c.layer_ids, vec![0, 3, 6, 9]);
        assert!(c.swin_convention);
        assert_eq!(PipelineConfig::parse_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(PipelineConfig::parse_text("nonsense").is_err());
        assert!(PipelineConfig::parse_text("bogus = 1").is_err());
        assert!(PipelineConfig::parse_text("channels = 30").is_err());
        assert!(PipelineConfig::parse_text("rho = 0").is_err());
        assert!(PipelineConfig::parse_text("fine_scale = 0").is_err());
        assert!(PipelineConfig::parse_text("scenario = fog").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = PipelineConfig::default();
        c.apply_override("seed=7").unwrap();
        c.apply_override("dtype = f64").unwrap();
        assert_eq!((c.seed, c.dtype), (7, DType::F64));
        assert!(c.apply_override("seed").is_err());
    }
}
