use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Binary greyscale (P5) image of a mask in `[0, 1]`, one byte per pixel
/// holding `round(255·m)`. Leading unit axes are ignored, so `1×1×H×W`
/// masks are accepted.
pub fn encode(mask: &Tensor) -> Result<Vec<u8>> {
    let s = mask.shape();
    let spatial = &s[s.len().saturating_sub(2)..];
    if s[..s.len() - spatial.len()].iter().any(|&d| d != 1) || spatial.len() != 2 {
        return Err(Error::shape(format!("PGM export needs a single 2-D mask, got {s:?}")));
    }
    let (h, w) = (spatial[0], spatial[1]);
    if let Some(v) = mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("mask value {v} outside [0, 1]")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&v| (255.0 * v).round() as u8));
    Ok(out)
}

pub fn write(path: &Path, mask: &Tensor) -> Result<()> {
    std::fs::write(path, encode(mask)?)?;
    Ok(())
}
