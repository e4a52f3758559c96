use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{PipelineConfig, Scenario};
use crate::coarse::{AttentionLayer, AttentionStack};
use crate::error::Result;
use crate::numerics::Tensor;

/// Rectangle on the coarse patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y0 + self.h).contains(&y) && (self.x0..self.x0 + self.w).contains(&x)
    }

    /// The same rectangle on a grid `fy`×`fx` times finer.
    pub fn scaled(&self, fy: usize, fx: usize) -> Region {
        Region {
            y0: self.y0 * fy,
            x0: self.x0 * fx,
            h: self.h * fy,
            w: self.w * fx,
        }
    }
}

/// Stand-in encoder outputs.
#[derive(Debug, Clone)]
pub struct SynthInputs {
    /// `B×C×H_c×W_c`.
    pub features: Tensor,
    /// Class-token attention rows for every configured layer.
    pub stack: AttentionStack,
    /// Planted rectangle, for the planted-block scenario.
    pub block: Option<Region>,
}

const BLOCK_FEATURE: f64 = 1.0;
const NOISE: f64 = 0.1;
/// Extra class-token logit on planted patches at the shallowest layer; each
/// deeper layer adds `BLOCK_LOGIT_STEP`.
const BLOCK_LOGIT: f64 = 2.0;
const BLOCK_LOGIT_STEP: f64 = 0.5;

fn softmax_in_place(row: &mut [f64]) {
    let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - top).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Deterministic inputs for `cfg.scenario`, drawn from a ChaCha8 stream
/// seeded with `cfg.seed`.
///
/// * uniform: constant features and attention rows of `1/T`.
/// * random: features in `[-1, 1]` and softmax attention over uniform logits.
/// * planted-block: a rectangle a quarter of the grid on each side with
///   bright features and boosted class-token attention that sharpens with
///   depth, over low-amplitude noise.
pub fn synth_inputs(cfg: &PipelineConfig) -> Result<SynthInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let (b, c, h, w) = (cfg.batch, cfg.channels, cfg.coarse_h, cfg.coarse_w);
    let n = h * w;
    let t = n + 1;
    let heads = cfg.coarse_heads;
    let cls = cfg.cls_index;

    let block = (cfg.scenario == Scenario::PlantedBlock).then(|| {
        let (bh, bw) = ((h / 4).max(1), (w / 4).max(1));
        Region {
            y0: rng.gen_range(0..=h - bh),
            x0: rng.gen_range(0..=w - bw),
            h: bh,
            w: bw,
        }
    });

    let features = match cfg.scenario {
        Scenario::Uniform => Tensor::full(&[b, c, h, w], 0.5)?,
        Scenario::Random => Tensor::from_fn(&[b, c, h, w], |_| rng.gen_range(-1.0..=1.0))?,
        Scenario::PlantedBlock => {
            let r = block.expect("planted");
            Tensor::from_fn(&[b, c, h, w], |i| {
                let p = i % n;
                let base = if r.contains(p / w, p % w) { BLOCK_FEATURE } else { 0.0 };
                base + rng.gen_range(-NOISE..=NOISE)
            })?
        }
    };

    let mut layers = Vec::with_capacity(cfg.layer_ids.len());
    for depth in 0..cfg.layer_ids.len() {
        let mut rows = vec![0.0; b * heads * t];
        for row in rows.chunks_mut(t) {
            match cfg.scenario {
                Scenario::Uniform => row.fill(1.0 / t as f64),
                Scenario::Random => {
                    row.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..=1.0));
                    softmax_in_place(row);
                }
                Scenario::PlantedBlock => {
                    let r = block.expect("planted");
                    let boost = BLOCK_LOGIT + BLOCK_LOGIT_STEP * depth as f64;
                    for (tok, v) in row.iter_mut().enumerate() {
                        let noise = rng.gen_range(-0.5..=0.5);
                        *v = if tok == cls {
                            noise
                        } else {
                            let p = if tok < cls { tok } else { tok - 1 };
                            noise + if r.contains(p / w, p % w) { boost } else { 0.0 }
                        };
                    }
                    softmax_in_place(row);
                }
            }
        }
        layers.push(AttentionLayer::ClsRows(Tensor::new(&[b, heads, t], rows)?));
    }
    let stack = AttentionStack::new(layers, cls, cfg.layer_ids.clone())?;
    Ok(SynthInputs { features, stack, block })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scenario: Scenario, seed: u64) -> PipelineConfig {
        PipelineConfig {
            coarse_h: 8,
            coarse_w: 8,
            channels: 4,
            coarse_heads: 2,
            scenario,
            seed,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn uniform_is_constant() {
        let s = synth_inputs(&small(Scenario::Uniform, 1)).unwrap();
        assert!(s.features.data().iter().all(|&v| v == 0.5));
        assert_eq!(s.stack.stochastic_violations(), 0);
        assert!(s.block.is_none());
    }

    #[test]
    fn deterministic_per_seed() {
        for sc in [Scenario::Random, Scenario::PlantedBlock] {
            let a = synth_inputs(&small(sc, 3)).unwrap();
            let b = synth_inputs(&small(sc, 3)).unwrap();
            let c = synth_inputs(&small(sc, 4)).unwrap();
            assert_eq!(a.features, b.features);
            assert_eq!(a.block, b.block);
            assert_ne!(a.features, c.features);
        }
    }

    #[test]
    fn planted_block_dominates_fused_scores() {
        let cfg = small(Scenario::PlantedBlock, 11);
        let s = synth_inputs(&cfg).unwrap();
        let r = s.block.unwrap();
        assert_eq!((r.h, r.w), (2, 2));
        let fused = crate::coarse::fused_scores(&s.stack, &crate::coarse::LayerWeights::uniform(4)).unwrap();
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
        for (p, &v) in fused.data().iter().enumerate() {
            if r.contains(p / 8, p % 8) {
                inside += v;
                ni += 1;
            } else {
                outside += v;
                no += 1;
            }
        }
        assert!(inside / ni as f64 > outside / no as f64);
    }
}
