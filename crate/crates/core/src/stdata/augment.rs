use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StTensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    /// Expected fraction of entries zeroed by segment masking.
    pub mask_rate: f64,
    /// Length of each masked segment.
    pub segment_len: usize,
    /// Maximum relative stretch of a warped block.
    pub warp_pct: f64,
    /// Half-width of each warped block, in steps.
    pub warp_window: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mask_rate: 0.2,
            segment_len: 12,
            warp_pct: 0.15,
            warp_window: 24,
        }
    }
}

/// Temporal warping followed by random segment masking; a pure function of
/// `(x, cfg, seed)`. Intended for normalized training data.
pub fn augment(x: &StTensor, cfg: &AugmentConfig, seed: u64) -> Result<StTensor> {
    if !(0.0..1.0).contains(&cfg.mask_rate) {
        return Err(Error::InvalidArgument(format!("mask_rate {} outside [0, 1)", cfg.mask_rate)));
    }
    if !(0.0..1.0).contains(&cfg.warp_pct) {
        return Err(Error::InvalidArgument(format!("warp_pct {} outside [0, 1)", cfg.warp_pct)));
    }
    if cfg.segment_len == 0 {
        return Err(Error::InvalidArgument("segment_len must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    let (r, t, f) = (x.n_nodes(), x.n_steps(), x.n_features());

    if cfg.warp_pct > 0.0 && cfg.warp_window > 0 {
        let block = 2 * cfg.warp_window;
        let mut start = 0;
        while start < t {
            let end = (start + block).min(t);
            let factor = 1.0 + rng.gen_range(-cfg.warp_pct..=cfg.warp_pct);
            let center = (start + end - 1) as f64 / 2.0;
            for node in 0..r {
                for feat in 0..f {
                    for tt in start..end {
                        let pos = (center + (tt as f64 - center) * factor).clamp(start as f64, (end - 1) as f64);
                        let lo = pos.floor() as usize;
                        let frac = pos - lo as f64;
                        let v = if frac == 0.0 || lo + 1 >= end {
                            x.at(node, lo, feat)
                        } else {
                            x.at(node, lo, feat) * (1.0 - frac) + x.at(node, lo + 1, feat) * frac
                        };
                        out.set(node, tt, feat, v);
                    }
                }
            }
            start = end;
        }
    }

    if cfg.mask_rate > 0.0 {
        for node in 0..r {
            for feat in 0..f {
                let mut start = 0;
                while start < t {
                    let end = (start + cfg.segment_len).min(t);
                    if rng.gen::<f64>() < cfg.mask_rate {
                        for tt in start..end {
                            out.set(node, tt, feat, 0.0);
                        }
                    }
                    start = end;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> StTensor {
        let data = (0..3 * 100 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        StTensor::new(3, 100, 2, data).unwrap()
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let cfg = AugmentConfig {
            mask_rate: 0.0,
            warp_pct: 0.0,
            ..Default::default()
        };
        assert_eq!(augment(&sample(), &cfg, 1).unwrap(), sample());
    }

    #[test]
    fn full_masking_rejected() {
        let cfg = AugmentConfig {
            mask_rate: 1.0,
            ..Default::default()
        };
        assert!(augment(&sample(), &cfg, 1).is_err());
    }

    #[test]
    fn seeded_calls_are_identical() {
        let cfg = AugmentConfig::default();
        let a = augment(&sample(), &cfg, 42).unwrap();
        let b = augment(&sample(), &cfg, 42).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), sample().data());
    }

    #[test]
    fn masked_fraction_near_rate() {
        let data = vec![1.0; 50 * 2400];
        let x = StTensor::new(50, 2400, 1, data).unwrap();
        let cfg = AugmentConfig {
            warp_pct: 0.0,
            ..Default::default()
        };
        let y = augment(&x, &cfg, 3).unwrap();
        let frac = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / y.data().len() as f64;
        assert!((frac - 0.2).abs() < 0.02, "{frac}");
    }
}
