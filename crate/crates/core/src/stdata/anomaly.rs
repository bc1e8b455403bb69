use std::fmt::Write as _;

use super::impute::{impute_values, ImputeConfig};
use super::StTensor;
use crate::error::{Error, Result};
use crate::graph::SensorGraph;

#[derive(Clone, Debug)]
pub struct AnomalyConfig {
    pub z_thresh: f64,
    /// Steps per week (2016 at a 5-minute cadence).
    pub week_period: usize,
    /// Steps per hour bucket (12 at a 5-minute cadence).
    pub bucket_len: usize,
    pub impute: ImputeConfig,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        AnomalyConfig {
            z_thresh: 5.0,
            week_period: 2016,
            bucket_len: 12,
            impute: ImputeConfig::default(),
        }
    }
}

/// Positions `(sensor, step, feature)` flagged as anomalous.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnomalyMask {
    pub positions: Vec<(usize, usize, usize)>,
}

impl AnomalyMask {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// `sensor,timestamp,feature` triples.
    pub fn export(&self, sensor_ids: &[String], timestamps: &[i64], feature_names: &[String]) -> String {
        let mut out = String::from("sensor,timestamp,feature\n");
        for &(r, t, f) in &self.positions {
            let _ = writeln!(out, "{},{},{}", sensor_ids[r], timestamps[t], feature_names[f]);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct AnomalyResult {
    pub cleaned: StTensor,
    pub mask: AnomalyMask,
    pub warnings: Vec<String>,
}

/// Flags readings whose z-score within their (sensor, feature, hour-of-week)
/// bucket exceeds the threshold, and re-imputes them from neighbors.
pub fn remove_anomalies(x: &StTensor, graph: &SensorGraph, cfg: &AnomalyConfig) -> Result<AnomalyResult> {
    if !(cfg.z_thresh > 0.0) {
        return Err(Error::InvalidArgument("z_thresh must be > 0".into()));
    }
    if cfg.bucket_len == 0 || cfg.week_period < cfg.bucket_len {
        return Err(Error::InvalidArgument("week_period must be >= bucket_len >= 1".into()));
    }
    let (r, t, f) = (x.n_nodes(), x.n_steps(), x.n_features());
    let mut warnings = Vec::new();
    if t < cfg.week_period {
        warnings.push(format!("series has {t} steps, fewer than one week period of {}", cfg.week_period));
    }
    let n_buckets = cfg.week_period.div_ceil(cfg.bucket_len);
    let bucket_of = |tt: usize| (tt % cfg.week_period) / cfg.bucket_len;
    let mut mask = AnomalyMask::default();
    let mut skipped = 0usize;
    for node in 0..r {
        for feat in 0..f {
            let mut sum = vec![0.0; n_buckets];
            let mut sq = vec![0.0; n_buckets];
            let mut count = vec![0usize; n_buckets];
            for tt in 0..t {
                let b = bucket_of(tt);
                let v = x.at(node, tt, feat);
                sum[b] += v;
                count[b] += 1;
            }
            let mean: Vec<f64> = (0..n_buckets)
                .map(|b| if count[b] > 0 { sum[b] / count[b] as f64 } else { 0.0 })
                .collect();
            for tt in 0..t {
                let b = bucket_of(tt);
                let d = x.at(node, tt, feat) - mean[b];
                sq[b] += d * d;
            }
            for tt in 0..t {
                let b = bucket_of(tt);
                if count[b] < 2 {
                    continue;
                }
                let std = (sq[b] / count[b] as f64).sqrt();
                let z = if std == 0.0 { 0.0 } else { (x.at(node, tt, feat) - mean[b]) / std };
                if z.abs() > cfg.z_thresh {
                    mask.positions.push((node, tt, feat));
                }
            }
            skipped += count.iter().filter(|&&c| c == 1).count();
        }
    }
    if skipped > 0 {
        warnings.push(format!("{skipped} buckets with fewer than 2 samples skipped"));
    }
    if mask.is_empty() {
        return Ok(AnomalyResult {
            cleaned: x.clone(),
            mask,
            warnings,
        });
    }
    let mut values = x.data().to_vec();
    for &(node, tt, feat) in &mask.positions {
        values[x.idx(node, tt, feat)] = f64::NAN;
    }
    let data = impute_values(&values, (r, t, f), graph, &cfg.impute)?;
    let mut cleaned = StTensor::new(r, t, f, data)?;
    cleaned.norm = x.norm.clone();
    Ok(AnomalyResult {
        cleaned,
        mask,
        warnings,
    })
}
