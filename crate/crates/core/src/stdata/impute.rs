use super::{RawSeries, StTensor};
use crate::error::{Error, Result};
use crate::graph::SensorGraph;

/// Spatio-temporal exponential moving average imputation settings.
#[derive(Clone, Debug)]
pub struct ImputeConfig {
    pub decay: f64,
    /// Number of lags `k = 0..window` considered.
    pub window: usize,
    /// Use the un-normalized `(1/window) Σ_k e^{-decay·k} x` average instead of
    /// weights normalized over the available terms. Diagnostic only: it does
    /// not leave constant signals fixed.
    pub literal: bool,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            decay: 0.1,
            window: 288,
            literal: false,
        }
    }
}

/// Replaces every missing reading by the decayed average of neighbor histories.
pub fn impute_missing(raw: &RawSeries, graph: &SensorGraph, cfg: &ImputeConfig) -> Result<StTensor> {
    let (r, t, f) = raw.dims();
    if graph.n() != r {
        return Err(Error::InvalidArgument(format!(
            "graph has {} nodes but series has {} sensors",
            graph.n(),
            r
        )));
    }
    let data = impute_values(&raw.values, (r, t, f), graph, cfg)?;
    StTensor::new(r, t, f, data)
}

/// Average over sources `j` of `Σ_k w_k x[j, t-k]`, where `x` are the
/// original (non-missing) readings only.
fn source_average(
    values: &[f64],
    dims: (usize, usize, usize),
    sources: &[usize],
    t0: usize,
    feat: usize,
    cfg: &ImputeConfig,
) -> Option<f64> {
    let (_, t, f) = dims;
    let mut acc = 0.0;
    let mut used = 0usize;
    for &j in sources {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..cfg.window.min(t0 + 1) {
            let v = values[(j * t + t0 - k) * f + feat];
            if v.is_nan() {
                continue;
            }
            let w = (-cfg.decay * k as f64).exp();
            num += w * v;
            den += w;
        }
        if den > 0.0 {
            acc += if cfg.literal { num / cfg.window as f64 } else { num / den };
            used += 1;
        }
    }
    if used == 0 {
        return None;
    }
    let count = if cfg.literal { sources.len() } else { used };
    Some(acc / count as f64)
}

pub(crate) fn impute_values(
    values: &[f64],
    dims: (usize, usize, usize),
    graph: &SensorGraph,
    cfg: &ImputeConfig,
) -> Result<Vec<f64>> {
    if cfg.window == 0 {
        return Err(Error::InvalidArgument("imputation window must be >= 1".into()));
    }
    let (r, t, f) = dims;
    let mut out = values.to_vec();
    let mut unimputable = Vec::new();
    let neighbors: Vec<Vec<usize>> = (0..r).map(|i| graph.neighbors(i).collect()).collect();
    for i in 0..r {
        for tt in 0..t {
            for feat in 0..f {
                let pos = (i * t + tt) * f + feat;
                if !values[pos].is_nan() {
                    continue;
                }
                let filled = source_average(values, dims, &neighbors[i], tt, feat, cfg)
                    .or_else(|| source_average(values, dims, &[i], tt, feat, cfg));
                match filled {
                    Some(v) => out[pos] = v,
                    None => unimputable.push((tt, i)),
                }
            }
        }
    }
    if !unimputable.is_empty() {
        unimputable.dedup();
        let shown: Vec<String> = unimputable.iter().take(10).map(|(t, i)| format!("(t={t}, node={i})")).collect();
        return Err(Error::Data(format!(
            "{} unimputable entries: {}{}",
            unimputable.len(),
            shown.join(", "),
            if unimputable.len() > 10 { ", ..." } else { "" }
        )));
    }
    Ok(out)
}
