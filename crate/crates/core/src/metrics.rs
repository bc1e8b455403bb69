//! Forecast metrics. All of them are computed per node and then averaged
//! over nodes. Inputs are `[S, R, Q, F]` arrays (samples, nodes, horizon,
//! features) in physical units.

use std::fmt::Write as _;

use crate::diffengine::Tensor;
use crate::error::{Error, Result};

/// Clamp constant in the MAPE denominator.
pub const MAPE_EPS: f64 = 1.0;
pub const HORIZON_DECAY: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub per_horizon: Vec<f64>,
    pub per_node: Vec<f64>,
    pub weighted_mae: f64,
}

fn dims(y: &Tensor, yhat: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if y.shape() != yhat.shape() {
        return Err(Error::shape("metrics", format!("{:?} vs {:?}", y.shape(), yhat.shape())));
    }
    match *y.shape() {
        [s, r, q, f] if s * r * q * f > 0 => Ok((s, r, q, f)),
        _ => Err(Error::shape("metrics", format!("expected non-empty [S, R, Q, F], got {:?}", y.shape()))),
    }
}

/// Views a `[T, N]` (time × node) array as `[T, N, 1, 1]`.
pub fn time_node(t: usize, n: usize, data: Vec<f64>) -> Result<Tensor> {
    Tensor::new(&[t, n, 1, 1], data)
}

/// Per-node mean of `g(y, ŷ)` over samples, horizons and features.
fn per_node(y: &Tensor, yhat: &Tensor, g: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
    let (s, r, q, f) = dims(y, yhat)?;
    let block = q * f;
    let mut acc = vec![0.0; r];
    for si in 0..s {
        for node in 0..r {
            let base = (si * r + node) * block;
            for j in base..base + block {
                acc[node] += g(y.data()[j], yhat.data()[j]);
            }
        }
    }
    let n = (s * block) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(y: &Tensor, yhat: &Tensor) -> Result<f64> {
    Ok(mean(&per_node(y, yhat, |a, b| (a - b).abs())?))
}

pub fn rmse(y: &Tensor, yhat: &Tensor) -> Result<f64> {
    let ms = per_node(y, yhat, |a, b| (a - b) * (a - b))?;
    Ok(mean(&ms.iter().map(|v| v.sqrt()).collect::<Vec<_>>()))
}

/// `|y - ŷ| / max(y, eps)`, averaged per node then over nodes.
pub fn mape(y: &Tensor, yhat: &Tensor, eps: f64) -> Result<f64> {
    Ok(mean(&per_node(y, yhat, |a, b| ((a - b) / a.max(eps)).abs())?))
}

/// MAE at each horizon step.
pub fn per_horizon_mae(y: &Tensor, yhat: &Tensor) -> Result<Vec<f64>> {
    let (s, r, q, f) = dims(y, yhat)?;
    let mut out = vec![0.0; q];
    for (h, slot) in out.iter_mut().enumerate() {
        let mut node_sum = 0.0;
        for node in 0..r {
            let mut acc = 0.0;
            for si in 0..s {
                let base = ((si * r + node) * q + h) * f;
                for j in base..base + f {
                    acc += (y.data()[j] - yhat.data()[j]).abs();
                }
            }
            node_sum += acc / (s * f) as f64;
        }
        *slot = node_sum / r as f64;
    }
    Ok(out)
}

/// `Σ_h w_h MAE_h / Σ_h w_h` with `w_h = decay^h`, `h` counted from 0.
pub fn horizon_weighted_mae(per_horizon: &[f64], decay: f64) -> Result<f64> {
    if per_horizon.is_empty() {
        return Err(Error::InvalidArgument("empty horizon list".into()));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::InvalidArgument(format!("decay {decay} outside (0, 1]")));
    }
    if per_horizon.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite horizon MAE".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut w = 1.0;
    for &m in per_horizon {
        num += w * m;
        den += w;
        w *= decay;
    }
    Ok(num / den)
}

impl MetricReport {
    pub fn compute(y: &Tensor, yhat: &Tensor) -> Result<Self> {
        let per_node = per_node(y, yhat, |a, b| (a - b).abs())?;
        let per_horizon = per_horizon_mae(y, yhat)?;
        Ok(MetricReport {
            mae: mean(&per_node),
            rmse: rmse(y, yhat)?,
            mape: mape(y, yhat, MAPE_EPS)?,
            weighted_mae: horizon_weighted_mae(&per_horizon, HORIZON_DECAY)?,
            per_horizon,
            per_node,
        })
    }

    /// Rows `scope,horizon,node,metric,value`; `-` marks an aggregated axis.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,horizon,node,metric,value\n");
        for (name, v) in [
            ("mae", self.mae),
            ("rmse", self.rmse),
            ("mape", self.mape),
            ("weighted_mae", self.weighted_mae),
        ] {
            let _ = writeln!(out, "overall,-,-,{name},{v}");
        }
        for (h, v) in self.per_horizon.iter().enumerate() {
            let _ = writeln!(out, "horizon,{h},-,mae,{v}");
        }
        for (n, v) in self.per_node.iter().enumerate() {
            let _ = writeln!(out, "node,-,{n},mae,{v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_forecast_is_zero() {
        let y = time_node(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(mape(&y, &y, MAPE_EPS).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_unit_residuals() {
        let y = time_node(2, 1, vec![5.0, 5.0]).unwrap();
        let yhat = time_node(2, 1, vec![4.0, 6.0]).unwrap();
        assert!((mae(&y, &yhat).unwrap() - 1.0).abs() < 1e-12);
        assert!((rmse(&y, &yhat).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_and_two_residuals() {
        let y = time_node(2, 1, vec![5.0, 5.0]).unwrap();
        let yhat = time_node(2, 1, vec![5.0, 7.0]).unwrap();
        assert!((mae(&y, &yhat).unwrap() - 1.0).abs() < 1e-12);
        assert!((rmse(&y, &yhat).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mape_cases() {
        let y = time_node(1, 1, vec![10.0]).unwrap();
        let yhat = time_node(1, 1, vec![9.0]).unwrap();
        assert!((mape(&y, &yhat, 1.0).unwrap() - 0.1).abs() < 1e-12);
        let y = time_node(1, 1, vec![0.5]).unwrap();
        let yhat = time_node(1, 1, vec![0.0]).unwrap();
        assert!((mape(&y, &yhat, 1.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weighted_horizon_cases() {
        assert!((horizon_weighted_mae(&[2.5; 12], 0.95).unwrap() - 2.5).abs() < 1e-12);
        let v = horizon_weighted_mae(&[1.0, 2.0], 0.95).unwrap();
        assert!((v - 2.9 / 1.95).abs() < 1e-12);
        assert!((v - 1.48718).abs() < 1e-5);
        assert!((horizon_weighted_mae(&[1.0, 2.0, 6.0], 1.0).unwrap() - 3.0).abs() < 1e-12);
        assert!(horizon_weighted_mae(&[], 0.95).is_err());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = time_node(2, 1, vec![0.0; 2]).unwrap();
        let b = time_node(1, 2, vec![0.0; 2]).unwrap();
        assert!(mae(&a, &b).is_err());
    }

    #[test]
    fn csv_has_stable_header() {
        let y = time_node(1, 1, vec![1.0]).unwrap();
        let r = MetricReport::compute(&y, &y).unwrap();
        assert!(r.to_csv().starts_with("scope,horizon,node,metric,value\noverall,-,-,mae,0\n"));
    }
}
