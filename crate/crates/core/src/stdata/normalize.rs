use super::StTensor;
use crate::error::{Error, Result};

/// Per-feature mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn denormalize_value(&self, feature: usize, v: f64) -> f64 {
        v * self.std[feature] + self.mean[feature]
    }

    pub fn normalize_value(&self, feature: usize, v: f64) -> f64 {
        (v - self.mean[feature]) / self.std[feature]
    }
}

/// Standardizes each feature over all sensors and steps. A zero-variance
/// feature gets `σ = 1` and a warning.
pub fn normalize(x: &StTensor) -> (StTensor, Vec<String>) {
    let stats = feature_stats(x);
    let mut warnings = Vec::new();
    for k in 0..x.n_features() {
        if raw_std(x, k, stats.mean[k]) == 0.0 {
            warnings.push(format!("feature {k} has zero variance; std clamped to 1"));
        }
    }
    (apply(x, &stats), warnings)
}

/// Applies an existing normalization (e.g. statistics fitted on the training range).
pub fn apply(x: &StTensor, stats: &Normalization) -> StTensor {
    let mut out = x.clone();
    let f = x.n_features();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let k = i % f;
        *v = stats.normalize_value(k, *v);
    }
    out.norm = Some(stats.clone());
    out
}

fn raw_std(x: &StTensor, k: usize, mean: f64) -> f64 {
    let f = x.n_features();
    let vals: Vec<f64> = x.data().iter().skip(k).step_by(f).copied().collect();
    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len().max(1) as f64).sqrt()
}

/// Population mean/std per feature; zero std is clamped to 1.
pub fn feature_stats(x: &StTensor) -> Normalization {
    let f = x.n_features();
    let mut mean = vec![0.0; f];
    let mut std = vec![0.0; f];
    for k in 0..f {
        let vals: Vec<f64> = x.data().iter().skip(k).step_by(f).copied().collect();
        let m = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        mean[k] = m;
        let s = raw_std(x, k, m);
        std[k] = if s > 0.0 { s } else { 1.0 };
    }
    Normalization { mean, std }
}

pub fn denormalize(x: &StTensor) -> Result<StTensor> {
    let stats = x
        .norm
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("tensor carries no normalization".into()))?;
    let mut out = x.clone();
    let f = x.n_features();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = stats.denormalize_value(i % f, *v);
    }
    out.norm = None;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_values_map_to_unit_signs() {
        let x = StTensor::new(1, 2, 1, vec![0.0, 2.0]).unwrap();
        let (n, w) = normalize(&x);
        assert_eq!(n.data(), &[-1.0, 1.0]);
        assert!(w.is_empty());
        assert_eq!(n.norm.as_ref().unwrap().mean, vec![1.0]);
    }

    #[test]
    fn constant_feature_clamps_sigma() {
        let x = StTensor::new(2, 3, 1, vec![7.0; 6]).unwrap();
        let (n, w) = normalize(&x);
        assert!(n.data().iter().all(|&v| v == 0.0));
        assert_eq!(n.norm.as_ref().unwrap().std, vec![1.0]);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn denormalize_without_stats_fails() {
        let x = StTensor::zeros(1, 1, 1);
        assert!(denormalize(&x).is_err());
    }
}
