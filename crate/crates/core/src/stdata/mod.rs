//! Sensor reading ingestion, preprocessing, chronological splits and windowing.

mod anomaly;
mod augment;
mod impute;
mod io;
mod normalize;
mod split;
mod window;

pub use anomaly::{remove_anomalies, AnomalyConfig, AnomalyMask, AnomalyResult};
pub use augment::{augment, AugmentConfig};
pub use impute::{impute_missing, ImputeConfig};
pub use io::{format_readings, load_edges, load_readings, parse_edges, parse_readings, ColumnSchema};
pub use normalize::{apply as apply_normalization, denormalize, feature_stats, normalize, Normalization};
pub use split::{split_chronological, SplitFractions, SplitPlan};
pub use window::{window_origins, window_samples, ForecastBatch, WindowStream};

use std::ops::Range;

use crate::error::{Error, Result};

/// Raw readings with explicit missing markers (`NaN`).
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub sensor_ids: Vec<String>,
    pub timestamps: Vec<i64>,
    /// Sensor-major `[sensor, time, feature]`; `NaN` marks a missing reading.
    pub values: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl RawSeries {
    pub fn new(
        sensor_ids: Vec<String>,
        timestamps: Vec<i64>,
        values: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("timestamps must be strictly increasing".into()));
        }
        let expected = sensor_ids.len() * timestamps.len() * feature_names.len();
        if values.len() != expected {
            return Err(Error::Data(format!(
                "values length {} does not match {} sensors x {} steps x {} features",
                values.len(),
                sensor_ids.len(),
                timestamps.len(),
                feature_names.len()
            )));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::Data("infinite reading".into()));
        }
        Ok(RawSeries {
            sensor_ids,
            timestamps,
            values,
            feature_names,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.sensor_ids.len(), self.timestamps.len(), self.feature_names.len())
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }
}

/// Dense finite `R × T × F` array, optionally carrying its normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct StTensor {
    r: usize,
    t: usize,
    f: usize,
    data: Vec<f64>,
    pub norm: Option<Normalization>,
}

impl StTensor {
    pub fn new(r: usize, t: usize, f: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != r * t * f {
            return Err(Error::Data(format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                r,
                t,
                f
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite entry at flat index {pos}")));
        }
        Ok(StTensor {
            r,
            t,
            f,
            data,
            norm: None,
        })
    }

    pub fn zeros(r: usize, t: usize, f: usize) -> Self {
        StTensor {
            r,
            t,
            f,
            data: vec![0.0; r * t * f],
            norm: None,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.r
    }

    pub fn n_steps(&self) -> usize {
        self.t
    }

    pub fn n_features(&self) -> usize {
        self.f
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, r: usize, t: usize, f: usize) -> usize {
        (r * self.t + t) * self.f + f
    }

    #[inline]
    pub fn at(&self, r: usize, t: usize, f: usize) -> f64 {
        self.data[self.idx(r, t, f)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, t: usize, f: usize, v: f64) {
        let i = self.idx(r, t, f);
        self.data[i] = v;
    }

    /// Values of one feature across all sensors and steps in `range`.
    pub fn feature_values(&self, f: usize, range: Range<usize>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.r * range.len());
        for r in 0..self.r {
            for t in range.clone() {
                out.push(self.at(r, t, f));
            }
        }
        out
    }

    /// Copy of the steps in `range`, keeping the normalization metadata.
    pub fn slice_time(&self, range: Range<usize>) -> Result<StTensor> {
        if range.end > self.t || range.start > range.end {
            return Err(Error::InvalidArgument(format!("time range {:?} outside 0..{}", range, self.t)));
        }
        let mut data = Vec::with_capacity(self.r * range.len() * self.f);
        for r in 0..self.r {
            data.extend_from_slice(&self.data[self.idx(r, range.start, 0)..self.idx(r, range.start, 0) + range.len() * self.f]);
        }
        let mut out = StTensor::new(self.r, range.len(), self.f, data)?;
        out.norm = self.norm.clone();
        Ok(out)
    }
}
