use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::{RawSeries, StTensor};
use crate::error::{Error, Result};
use crate::graph::DistanceEdge;

/// Column names used to read a readings file.
#[derive(Clone, Debug)]
pub struct ColumnSchema {
    pub sensor: String,
    pub timestamp: String,
    /// Feature columns; empty means every remaining column.
    pub features: Vec<String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            sensor: "sensor_id".into(),
            timestamp: "timestamp".into(),
            features: Vec::new(),
        }
    }
}

pub fn load_readings(path: &Path, schema: &ColumnSchema) -> Result<RawSeries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_readings(&text, schema)
}

/// Parses `sensor_id,timestamp,<feature...>` rows. Empty or unparseable
/// feature cells become missing markers; a repeated (sensor, timestamp) row
/// overwrites the earlier one.
pub fn parse_readings(text: &str, schema: &ColumnSchema) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(_) => return Err(Error::Data("zero sensors".into())),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Data("zero sensors".into()));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column {name} not found")))
    };
    let sensor_col = col(&schema.sensor)?;
    let time_col = col(&schema.timestamp)?;
    let feature_names: Vec<String> = if schema.features.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != sensor_col && *i != time_col)
            .map(|(_, h)| h.to_string())
            .collect()
    } else {
        schema.features.clone()
    };
    if feature_names.is_empty() {
        return Err(Error::Data("no feature columns".into()));
    }
    let feature_cols = feature_names.iter().map(|f| col(f)).collect::<Result<Vec<_>>>()?;

    let mut cells: BTreeMap<(String, i64), Vec<f64>> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("row {}: {}", line + 2, e)))?;
        let sensor = record[sensor_col].to_string();
        let ts: i64 = record[time_col]
            .parse()
            .map_err(|_| Error::Data(format!("row {}: bad timestamp {:?}", line + 2, &record[time_col])))?;
        let vals = feature_cols
            .iter()
            .map(|&c| record[c].parse::<f64>().ok().filter(|v| v.is_finite()).unwrap_or(f64::NAN))
            .collect();
        cells.insert((sensor, ts), vals);
    }
    let sensors: BTreeSet<&String> = cells.keys().map(|(s, _)| s).collect();
    if sensors.is_empty() {
        return Err(Error::Data("zero sensors".into()));
    }
    let timestamps: Vec<i64> = cells.keys().map(|(_, t)| *t).collect::<BTreeSet<_>>().into_iter().collect();
    let sensor_ids: Vec<String> = sensors.into_iter().cloned().collect();
    let t_index: HashMap<i64, usize> = timestamps.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let s_index: HashMap<&str, usize> = sensor_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let (n_t, n_f) = (timestamps.len(), feature_names.len());
    let mut values = vec![f64::NAN; sensor_ids.len() * n_t * n_f];
    for ((s, t), vals) in &cells {
        let base = (s_index[s.as_str()] * n_t + t_index[t]) * n_f;
        values[base..base + n_f].copy_from_slice(vals);
    }
    RawSeries::new(sensor_ids, timestamps, values, feature_names)
}

/// Inverse of [`parse_readings`] for a dense tensor: one row per (sensor,
/// timestamp), values in shortest round-trip form.
pub fn format_readings(x: &StTensor, sensor_ids: &[String], timestamps: &[i64], feature_names: &[String]) -> Result<String> {
    let (r, t, f) = (x.n_nodes(), x.n_steps(), x.n_features());
    if sensor_ids.len() != r || timestamps.len() != t || feature_names.len() != f {
        return Err(Error::InvalidArgument(format!(
            "labels ({}, {}, {}) do not match tensor dims ({r}, {t}, {f})",
            sensor_ids.len(),
            timestamps.len(),
            feature_names.len()
        )));
    }
    let mut out = format!("sensor_id,timestamp,{}\n", feature_names.join(","));
    for (node, id) in sensor_ids.iter().enumerate() {
        for (step, ts) in timestamps.iter().enumerate() {
            let _ = write!(out, "{id},{ts}");
            for k in 0..f {
                let _ = write!(out, ",{}", x.at(node, step, k));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Reads `src,dst,distance` rows, resolving sensor ids against `sensor_ids`.
pub fn load_edges(path: &Path, sensor_ids: &[String]) -> Result<Vec<DistanceEdge>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edges(&text, sensor_ids)
}

pub fn parse_edges(text: &str, sensor_ids: &[String]) -> Result<Vec<DistanceEdge>> {
    let index: HashMap<&str, usize> = sensor_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut edges = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("edge row {}: {}", line + 2, e)))?;
        if record.len() != 3 {
            return Err(Error::Data(format!("edge row {}: expected src,dst,distance", line + 2)));
        }
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Data(format!("edge row {}: unknown sensor {s}", line + 2)))
        };
        let distance: f64 = record[2]
            .parse()
            .map_err(|_| Error::Data(format!("edge row {}: bad distance", line + 2)))?;
        edges.push(DistanceEdge {
            src: lookup(&record[0])?,
            dst: lookup(&record[1])?,
            distance,
        });
    }
    Ok(edges)
}
