use std::ops::Range;

use super::StTensor;
use crate::diffengine::Tensor;
use crate::error::{Error, Result};

/// Supervised windows stacked along a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBatch {
    /// `[B, R, L_in, F]`
    pub inputs: Tensor,
    /// `[B, R, L_out, F]`
    pub targets: Tensor,
    /// First input step of each window.
    pub origin_times: Vec<usize>,
}

/// Input start indices of every window that fits inside `range`:
/// `⌊(len - L_in - L_out) / stride⌋ + 1` of them.
pub fn window_origins(range: &Range<usize>, l_in: usize, l_out: usize, stride: usize) -> Vec<usize> {
    let span = l_in + l_out;
    if range.len() < span || stride == 0 {
        return Vec::new();
    }
    (range.start..=range.end - span).step_by(stride).collect()
}

/// Windows over one split range, materialized in batches on demand.
#[derive(Clone, Debug)]
pub struct WindowStream {
    pub origins: Vec<usize>,
    pub l_in: usize,
    pub l_out: usize,
    pub warning: Option<String>,
}

pub fn window_samples(range: Range<usize>, l_in: usize, l_out: usize, stride: usize) -> Result<WindowStream> {
    if l_in == 0 || l_out == 0 || stride == 0 {
        return Err(Error::InvalidArgument("L_in, L_out and stride must be > 0".into()));
    }
    let origins = window_origins(&range, l_in, l_out, stride);
    let warning = origins.is_empty().then(|| {
        format!(
            "range {:?} of length {} is shorter than L_in + L_out = {}; no windows",
            range,
            range.len(),
            l_in + l_out
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(WindowStream {
        origins,
        l_in,
        l_out,
        warning,
    })
}

impl WindowStream {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Builds the batch for the given window origins. Inputs are read from
    /// `inputs` and targets from `targets`, which must share shape; they may
    /// be the same tensor.
    pub fn batch(&self, inputs: &StTensor, targets: &StTensor, origins: &[usize]) -> Result<ForecastBatch> {
        gather_batch(inputs, targets, origins, self.l_in, self.l_out)
    }

    /// Consecutive batches of at most `batch_size` windows in stream order.
    pub fn batches<'a>(
        &'a self,
        inputs: &'a StTensor,
        targets: &'a StTensor,
        batch_size: usize,
    ) -> impl Iterator<Item = Result<ForecastBatch>> + 'a {
        self.origins
            .chunks(batch_size.max(1))
            .map(move |chunk| self.batch(inputs, targets, chunk))
    }
}

pub(crate) fn gather_batch(
    inputs: &StTensor,
    targets: &StTensor,
    origins: &[usize],
    l_in: usize,
    l_out: usize,
) -> Result<ForecastBatch> {
    if (inputs.n_nodes(), inputs.n_steps(), inputs.n_features())
        != (targets.n_nodes(), targets.n_steps(), targets.n_features())
    {
        return Err(Error::shape("window", "input and target tensors differ in shape"));
    }
    let (r, t, f) = (inputs.n_nodes(), inputs.n_steps(), inputs.n_features());
    let b = origins.len();
    let mut xin = Vec::with_capacity(b * r * l_in * f);
    let mut yout = Vec::with_capacity(b * r * l_out * f);
    for &o in origins {
        if o + l_in + l_out > t {
            return Err(Error::InvalidArgument(format!("window at {o} runs past step {t}")));
        }
        for node in 0..r {
            let s = inputs.idx(node, o, 0);
            xin.extend_from_slice(&inputs.data()[s..s + l_in * f]);
            let s = targets.idx(node, o + l_in, 0);
            yout.extend_from_slice(&targets.data()[s..s + l_out * f]);
        }
    }
    Ok(ForecastBatch {
        inputs: Tensor::new(&[b, r, l_in, f], xin)?,
        targets: Tensor::new(&[b, r, l_out, f], yout)?,
        origin_times: origins.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_formula() {
        assert_eq!(window_samples(0..24, 12, 12, 1).unwrap().len(), 1);
        assert_eq!(window_samples(0..25, 12, 12, 1).unwrap().len(), 2);
        let short = window_samples(0..23, 12, 12, 1).unwrap();
        assert!(short.is_empty());
        assert!(short.warning.is_some());
        assert_eq!(window_samples(10..40, 3, 2, 4).unwrap().len(), (30 - 5) / 4 + 1);
    }

    #[test]
    fn batch_layout() {
        let data: Vec<f64> = (0..2 * 10).map(f64::from).collect();
        let x = StTensor::new(2, 10, 1, data).unwrap();
        let s = window_samples(0..10, 3, 2, 1).unwrap();
        let b = s.batch(&x, &x, &[4]).unwrap();
        assert_eq!(b.inputs.shape(), &[1, 2, 3, 1]);
        assert_eq!(b.inputs.data(), &[4.0, 5.0, 6.0, 14.0, 15.0, 16.0]);
        assert_eq!(b.targets.data(), &[7.0, 8.0, 17.0, 18.0]);
    }
}
