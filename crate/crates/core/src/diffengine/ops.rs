//! Composite ops and layer helpers built on the tape primitives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{FrozenFilter, ParamStore};
use super::tape::{ConvMode, Tape, Var};
use crate::error::{Error, Result};

/// Inverted dropout. Identity when `train` is false or `rate` is 0.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !train || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let mask = (0..tape.value(x).numel())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, mask)
}

/// Per-channel causal dilated convolution, length preserving:
/// `y[r, t, c] = Σ_k w[c, k] · x[r, t - k·δ, c]` with zeros before the start.
pub fn causal_dilated_conv1d(tape: &mut Tape, x: Var, w: Var, dilation: usize) -> Result<Var> {
    tape.depthwise_conv(x, w, dilation, ConvMode::Causal)
}

/// Number of past steps that can influence one output of a stack of causal
/// convolutions with kernel `k` and the given dilations.
pub fn receptive_field(k: usize, dilations: &[usize]) -> usize {
    1 + dilations.iter().map(|d| (k.saturating_sub(1)) * d).sum::<usize>()
}

/// Receptive field of `layers` dilated-inception layers with dilation `2^l`
/// and largest kernel `max_kernel`: `1 + max_kernel · (2^layers - 1)`.
pub fn inception_receptive_field(max_kernel: usize, layers: usize) -> usize {
    1 + max_kernel * ((1usize << layers) - 1)
}

/// Exact count of scalars in `store` selected by `filter`.
pub fn count_params(store: &ParamStore, filter: FrozenFilter) -> usize {
    store.count(filter)
}

/// 1-D batch normalization over rows of a `[M, C]` input, with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        if train {
            let (y, mean, var) = tape.batch_norm_train(x, self.eps)?;
            let m = self.momentum;
            for j in 0..self.running_mean.len() {
                self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
                self.running_var[j] = (1.0 - m) * self.running_var[j] + m * var[j];
            }
            Ok(y)
        } else {
            let scale: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            tape.channel_affine(x, &self.running_mean, &scale)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::Tensor;
    use rand::SeedableRng;

    #[test]
    fn relu_sign_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        for dilation in [1, 2, 5] {
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(&[1, 4, 1], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
            let w = t.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
            let y = causal_dilated_conv1d(&mut t, x, w, dilation).unwrap();
            assert_eq!(t.value(y).data(), t.value(x).data());
        }
    }

    #[test]
    fn two_tap_causal_conv_matches_direct_sum() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let w = t.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let y = causal_dilated_conv1d(&mut t, x, w, 1).unwrap();
        // direct: y_t = x_t + x_{t-1}, x_{-1} = 0
        assert_eq!(t.value(y).data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(2, &[1, 2, 4]), 8);
        assert_eq!(receptive_field(1, &[1, 2, 4, 8]), 1);
        assert_eq!(inception_receptive_field(7, 2), 22);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[100], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = dropout(&mut t, x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y, x);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = dropout(&mut t, x, 0.3, true, &mut r1).unwrap();
        let b = dropout(&mut t, x, 0.3, true, &mut r2).unwrap();
        assert_eq!(t.value(a), t.value(b));
        assert!(dropout(&mut t, x, 1.0, true, &mut r1).is_err());
    }

    #[test]
    fn dropout_keep_fraction_within_three_sigma() {
        let n = 10_000;
        let rate = 0.1;
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[n], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = dropout(&mut t, x, rate, true, &mut rng).unwrap();
        let kept = t.value(y).data().iter().filter(|&&v| v != 0.0).count() as f64;
        let p = 1.0 - rate;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((kept - n as f64 * p).abs() < 3.0 * sigma, "kept {kept}");
        // inverted scaling
        assert!((t.value(y).data().iter().find(|&&v| v != 0.0).unwrap() - 1.0 / p).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut bn = BatchNorm1d::new(2);
        let data = Tensor::new(&[4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let mut t = Tape::new();
        let x = t.constant(data.clone());
        let y = bn.forward(&mut t, x, true).unwrap();
        let col0: Vec<f64> = t.value(y).data().iter().step_by(2).copied().collect();
        assert!(col0.iter().sum::<f64>().abs() < 1e-12);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        let e1 = bn.forward(&mut t, x, false).unwrap();
        let e2 = bn.forward(&mut t, x, false).unwrap();
        assert_eq!(t.value(e1), t.value(e2));
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
    }
}
