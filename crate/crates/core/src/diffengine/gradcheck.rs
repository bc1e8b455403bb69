//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{ConvMode, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Coordinates whose ±eps probes straddle a relu/abs kink; excluded from the maximum.
    pub kink_flagged: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn kink_proximity(&self) -> bool {
        self.kink_flagged > 0
    }
}

/// Relative error with a small floor so that two near-zero values compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` records a scalar function of the given leaves onto a fresh tape.
/// At most `max_coords` coordinates per input are probed (evenly strided).
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, max_coords: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item(), tape.kink_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[k]).unwrap_or(&zero);
        let step = (n / max_coords.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let orig = input.data()[j];
            probe[k].data_mut()[j] = orig + eps;
            let (fp, sp) = eval(&probe)?;
            probe[k].data_mut()[j] = orig - eps;
            let (fm, sm) = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            if sp != sm {
                report.kink_flagged += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((k, j));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Input distribution for a registered op.
#[derive(Clone, Copy)]
enum Domain {
    Signed,
    Positive,
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

struct OpSpec {
    name: &'static str,
    inputs: &'static [&'static [usize]],
    domain: Domain,
    f: OpFn,
}

/// Result of checking one registered op over several random points.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub points: usize,
    /// Worst report over all points.
    pub report: GradCheckReport,
}

/// Reduces `y` to a scalar with fixed, uneven weights so every output
/// coordinate carries a distinct upstream gradient.
fn probe_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).numel();
    let w = (0..n).map(|i| 0.5 + ((i * 7) % 11) as f64 / 10.0).collect();
    let z = t.mul_const(y, w)?;
    t.sum(z)
}

macro_rules! op {
    ($name:expr, [$($shape:expr),*], $domain:expr, |$t:ident, $v:ident| $body:expr) => {
        OpSpec {
            name: $name,
            inputs: &[$(&$shape),*],
            domain: $domain,
            f: |$t: &mut Tape, $v: &[Var]| -> Result<Var> {
                let y = $body;
                probe_sum($t, y)
            },
        }
    };
}

fn registry() -> Vec<OpSpec> {
    use Domain::*;
    vec![
        op!("add", [[3, 4], [3, 4]], Signed, |t, v| t.add(v[0], v[1])?),
        op!("sub", [[3, 4], [3, 4]], Signed, |t, v| t.sub(v[0], v[1])?),
        op!("mul", [[3, 4], [3, 4]], Signed, |t, v| t.mul(v[0], v[1])?),
        op!("scale", [[5]], Signed, |t, v| t.scale(v[0], -1.7)?),
        op!("add_bias", [[2, 3, 4], [4]], Signed, |t, v| t.add_bias(v[0], v[1])?),
        op!("linear", [[2, 3, 4], [5, 4]], Signed, |t, v| t.linear(v[0], v[1])?),
        op!("matmul", [[3, 4], [4, 2]], Signed, |t, v| t.matmul(v[0], v[1])?),
        op!("transpose", [[3, 4]], Signed, |t, v| t.transpose(v[0])?),
        op!("mix_axis", [[3, 3], [2, 3, 4]], Signed, |t, v| t.mix_axis(v[0], v[1], 1)?),
        op!("relu", [[8]], Signed, |t, v| t.relu(v[0])?),
        op!("tanh", [[8]], Signed, |t, v| t.tanh(v[0])?),
        op!("sigmoid", [[8]], Signed, |t, v| t.sigmoid(v[0])?),
        op!("sqrt", [[8]], Positive, |t, v| t.sqrt(v[0])?),
        op!("mul_const", [[6]], Signed, |t, v| t.mul_const(v[0], vec![2.0, 0.0, -1.0, 0.5, 3.0, 1.0])?),
        op!("conv1d_causal", [[2, 7, 2], [2, 2, 3]], Signed, |t, v| t.conv1d(v[0], v[1], 2, ConvMode::Causal)?),
        op!("conv1d_valid", [[2, 7, 2], [3, 2, 3]], Signed, |t, v| t.conv1d(v[0], v[1], 1, ConvMode::Valid)?),
        op!("depthwise_conv", [[2, 6, 3], [3, 3]], Signed, |t, v| t.depthwise_conv(v[0], v[1], 2, ConvMode::Causal)?),
        op!("depthwise_conv_shared", [[2, 6, 3], [1, 3]], Signed, |t, v| t.depthwise_conv(v[0], v[1], 1, ConvMode::Valid)?),
        op!("concat", [[2, 3], [2, 2]], Signed, |t, v| t.concat(&[v[0], v[1]], 1)?),
        op!("slice", [[3, 5]], Signed, |t, v| t.slice(v[0], 1, 1, 3)?),
        op!("pad", [[2, 3]], Signed, |t, v| t.pad(v[0], 1, 2, 1)?),
        op!("index_select", [[4, 3]], Signed, |t, v| t.index_select(v[0], 0, &[2, 0, 2])?),
        op!("reshape", [[2, 6]], Signed, |t, v| t.reshape(v[0], &[3, 4])?),
        op!("layer_norm", [[3, 5]], Signed, |t, v| t.layer_norm(v[0], 1e-5)?),
        op!("batch_norm_train", [[6, 3]], Signed, |t, v| t.batch_norm_train(v[0], 1e-5)?.0),
        op!("channel_affine", [[4, 3]], Signed, |t, v| t.channel_affine(v[0], &[0.1, -0.2, 0.3], &[2.0, 0.5, -1.0])?),
        op!("sym_normalize", [[4, 4]], Positive, |t, v| t.sym_normalize(v[0])?),
        op!("sum", [[3, 2]], Signed, |t, v| t.sum(v[0])?),
        op!("mean", [[3, 2]], Signed, |t, v| t.mean(v[0])?),
        op!("sum_squares", [[3, 2]], Signed, |t, v| t.sum_squares(v[0])?),
        op!("l2_norm", [[5]], Signed, |t, v| t.l2_norm(v[0])?),
        op!("frobenius_norm", [[3, 3]], Signed, |t, v| t.frobenius_norm(v[0])?),
        op!("l1_loss", [[2, 4]], Signed, |t, v| t.l1_loss(v[0], &Tensor::full(&[2, 4], 0.1))?),
    ]
}

/// Names of every op covered by [`check_registered_ops`].
pub fn registered_ops() -> Vec<&'static str> {
    registry().iter().map(|o| o.name).collect()
}

/// Gradient-checks every registered op at `points` random inputs each.
pub fn check_registered_ops(points: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for spec in registry() {
        let mut worst = GradCheckReport::default();
        for _ in 0..points {
            let inputs: Vec<Tensor> = spec
                .inputs
                .iter()
                .map(|shape| {
                    let n = shape.iter().product();
                    let data = (0..n)
                        .map(|_| match spec.domain {
                            Domain::Signed => rng.gen_range(-1.0..1.0),
                            Domain::Positive => rng.gen_range(0.2..2.0),
                        })
                        .collect();
                    Tensor::new(shape, data)
                })
                .collect::<Result<_>>()?;
            let r = grad_check(spec.f, &inputs, 1e-6, usize::MAX)?;
            let kinks = worst.kink_flagged + r.kink_flagged;
            let checked = worst.checked + r.checked;
            if r.max_rel_error >= worst.max_rel_error {
                worst = r;
            }
            worst.kink_flagged = kinks;
            worst.checked = checked;
        }
        out.push(OpCheck {
            name: spec.name,
            points,
            report: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.25, 0.0, -0.75]).unwrap();
        let x = Tensor::new(&[4, 3], (0..12).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1])?;
                t.sum(y)
            },
            &[x, w],
            1e-3,
            usize::MAX,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.kink_flagged, 0);
    }

    #[test]
    fn tanh_composition_within_tolerance() {
        let x = Tensor::new(&[5], vec![-1.2, -0.3, 0.1, 0.7, 1.5]).unwrap();
        let r = grad_check(
            |t, v| {
                let a = t.tanh(v[0])?;
                let b = t.mul(a, v[0])?;
                let c = t.tanh(b)?;
                t.sum(c)
            },
            &[x],
            1e-3,
            usize::MAX,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn relu_at_zero_is_flagged_not_failed() {
        let x = Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0])?;
                t.sum(y)
            },
            &[x],
            1e-3,
            usize::MAX,
        )
        .unwrap();
        assert!(r.kink_proximity());
        assert_eq!(r.kink_flagged, 1);
        assert!(r.passes(1e-4));
    }

    #[test]
    fn registered_ops_pass() {
        let checks = check_registered_ops(3, 0).unwrap();
        assert_eq!(checks.len(), registered_ops().len());
        for c in checks {
            assert!(c.report.checked > 0, "{}", c.name);
            assert!(c.report.passes(1e-4), "{}: {:?}", c.name, c.report);
        }
    }
}
