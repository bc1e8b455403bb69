//! Residual temporal prompt: a small TCN plus affine layers that emits an
//! additive edit to the backbone input, leaving its shape unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffengine::ops::dropout;
use crate::diffengine::{BoundParams, ConvMode, FrozenFilter, Optimizer, OptimizerKind, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PromptConfig {
    pub d_hidden: usize,
    /// Pointwise lift plus one valid temporal convolution.
    pub tcn_layers: usize,
    /// Time-axis map plus output projection.
    pub mlp_layers: usize,
    pub kernel: usize,
    pub dropout_rate: f64,
    pub zero_init_output: bool,
    /// Input window length.
    pub t_tun: usize,
    pub in_features: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            d_hidden: 32,
            tcn_layers: 2,
            mlp_layers: 2,
            kernel: 7,
            dropout_rate: 0.1,
            zero_init_output: true,
            t_tun: 12,
            in_features: 1,
        }
    }
}

impl PromptConfig {
    /// Length after the valid convolution.
    pub fn t_compressed(&self) -> usize {
        (self.t_tun + 1).saturating_sub(self.kernel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.d_hidden == 0 || self.in_features == 0 {
            return Err(Error::Config("prompt kernel, width and features must be >= 1".into()));
        }
        if self.t_compressed() == 0 {
            return Err(Error::Config(format!(
                "prompt kernel {} leaves no steps of a {}-step window",
                self.kernel, self.t_tun
            )));
        }
        if self.tcn_layers != 2 || self.mlp_layers != 2 {
            return Err(Error::Config("the prompt network has exactly 2 TCN and 2 affine layers".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PromptNet {
    pub cfg: PromptConfig,
    pub params: ParamStore,
}

impl PromptNet {
    /// Wraps stored parameters, which must match the layout `cfg` produces.
    pub fn from_params(cfg: PromptConfig, params: ParamStore) -> Result<Self> {
        let fresh = PromptNet::new(cfg, 0)?;
        fresh.params.check_layout(&params)?;
        Ok(PromptNet { cfg: fresh.cfg, params })
    }

    pub fn new(cfg: PromptConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, t, tc, k) = (cfg.d_hidden, cfg.in_features, cfg.t_tun, cfg.t_compressed(), cfg.kernel);
        let mut p = ParamStore::new(seed);
        p.insert_uniform("w1", &[d, f], 1.0 / (f as f64).sqrt(), &mut rng)?;
        p.insert_uniform("w2", &[1, k], 1.0 / (k as f64).sqrt(), &mut rng)?;
        p.insert_zeros("b1", &[d])?;
        p.insert_uniform("w3", &[t, tc], 1.0 / (tc as f64).sqrt(), &mut rng)?;
        p.insert_zeros("b2", &[d])?;
        if cfg.zero_init_output {
            p.insert_zeros("w4", &[f, d])?;
        } else {
            p.insert_uniform("w4", &[f, d], 1.0 / (d as f64).sqrt(), &mut rng)?;
        }
        Ok(PromptNet { cfg, params: p })
    }

    pub fn count_params(&self) -> usize {
        self.params.count(FrozenFilter::All)
    }

    /// Eval-mode edit of a constant input.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = prompt_forward(&mut tape, &self.cfg, &bound, xv, false, &mut rng)?;
        Ok(tape.value(out).clone())
    }
}

/// `X: [..., T_tun, F]` → `X̃` of the same shape:
/// `H = W₁X`, `H̃ = ReLU(dropout(W₂ ∗ H + b₁))` (valid conv, `T_tun → T'`),
/// `H̄ = ReLU(W₃H̃ + b₂)` (time map `T' → T_tun`), `X̃ = X + H̄W₄ᵀ`.
pub fn prompt_forward(
    tape: &mut Tape,
    cfg: &PromptConfig,
    bound: &BoundParams,
    x: Var,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let r = shape.len();
    if r < 2 || shape[r - 2] != cfg.t_tun || shape[r - 1] != cfg.in_features {
        return Err(Error::shape(
            "prompt",
            format!("input {:?}, window must be [.., {}, {}]", shape, cfg.t_tun, cfg.in_features),
        ));
    }
    let n: usize = shape[..r - 2].iter().product();
    let flat = tape.reshape(x, &[n, cfg.t_tun, cfg.in_features])?;
    let h = tape.linear(flat, bound.get("w1"))?;
    let c = tape.depthwise_conv(h, bound.get("w2"), 1, ConvMode::Valid)?;
    let c = tape.add_bias(c, bound.get("b1"))?;
    let c = dropout(tape, c, cfg.dropout_rate, train, rng)?;
    let c = tape.relu(c)?;
    let hb = tape.mix_axis(bound.get("w3"), c, 1)?;
    let hb = tape.add_bias(hb, bound.get("b2"))?;
    let hb = tape.relu(hb)?;
    let edit = tape.linear(hb, bound.get("w4"))?;
    let edit = tape.reshape(edit, &shape)?;
    tape.add(x, edit)
}

/// Preliminary editor `X̃ = X + U·ReLU(W·TCN(X) + b)` on `x: [N, T, F]`,
/// with `tcn: [K, F, d]` (causal), `w: [d, d]`, `b: [d]`, `u: [F, d]`.
pub fn simple_editor_forward(tape: &mut Tape, x: Var, tcn: Var, w: Var, b: Var, u: Var) -> Result<Var> {
    let h = tape.conv1d(x, tcn, 1, ConvMode::Causal)?;
    let z = tape.linear(h, w)?;
    let z = tape.add_bias(z, b)?;
    let z = tape.relu(z)?;
    let e = tape.linear(z, u)?;
    tape.add(x, e)
}

/// Relative edit size `‖X̃ − X‖_F / (‖X‖_F + 1e-12)` in eval mode.
pub fn edit_magnitude(net: &PromptNet, x: &Tensor) -> Result<f64> {
    let y = net.apply(x)?;
    let diff: f64 = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / (x.norm() + 1e-12))
}

#[derive(Clone, Debug)]
pub struct ToyFit {
    pub net: PromptNet,
    /// MAE between the identity edit and the reference.
    pub mae_before: f64,
    pub mae_after: f64,
    pub warning: Option<String>,
}

/// Tunes `net` so that windows of the lagged single-node `series` map onto the
/// matching windows of `reference` (same length, unlagged).
pub fn toy_phase_fit(
    mut net: PromptNet,
    series: &[f64],
    reference: &[f64],
    lag: usize,
    steps: usize,
    lr: f64,
) -> Result<ToyFit> {
    let cfg = net.cfg.clone();
    if cfg.in_features != 1 {
        return Err(Error::InvalidArgument("toy fit expects a single feature".into()));
    }
    if series.len() != reference.len() || series.len() < cfg.t_tun {
        return Err(Error::InvalidArgument(format!(
            "series lengths {} / {} must match and cover a {}-step window",
            series.len(),
            reference.len(),
            cfg.t_tun
        )));
    }
    let warning = (lag > cfg.kernel).then(|| {
        let w = format!("lag {lag} exceeds the prompt's receptive span {}", cfg.kernel);
        log::warn!("{w}");
        w
    });
    let t = cfg.t_tun;
    let n = series.len() - t + 1;
    let window = |s: &[f64]| -> Result<Tensor> {
        let mut d = Vec::with_capacity(n * t);
        for i in 0..n {
            d.extend_from_slice(&s[i..i + t]);
        }
        Tensor::new(&[n, t, 1], d)
    };
    let x = window(series)?;
    let y = window(reference)?;
    let mae = |a: &Tensor| a.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.numel() as f64;
    let mae_before = mae(&x);

    let mut opt = Optimizer::new(OptimizerKind::Adam, lr, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(net.params.rng_seed);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let bound = net.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = prompt_forward(&mut tape, &cfg, &bound, xv, false, &mut rng)?;
        let loss = tape.l1_loss(out, &y)?;
        let grads = tape.backward(loss)?;
        opt.step(&mut net.params, &bound, &grads)?;
    }
    let mae_after = mae(&net.apply(&x)?);
    Ok(ToyFit {
        net,
        mae_before,
        mae_after,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneModel};
    use crate::diffengine::grad_check;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let net = PromptNet::new(PromptConfig::default(), 1).unwrap();
        let x = rand_tensor(&[2, 5, 12, 1], 2);
        let y = net.apply(&x).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(edit_magnitude(&net, &x).unwrap(), 0.0);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let cfg = PromptConfig {
            zero_init_output: false,
            ..Default::default()
        };
        let net = PromptNet::new(cfg, 3).unwrap();
        let x = Tensor::zeros(&[3, 12, 1]);
        assert!(net.apply(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_is_preserved() {
        for (t, k, f) in [(12, 7, 1), (8, 3, 2), (5, 5, 3)] {
            let cfg = PromptConfig {
                t_tun: t,
                kernel: k,
                in_features: f,
                zero_init_output: false,
                ..Default::default()
            };
            let net = PromptNet::new(cfg, 4).unwrap();
            let x = rand_tensor(&[2, 3, t, f], 5);
            assert_eq!(net.apply(&x).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn window_mismatch_is_rejected() {
        let net = PromptNet::new(PromptConfig::default(), 1).unwrap();
        assert!(net.apply(&Tensor::zeros(&[2, 10, 1])).is_err());
        let bad = PromptConfig {
            kernel: 13,
            ..Default::default()
        };
        assert!(PromptNet::new(bad, 0).is_err());
    }

    #[test]
    fn hand_evaluated_forward() {
        // R = 1, F = 1, d = 2, T = 4, kernel 3 → T' = 2
        let cfg = PromptConfig {
            d_hidden: 2,
            kernel: 3,
            t_tun: 4,
            dropout_rate: 0.0,
            ..Default::default()
        };
        let mut net = PromptNet::new(cfg.clone(), 0).unwrap();
        let set = |net: &mut PromptNet, n: &str, v: Vec<f64>| {
            let t = net.params.get_mut(n).unwrap();
            t.data_mut().copy_from_slice(&v);
        };
        let w1 = [1.0, -0.5];
        let w2 = [0.2, 0.3, 0.5];
        let b1 = [0.1, 0.0];
        let w3 = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [-1.0, 2.0]];
        let b2 = [0.0, -0.1];
        let w4 = [0.7, -1.1];
        set(&mut net, "w1", w1.to_vec());
        set(&mut net, "w2", w2.to_vec());
        set(&mut net, "b1", b1.to_vec());
        set(&mut net, "w3", w3.iter().flatten().copied().collect());
        set(&mut net, "b2", b2.to_vec());
        set(&mut net, "w4", w4.to_vec());
        let xs = [1.0, 2.0, -1.0, 0.5];
        let out = net.apply(&Tensor::new(&[1, 4, 1], xs.to_vec()).unwrap()).unwrap();

        let h: Vec<[f64; 2]> = xs.iter().map(|&x| [w1[0] * x, w1[1] * x]).collect();
        let mut ht = [[0.0; 2]; 2];
        for (to, row) in ht.iter_mut().enumerate() {
            let t = to + 2;
            for c in 0..2 {
                let v: f64 = (0..3).map(|k| w2[k] * h[t - k][c]).sum::<f64>() + b1[c];
                row[c] = v.max(0.0);
            }
        }
        for t in 0..4 {
            let mut e = 0.0;
            for c in 0..2 {
                let hb = (w3[t][0] * ht[0][c] + w3[t][1] * ht[1][c] + b2[c]).max(0.0);
                e += w4[c] * hb;
            }
            assert!((out.data()[t] - (xs[t] + e)).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_gradients_match_finite_differences() {
        let cfg = PromptConfig {
            d_hidden: 4,
            kernel: 3,
            t_tun: 6,
            zero_init_output: false,
            ..Default::default()
        };
        let net = PromptNet::new(cfg.clone(), 2).unwrap();
        let x = rand_tensor(&[3, 6, 1], 3);
        for name in ["w1", "w2", "b1", "w3", "b2", "w4"] {
            let report = grad_check(
                |tape, v| {
                    let bound = net.params.bind(tape).with_override(name, v[0]);
                    let xv = tape.constant(x.clone());
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let y = prompt_forward(tape, &cfg, &bound, xv, false, &mut rng)?;
                    tape.sum_squares(y)
                },
                &[net.params.get(name).unwrap().clone()],
                1e-6,
                16,
            )
            .unwrap();
            assert!(report.passes(1e-4), "{name}: {report:?}");
        }
    }

    #[test]
    fn budget_against_default_backbone() {
        let prompt = PromptNet::new(PromptConfig::default(), 0).unwrap();
        // shape-sum oracle: w1 d·F, w2 K, b1 d, w3 T·T', b2 d, w4 F·d
        assert_eq!(prompt.count_params(), 32 + 7 + 32 + 12 * 6 + 32 + 32);
        for r in [50, 207, 325] {
            let bb = BackboneModel::new(BackboneConfig::new(r), 0).unwrap();
            let ratio = prompt.count_params() as f64 / bb.count_params(FrozenFilter::All) as f64;
            assert!(ratio <= 0.02, "R = {r}: {ratio}");
        }
    }

    #[test]
    fn gradient_reaches_prompt_through_frozen_backbone() {
        let mut bb = BackboneModel::new(BackboneConfig::new(5), 1).unwrap();
        bb.params.freeze_all();
        let pcfg = PromptConfig {
            zero_init_output: false,
            ..Default::default()
        };
        let prompt = PromptNet::new(pcfg.clone(), 2).unwrap();
        let x = rand_tensor(&[2, 5, 12, 1], 3);
        let y = rand_tensor(&[2, 5, 12, 1], 4);
        let mut tape = Tape::new();
        let gb = bb.params.bind(&mut tape);
        let pb = prompt.params.bind(&mut tape);
        let xv = tape.constant(x);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = prompt_forward(&mut tape, &pcfg, &pb, xv, true, &mut rng).unwrap();
        let out = bb.forward(&mut tape, &gb, xt, Default::default()).unwrap();
        let loss = tape.l1_loss(out.prediction, &y).unwrap();
        let g = tape.backward(loss).unwrap();
        let norm: f64 = pb.vars().iter().filter_map(|&v| g.get(v)).map(|t| t.norm().powi(2)).sum();
        assert!(norm > 0.0);
        assert!(gb.vars().iter().all(|&v| g.get(v).is_none()));
    }

    #[test]
    fn simple_editor_identity_and_hand_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3, 1], vec![1.0, -2.0, 3.0]).unwrap());
        let tcn = tape.constant(Tensor::new(&[2, 1, 1], vec![1.0, 0.5]).unwrap());
        let w = tape.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
        let b = tape.constant(Tensor::new(&[1], vec![0.5]).unwrap());
        let u0 = tape.constant(Tensor::zeros(&[1, 1]));
        let same = simple_editor_forward(&mut tape, x, tcn, w, b, u0).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let u = tape.constant(Tensor::new(&[1, 1], vec![-1.0]).unwrap());
        let out = simple_editor_forward(&mut tape, x, tcn, w, b, u).unwrap();
        // TCN: [1, -2 + 0.5, 3 - 1] = [1, -1.5, 2]; Z = relu(2h + .5) = [2.5, 0, 4.5]
        assert_eq!(tape.value(out).data(), &[1.0 - 2.5, -2.0, 3.0 - 4.5]);
    }

    fn sine(n: usize, period: f64, lag: usize) -> Vec<f64> {
        (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * (t as f64 - lag as f64) / period).sin())
            .collect()
    }

    #[test]
    fn toy_phase_correction() {
        let reference = sine(96, 24.0, 0);
        let lagged = sine(96, 24.0, 2);
        let net = PromptNet::new(PromptConfig::default(), 7).unwrap();
        let fit = toy_phase_fit(net, &lagged, &reference, 2, 300, 0.01).unwrap();
        assert!(fit.warning.is_none());
        assert!(fit.mae_after < 0.5 * fit.mae_before, "{} vs {}", fit.mae_after, fit.mae_before);
    }

    #[test]
    fn toy_zero_lag_stays_near_identity() {
        let s = sine(96, 24.0, 0);
        let net = PromptNet::new(PromptConfig::default(), 7).unwrap();
        let fit = toy_phase_fit(net, &s, &s, 0, 100, 0.01).unwrap();
        let x = Tensor::new(&[1, 12, 1], s[..12].to_vec()).unwrap();
        assert!(edit_magnitude(&fit.net, &x).unwrap() < 0.05);
    }

    #[test]
    fn toy_lag_beyond_span_warns() {
        let s = sine(96, 24.0, 0);
        let l = sine(96, 24.0, 20);
        let net = PromptNet::new(PromptConfig::default(), 7).unwrap();
        let fit = toy_phase_fit(net, &l, &s, 20, 1, 0.01).unwrap();
        assert!(fit.warning.unwrap().contains("exceeds"));
    }
}
