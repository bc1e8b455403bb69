//! Graph-learning spatio-temporal forecaster: learned directed adjacency,
//! mix-hop propagation, gated dilated-inception convolutions and skip
//! aggregation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffengine::tape::sym_normalize_raw;
use crate::diffengine::{grad_check, inception_receptive_field, BoundParams, GradCheckReport, ConvMode, FrozenFilter, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::topk_mask;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub n_nodes: usize,
    pub in_features: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub d_skip: usize,
    pub layers: usize,
    pub mixhop_depth: usize,
    pub retain: f64,
    pub kernels: Vec<usize>,
    pub saturation: f64,
    pub topk: usize,
    pub lambda: f64,
    pub mu: f64,
    pub horizon: usize,
    pub history: usize,
}

impl BackboneConfig {
    pub fn new(n_nodes: usize) -> Self {
        BackboneConfig {
            n_nodes,
            in_features: 1,
            d_embed: 16,
            d_hidden: 32,
            d_skip: 32,
            layers: 3,
            mixhop_depth: 2,
            retain: 0.05,
            kernels: vec![2, 3, 6, 7],
            saturation: 3.0,
            topk: n_nodes.min(20),
            lambda: 1e-4,
            mu: 1e-4,
            horizon: 12,
            history: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_nodes == 0 || self.in_features == 0 || self.d_hidden == 0 || self.d_embed == 0 || self.d_skip == 0 {
            return bad("node count, feature count and widths must be >= 1".into());
        }
        if self.topk == 0 || self.topk > self.n_nodes {
            return bad(format!("topk {} must lie in 1..={}", self.topk, self.n_nodes));
        }
        if !(0.0..=1.0).contains(&self.retain) {
            return bad(format!("retain ratio {} outside [0, 1]", self.retain));
        }
        if self.kernels.is_empty() || self.kernels.contains(&0) {
            return bad("kernel set must be non-empty with positive sizes".into());
        }
        if self.kernels.len() > self.d_hidden {
            return bad("more inception branches than hidden channels".into());
        }
        if !(self.saturation > 0.0) {
            return bad("saturation must be > 0".into());
        }
        if self.layers == 0 || self.horizon == 0 || self.history == 0 {
            return bad("layers, horizon and history must be >= 1".into());
        }
        Ok(())
    }

    /// Receptive field of the inception stack, `1 + max(S)·(2^L - 1)`.
    pub fn receptive_field(&self) -> usize {
        inception_receptive_field(*self.kernels.iter().max().unwrap_or(&1), self.layers)
    }

    /// Internal sequence length: the history, left-padded up to the receptive field.
    pub fn model_len(&self) -> usize {
        self.history.max(self.receptive_field())
    }

    /// Output channels per inception branch; the remainder goes to the smallest kernels.
    pub fn branch_channels(&self) -> Vec<(usize, usize)> {
        let mut kernels = self.kernels.clone();
        kernels.sort_unstable();
        let n = kernels.len();
        let base = self.d_hidden / n;
        let extra = self.d_hidden % n;
        kernels
            .into_iter()
            .enumerate()
            .map(|(i, k)| (k, base + usize::from(i < extra)))
            .collect()
    }
}

/// Options for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Precomputed normalized adjacency (valid when graph parameters are frozen).
    pub adjacency: Option<&'a Tensor>,
    /// Restrict graph operations to these nodes; the input must hold exactly them.
    pub nodes: Option<&'a [usize]>,
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub prediction: Var,
    /// Learned adjacency after top-k, when it was computed on the tape.
    pub adjacency: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BackboneModel {
    pub cfg: BackboneConfig,
    pub params: ParamStore,
}

fn name(layer: usize, rest: &str) -> String {
    format!("layer{layer}.{rest}")
}

impl BackboneModel {
    /// Wraps stored parameters, which must match the layout `cfg` produces.
    pub fn from_params(cfg: BackboneConfig, params: ParamStore) -> Result<Self> {
        let fresh = BackboneModel::new(cfg, 0)?;
        fresh.params.check_layout(&params)?;
        Ok(BackboneModel { cfg: fresh.cfg, params })
    }

    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new(seed);
        let (r, de, d, f) = (cfg.n_nodes, cfg.d_embed, cfg.d_hidden, cfg.in_features);
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        p.insert_uniform("graph.e1", &[r, de], 1.0, &mut rng)?;
        p.insert_uniform("graph.e2", &[r, de], 1.0, &mut rng)?;
        p.insert_uniform("graph.theta1", &[de, de], inv(de), &mut rng)?;
        p.insert_uniform("graph.theta2", &[de, de], inv(de), &mut rng)?;
        p.insert_uniform("embed.w", &[d, f], inv(f), &mut rng)?;
        p.insert_zeros("embed.b", &[d])?;
        let t_model = cfg.model_len();
        for l in 0..cfg.layers {
            for k in 0..=cfg.mixhop_depth {
                p.insert_uniform(&name(l, &format!("mixhop.w{k}")), &[d, d], inv(d * (cfg.mixhop_depth + 1)), &mut rng)?;
            }
            for gate in ["filter", "gate"] {
                for (s, c) in cfg.branch_channels() {
                    p.insert_uniform(&name(l, &format!("{gate}.k{s}")), &[s, d, c], inv(s * d), &mut rng)?;
                }
                p.insert_zeros(&name(l, &format!("{gate}.b")), &[d])?;
            }
            p.insert_uniform(&name(l, "skip.w"), &[t_model, d, cfg.d_skip], inv(t_model * d), &mut rng)?;
            p.insert_zeros(&name(l, "skip.b"), &[cfg.d_skip])?;
        }
        let out = cfg.horizon * f;
        p.insert_uniform("head.w", &[out, cfg.layers * cfg.d_skip], inv(cfg.layers * cfg.d_skip), &mut rng)?;
        p.insert_zeros("head.b", &[out])?;
        Ok(BackboneModel { cfg, params: p })
    }

    pub fn count_params(&self, filter: FrozenFilter) -> usize {
        self.params.count(filter)
    }

    /// Normalized learned adjacency from the current parameter values.
    pub fn normalized_adjacency(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = |n: &str| self.params.get(n).cloned().expect("graph parameter");
        let e1 = tape.constant(g("graph.e1"));
        let e2 = tape.constant(g("graph.e2"));
        let t1 = tape.constant(g("graph.theta1"));
        let t2 = tape.constant(g("graph.theta2"));
        let (_, a) = learn_graph(&mut tape, e1, e2, t1, t2, self.cfg.saturation, self.cfg.topk)?;
        Ok(sym_normalize_raw(tape.value(a)))
    }

    /// `x: [B, R, L_in, F]` → `[B, R, Q, F]`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var, opts: ForwardOptions) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let shape = tape.value(x).shape().to_vec();
        let n_nodes = opts.nodes.map_or(cfg.n_nodes, |n| n.len());
        if shape.len() != 4 || shape[1] != n_nodes || shape[2] != cfg.history || shape[3] != cfg.in_features {
            return Err(Error::shape(
                "backbone",
                format!(
                    "input {:?}, expected [B, {}, {}, {}]",
                    shape, n_nodes, cfg.history, cfg.in_features
                ),
            ));
        }
        let b = shape[0];
        let d = cfg.d_hidden;

        let (a_norm, adjacency) = match opts.adjacency {
            Some(a) => {
                let a = match opts.nodes {
                    Some(nodes) => sub_matrix(a, nodes),
                    None => a.clone(),
                };
                (tape.constant(a), None)
            }
            None => {
                let mut pick = |n: &str| -> Result<Var> {
                    let v = bound.get(n);
                    match opts.nodes {
                        Some(nodes) => tape.index_select(v, 0, nodes),
                        None => Ok(v),
                    }
                };
                let e1 = pick("graph.e1")?;
                let e2 = pick("graph.e2")?;
                let k = cfg.topk.min(n_nodes);
                let (_, a) = learn_graph(
                    tape,
                    e1,
                    e2,
                    bound.get("graph.theta1"),
                    bound.get("graph.theta2"),
                    cfg.saturation,
                    k,
                )?;
                (tape.sym_normalize(a)?, Some(a))
            }
        };

        let t_model = cfg.model_len();
        let x = if t_model > cfg.history {
            tape.pad(x, 2, t_model - cfg.history, 0)?
        } else {
            x
        };
        let h = tape.linear(x, bound.get("embed.w"))?;
        let mut h = tape.add_bias(h, bound.get("embed.b"))?;

        let mut skips = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let selectors: Vec<Var> = (0..=cfg.mixhop_depth)
                .map(|k| bound.get(&name(l, &format!("mixhop.w{k}"))))
                .collect();
            let g = mixhop_propagate(tape, h, a_norm, cfg.retain, &selectors)?;
            let g = tape.reshape(g, &[b * n_nodes, t_model, d])?;
            let dilation = 1usize << l;
            let required = inception_receptive_field(*cfg.kernels.iter().max().unwrap(), l + 1);
            let branches = |gate: &str| -> Vec<(usize, Var)> {
                cfg.branch_channels()
                    .into_iter()
                    .map(|(s, _)| (s, bound.get(&name(l, &format!("{gate}.k{s}")))))
                    .collect()
            };
            let filt = dilated_inception(tape, g, &branches("filter"), bound.get(&name(l, "filter.b")), dilation, required)?;
            let gate = dilated_inception(tape, g, &branches("gate"), bound.get(&name(l, "gate.b")), dilation, required)?;
            let z = glu(tape, filt, gate)?;
            let z = tape.reshape(z, &[b, n_nodes, t_model, d])?;
            h = tape.add(z, h)?;

            let flat = tape.reshape(h, &[b * n_nodes, t_model, d])?;
            let s = tape.conv1d(flat, bound.get(&name(l, "skip.w")), 1, ConvMode::Valid)?;
            skips.push(tape.add_bias(s, bound.get(&name(l, "skip.b")))?);
        }
        let s = tape.concat(&skips, 2)?;
        let y = tape.linear(s, bound.get("head.w"))?;
        let y = tape.add_bias(y, bound.get("head.b"))?;
        let prediction = tape.reshape(y, &[b, n_nodes, cfg.horizon, cfg.in_features])?;
        Ok(ForwardOutput { prediction, adjacency })
    }
}

fn sub_matrix(a: &Tensor, nodes: &[usize]) -> Tensor {
    let n = a.shape()[0];
    let m = nodes.len();
    let mut out = Vec::with_capacity(m * m);
    for &i in nodes {
        for &j in nodes {
            out.push(a.data()[i * n + j]);
        }
    }
    Tensor::new(&[m, m], out).expect("square")
}

/// Learned directed adjacency. Returns `(pre_topk, post_topk)`:
/// `M₁ = tanh(αE₁Θ₁)`, `M₂ = tanh(αE₂Θ₂)`, `A = ReLU(tanh(α(M₁M₂ᵀ − M₂M₁ᵀ)))`,
/// then the `k` largest entries of each row are kept.
pub fn learn_graph(
    tape: &mut Tape,
    e1: Var,
    e2: Var,
    theta1: Var,
    theta2: Var,
    alpha: f64,
    k: usize,
) -> Result<(Var, Var)> {
    let m1 = tape.matmul(e1, theta1)?;
    let m1 = tape.scale(m1, alpha)?;
    let m1 = tape.tanh(m1)?;
    let m2 = tape.matmul(e2, theta2)?;
    let m2 = tape.scale(m2, alpha)?;
    let m2 = tape.tanh(m2)?;
    let pre = antisymmetric_adjacency(tape, m1, m2, alpha)?;
    let n = tape.value(pre).shape()[1];
    if k >= n {
        return Ok((pre, pre));
    }
    let mask = topk_mask(tape.value(pre), k)?;
    let post = tape.mul_const(pre, mask)?;
    Ok((pre, post))
}

/// `ReLU(tanh(α(M₁M₂ᵀ − M₂M₁ᵀ)))` from already-saturated node factors.
pub fn antisymmetric_adjacency(tape: &mut Tape, m1: Var, m2: Var, alpha: f64) -> Result<Var> {
    let m2t = tape.transpose(m2)?;
    let m1t = tape.transpose(m1)?;
    let p = tape.matmul(m1, m2t)?;
    let q = tape.matmul(m2, m1t)?;
    let diff = tape.sub(p, q)?;
    let diff = tape.scale(diff, alpha)?;
    let a = tape.tanh(diff)?;
    tape.relu(a)
}

/// Mix-hop propagation over `h_in: [B, R, ...]` along the node axis:
/// `H⁽⁰⁾ = H_in`, `H⁽ᵏ⁾ = βH_in + (1−β)ÃH⁽ᵏ⁻¹⁾`, output `Σ_k H⁽ᵏ⁾W⁽ᵏ⁾ + LayerNorm(H_in)`.
pub fn mixhop_propagate(tape: &mut Tape, h_in: Var, a_norm: Var, beta: f64, selectors: &[Var]) -> Result<Var> {
    if selectors.is_empty() {
        return Err(Error::InvalidArgument("mix-hop needs K >= 0 (at least one selector)".into()));
    }
    let retained = tape.scale(h_in, beta)?;
    let mut hk = h_in;
    let mut out = tape.linear(hk, selectors[0])?;
    for &w in &selectors[1..] {
        let spread = tape.mix_axis(a_norm, hk, 1)?;
        let spread = tape.scale(spread, 1.0 - beta)?;
        hk = tape.add(retained, spread)?;
        let term = tape.linear(hk, w)?;
        out = tape.add(out, term)?;
    }
    let norm = tape.layer_norm(h_in, LAYER_NORM_EPS)?;
    tape.add(out, norm)
}

/// Concatenation of causal dilated convolutions with kernel sizes from the
/// branch list, over `z: [N, T, C]`, plus a bias. Errors when `T < required_len`.
pub fn dilated_inception(
    tape: &mut Tape,
    z: Var,
    branches: &[(usize, Var)],
    bias: Var,
    dilation: usize,
    required_len: usize,
) -> Result<Var> {
    let t = tape.value(z).shape().get(1).copied().unwrap_or(0);
    if t < required_len {
        return Err(Error::SequenceTooShort {
            got: t,
            need: required_len,
        });
    }
    let mut outs = Vec::with_capacity(branches.len());
    for &(_, w) in branches {
        outs.push(tape.conv1d(z, w, dilation, ConvMode::Causal)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 2)? };
    tape.add_bias(cat, bias)
}

/// Gated linear unit `tanh(filter) ⊙ σ(gate)`.
pub fn glu(tape: &mut Tape, filter: Var, gate: Var) -> Result<Var> {
    let f = tape.tanh(filter)?;
    let g = tape.sigmoid(gate)?;
    tape.mul(f, g)
}

/// Training objective: masked MAE over the first `horizon` steps,
/// `+ λ‖Θ‖₂ + μ‖A‖_F`.
pub fn pretrain_loss(
    tape: &mut Tape,
    prediction: Var,
    target: &Tensor,
    horizon: usize,
    params: &[Var],
    adjacency: Option<Var>,
    lambda: f64,
    mu: f64,
) -> Result<Var> {
    let q = tape.value(prediction).shape()[2];
    let horizon = horizon.clamp(1, q);
    let (pred, tgt) = if horizon < q {
        let p = tape.slice(prediction, 2, 0, horizon)?;
        (p, slice_horizon(target, horizon)?)
    } else {
        (prediction, target.clone())
    };
    let mut loss = tape.l1_loss(pred, &tgt)?;
    if lambda != 0.0 && !params.is_empty() {
        let mut total = tape.sum_squares(params[0])?;
        for &p in &params[1..] {
            let s = tape.sum_squares(p)?;
            total = tape.add(total, s)?;
        }
        let norm = tape.sqrt(total)?;
        let reg = tape.scale(norm, lambda)?;
        loss = tape.add(loss, reg)?;
    }
    if let (Some(a), true) = (adjacency, mu != 0.0) {
        let fro = tape.frobenius_norm(a)?;
        let reg = tape.scale(fro, mu)?;
        loss = tape.add(loss, reg)?;
    }
    Ok(loss)
}

/// First `horizon` steps of a `[B, R, Q, F]` array.
pub fn slice_horizon(t: &Tensor, horizon: usize) -> Result<Tensor> {
    let s = t.shape();
    let (b, r, q, f) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(b * r * horizon * f);
    for row in 0..b * r {
        out.extend_from_slice(&t.data()[row * q * f..row * q * f + horizon * f]);
    }
    Tensor::new(&[b, r, horizon, f], out)
}

/// Curriculum horizon `⌊Q^{t/T_max}⌋` clamped to `[1, Q]`.
pub fn curriculum_horizon(t: usize, t_max: usize, q: usize) -> usize {
    if q <= 1 {
        return 1;
    }
    if t_max == 0 {
        return q;
    }
    let frac = (t.min(t_max)) as f64 / t_max as f64;
    let v = (q as f64).powf(frac);
    // guard against q^1 evaluating to q - ε
    let v = if (v - v.round()).abs() < 1e-9 { v.round() } else { v.floor() };
    (v as usize).clamp(1, q)
}

/// Seeded split of `0..r` into `m` subsets whose sizes differ by at most one.
pub fn node_partition(r: usize, m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if m == 0 || m > r {
        return Err(Error::InvalidArgument(format!("partition count {m} must lie in 1..={r}")));
    }
    let mut order: Vec<usize> = (0..r).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = r / m;
    let extra = r % m;
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    for i in 0..m {
        let len = base + usize::from(i < extra);
        let mut part = order[start..start + len].to_vec();
        part.sort_unstable();
        out.push(part);
        start += len;
    }
    Ok(out)
}

/// Config of the smallest model used for end-to-end gradient checks
/// (R = 4, d = 8, one layer).
pub fn tiny_check_config() -> BackboneConfig {
    let mut cfg = BackboneConfig::new(4);
    cfg.d_embed = 4;
    cfg.d_hidden = 8;
    cfg.d_skip = 4;
    cfg.layers = 1;
    cfg.kernels = vec![2, 3];
    cfg.topk = 4;
    cfg.horizon = 3;
    cfg.history = 4;
    cfg
}

/// Finite-difference check of the L1 loss of a tiny model with respect to
/// every parameter entry (up to `max_coords` coordinates each).
pub fn end_to_end_grad_check(seed: u64, max_coords: usize) -> Result<Vec<(String, GradCheckReport)>> {
    let model = BackboneModel::new(tiny_check_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let x = rand(&[2, 4, 4, 1])?;
    let y = rand(&[2, 4, 3, 1])?;
    let mut out = Vec::new();
    for entry in model.params.entries() {
        let (name, init) = (entry.name.as_str(), entry.value.clone());
        let report = grad_check(
            |tape, vars| {
                let bound = model.params.bind(tape).with_override(name, vars[0]);
                let xv = tape.constant(x.clone());
                let pred = model.forward(tape, &bound, xv, ForwardOptions::default())?;
                tape.l1_loss(pred.prediction, &y)
            },
            &[init],
            1e-6,
            max_coords,
        )?;
        out.push((name.to_owned(), report));
    }
    Ok(out)
}
