//! Controlled distribution shifts, shift measurement and the adaptation
//! benchmark harness.

mod bench;

pub use bench::{prompt_mlp_multiplies, run_bench, ArmKind, ArmRecord, BaselineRecord, BenchConfig, BenchReport, RatioRow, ShiftTask};

use std::f64::consts::PI;
use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::BackboneModel;
use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::graph::{Edge, SensorGraph};
use crate::pipeline::Composite;
use crate::prompt::PromptNet;
use crate::stdata::{window_samples, StTensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphKind {
    /// Each node linked both ways to its two ring neighbours.
    Ring,
    /// Uniform points in the unit square, linked when closer than `radius`.
    Geometric { radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub r: usize,
    pub t: usize,
    pub f: usize,
    pub period: usize,
    /// Per-node amplitudes; drawn from `[0.5, 1.5)` when `None`.
    pub amplitudes: Option<Vec<f64>>,
    /// Per-node phases; drawn from `[0, 2π)` when `None`.
    pub phases: Option<Vec<f64>>,
    pub noise_std: f64,
    pub coupling: f64,
    pub graph: GraphKind,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(r: usize, t: usize, seed: u64) -> Self {
        SyntheticSpec {
            r,
            t,
            f: 1,
            period: 24,
            amplitudes: None,
            phases: None,
            noise_std: 0.05,
            coupling: 0.3,
            graph: GraphKind::Ring,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::Config(format!("period {} must be >= 2", self.period)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise std must be >= 0".into()));
        }
        if self.r == 0 || self.t == 0 || self.f == 0 {
            return Err(Error::Config("synthetic dims must be >= 1".into()));
        }
        for (name, v) in [("amplitudes", &self.amplitudes), ("phases", &self.phases)] {
            if v.as_ref().is_some_and(|v| v.len() != self.r) {
                return Err(Error::Config(format!("{name} must have one entry per node")));
            }
        }
        Ok(())
    }
}

/// Sinusoidal node signals `a_r·sin(2π(f+1)t/P + φ_r)` plus `coupling` times
/// the neighbour mean of the clean signals, plus Gaussian noise.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(StTensor, SensorGraph)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let amps = match &spec.amplitudes {
        Some(a) => a.clone(),
        None => (0..spec.r).map(|_| rng.gen_range(0.5..1.5)).collect(),
    };
    let phases = match &spec.phases {
        Some(p) => p.clone(),
        None => (0..spec.r).map(|_| rng.gen_range(0.0..2.0 * PI)).collect(),
    };
    let graph = build_graph(spec, &mut rng)?;
    let (r, t, f) = (spec.r, spec.t, spec.f);
    let mut clean = vec![0.0; r * t * f];
    for node in 0..r {
        for step in 0..t {
            for k in 0..f {
                let w = 2.0 * PI * (k + 1) as f64 * step as f64 / spec.period as f64;
                clean[(node * t + step) * f + k] = amps[node] * (w + phases[node]).sin();
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = clean.clone();
    for node in 0..r {
        let nbrs: Vec<usize> = graph.neighbors(node).collect();
        for step in 0..t {
            for k in 0..f {
                let i = (node * t + step) * f + k;
                if spec.coupling != 0.0 && !nbrs.is_empty() {
                    let m = nbrs.iter().map(|&j| clean[(j * t + step) * f + k]).sum::<f64>() / nbrs.len() as f64;
                    data[i] += spec.coupling * m;
                }
                if spec.noise_std > 0.0 {
                    data[i] += noise.sample(&mut rng);
                }
            }
        }
    }
    Ok((StTensor::new(r, t, f, data)?, graph))
}

fn build_graph(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<SensorGraph> {
    let n = spec.r;
    let mut edges = Vec::new();
    match spec.graph {
        GraphKind::Ring => {
            if n == 2 {
                edges.push(Edge { src: 0, dst: 1, weight: 1.0 });
                edges.push(Edge { src: 1, dst: 0, weight: 1.0 });
            } else if n > 2 {
                for i in 0..n {
                    let j = (i + 1) % n;
                    edges.push(Edge { src: i, dst: j, weight: 1.0 });
                    edges.push(Edge { src: j, dst: i, weight: 1.0 });
                }
            }
        }
        GraphKind::Geometric { radius } => {
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
            for i in 0..n {
                for j in 0..n {
                    let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                    if i != j && d < radius {
                        edges.push(Edge { src: i, dst: j, weight: 1.0 });
                    }
                }
            }
        }
    }
    SensorGraph::from_edges(n, edges)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShiftKind {
    PhaseLag(usize),
    Amplitude(f64),
    Mixed { lag: usize, alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    /// Steps the shift applies to; the whole series when `None`.
    pub range: Option<Range<usize>>,
}

impl ShiftSpec {
    pub fn lag(delta: usize) -> Self {
        ShiftSpec {
            kind: ShiftKind::PhaseLag(delta),
            range: None,
        }
    }

    pub fn amplitude(alpha: f64) -> Self {
        ShiftSpec {
            kind: ShiftKind::Amplitude(alpha),
            range: None,
        }
    }
}

/// `x'(t) = x(t − Δ)` (steps before the range start read its first value)
/// and/or `x' = αx`, inside the shift range.
pub fn apply_shift(x: &StTensor, shift: &ShiftSpec) -> Result<StTensor> {
    let t = x.n_steps();
    let range = shift.range.clone().unwrap_or(0..t);
    if range.end > t || range.start > range.end {
        return Err(Error::InvalidArgument(format!("shift range {range:?} outside 0..{t}")));
    }
    let (lag, alpha) = match shift.kind {
        ShiftKind::PhaseLag(d) => (d, 1.0),
        ShiftKind::Amplitude(a) => (0, a),
        ShiftKind::Mixed { lag, alpha } => (lag, alpha),
    };
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("amplitude factor {alpha} must be > 0")));
    }
    let mut out = x.clone();
    for r in 0..x.n_nodes() {
        for step in range.clone() {
            let src = if step >= range.start + lag { step - lag } else { range.start };
            for f in 0..x.n_features() {
                out.set(r, step, f, alpha * x.at(r, src, f));
            }
        }
    }
    Ok(out)
}

/// Empirical 1-Wasserstein distance on the line: mean gap between sorted
/// samples. Unequal counts are resampled onto a common quantile grid.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("W1 needs non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wasserstein1_1d input"));
    }
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (sa, sb) = (sorted(a), sorted(b));
    if sa.len() == sb.len() {
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64);
    }
    let n = sa.len().max(sb.len());
    let q = |s: &[f64], i: usize| s[((i as f64 + 0.5) / n as f64 * s.len() as f64) as usize];
    Ok((0..n).map(|i| (q(&sa, i) - q(&sb, i)).abs()).sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzEstimate {
    /// Largest observed ratio; a lower bound on the true constant.
    pub value: f64,
    pub pair: Option<(usize, usize)>,
    pub skipped: usize,
}

/// `max ‖f(x) − f(x')‖ / ‖x − x'‖` over probe pairs: every pair when
/// `n_pairs` covers them all, else a seeded random subset.
pub fn estimate_lipschitz<F>(f: F, probes: &[Tensor], n_pairs: usize, seed: u64) -> Result<LipschitzEstimate>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let outs = probes.iter().map(&f).collect::<Result<Vec<_>>>()?;
    let n = probes.len();
    let total = n * n.saturating_sub(1) / 2;
    let mut pairs = Vec::new();
    if n_pairs >= total {
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in sample(&mut rng, total, n_pairs) {
            pairs.push(unrank_pair(k, n));
        }
    }
    let dist = |a: &Tensor, b: &Tensor| -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let mut est = LipschitzEstimate {
        value: 0.0,
        pair: None,
        skipped: 0,
    };
    for (i, j) in pairs {
        let dx = dist(&probes[i], &probes[j]);
        if dx == 0.0 {
            est.skipped += 1;
            continue;
        }
        let ratio = dist(&outs[i], &outs[j]) / dx;
        if ratio > est.value || est.pair.is_none() {
            est.value = ratio;
            est.pair = Some((i, j));
        }
    }
    Ok(est)
}

fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
    }
    unreachable!("pair rank out of range")
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRecord {
    /// Mean per-feature W1 between the two input marginals.
    pub epsilon: f64,
    pub lip_g: f64,
    pub lip_h: f64,
    /// Mean RMS difference between `g(h(X_tun))` and `g(X_pre)` over paired windows.
    pub gap: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Compares the frozen model on pre-shift windows with the prompted model on
/// shifted windows. The inequality check is a diagnostic only.
pub fn stability_probe(
    frozen: &BackboneModel,
    prompt: &PromptNet,
    pre: (&StTensor, Range<usize>),
    tun: (&StTensor, Range<usize>),
    max_windows: usize,
) -> Result<StabilityRecord> {
    let (l_in, l_out) = (frozen.cfg.history, frozen.cfg.horizon);
    let f = pre.0.n_features();
    let mut eps = 0.0;
    for k in 0..f {
        eps += wasserstein1_1d(&pre.0.feature_values(k, pre.1.clone()), &tun.0.feature_values(k, tun.1.clone()))?;
    }
    let epsilon = eps / f as f64;

    let ws_pre = window_samples(pre.1.clone(), l_in, l_out, 1)?;
    let ws_tun = window_samples(tun.1.clone(), l_in, l_out, 1)?;
    let n = ws_pre.len().min(ws_tun.len()).min(max_windows.max(2));
    if n == 0 {
        return Err(Error::Data("stability probe needs at least one window per range".into()));
    }
    let xp = ws_pre.batch(pre.0, pre.0, &ws_pre.origins[..n])?.inputs;
    let xt = ws_tun.batch(tun.0, tun.0, &ws_tun.origins[..n])?.inputs;

    let g = Composite::new(frozen, None)?;
    let gh = Composite::new(frozen, Some(prompt))?;
    let yp = g.predict(&xp)?;
    let yt = gh.predict(&xt)?;
    let per = yp.numel() / n;
    let gap = yp
        .data()
        .chunks(per)
        .zip(yt.data().chunks(per))
        .map(|(a, b)| (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / per as f64).sqrt())
        .sum::<f64>()
        / n as f64;

    let split = |x: &Tensor| -> Result<Vec<Tensor>> {
        let s = x.shape();
        let inner: usize = s[1..].iter().product();
        x.data()
            .chunks(inner)
            .map(|c| Tensor::new(&[1, s[1], s[2], s[3]], c.to_vec()))
            .collect()
    };
    let mut probes = split(&xp)?;
    probes.extend(split(&xt)?);
    let pairs = 64;
    let lip_g = estimate_lipschitz(|x| g.predict(x), &probes, pairs, 1)?.value;
    let lip_h = estimate_lipschitz(|x| prompt.apply(x), &probes, pairs, 2)?.value;
    let bound = lip_g * lip_h * epsilon;
    Ok(StabilityRecord {
        epsilon,
        lip_g,
        lip_h,
        gap,
        bound,
        holds: gap <= bound,
    })
}
