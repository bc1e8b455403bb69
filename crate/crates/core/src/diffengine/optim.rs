//! First-order parameter updates that never touch frozen entries.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use super::params::{BoundParams, ParamStore};
use super::tape::Grads;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// `θ ← θ − η(g + wd·θ)`.
    Sgd,
    /// Heavy-ball momentum with the given coefficient.
    Momentum(f64),
    /// Adam with the usual bias correction; weight decay is added to the gradient.
    Adam,
}

impl OptimizerKind {
    /// Per-parameter state buffers kept by this update rule.
    pub fn buffers(self) -> usize {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Momentum(_) => 1,
            OptimizerKind::Adam => 2,
        }
    }

    /// State size in bytes for `trainable` scalar parameters (f64 buffers).
    pub fn state_bytes(self, trainable: usize) -> usize {
        self.buffers() * trainable * std::mem::size_of::<f64>()
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd => write!(f, "sgd"),
            OptimizerKind::Momentum(m) => write!(f, "momentum:{m}"),
            OptimizerKind::Adam => write!(f, "adam"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "momentum" => Ok(OptimizerKind::Momentum(0.9)),
            _ => {
                if let Some(m) = s.strip_prefix("momentum:") {
                    let m: f64 = m
                        .parse()
                        .map_err(|_| Error::Config(format!("bad momentum coefficient in {s:?}")))?;
                    if (0.0..1.0).contains(&m) {
                        return Ok(OptimizerKind::Momentum(m));
                    }
                }
                Err(Error::Config(format!("unknown optimizer {s:?} (sgd, momentum[:m], adam)")))
            }
        }
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    state: HashMap<String, Vec<Tensor>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {weight_decay} must be >= 0")));
        }
        Ok(Optimizer {
            kind,
            lr,
            weight_decay,
            state: HashMap::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Bytes currently held in optimizer state.
    pub fn state_bytes(&self) -> usize {
        self.state
            .values()
            .flat_map(|v| v.iter())
            .map(|t| t.numel() * std::mem::size_of::<f64>())
            .sum()
    }

    /// Applies one update to every non-frozen entry using gradients of the
    /// handles in `bound`. A missing gradient on a trainable entry is an error.
    pub fn step(&mut self, store: &mut ParamStore, bound: &BoundParams, grads: &Grads) -> Result<()> {
        let names: Vec<String> = store
            .entries()
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.name.clone())
            .collect();
        let mut updates = Vec::with_capacity(names.len());
        for name in &names {
            let g = grads
                .get(bound.get(name))
                .ok_or_else(|| Error::InvalidArgument(format!("no gradient for trainable parameter {name}")))?;
            if !g.all_finite() {
                return Err(Error::NonFinite("gradient"));
            }
            updates.push(g);
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (name, g) in names.iter().zip(updates) {
            let kind = self.kind;
            let (lr, wd) = (self.lr, self.weight_decay);
            let theta = store.get_mut(name).expect("listed entry");
            let n = theta.numel();
            let state = self
                .state
                .entry(name.clone())
                .or_insert_with(|| vec![Tensor::zeros(g.shape()); kind.buffers()]);
            let th = theta.data_mut();
            let gd = g.data();
            match kind {
                OptimizerKind::Sgd => {
                    for i in 0..n {
                        th[i] -= lr * (gd[i] + wd * th[i]);
                    }
                }
                OptimizerKind::Momentum(m) => {
                    let v = state[0].data_mut();
                    for i in 0..n {
                        v[i] = m * v[i] + gd[i] + wd * th[i];
                        th[i] -= lr * v[i];
                    }
                }
                OptimizerKind::Adam => {
                    let (c1, c2) = (1.0 - ADAM_B1.powi(t), 1.0 - ADAM_B2.powi(t));
                    let (m, rest) = state.split_at_mut(1);
                    let (m, v) = (m[0].data_mut(), rest[0].data_mut());
                    for i in 0..n {
                        let gi = gd[i] + wd * th[i];
                        m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * gi;
                        v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * gi * gi;
                        th[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::Tape;

    fn one_param(value: f64, frozen: bool) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.insert("theta", Tensor::scalar(value)).unwrap();
        if frozen {
            s.freeze_all();
        }
        s
    }

    fn grads_for(store: &ParamStore, slope: f64) -> (BoundParams, Grads) {
        let mut tape = Tape::new();
        let bound = store.bind_all_grad(&mut tape);
        let y = tape.scale(bound.get("theta"), slope).unwrap();
        let g = tape.backward(y).unwrap();
        (bound, g)
    }

    #[test]
    fn plain_step_arithmetic() {
        let mut s = one_param(1.0, false);
        let (b, g) = grads_for(&s, 2.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0).unwrap();
        opt.step(&mut s, &b, &g).unwrap();
        assert!((s.get("theta").unwrap().item() - 0.8).abs() < 1e-15);
        assert_eq!(opt.state_bytes(), 0);
    }

    #[test]
    fn zero_gradient_is_stationary() {
        let mut s = one_param(0.37, false);
        let (b, g) = grads_for(&s, 0.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, 0.0).unwrap();
        opt.step(&mut s, &b, &g).unwrap();
        assert_eq!(s.get("theta").unwrap().item().to_bits(), 0.37f64.to_bits());
    }

    #[test]
    fn frozen_entries_are_untouched() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Momentum(0.9), OptimizerKind::Adam] {
            let mut s = one_param(1.25, true);
            let before = s.digest();
            let (b, g) = grads_for(&s, 5.0);
            let mut opt = Optimizer::new(kind, 0.1, 0.3).unwrap();
            opt.step(&mut s, &b, &g).unwrap();
            assert_eq!(s.digest(), before);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = one_param(1.0, false);
        s.insert("unused", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let y = tape.scale(bound.get("theta"), 1.0).unwrap();
        let g = tape.backward(y).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0).unwrap();
        assert!(opt.step(&mut s, &bound, &g).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = one_param(1.0, false);
        let (b, g) = grads_for(&s, 3.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 0.0).unwrap();
        opt.step(&mut s, &b, &g).unwrap();
        assert!((s.get("theta").unwrap().item() - 0.99).abs() < 1e-9);
        assert_eq!(opt.state_bytes(), OptimizerKind::Adam.state_bytes(1));
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("sgd".parse::<OptimizerKind>().unwrap(), OptimizerKind::Sgd);
        assert_eq!("momentum:0.5".parse::<OptimizerKind>().unwrap(), OptimizerKind::Momentum(0.5));
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
        assert!("momentum:1.5".parse::<OptimizerKind>().is_err());
    }
}
