//! Pretrain, freeze, adapt and predict: the training loops behind every
//! adaptation arm, with early stopping and best-checkpoint retention.

mod run;

pub use run::{MetricsLog, RunDir, RUN_ROOT_ENV};

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::{curriculum_horizon, node_partition, pretrain_loss, BackboneModel, ForwardOptions};
use crate::diffengine::{BoundParams, FrozenFilter, Grads, Optimizer, OptimizerKind, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::prompt::{prompt_forward, PromptNet};
use crate::stdata::{window_samples, ForecastBatch, Normalization, StTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// Epochs without a val improvement before stopping.
    pub patience: usize,
    /// Relative val improvement that counts as progress.
    pub min_delta: f64,
    pub seed: u64,
    pub stride: usize,
    /// Hard cap on optimizer steps, if any.
    pub max_steps: Option<usize>,
    /// Grow the supervised horizon over the first half of training.
    pub curriculum: bool,
    /// Random node subsets per step (1 = whole graph).
    pub partitions: usize,
}

impl TrainConfig {
    pub fn pretrain(seed: u64) -> Self {
        TrainConfig {
            lr: 0.003,
            batch: 32,
            epochs: 50,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::Sgd,
            patience: 10,
            min_delta: 0.0,
            seed,
            stride: 1,
            max_steps: None,
            curriculum: true,
            partitions: 1,
        }
    }

    pub fn tune(seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            curriculum: false,
            ..TrainConfig::pretrain(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.batch == 0 || self.patience == 0 || self.stride == 0 || self.partitions == 0 {
            return Err(Error::Config("batch, patience, stride and partitions must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.min_delta >= 0.0) {
            return Err(Error::Config("weight decay and min_delta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Inputs and targets share shape; they differ when inputs carry a shift.
#[derive(Clone, Debug)]
pub struct PhaseData<'a> {
    pub inputs: &'a StTensor,
    pub targets: &'a StTensor,
    pub train: Range<usize>,
    pub val: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    /// Seconds since the phase started.
    pub elapsed: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PhaseResult {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_val_mae: f64,
    /// Optimizer steps taken when the retained checkpoint was reached.
    pub steps_to_best: usize,
    pub stopped_early: bool,
    pub diverged: Option<String>,
    pub wall_clock: f64,
    /// Short hash of each consumed batch's window origins, in order.
    pub batch_digests: Vec<String>,
    pub trainable_params: usize,
    pub optimizer_state_bytes: usize,
}

/// One plain gradient step `θ ← θ − η(g + wd·θ)` over the non-frozen entries.
pub fn sgd_step(store: &mut ParamStore, bound: &BoundParams, grads: &Grads, lr: f64, weight_decay: f64) -> Result<()> {
    Optimizer::new(OptimizerKind::Sgd, lr, weight_decay)?.step(store, bound, grads)
}

pub fn batch_digest(origins: &[usize]) -> String {
    let mut h = Sha256::new();
    for o in origins {
        h.update((*o as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Marks every backbone entry frozen after rounding it to f32 (so saved
/// checkpoints reload bit-exactly) and returns the parameter digest.
pub fn freeze(model: &mut BackboneModel) -> String {
    model.params.snap_to_f32();
    model.params.freeze_all();
    model.params.digest()
}

fn verify_frozen(model: &BackboneModel, digest: &str) -> Result<()> {
    if model.params.count(FrozenFilter::Trainable) != 0 {
        return Err(Error::Contract("backbone has trainable entries; freeze it first".into()));
    }
    let now = model.params.digest();
    if now != digest {
        return Err(Error::Contract(format!("backbone digest {now} does not match frozen digest {digest}")));
    }
    Ok(())
}

/// Frozen backbone optionally preceded by a prompt, with the learned
/// adjacency computed once.
pub struct Composite<'a> {
    pub backbone: &'a BackboneModel,
    pub prompt: Option<&'a PromptNet>,
    adjacency: Tensor,
}

impl<'a> Composite<'a> {
    pub fn new(backbone: &'a BackboneModel, prompt: Option<&'a PromptNet>) -> Result<Self> {
        Ok(Composite {
            backbone,
            prompt,
            adjacency: backbone.normalized_adjacency()?,
        })
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    /// `[B, R, L_in, F]` → `[B, R, Q, F]` in eval mode.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let gb = self.backbone.params.bind(&mut tape);
        let mut xv = tape.constant(x.clone());
        if let Some(p) = self.prompt {
            let pb = p.params.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            xv = prompt_forward(&mut tape, &p.cfg, &pb, xv, false, &mut rng)?;
        }
        let opts = ForwardOptions {
            adjacency: Some(&self.adjacency),
            nodes: None,
        };
        let out = self.backbone.forward(&mut tape, &gb, xv, opts)?;
        Ok(tape.value(out.prediction).clone())
    }
}

/// `ĝ(h(X))` for one window `[R, L_in, F]`, returning `[R, Q, F]`.
pub fn predict(frozen: &BackboneModel, prompt: Option<&PromptNet>, window: &Tensor) -> Result<Tensor> {
    let s = window.shape();
    if s.len() != 3 {
        return Err(Error::shape("predict", format!("window {:?}, expected [R, L_in, F]", s)));
    }
    let x = window.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let y = Composite::new(frozen, prompt)?.predict(&x)?;
    let ys = y.shape().to_vec();
    y.reshape(&ys[1..])
}

/// Maps normalized values back to physical units along the last axis.
pub fn denormalize_tensor(t: &Tensor, norm: &Normalization) -> Tensor {
    let f = norm.mean.len();
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = norm.denormalize_value(i % f, *v);
    }
    out
}

const EVAL_NODE_WINDOWS: usize = 64 * 16;

/// Metrics over every window of `range`, in physical units when the targets
/// carry normalization statistics.
pub fn evaluate<F>(
    predict: F,
    inputs: &StTensor,
    targets: &StTensor,
    range: Range<usize>,
    l_in: usize,
    l_out: usize,
    stride: usize,
) -> Result<MetricReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let stream = window_samples(range.clone(), l_in, l_out, stride)?;
    if stream.is_empty() {
        return Err(Error::Data(format!("no evaluation windows in {range:?}")));
    }
    let mut ys = Vec::new();
    let mut ps = Vec::new();
    // keep each forward tape to roughly 64 windows of a 16-node graph
    let batch_size = (EVAL_NODE_WINDOWS / inputs.n_nodes().max(1)).clamp(1, 64);
    for batch in stream.batches(inputs, targets, batch_size) {
        let batch = batch?;
        let p = predict(&batch.inputs)?;
        ys.extend_from_slice(batch.targets.data());
        ps.extend_from_slice(p.data());
    }
    let (r, f) = (targets.n_nodes(), targets.n_features());
    let shape = [stream.len(), r, l_out, f];
    let mut y = Tensor::new(&shape, ys)?;
    let mut p = Tensor::new(&shape, ps)?;
    if let Some(norm) = &targets.norm {
        y = denormalize_tensor(&y, norm);
        p = denormalize_tensor(&p, norm);
    }
    MetricReport::compute(&y, &p)
}

struct StepCtx {
    step: usize,
    curriculum_steps: usize,
}

trait Arm {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn loss(&self, tape: &mut Tape, batch: &ForecastBatch, ctx: &StepCtx, rng: &mut ChaCha8Rng) -> Result<(Var, BoundParams)>;
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
    fn dims(&self) -> (usize, usize);
    fn node_count(&self) -> usize;
    fn partitioned(&self) -> bool;
    fn set_nodes(&mut self, _nodes: Option<Vec<usize>>) {}
}

struct BackboneArm<'a> {
    model: &'a mut BackboneModel,
    nodes: Option<Vec<usize>>,
}

impl Arm for BackboneArm<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn loss(&self, tape: &mut Tape, batch: &ForecastBatch, ctx: &StepCtx, _rng: &mut ChaCha8Rng) -> Result<(Var, BoundParams)> {
        let cfg = &self.model.cfg;
        let bound = self.model.params.bind(tape);
        let (x, y) = match &self.nodes {
            Some(n) => (select_nodes(&batch.inputs, n)?, select_nodes(&batch.targets, n)?),
            None => (batch.inputs.clone(), batch.targets.clone()),
        };
        let xv = tape.constant(x);
        let opts = ForwardOptions {
            adjacency: None,
            nodes: self.nodes.as_deref(),
        };
        let out = self.model.forward(tape, &bound, xv, opts)?;
        let horizon = if ctx.curriculum_steps > 0 {
            curriculum_horizon(ctx.step, ctx.curriculum_steps, cfg.horizon)
        } else {
            cfg.horizon
        };
        let trainable: Vec<Var> = self
            .model
            .params
            .entries()
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| bound.get(&e.name))
            .collect();
        let loss = pretrain_loss(tape, out.prediction, &y, horizon, &trainable, out.adjacency, cfg.lambda, cfg.mu)?;
        Ok((loss, bound))
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Composite::new(self.model, None)?.predict(x)
    }

    fn dims(&self) -> (usize, usize) {
        (self.model.cfg.history, self.model.cfg.horizon)
    }

    fn node_count(&self) -> usize {
        self.model.cfg.n_nodes
    }

    fn partitioned(&self) -> bool {
        true
    }

    fn set_nodes(&mut self, nodes: Option<Vec<usize>>) {
        self.nodes = nodes;
    }
}

struct PromptArm<'a> {
    prompt: &'a mut PromptNet,
    frozen: Composite<'a>,
}

impl Arm for PromptArm<'_> {
    fn params(&self) -> &ParamStore {
        &self.prompt.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.prompt.params
    }

    fn loss(&self, tape: &mut Tape, batch: &ForecastBatch, _ctx: &StepCtx, rng: &mut ChaCha8Rng) -> Result<(Var, BoundParams)> {
        let gb = self.frozen.backbone.params.bind(tape);
        let pb = self.prompt.params.bind(tape);
        let xv = tape.constant(batch.inputs.clone());
        let xt = prompt_forward(tape, &self.prompt.cfg, &pb, xv, true, rng)?;
        let opts = ForwardOptions {
            adjacency: Some(self.frozen.adjacency()),
            nodes: None,
        };
        let out = self.frozen.backbone.forward(tape, &gb, xt, opts)?;
        Ok((tape.l1_loss(out.prediction, &batch.targets)?, pb))
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let c = Composite {
            backbone: self.frozen.backbone,
            prompt: Some(self.prompt),
            adjacency: self.frozen.adjacency.clone(),
        };
        c.predict(x)
    }

    fn dims(&self) -> (usize, usize) {
        (self.frozen.backbone.cfg.history, self.frozen.backbone.cfg.horizon)
    }

    fn node_count(&self) -> usize {
        self.frozen.backbone.cfg.n_nodes
    }

    fn partitioned(&self) -> bool {
        false
    }
}

/// Rows of `t: [B, R, ...]` for the given nodes.
pub fn select_nodes(t: &Tensor, nodes: &[usize]) -> Result<Tensor> {
    let s = t.shape();
    if s.len() < 2 || nodes.iter().any(|&n| n >= s[1]) {
        return Err(Error::shape("select_nodes", format!("{:?} with nodes {:?}", s, nodes)));
    }
    let inner: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(s[0] * nodes.len() * inner);
    for b in 0..s[0] {
        for &n in nodes {
            let o = (b * s[1] + n) * inner;
            out.extend_from_slice(&t.data()[o..o + inner]);
        }
    }
    let mut shape = s.to_vec();
    shape[1] = nodes.len();
    Tensor::new(&shape, out)
}

fn run_phase(arm: &mut dyn Arm, data: PhaseData, cfg: &TrainConfig) -> Result<PhaseResult> {
    cfg.validate()?;
    let (l_in, l_out) = arm.dims();
    let stream = window_samples(data.train.clone(), l_in, l_out, cfg.stride)?;
    if stream.is_empty() {
        return Err(Error::Data(format!("no training windows in {:?}", data.train)));
    }
    let val_windows = window_samples(data.val.clone(), l_in, l_out, cfg.stride)?;
    if val_windows.is_empty() {
        return Err(Error::Data(format!("no validation windows in {:?}", data.val)));
    }
    let per_epoch = stream.len().div_ceil(cfg.batch);
    let planned = cfg.max_steps.map_or(cfg.epochs * per_epoch, |m| m.min(cfg.epochs * per_epoch));
    let ctx_curriculum = if cfg.curriculum { planned / 2 } else { 0 };

    let mut result = PhaseResult {
        trainable_params: arm.params().count(FrozenFilter::Trainable),
        best_val_mae: f64::INFINITY,
        ..Default::default()
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<ParamStore> = None;
    let mut since_best = 0;
    let start = Instant::now();

    'epochs: for epoch in 0..cfg.epochs {
        let mut order = stream.origins.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let parts = if cfg.partitions > 1 && arm.partitioned() {
            Some(node_partition(arm.node_count(), cfg.partitions, cfg.seed ^ ((epoch as u64) << 32))?)
        } else {
            None
        };
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_steps.is_some_and(|m| result.steps >= m) {
                break;
            }
            let batch = stream.batch(data.inputs, data.targets, chunk)?;
            result.batch_digests.push(batch_digest(chunk));
            let ctx = StepCtx {
                step: result.steps,
                curriculum_steps: ctx_curriculum,
            };
            if let Some(p) = &parts {
                arm.set_nodes(Some(p[result.steps % p.len()].clone()));
            }
            let mut tape = Tape::new();
            let outcome = arm
                .loss(&mut tape, &batch, &ctx, &mut rng)
                .and_then(|(loss, bound)| {
                    let v = tape.value(loss).item();
                    let grads = tape.backward(loss)?;
                    Ok((v, bound, grads))
                });
            let (v, bound, grads) = match outcome {
                Ok(o) if o.0.is_finite() => o,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    result.diverged = Some(format!("non-finite loss at step {}", result.steps));
                    log::warn!("divergence at step {}; keeping the best checkpoint", result.steps);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if let Err(e) = opt.step(arm.params_mut(), &bound, &grads) {
                if matches!(e, Error::NonFinite(_)) {
                    result.diverged = Some(format!("non-finite gradient at step {}", result.steps));
                    break 'epochs;
                }
                return Err(e);
            }
            loss_sum += v;
            batches += 1;
            result.steps += 1;
        }
        if parts.is_some() {
            arm.set_nodes(None);
        }
        if batches == 0 {
            break;
        }
        let report = match evaluate(|x| arm.predict(x), data.inputs, data.targets, data.val.clone(), l_in, l_out, cfg.stride) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => {
                result.diverged = Some(format!("non-finite validation output after epoch {epoch}"));
                break;
            }
            Err(e) => return Err(e),
        };
        result.epochs.push(EpochRecord {
            epoch,
            steps: result.steps,
            train_loss: loss_sum / batches as f64,
            val_mae: report.mae,
            val_rmse: report.rmse,
            val_mape: report.mape,
            elapsed: start.elapsed().as_secs_f64(),
        });
        if !report.mae.is_finite() {
            result.diverged = Some(format!("non-finite validation MAE after epoch {epoch}"));
            break;
        }
        if report.mae < result.best_val_mae * (1.0 - cfg.min_delta) {
            result.best_val_mae = report.mae;
            result.best_epoch = Some(epoch);
            result.steps_to_best = result.steps;
            best = Some(arm.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                result.stopped_early = true;
                break;
            }
        }
        if cfg.max_steps.is_some_and(|m| result.steps >= m) {
            break;
        }
    }
    if let Some(b) = best {
        *arm.params_mut() = b;
    }
    result.wall_clock = start.elapsed().as_secs_f64();
    result.optimizer_state_bytes = opt.state_bytes().max(cfg.optimizer.state_bytes(result.trainable_params) * usize::from(result.steps > 0));
    Ok(result)
}

/// Trains every backbone parameter on the pre-training range with the
/// curriculum horizon, retaining the best-validation checkpoint.
pub fn pretrain(model: &mut BackboneModel, data: PhaseData, cfg: &TrainConfig) -> Result<PhaseResult> {
    let mut arm = BackboneArm { model, nodes: None };
    run_phase(&mut arm, data, cfg)
}

/// Tunes only the prompt in front of a frozen backbone. The backbone digest
/// is checked before and after; a mismatch is a contract violation.
pub fn prompt_tune(
    prompt: &mut PromptNet,
    frozen: &BackboneModel,
    digest: &str,
    data: PhaseData,
    cfg: &TrainConfig,
) -> Result<PhaseResult> {
    verify_frozen(frozen, digest)?;
    if prompt.cfg.t_tun != frozen.cfg.history || prompt.cfg.in_features != frozen.cfg.in_features {
        return Err(Error::Config(format!(
            "prompt window {}x{} does not match backbone input {}x{}",
            prompt.cfg.t_tun, prompt.cfg.in_features, frozen.cfg.history, frozen.cfg.in_features
        )));
    }
    let mut arm = PromptArm {
        prompt,
        frozen: Composite::new(frozen, None)?,
    };
    let result = run_phase(&mut arm, data, cfg)?;
    verify_frozen(frozen, digest)?;
    Ok(result)
}

/// Full-parameter adaptation of a copy of the pretrained backbone.
pub fn finetune_all(model: &mut BackboneModel, data: PhaseData, cfg: &TrainConfig) -> Result<PhaseResult> {
    for e in model.params.entries().iter() {
        if e.frozen {
            return Err(Error::Contract(format!(
                "entry {} is frozen; fine-tune a fresh copy of the pretrained parameters",
                e.name
            )));
        }
    }
    let mut arm = BackboneArm { model, nodes: None };
    run_phase(&mut arm, data, &TrainConfig { curriculum: false, ..cfg.clone() })
}

/// Training a freshly initialized backbone on the adaptation data only.
pub fn scratch_train(model: &mut BackboneModel, data: PhaseData, cfg: &TrainConfig) -> Result<PhaseResult> {
    finetune_all(model, data, cfg)
}

/// Trainable copy of a (possibly frozen) backbone.
pub fn thawed_copy(model: &BackboneModel) -> BackboneModel {
    let mut store = ParamStore::new(model.params.rng_seed);
    for e in model.params.entries() {
        store.insert(&e.name, e.value.clone()).expect("unique names");
    }
    BackboneModel {
        cfg: model.cfg.clone(),
        params: store,
    }
}
