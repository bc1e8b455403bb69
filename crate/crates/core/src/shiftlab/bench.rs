//! Adaptation benchmark: prompt tuning vs full fine-tuning vs training from
//! scratch on a shifted synthetic task, across graph scales and seeds.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::{apply_shift, gen_synthetic, ShiftSpec, SyntheticSpec};
use crate::backbone::{BackboneConfig, BackboneModel};
use crate::diffengine::{FrozenFilter, OptimizerKind};
use crate::error::{Error, Result};
use crate::pipeline::{
    evaluate, finetune_all, freeze, pretrain, prompt_tune, scratch_train, thawed_copy, Composite, PhaseData,
    PhaseResult, TrainConfig,
};
use crate::prompt::{PromptConfig, PromptNet};
use crate::stdata::{apply_normalization, feature_stats, split_chronological, SplitFractions, SplitPlan, StTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArmKind {
    Prompt,
    Finetune,
    Scratch,
}

impl ArmKind {
    pub const ALL: [ArmKind; 3] = [ArmKind::Prompt, ArmKind::Finetune, ArmKind::Scratch];
}

impl fmt::Display for ArmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArmKind::Prompt => "prompt",
            ArmKind::Finetune => "finetune",
            ArmKind::Scratch => "scratch",
        })
    }
}

impl FromStr for ArmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt" => Ok(ArmKind::Prompt),
            "finetune" => Ok(ArmKind::Finetune),
            "scratch" => Ok(ArmKind::Scratch),
            _ => Err(Error::Config(format!("unknown arm {s:?} (prompt, finetune, scratch)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub scales: Vec<usize>,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmKind>,
    /// Synthetic series length.
    pub steps: usize,
    pub period: usize,
    pub noise_std: f64,
    pub coupling: f64,
    pub shift: ShiftSpec,
    pub fractions: SplitFractions,
    /// Length of the adaptation slice at the end of the training window.
    pub tun_tail: usize,
    /// Template; node count and top-k are set per scale.
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
    pub pretrain: TrainConfig,
    /// Stopping rule and optimizer shared by every arm; `lr` applies to the prompt arm.
    pub tune: TrainConfig,
    /// Learning rate of the fine-tune and scratch arms.
    pub backbone_lr: f64,
    /// Skip pretraining and take a single tuning step per arm: only
    /// parameter and optimizer-state footprints are meaningful.
    pub footprint_only: bool,
    /// Run (scale, seed) cells on separate threads. Arms inside a cell stay
    /// serialized; wall-clock numbers are noisier under contention.
    pub parallel: bool,
}

impl BenchConfig {
    /// Desk-scale defaults.
    pub fn small(scales: Vec<usize>, seeds: Vec<u64>) -> Self {
        let mut backbone = BackboneConfig::new(1);
        backbone.d_embed = 8;
        backbone.d_hidden = 16;
        backbone.d_skip = 16;
        backbone.layers = 2;
        backbone.kernels = vec![2, 3];
        backbone.topk = 8;
        let mut tune = TrainConfig::tune(0);
        tune.optimizer = OptimizerKind::Adam;
        tune.lr = 0.01;
        tune.epochs = 60;
        tune.patience = 5;
        tune.min_delta = 0.005;
        tune.stride = 1;
        let mut pre = TrainConfig::pretrain(0);
        pre.optimizer = OptimizerKind::Adam;
        pre.lr = 0.003;
        pre.epochs = 40;
        BenchConfig {
            scales,
            seeds,
            arms: ArmKind::ALL.to_vec(),
            steps: 720,
            period: 24,
            noise_std: 0.05,
            coupling: 0.3,
            shift: ShiftSpec::lag(2),
            fractions: SplitFractions::default(),
            tun_tail: 144,
            backbone,
            prompt: PromptConfig::default(),
            pretrain: pre,
            tune,
            backbone_lr: 0.003,
            footprint_only: false,
            parallel: false,
        }
    }

    pub fn backbone_for(&self, r: usize) -> BackboneConfig {
        let mut c = self.backbone.clone();
        c.n_nodes = r;
        c.topk = c.topk.clamp(1, r);
        c
    }

    pub fn prompt_for(&self, b: &BackboneConfig) -> PromptConfig {
        PromptConfig {
            t_tun: b.history,
            in_features: b.in_features,
            ..self.prompt.clone()
        }
    }
}

/// Clean and shifted views of one synthetic series, normalized with
/// statistics of the clean pre-training range.
#[derive(Clone, Debug)]
pub struct ShiftTask {
    pub clean: StTensor,
    pub shifted: StTensor,
    pub plan: SplitPlan,
}

impl ShiftTask {
    pub fn build(spec: &SyntheticSpec, shift: &ShiftSpec, fractions: SplitFractions, tun_tail: usize) -> Result<Self> {
        let (raw, _graph) = gen_synthetic(spec)?;
        let plan = split_chronological(raw.n_steps(), fractions, tun_tail)?;
        let stats = feature_stats(&raw.slice_time(plan.pre.clone())?);
        let clean = apply_normalization(&raw, &stats);
        let shifted = apply_normalization(&apply_shift(&raw, shift)?, &stats);
        Ok(ShiftTask { clean, shifted, plan })
    }

    pub fn pretrain_data(&self) -> PhaseData<'_> {
        PhaseData {
            inputs: &self.clean,
            targets: &self.clean,
            train: self.plan.pre.clone(),
            val: self.plan.val.clone(),
        }
    }

    /// Shifted inputs, in-distribution targets.
    pub fn tune_data(&self) -> PhaseData<'_> {
        PhaseData {
            inputs: &self.shifted,
            targets: &self.clean,
            train: self.plan.tun.clone(),
            val: self.plan.val.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmRecord {
    pub scale: usize,
    pub arm: ArmKind,
    pub seed: u64,
    pub params: usize,
    pub optimizer_state_bytes: usize,
    pub steps: usize,
    pub steps_to_best: usize,
    pub seconds: f64,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRecord {
    pub scale: usize,
    pub seed: u64,
    pub backbone_params: usize,
    pub clean_mae: Option<f64>,
    pub shifted_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioRow {
    pub scale: usize,
    pub seed: u64,
    pub arm: ArmKind,
    /// Trainable parameters over total backbone parameters.
    pub param_ratio: f64,
    /// Arm wall-clock over the reference arm's (prompt when present).
    pub time_ratio: f64,
    pub step_ratio: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub records: Vec<ArmRecord>,
    pub baselines: Vec<BaselineRecord>,
    pub ratios: Vec<RatioRow>,
    /// Every pair of arms in a (scale, seed) cell consumed the same batch
    /// sequence up to the shorter run's length.
    pub fair_batches: bool,
    pub threading: &'static str,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl BenchReport {
    pub fn records_csv(&self) -> String {
        let mut s = String::from("scale,arm,seed,params,optimizer_bytes,steps,seconds,mae,rmse,mape,status\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{},{},{},{}",
                r.scale,
                r.arm,
                r.seed,
                r.params,
                r.optimizer_state_bytes,
                r.steps,
                r.seconds,
                fmt_opt(r.mae),
                fmt_opt(r.rmse),
                fmt_opt(r.mape),
                r.diverged.as_deref().map_or("ok".to_string(), |d| format!("diverged: {}", d.replace(',', ";")))
            );
        }
        s
    }

    pub fn ratios_csv(&self) -> String {
        let mut s = String::from("scale,seed,arm,param_ratio,time_ratio,step_ratio\n");
        for r in &self.ratios {
            let _ = writeln!(
                s,
                "{},{},{},{:.6e},{:.6},{:.6}",
                r.scale, r.seed, r.arm, r.param_ratio, r.time_ratio, r.step_ratio
            );
        }
        s
    }

    pub fn baselines_csv(&self) -> String {
        let mut s = String::from("scale,seed,backbone_params,clean_mae,shifted_mae\n");
        for b in &self.baselines {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                b.scale,
                b.seed,
                b.backbone_params,
                fmt_opt(b.clean_mae),
                fmt_opt(b.shifted_mae)
            );
        }
        s
    }

    pub fn arm_records(&self, arm: ArmKind) -> impl Iterator<Item = &ArmRecord> {
        self.records.iter().filter(move |r| r.arm == arm)
    }

    /// Mean wall-clock of `arm` over `reference` across every cell.
    pub fn mean_time_ratio(&self, arm: ArmKind, reference: ArmKind) -> Option<f64> {
        let mut ratios = Vec::new();
        for a in self.arm_records(arm) {
            let r = self
                .records
                .iter()
                .find(|r| r.arm == reference && r.scale == a.scale && r.seed == a.seed)?;
            ratios.push(a.seconds / r.seconds);
        }
        (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
    }
}

/// Multiplications per sample position in a `layers`-deep width-`d` affine stack.
pub fn prompt_mlp_multiplies(d: usize, layers: usize) -> usize {
    layers * d * d
}

fn prefix_equal(a: &[String], b: &[String]) -> bool {
    let n = a.len().min(b.len());
    a[..n] == b[..n]
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.seeds.is_empty() || cfg.scales.is_empty() || cfg.arms.is_empty() {
        return Err(Error::Config("bench needs at least one scale, seed and arm".into()));
    }
    let cells: Vec<(usize, u64)> = cfg
        .scales
        .iter()
        .flat_map(|&scale| cfg.seeds.iter().map(move |&seed| (scale, seed)))
        .collect();
    let one = |(scale, seed): (usize, u64)| -> Result<BenchReport> {
        let mut part = BenchReport {
            fair_batches: true,
            ..Default::default()
        };
        run_cell(cfg, scale, seed, &mut part)?;
        Ok(part)
    };
    let parts: Vec<Result<BenchReport>> = if cfg.parallel {
        let width = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut out = Vec::with_capacity(cells.len());
        for chunk in cells.chunks(width) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|&c| s.spawn(move || one(c))).collect();
                for h in handles {
                    out.push(h.join().unwrap_or_else(|_| Err(Error::Contract("bench worker panicked".into()))));
                }
            });
        }
        out
    } else {
        cells.into_iter().map(one).collect()
    };
    let mut report = BenchReport {
        fair_batches: true,
        threading: if cfg.parallel { "parallel" } else { "single" },
        ..Default::default()
    };
    for part in parts {
        let part = part?;
        report.records.extend(part.records);
        report.baselines.extend(part.baselines);
        report.ratios.extend(part.ratios);
        report.fair_batches &= part.fair_batches;
    }
    Ok(report)
}

fn run_cell(cfg: &BenchConfig, scale: usize, seed: u64, report: &mut BenchReport) -> Result<()> {
    let spec = SyntheticSpec {
        period: cfg.period,
        noise_std: cfg.noise_std,
        coupling: cfg.coupling,
        ..SyntheticSpec::new(scale, cfg.steps, seed)
    };
    let task = ShiftTask::build(&spec, &cfg.shift, cfg.fractions, cfg.tun_tail)?;
    let bcfg = cfg.backbone_for(scale);
    let mut backbone = BackboneModel::new(bcfg.clone(), seed)?;
    if !cfg.footprint_only {
        let pre_cfg = TrainConfig {
            seed,
            ..cfg.pretrain.clone()
        };
        let res = pretrain(&mut backbone, task.pretrain_data(), &pre_cfg)?;
        if let Some(d) = &res.diverged {
            log::warn!("pretraining at R = {scale}, seed {seed} diverged: {d}");
        }
    }
    let pretrained = thawed_copy(&backbone);
    let digest = freeze(&mut backbone);
    let backbone_params = backbone.count_params(FrozenFilter::All);

    let (l_in, l_out) = (bcfg.history, bcfg.horizon);
    let tst = task.plan.tst.clone();
    let test = |c: &Composite, inputs: &StTensor| evaluate(|x| c.predict(x), inputs, &task.clean, tst.clone(), l_in, l_out, 1);
    let (clean_mae, shifted_mae) = if cfg.footprint_only {
        (None, None)
    } else {
        let c = Composite::new(&backbone, None)?;
        (Some(test(&c, &task.clean)?.mae), Some(test(&c, &task.shifted)?.mae))
    };
    report.baselines.push(BaselineRecord {
        scale,
        seed,
        backbone_params,
        clean_mae,
        shifted_mae,
    });

    let mut tune = TrainConfig { seed, ..cfg.tune.clone() };
    if cfg.footprint_only {
        tune.epochs = 1;
        tune.max_steps = Some(1);
    }
    let mut results: Vec<(ArmKind, PhaseResult, Option<[f64; 3]>)> = Vec::new();
    for &arm in &cfg.arms {
        let (res, metrics) = match arm {
            ArmKind::Prompt => {
                let mut p = PromptNet::new(cfg.prompt_for(&bcfg), seed)?;
                let res = prompt_tune(&mut p, &backbone, &digest, task.tune_data(), &tune)?;
                let m = if cfg.footprint_only {
                    None
                } else {
                    let r = test(&Composite::new(&backbone, Some(&p))?, &task.shifted)?;
                    Some([r.mae, r.rmse, r.mape])
                };
                (res, m)
            }
            ArmKind::Finetune | ArmKind::Scratch => {
                let mut model = if arm == ArmKind::Finetune {
                    thawed_copy(&pretrained)
                } else {
                    BackboneModel::new(bcfg.clone(), seed.wrapping_add(1))?
                };
                let c = TrainConfig {
                    lr: cfg.backbone_lr,
                    ..tune.clone()
                };
                let res = if arm == ArmKind::Finetune {
                    finetune_all(&mut model, task.tune_data(), &c)?
                } else {
                    scratch_train(&mut model, task.tune_data(), &c)?
                };
                let m = if cfg.footprint_only {
                    None
                } else {
                    let r = test(&Composite::new(&model, None)?, &task.shifted)?;
                    Some([r.mae, r.rmse, r.mape])
                };
                (res, m)
            }
        };
        results.push((arm, res, metrics));
    }
    if backbone.params.digest() != digest {
        return Err(Error::Contract("backbone changed during the benchmark".into()));
    }

    for i in 0..results.len() {
        for j in i + 1..results.len() {
            if !prefix_equal(&results[i].1.batch_digests, &results[j].1.batch_digests) {
                report.fair_batches = false;
            }
        }
    }
    let reference = results
        .iter()
        .find(|r| r.0 == ArmKind::Prompt)
        .unwrap_or(&results[0]);
    let (ref_secs, ref_steps) = (reference.1.wall_clock, reference.1.steps.max(1));
    for (arm, res, m) in &results {
        report.records.push(ArmRecord {
            scale,
            arm: *arm,
            seed,
            params: res.trainable_params,
            optimizer_state_bytes: res.optimizer_state_bytes,
            steps: res.steps,
            steps_to_best: res.steps_to_best,
            seconds: res.wall_clock,
            mae: m.map(|v| v[0]),
            rmse: m.map(|v| v[1]),
            mape: m.map(|v| v[2]),
            diverged: res.diverged.clone(),
        });
        report.ratios.push(RatioRow {
            scale,
            seed,
            arm: *arm,
            param_ratio: res.trainable_params as f64 / backbone_params as f64,
            time_ratio: res.wall_clock / ref_secs.max(f64::MIN_POSITIVE),
            step_ratio: res.steps as f64 / ref_steps as f64,
        });
    }
    Ok(())
}
