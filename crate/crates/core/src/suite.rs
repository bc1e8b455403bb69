//! Executable verification suite. Every acceptance criterion has exactly one
//! check; `fast` runs the pure-function checks, `full` adds the pilot
//! trainings and the timed benchmark.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    antisymmetric_adjacency, end_to_end_grad_check, learn_graph, mixhop_propagate, BackboneConfig, BackboneModel,
};
use crate::diffengine::{check_registered_ops, FrozenFilter, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{random_walk, sym_normalize, topk_sparsify, Edge, SensorGraph};
use crate::metrics::{horizon_weighted_mae, mae, mape, rmse, MetricReport, MAPE_EPS};
use crate::pipeline::{evaluate, freeze, pretrain, prompt_tune, Composite, RunDir, TrainConfig};
use crate::prompt::{edit_magnitude, PromptConfig, PromptNet};
use crate::shiftlab::{run_bench, wasserstein1_1d, ArmKind, BenchConfig, ShiftSpec, ShiftTask, SyntheticSpec};
use crate::stdata::SplitFractions;

/// Criterion ids and check names, in report order.
pub const MANIFEST: [(u8, &str); 11] = [
    (1, "gradient_fidelity"),
    (2, "identity_at_init"),
    (3, "frozen_backbone"),
    (4, "parameter_budget"),
    (5, "constant_footprint"),
    (6, "adaptation_speedup"),
    (7, "shift_recovery"),
    (8, "metric_correctness"),
    (9, "graph_algebra"),
    (10, "wasserstein"),
    (11, "reproducibility"),
];

/// Training and bench sizes used by the pilot checks.
pub const SPEEDUP_SCALE: usize = 16;
pub const SPEEDUP_SEEDS: [u64; 3] = [1, 2, 3];
pub const SPEEDUP_THRESHOLD: f64 = 0.5;
pub const SPEEDUP_TOLERANCE: f64 = 0.1;
pub const RECOVERY_THRESHOLD: f64 = 0.5;
pub const RECOVERY_STEPS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            _ => Err(Error::Config(format!("unknown suite level `{s}` (fast|full)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// Not run at this level.
    Skip,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub status: Status,
    pub measured: String,
    pub threshold: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion={:02} name={} status={} measured={} threshold={}",
            self.id, self.name, self.status, self.measured, self.threshold
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteResult {
    pub checks: Vec<Check>,
}

impl SuiteResult {
    pub fn get(&self, id: u8) -> Option<&Check> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    /// One line per check.
    pub fn report(&self) -> String {
        self.checks.iter().map(|c| format!("{c}\n")).collect()
    }
}

/// Every manifest entry appears exactly once, in order, with its name.
pub fn verify_manifest(result: &SuiteResult) -> Result<()> {
    if result.checks.len() != MANIFEST.len() {
        return Err(Error::Contract(format!(
            "suite has {} checks for {} criteria",
            result.checks.len(),
            MANIFEST.len()
        )));
    }
    for (c, (id, name)) in result.checks.iter().zip(MANIFEST) {
        if c.id != id || c.name != name {
            return Err(Error::Contract(format!("check {} `{}` does not match criterion {id} `{name}`", c.id, c.name)));
        }
    }
    Ok(())
}

pub fn run_suite(level: Level) -> SuiteResult {
    let full = level == Level::Full;
    let mut checks = Vec::new();
    for (id, name) in MANIFEST {
        let run: Option<fn() -> Result<Outcome>> = match id {
            1 => Some(gradient_fidelity),
            2 => Some(identity_at_init),
            3 => Some(frozen_backbone),
            4 => Some(parameter_budget),
            5 if full => Some(constant_footprint),
            6 if full => Some(adaptation_speedup),
            7 if full => Some(shift_recovery),
            8 => Some(metric_correctness),
            9 => Some(graph_algebra),
            10 => Some(wasserstein),
            11 => Some(reproducibility),
            _ => None,
        };
        let check = match run {
            None => Check {
                id,
                name,
                status: Status::Skip,
                measured: "-".into(),
                threshold: "-".into(),
            },
            Some(f) => match f() {
                Ok(o) => Check {
                    id,
                    name,
                    status: if o.pass { Status::Pass } else { Status::Fail },
                    measured: o.measured,
                    threshold: o.threshold,
                },
                Err(e) => Check {
                    id,
                    name,
                    status: Status::Fail,
                    measured: format!("error:{}", e.to_string().replace(' ', "_")),
                    threshold: "-".into(),
                },
            },
        };
        log::info!("{check}");
        checks.push(check);
    }
    SuiteResult { checks }
}

struct Outcome {
    pass: bool,
    measured: String,
    threshold: String,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn gradient_fidelity() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for c in check_registered_ops(20, 7)? {
        worst = worst.max(c.report.max_rel_error);
        ok &= c.report.checked > 0 && c.report.passes(1e-4);
    }
    for (_, r) in end_to_end_grad_check(11, 24)? {
        worst = worst.max(r.max_rel_error);
        ok &= r.checked > 0 && r.passes(1e-4);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: ok && secs < 120.0,
        measured: format!("{worst:.3e}"),
        threshold: "<1e-4_within_120s".into(),
    })
}

fn identity_at_init() -> Result<Outcome> {
    let mut m = BackboneModel::new(BackboneConfig::new(8), 3)?;
    freeze(&mut m);
    let p = PromptNet::new(PromptConfig::default(), 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 8, 12, 1], -2.0, 2.0)?;
    let a = Composite::new(&m, None)?.predict(&x)?;
    let b = Composite::new(&m, Some(&p))?.predict(&x)?;
    let same = a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits());
    let mag = edit_magnitude(&p, &x)?;
    Ok(Outcome {
        pass: same && mag == 0.0,
        measured: format!("bitwise={same},edit={mag:e}"),
        threshold: "bitwise=true,edit=0".into(),
    })
}

fn tiny_backbone(r: usize) -> BackboneConfig {
    let mut c = BackboneConfig::new(r);
    c.d_embed = 4;
    c.d_hidden = 8;
    c.d_skip = 8;
    c.layers = 2;
    c.kernels = vec![2, 3];
    c.topk = r.min(4);
    c
}

fn tiny_task(seed: u64) -> Result<ShiftTask> {
    let spec = SyntheticSpec {
        noise_std: 0.02,
        ..SyntheticSpec::new(4, 300, seed)
    };
    ShiftTask::build(&spec, &ShiftSpec::lag(2), SplitFractions::default(), 60)
}

fn frozen_backbone() -> Result<Outcome> {
    let task = tiny_task(2)?;
    let mut m = BackboneModel::new(tiny_backbone(4), 2)?;
    let digest = freeze(&mut m);
    let mut p = PromptNet::new(PromptConfig::default(), 2)?;
    let cfg = TrainConfig {
        epochs: 2,
        lr: 0.05,
        ..TrainConfig::tune(2)
    };
    let res = prompt_tune(&mut p, &m, &digest, task.tune_data(), &cfg)?;
    let after = m.params.digest();
    Ok(Outcome {
        pass: after == digest && res.steps > 0,
        measured: format!("before={digest},after={after}"),
        threshold: "equal".into(),
    })
}

fn parameter_budget() -> Result<Outcome> {
    let b = BackboneModel::new(BackboneConfig::new(50), 0)?.count_params(FrozenFilter::All);
    let p = PromptNet::new(PromptConfig::default(), 0)?.count_params();
    let ratio = p as f64 / b as f64;
    Ok(Outcome {
        pass: ratio <= 0.02,
        measured: format!("{p}/{b}={ratio:.5}"),
        threshold: "<=0.02".into(),
    })
}

fn constant_footprint() -> Result<Outcome> {
    let scales = vec![10, 100, 1000];
    let mut cfg = BenchConfig::small(scales.clone(), vec![1]);
    cfg.arms = vec![ArmKind::Prompt, ArmKind::Finetune];
    cfg.footprint_only = true;
    cfg.tune.batch = 4;
    let rep = run_bench(&cfg)?;
    let prompt: Vec<(usize, usize)> = rep.arm_records(ArmKind::Prompt).map(|r| (r.params, r.optimizer_state_bytes)).collect();
    let ft: Vec<usize> = scales
        .iter()
        .filter_map(|s| rep.arm_records(ArmKind::Finetune).find(|r| r.scale == *s).map(|r| r.params))
        .collect();
    let constant = prompt.len() == scales.len() && prompt.iter().all(|p| *p == prompt[0]);
    let growing = ft.len() == scales.len() && ft.windows(2).all(|w| w[0] < w[1]);
    let ft_txt: Vec<String> = ft.iter().map(|v| v.to_string()).collect();
    Ok(Outcome {
        pass: constant && growing,
        measured: format!(
            "prompt={}p/{}B,finetune={}",
            prompt.first().map_or(0, |p| p.0),
            prompt.first().map_or(0, |p| p.1),
            ft_txt.join("<")
        ),
        threshold: "prompt_constant,finetune_increasing".into(),
    })
}

fn adaptation_speedup() -> Result<Outcome> {
    let mut cfg = BenchConfig::small(vec![SPEEDUP_SCALE], SPEEDUP_SEEDS.to_vec());
    cfg.arms = vec![ArmKind::Prompt, ArmKind::Finetune];
    let rep = run_bench(&cfg)?;
    let ratio = rep
        .mean_time_ratio(ArmKind::Prompt, ArmKind::Finetune)
        .ok_or_else(|| Error::Contract("bench produced no timed arms".into()))?;
    let steps = |arm| rep.arm_records(arm).map(|r| r.steps).sum::<usize>() as f64 / SPEEDUP_SEEDS.len() as f64;
    Ok(Outcome {
        pass: rep.fair_batches && ratio <= SPEEDUP_THRESHOLD * (1.0 + SPEEDUP_TOLERANCE),
        measured: format!(
            "{ratio:.3}(steps_prompt={:.0},steps_finetune={:.0},fair={})",
            steps(ArmKind::Prompt),
            steps(ArmKind::Finetune),
            rep.fair_batches
        ),
        threshold: format!("<={SPEEDUP_THRESHOLD}(+{:.0}%)", SPEEDUP_TOLERANCE * 100.0),
    })
}

/// Fraction of the shift-induced MAE gap closed by a prompt tuned for at
/// most `RECOVERY_STEPS` steps, for each of the two calibrated shifts.
pub fn recovery_ratios(seed: u64) -> Result<Vec<(String, f64)>> {
    let cfg = BenchConfig::small(vec![SPEEDUP_SCALE], vec![seed]);
    let spec = SyntheticSpec {
        period: cfg.period,
        noise_std: cfg.noise_std,
        coupling: cfg.coupling,
        ..SyntheticSpec::new(SPEEDUP_SCALE, cfg.steps, seed)
    };
    let shifts = [("lag2", ShiftSpec::lag(2)), ("amp1.3", ShiftSpec::amplitude(1.3))];
    let tasks = shifts
        .iter()
        .map(|(_, s)| ShiftTask::build(&spec, s, cfg.fractions, cfg.tun_tail))
        .collect::<Result<Vec<_>>>()?;
    let bcfg = cfg.backbone_for(SPEEDUP_SCALE);
    let mut m = BackboneModel::new(bcfg.clone(), seed)?;
    pretrain(&mut m, tasks[0].pretrain_data(), &TrainConfig { seed, ..cfg.pretrain.clone() })?;
    let digest = freeze(&mut m);
    let (l_in, l_out) = (bcfg.history, bcfg.horizon);
    let mut out = Vec::new();
    for ((name, _), task) in shifts.iter().zip(&tasks) {
        let tst = task.plan.tst.clone();
        let frozen = Composite::new(&m, None)?;
        let clean = evaluate(|x| frozen.predict(x), &task.clean, &task.clean, tst.clone(), l_in, l_out, 1)?.mae;
        let shifted = evaluate(|x| frozen.predict(x), &task.shifted, &task.clean, tst.clone(), l_in, l_out, 1)?.mae;
        let mut p = PromptNet::new(cfg.prompt_for(&bcfg), seed)?;
        let tune = TrainConfig {
            seed,
            max_steps: Some(RECOVERY_STEPS),
            ..cfg.tune.clone()
        };
        prompt_tune(&mut p, &m, &digest, task.tune_data(), &tune)?;
        let tuned = Composite::new(&m, Some(&p))?;
        let adapted = evaluate(|x| tuned.predict(x), &task.shifted, &task.clean, tst, l_in, l_out, 1)?.mae;
        let gap = shifted - clean;
        if !(gap > 0.0) {
            return Err(Error::Data(format!("shift {name} does not degrade the frozen model")));
        }
        out.push((name.to_string(), (shifted - adapted) / gap));
    }
    Ok(out)
}

fn shift_recovery() -> Result<Outcome> {
    let r = recovery_ratios(1)?;
    let txt: Vec<String> = r.iter().map(|(n, v)| format!("{n}={v:.3}")).collect();
    Ok(Outcome {
        pass: r.iter().all(|(_, v)| *v >= RECOVERY_THRESHOLD),
        measured: txt.join(","),
        threshold: format!(">={RECOVERY_THRESHOLD}_within_{RECOVERY_STEPS}_steps"),
    })
}

fn metric_correctness() -> Result<Outcome> {
    let t = |v: &[f64]| Tensor::new(&[1, 1, v.len(), 1], v.to_vec());
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let y = t(&[3.0, 3.0])?;
    let mut ok = mae(&y, &y)? == 0.0 && rmse(&y, &y)? == 0.0 && mape(&y, &y, MAPE_EPS)? == 0.0;
    let (a, b) = (t(&[1.0, 1.0])?, t(&[0.0, 2.0])?);
    ok &= close(mae(&a, &b)?, 1.0) && close(rmse(&a, &b)?, 1.0);
    let (a, b) = (t(&[1.0, 1.0])?, t(&[1.0, 3.0])?);
    ok &= close(mae(&a, &b)?, 1.0) && close(rmse(&a, &b)?, 2f64.sqrt());
    ok &= close(mape(&t(&[10.0])?, &t(&[9.0])?, MAPE_EPS)?, 0.1);
    ok &= close(mape(&t(&[0.5])?, &t(&[0.0])?, MAPE_EPS)?, 0.5);
    ok &= close(horizon_weighted_mae(&[1.0, 2.0], 0.95)?, 2.9 / 1.95);
    ok &= close(horizon_weighted_mae(&[0.7; 5], 0.95)?, 0.7);
    ok &= close(horizon_weighted_mae(&[1.0, 2.0, 6.0], 1.0)?, 3.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = 0;
    for _ in 0..100 {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4), 1];
        let y = rand_tensor(&mut rng, &shape, 0.0, 80.0)?;
        let yhat = rand_tensor(&mut rng, &shape, 0.0, 80.0)?;
        let r = MetricReport::compute(&y, &yhat)?;
        if r.rmse < r.mae {
            violations += 1;
        }
    }
    Ok(Outcome {
        pass: ok && violations == 0,
        measured: format!("examples={ok},rmse_below_mae={violations}/100"),
        threshold: "examples=true,violations=0".into(),
    })
}

fn graph_algebra() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 6;
    let (mut stoch, mut collapse): (f64, f64) = (0.0, 0.0);
    let (mut anti, mut support) = (true, true);
    for _ in 0..20 {
        let mut edges = Vec::new();
        let mut dense = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.gen_bool(0.4) {
                    let w = rng.gen_range(0.1..2.0);
                    dense[i * n + j] = w;
                    edges.push(Edge { src: i, dst: j, weight: w });
                }
            }
        }
        let s = random_walk(&SensorGraph::from_edges(n, edges)?);
        for row in s.matrix().data().chunks(n) {
            let sum: f64 = row.iter().sum();
            if sum != 0.0 {
                stoch = stoch.max((sum - 1.0).abs());
            }
        }

        let a = Tensor::new(&[n, n], dense.clone())?;
        let k = rng.gen_range(1..n);
        let sparse = topk_sparsify(&a, k)?;
        for (row, orig) in sparse.data().chunks(n).zip(dense.chunks(n)) {
            support &= row.iter().filter(|v| **v != 0.0).count() <= k;
            support &= row.iter().zip(orig).all(|(v, o)| *v == 0.0 || v == o);
        }

        let mut tape = Tape::new();
        let e1 = tape.constant(rand_tensor(&mut rng, &[n, 3], -1.0, 1.0)?);
        let e2 = tape.constant(rand_tensor(&mut rng, &[n, 3], -1.0, 1.0)?);
        let t1 = tape.constant(rand_tensor(&mut rng, &[3, 3], -1.0, 1.0)?);
        let t2 = tape.constant(rand_tensor(&mut rng, &[3, 3], -1.0, 1.0)?);
        let (pre, _) = learn_graph(&mut tape, e1, e2, t1, t2, 3.0, n)?;
        let d = tape.value(pre).data().to_vec();
        for i in 0..n {
            for j in 0..n {
                anti &= d[i * n + j].min(d[j * n + i]) == 0.0;
            }
        }
        let m1 = tape.constant(rand_tensor(&mut rng, &[n, 2], -1.0, 1.0)?);
        let m2 = tape.constant(rand_tensor(&mut rng, &[n, 2], -1.0, 1.0)?);
        let direct = antisymmetric_adjacency(&mut tape, m1, m2, 2.0)?;
        let d = tape.value(direct).data().to_vec();
        for i in 0..n {
            for j in 0..n {
                anti &= d[i * n + j].min(d[j * n + i]) == 0.0;
            }
        }

        let sym: Vec<f64> = (0..n * n).map(|i| dense[i] + dense[(i % n) * n + i / n]).collect();
        let an = tape.constant(sym_normalize(&Tensor::new(&[n, n], sym)?)?);
        let h = tape.constant(rand_tensor(&mut rng, &[2, n, 4], -2.0, 2.0)?);
        let sel = (0..3)
            .map(|_| Ok(tape.constant(rand_tensor(&mut rng, &[4, 4], -1.0, 1.0)?)))
            .collect::<Result<Vec<_>>>()?;
        let got = mixhop_propagate(&mut tape, h, an, 1.0, &sel)?;
        let mut want = tape.layer_norm(h, crate::backbone::LAYER_NORM_EPS)?;
        for &w in &sel {
            let term = tape.linear(h, w)?;
            want = tape.add(want, term)?;
        }
        for (x, y) in tape.value(got).data().iter().zip(tape.value(want).data()) {
            collapse = collapse.max((x - y).abs());
        }
    }
    Ok(Outcome {
        pass: stoch < 1e-9 && collapse < 1e-9 && anti && support,
        measured: format!("stochastic={stoch:.1e},collapse={collapse:.1e},antisymmetric={anti},topk={support}"),
        threshold: "1e-9,1e-9,exact,exact".into(),
    })
}

fn wasserstein() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sample = |rng: &mut ChaCha8Rng| (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect::<Vec<f64>>();
    let a = sample(&mut rng);
    let mut ok = wasserstein1_1d(&a, &a)? == 0.0;
    let c = 1.375;
    let moved: Vec<f64> = a.iter().map(|v| v + c).collect();
    let trans = (wasserstein1_1d(&a, &moved)? - c).abs();
    ok &= trans < 1e-12;
    let mut worst: f64 = f64::NEG_INFINITY;
    for _ in 0..100 {
        let (x, y, z) = (sample(&mut rng), sample(&mut rng), sample(&mut rng));
        let excess = wasserstein1_1d(&x, &z)? - wasserstein1_1d(&x, &y)? - wasserstein1_1d(&y, &z)?;
        worst = worst.max(excess);
    }
    Ok(Outcome {
        pass: ok && worst <= 1e-9,
        measured: format!("translation_err={trans:.1e},triangle_excess={worst:.2e}"),
        threshold: "1e-12,<=1e-9".into(),
    })
}

fn scratch_dir(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("stprompt-suite-{}-{tag}", std::process::id()))
}

/// Pretrain, freeze and prompt-tune a tiny model into `dir`, writing
/// checkpoints, digest and metric logs.
fn tiny_run(dir: &PathBuf) -> Result<RunDir> {
    let run = RunDir::open(dir)?;
    let task = tiny_task(6)?;
    let mut m = BackboneModel::new(tiny_backbone(4), 6)?;
    let pre = TrainConfig {
        epochs: 2,
        lr: 0.003,
        ..TrainConfig::pretrain(6)
    };
    let res = pretrain(&mut m, task.pretrain_data(), &pre)?;
    run.log_phase("pretrain", &res)?;
    let digest = freeze(&mut m);
    run.save_checkpoint("pretrain", &m.params)?;
    run.write_digest(&digest)?;
    let mut p = PromptNet::new(PromptConfig::default(), 6)?;
    let tune = TrainConfig {
        epochs: 2,
        lr: 0.01,
        ..TrainConfig::tune(6)
    };
    let res = prompt_tune(&mut p, &m, &digest, task.tune_data(), &tune)?;
    run.log_phase("tune", &res)?;
    run.save_checkpoint("prompt", &p.params)?;
    Ok(run)
}

/// Files compared bitwise between repeated runs.
pub const REPRODUCIBLE_FILES: [&str; 4] = ["pretrain.ckpt", "prompt.ckpt", "frozen_digest.txt", "metrics.csv"];

fn reproducibility() -> Result<Outcome> {
    let dirs = [scratch_dir("a"), scratch_dir("b")];
    let result = (|| -> Result<Vec<&str>> {
        let a = tiny_run(&dirs[0])?;
        let b = tiny_run(&dirs[1])?;
        let mut differ = Vec::new();
        for f in REPRODUCIBLE_FILES {
            let read = |r: &RunDir| std::fs::read(r.file(f)).map_err(|e| Error::io(r.file(f), e));
            if read(&a)? != read(&b)? {
                differ.push(f);
            }
        }
        Ok(differ)
    })();
    for d in &dirs {
        let _ = std::fs::remove_dir_all(d);
    }
    let differ = result?;
    Ok(Outcome {
        pass: differ.is_empty(),
        measured: if differ.is_empty() {
            "identical".into()
        } else {
            format!("differ:{}", differ.join("+"))
        },
        threshold: "bitwise".into(),
    })
}
