use std::fmt::Write as _;
use std::path::Path;

use stprompt::backbone::{end_to_end_grad_check, BackboneConfig, BackboneModel};
use stprompt::diffengine::{check_registered_ops, FrozenFilter, ParamStore, Tensor};
use stprompt::graph::{kernel_adjacency, SensorGraph};
use stprompt::pipeline::{
    evaluate, finetune_all, freeze, pretrain as pretrain_phase, prompt_tune, scratch_train, thawed_copy, Composite,
    PhaseData, PhaseResult, RunDir, TrainConfig,
};
use stprompt::prompt::PromptNet;
use stprompt::shiftlab::{apply_shift, gen_synthetic, run_bench, ArmKind, BenchConfig, GraphKind, ShiftKind, ShiftSpec, SyntheticSpec};
use stprompt::stdata::{
    apply_normalization, feature_stats, format_readings, impute_missing, load_edges, load_readings, parse_readings,
    remove_anomalies, split_chronological, AnomalyConfig, ColumnSchema, ImputeConfig, SplitPlan, StTensor,
};
use stprompt::suite::{run_suite, verify_manifest, Level};
use stprompt::{Error, Result};

use crate::config::{self, RunConfig, MODEL_KEYS, PROMPT_KEYS, SPLIT_KEYS, TRAIN_KEYS};
use crate::{ConfigArgs, InspectTarget, ModelChoice, SplitName, TuneMode};

const SERIES: &str = "series.csv";
const SHIFTED: &str = "shifted.csv";
const PRETRAIN_SNAPSHOT: &str = "config.pretrain.txt";

/// Readings file plus the labels needed to write it back.
struct Labeled {
    x: StTensor,
    sensor_ids: Vec<String>,
    timestamps: Vec<i64>,
    features: Vec<String>,
}

fn read_series(run: &RunDir, name: &str) -> Result<Labeled> {
    if !run.exists(name) {
        return Err(Error::Data(format!("{} not found; run ingest or shiftgen first", run.file(name).display())));
    }
    let raw = parse_readings(&run.read_to_string(name)?, &ColumnSchema::default())?;
    if raw.missing_count() > 0 {
        return Err(Error::Data(format!("{name} has {} missing readings", raw.missing_count())));
    }
    let (r, t, f) = raw.dims();
    Ok(Labeled {
        x: StTensor::new(r, t, f, raw.values)?,
        sensor_ids: raw.sensor_ids,
        timestamps: raw.timestamps,
        features: raw.feature_names,
    })
}

fn write_series(run: &RunDir, name: &str, l: &Labeled, x: &StTensor) -> Result<()> {
    run.write(name, format_readings(x, &l.sensor_ids, &l.timestamps, &l.features)?)?;
    Ok(())
}

fn layered(args: &ConfigArgs, groups: &[&[&'static str]]) -> Result<RunConfig> {
    let mut rc = RunConfig::new(groups);
    if let Some(p) = &args.config {
        rc.load_file(p)?;
    }
    rc.apply_pairs(&args.set)?;
    if let Some(v) = args.lr {
        rc.set("train.lr", &v.to_string())?;
    }
    if let Some(v) = args.epochs {
        rc.set("train.epochs", &v.to_string())?;
    }
    if let Some(v) = args.batch {
        rc.set("train.batch", &v.to_string())?;
    }
    if let Some(v) = &args.optimizer {
        rc.set("train.optimizer", v)?;
    }
    if let Some(v) = args.max_steps {
        rc.set("train.max_steps", &v.to_string())?;
    }
    Ok(rc)
}

/// Normalized data and split of a pretrained run directory.
struct Context {
    run: RunDir,
    backbone: BackboneConfig,
    plan: SplitPlan,
    clean: StTensor,
    shifted: Option<StTensor>,
    labels: Labeled,
}

impl Context {
    /// Tuning and evaluation inputs: the shifted copy when present.
    fn inputs(&self, clean: bool) -> &StTensor {
        match (&self.shifted, clean) {
            (Some(s), false) => s,
            _ => &self.clean,
        }
    }
}

fn prepare(run: &RunDir, rc: &RunConfig) -> Result<(Context, TrainConfig)> {
    let labels = read_series(run, SERIES)?;
    let (r, t, f) = (labels.x.n_nodes(), labels.x.n_steps(), labels.x.n_features());
    let backbone = config::backbone_config(rc, r, f)?;
    let (fr, tail) = config::split_config(rc, t)?;
    let plan = split_chronological(t, fr, tail)?;
    let stats = feature_stats(&labels.x.slice_time(plan.pre.clone())?);
    let clean = apply_normalization(&labels.x, &stats);
    let shifted = if run.exists(SHIFTED) {
        let s = read_series(run, SHIFTED)?;
        if (s.x.n_nodes(), s.x.n_steps(), s.x.n_features()) != (r, t, f) {
            return Err(Error::Data("shifted.csv and series.csv differ in shape".into()));
        }
        Some(apply_normalization(&s.x, &stats))
    } else {
        None
    };
    let train = config::train_config(rc, TrainConfig::pretrain(0), 0)?;
    Ok((
        Context {
            run: run.clone(),
            backbone,
            plan,
            clean,
            shifted,
            labels,
        },
        train,
    ))
}

fn load_context(run_dir: &Path) -> Result<Context> {
    let run = RunDir::open(run_dir)?;
    if !run.exists(PRETRAIN_SNAPSHOT) {
        return Err(Error::Data(format!("{} not found; run pretrain first", run.file(PRETRAIN_SNAPSHOT).display())));
    }
    let mut rc = RunConfig::new(&[MODEL_KEYS, TRAIN_KEYS, SPLIT_KEYS]);
    rc.load_str(&run.read_to_string(PRETRAIN_SNAPSHOT)?)?;
    Ok(prepare(&run, &rc)?.0)
}

/// The pretrained backbone, after checking it against the recorded digest.
fn load_frozen(ctx: &Context) -> Result<(BackboneModel, String)> {
    let model = BackboneModel::from_params(ctx.backbone.clone(), ctx.run.load_checkpoint("pretrain")?)?;
    let digest = ctx.run.read_digest()?;
    let actual = model.params.digest();
    if actual != digest {
        return Err(Error::Contract(format!("backbone digest {actual} does not match recorded {digest}")));
    }
    if model.params.count(FrozenFilter::Trainable) != 0 {
        return Err(Error::Contract("pretrained checkpoint is not frozen".into()));
    }
    Ok((model, digest))
}

fn load_prompt(ctx: &Context) -> Result<PromptNet> {
    let name = "config.tune-prompt.txt";
    if !ctx.run.exists(name) {
        return Err(Error::Data("no prompt in this run; run tune --mode prompt first".into()));
    }
    let mut rc = RunConfig::new(&[PROMPT_KEYS, TRAIN_KEYS]);
    rc.load_str(&ctx.run.read_to_string(name)?)?;
    PromptNet::from_params(config::prompt_config(&rc, &ctx.backbone)?, ctx.run.load_checkpoint("prompt")?)
}

/// Model pair for a prediction: backbone plus optional prompt.
fn load_model(ctx: &Context, choice: ModelChoice) -> Result<(BackboneModel, Option<PromptNet>)> {
    match choice {
        ModelChoice::Frozen => Ok((load_frozen(ctx)?.0, None)),
        ModelChoice::Prompt => Ok((load_frozen(ctx)?.0, Some(load_prompt(ctx)?))),
        ModelChoice::Finetune | ModelChoice::Scratch => {
            let phase = if choice == ModelChoice::Finetune { "finetune" } else { "scratch" };
            if !ctx.run.exists(&format!("{phase}.ckpt")) {
                return Err(Error::Data(format!("no {phase} checkpoint; run tune --mode {phase} first")));
            }
            Ok((BackboneModel::from_params(ctx.backbone.clone(), ctx.run.load_checkpoint(phase)?)?, None))
        }
    }
}

fn summary(phase: &str, res: &PhaseResult) -> String {
    format!(
        "phase={phase} epochs={} steps={} best_epoch={} best_val_mae={:.6} stopped_early={} trainable={}{}",
        res.epochs.len(),
        res.steps,
        res.best_epoch.map_or("none".to_string(), |e| e.to_string()),
        res.best_val_mae,
        res.stopped_early,
        res.trainable_params,
        res.diverged.as_ref().map_or(String::new(), |d| format!(" diverged=\"{d}\""))
    )
}

pub fn pretrain(run_dir: &Path, args: &ConfigArgs) -> Result<bool> {
    let rc = layered(args, &[MODEL_KEYS, TRAIN_KEYS, SPLIT_KEYS])?;
    let run = RunDir::open(run_dir)?;
    let (ctx, _) = prepare(&run, &rc)?;
    let train = config::train_config(&rc, TrainConfig::pretrain(args.seed), args.seed)?;
    let (fr, tail) = config::split_config(&rc, ctx.clean.n_steps())?;

    let mut snap = format!("seed = {}\n", args.seed);
    config::dump_backbone(&mut snap, &ctx.backbone);
    config::dump_train(&mut snap, &train);
    config::dump_split(&mut snap, &fr, tail);
    run.write(PRETRAIN_SNAPSHOT, &snap)?;

    let mut model = BackboneModel::new(ctx.backbone.clone(), args.seed)?;
    let data = PhaseData {
        inputs: &ctx.clean,
        targets: &ctx.clean,
        train: ctx.plan.pre.clone(),
        val: ctx.plan.val.clone(),
    };
    let res = pretrain_phase(&mut model, data, &train)?;
    let digest = freeze(&mut model);
    run.save_checkpoint("pretrain", &model.params)?;
    run.write_digest(&digest)?;
    run.log_phase("pretrain", &res)?;
    println!("{} digest={digest}", summary("pretrain", &res));
    Ok(true)
}

pub fn tune(run_dir: &Path, mode: TuneMode, args: &ConfigArgs) -> Result<bool> {
    let ctx = load_context(run_dir)?;
    let groups: &[&[&'static str]] = if mode == TuneMode::Prompt {
        &[PROMPT_KEYS, TRAIN_KEYS]
    } else {
        &[TRAIN_KEYS]
    };
    let rc = layered(args, groups)?;
    let train = config::train_config(&rc, TrainConfig::tune(args.seed), args.seed)?;
    let (frozen, digest) = load_frozen(&ctx)?;
    let data = PhaseData {
        inputs: ctx.inputs(false),
        targets: &ctx.clean,
        train: ctx.plan.tun.clone(),
        val: ctx.plan.val.clone(),
    };
    let mut snap = format!("seed = {}\n", args.seed);
    let (phase, store, res) = match mode {
        TuneMode::Prompt => {
            let pcfg = config::prompt_config(&rc, &ctx.backbone)?;
            config::dump_prompt(&mut snap, &pcfg);
            let mut p = PromptNet::new(pcfg, args.seed)?;
            let res = prompt_tune(&mut p, &frozen, &digest, data, &train)?;
            ("prompt", p.params, res)
        }
        TuneMode::Finetune => {
            let mut m = thawed_copy(&frozen);
            let res = finetune_all(&mut m, data, &train)?;
            ("finetune", m.params, res)
        }
        TuneMode::Scratch => {
            let mut m = BackboneModel::new(ctx.backbone.clone(), args.seed)?;
            let res = scratch_train(&mut m, data, &train)?;
            ("scratch", m.params, res)
        }
    };
    config::dump_train(&mut snap, &train);
    ctx.run.write(&format!("config.tune-{phase}.txt"), &snap)?;
    ctx.run.save_checkpoint(phase, &store)?;
    ctx.run.log_phase(&format!("tune-{phase}"), &res)?;
    println!("{}", summary(&format!("tune-{phase}"), &res));
    Ok(true)
}

fn model_name(m: ModelChoice) -> &'static str {
    match m {
        ModelChoice::Frozen => "frozen",
        ModelChoice::Prompt => "prompt",
        ModelChoice::Finetune => "finetune",
        ModelChoice::Scratch => "scratch",
    }
}

pub fn predict(run_dir: &Path, choice: ModelChoice, origin: Option<usize>, clean: bool) -> Result<bool> {
    let ctx = load_context(run_dir)?;
    let (model, prompt) = load_model(&ctx, choice)?;
    let (l, q) = (ctx.backbone.history, ctx.backbone.horizon);
    let x = ctx.inputs(clean);
    let (r, t, f) = (x.n_nodes(), x.n_steps(), x.n_features());
    let origin = match origin {
        Some(o) => o,
        None => ctx
            .plan
            .tst
            .end
            .checked_sub(l + q)
            .filter(|o| *o >= ctx.plan.tst.start)
            .ok_or_else(|| Error::Data("test range shorter than one window".into()))?,
    };
    if origin + l > t {
        return Err(Error::Data(format!("window at {origin} needs {l} steps but the series has {t}")));
    }
    let mut window = Vec::with_capacity(r * l * f);
    for node in 0..r {
        for step in origin..origin + l {
            for k in 0..f {
                window.push(x.at(node, step, k));
            }
        }
    }
    let y = Composite::new(&model, prompt.as_ref())?.predict(&Tensor::new(&[1, r, l, f], window)?)?;
    let norm = ctx.clean.norm.as_ref().expect("normalized series");
    let mut out = String::from("sensor_id,origin,horizon,feature,value\n");
    for node in 0..r {
        for h in 0..q {
            for k in 0..f {
                let v = norm.denormalize_value(k, y.data()[(node * q + h) * f + k]);
                let _ = writeln!(out, "{},{origin},{},{},{v}", ctx.labels.sensor_ids[node], h + 1, ctx.labels.features[k]);
            }
        }
    }
    let path = ctx.run.write(&format!("predictions-{}.csv", model_name(choice)), &out)?;
    println!("model={} origin={origin} rows={} path={}", model_name(choice), r * q * f, path.display());
    Ok(true)
}

pub fn eval(run_dir: &Path, choice: ModelChoice, split: SplitName, clean: bool) -> Result<bool> {
    let ctx = load_context(run_dir)?;
    let (model, prompt) = load_model(&ctx, choice)?;
    let (range, name) = match split {
        SplitName::Pre => (ctx.plan.pre.clone(), "pre"),
        SplitName::Tun => (ctx.plan.tun.clone(), "tun"),
        SplitName::Val => (ctx.plan.val.clone(), "val"),
        SplitName::Tst => (ctx.plan.tst.clone(), "tst"),
    };
    let comp = Composite::new(&model, prompt.as_ref())?;
    let rep = evaluate(
        |x| comp.predict(x),
        ctx.inputs(clean),
        &ctx.clean,
        range,
        ctx.backbone.history,
        ctx.backbone.horizon,
        1,
    )?;
    ctx.run.write(&format!("eval-{}-{name}.csv", model_name(choice)), rep.to_csv())?;
    println!(
        "model={} split={name} mae={:.6} rmse={:.6} mape={:.6} weighted_mae={:.6}",
        model_name(choice),
        rep.mae,
        rep.rmse,
        rep.mape,
        rep.weighted_mae
    );
    Ok(true)
}

pub fn parse_shift(s: &str) -> Result<ShiftSpec> {
    let bad = || Error::Config(format!("bad shift `{s}` (lag:N, amp:A or mixed:N:A)"));
    let parts: Vec<&str> = s.split(':').collect();
    let kind = match parts.as_slice() {
        ["lag", d] => ShiftKind::PhaseLag(d.parse().map_err(|_| bad())?),
        ["amp", a] => ShiftKind::Amplitude(a.parse().map_err(|_| bad())?),
        ["mixed", d, a] => ShiftKind::Mixed {
            lag: d.parse().map_err(|_| bad())?,
            alpha: a.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    Ok(ShiftSpec { kind, range: None })
}

fn parse_graph(s: &str) -> Result<GraphKind> {
    match s.split_once(':') {
        None if s == "ring" => Ok(GraphKind::Ring),
        Some(("geometric", r)) => Ok(GraphKind::Geometric {
            radius: r.parse().map_err(|_| Error::Config(format!("bad radius `{r}`")))?,
        }),
        _ => Err(Error::Config(format!("bad graph `{s}` (ring or geometric:radius)"))),
    }
}

pub struct ShiftgenArgs {
    pub nodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub shift: String,
    pub period: usize,
    pub noise: f64,
    pub coupling: f64,
    pub graph: String,
    pub shift_from: Option<usize>,
}

pub fn shiftgen(run_dir: &Path, a: ShiftgenArgs) -> Result<bool> {
    let spec = SyntheticSpec {
        period: a.period,
        noise_std: a.noise,
        coupling: a.coupling,
        graph: parse_graph(&a.graph)?,
        ..SyntheticSpec::new(a.nodes, a.steps, a.seed)
    };
    spec.validate()?;
    let mut shift = parse_shift(&a.shift)?;
    if let Some(from) = a.shift_from {
        shift.range = Some(from..a.steps);
    }
    let (x, graph) = gen_synthetic(&spec)?;
    let shifted = apply_shift(&x, &shift)?;
    let labels = Labeled {
        sensor_ids: (0..a.nodes).map(|i| format!("s{i:05}")).collect(),
        timestamps: (0..a.steps as i64).collect(),
        features: (0..x.n_features()).map(|k| format!("f{k}")).collect(),
        x,
    };
    let run = RunDir::open(run_dir)?;
    write_series(&run, SERIES, &labels, &labels.x)?;
    write_series(&run, SHIFTED, &labels, &shifted)?;
    run.write("graph.csv", graph.export_triples())?;
    println!("nodes={} steps={} edges={} shift={}", a.nodes, a.steps, graph.edges().len(), a.shift);
    Ok(true)
}

pub fn ingest(run_dir: &Path, readings: &Path, edges: Option<&Path>, sigma2: f64, z_thresh: Option<f64>) -> Result<bool> {
    let raw = load_readings(readings, &ColumnSchema::default())?;
    let (r, t, f) = raw.dims();
    let graph = match edges {
        Some(p) => kernel_adjacency(r, &load_edges(p, &raw.sensor_ids)?, sigma2)?,
        None => SensorGraph::from_edges(r, Vec::new())?,
    };
    let missing = raw.missing_count();
    let mut x = impute_missing(&raw, &graph, &ImputeConfig::default())?;
    let mut flagged = 0;
    if let Some(z) = z_thresh {
        let res = remove_anomalies(
            &x,
            &graph,
            &AnomalyConfig {
                z_thresh: z,
                ..Default::default()
            },
        )?;
        for w in &res.warnings {
            log::warn!("{w}");
        }
        flagged = res.mask.len();
        x = res.cleaned;
    }
    let labels = Labeled {
        x,
        sensor_ids: raw.sensor_ids,
        timestamps: raw.timestamps,
        features: raw.feature_names,
    };
    let run = RunDir::open(run_dir)?;
    write_series(&run, SERIES, &labels, &labels.x)?;
    run.write("graph.csv", graph.export_triples())?;
    let report = format!("sensors={r} steps={t} features={f} imputed={missing} anomalies={flagged}\n");
    run.write("ingest_report.txt", &report)?;
    print!("{report}");
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
pub fn bench(
    run_dir: &Path,
    scales: Vec<usize>,
    seeds: u64,
    arms: &[String],
    shift: &str,
    steps: Option<usize>,
    footprint: bool,
    parallel: bool,
) -> Result<bool> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let mut cfg = BenchConfig::small(scales, (1..=seeds).collect());
    cfg.arms = arms.iter().map(|a| a.parse()).collect::<Result<Vec<ArmKind>>>()?;
    cfg.shift = parse_shift(shift)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    cfg.footprint_only = footprint;
    cfg.parallel = parallel;
    let rep = run_bench(&cfg)?;
    let run = RunDir::open(run_dir)?;
    run.write("bench_records.csv", rep.records_csv())?;
    run.write("bench_ratios.csv", rep.ratios_csv())?;
    run.write("bench_baselines.csv", rep.baselines_csv())?;
    run.write(
        "bench_meta.txt",
        format!("threading={}\nfair_batches={}\n", rep.threading, rep.fair_batches),
    )?;
    print!("{}", rep.ratios_csv());
    Ok(rep.fair_batches)
}

pub fn gradcheck(points: usize, seed: u64) -> Result<bool> {
    let mut ok = true;
    for c in check_registered_ops(points, seed)? {
        let pass = c.report.checked > 0 && c.report.passes(1e-4);
        ok &= pass;
        println!(
            "op={} points={} checked={} kinks={} max_rel_error={:.3e} status={}",
            c.name,
            c.points,
            c.report.checked,
            c.report.kink_flagged,
            c.report.max_rel_error,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    for (name, r) in end_to_end_grad_check(seed, 24)? {
        let pass = r.checked > 0 && r.passes(1e-4);
        ok &= pass;
        println!(
            "model_param={name} checked={} kinks={} max_rel_error={:.3e} status={}",
            r.checked,
            r.kink_flagged,
            r.max_rel_error,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn param_table(store: &ParamStore) -> String {
    let mut out = String::from("name\tshape\tcount\tfrozen\n");
    for e in store.entries() {
        let shape: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "{}\t{}\t{}\t{}", e.name, shape.join("x"), e.value.numel(), e.frozen);
    }
    out
}

pub fn inspect(run_dir: &Path, target: InspectTarget) -> Result<bool> {
    let run = RunDir::open(run_dir)?;
    let phase = match target {
        InspectTarget::Backbone => "pretrain",
        InspectTarget::Prompt => "prompt",
        InspectTarget::Finetune => "finetune",
        InspectTarget::Scratch => "scratch",
    };
    let store = run.load_checkpoint(phase)?;
    print!("{}", param_table(&store));
    let total = store.count(FrozenFilter::All);
    print!("total={total} trainable={}", store.count(FrozenFilter::Trainable));
    if target == InspectTarget::Prompt && run.exists("pretrain.ckpt") {
        let backbone = run.load_checkpoint("pretrain")?.count(FrozenFilter::All);
        print!(" backbone={backbone} ratio={:.5}", total as f64 / backbone as f64);
    }
    if target == InspectTarget::Backbone && run.exists("frozen_digest.txt") {
        print!(" digest={}", store.digest());
    }
    println!();
    Ok(true)
}

pub fn suite(level: &str) -> Result<bool> {
    let level: Level = level.parse()?;
    let res = run_suite(level);
    verify_manifest(&res)?;
    print!("{}", res.report());
    Ok(res.passed())
}
