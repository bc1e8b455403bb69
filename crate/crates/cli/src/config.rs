//! Layered `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, `--config` file, `--set`
//! pairs, dedicated flags (`--lr`, `--epochs`, ...). Every key must be
//! declared for the subcommand; anything else is rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use stprompt::backbone::BackboneConfig;
use stprompt::diffengine::OptimizerKind;
use stprompt::pipeline::TrainConfig;
use stprompt::prompt::PromptConfig;
use stprompt::stdata::SplitFractions;
use stprompt::{Error, Result};

pub const MODEL_KEYS: &[&str] = &[
    "model.d_embed",
    "model.d_hidden",
    "model.d_skip",
    "model.layers",
    "model.mixhop_depth",
    "model.retain",
    "model.kernels",
    "model.saturation",
    "model.topk",
    "model.lambda",
    "model.mu",
    "model.horizon",
    "model.history",
];

pub const SPLIT_KEYS: &[&str] = &["split.train", "split.val", "split.test", "split.tun_tail"];

pub const PROMPT_KEYS: &[&str] = &["prompt.d_hidden", "prompt.kernel", "prompt.dropout", "prompt.zero_init"];

pub const TRAIN_KEYS: &[&str] = &[
    "train.lr",
    "train.batch",
    "train.epochs",
    "train.weight_decay",
    "train.optimizer",
    "train.patience",
    "train.min_delta",
    "train.stride",
    "train.max_steps",
    "train.curriculum",
];

/// Raw pairs after layering, restricted to the declared keys.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    allowed: Vec<&'static str>,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(groups: &[&[&'static str]]) -> Self {
        let mut allowed: Vec<&'static str> = groups.iter().flat_map(|g| g.iter().copied()).collect();
        allowed.push("seed");
        RunConfig {
            allowed,
            values: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.allowed.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.load_str(&text)
    }

    pub fn load_str(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if seen.insert(k.to_string(), i + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// `key=value` strings from `--set`.
    pub fn apply_pairs(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{p}`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
        }
    }
}

fn set_opt<T: FromStr>(cfg: &RunConfig, key: &str, slot: &mut T) -> Result<()> {
    if let Some(v) = cfg.get(key)? {
        *slot = v;
    }
    Ok(())
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad list entry `{s}`"))))
        .collect()
}

/// Backbone shape for `n_nodes` sensors; `model.topk` defaults to the
/// library's choice for that size.
pub fn backbone_config(cfg: &RunConfig, n_nodes: usize, in_features: usize) -> Result<BackboneConfig> {
    let mut b = BackboneConfig::new(n_nodes);
    b.in_features = in_features;
    set_opt(cfg, "model.d_embed", &mut b.d_embed)?;
    set_opt(cfg, "model.d_hidden", &mut b.d_hidden)?;
    set_opt(cfg, "model.d_skip", &mut b.d_skip)?;
    set_opt(cfg, "model.layers", &mut b.layers)?;
    set_opt(cfg, "model.mixhop_depth", &mut b.mixhop_depth)?;
    set_opt(cfg, "model.retain", &mut b.retain)?;
    set_opt(cfg, "model.saturation", &mut b.saturation)?;
    set_opt(cfg, "model.topk", &mut b.topk)?;
    set_opt(cfg, "model.lambda", &mut b.lambda)?;
    set_opt(cfg, "model.mu", &mut b.mu)?;
    set_opt(cfg, "model.horizon", &mut b.horizon)?;
    set_opt(cfg, "model.history", &mut b.history)?;
    if let Some(v) = cfg.get::<String>("model.kernels")? {
        b.kernels = parse_list(&v)?;
    }
    b.validate()?;
    Ok(b)
}

pub fn prompt_config(cfg: &RunConfig, backbone: &BackboneConfig) -> Result<PromptConfig> {
    let mut p = PromptConfig {
        t_tun: backbone.history,
        in_features: backbone.in_features,
        ..Default::default()
    };
    set_opt(cfg, "prompt.d_hidden", &mut p.d_hidden)?;
    set_opt(cfg, "prompt.kernel", &mut p.kernel)?;
    set_opt(cfg, "prompt.dropout", &mut p.dropout_rate)?;
    set_opt(cfg, "prompt.zero_init", &mut p.zero_init_output)?;
    p.validate()?;
    Ok(p)
}

/// `base` carries the phase defaults (pretraining or tuning).
pub fn train_config(cfg: &RunConfig, mut t: TrainConfig, seed: u64) -> Result<TrainConfig> {
    t.seed = seed;
    set_opt(cfg, "train.lr", &mut t.lr)?;
    set_opt(cfg, "train.batch", &mut t.batch)?;
    set_opt(cfg, "train.epochs", &mut t.epochs)?;
    set_opt(cfg, "train.weight_decay", &mut t.weight_decay)?;
    set_opt::<OptimizerKind>(cfg, "train.optimizer", &mut t.optimizer)?;
    set_opt(cfg, "train.patience", &mut t.patience)?;
    set_opt(cfg, "train.min_delta", &mut t.min_delta)?;
    set_opt(cfg, "train.stride", &mut t.stride)?;
    set_opt(cfg, "train.curriculum", &mut t.curriculum)?;
    if let Some(v) = cfg.get::<String>("train.max_steps")? {
        t.max_steps = match v.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|_| Error::Config(format!("bad value `{s}` for `train.max_steps`")))?),
        };
    }
    t.validate()?;
    Ok(t)
}

/// Split fractions and the tuning tail for a series of `n_steps`.
/// Without `split.tun_tail` the last fifth of the training window is held for tuning.
pub fn split_config(cfg: &RunConfig, n_steps: usize) -> Result<(SplitFractions, usize)> {
    let mut fr = SplitFractions::default();
    set_opt(cfg, "split.train", &mut fr.train)?;
    set_opt(cfg, "split.val", &mut fr.val)?;
    set_opt(cfg, "split.test", &mut fr.test)?;
    let mut tail = ((fr.train * n_steps as f64).floor() as usize / 5).max(1);
    set_opt(cfg, "split.tun_tail", &mut tail)?;
    Ok((fr, tail))
}

pub fn dump_backbone(out: &mut String, b: &BackboneConfig) {
    let kernels: Vec<String> = b.kernels.iter().map(|k| k.to_string()).collect();
    let _ = writeln!(out, "model.d_embed = {}", b.d_embed);
    let _ = writeln!(out, "model.d_hidden = {}", b.d_hidden);
    let _ = writeln!(out, "model.d_skip = {}", b.d_skip);
    let _ = writeln!(out, "model.layers = {}", b.layers);
    let _ = writeln!(out, "model.mixhop_depth = {}", b.mixhop_depth);
    let _ = writeln!(out, "model.retain = {}", b.retain);
    let _ = writeln!(out, "model.kernels = {}", kernels.join(","));
    let _ = writeln!(out, "model.saturation = {}", b.saturation);
    let _ = writeln!(out, "model.topk = {}", b.topk);
    let _ = writeln!(out, "model.lambda = {}", b.lambda);
    let _ = writeln!(out, "model.mu = {}", b.mu);
    let _ = writeln!(out, "model.horizon = {}", b.horizon);
    let _ = writeln!(out, "model.history = {}", b.history);
}

pub fn dump_prompt(out: &mut String, p: &PromptConfig) {
    let _ = writeln!(out, "prompt.d_hidden = {}", p.d_hidden);
    let _ = writeln!(out, "prompt.kernel = {}", p.kernel);
    let _ = writeln!(out, "prompt.dropout = {}", p.dropout_rate);
    let _ = writeln!(out, "prompt.zero_init = {}", p.zero_init_output);
}

pub fn dump_train(out: &mut String, t: &TrainConfig) {
    let _ = writeln!(out, "train.lr = {}", t.lr);
    let _ = writeln!(out, "train.batch = {}", t.batch);
    let _ = writeln!(out, "train.epochs = {}", t.epochs);
    let _ = writeln!(out, "train.weight_decay = {}", t.weight_decay);
    let _ = writeln!(out, "train.optimizer = {}", t.optimizer);
    let _ = writeln!(out, "train.patience = {}", t.patience);
    let _ = writeln!(out, "train.min_delta = {}", t.min_delta);
    let _ = writeln!(out, "train.stride = {}", t.stride);
    let _ = writeln!(out, "train.max_steps = {}", t.max_steps.map_or("none".to_string(), |m| m.to_string()));
    let _ = writeln!(out, "train.curriculum = {}", t.curriculum);
}

pub fn dump_split(out: &mut String, fr: &SplitFractions, tail: usize) {
    let _ = writeln!(out, "split.train = {}", fr.train);
    let _ = writeln!(out, "split.val = {}", fr.val);
    let _ = writeln!(out, "split.test = {}", fr.test);
    let _ = writeln!(out, "split.tun_tail = {tail}");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        let mut c = RunConfig::new(&[TRAIN_KEYS]);
        assert!(matches!(c.load_str("train.lr = 0.1\nbogus = 1\n"), Err(Error::Config(m)) if m.contains("line 2")));
        let mut c = RunConfig::new(&[TRAIN_KEYS]);
        assert!(c.load_str("train.lr = 0.1\ntrain.lr = 0.2\n").is_err());
        let mut c = RunConfig::new(&[TRAIN_KEYS]);
        assert!(c.load_str("model.layers = 2").is_err());
    }

    #[test]
    fn later_layers_win() {
        let mut c = RunConfig::new(&[TRAIN_KEYS]);
        c.load_str("# comment\ntrain.lr = 0.1   # trailing\ntrain.epochs = 3\n").unwrap();
        c.apply_pairs(&["train.lr=0.5".into()]).unwrap();
        let t = train_config(&c, TrainConfig::tune(0), 9).unwrap();
        assert_eq!(t.lr, 0.5);
        assert_eq!(t.epochs, 3);
        assert_eq!(t.seed, 9);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::new(&[MODEL_KEYS, TRAIN_KEYS, SPLIT_KEYS]);
        c.load_str("model.kernels = 2,3\nmodel.layers = 2\ntrain.optimizer = momentum:0.5\ntrain.max_steps = 7\n")
            .unwrap();
        let b = backbone_config(&c, 6, 1).unwrap();
        let t = train_config(&c, TrainConfig::pretrain(0), 1).unwrap();
        let (fr, tail) = split_config(&c, 500).unwrap();
        assert_eq!(tail, 60);
        let mut snap = String::new();
        dump_backbone(&mut snap, &b);
        dump_train(&mut snap, &t);
        dump_split(&mut snap, &fr, tail);
        let mut again = RunConfig::new(&[MODEL_KEYS, TRAIN_KEYS, SPLIT_KEYS]);
        again.load_str(&snap).unwrap();
        assert_eq!(backbone_config(&again, 6, 1).unwrap(), b);
        let t2 = train_config(&again, TrainConfig::pretrain(0), 1).unwrap();
        assert_eq!(format!("{t2:?}"), format!("{t:?}"));
    }
}
