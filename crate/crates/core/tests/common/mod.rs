#![allow(dead_code)]

use stprompt::backbone::{BackboneConfig, BackboneModel};
use stprompt::diffengine::OptimizerKind;
use stprompt::pipeline::{freeze, pretrain, PhaseResult, TrainConfig};
use stprompt::shiftlab::{ShiftSpec, ShiftTask, SyntheticSpec};
use stprompt::stdata::SplitFractions;

pub fn tiny_backbone(r: usize) -> BackboneConfig {
    let mut c = BackboneConfig::new(r);
    c.d_embed = 4;
    c.d_hidden = 8;
    c.d_skip = 8;
    c.layers = 2;
    c.kernels = vec![2, 3];
    c.topk = r.min(4);
    c
}

pub fn task(r: usize, steps: usize, shift: ShiftSpec, seed: u64) -> ShiftTask {
    let spec = SyntheticSpec {
        noise_std: 0.02,
        ..SyntheticSpec::new(r, steps, seed)
    };
    ShiftTask::build(&spec, &shift, SplitFractions::default(), steps / 5).unwrap()
}

pub fn pretrain_cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        lr: 0.005,
        epochs,
        ..TrainConfig::pretrain(seed)
    }
}

pub fn tune_cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        lr: 0.01,
        epochs,
        patience: 5,
        ..TrainConfig::tune(seed)
    }
}

/// Pretrained and frozen tiny backbone with its digest.
pub fn frozen_backbone(task: &ShiftTask, r: usize, seed: u64, epochs: usize) -> (BackboneModel, String, PhaseResult) {
    let mut m = BackboneModel::new(tiny_backbone(r), seed).unwrap();
    let res = pretrain(&mut m, task.pretrain_data(), &pretrain_cfg(seed, epochs)).unwrap();
    let d = freeze(&mut m);
    (m, d, res)
}
