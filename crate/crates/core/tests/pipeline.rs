mod common;

use common::{frozen_backbone, task, tiny_backbone, tune_cfg};
use stprompt::backbone::BackboneModel;
use stprompt::diffengine::{checkpoint, FrozenFilter, OptimizerKind, Tape, Tensor};
use stprompt::pipeline::*;
use stprompt::prompt::{edit_magnitude, PromptConfig, PromptNet};
use stprompt::shiftlab::ShiftSpec;
use stprompt::stdata::window_samples;
use stprompt::Error;

fn prompt_for(m: &BackboneModel, seed: u64) -> PromptNet {
    PromptNet::new(
        PromptConfig {
            t_tun: m.cfg.history,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

/// Last observed value repeated over the horizon, scored like the model.
fn last_value_mae(t: &stprompt::shiftlab::ShiftTask, l_in: usize, l_out: usize) -> f64 {
    evaluate(
        |x| {
            let s = x.shape();
            let (b, r, l, f) = (s[0], s[1], s[2], s[3]);
            let mut out = Vec::with_capacity(b * r * l_out * f);
            for row in 0..b * r {
                let last = &x.data()[row * l * f + (l - 1) * f..row * l * f + l * f];
                for _ in 0..l_out {
                    out.extend_from_slice(last);
                }
            }
            Tensor::new(&[b, r, l_out, f], out)
        },
        &t.clean,
        &t.clean,
        t.plan.val.clone(),
        l_in,
        l_out,
        1,
    )
    .unwrap()
    .mae
}

#[test]
fn pretraining_beats_last_value_baseline() {
    let t = task(5, 400, ShiftSpec::lag(0), 3);
    let (m, _, res) = frozen_backbone(&t, 5, 3, 50);
    let model_mae = evaluate(
        |x| Composite::new(&m, None)?.predict(x),
        &t.clean,
        &t.clean,
        t.plan.val.clone(),
        12,
        12,
        1,
    )
    .unwrap()
    .mae;
    let baseline = last_value_mae(&t, 12, 12);
    assert!(model_mae < baseline, "model {model_mae} vs last value {baseline}");
    // the retained checkpoint is the best epoch
    let min = res.epochs.iter().map(|e| e.val_mae).fold(f64::INFINITY, f64::min);
    assert_eq!(res.best_val_mae, min);
    let first = res.epochs.first().unwrap().train_loss;
    let last = res.epochs.last().unwrap().train_loss;
    assert!(last < first);
    let times: Vec<f64> = res.epochs.iter().map(|e| e.elapsed).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn restored_checkpoint_reproduces_best_val() {
    let t = task(4, 300, ShiftSpec::lag(0), 4);
    let mut m = BackboneModel::new(tiny_backbone(4), 4).unwrap();
    let res = pretrain(&mut m, t.pretrain_data(), &common::pretrain_cfg(4, 8)).unwrap();
    let again = evaluate(
        |x| Composite::new(&m, None)?.predict(x),
        &t.clean,
        &t.clean,
        t.plan.val.clone(),
        12,
        12,
        1,
    )
    .unwrap()
    .mae;
    assert_eq!(again, res.best_val_mae);
}

#[test]
fn zero_epochs_keeps_initial_params() {
    let t = task(4, 300, ShiftSpec::lag(0), 1);
    let mut m = BackboneModel::new(tiny_backbone(4), 1).unwrap();
    let before = m.params.digest();
    let res = pretrain(&mut m, t.pretrain_data(), &common::pretrain_cfg(1, 0)).unwrap();
    assert_eq!(res.steps, 0);
    assert_eq!(m.params.digest(), before);
}

#[test]
fn pretraining_is_deterministic() {
    let t = task(4, 300, ShiftSpec::lag(0), 2);
    let run = || {
        let mut m = BackboneModel::new(tiny_backbone(4), 2).unwrap();
        let r = pretrain(&mut m, t.pretrain_data(), &common::pretrain_cfg(2, 3)).unwrap();
        let curve: Vec<(f64, f64)> = r.epochs.iter().map(|e| (e.train_loss, e.val_mae)).collect();
        (checkpoint::encode(&m.params), r.batch_digests, curve)
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_backbone_ignores_updates_and_survives_round_trip() {
    let mut m = BackboneModel::new(tiny_backbone(4), 5).unwrap();
    let digest = freeze(&mut m);
    let mut tape = Tape::new();
    let bound = m.params.bind_all_grad(&mut tape);
    let x = tape.constant(Tensor::full(&[1, 4, 12, 1], 0.5));
    let out = m.forward(&mut tape, &bound, x, Default::default()).unwrap();
    let loss = tape.sum(out.prediction).unwrap();
    let grads = tape.backward(loss).unwrap();
    sgd_step(&mut m.params, &bound, &grads, 0.5, 0.1).unwrap();
    assert_eq!(m.params.digest(), digest);

    let back = checkpoint::decode(&checkpoint::encode(&m.params)).unwrap();
    assert_eq!(back.digest(), digest);
    assert!(m.params.set_frozen("head.w", false).is_err());
}

#[test]
fn plain_step_matches_hand_arithmetic() {
    let mut store = stprompt::diffengine::ParamStore::new(0);
    store.insert("theta", Tensor::scalar(1.0)).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let y = tape.scale(bound.get("theta"), 2.0).unwrap();
    let g = tape.backward(y).unwrap();
    sgd_step(&mut store, &bound, &g, 0.1, 0.0).unwrap();
    assert!((store.get("theta").unwrap().item() - 0.8).abs() < 1e-15);
}

#[test]
fn prompt_tuning_contracts() {
    let t = task(5, 400, ShiftSpec::lag(2), 7);
    let (m, digest, _) = frozen_backbone(&t, 5, 7, 30);
    let frozen = Composite::new(&m, None).unwrap();
    let shifted_before = evaluate(|x| frozen.predict(x), &t.shifted, &t.clean, t.plan.tst.clone(), 12, 12, 1)
        .unwrap()
        .mae;

    // zero epochs: identity edit, bitwise equal predictions
    let mut p0 = prompt_for(&m, 1);
    let r0 = prompt_tune(&mut p0, &m, &digest, t.tune_data(), &tune_cfg(1, 0)).unwrap();
    assert_eq!(r0.steps, 0);
    let ws = window_samples(t.plan.tst.clone(), 12, 12, 5).unwrap();
    let batch = ws.batch(&t.shifted, &t.clean, &ws.origins).unwrap();
    let a = Composite::new(&m, Some(&p0)).unwrap().predict(&batch.inputs).unwrap();
    let b = frozen.predict(&batch.inputs).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    // real tuning: only the prompt trains, the backbone digest holds
    let mut p = prompt_for(&m, 1);
    let res = prompt_tune(&mut p, &m, &digest, t.tune_data(), &tune_cfg(1, 40)).unwrap();
    assert_eq!(res.trainable_params, p.count_params());
    assert_eq!(res.optimizer_state_bytes, OptimizerKind::Adam.state_bytes(p.count_params()));
    assert_eq!(m.params.digest(), digest);
    let tuned = evaluate(
        |x| Composite::new(&m, Some(&p))?.predict(x),
        &t.shifted,
        &t.clean,
        t.plan.tst.clone(),
        12,
        12,
        1,
    )
    .unwrap()
    .mae;
    assert!(tuned <= 0.5 * shifted_before, "tuned {tuned} vs frozen {shifted_before}");

    // predict: shape and determinism
    let w = Tensor::new(&[5, 12, 1], batch.inputs.data()[..60].to_vec()).unwrap();
    let y1 = predict(&m, Some(&p), &w).unwrap();
    assert_eq!(y1.shape(), &[5, 12, 1]);
    assert_eq!(y1, predict(&m, Some(&p), &w).unwrap());
}

#[test]
fn zero_shift_tuning_stays_near_identity() {
    let t = task(5, 400, ShiftSpec::lag(0), 8);
    let (m, digest, _) = frozen_backbone(&t, 5, 8, 30);
    let val = |p: Option<&PromptNet>| {
        evaluate(
            |x| Composite::new(&m, p)?.predict(x),
            &t.clean,
            &t.clean,
            t.plan.val.clone(),
            12,
            12,
            1,
        )
        .unwrap()
        .mae
    };
    let base = val(None);
    let mut cfg = tune_cfg(2, 20);
    cfg.lr = 1e-3;
    let mut p = prompt_for(&m, 2);
    prompt_tune(&mut p, &m, &digest, t.tune_data(), &cfg).unwrap();
    let ws = window_samples(t.plan.val.clone(), 12, 12, 3).unwrap();
    let x = ws.batch(&t.clean, &t.clean, &ws.origins).unwrap().inputs;
    let mag = edit_magnitude(&p, &x).unwrap();
    assert!(mag < 0.05, "edit magnitude {mag}");
    let tuned = val(Some(&p));
    // tuning may still correct residual backbone error; it must not cost more than 5%
    assert!(tuned <= 1.05 * base, "tuned {tuned} vs frozen {base}");
}

#[test]
fn digest_mismatch_is_a_contract_violation() {
    let t = task(4, 300, ShiftSpec::lag(2), 9);
    let mut m = BackboneModel::new(tiny_backbone(4), 9).unwrap();
    let digest = freeze(&mut m);
    let mut p = prompt_for(&m, 0);
    let err = prompt_tune(&mut p, &m, "0000", t.tune_data(), &tune_cfg(0, 1)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    // an unfrozen backbone is also refused
    let thawed = thawed_copy(&m);
    let err = prompt_tune(&mut p, &thawed, &digest, t.tune_data(), &tune_cfg(0, 1)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn comparison_arms_share_batches_and_zero_rate_is_inert() {
    let t = task(4, 300, ShiftSpec::lag(2), 10);
    let (m, digest, _) = frozen_backbone(&t, 4, 10, 5);
    let cfg = tune_cfg(3, 3);
    let mut p = prompt_for(&m, 3);
    let rp = prompt_tune(&mut p, &m, &digest, t.tune_data(), &cfg).unwrap();
    let mut f = thawed_copy(&m);
    let rf = finetune_all(&mut f, t.tune_data(), &cfg).unwrap();
    let mut s = BackboneModel::new(tiny_backbone(4), 99).unwrap();
    let rs = scratch_train(&mut s, t.tune_data(), &cfg).unwrap();
    let n = rp.batch_digests.len().min(rf.batch_digests.len()).min(rs.batch_digests.len());
    assert!(n > 0);
    assert_eq!(rp.batch_digests[..n], rf.batch_digests[..n]);
    assert_eq!(rf.batch_digests[..n], rs.batch_digests[..n]);
    assert_eq!(rf.trainable_params, m.count_params(FrozenFilter::All));

    let mut still = thawed_copy(&m);
    let before = still.params.digest();
    let zero = TrainConfig {
        lr: 0.0,
        optimizer: OptimizerKind::Sgd,
        weight_decay: 0.0,
        ..cfg
    };
    finetune_all(&mut still, t.tune_data(), &zero).unwrap();
    assert_eq!(still.params.digest(), before);
}

#[test]
fn prompt_footprint_is_independent_of_graph_size() {
    let mut counts = Vec::new();
    for r in [6, 12] {
        let t = task(r, 300, ShiftSpec::lag(2), 11);
        let mut m = BackboneModel::new(tiny_backbone(r), 11).unwrap();
        let digest = freeze(&mut m);
        let mut p = prompt_for(&m, 4);
        let mut cfg = tune_cfg(4, 1);
        cfg.max_steps = Some(1);
        let res = prompt_tune(&mut p, &m, &digest, t.tune_data(), &cfg).unwrap();
        counts.push((res.trainable_params, res.optimizer_state_bytes));
    }
    assert_eq!(counts[0], counts[1]);
}

#[test]
fn run_directory_artifacts() {
    let dir = std::env::temp_dir().join(format!("stprompt-run-{}", std::process::id()));
    let run = RunDir::open(&dir).unwrap();
    let mut m = BackboneModel::new(tiny_backbone(3), 1).unwrap();
    let digest = freeze(&mut m);
    run.save_checkpoint("pretrain", &m.params).unwrap();
    run.write_digest(&digest).unwrap();
    assert_eq!(run.load_checkpoint("pretrain").unwrap().digest(), digest);
    assert_eq!(run.read_digest().unwrap(), digest);
    let res = PhaseResult {
        epochs: vec![EpochRecord {
            epoch: 0,
            steps: 3,
            train_loss: 0.5,
            val_mae: 0.25,
            val_rmse: 0.3,
            val_mape: 0.1,
            elapsed: 1.0,
        }],
        ..Default::default()
    };
    run.log_phase("tune", &res).unwrap();
    let log = run.read_to_string("metrics.csv").unwrap();
    assert!(log.starts_with("phase,epoch,split,steps,mae,rmse,mape\n"));
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.split(',').count() == 7));
    assert!(run.read_to_string("timing.csv").unwrap().contains("tune,0,1.000000"));
    std::fs::remove_dir_all(&dir).unwrap();
}
