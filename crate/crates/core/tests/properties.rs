use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stprompt::backbone::{antisymmetric_adjacency, mixhop_propagate, BackboneConfig, BackboneModel};
use stprompt::diffengine::{ops::dropout, FrozenFilter, Tape, Tensor};
use stprompt::graph::{poly_filter, random_walk, sym_normalize, topk_sparsify, Edge, SensorGraph};
use stprompt::metrics::{mae, mape, rmse, MetricReport, MAPE_EPS};
use stprompt::shiftlab::{apply_shift, wasserstein1_1d, ShiftSpec};
use stprompt::stdata::{
    denormalize, impute_missing, normalize, split_chronological, window_samples, ImputeConfig, RawSeries, SplitFractions,
    StTensor,
};

fn matrix(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..3.0], n * n)
}

fn graph_from(n: usize, w: &[f64]) -> SensorGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && w[i * n + j] > 0.0 {
                edges.push(Edge { src: i, dst: j, weight: w[i * n + j] });
            }
        }
    }
    SensorGraph::from_edges(n, edges).unwrap()
}

fn sym(n: usize, w: &[f64]) -> Tensor {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = w[i * n + j] + w[j * n + i];
        }
    }
    Tensor::new(&[n, n], s).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_walk_rows_are_stochastic(w in matrix(6)) {
        let op = random_walk(&graph_from(6, &w));
        for row in op.matrix().data().chunks(6) {
            let s: f64 = row.iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn poly_filter_is_linear_in_coefficients(
        w in matrix(5),
        a in prop::collection::vec(-2.0f64..2.0, 3),
        b in prop::collection::vec(-2.0f64..2.0, 3),
        x in prop::collection::vec(-5.0f64..5.0, 10),
    ) {
        let op = random_walk(&graph_from(5, &w));
        let x = Tensor::new(&[5, 2], x).unwrap();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        let lhs = poly_filter(&op, &ab, &x).unwrap();
        let pa = poly_filter(&op, &a, &x).unwrap();
        let pb = poly_filter(&op, &b, &x).unwrap();
        for i in 0..10 {
            prop_assert!((lhs.data()[i] - pa.data()[i] - pb.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn topk_keeps_subset_of_support(w in matrix(7), k in 1usize..7) {
        let a = Tensor::new(&[7, 7], w.clone()).unwrap();
        let s = topk_sparsify(&a, k).unwrap();
        for (row, orig) in s.data().chunks(7).zip(w.chunks(7)) {
            prop_assert!(row.iter().filter(|v| **v != 0.0).count() <= k);
            for (v, o) in row.iter().zip(orig) {
                prop_assert!(*v == 0.0 || *v == *o);
            }
        }
    }

    #[test]
    fn sym_normalize_preserves_symmetry(w in matrix(6)) {
        let out = sym_normalize(&sym(6, &w)).unwrap();
        let d = out.data();
        for i in 0..6 {
            for j in 0..6 {
                prop_assert!((d[i * 6 + j] - d[j * 6 + i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn learned_adjacency_is_one_sided(
        m1 in prop::collection::vec(-1.0f64..1.0, 15),
        m2 in prop::collection::vec(-1.0f64..1.0, 15),
        alpha in 0.1f64..5.0,
    ) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[5, 3], m1).unwrap());
        let b = tape.constant(Tensor::new(&[5, 3], m2).unwrap());
        let adj = antisymmetric_adjacency(&mut tape, a, b, alpha).unwrap();
        let d = tape.value(adj).data();
        for i in 0..5 {
            for j in 0..5 {
                prop_assert_eq!(d[i * 5 + j].min(d[j * 5 + i]), 0.0);
            }
        }
    }

    #[test]
    fn mixhop_with_full_retention_collapses(
        h in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 4),
        w in prop::collection::vec(-1.0f64..1.0, 3 * 16),
        adj in matrix(3),
    ) {
        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::new(&[2, 3, 4], h).unwrap());
        let a = tape.constant(sym_normalize(&sym(3, &adj)).unwrap());
        let sel: Vec<_> = w.chunks(16).map(|c| tape.constant(Tensor::new(&[4, 4], c.to_vec()).unwrap())).collect();
        let got = mixhop_propagate(&mut tape, hv, a, 1.0, &sel).unwrap();
        let mut want = tape.layer_norm(hv, 1e-5).unwrap();
        for &s in &sel {
            let t = tape.linear(hv, s).unwrap();
            want = tape.add(want, t).unwrap();
        }
        for (x, y) in tape.value(got).data().iter().zip(tape.value(want).data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn backbone_param_count_is_a_function_of_config(r in 2usize..12, seed_a: u64, seed_b: u64) {
        let mut c = BackboneConfig::new(r);
        c.d_embed = 4;
        c.d_hidden = 4;
        c.d_skip = 4;
        c.layers = 1;
        c.kernels = vec![2, 3];
        c.topk = r.min(3);
        let a = BackboneModel::new(c.clone(), seed_a).unwrap();
        let b = BackboneModel::new(c, seed_b).unwrap();
        prop_assert_eq!(a.count_params(FrozenFilter::All), b.count_params(FrozenFilter::All));
    }

    #[test]
    fn dropout_identity_in_eval_and_seeded_in_train(x in prop::collection::vec(-3.0f64..3.0, 1..40), seed: u64) {
        let run = |train: bool| {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::new(&[x.len()], x.clone()).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = dropout(&mut tape, v, 0.3, train, &mut rng).unwrap();
            tape.value(y).data().to_vec()
        };
        prop_assert_eq!(run(false), x.clone());
        prop_assert_eq!(run(true), run(true));
    }

    #[test]
    fn normalization_round_trips(
        data in prop::collection::vec(-1e4f64..1e4, 3 * 8 * 2),
    ) {
        let x = StTensor::new(3, 8, 2, data).unwrap();
        let (n, _) = normalize(&x);
        let back = denormalize(&n).unwrap();
        let inf = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() < 1e-6 * (1.0 + inf));
        }
    }

    #[test]
    fn imputation_without_gaps_is_identity(data in prop::collection::vec(-50.0f64..50.0, 3 * 10), w in matrix(3)) {
        let raw = RawSeries::new(
            vec!["a".into(), "b".into(), "c".into()],
            (0..10).collect(),
            data.clone(),
            vec!["speed".into()],
        )
        .unwrap();
        let out = impute_missing(&raw, &graph_from(3, &w), &ImputeConfig::default()).unwrap();
        prop_assert_eq!(out.data(), &data[..]);
    }

    #[test]
    fn splits_are_disjoint_and_windows_stay_inside(t in 40usize..200, tail in 0usize..20, l_in in 1usize..6, l_out in 1usize..6) {
        let Ok(plan) = split_chronological(t, SplitFractions::default(), tail) else { return Ok(()) };
        let rs = plan.ranges();
        for w in rs.windows(2) {
            prop_assert_eq!(w[0].1.end, w[1].1.start);
        }
        prop_assert_eq!(rs[0].1.start, 0);
        prop_assert_eq!(rs[3].1.end, t);
        for (_, r) in rs {
            if let Ok(ws) = window_samples(r.clone(), l_in, l_out, 1) {
                for o in &ws.origins {
                    prop_assert!(*o >= r.start && o + l_in + l_out <= r.end);
                }
            }
        }
    }

    #[test]
    fn metric_scaling_and_ordering(
        y in prop::collection::vec(1.0f64..100.0, 2 * 3 * 4),
        yhat in prop::collection::vec(1.0f64..100.0, 2 * 3 * 4),
        a in 0.1f64..10.0,
    ) {
        let t = |v: Vec<f64>| Tensor::new(&[2, 3, 4, 1], v).unwrap();
        let (ty, th) = (t(y.clone()), t(yhat.clone()));
        let base = mae(&ty, &th).unwrap();
        let scaled = mae(&t(y.iter().map(|v| a * v).collect()), &t(yhat.iter().map(|v| a * v).collect())).unwrap();
        prop_assert!((scaled - a * base).abs() < 1e-9 * (1.0 + scaled));
        prop_assert!(rmse(&ty, &th).unwrap() >= base - 1e-12);
        let flat = y.iter().zip(&yhat).map(|(p, q)| (p - q).abs()).sum::<f64>() / y.len() as f64;
        prop_assert!((flat - base).abs() < 1e-9);
        let rep = MetricReport::compute(&ty, &th).unwrap();
        prop_assert!(rep.rmse >= rep.mae - 1e-12);
        if a >= 1.0 {
            // clamp inactive before and after scaling
            let m = mape(&ty, &th, MAPE_EPS).unwrap();
            let ms = mape(&t(y.iter().map(|v| a * v).collect()), &t(yhat.iter().map(|v| a * v).collect()), MAPE_EPS).unwrap();
            prop_assert!((m - ms).abs() < 1e-9 * (1.0 + m));
        }
    }

    #[test]
    fn wasserstein_is_a_metric(
        a in prop::collection::vec(-10.0f64..10.0, 12),
        b in prop::collection::vec(-10.0f64..10.0, 12),
        c in prop::collection::vec(-10.0f64..10.0, 12),
    ) {
        let d = |x: &[f64], y: &[f64]| wasserstein1_1d(x, y).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
        if a != b {
            let mut sa = a.clone();
            let mut sb = b.clone();
            sa.sort_by(f64::total_cmp);
            sb.sort_by(f64::total_cmp);
            prop_assert_eq!(d(&a, &b) > 0.0, sa != sb);
        }
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn amplitude_shift_inverts(data in prop::collection::vec(-100.0f64..100.0, 2 * 9), alpha in 0.05f64..20.0) {
        let x = StTensor::new(2, 9, 1, data).unwrap();
        let y = apply_shift(&x, &ShiftSpec::amplitude(alpha)).unwrap();
        let back = apply_shift(&y, &ShiftSpec::amplitude(1.0 / alpha)).unwrap();
        for (p, q) in back.data().iter().zip(x.data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}
