//! Property tests for the invariants the library promises.

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use onestep::annealing::{anneal_multiplier, AnnealConfig};
use onestep::autodiff::{Graph, Matrix};
use onestep::evaluation::{mmd, mode_coverage, sliced_w2};
use onestep::losses::{consistency_loss, reconstruction_loss, Distance};
use onestep::parameterizations::{convert, Prediction, PredictionKind};
use onestep::schedulers::{build_schedule, standard_normal, ScheduleConfig, ScheduleKind, ScheduleTable};
use onestep::weight_algebra::{apply_lora, combine, CoefficientCheck, DeltaEntry, WeightDelta, WeightSet};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn schedule_config() -> impl Strategy<Value = ScheduleConfig> {
    (
        prop_oneof![
            Just(ScheduleKind::Linear),
            Just(ScheduleKind::ScaledLinear),
            Just(ScheduleKind::Cosine)
        ],
        10usize..400,
        1e-5f64..1e-3,
        1e-3f64..0.05,
        any::<bool>(),
    )
        .prop_map(|(kind, n, b0, b1, zt)| ScheduleConfig {
            num_steps: n,
            schedule_kind: kind,
            beta_start: b0,
            beta_end: b1,
            zero_terminal_snr: zt,
        })
}

fn sd() -> ScheduleTable {
    build_schedule(&ScheduleConfig::sd()).unwrap()
}

fn weight_set(seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = WeightSet::new();
    w.insert("a", standard_normal((3, 4), &mut rng));
    w.insert("b", standard_normal((1, 4), &mut rng));
    w.insert("c", standard_normal((4, 2), &mut rng));
    w
}

fn assert_close(a: &WeightSet, b: &WeightSet, tol: f64) {
    for ((na, x), (nb, y)) in a.iter().zip(b.iter()) {
        assert_eq!(na, nb);
        for (u, v) in x.iter().zip(y.iter()) {
            assert!((u - v).abs() <= tol, "{na}: {u} vs {v}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coefficients_lie_on_the_unit_circle(cfg in schedule_config()) {
        let table = build_schedule(&cfg).unwrap();
        for t in 0..cfg.num_steps {
            let s = table.signal_coef[t].powi(2) + table.noise_coef[t].powi(2);
            prop_assert!((s - 1.0).abs() < 1e-6, "t={t}: {s}");
        }
    }

    #[test]
    fn snr_strictly_decreases(cfg in schedule_config()) {
        let table = build_schedule(&cfg).unwrap();
        for t in 1..cfg.num_steps {
            prop_assert!(table.snr[t] < table.snr[t - 1], "t={t}: {} !< {}", table.snr[t], table.snr[t - 1]);
        }
        if cfg.zero_terminal_snr {
            prop_assert_eq!(table.snr[cfg.num_steps - 1], 0.0);
        }
    }

    #[test]
    fn corrupt_is_linear(
        x1 in matrix(4, 3), x2 in matrix(4, 3), e1 in matrix(4, 3), e2 in matrix(4, 3),
        a in -2.0f64..2.0, b in -2.0f64..2.0, t in 0usize..1000,
    ) {
        let table = sd();
        let lhs = table.corrupt(&(&x1 * a + &x2 * b), &(&e1 * a + &e2 * b), t).unwrap();
        let rhs = table.corrupt(&x1, &e1, t).unwrap() * a + table.corrupt(&x2, &e2, t).unwrap() * b;
        for (u, v) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_terminal_corruption_is_pure_noise(x in matrix(5, 2), e in matrix(5, 2)) {
        let table = build_schedule(&ScheduleConfig::sd().with_zero_terminal_snr(true)).unwrap();
        prop_assert_eq!(table.corrupt(&x, &e, 999).unwrap(), e);
    }

    #[test]
    fn conversion_cycles_close(
        value in matrix(6, 2), x_t in matrix(6, 2), t in 0usize..999, zero_terminal in any::<bool>(),
        path in prop::sample::select(vec![
            [PredictionKind::Eps, PredictionKind::X0, PredictionKind::V],
            [PredictionKind::Eps, PredictionKind::V, PredictionKind::X0],
            [PredictionKind::X0, PredictionKind::Eps, PredictionKind::V],
            [PredictionKind::X0, PredictionKind::V, PredictionKind::Eps],
            [PredictionKind::V, PredictionKind::Eps, PredictionKind::X0],
            [PredictionKind::V, PredictionKind::X0, PredictionKind::Eps],
        ]),
    ) {
        let table = build_schedule(&ScheduleConfig::sd().with_zero_terminal_snr(zero_terminal)).unwrap();
        let ts = vec![t; 6];
        let wrap = |v: Matrix, kind| Prediction { value: v, kind, t: ts.clone(), schedule_id: table.id() };
        let b = convert(&wrap(value.clone(), path[0]), &x_t, path[1], &table).unwrap();
        let c = convert(&wrap(b, path[1]), &x_t, path[2], &table).unwrap();
        let back = convert(&wrap(c, path[2]), &x_t, path[0], &table).unwrap();
        for (u, v) in back.iter().zip(value.iter()) {
            prop_assert!((u - v).abs() < 1e-6, "{path:?} at t={t}: {u} vs {v}");
        }
    }

    #[test]
    fn v_to_x0_is_total_at_zero_snr(value in matrix(4, 2), x_t in matrix(4, 2)) {
        let table = build_schedule(&ScheduleConfig::sd().with_zero_terminal_snr(true)).unwrap();
        let p = Prediction { value: value.clone(), kind: PredictionKind::V, t: vec![999; 4], schedule_id: table.id() };
        let x0 = convert(&p, &x_t, PredictionKind::X0, &table).unwrap();
        // signal = 0, noise = 1: x0 = -v.
        for (u, v) in x0.iter().zip(value.iter()) {
            prop_assert!((u + v).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_is_affine_in_each_argument(
        s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000, s4 in 0u64..1000,
        alpha in -2.0f64..2.0, beta in -2.0f64..2.0, lam in -1.0f64..2.0,
    ) {
        let (b, u, t, u2) = (weight_set(s1), weight_set(s2), weight_set(s3), weight_set(s4));
        let f = |u: &WeightSet| combine(&b, u, &t, alpha, beta, CoefficientCheck::Override).unwrap();
        let mut mix = u.clone();
        for (name, w) in mix.iter_mut() {
            *w = &*w * lam + u2.get(name).unwrap() * (1.0 - lam);
        }
        let mut expected = f(&u);
        let other = f(&u2);
        for (name, w) in expected.iter_mut() {
            *w = &*w * lam + other.get(name).unwrap() * (1.0 - lam);
        }
        assert_close(&f(&mix), &expected, 1e-9);
    }

    #[test]
    fn combine_of_identical_sets_is_identity(s in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let b = weight_set(s);
        let out = combine(&b, &b, &b, alpha, beta, CoefficientCheck::Override).unwrap();
        assert_close(&out, &b, 1e-12);
    }

    #[test]
    fn lora_commutes_with_combine_on_disjoint_targets(
        s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000, alpha in 0.05f64..1.0, beta in 0.05f64..1.0,
        scale in -1.0f64..1.0, da in matrix(2, 4), db in matrix(3, 2), dc in matrix(4, 2),
    ) {
        let (base, up, tuned) = (weight_set(s1), weight_set(s2), weight_set(s3));
        let mut on_a = WeightDelta::new();
        on_a.insert("a", DeltaEntry::LowRank { a: da, b: db });
        let mut on_c = WeightDelta::new();
        on_c.insert("c", DeltaEntry::Dense(dc));
        let merged = combine(&base, &up, &tuned, alpha, beta, CoefficientCheck::Strict).unwrap();
        let lhs = apply_lora(&apply_lora(&merged, &on_a, scale).unwrap(), &on_c, scale).unwrap();
        let rhs = apply_lora(&apply_lora(&merged, &on_c, scale).unwrap(), &on_a, scale).unwrap();
        assert_close(&lhs, &rhs, 1e-12);
        let pre = |w: &WeightSet| apply_lora(w, &on_a, scale).unwrap();
        let merged_after = combine(&pre(&base), &pre(&up), &pre(&tuned), alpha, beta, CoefficientCheck::Strict).unwrap();
        let merged_before = pre(&merged);
        assert_close(&merged_after, &merged_before, 1e-9);
        // The untouched tensors agree with a plain merge.
        prop_assert_eq!(merged_after.get("b"), merged.get("b"));
    }

    #[test]
    fn anneal_multiplier_is_a_staircase(k in 2usize..10, extra in 0u64..500) {
        let n_total = k as u64 + extra;
        let cfg = AnnealConfig { enabled: true, segments: k, base_weight: 1.0 };
        let mut prev = f64::INFINITY;
        let mut distinct: Vec<f64> = Vec::new();
        for n in 0..n_total {
            let w = anneal_multiplier(n, n_total, &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&w));
            prop_assert!(w <= prev);
            if distinct.last() != Some(&w) {
                distinct.push(w);
            }
            prev = w;
        }
        prop_assert_eq!(distinct.len(), k);
        prop_assert_eq!(distinct[0], 1.0);
        prop_assert_eq!(*distinct.last().unwrap(), 0.0);
        for (j, w) in distinct.iter().enumerate() {
            prop_assert!((w - (1.0 - j as f64 / (k - 1) as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_losses_vanish_only_on_equal_pairs(a in matrix(5, 3), b in matrix(5, 3), w in 0.1f64..10.0) {
        let lam = vec![w; 5];
        let g = Graph::new();
        let s = g.variable(a.clone());
        let tgt = g.constant(b.clone());
        let same = g.constant(a.clone());
        let con = g.scalar(consistency_loss(&g, s, tgt, &lam, &Distance::Mse, None).unwrap());
        let rec = g.scalar(reconstruction_loss(&g, s, &b, &lam, &Distance::Mse, None).unwrap());
        let con0 = g.scalar(consistency_loss(&g, s, same, &lam, &Distance::Mse, None).unwrap());
        let rec0 = g.scalar(reconstruction_loss(&g, s, &a, &lam, &Distance::Mse, None).unwrap());
        prop_assert!(con >= 0.0 && rec >= 0.0);
        prop_assert_eq!(con0, 0.0);
        prop_assert_eq!(rec0, 0.0);
        if a != b {
            prop_assert!(con > 0.0 && rec > 0.0);
        }
    }

    #[test]
    fn relocating_strays_onto_an_uncovered_center_never_lowers_coverage(
        hits in prop::collection::vec(0usize..40, 4), strays in 1usize..40, moved in 1usize..40,
        target in 0usize..4, min_mass in 0.01f64..0.3,
    ) {
        let centers = ndarray::array![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let mut rows: Vec<[f64; 2]> = Vec::new();
        for (c, &h) in hits.iter().enumerate() {
            for _ in 0..h {
                rows.push([centers[[c, 0]], centers[[c, 1]]]);
            }
        }
        let stray_at = rows.len();
        for _ in 0..strays {
            rows.push([5.0, 5.0]);
        }
        let to_matrix = |rows: &[[f64; 2]]| {
            Array2::from_shape_vec((rows.len(), 2), rows.iter().flatten().copied().collect()).unwrap()
        };
        let before = mode_coverage(&to_matrix(&rows), &centers, 1.0, min_mass).unwrap();
        let target_covered = hits[target] as f64 / rows.len() as f64 >= min_mass;
        prop_assume!(!target_covered);
        for r in rows.iter_mut().skip(stray_at).take(moved.min(strays)) {
            *r = [centers[[target, 0]], centers[[target, 1]]];
        }
        let after = mode_coverage(&to_matrix(&rows), &centers, 1.0, min_mass).unwrap();
        prop_assert!(after >= before, "{before} -> {after}");
    }

    #[test]
    fn metrics_are_deterministic(a in matrix(20, 2), b in matrix(20, 2), seed in any::<u64>()) {
        let bw = [0.5, 1.0];
        prop_assert_eq!(mmd(&a, &b, &bw).unwrap(), mmd(&a, &b, &bw).unwrap());
        prop_assert_eq!(sliced_w2(&a, &b, 8, seed).unwrap(), sliced_w2(&a, &b, 8, seed).unwrap());
        let c = ndarray::array![[0.0, 0.0], [1.0, 1.0]];
        prop_assert_eq!(mode_coverage(&a, &c, 0.5, 0.05).unwrap(), mode_coverage(&a, &c, 0.5, 0.05).unwrap());
    }
}
