use ndarray::{Array1, Array2};
use proptest::prelude::*;

use lipdiff::metrics::{config_hash, ks_statistic, sliced_wasserstein, wasserstein_1d};
use lipdiff::mixture::{log_sum_exp, GaussianMixture};
use lipdiff::predictor::Predictor;
use lipdiff::schedule::ScheduleSpec;
use lipdiff::sharing::{delta_sigma_max, PartitionSchedule, SharedAnalytic};
use lipdiff::train::RemapKind;

fn schedules() -> Vec<ScheduleSpec> {
    vec![
        ScheduleSpec::linear(),
        ScheduleSpec::quadratic(),
        ScheduleSpec::cosine(),
        ScheduleSpec::cosine_shift(),
        ScheduleSpec::zero_terminal_snr(),
        ScheduleSpec::linear().apply_modified_ns().unwrap(),
        ScheduleSpec::quadratic().apply_modified_ns().unwrap(),
        ScheduleSpec::cosine().apply_modified_ns().unwrap(),
    ]
}

fn sample_set(seed: u64, n: usize) -> Array2<f64> {
    GaussianMixture::default_ring()
        .sample(n, &mut lipdiff::rng::stream(seed, 0))
        .unwrap()
}

proptest! {
    #[test]
    fn alpha_sigma_on_unit_circle(tau in 0.0f64..=1.0, which in 0usize..8) {
        let spec = schedules()[which];
        let (a, s) = spec.alpha_sigma(tau).unwrap();
        prop_assert!((a * a + s * s - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&s));
    }

    #[test]
    fn alpha_decreases(t1 in 0.0f64..1.0, gap in 1e-6f64..0.5, which in 0usize..8) {
        let spec = schedules()[which];
        let t2 = (t1 + gap).min(1.0);
        prop_assert!(spec.alpha(t2).unwrap() <= spec.alpha(t1).unwrap());
    }

    #[test]
    fn partition_map_is_idempotent_and_left(t in 0.0f64..=1.0, t_tilde in 1e-3f64..=1.0, n in 1usize..200) {
        let p = PartitionSchedule::new(t_tilde, n).unwrap();
        let f = p.f_t(t);
        prop_assert_eq!(p.f_t(f), f);
        prop_assert!(f <= t);
        if t < t_tilde {
            prop_assert!(p.boundaries().contains(&f));
        } else {
            prop_assert_eq!(f, t);
        }
    }

    #[test]
    fn grid_condition_is_idempotent(k in 1usize..=1000, t_tilde in 0.01f64..=1.0, n in 1usize..50) {
        let p = PartitionSchedule::new(t_tilde, n).unwrap();
        let g = p.on_grid(1000).unwrap();
        let c = g.condition(k as f64 / 1000.0);
        prop_assert_eq!(g.condition(c), c);
    }

    #[test]
    fn delta_sigma_max_is_first_interval(t_tilde in 0.01f64..=0.2, n in 1usize..100, which in 0usize..3) {
        let spec = schedules()[which];
        let p = PartitionSchedule::new(t_tilde, n).unwrap();
        let first = spec.sigma(p.boundaries()[1]).unwrap() - spec.sigma(0.0).unwrap();
        prop_assert_eq!(delta_sigma_max(&spec, &p).unwrap(), first);
    }

    #[test]
    fn remap_round_trips_on_grid(k in 1usize..1000) {
        let t = k as f64 / 1000.0;
        for r in [RemapKind::InverseT, RemapKind::InverseSigmoid] {
            prop_assert!((r.inverse(r.forward(t, 1000), 1000) - t).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..10), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&v) - c).abs() < 1e-9);
    }

    #[test]
    fn ks_is_symmetric_and_bounded(
        a in prop::collection::vec(-5.0f64..5.0, 1..60),
        b in prop::collection::vec(-5.0f64..5.0, 1..60),
    ) {
        let d = ks_statistic(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, ks_statistic(&b, &a).unwrap());
        prop_assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn wasserstein_1d_symmetric_and_shift_equals_offset(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        shift in -3.0f64..3.0,
    ) {
        let mut x = a.clone();
        let mut y: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let d = wasserstein_1d(&mut x, &mut y);
        prop_assert!((d - shift.abs()).abs() < 1e-9);
        let (mut x2, mut y2) = (a.clone(), a.iter().map(|v| v + shift).collect::<Vec<_>>());
        prop_assert_eq!(d, wasserstein_1d(&mut y2, &mut x2));
    }

    #[test]
    fn sliced_wasserstein_symmetric(s1 in 0u64..1000, s2 in 0u64..1000, n in 5usize..80, m in 5usize..80) {
        let (a, b) = (sample_set(s1, n), sample_set(s2 + 5000, m));
        let ab = sliced_wasserstein(a.view(), b.view(), 16, 1).unwrap().value;
        let ba = sliced_wasserstein(b.view(), a.view(), 16, 1).unwrap().value;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(sliced_wasserstein(a.view(), a.view(), 16, 1).unwrap().value, 0.0);
    }

    #[test]
    fn config_hash_ignores_key_order(keys in prop::collection::btree_map("[a-z]{1,6}", -1e6f64..1e6, 1..8), seed in any::<u64>()) {
        let mut pairs: Vec<(String, f64)> = keys.into_iter().collect();
        let forward: serde_json::Map<String, serde_json::Value> =
            pairs.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect();
        let mut rng = lipdiff::rng::stream(seed, 0);
        rand::seq::SliceRandom::shuffle(pairs.as_mut_slice(), &mut rng);
        let shuffled: serde_json::Map<String, serde_json::Value> =
            pairs.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect();
        let wrap = |m| serde_json::json!({ "outer": { "inner": m }, "x": 1 });
        prop_assert_eq!(config_hash(&wrap(forward)).unwrap(), config_hash(&wrap(shuffled)).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shared_predictor_constant_within_sub_interval(
        u in 0.0f64..1.0,
        v in 0.0f64..1.0,
        i in 0usize..5,
        x0 in -2.0f64..2.0,
        x1 in -2.0f64..2.0,
    ) {
        let part = PartitionSchedule::new(0.1, 5).unwrap();
        let p = SharedAnalytic::new(GaussianMixture::default_ring(), ScheduleSpec::linear(), part.clone()).unwrap();
        let b = part.boundaries();
        let w = b[i + 1] - b[i];
        let x = Array1::from(vec![x0, x1]);
        let e1 = p.predict(x.view(), b[i] + u * w * 0.999).unwrap();
        let e2 = p.predict(x.view(), b[i] + v * w * 0.999).unwrap();
        prop_assert_eq!(e1, e2);
    }
}
