use codesign::exec::Exec;
use codesign::geometry::{basis_derivative, basis_value, make_clamped_knots, make_flat_surface};
use codesign::gradcheck::random_surface;
use codesign::layout::{
    apply_domain_constraints, project_occupancy, sensor_length, signal_vector, ConstraintMode,
};
use codesign::losses::{
    loss_overlap, min_space_penalty, sampled_min_distance, segments_intersect, sensor_pairs,
    soft_min_distance,
};
use codesign::rng::{substream, Stream};
use codesign::{Sensor, SensorLayout};
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f64> {
    0.0..=1.0f64
}

fn sensor() -> impl Strategy<Value = Sensor> {
    (unit(), unit(), unit(), unit()).prop_map(|(a, b, c, d)| Sensor::new(a, b, c, d))
}

fn wild_sensor() -> impl Strategy<Value = Sensor> {
    let c = || -2.0..3.0f64;
    (c(), c(), c(), c()).prop_map(|(a, b, c, d)| Sensor::new(a, b, c, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_is_a_nonnegative_partition_of_unity(count in 4usize..20, u in unit()) {
        let knots = make_clamped_knots(count).unwrap();
        let values: Vec<f64> = (0..count).map(|i| basis_value(&knots, i, u).unwrap()).collect();
        prop_assert!(values.iter().all(|&b| b >= -1e-15));
        prop_assert!((values.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let slope: f64 = (0..count).map(|i| basis_derivative(&knots, i, u).unwrap()).sum();
        prop_assert!(slope.abs() <= 1e-9);
    }

    #[test]
    fn flat_surface_lengths_are_euclidean(
        s in sensor(),
        w in 10.0..500.0f64,
        h in 10.0..500.0f64,
        k in 2usize..40,
    ) {
        let flat = make_flat_surface(6, 5, w, h).unwrap();
        let exact = ((s.u_e - s.u_s) * w).hypot((s.v_e - s.v_s) * h);
        let got = sensor_length(&flat, &s, k).unwrap();
        prop_assert!((got - exact).abs() <= 1e-9 * (1.0 + exact));
    }

    #[test]
    fn length_is_direction_free_and_bounded_by_chord(seed in any::<u64>(), s in sensor(), k in 2usize..24) {
        let surface = random_surface(&mut substream(seed, Stream::Fixture)).unwrap();
        let forward = sensor_length(&surface, &s, k).unwrap();
        let backward = sensor_length(&surface, &s.reversed(), k).unwrap();
        prop_assert!((forward - backward).abs() <= 1e-9 * (1.0 + forward));
        let a = surface.point(s.u_s, s.v_s).unwrap();
        let b = surface.point(s.u_e, s.v_e).unwrap();
        prop_assert!(forward + 1e-9 >= (a - b).norm());
    }

    #[test]
    fn occupancy_is_a_monotone_unit_interval_map(a in -50.0..50.0f64, d in 0.0..10.0f64, alpha in 0.1..50.0f64) {
        let lo = project_occupancy(a, alpha);
        let hi = project_occupancy(a + d, alpha);
        prop_assert!((0.0..=1.0).contains(&lo));
        prop_assert!(lo <= hi);
        prop_assert!((project_occupancy(-a, alpha) - (1.0 - lo)).abs() <= 1e-12);
    }

    #[test]
    fn signals_are_masked_lengths(sensors in prop::collection::vec(sensor(), 1..8), seed in any::<u64>()) {
        let logits: Vec<f64> = (0..sensors.len()).map(|k| (k as f64) - 3.0 + (seed % 7) as f64 * 0.1).collect();
        let layout = SensorLayout::new(sensors, logits, 10.0).unwrap();
        let flat = make_flat_surface(5, 5, 100.0, 100.0).unwrap();
        let signals = signal_vector(&flat, &layout, 16).unwrap();
        for (k, s) in layout.sensors.iter().enumerate() {
            let expect = layout.occupancy()[k] * sensor_length(&flat, s, 16).unwrap();
            prop_assert!((signals.values[k] - expect).abs() <= 1e-12 * (1.0 + expect));
        }
    }

    #[test]
    fn projection_lands_in_the_feasible_set(
        sensors in prop::collection::vec(wild_sensor(), 1..5),
        mode in prop::sample::select(vec![ConstraintMode::Free, ConstraintMode::HalfDomain, ConstraintMode::MirroredPairs]),
    ) {
        let mut sensors = sensors;
        if mode == ConstraintMode::MirroredPairs && sensors.len() % 2 == 1 {
            sensors.pop();
        }
        prop_assume!(!sensors.is_empty());
        let logits = (0..sensors.len()).map(|k| k as f64 * 0.3).collect();
        let layout = SensorLayout { sensors, logits, alpha: 10.0 };
        let p = apply_domain_constraints(&layout, mode).unwrap();
        prop_assert!(p.validate().is_ok());
        prop_assert!(p.sensors.iter().all(|s| s.in_unit_square()));
        if mode == ConstraintMode::HalfDomain {
            prop_assert!(p.sensors.iter().all(|s| s.u_s <= 0.5 && s.u_e <= 0.5));
        }
        if mode == ConstraintMode::MirroredPairs {
            for pair in p.sensors.chunks(2) {
                prop_assert_eq!(pair[1], pair[0].mirrored());
            }
            for pair in p.logits.chunks(2) {
                prop_assert_eq!(pair[0], pair[1]);
            }
        }
        prop_assert_eq!(apply_domain_constraints(&p, mode).unwrap(), p);
    }

    #[test]
    fn overlap_is_bounded_and_orientation_free(a in sensor(), b in sensor(), alpha in 1.0..100.0f64) {
        let o = loss_overlap(&a, &b, alpha);
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert!((o - loss_overlap(&b, &a, alpha)).abs() <= 1e-15);
        prop_assert!((o - loss_overlap(&a.reversed(), &b, alpha)).abs() <= 1e-15);
        prop_assert!((o - loss_overlap(&a, &b.reversed(), alpha)).abs() <= 1e-15);
        prop_assert_eq!(segments_intersect(&a, &b), segments_intersect(&b, &a));
    }

    #[test]
    fn separated_boxes_never_intersect(a in sensor(), b in sensor()) {
        let shifted = Sensor::new(b.u_s + 1.5, b.v_s, b.u_e + 1.5, b.v_e);
        prop_assert!(!segments_intersect(&a, &shifted));
    }

    #[test]
    fn soft_min_brackets_the_sampled_minimum(
        seed in any::<u64>(),
        a in sensor(),
        b in sensor(),
        k in 2usize..12,
        beta in 1.0..200.0f64,
    ) {
        let surface = random_surface(&mut substream(seed, Stream::Fixture)).unwrap();
        let soft = soft_min_distance(&surface, &a, &b, k, beta).unwrap();
        let hard = sampled_min_distance(&surface, &a, &b, k).unwrap();
        let slack = ((k * k) as f64).ln() / beta;
        prop_assert!(soft <= hard + 1e-9);
        prop_assert!(soft >= hard - slack - 1e-9);
    }

    #[test]
    fn min_space_penalty_is_a_one_sided_square(d in -10.0..100.0f64, tau in 0.0..50.0f64) {
        let p = min_space_penalty(d, tau);
        prop_assert!(p >= 0.0);
        if d >= tau {
            prop_assert_eq!(p, 0.0);
        } else {
            prop_assert!((p - (tau - d).powi(2)).abs() <= 1e-12 * (1.0 + p));
        }
    }

    #[test]
    fn pairs_cover_each_unordered_pair_once(n in 0usize..30) {
        let pairs = sensor_pairs(n);
        prop_assert_eq!(pairs.len(), n * n.saturating_sub(1) / 2);
        prop_assert!(pairs.iter().all(|&(i, j)| i < j && j < n));
    }

    #[test]
    fn parallel_map_preserves_order(n in 0usize..500) {
        let f = |i: usize| (i as f64).sqrt().sin();
        prop_assert_eq!(Exec::Parallel.map(n, f), Exec::Sequential.map(n, f));
    }
}

#[test]
fn odd_mirrored_layouts_are_rejected() {
    let layout =
        SensorLayout::new(vec![Sensor::new(0.1, 0.1, 0.2, 0.2); 3], vec![0.0; 3], 10.0).unwrap();
    assert!(apply_domain_constraints(&layout, ConstraintMode::MirroredPairs).is_err());
}

#[test]
fn layouts_reject_mismatched_logits() {
    assert!(SensorLayout::new(vec![Sensor::new(0.1, 0.1, 0.2, 0.2)], vec![], 10.0).is_err());
}
