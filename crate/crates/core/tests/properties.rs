use abe_core::divergence::{divergence_score, stopping_time_with, DivergenceOptions, IntervalUnit};
use abe_core::snapshot::{ActivationSnapshot, LayerActivations, PopulationKind};
use abe_core::{compute_moments, trajectory_from_snapshots, Execution, Moment, Trajectory};
use proptest::prelude::*;

/// Activations on a 1/16 grid in [-16, 16] with a power-of-two batch size.
/// Means, squares and every partial sum are then exact in f64, so
/// order-dependent rounding cannot hide behind tolerances.
fn dyadic_batch(max_d: usize) -> impl Strategy<Value = LayerActivations> {
    (prop::sample::select(vec![1usize, 2, 4, 8, 16]), 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(-256i32..=256, n * d)
            .prop_map(move |v| LayerActivations::new(0, n, d, v.into_iter().map(|x| x as f32 / 16.0).collect()))
    })
}

fn float_batch(max_n: usize, max_d: usize) -> impl Strategy<Value = LayerActivations> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(-1e3f32..1e3, n * d).prop_map(move |v| LayerActivations::new(0, n, d, v))
    })
}

fn permuted(batch: &LayerActivations, rows: &[usize], cols: &[usize]) -> LayerActivations {
    let d = batch.n_features;
    let values = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| batch.values[r * d + c]))
        .collect();
    LayerActivations::new(0, batch.n_examples, d, values)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    v
}

proptest! {
    #[test]
    fn moments_ignore_example_and_feature_order(batch in dyadic_batch(24), seed in any::<u64>()) {
        let rows = shuffled(batch.n_examples, seed);
        let cols = shuffled(batch.n_features, seed ^ 1);
        let a = compute_moments(&batch);
        let b = compute_moments(&permuted(&batch, &rows, &cols));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn moments_ignore_order_for_general_floats(batch in float_batch(16, 24), seed in any::<u64>()) {
        let rows = shuffled(batch.n_examples, seed);
        let cols = shuffled(batch.n_features, seed ^ 1);
        let a = compute_moments(&batch).as_array();
        let b = compute_moments(&permuted(&batch, &rows, &cols)).as_array();
        // m4 is a difference of two sums, so bound its error by their size.
        let scale = a[2].abs() + a[3].abs() + 1e-300;
        for k in 0..4 {
            prop_assert!((a[k] - b[k]).abs() <= 1e-12 * scale.max(a[k].abs()), "{k}: {} vs {}", a[k], b[k]);
        }
    }

    #[test]
    fn moments_scale_with_activations(batch in dyadic_batch(24), c in prop::sample::select(vec![0.5f64, 2.0, 4.0, 0.25])) {
        let base = compute_moments(&batch).as_array();
        let scaled = LayerActivations::new(0, batch.n_examples, batch.n_features, batch.values.iter().map(|v| v * c as f32).collect());
        let m = compute_moments(&scaled).as_array();
        prop_assert_eq!(m, [c * base[0], c * c * base[1], c * c * base[2], c * c * base[3]]);
    }

    #[test]
    fn single_example_has_equal_m2_m3(row in prop::collection::vec(-1e6f32..1e6, 1..64)) {
        let d = row.len();
        let m = compute_moments(&LayerActivations::new(0, 1, d, row));
        prop_assert_eq!(m.m2, m.m3);
    }

    #[test]
    fn moments_are_deterministic(batch in float_batch(32, 64)) {
        let a = compute_moments(&batch).as_array().map(f64::to_bits);
        let b = compute_moments(&batch).as_array().map(f64::to_bits);
        prop_assert_eq!(a, b);
    }
}

fn snapshots_strategy() -> impl Strategy<Value = Vec<ActivationSnapshot>> {
    (2..=9usize, 1..=4usize, 1..=5usize, 1..=6usize).prop_flat_map(|(t, layers, n, d)| {
        prop::collection::vec(-100f32..100.0, t * layers * n * d).prop_map(move |v| {
            let mut chunks = v.chunks(n * d);
            (0..t)
                .map(|c| {
                    let ls = (0..layers)
                        .map(|l| LayerActivations::new(l as u32, n, d, chunks.next().unwrap().to_vec()))
                        .collect();
                    ActivationSnapshot::new(3 * c as u64, PopulationKind::SourceValid, ls)
                })
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn trajectory_schedule_does_not_matter(snaps in snapshots_strategy()) {
        let par = trajectory_from_snapshots("p", &snaps, Execution::Parallel).unwrap();
        let seq = trajectory_from_snapshots("p", &snaps, Execution::Sequential).unwrap();
        prop_assert_eq!(par, seq);
    }

    #[test]
    fn trajectory_prefix_matches_sub_run(snaps in snapshots_strategy(), k in 1usize..9) {
        let k = k.min(snaps.len());
        let full = trajectory_from_snapshots("p", &snaps, Execution::Sequential).unwrap();
        let sub = trajectory_from_snapshots("p", &snaps[..k], Execution::Sequential).unwrap();
        prop_assert_eq!(full.prefix(k).unwrap(), sub);
    }
}

fn trajectory_pair() -> impl Strategy<Value = (Trajectory, Trajectory, u64)> {
    (3..=15usize, 1..=4usize).prop_flat_map(|(t, layers)| {
        (
            prop::collection::vec(prop::array::uniform4(-10.0f64..10.0), t * layers),
            prop::collection::vec(prop::array::uniform4(-10.0f64..10.0), t * layers),
            2..t,
        )
            .prop_map(move |(a, b, end)| {
                let cps: Vec<u64> = (0..t as u64).map(|i| i * i + 1).collect();
                let tv = cps[end];
                (
                    Trajectory::new("target", cps.clone(), layers, a).unwrap(),
                    Trajectory::new("source_valid", cps, layers, b).unwrap(),
                    tv,
                )
            })
    })
}

proptest! {
    #[test]
    fn report_independent_of_schedule((tgt, src, tv) in trajectory_pair(), raw in any::<bool>()) {
        let unit = if raw { IntervalUnit::Raw } else { IntervalUnit::Rank };
        let seq = DivergenceOptions { interval_unit: unit, execution: Execution::Sequential };
        let par = DivergenceOptions { interval_unit: unit, execution: Execution::Parallel };
        prop_assert_eq!(
            stopping_time_with(&tgt, &src, tv, &seq).unwrap(),
            stopping_time_with(&tgt, &src, tv, &par).unwrap()
        );
    }

    #[test]
    fn stop_is_observed_and_not_after_validation((tgt, src, tv) in trajectory_pair()) {
        let r = stopping_time_with(&tgt, &src, tv, &DivergenceOptions::default()).unwrap();
        prop_assert!(tgt.checkpoints().contains(&r.t_hat));
        prop_assert!(r.t_hat <= tv);
        prop_assert_eq!(r.diverged, r.t_hat < tv);
    }

    #[test]
    fn identical_populations_never_diverge((tgt, _src, tv) in trajectory_pair()) {
        let r = stopping_time_with(&tgt, &tgt, tv, &DivergenceOptions::default()).unwrap();
        prop_assert!(!r.diverged);
        prop_assert_eq!(r.t_hat, tv);
    }

    #[test]
    fn negative_rescaling_flips_rho((tgt, src, tv) in trajectory_pair(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let cps = tgt.checkpoints().to_vec();
        let end = cps.iter().position(|c| *c == tv).unwrap();
        for moment in Moment::ALL {
            let x = tgt.slice_values(0, moment).unwrap();
            let y = src.slice_values(0, moment).unwrap();
            let flipped: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
            for i in 0..end - 1 {
                let w = divergence_score(&x, &y, &cps, cps[i], tv, IntervalUnit::Rank).unwrap();
                let f = divergence_score(&flipped, &y, &cps, cps[i], tv, IntervalUnit::Rank).unwrap();
                match (w.rho, f.rho) {
                    (Some(r), Some(q)) => prop_assert!((r + q).abs() <= 1e-12, "{r} vs {q}"),
                    (r, q) => prop_assert_eq!(r.is_none(), q.is_none()),
                }
            }
        }
    }
}
