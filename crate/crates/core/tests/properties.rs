use des_core::bench::{aggregate_runs, compute_profiles, LabelledRun, Metric, MetricRow, RunRecord};
use des_core::dataio::{parse_libsvm_str, partition_uniform, write_libsvm, ParseOptions};
use des_core::localsolver::{run_local_es, LocalConfig};
use des_core::mutation::sample;
use des_core::objective::{classification_error, FnObjective};
use des_core::*;
use proptest::prelude::*;

fn example() -> impl Strategy<Value = SparseExample> {
    (
        prop::collection::btree_map(0u32..50, -1e3f64..1e3, 0..8),
        prop::bool::ANY,
    )
        .prop_map(|(entries, pos)| {
            let (idx, val): (Vec<u32>, Vec<f64>) = entries.into_iter().unzip();
            SparseExample::new(idx, val, if pos { 1 } else { -1 }).unwrap()
        })
}

fn dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(example(), 1..20).prop_map(|ex| {
        let dim = ex.iter().map(|e| e.min_dim()).max().unwrap().max(1);
        Dataset::new(ex, dim).unwrap()
    })
}

fn record(losses: &[f64]) -> RunRecord {
    let mut rec = RunRecord::new("a", "");
    for (t, &l) in losses.iter().enumerate() {
        rec.push(MetricRow {
            round: t,
            cum_evals: t as u64,
            train_loss: l,
            train_err: 0.0,
            test_err: 0.0,
            wall_ms: 0.0,
        })
        .unwrap();
    }
    rec
}

/// Runs for `algos x instances` cells with one seed each; losses start at 1.
fn matrix(curves: &[Vec<f64>], algos: usize, instances: usize) -> Vec<LabelledRun> {
    let mut runs = Vec::new();
    for a in 0..algos {
        for i in 0..instances {
            let mut losses = vec![1.0];
            losses.extend(&curves[a * instances + i]);
            runs.push(LabelledRun {
                algorithm: format!("algo{a}"),
                instance: format!("inst{i}"),
                seed: 0,
                record: record(&losses),
            });
        }
    }
    runs
}

proptest! {
    #[test]
    fn libsvm_text_round_trips(data in dataset()) {
        let mut text = Vec::new();
        write_libsvm(&data, &mut text).unwrap();
        let opts = ParseOptions { dim: Some(data.dim()), ..Default::default() };
        let back = parse_libsvm_str(std::str::from_utf8(&text).unwrap(), &opts).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn partitions_cover_disjointly(n in 1usize..300, m in 1usize..20, seed in any::<u64>()) {
        prop_assume!(m <= n);
        let plan = partition_uniform(n, m, &RngStream::new(seed, 0, 0, Purpose::Partition)).unwrap();
        let mut all: Vec<usize> = plan.shards().concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = plan.shards().iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn local_es_never_worsens(
        seed in any::<u64>(),
        alpha in 0.01f64..20.0,
        weights in prop::collection::vec(0.1f64..10.0, 6),
        kind in prop::sample::select(vec![
            MutationKind::StandardGaussian,
            MutationKind::MixtureGaussian,
            MutationKind::MixtureRademacher,
        ]),
    ) {
        let w = weights.clone();
        let obj = FnObjective::new(6, move |x: &[f64]| {
            x.iter().zip(&w).map(|(v, a)| a * (v - 1.0).abs().powf(1.5)).sum()
        });
        let model = MutationModel::new(kind, 6, 2).unwrap();
        let cfg = LocalConfig::new(60, model, alpha).unwrap();
        let r = run_local_es(&[0.0; 6], &cfg, &obj, &RngStream::new(seed, 0, 0, Purpose::Mutation)).unwrap();
        prop_assert!(r.parent_values.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(r.accepted_count <= 60);
    }

    #[test]
    fn mixture_draws_are_sparse(seed in any::<u64>(), n in 1usize..64, l in 1usize..8) {
        for kind in [MutationKind::MixtureGaussian, MutationKind::MixtureRademacher] {
            let model = MutationModel::new(kind, n, l).unwrap();
            let u = sample(&model, &RngStream::new(seed, 1, 2, Purpose::Mutation));
            prop_assert_eq!(u.len(), n);
            prop_assert!(u.iter().filter(|v| **v != 0.0).count() <= l);
        }
    }

    #[test]
    fn classification_error_ignores_positive_scale(
        data in dataset(),
        x in prop::collection::vec(-5f64..5.0, 50),
        scale in 1e-3f64..1e3,
    ) {
        let x = &x[..data.dim()];
        let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
        let a = classification_error(x, &data).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        // scaling can flip a sign only when the margin underflows to zero
        let exact = data.examples().iter().all(|e| e.dot(x).abs() > 1e-200);
        if exact {
            prop_assert_eq!(a, classification_error(&scaled, &data).unwrap());
        }
    }

    #[test]
    fn aggregation_ignores_run_order(
        cols in prop::collection::vec(prop::collection::vec(0f64..10.0, 4), 1..6),
        rot in 0usize..6,
    ) {
        let recs: Vec<RunRecord> = cols.iter().map(|c| record(c)).collect();
        let refs: Vec<&RunRecord> = recs.iter().collect();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot % refs.len());
        prop_assert_eq!(
            aggregate_runs(&refs, Metric::TrainLoss).unwrap(),
            aggregate_runs(&rotated, Metric::TrainLoss).unwrap()
        );
    }

    #[test]
    fn profiles_ignore_input_order(
        curves in prop::collection::vec(prop::collection::vec(0f64..1.0, 5), 6),
        delta in 0.01f64..0.99,
        shift in 1usize..6,
    ) {
        let runs = matrix(&curves, 3, 2);
        let mut shuffled = runs.clone();
        shuffled.rotate_left(shift);
        shuffled.reverse();
        prop_assert_eq!(compute_profiles(&runs, delta).unwrap(), compute_profiles(&shuffled, delta).unwrap());
    }
}
