use congruent::data::{classes_view, generate, Dataset, Split, SyntheticSpec};
use congruent::ensemble::Ensemble;
use congruent::loss::{distance_kl, distance_lm, pc_loss_focal, DistanceKind, FilterSpec, OracleEntry};
use congruent::metrics::{
    default_entropy_bins, flip_report, nfr_by_uncertainty_bin, predictive_entropy, PredictionRecord,
    UncertaintyRecord,
};
use congruent::nn::{argmax, softmax, train, CrossEntropy, Mlp, ModelSpec, TrainConfig, TrainSet};
use proptest::prelude::*;
use std::sync::OnceLock;

fn logits(k: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    k.prop_flat_map(|k| prop::collection::vec(-20.0..20.0f64, k))
}

fn logit_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..12).prop_flat_map(|k| {
        (
            prop::collection::vec(-10.0..10.0f64, k),
            prop::collection::vec(-10.0..10.0f64, k),
        )
    })
}

fn records() -> impl Strategy<Value = Vec<PredictionRecord>> {
    (2usize..6).prop_flat_map(|k| {
        prop::collection::vec((0..k, 0..k, 0..k), 1..300).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (y, o, n))| PredictionRecord {
                    sample_id: i,
                    true_label: y,
                    old_pred: o,
                    new_pred: n,
                })
                .collect()
        })
    })
}

fn small_dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        generate(&SyntheticSpec {
            num_classes: 6,
            input_dim: 5,
            samples_per_class: 30,
            ..SyntheticSpec::default()
        })
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_is_a_shift_invariant_simplex_point(z in logits(1..12), c in -500.0..500.0f64) {
        let p = softmax(&z);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn argmax_survives_positive_affine_maps(z in logits(1..12), a in 0.01..100.0f64, b in -50.0..50.0f64) {
        let mapped: Vec<f64> = z.iter().map(|v| a * v + b).collect();
        prop_assert_eq!(argmax(&mapped), argmax(&z));
        prop_assert_eq!(argmax(&softmax(&z)), argmax(&z));
    }

    #[test]
    fn model_prediction_survives_output_rescaling(seed in 0u64..1000, a in 0.1..10.0f64, b in -5.0..5.0f64) {
        let model = Mlp::init(&ModelSpec::mlp(4, &[7], 5), seed).unwrap();
        let mut scaled = model.clone();
        let last = scaled.layers_mut().last_mut().unwrap();
        last.weights.as_mut_slice().iter_mut().for_each(|w| *w *= a);
        last.bias.iter_mut().for_each(|v| *v = *v * a + b);
        let x = [0.3, -1.2, 0.8, 2.0];
        let (z, zs) = (model.logits(&x).unwrap(), scaled.logits(&x).unwrap());
        let top = argmax(&z);
        let margin = z.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, v)| z[top] - v).fold(f64::INFINITY, f64::min);
        prop_assume!(margin > 1e-9);
        prop_assert_eq!(argmax(&zs), top);
    }

    #[test]
    fn flip_report_identities(recs in records()) {
        let r = flip_report(&recs).unwrap();
        let q = r.quadrant_counts;
        prop_assert_eq!(q.total(), recs.len());
        prop_assert_eq!(r.error_count_delta(), r.flip_count_delta());
        prop_assert!(r.nfr <= r.er_new.min(1.0 - r.er_old) + 1e-15);
        prop_assert!(r.pfr <= r.er_old.min(1.0 - r.er_new) + 1e-15);
        prop_assert_eq!(r.nfr, q.negative_flip as f64 / recs.len() as f64);
    }

    #[test]
    fn distances_are_non_negative((new, old) in logit_pair(), t in 0.5..200.0f64) {
        prop_assert!(distance_kl(&new, &old, t).unwrap().0 >= 0.0);
        prop_assert!(distance_lm(&new, &old).unwrap().0 >= 0.0);
        prop_assert!(distance_kl(&old, &old, t).unwrap().0.abs() < 1e-12);
    }

    #[test]
    fn focal_term_grows_with_beta((new, old) in logit_pair(), b1 in 0.0..10.0f64, db in 0.01..10.0f64) {
        let entry = OracleEntry { logits: &old, correct: true };
        for d in [DistanceKind::LogitMatch, DistanceKind::Kl { temperature: 2.0 }] {
            let low = pc_loss_focal(&new, entry, FilterSpec { alpha: 1.0, beta: b1 }, d).unwrap().0;
            let high = pc_loss_focal(&new, entry, FilterSpec { alpha: 1.0, beta: b1 + db }, d).unwrap().0;
            prop_assume!(low > 1e-12);
            prop_assert!(high > low);
        }
    }

    #[test]
    fn entropy_is_bounded(members in (2usize..8).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(-8.0..8.0f64, k), 1..6))) {
        let k = members[0].len();
        let probs: Vec<Vec<f64>> = members.iter().map(|z| softmax(z)).collect();
        let h = predictive_entropy(&probs).unwrap();
        prop_assert!(h >= 0.0 && h <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn histogram_partitions_records(recs in records(), seed in any::<u64>()) {
        let k = 6;
        let unc: Vec<UncertaintyRecord> = recs.iter().enumerate().map(|(i, r)| UncertaintyRecord {
            sample_id: r.sample_id,
            predictive_entropy: ((seed.wrapping_mul(i as u64 + 1) % 1000) as f64 / 1000.0) * (k as f64).ln(),
        }).collect();
        let h = nfr_by_uncertainty_bin(&recs, &unc, &default_entropy_bins(k, 20)).unwrap();
        let flips = recs.iter().filter(|r| r.old_pred == r.true_label && r.new_pred != r.true_label).count();
        prop_assert_eq!(h.flips.iter().sum::<usize>(), flips);
        prop_assert_eq!(h.flips.iter().sum::<usize>() + h.non_flips.iter().sum::<usize>(), recs.len());
    }

    #[test]
    fn ensemble_prediction_ignores_member_order(seeds in prop::collection::vec(0u64..10_000, 2..6), x in prop::collection::vec(-2.0..2.0f64, 3)) {
        let spec = ModelSpec::mlp(3, &[5], 4);
        let members: Vec<Mlp> = seeds.iter().map(|&s| Mlp::init(&spec, s).unwrap()).collect();
        let mut reversed = members.clone();
        reversed.reverse();
        let a = Ensemble::new(members).unwrap().logits(&x).unwrap();
        let b = Ensemble::new(reversed).unwrap().logits(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
        let mut sorted = a.clone();
        sorted.sort_by(|p, q| q.total_cmp(p));
        prop_assume!(sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn class_views_relabel_bijectively(perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(), take in 1usize..=6) {
        let data = small_dataset();
        let order = &perm[..take];
        let view = classes_view(data, order).unwrap();
        let mut seen = vec![false; take];
        for (&row, &label) in view.rows.iter().zip(&view.labels) {
            prop_assert_eq!(order[label], data.labels[row]);
            seen[label] = true;
        }
        prop_assert!(seen.into_iter().all(|s| s));
        // test split is untouched by relabeling
        let (test_rows, _) = view.split(Split::Test);
        prop_assert!(test_rows.iter().all(|&r| data.splits[r] == Split::Test));
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = small_dataset();
    let rows = data.rows_in(Split::Train);
    let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 16,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Mlp::init(&ModelSpec::mlp(5, &[8], 6), 9).unwrap();
        train(&mut m, TrainSet::new(&data.features, &rows, &labels).unwrap(), &CrossEntropy, &cfg).unwrap();
        m
    };
    assert_eq!(run(), run());
}
