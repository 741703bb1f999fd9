use congruent::data::{generate, half_samples_view, DataView, Split, SyntheticSpec};
use congruent::experiment::{ExperimentConfig, Lab, Method, ScenarioSource};
use congruent::nn::{error_rate, train, CrossEntropy, Mlp, ModelSpec, TrainConfig, TrainSet};
use congruent::scenario::{build_scenario, InitSource, ScenarioKind, UpdateScenario, LARGE_HIDDEN, SMALL_HIDDEN};

fn small(kind: ScenarioKind) -> ExperimentConfig {
    ExperimentConfig {
        scenario: ScenarioSource::Kind(kind),
        repetitions: 1,
        dataset: SyntheticSpec {
            num_classes: 6,
            input_dim: 8,
            samples_per_class: 60,
            ..SyntheticSpec::default()
        },
        train: TrainConfig {
            epochs: 4,
            learning_rate: 0.01,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn reference_dataset_has_exact_stratified_splits() {
    let noisy = generate(&SyntheticSpec::default()).unwrap();
    assert_eq!(noisy.len(), 5000);
    assert_eq!(noisy.rows_in(Split::Train).len(), 3500);
    assert!(noisy.rows_in(Split::Test).iter().all(|&r| noisy.labels[r] == r / 500));

    // label noise moves train labels, so count classes on a clean copy
    let data = generate(&SyntheticSpec {
        label_noise: 0.0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    for class in 0..10 {
        let count = |split| {
            data.rows_in(split)
                .into_iter()
                .filter(|&r| data.labels[r] == class)
                .count()
        };
        assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (350, 50, 100));
    }
    let half = half_samples_view(&data, 0.5, 3).unwrap();
    let (rows, labels) = half.split(Split::Train);
    assert_eq!(rows.len(), 1750);
    assert!((0..10).all(|c| labels.iter().filter(|&&y| y == c).count() == 175));
    let full = DataView::full(&data);
    assert_eq!(half.split(Split::Test), full.split(Split::Test));
}

#[test]
fn separable_limit_is_learned_by_a_linear_model() {
    let data = generate(&SyntheticSpec {
        num_classes: 4,
        input_dim: 10,
        samples_per_class: 100,
        cluster_spread: 0.01,
        label_noise: 0.0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let view = DataView::full(&data);
    let (rows, labels) = view.split(Split::Train);
    let mut model = Mlp::init(&ModelSpec::mlp(10, &[], 4), 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    train(&mut model, TrainSet::new(&data.features, &rows, &labels).unwrap(), &CrossEntropy, &cfg).unwrap();
    let (test, test_labels) = view.split(Split::Test);
    assert!(error_rate(&model, &data.features, &test, &test_labels).unwrap() < 0.01);
}

#[test]
fn every_scenario_runs_end_to_end() {
    for kind in [
        ScenarioKind::SameArchRetrain,
        ScenarioKind::ArchChange,
        ScenarioKind::SampleGrowth,
        ScenarioKind::ClassGrowth,
        ScenarioKind::TwoChanges,
        ScenarioKind::FineTune,
    ] {
        let lab = Lab::new(&small(kind)).unwrap();
        for method in [Method::NoTreatment, Method::FdLm, Method::FdKl, Method::Naive] {
            let (outcomes, summary) = lab.run_method(method, &lab.config().pc).unwrap();
            assert_eq!(summary.succeeded, 1, "{kind:?} {method}: {:?}", summary.failures);
            let a = outcomes[0].as_ref().unwrap();
            assert_eq!(a.series.len(), 4);
            assert_eq!(a.num_params, lab.build().new_job.spec.num_params());
        }
    }
}

#[test]
fn scenario_shapes() {
    let cfg = small(ScenarioKind::TwoChanges);
    let data = generate(&cfg.dataset).unwrap();
    let b = build_scenario(&cfg.scenario(), &data, Split::Test).unwrap();
    assert_eq!(b.old_job.spec, ModelSpec::mlp(8, SMALL_HIDDEN, 6));
    assert_eq!(b.new_job.spec, ModelSpec::mlp(8, LARGE_HIDDEN, 6));
    assert!(b.old_job.train_split().0.len() * 2 <= b.new_job.train_split().0.len() + 6);
    assert_eq!(b.old_job.view.split(Split::Test), b.new_job.view.split(Split::Test));

    let ft = build_scenario(&UpdateScenario::reference(ScenarioKind::FineTune, 8, 6), &data, Split::Test).unwrap();
    assert_eq!(ft.new_job.init, InitSource::OldModel);

    let cg = build_scenario(&UpdateScenario::reference(ScenarioKind::ClassGrowth, 8, 6), &data, Split::Test).unwrap();
    assert_eq!(cg.old_job.spec.num_classes(), 3);
    assert_eq!(cg.new_job.spec.num_classes(), 6);
    assert!(cg.eval.restricted);
    let old_test = cg.old_job.view.split(Split::Test);
    assert_eq!((cg.eval.rows.clone(), cg.eval.labels.clone()), old_test);
}

#[test]
fn fine_tune_starts_from_the_old_weights() {
    let mut cfg = small(ScenarioKind::FineTune);
    cfg.train.epochs = 1;
    cfg.train.learning_rate = 1e-9;
    let lab = Lab::new(&cfg).unwrap();
    let (outcomes, _) = lab.run_method(Method::NoTreatment, &cfg.pc).unwrap();
    // a vanishing step keeps the new model on top of the old one
    assert_eq!(outcomes[0].as_ref().unwrap().report.nfr, 0.0);
}

#[test]
fn mismatched_fine_tune_is_rejected() {
    let mut s = UpdateScenario::reference(ScenarioKind::FineTune, 8, 6);
    s.new_spec = ModelSpec::mlp(8, LARGE_HIDDEN, 6);
    let cfg = ExperimentConfig {
        scenario: ScenarioSource::Full(s),
        ..small(ScenarioKind::FineTune)
    };
    assert!(cfg.validate().is_err());
}
