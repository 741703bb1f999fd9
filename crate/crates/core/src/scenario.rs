//! Declarative old-to-new update scenarios and their expansion into concrete
//! training jobs and an evaluation plan.

use serde::{Deserialize, Serialize};

use crate::data::{DataView, DataViewSpec, Dataset, Split};
use crate::nn::ModelSpec;
use crate::{Error, Result};

/// Hidden widths of the old model in the architecture-change analog.
pub const SMALL_HIDDEN: &[usize] = &[32];
/// Hidden widths of the new model in the architecture-change analog.
pub const LARGE_HIDDEN: &[usize] = &[64, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    SameArchRetrain,
    ArchChange,
    SampleGrowth,
    ClassGrowth,
    TwoChanges,
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateScenario {
    pub kind: ScenarioKind,
    pub old_spec: ModelSpec,
    pub new_spec: ModelSpec,
    #[serde(default)]
    pub old_data_view: DataViewSpec,
    #[serde(default)]
    pub new_data_view: DataViewSpec,
    #[serde(default)]
    pub init_from_old: bool,
}

impl UpdateScenario {
    /// The reference construction of each scenario kind for a dataset with
    /// `input_dim` features and `num_classes` classes.
    pub fn reference(kind: ScenarioKind, input_dim: usize, num_classes: usize) -> Self {
        let small = ModelSpec::mlp(input_dim, SMALL_HIDDEN, num_classes);
        let large = ModelSpec::mlp(input_dim, LARGE_HIDDEN, num_classes);
        let half = DataViewSpec::fraction(0.5, 0);
        let (old_spec, new_spec, old_view, new_view, init_from_old) = match kind {
            ScenarioKind::SameArchRetrain => (small.clone(), small, DataViewSpec::full(), DataViewSpec::full(), false),
            ScenarioKind::ArchChange => (small, large, DataViewSpec::full(), DataViewSpec::full(), false),
            ScenarioKind::SampleGrowth => (small.clone(), small, half, DataViewSpec::full(), false),
            ScenarioKind::ClassGrowth => {
                let old_classes: Vec<usize> = (0..num_classes / 2).collect();
                let k_old = old_classes.len();
                (
                    small.with_classes(k_old),
                    small,
                    DataViewSpec::classes(old_classes),
                    DataViewSpec::full(),
                    false,
                )
            }
            ScenarioKind::TwoChanges => (small, large, half, DataViewSpec::full(), false),
            ScenarioKind::FineTune => (small.clone(), small, DataViewSpec::full(), DataViewSpec::full(), true),
        };
        Self {
            kind,
            old_spec,
            new_spec,
            old_data_view: old_view,
            new_data_view: new_view,
            init_from_old,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.old_spec.validate()?;
        self.new_spec.validate()?;
        if self.old_spec.input_dim() != self.new_spec.input_dim() {
            return Err(Error::ScenarioMismatch(
                "old and new models must read the same inputs".into(),
            ));
        }
        if self.kind == ScenarioKind::FineTune {
            if self.old_spec != self.new_spec {
                return Err(Error::ScenarioMismatch(
                    "fine-tuning needs identical old and new model specs".into(),
                ));
            }
            if !self.init_from_old {
                return Err(Error::ScenarioMismatch(
                    "fine-tuning must initialize from the old model".into(),
                ));
            }
        }
        if self.init_from_old && self.old_spec.dims != self.new_spec.dims {
            return Err(Error::ScenarioMismatch(
                "initializing from the old model needs identical layer dims".into(),
            ));
        }
        if self.kind == ScenarioKind::ClassGrowth && self.old_data_view.classes.is_none() {
            return Err(Error::ScenarioMismatch(
                "class growth needs a class subset on the old data view".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitSource {
    Random,
    /// Start from the trained old model's weights.
    OldModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingJob {
    pub spec: ModelSpec,
    pub view: DataView,
    pub init: InitSource,
}

impl TrainingJob {
    pub fn train_split(&self) -> (Vec<usize>, Vec<usize>) {
        self.view.split(Split::Train)
    }
}

/// Where and how old and new predictions are compared.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationPlan {
    pub split: Split,
    /// Held-out rows and labels in the new model's numbering, already
    /// restricted to the old label space.
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    /// New-model training rows and labels under the same restriction.
    pub train_rows: Vec<usize>,
    pub train_labels: Vec<usize>,
    pub old_classes: usize,
    pub restricted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBuild {
    pub old_job: TrainingJob,
    pub new_job: TrainingJob,
    pub eval: EvaluationPlan,
}

/// Expands a scenario over a dataset.
///
/// The output width of each model spec is set to its view's class count. When
/// the old view holds a class subset, the new view lists those classes first
/// so that old label `j` and new label `j` name the same class.
pub fn build_scenario(scenario: &UpdateScenario, dataset: &Dataset, eval_split: Split) -> Result<ScenarioBuild> {
    scenario.validate()?;
    if scenario.old_spec.input_dim() != dataset.input_dim() {
        return Err(Error::ScenarioMismatch(format!(
            "models expect {} inputs, dataset has {}",
            scenario.old_spec.input_dim(),
            dataset.input_dim()
        )));
    }
    let old_view = scenario.old_data_view.apply(dataset, None)?;
    let leading = scenario
        .old_data_view
        .classes
        .as_ref()
        .map(|_| old_view.class_order.as_slice());
    let new_view = scenario.new_data_view.apply(dataset, leading)?;
    let old_classes = old_view.num_classes();
    if new_view.num_classes() < old_classes {
        return Err(Error::ScenarioMismatch(
            "the new model cannot cover fewer classes than the old one".into(),
        ));
    }
    if new_view.class_order[..old_classes] != old_view.class_order[..] {
        return Err(Error::ScenarioMismatch(
            "old classes must lead the new label numbering".into(),
        ));
    }
    if scenario.init_from_old && old_classes != new_view.num_classes() {
        return Err(Error::ScenarioMismatch(
            "initializing from the old model needs the same class set".into(),
        ));
    }

    let restricted = new_view.num_classes() > old_classes;
    let keep = |(rows, labels): (Vec<usize>, Vec<usize>)| -> (Vec<usize>, Vec<usize>) {
        rows.into_iter()
            .zip(labels)
            .filter(|&(_, y)| y < old_classes)
            .unzip()
    };
    let (rows, labels) = keep(new_view.split(eval_split));
    let (train_rows, train_labels) = keep(new_view.split(Split::Train));
    if rows.is_empty() {
        return Err(Error::Empty(format!("{} split of the new view", eval_split.as_str())));
    }

    let old_job = TrainingJob {
        spec: scenario.old_spec.with_classes(old_classes),
        view: old_view,
        init: InitSource::Random,
    };
    let new_job = TrainingJob {
        spec: scenario.new_spec.with_classes(new_view.num_classes()),
        view: new_view,
        init: if scenario.init_from_old {
            InitSource::OldModel
        } else {
            InitSource::Random
        },
    };
    Ok(ScenarioBuild {
        old_job,
        new_job,
        eval: EvaluationPlan {
            split: eval_split,
            rows,
            labels,
            train_rows,
            train_labels,
            old_classes,
            restricted,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    fn dataset() -> Dataset {
        generate(&SyntheticSpec {
            samples_per_class: 40,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn same_arch_retrain_shares_everything() {
        let ds = dataset();
        let s = UpdateScenario::reference(ScenarioKind::SameArchRetrain, 20, 10);
        let b = build_scenario(&s, &ds, Split::Test).unwrap();
        assert_eq!(b.old_job.spec, b.new_job.spec);
        assert_eq!(b.old_job.view, b.new_job.view);
        assert_eq!(b.new_job.init, InitSource::Random);
        assert!(!b.eval.restricted);
        assert_eq!(b.eval.rows, ds.rows_in(Split::Test));
    }

    #[test]
    fn two_changes_grow_data_and_capacity() {
        let ds = dataset();
        let s = UpdateScenario::reference(ScenarioKind::TwoChanges, 20, 10);
        let b = build_scenario(&s, &ds, Split::Test).unwrap();
        assert!(b.old_job.spec.num_params() < b.new_job.spec.num_params());
        let old_train = b.old_job.train_split().0.len();
        let new_train = b.new_job.train_split().0.len();
        // per-class rounding of odd class counts
        assert!((old_train as i64 * 2 - new_train as i64).abs() <= 10);
        assert_eq!(
            b.old_job.view.split(Split::Test),
            b.new_job.view.split(Split::Test)
        );
    }

    #[test]
    fn fine_tune_initializes_from_old() {
        let ds = dataset();
        let s = UpdateScenario::reference(ScenarioKind::FineTune, 20, 10);
        let b = build_scenario(&s, &ds, Split::Test).unwrap();
        assert_eq!(b.new_job.init, InitSource::OldModel);

        let mut bad = s.clone();
        bad.new_spec = ModelSpec::mlp(20, &[64], 10);
        assert!(matches!(
            build_scenario(&bad, &ds, Split::Test),
            Err(Error::ScenarioMismatch(_))
        ));
        let mut no_init = s;
        no_init.init_from_old = false;
        assert!(no_init.validate().is_err());
    }

    #[test]
    fn class_growth_restricts_evaluation() {
        let ds = dataset();
        let s = UpdateScenario::reference(ScenarioKind::ClassGrowth, 20, 10);
        let b = build_scenario(&s, &ds, Split::Test).unwrap();
        assert_eq!(b.old_job.spec.num_classes(), 5);
        assert_eq!(b.new_job.spec.num_classes(), 10);
        assert!(b.eval.restricted);
        let expect: Vec<usize> = ds
            .rows_in(Split::Test)
            .into_iter()
            .filter(|&r| ds.labels[r] < 5)
            .collect();
        assert_eq!(b.eval.rows, expect);
        assert!(b.eval.labels.iter().all(|&y| y < 5));
    }

    #[test]
    fn class_growth_with_scattered_subset_puts_old_classes_first() {
        let ds = dataset();
        let mut s = UpdateScenario::reference(ScenarioKind::ClassGrowth, 20, 10);
        s.old_data_view = DataViewSpec::classes(vec![7, 2, 9]);
        s.old_spec = s.old_spec.with_classes(3);
        let b = build_scenario(&s, &ds, Split::Test).unwrap();
        assert_eq!(b.old_job.view.class_order, vec![2, 7, 9]);
        assert_eq!(&b.new_job.view.class_order[..3], &[2, 7, 9]);
        for (&r, &y) in b.eval.rows.iter().zip(&b.eval.labels) {
            assert_eq!(b.old_job.view.class_order[y], ds.labels[r]);
        }
    }

    #[test]
    fn input_dim_mismatch_is_rejected() {
        let ds = dataset();
        let s = UpdateScenario::reference(ScenarioKind::SameArchRetrain, 7, 10);
        assert!(build_scenario(&s, &ds, Split::Test).is_err());
    }

    #[test]
    fn scenario_round_trips_through_toml() {
        for kind in [
            ScenarioKind::SameArchRetrain,
            ScenarioKind::ArchChange,
            ScenarioKind::SampleGrowth,
            ScenarioKind::ClassGrowth,
            ScenarioKind::TwoChanges,
            ScenarioKind::FineTune,
        ] {
            let s = UpdateScenario::reference(kind, 20, 10);
            let text = toml::to_string(&s).unwrap();
            let back: UpdateScenario = toml::from_str(&text).unwrap();
            assert_eq!(back, s);
        }
    }
}
