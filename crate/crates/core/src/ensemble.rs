//! Ensembles of independently trained classifiers combined by averaging raw
//! logits before a single softmax, and the ensemble-size sweep.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::metrics::{flip_report, predictive_entropy, FlipReport, PredictionRecord, UncertaintyRecord};
use crate::nn::{argmax, softmax, train, CrossEntropy, Mlp, ModelSpec, TrainConfig, TrainSet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<Mlp>,
}

impl Ensemble {
    pub fn new(members: Vec<Mlp>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Empty("ensemble members".into()))?;
        let (d, k) = (first.input_dim(), first.num_classes());
        if let Some(i) = members
            .iter()
            .position(|m| m.input_dim() != d || m.num_classes() != k)
        {
            return Err(Error::Dimension(format!(
                "member {i} does not share input dim {d} and {k} classes"
            )));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    /// Parameter count of all members together.
    pub fn num_params(&self) -> usize {
        self.members.iter().map(Mlp::num_params).sum()
    }

    /// Arithmetic mean of the member logits.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut mean = vec![0.0; self.num_classes()];
        for m in &self.members {
            for (acc, v) in mean.iter_mut().zip(m.logits(x)?) {
                *acc += v;
            }
        }
        let l = self.members.len() as f64;
        Ok(mean.into_iter().map(|v| v / l).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Predictive entropy of the averaged member distributions, per row.
    pub fn uncertainties(&self, features: &Matrix, rows: &[usize]) -> Result<Vec<UncertaintyRecord>> {
        rows.iter()
            .map(|&r| {
                let x = features.row(r);
                let probs = self
                    .members
                    .iter()
                    .map(|m| m.logits(x).map(|z| softmax(&z)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(UncertaintyRecord {
                    sample_id: r,
                    predictive_entropy: predictive_entropy(&probs)?,
                })
            })
            .collect()
    }
}

/// Trains `size` members under plain cross-entropy; member `j` uses seed
/// `base_seed + j`. Members train in parallel with results identical to a
/// sequential run.
pub fn train_ensemble(
    spec: &ModelSpec,
    data: TrainSet<'_>,
    config: &TrainConfig,
    size: usize,
    base_seed: u64,
) -> Result<Ensemble> {
    if size == 0 {
        return Err(Error::Empty("ensemble size must be at least 1".into()));
    }
    let members = (0..size as u64)
        .into_par_iter()
        .map(|j| train_member(spec, data, config, base_seed + j))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members)
}

pub(crate) fn train_member(spec: &ModelSpec, data: TrainSet<'_>, config: &TrainConfig, seed: u64) -> Result<Mlp> {
    let cfg = TrainConfig {
        seed,
        ..config.clone()
    };
    let mut model = Mlp::init_with(spec, seed, cfg.weight_init)?;
    train(&mut model, data, &CrossEntropy, &cfg)?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "L")]
    pub size: usize,
    pub er_old: f64,
    pub er_new: f64,
    pub nfr: f64,
    pub rel_nfr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// CSV with columns `L,er_old,er_new,nfr,rel_nfr`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seeds of the old and new collections. The ranges
/// `[old_base, old_base + L)` and `[new_base, new_base + L)` must not overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedRanges {
    pub old_base: u64,
    pub new_base: u64,
}

/// Held-out rows and labels the sweep evaluates on.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub features: &'a Matrix,
    pub rows: &'a [usize],
    pub labels: &'a [usize],
}

/// Output of [`sweep_ensemble_size`], keeping the trained collections so
/// callers can inspect them further.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub result: SweepResult,
    pub old: Ensemble,
    pub new: Ensemble,
}

/// Trains `max(sizes)` old and new members once and evaluates each prefix of
/// length `L` as an ensemble.
pub fn sweep_ensemble_size(
    old_spec: &ModelSpec,
    new_spec: &ModelSpec,
    old_data: TrainSet<'_>,
    new_data: TrainSet<'_>,
    eval: EvalSet<'_>,
    config: &TrainConfig,
    sizes: &[usize],
    seeds: SeedRanges,
) -> Result<Sweep> {
    if sizes.is_empty() {
        return Err(Error::Empty("ensemble sizes".into()));
    }
    if sizes[0] == 0 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "ensemble sizes must be positive and strictly increasing".into(),
        ));
    }
    let largest = *sizes.last().expect("nonempty") as u64;
    let overlap = seeds.old_base < seeds.new_base + largest && seeds.new_base < seeds.old_base + largest;
    if overlap {
        return Err(Error::Config(format!(
            "old seeds {}..{} overlap new seeds {}..{}",
            seeds.old_base,
            seeds.old_base + largest,
            seeds.new_base,
            seeds.new_base + largest
        )));
    }
    let (old, new) = rayon::join(
        || train_ensemble(old_spec, old_data, config, largest as usize, seeds.old_base),
        || train_ensemble(new_spec, new_data, config, largest as usize, seeds.new_base),
    );
    let (old, new) = (old?, new?);

    let old_logits = member_logits(&old, eval)?;
    let new_logits = member_logits(&new, eval)?;
    let rows = sizes
        .iter()
        .map(|&size| {
            let old_pred = prefix_predictions(&old_logits, size);
            let new_pred = prefix_predictions(&new_logits, size);
            let records = records_from(eval, &old_pred, &new_pred);
            let report = flip_report(&records)?;
            Ok(SweepRow {
                size,
                er_old: report.er_old,
                er_new: report.er_new,
                nfr: report.nfr,
                rel_nfr: report.rel_nfr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sweep {
        result: SweepResult { rows },
        old,
        new,
    })
}

fn member_logits(ensemble: &Ensemble, eval: EvalSet<'_>) -> Result<Vec<Matrix>> {
    ensemble
        .members()
        .par_iter()
        .map(|m| m.logits_for_rows(eval.features, eval.rows))
        .collect()
}

/// Argmax of the mean logits of the first `size` members, per row.
fn prefix_predictions(member_logits: &[Matrix], size: usize) -> Vec<usize> {
    let rows = member_logits[0].rows();
    let k = member_logits[0].cols();
    (0..rows)
        .map(|i| {
            let mut mean = vec![0.0; k];
            for m in &member_logits[..size] {
                for (acc, v) in mean.iter_mut().zip(m.row(i)) {
                    *acc += v;
                }
            }
            for v in &mut mean {
                *v /= size as f64;
            }
            argmax(&mean)
        })
        .collect()
}

pub(crate) fn records_from(eval: EvalSet<'_>, old_pred: &[usize], new_pred: &[usize]) -> Vec<PredictionRecord> {
    eval.rows
        .iter()
        .zip(eval.labels)
        .zip(old_pred.iter().zip(new_pred))
        .map(|((&r, &y), (&o, &n))| PredictionRecord {
            sample_id: r,
            true_label: y,
            old_pred: o,
            new_pred: n,
        })
        .collect()
}

/// Flip report of two ensembles on an evaluation set.
pub fn ensemble_flip_report(old: &Ensemble, new: &Ensemble, eval: EvalSet<'_>) -> Result<FlipReport> {
    let predict = |e: &Ensemble| -> Result<Vec<usize>> {
        eval.rows.iter().map(|&r| e.predict(eval.features.row(r))).collect()
    };
    flip_report(&records_from(eval, &predict(old)?, &predict(new)?))
}
