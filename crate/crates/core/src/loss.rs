//! Positive-congruence losses: the re-weighting baseline, focal distillation
//! with KL or logit-matching distances, and the combined objective
//! `CE + lambda * PC`.
//!
//! Every function returns the loss together with its gradient with respect to
//! the new model's logits, which is what [`crate::nn::train`] consumes.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::nn::{argmax, cross_entropy_with_grad, log_softmax, softmax, Mlp, Objective};
use crate::{Error, Result};

/// Per-sample weight `alpha + beta * 1(old model correct)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 5.0,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("filter weights must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn filter_weight(spec: FilterSpec, old_correct: bool) -> f64 {
    if old_correct {
        spec.alpha + spec.beta
    } else {
        spec.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistanceKind {
    /// KL divergence between temperature-softened distributions, with the old
    /// model as the reference distribution.
    Kl { temperature: f64 },
    /// Half squared Euclidean distance between logit vectors.
    LogitMatch,
}

impl Default for DistanceKind {
    fn default() -> Self {
        DistanceKind::LogitMatch
    }
}

impl DistanceKind {
    pub const DEFAULT_TEMPERATURE: f64 = 100.0;

    pub fn validate(&self) -> Result<()> {
        match *self {
            DistanceKind::Kl { temperature } if !(temperature > 0.0) => Err(Error::Config(
                format!("KL temperature must be positive, got {temperature}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcMode {
    /// Plain cross-entropy.
    #[default]
    None,
    /// Extra cross-entropy on samples the old model got right.
    Naive,
    /// Filter-weighted distance to the old model's logits.
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcLossConfig {
    pub lambda: f64,
    pub filter: FilterSpec,
    pub distance: DistanceKind,
    pub mode: PcMode,
}

impl Default for PcLossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            filter: FilterSpec::default(),
            distance: DistanceKind::LogitMatch,
            mode: PcMode::None,
        }
    }
}

impl PcLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        self.filter.validate()?;
        self.distance.validate()
    }
}

fn check_lengths(new_logits: &[f64], old_logits: &[f64]) -> Result<()> {
    if new_logits.len() != old_logits.len() {
        return Err(Error::Dimension(format!(
            "new logits have length {}, old logits {}",
            new_logits.len(),
            old_logits.len()
        )));
    }
    Ok(())
}

/// `KL(softmax(old / t) || softmax(new / t))` and its gradient
/// `(softmax(new / t) - softmax(old / t)) / t` with respect to `new_logits`.
pub fn distance_kl(new_logits: &[f64], old_logits: &[f64], temperature: f64) -> Result<(f64, Vec<f64>)> {
    check_lengths(new_logits, old_logits)?;
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "KL temperature must be positive, got {temperature}"
        )));
    }
    let scaled_new: Vec<f64> = new_logits.iter().map(|v| v / temperature).collect();
    let scaled_old: Vec<f64> = old_logits.iter().map(|v| v / temperature).collect();
    let log_new = log_softmax(&scaled_new);
    let log_old = log_softmax(&scaled_old);
    let kl: f64 = log_old
        .iter()
        .zip(&log_new)
        .map(|(&lo, &ln)| lo.exp() * (lo - ln))
        .sum();
    let p_new = softmax(&scaled_new);
    let p_old = softmax(&scaled_old);
    let grad = p_new
        .iter()
        .zip(&p_old)
        .map(|(pn, po)| (pn - po) / temperature)
        .collect();
    // rounding can push an exact zero slightly negative
    Ok((kl.max(0.0), grad))
}

/// `0.5 * ||new - old||^2` and its gradient `new - old`.
pub fn distance_lm(new_logits: &[f64], old_logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths(new_logits, old_logits)?;
    let diff: Vec<f64> = new_logits
        .iter()
        .zip(old_logits)
        .map(|(n, o)| n - o)
        .collect();
    let value = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
    Ok((value, diff))
}

pub fn distance(kind: DistanceKind, new_logits: &[f64], old_logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    match kind {
        DistanceKind::Kl { temperature } => distance_kl(new_logits, old_logits, temperature),
        DistanceKind::LogitMatch => distance_lm(new_logits, old_logits),
    }
}

/// `1(old correct) * CE(new_logits, label)`.
pub fn pc_loss_naive(new_logits: &[f64], label: usize, old_correct: bool) -> Result<(f64, Vec<f64>)> {
    let (ce, grad) = cross_entropy_with_grad(new_logits, label)?;
    if old_correct {
        Ok((ce, grad))
    } else {
        Ok((0.0, vec![0.0; new_logits.len()]))
    }
}

/// Cached old-model output for one training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEntry<'a> {
    pub logits: &'a [f64],
    pub correct: bool,
}

/// `filter_weight * distance(new, old)`.
///
/// When the new model has more classes than the old one, only its first
/// `K_old` logits are compared; the gradient is zero on the rest.
pub fn pc_loss_focal(
    new_logits: &[f64],
    old: OracleEntry<'_>,
    filter: FilterSpec,
    kind: DistanceKind,
) -> Result<(f64, Vec<f64>)> {
    let k_old = old.logits.len();
    if new_logits.len() < k_old {
        return Err(Error::Dimension(format!(
            "new model has {} classes, fewer than the old model's {k_old}",
            new_logits.len()
        )));
    }
    let weight = filter_weight(filter, old.correct);
    let mut grad = vec![0.0; new_logits.len()];
    if weight == 0.0 {
        return Ok((0.0, grad));
    }
    let (d, g) = distance(kind, &new_logits[..k_old], old.logits)?;
    for (out, gi) in grad.iter_mut().zip(g) {
        *out = weight * gi;
    }
    Ok((weight * d, grad))
}

/// `CE + lambda * PC`, where the PC term is selected by `config.mode`.
pub fn total_objective(
    new_logits: &[f64],
    label: usize,
    old: Option<OracleEntry<'_>>,
    config: &PcLossConfig,
) -> Result<(f64, Vec<f64>)> {
    let (ce, mut grad) = cross_entropy_with_grad(new_logits, label)?;
    let pc = match config.mode {
        PcMode::None => return Ok((ce, grad)),
        PcMode::Naive => {
            let old = old.ok_or(Error::MissingOracle)?;
            pc_loss_naive(new_logits, label, old.correct)?
        }
        PcMode::Focal => {
            let old = old.ok_or(Error::MissingOracle)?;
            pc_loss_focal(new_logits, old, config.filter, config.distance)?
        }
    };
    let (term, term_grad) = pc;
    for (g, tg) in grad.iter_mut().zip(term_grad) {
        *g += config.lambda * tg;
    }
    Ok((ce + config.lambda * term, grad))
}

/// Frozen old-model outputs over a training view, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct OldModelOracle {
    logits: Matrix,
    correct: Vec<bool>,
}

impl OldModelOracle {
    /// `labels` are in the new model's numbering; the first `K_old` classes of
    /// that numbering must coincide with the old model's classes.
    pub fn from_logits(logits: Matrix, labels: &[usize]) -> Result<Self> {
        if logits.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} cached rows for {} labels",
                logits.rows(),
                labels.len()
            )));
        }
        let correct = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| argmax(logits.row(i)) == y)
            .collect();
        Ok(Self { logits, correct })
    }

    pub fn from_model(model: &Mlp, features: &Matrix, rows: &[usize], labels: &[usize]) -> Result<Self> {
        Self::from_logits(model.logits_for_rows(features, rows)?, labels)
    }

    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn correct_flags(&self) -> &[bool] {
        &self.correct
    }

    pub fn entry(&self, position: usize) -> Result<OracleEntry<'_>> {
        if position >= self.correct.len() {
            return Err(Error::MissingCache(position));
        }
        Ok(OracleEntry {
            logits: self.logits.row(position),
            correct: self.correct[position],
        })
    }
}

/// Training objective that looks up the old model's cached outputs by sample
/// position.
#[derive(Debug, Clone, Copy)]
pub struct PcObjective<'a> {
    pub oracle: Option<&'a OldModelOracle>,
    pub config: PcLossConfig,
}

impl Objective for PcObjective<'_> {
    fn loss(&self, position: usize, logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        let entry = match (self.config.mode, self.oracle) {
            (PcMode::None, _) => None,
            (_, Some(oracle)) => Some(oracle.entry(position)?),
            (_, None) => return Err(Error::MissingOracle),
        };
        total_objective(logits, label, entry, &self.config)
    }
}
