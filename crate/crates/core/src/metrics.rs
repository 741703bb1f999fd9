//! Regression metrics between an old and a new classifier.
//!
//! Everything is counted in integers first; fractions are derived from the
//! counts only when a [`FlipReport`] is assembled.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: usize,
    pub true_label: usize,
    pub old_pred: usize,
    pub new_pred: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipQuadrant {
    BothCorrect,
    NegativeFlip,
    PositiveFlip,
    BothWrong,
}

pub fn classify_flip(record: &PredictionRecord) -> FlipQuadrant {
    let old_ok = record.old_pred == record.true_label;
    let new_ok = record.new_pred == record.true_label;
    match (old_ok, new_ok) {
        (true, true) => FlipQuadrant::BothCorrect,
        (true, false) => FlipQuadrant::NegativeFlip,
        (false, true) => FlipQuadrant::PositiveFlip,
        (false, false) => FlipQuadrant::BothWrong,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantCounts {
    pub both_correct: usize,
    pub negative_flip: usize,
    pub positive_flip: usize,
    pub both_wrong: usize,
}

impl QuadrantCounts {
    pub fn from_records(records: &[PredictionRecord]) -> Self {
        let mut counts = Self::default();
        for r in records {
            match classify_flip(r) {
                FlipQuadrant::BothCorrect => counts.both_correct += 1,
                FlipQuadrant::NegativeFlip => counts.negative_flip += 1,
                FlipQuadrant::PositiveFlip => counts.positive_flip += 1,
                FlipQuadrant::BothWrong => counts.both_wrong += 1,
            }
        }
        counts
    }

    pub fn total(&self) -> usize {
        self.both_correct + self.negative_flip + self.positive_flip + self.both_wrong
    }

    pub fn old_wrong(&self) -> usize {
        self.positive_flip + self.both_wrong
    }

    pub fn new_wrong(&self) -> usize {
        self.negative_flip + self.both_wrong
    }
}

pub fn compute_nfr(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("prediction records".into()));
    }
    let flips = records
        .iter()
        .filter(|r| classify_flip(r) == FlipQuadrant::NegativeFlip)
        .count();
    Ok(flips as f64 / records.len() as f64)
}

/// NFR divided by `(1 - er_old) * er_new`, the NFR expected if the two models
/// erred independently.
pub fn compute_relative_nfr(nfr: f64, er_old: f64, er_new: f64) -> Result<f64> {
    if er_new <= 0.0 {
        return Err(Error::UndefinedMetric(
            "relative NFR needs a nonzero new error rate".into(),
        ));
    }
    if er_old >= 1.0 {
        return Err(Error::UndefinedMetric(
            "relative NFR needs an old error rate below 1".into(),
        ));
    }
    Ok(nfr / ((1.0 - er_old) * er_new))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub n: usize,
    pub quadrant_counts: QuadrantCounts,
    pub er_old: f64,
    pub er_new: f64,
    pub nfr: f64,
    pub pfr: f64,
    /// `None` when the new model makes no errors or the old one makes only errors.
    pub rel_nfr: Option<f64>,
}

impl FlipReport {
    pub fn from_counts(counts: QuadrantCounts) -> Result<Self> {
        let n = counts.total();
        if n == 0 {
            return Err(Error::Empty("prediction records".into()));
        }
        let frac = |c: usize| c as f64 / n as f64;
        let er_old = frac(counts.old_wrong());
        let er_new = frac(counts.new_wrong());
        let nfr = frac(counts.negative_flip);
        Ok(Self {
            n,
            quadrant_counts: counts,
            er_old,
            er_new,
            nfr,
            pfr: frac(counts.positive_flip),
            rel_nfr: compute_relative_nfr(nfr, er_old, er_new).ok(),
        })
    }

    /// `new_wrong - old_wrong`, which always equals `negative - positive` flips.
    pub fn error_count_delta(&self) -> i64 {
        self.quadrant_counts.new_wrong() as i64 - self.quadrant_counts.old_wrong() as i64
    }

    pub fn flip_count_delta(&self) -> i64 {
        self.quadrant_counts.negative_flip as i64 - self.quadrant_counts.positive_flip as i64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn flip_report(records: &[PredictionRecord]) -> Result<FlipReport> {
    FlipReport::from_counts(QuadrantCounts::from_records(records))
}

/// Keeps only samples whose true label lies in the old model's label space
/// `[0, old_classes)`.
pub fn restrict_to_old_classes(records: &[PredictionRecord], old_classes: usize) -> Vec<PredictionRecord> {
    records
        .iter()
        .filter(|r| r.true_label < old_classes)
        .copied()
        .collect()
}

/// Per-record flips as CSV: `sample_id,true_label,old_pred,new_pred,quadrant`.
pub fn write_records_csv<W: Write>(writer: W, records: &[PredictionRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        sample_id: usize,
        true_label: usize,
        old_pred: usize,
        new_pred: usize,
        quadrant: FlipQuadrant,
    }
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(Row {
            sample_id: r.sample_id,
            true_label: r.true_label,
            old_pred: r.old_pred,
            new_pred: r.new_pred,
            quadrant: classify_flip(r),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads records written by [`write_records_csv`]. The quadrant column, when
/// present, is recomputed rather than trusted.
pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<PredictionRecord>> {
    #[derive(Deserialize)]
    struct Row {
        sample_id: usize,
        true_label: usize,
        old_pred: usize,
        new_pred: usize,
    }
    let mut rd = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let row: Row = row?;
        out.push(PredictionRecord {
            sample_id: row.sample_id,
            true_label: row.true_label,
            old_pred: row.old_pred,
            new_pred: row.new_pred,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub sample_id: usize,
    pub predictive_entropy: f64,
}

const SIMPLEX_TOL: f64 = 1e-9;

/// Shannon entropy in nats of the member-averaged probability vector.
pub fn predictive_entropy(prob_vectors: &[Vec<f64>]) -> Result<f64> {
    let first = prob_vectors
        .first()
        .ok_or_else(|| Error::Empty("ensemble probability vectors".into()))?;
    let k = first.len();
    if k == 0 {
        return Err(Error::Simplex("empty probability vector".into()));
    }
    let mut mean = vec![0.0; k];
    for (m, p) in prob_vectors.iter().enumerate() {
        if p.len() != k {
            return Err(Error::Simplex(format!(
                "member {m} has {} classes, expected {k}",
                p.len()
            )));
        }
        if p.iter().any(|&v| !(v >= -SIMPLEX_TOL && v <= 1.0 + SIMPLEX_TOL)) {
            return Err(Error::Simplex(format!("member {m} has entries outside [0, 1]")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Simplex(format!("member {m} sums to {sum}")));
        }
        for (acc, &v) in mean.iter_mut().zip(p) {
            *acc += v.max(0.0);
        }
    }
    let members = prob_vectors.len() as f64;
    let h: f64 = mean
        .iter()
        .map(|&s| s / members)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.clamp(0.0, (k as f64).ln()))
}

/// `bins` equal-width bins over `[0, ln K]`.
pub fn default_entropy_bins(num_classes: usize, bins: usize) -> Vec<f64> {
    let top = (num_classes as f64).ln();
    (0..=bins).map(|i| top * i as f64 / bins as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyHistogram {
    pub bin_edges: Vec<f64>,
    pub flips: Vec<usize>,
    pub non_flips: Vec<usize>,
}

impl UncertaintyHistogram {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_lo", "bin_hi", "negative_flips", "others"])?;
        for (j, (f, o)) in self.flips.iter().zip(&self.non_flips).enumerate() {
            w.write_record([
                format!("{:.6}", self.bin_edges[j]),
                format!("{:.6}", self.bin_edges[j + 1]),
                f.to_string(),
                o.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Histograms of negative flips and of all other samples over uncertainty
/// bins. Bins are half-open except the last; values outside the edges fall
/// into the nearest end bin.
pub fn nfr_by_uncertainty_bin(
    records: &[PredictionRecord],
    uncertainties: &[UncertaintyRecord],
    bin_edges: &[f64],
) -> Result<UncertaintyHistogram> {
    if bin_edges.len() < 2 {
        return Err(Error::Config("need at least two bin edges".into()));
    }
    if bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("bin edges must be strictly increasing".into()));
    }
    if records.len() != uncertainties.len() {
        return Err(Error::Dimension(format!(
            "{} records but {} uncertainty values",
            records.len(),
            uncertainties.len()
        )));
    }
    let bins = bin_edges.len() - 1;
    let mut flips = vec![0; bins];
    let mut non_flips = vec![0; bins];
    for (r, u) in records.iter().zip(uncertainties) {
        if r.sample_id != u.sample_id {
            return Err(Error::Dimension(format!(
                "sample id mismatch: record {} vs uncertainty {}",
                r.sample_id, u.sample_id
            )));
        }
        // index of the first edge above the value, minus one
        let upper = bin_edges[1..bins].partition_point(|&e| e <= u.predictive_entropy);
        let bin = upper.min(bins - 1);
        if classify_flip(r) == FlipQuadrant::NegativeFlip {
            flips[bin] += 1;
        } else {
            non_flips[bin] += 1;
        }
    }
    Ok(UncertaintyHistogram {
        bin_edges: bin_edges.to_vec(),
        flips,
        non_flips,
    })
}
