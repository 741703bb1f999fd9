//! Synthetic Gaussian-cluster classification data and read-only views of it.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::seed;
use crate::{Error, Result};

/// Spread calibrated so that the reference one-hidden-layer network lands in
/// the 15-30% test-error band on the reference task.
pub const REFERENCE_CLUSTER_SPREAD: f64 = 1.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(alias = "K")]
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub class_center_scale: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 20,
            samples_per_class: 500,
            cluster_spread: REFERENCE_CLUSTER_SPREAD,
            class_center_scale: 1.0,
            label_noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config("need at least 2 samples per class".into()));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config("cluster_spread must be positive".into()));
        }
        if !(self.class_center_scale > 0.0 && self.class_center_scale.is_finite()) {
            return Err(Error::Config("class_center_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Per-class split sizes for the 70/10/20 partition.
pub fn split_sizes(samples_per_class: usize) -> (usize, usize, usize) {
    let train = (samples_per_class as f64 * 0.7).round() as usize;
    let val = (samples_per_class as f64 * 0.1).round() as usize;
    let train = train.clamp(1, samples_per_class - 1);
    let val = val.min(samples_per_class - train - 1);
    (train, val, samples_per_class - train - val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, splits: Vec<Split>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() || splits.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} feature rows, {} labels, {} split tags",
                features.rows(),
                labels.len(),
                splits.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        let ds = Self {
            features,
            labels,
            splits,
            num_classes,
        };
        for c in 0..num_classes {
            if !ds
                .rows_in(Split::Train)
                .iter()
                .any(|&r| ds.labels[r] == c)
            {
                return Err(Error::Config(format!("class {c} missing from the train split")));
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// CSV with columns `x0..x{d-1},label,split`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.input_dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        header.push("split".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            row.push(self.labels[i].to_string());
            row.push(self.splits[i].as_str().to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`Dataset::write_csv`]. The class count is
    /// one more than the largest label.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(reader);
        let cols = rd.headers()?.len();
        if cols < 3 {
            return Err(Error::Dimension("dataset CSV needs features, label and split".into()));
        }
        let dim = cols - 2;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            for j in 0..dim {
                data.push(rec[j].parse::<f64>().map_err(|e| {
                    Error::Config(format!("bad feature value {:?}: {e}", &rec[j]))
                })?);
            }
            labels.push(
                rec[dim]
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("bad label {:?}: {e}", &rec[dim])))?,
            );
            splits.push(Split::parse(&rec[dim + 1])?);
        }
        let n = labels.len();
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(Matrix::from_vec(n, dim, data)?, labels, splits, k)
    }
}

/// Gaussian clusters, one per class, with a stratified 70/10/20 split and
/// label noise on the train split only.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, seed::STREAM_DATA);
    let k = spec.num_classes;
    let d = spec.input_dim;
    let n = k * spec.samples_per_class;

    let center_dist = Normal::new(0.0, spec.class_center_scale).expect("positive scale");
    let noise_dist = Normal::new(0.0, spec.cluster_spread).expect("positive spread");
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| center_dist.sample(&mut rng)).collect())
        .collect();

    let (n_train, n_val, _) = split_sizes(spec.samples_per_class);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            data.extend(center.iter().map(|&m| m + noise_dist.sample(&mut rng)));
            labels.push(c);
            splits.push(if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            });
        }
    }

    let mut train_rows: Vec<usize> = (0..n).filter(|&i| splits[i] == Split::Train).collect();
    let noisy = (spec.label_noise * train_rows.len() as f64).round() as usize;
    train_rows.shuffle(&mut rng);
    for &r in &train_rows[..noisy] {
        labels[r] = rng.gen_range(0..k);
    }

    Dataset::new(Matrix::from_vec(n, d, data)?, labels, splits, k)
}

/// Serializable description of a [`DataView`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataViewSpec {
    /// Class subset, relabeled to `0..len` in ascending class order. `None`
    /// keeps every class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    /// Fraction of train samples kept per class.
    pub sample_fraction: f64,
    /// Seed for the per-class train subsample.
    pub subsample_seed: u64,
}

impl Default for DataViewSpec {
    fn default() -> Self {
        Self {
            classes: None,
            sample_fraction: 1.0,
            subsample_seed: 0,
        }
    }
}

impl DataViewSpec {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn fraction(fraction: f64, seed: u64) -> Self {
        Self {
            sample_fraction: fraction,
            subsample_seed: seed,
            ..Self::default()
        }
    }

    pub fn classes(classes: Vec<usize>) -> Self {
        Self {
            classes: Some(classes),
            ..Self::default()
        }
    }

    /// Builds the view. `leading` classes, when given, take labels
    /// `0..leading.len()` and the remaining classes follow in ascending order.
    pub fn apply(&self, dataset: &Dataset, leading: Option<&[usize]>) -> Result<DataView> {
        let mut view = match &self.classes {
            Some(subset) => half_classes_view(dataset, subset)?,
            None => DataView::full(dataset),
        };
        if let Some(lead) = leading {
            let mut order = lead.to_vec();
            let rest: Vec<usize> = view
                .class_order
                .iter()
                .copied()
                .filter(|c| !lead.contains(c))
                .collect();
            if order.iter().any(|c| !view.class_order.contains(c)) {
                return Err(Error::ScenarioMismatch(
                    "new data view must contain every class of the old view".into(),
                ));
            }
            order.extend(rest);
            view = classes_view(dataset, &order)?;
        }
        if self.sample_fraction != 1.0 {
            view = subsample_train(&view, self.sample_fraction, self.subsample_seed)?;
        }
        Ok(view)
    }
}

/// Rows of a dataset with (possibly remapped) labels. `labels[j]` belongs to
/// `rows[j]`; view label `c` is original class `class_order[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataView {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    pub class_order: Vec<usize>,
    splits: Vec<Split>,
}

impl DataView {
    pub fn full(dataset: &Dataset) -> Self {
        Self {
            rows: (0..dataset.len()).collect(),
            labels: dataset.labels.clone(),
            class_order: (0..dataset.num_classes).collect(),
            splits: dataset.splits.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows and view labels of one split.
    pub fn split(&self, split: Split) -> (Vec<usize>, Vec<usize>) {
        self.rows
            .iter()
            .zip(&self.labels)
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|((&r, &y), _)| (r, y))
            .unzip()
    }
}

/// Per-class stratified subset of the train split; validation and test are
/// kept whole.
pub fn half_samples_view(dataset: &Dataset, fraction: f64, seed: u64) -> Result<DataView> {
    subsample_train(&DataView::full(dataset), fraction, seed)
}

fn subsample_train(base: &DataView, fraction: f64, seed: u64) -> Result<DataView> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("sample fraction {fraction} outside (0, 1]")));
    }
    let mut rng = seed::rng(seed, seed::STREAM_SUBSAMPLE);
    let mut keep = vec![true; base.len()];
    for c in 0..base.num_classes() {
        let mut positions: Vec<usize> = (0..base.len())
            .filter(|&j| base.splits[j] == Split::Train && base.labels[j] == c)
            .collect();
        let kept = (fraction * positions.len() as f64).round() as usize;
        if kept == 0 {
            return Err(Error::Config(format!(
                "sample fraction {fraction} leaves class {c} without train samples"
            )));
        }
        positions.shuffle(&mut rng);
        for &j in &positions[kept..] {
            keep[j] = false;
        }
    }
    let pick = |v: &[usize]| -> Vec<usize> {
        v.iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&x, _)| x)
            .collect()
    };
    Ok(DataView {
        rows: pick(&base.rows),
        labels: pick(&base.labels),
        class_order: base.class_order.clone(),
        splits: base
            .splits
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&s, _)| s)
            .collect(),
    })
}

/// Samples of the given classes only, relabeled to `0..subset.len()` in
/// ascending class order.
pub fn half_classes_view(dataset: &Dataset, subset: &[usize]) -> Result<DataView> {
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != subset.len() {
        return Err(Error::Config("class subset contains duplicates".into()));
    }
    classes_view(dataset, &sorted)
}

/// Samples of the listed classes, where class `order[j]` becomes label `j`.
pub fn classes_view(dataset: &Dataset, order: &[usize]) -> Result<DataView> {
    if order.is_empty() {
        return Err(Error::Empty("class subset".into()));
    }
    let mut remap = vec![None; dataset.num_classes];
    for (j, &c) in order.iter().enumerate() {
        if c >= dataset.num_classes {
            return Err(Error::LabelOutOfRange {
                label: c,
                classes: dataset.num_classes,
            });
        }
        if remap[c].is_some() {
            return Err(Error::Config(format!("class {c} listed twice")));
        }
        remap[c] = Some(j);
    }
    let mut view = DataView {
        rows: Vec::new(),
        labels: Vec::new(),
        class_order: order.to_vec(),
        splits: Vec::new(),
    };
    for i in 0..dataset.len() {
        if let Some(j) = remap[dataset.labels[i]] {
            view.rows.push(i);
            view.labels.push(j);
            view.splits.push(dataset.splits[i]);
        }
    }
    Ok(view)
}
