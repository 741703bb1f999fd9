//! Config-driven experiments: train one old model, train new models under a
//! chosen method, evaluate flips after every epoch and aggregate over
//! repetitions. Also hosts the method comparison, the focal-weight sweep, the
//! ensemble-size sweep and the report writers.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{generate, Dataset, Split, SyntheticSpec};
use crate::ensemble::{sweep_ensemble_size, train_ensemble, EvalSet, SeedRanges, SweepResult, SweepRow};
use crate::loss::{DistanceKind, FilterSpec, OldModelOracle, PcLossConfig, PcMode, PcObjective};
use crate::matrix::Matrix;
use crate::metrics::{
    default_entropy_bins, flip_report, nfr_by_uncertainty_bin, write_records_csv, FlipReport, PredictionRecord,
    UncertaintyHistogram,
};
use crate::nn::{argmax, train, train_with, CrossEntropy, Mlp, TrainConfig, TrainSet};
use crate::scenario::{build_scenario, InitSource, ScenarioBuild, ScenarioKind, UpdateScenario};
use crate::{Error, Result};

/// New single models use seed `base + NEW_SEED_OFFSET + repetition`.
pub const NEW_SEED_OFFSET: u64 = 1_000;
/// New ensembles in a method comparison start at `base + ENSEMBLE_SEED_OFFSET`.
pub const ENSEMBLE_SEED_OFFSET: u64 = 100_000;
/// Ensemble-size sweeps start at `base + SWEEP_SEED_OFFSET`.
pub const SWEEP_SEED_OFFSET: u64 = 200_000;
const MAX_ENSEMBLE: usize = 10_000;

/// How the new model is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    NoTreatment,
    Naive,
    FdKl,
    FdLm,
    /// Independently trained cross-entropy members, compared against an old
    /// ensemble of the same size.
    Ensemble(usize),
}

impl Method {
    pub fn label(&self) -> String {
        self.to_string()
    }

    /// Loss configuration for this method, taking lambda, filter and
    /// temperature from `base`.
    pub fn pc_config(&self, base: &PcLossConfig) -> PcLossConfig {
        let mode = match self {
            Method::NoTreatment | Method::Ensemble(_) => PcMode::None,
            Method::Naive => PcMode::Naive,
            Method::FdKl | Method::FdLm => PcMode::Focal,
        };
        let distance = match (self, base.distance) {
            (Method::FdKl, DistanceKind::Kl { temperature }) => DistanceKind::Kl { temperature },
            (Method::FdKl, DistanceKind::LogitMatch) => DistanceKind::Kl {
                temperature: DistanceKind::DEFAULT_TEMPERATURE,
            },
            (Method::FdLm, _) => DistanceKind::LogitMatch,
            (_, d) => d,
        };
        PcLossConfig {
            mode,
            distance,
            ..*base
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::NoTreatment => f.write_str("NoTreatment"),
            Method::Naive => f.write_str("Naive"),
            Method::FdKl => f.write_str("FD-KL"),
            Method::FdLm => f.write_str("FD-LM"),
            Method::Ensemble(l) => write!(f, "Ensemble({l})"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let key = t.to_ascii_lowercase().replace(['-', '_', ' '], "");
        let method = match key.as_str() {
            "notreatment" | "none" | "ce" => Method::NoTreatment,
            "naive" => Method::Naive,
            "fdkl" => Method::FdKl,
            "fdlm" => Method::FdLm,
            _ => {
                let size = key
                    .strip_prefix("ensemble(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown method {t:?}")))?;
                Method::Ensemble(size)
            }
        };
        Ok(method)
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A scenario given either by kind (reference construction for the dataset)
/// or spelled out in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSource {
    Kind(ScenarioKind),
    Full(UpdateScenario),
}

impl Default for ScenarioSource {
    fn default() -> Self {
        ScenarioSource::Kind(ScenarioKind::SameArchRetrain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub repetitions: usize,
    pub output_dir: PathBuf,
    /// Held-out split that flips are measured on.
    pub eval_split: Split,
    pub scenario: ScenarioSource,
    pub dataset: SyntheticSpec,
    pub train: TrainConfig,
    pub pc: PcLossConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::NoTreatment,
            repetitions: 1,
            output_dir: PathBuf::from("runs"),
            eval_split: Split::Test,
            scenario: ScenarioSource::default(),
            dataset: SyntheticSpec::default(),
            train: TrainConfig::default(),
            pc: PcLossConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn scenario(&self) -> UpdateScenario {
        match &self.scenario {
            ScenarioSource::Kind(kind) => {
                UpdateScenario::reference(*kind, self.dataset.input_dim, self.dataset.num_classes)
            }
            ScenarioSource::Full(s) => s.clone(),
        }
    }

    /// Loss configuration implied by `method` and the `pc` section.
    pub fn pc_config(&self) -> PcLossConfig {
        self.method.pc_config(&self.pc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        self.pc.validate()?;
        self.scenario().validate()?;
        let implied = self.method.pc_config(&self.pc).mode;
        if self.pc.mode != PcMode::None && self.pc.mode != implied {
            return Err(Error::Config(format!(
                "pc.mode {:?} contradicts method {}",
                self.pc.mode, self.method
            )));
        }
        if self.method == Method::FdLm && matches!(self.pc.distance, DistanceKind::Kl { .. }) {
            return Err(Error::Config("method FD-LM cannot use a KL distance".into()));
        }
        if let Method::Ensemble(size) = self.method {
            check_ensemble_size(size)?;
        }
        Ok(())
    }
}

fn check_ensemble_size(size: usize) -> Result<()> {
    if size == 0 || size > MAX_ENSEMBLE {
        return Err(Error::Config(format!(
            "ensemble size must lie in 1..={MAX_ENSEMBLE}, got {size}"
        )));
    }
    Ok(())
}

/// One row of the per-epoch series. `*_val` columns refer to the configured
/// evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub er_train: f64,
    pub er_val: f64,
    pub nfr_val: f64,
    pub rel_nfr_val: Option<f64>,
    pub nfr_train: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub method: Method,
    pub repetition: usize,
    /// Seed of the new model, or of the first new ensemble member.
    pub seed: u64,
    pub num_params: usize,
    pub series: Vec<EpochRow>,
    /// Flips on the evaluation split after the last epoch.
    pub report: FlipReport,
    /// Flips on the new model's training split after the last epoch.
    pub train_report: FlipReport,
    pub records: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub method: String,
    pub repetition: usize,
    pub error: String,
}

pub type RunOutcome = std::result::Result<RunArtifacts, RunFailure>;

/// Median, minimum and maximum over repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    /// `None` when there are no values.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Some(Self {
            median,
            min: v[0],
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub repetitions: usize,
    pub succeeded: usize,
    pub params: usize,
    pub er_old: Option<Spread>,
    pub er_new: Option<Spread>,
    pub nfr: Option<Spread>,
    pub rel_nfr: Option<Spread>,
    pub nfr_train: Option<Spread>,
    pub failures: Vec<RunFailure>,
}

impl Summary {
    fn from_outcomes(method: Method, params: usize, outcomes: &[RunOutcome]) -> Self {
        let ok: Vec<&RunArtifacts> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
        let collect = |f: &dyn Fn(&RunArtifacts) -> Option<f64>| -> Option<Spread> {
            Spread::of(&ok.iter().filter_map(|a| f(a)).collect::<Vec<_>>())
        };
        Self {
            method: method.label(),
            repetitions: outcomes.len(),
            succeeded: ok.len(),
            params,
            er_old: collect(&|a| Some(a.report.er_old)),
            er_new: collect(&|a| Some(a.report.er_new)),
            nfr: collect(&|a| Some(a.report.nfr)),
            rel_nfr: collect(&|a| a.report.rel_nfr),
            nfr_train: collect(&|a| Some(a.train_report.nfr)),
            failures: outcomes.iter().filter_map(|o| o.as_ref().err().cloned()).collect(),
        }
    }

    fn csv_row(&self) -> SummaryCsvRow {
        let med = |s: Option<Spread>| s.map(|s| s.median);
        let min = |s: Option<Spread>| s.map(|s| s.min);
        let max = |s: Option<Spread>| s.map(|s| s.max);
        SummaryCsvRow {
            method: self.method.clone(),
            repetitions: self.repetitions,
            succeeded: self.succeeded,
            params: self.params,
            er_old: med(self.er_old),
            er_new: med(self.er_new),
            er_new_min: min(self.er_new),
            er_new_max: max(self.er_new),
            nfr: med(self.nfr),
            nfr_min: min(self.nfr),
            nfr_max: max(self.nfr),
            rel_nfr: med(self.rel_nfr),
            rel_nfr_min: min(self.rel_nfr),
            rel_nfr_max: max(self.rel_nfr),
            nfr_train: med(self.nfr_train),
        }
    }
}

#[derive(Serialize)]
struct SummaryCsvRow {
    method: String,
    repetitions: usize,
    succeeded: usize,
    params: usize,
    er_old: Option<f64>,
    er_new: Option<f64>,
    er_new_min: Option<f64>,
    er_new_max: Option<f64>,
    nfr: Option<f64>,
    nfr_min: Option<f64>,
    nfr_max: Option<f64>,
    rel_nfr: Option<f64>,
    rel_nfr_min: Option<f64>,
    rel_nfr_max: Option<f64>,
    nfr_train: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub outcomes: Vec<RunOutcome>,
    pub summary: Summary,
}

impl ExperimentResult {
    pub fn artifacts(&self) -> impl Iterator<Item = &RunArtifacts> {
        self.outcomes.iter().filter_map(|o| o.as_ref().ok())
    }
}

/// Old-model predictions on the evaluation and training rows.
#[derive(Debug, Clone)]
struct OldSide {
    eval_pred: Vec<usize>,
    train_pred: Vec<usize>,
}

/// Everything shared by the runs of one configuration: the dataset, the
/// scenario build, the trained old model and its cached outputs. Immutable
/// once built.
#[derive(Debug, Clone)]
pub struct Lab {
    config: ExperimentConfig,
    dataset: Dataset,
    build: ScenarioBuild,
    old_train: (Vec<usize>, Vec<usize>),
    new_train: (Vec<usize>, Vec<usize>),
    old: Mlp,
    oracle: OldModelOracle,
    old_side: OldSide,
}

impl Lab {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = generate(&config.dataset)?;
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let build = build_scenario(&config.scenario(), &dataset, config.eval_split)?;
        let old_train = build.old_job.train_split();
        let new_train = build.new_job.train_split();

        let base = config.train.seed;
        let mut old = Mlp::init_with(&build.old_job.spec, base, config.train.weight_init)?;
        let data = TrainSet::new(&dataset.features, &old_train.0, &old_train.1)?;
        train(&mut old, data, &CrossEntropy, &config.train)?;

        let oracle = OldModelOracle::from_model(&old, &dataset.features, &new_train.0, &new_train.1)?;
        let old_side = OldSide {
            eval_pred: predictions(&old.logits_for_rows(&dataset.features, &build.eval.rows)?),
            train_pred: predictions(&old.logits_for_rows(&dataset.features, &build.eval.train_rows)?),
        };
        Ok(Self {
            config: config.clone(),
            dataset,
            build,
            old_train,
            new_train,
            old,
            oracle,
            old_side,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn build(&self) -> &ScenarioBuild {
        &self.build
    }

    pub fn old_model(&self) -> &Mlp {
        &self.old
    }

    pub fn oracle(&self) -> &OldModelOracle {
        &self.oracle
    }

    /// Old-model predictions on the evaluation rows, in row order.
    pub fn old_predictions(&self) -> &[usize] {
        &self.old_side.eval_pred
    }

    fn base_seed(&self) -> u64 {
        self.config.train.seed
    }

    fn old_side_for(&self, method: Method) -> Result<OldSide> {
        match method {
            Method::Ensemble(size) => {
                check_ensemble_size(size)?;
                let data = TrainSet::new(&self.dataset.features, &self.old_train.0, &self.old_train.1)?;
                let old = train_ensemble(&self.build.old_job.spec, data, &self.config.train, size, self.base_seed())?;
                let pred = |rows: &[usize]| -> Result<Vec<usize>> {
                    rows.iter().map(|&r| old.predict(self.dataset.features.row(r))).collect()
                };
                Ok(OldSide {
                    eval_pred: pred(&self.build.eval.rows)?,
                    train_pred: pred(&self.build.eval.train_rows)?,
                })
            }
            _ => Ok(self.old_side.clone()),
        }
    }

    fn params_for(&self, method: Method) -> usize {
        let single = self.build.new_job.spec.num_params();
        match method {
            Method::Ensemble(size) => size * single,
            _ => single,
        }
    }

    /// Runs `repetitions` repetitions of `method` with the loss settings in
    /// `pc`. Repetitions run concurrently; a failing repetition does not
    /// affect the others.
    pub fn run_method(&self, method: Method, pc: &PcLossConfig) -> Result<(Vec<RunOutcome>, Summary)> {
        let pc = method.pc_config(pc);
        pc.validate()?;
        let old_side = self.old_side_for(method)?;
        let outcomes: Vec<RunOutcome> = (0..self.config.repetitions)
            .into_par_iter()
            .map(|rep| {
                self.run_repetition(method, &pc, &old_side, rep)
                    .map_err(|e| RunFailure {
                        method: method.label(),
                        repetition: rep,
                        error: e.to_string(),
                    })
            })
            .collect();
        let summary = Summary::from_outcomes(method, self.params_for(method), &outcomes);
        Ok((outcomes, summary))
    }

    /// Runs the configured method.
    pub fn run(&self) -> Result<ExperimentResult> {
        let (outcomes, summary) = self.run_method(self.config.method, &self.config.pc)?;
        Ok(ExperimentResult {
            config: self.config.clone(),
            outcomes,
            summary,
        })
    }

    fn run_repetition(&self, method: Method, pc: &PcLossConfig, old: &OldSide, rep: usize) -> Result<RunArtifacts> {
        let mut evaluator = Evaluator::new(self, old);
        let seed = match method {
            Method::Ensemble(size) => {
                let seed = self.base_seed() + ENSEMBLE_SEED_OFFSET + (rep * size) as u64;
                self.train_new_ensemble(size, seed, &mut evaluator)?;
                seed
            }
            _ => {
                let seed = self.base_seed() + NEW_SEED_OFFSET + rep as u64;
                self.train_new_single(pc, seed, &mut evaluator)?;
                seed
            }
        };
        evaluator.finish(method, rep, seed, self.params_for(method))
    }

    fn new_train_set(&self) -> Result<TrainSet<'_>> {
        TrainSet::new(&self.dataset.features, &self.new_train.0, &self.new_train.1)
    }

    fn train_new_single(&self, pc: &PcLossConfig, seed: u64, evaluator: &mut Evaluator<'_>) -> Result<()> {
        let job = &self.build.new_job;
        let mut model = match job.init {
            InitSource::Random => Mlp::init_with(&job.spec, seed, self.config.train.weight_init)?,
            InitSource::OldModel => self.old.clone(),
        };
        let cfg = TrainConfig {
            seed,
            ..self.config.train.clone()
        };
        let objective = PcObjective {
            oracle: Some(&self.oracle),
            config: *pc,
        };
        train_with(&mut model, self.new_train_set()?, &objective, &cfg, |_, m| {
            let eval = m.logits_for_rows(&self.dataset.features, &self.build.eval.rows)?;
            let tr = m.logits_for_rows(&self.dataset.features, &self.build.eval.train_rows)?;
            evaluator.push(&eval, &tr)
        })?;
        Ok(())
    }

    /// Trains `size` cross-entropy members with seeds `seed..seed + size` and
    /// evaluates the logit-averaged ensemble after every epoch. Members train
    /// in parallel; their logits are summed in member order.
    fn train_new_ensemble(&self, size: usize, seed: u64, evaluator: &mut Evaluator<'_>) -> Result<()> {
        let epochs = self.config.train.epochs;
        let k = self.build.new_job.spec.num_classes();
        let n_eval = self.build.eval.rows.len();
        let n_train = self.build.eval.train_rows.len();
        let mut eval_sum = vec![Matrix::zeros(n_eval, k); epochs];
        let mut train_sum = vec![Matrix::zeros(n_train, k); epochs];
        let chunk = rayon::current_num_threads().max(1);
        let members: Vec<u64> = (0..size as u64).map(|j| seed + j).collect();
        for group in members.chunks(chunk) {
            let traces = group
                .par_iter()
                .map(|&s| self.member_trace(s))
                .collect::<Result<Vec<_>>>()?;
            for (evals, trains) in traces {
                for (acc, m) in eval_sum.iter_mut().zip(&evals) {
                    add_assign(acc, m);
                }
                for (acc, m) in train_sum.iter_mut().zip(&trains) {
                    add_assign(acc, m);
                }
            }
        }
        let l = size as f64;
        for (mut e, mut t) in eval_sum.into_iter().zip(train_sum) {
            e.as_mut_slice().iter_mut().for_each(|v| *v /= l);
            t.as_mut_slice().iter_mut().for_each(|v| *v /= l);
            evaluator.push(&e, &t)?;
        }
        Ok(())
    }

    fn member_trace(&self, seed: u64) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
        let job = &self.build.new_job;
        let cfg = TrainConfig {
            seed,
            ..self.config.train.clone()
        };
        let mut model = Mlp::init_with(&job.spec, seed, cfg.weight_init)?;
        let (mut evals, mut trains) = (Vec::new(), Vec::new());
        train_with(&mut model, self.new_train_set()?, &CrossEntropy, &cfg, |_, m| {
            evals.push(m.logits_for_rows(&self.dataset.features, &self.build.eval.rows)?);
            trains.push(m.logits_for_rows(&self.dataset.features, &self.build.eval.train_rows)?);
            Ok(())
        })?;
        Ok((evals, trains))
    }
}

fn add_assign(acc: &mut Matrix, m: &Matrix) {
    for (a, v) in acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
        *a += v;
    }
}

fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

fn records(rows: &[usize], labels: &[usize], old_pred: &[usize], new_pred: &[usize]) -> Vec<PredictionRecord> {
    rows.iter()
        .zip(labels)
        .zip(old_pred.iter().zip(new_pred))
        .map(|((&r, &y), (&o, &n))| PredictionRecord {
            sample_id: r,
            true_label: y,
            old_pred: o,
            new_pred: n,
        })
        .collect()
}

/// Accumulates the per-epoch series. Validation and training flips go through
/// the same code path, differing only in the rows they read.
struct Evaluator<'a> {
    lab: &'a Lab,
    old: &'a OldSide,
    series: Vec<EpochRow>,
    last: Option<(FlipReport, FlipReport, Vec<PredictionRecord>)>,
}

impl<'a> Evaluator<'a> {
    fn new(lab: &'a Lab, old: &'a OldSide) -> Self {
        Self {
            lab,
            old,
            series: Vec::new(),
            last: None,
        }
    }

    fn push(&mut self, eval_logits: &Matrix, train_logits: &Matrix) -> Result<()> {
        let plan = &self.lab.build.eval;
        let eval_records = records(&plan.rows, &plan.labels, &self.old.eval_pred, &predictions(eval_logits));
        let train_records = records(
            &plan.train_rows,
            &plan.train_labels,
            &self.old.train_pred,
            &predictions(train_logits),
        );
        let eval = flip_report(&eval_records)?;
        let tr = flip_report(&train_records)?;
        self.series.push(EpochRow {
            epoch: self.series.len() + 1,
            er_train: tr.er_new,
            er_val: eval.er_new,
            nfr_val: eval.nfr,
            rel_nfr_val: eval.rel_nfr,
            nfr_train: tr.nfr,
        });
        self.last = Some((eval, tr, eval_records));
        Ok(())
    }

    fn finish(self, method: Method, repetition: usize, seed: u64, num_params: usize) -> Result<RunArtifacts> {
        let (report, train_report, records) = self
            .last
            .ok_or_else(|| Error::Empty("no epochs were evaluated".into()))?;
        Ok(RunArtifacts {
            method,
            repetition,
            seed,
            num_params,
            series: self.series,
            report,
            train_report,
            records,
        })
    }
}

/// Trains the old model and runs the configured method.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    Lab::new(config)?.run()
}

/// One row of the method comparison; metric columns are medians over
/// repetitions and empty when every repetition failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub er_old: Option<f64>,
    pub er_new: Option<f64>,
    pub nfr: Option<f64>,
    pub rel_nfr: Option<f64>,
    pub params: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub summaries: Vec<Summary>,
}

impl ComparisonTable {
    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Runs every method against the same old model and dataset. Methods run
/// concurrently.
pub fn compare_methods(lab: &Lab, methods: &[Method]) -> Result<ComparisonTable> {
    if methods.is_empty() {
        return Err(Error::Empty("method list".into()));
    }
    let results = methods
        .par_iter()
        .map(|&m| lab.run_method(m, &lab.config.pc))
        .collect::<Result<Vec<_>>>()?;
    let summaries: Vec<Summary> = results.into_iter().map(|(_, s)| s).collect();
    let rows = summaries
        .iter()
        .map(|s| ComparisonRow {
            method: s.method.clone(),
            er_old: s.er_old.map(|v| v.median),
            er_new: s.er_new.map(|v| v.median),
            nfr: s.nfr.map(|v| v.median),
            rel_nfr: s.rel_nfr.map(|v| v.median),
            params: s.params,
        })
        .collect();
    Ok(ComparisonTable { rows, summaries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalRow {
    pub alpha: f64,
    pub beta: f64,
    pub er_new: Option<f64>,
    pub nfr: Option<f64>,
    pub rel_nfr: Option<f64>,
    pub succeeded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FocalSweep {
    pub method: String,
    pub er_old: Option<f64>,
    pub rows: Vec<FocalRow>,
    pub failures: Vec<RunFailure>,
}

impl FocalSweep {
    pub fn row(&self, alpha: f64, beta: f64) -> Option<&FocalRow> {
        self.rows.iter().find(|r| r.alpha == alpha && r.beta == beta)
    }
}

/// Parses `"a:b,a:b,..."` into filter settings.
pub fn parse_grid(text: &str) -> Result<Vec<FilterSpec>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("grid entry {pair:?} is not alpha:beta")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number {s:?} in grid")))
            };
            let spec = FilterSpec {
                alpha: parse(a)?,
                beta: parse(b)?,
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

/// Focal distillation at each `(alpha, beta)` with everything else fixed. The
/// distance follows the configured method (FD-KL, otherwise FD-LM).
pub fn sweep_focal(lab: &Lab, grid: &[FilterSpec]) -> Result<FocalSweep> {
    if grid.is_empty() {
        return Err(Error::Empty("focal grid".into()));
    }
    let method = match lab.config.method {
        Method::FdKl => Method::FdKl,
        _ => Method::FdLm,
    };
    let results = grid
        .par_iter()
        .map(|&filter| {
            let pc = PcLossConfig {
                filter,
                ..lab.config.pc
            };
            lab.run_method(method, &pc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sweep = FocalSweep {
        method: method.label(),
        er_old: None,
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for (filter, (_, summary)) in grid.iter().zip(results) {
        sweep.er_old = sweep.er_old.or(summary.er_old.map(|s| s.median));
        sweep.rows.push(FocalRow {
            alpha: filter.alpha,
            beta: filter.beta,
            er_new: summary.er_new.map(|s| s.median),
            nfr: summary.nfr.map(|s| s.median),
            rel_nfr: summary.rel_nfr.map(|s| s.median),
            succeeded: summary.succeeded,
        });
        sweep.failures.extend(summary.failures);
    }
    Ok(sweep)
}

/// Median over repetitions of one ensemble size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSweepRow {
    #[serde(rename = "L")]
    pub size: usize,
    pub er_old: f64,
    pub er_new: f64,
    pub nfr: f64,
    pub rel_nfr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSweep {
    pub rows: Vec<EnsembleSweepRow>,
    pub repetitions: Vec<SweepResult>,
    /// Negative flips between single old and new members, binned by the
    /// predictive entropy of the largest old ensemble (first repetition).
    pub histogram: UncertaintyHistogram,
}

/// Ensemble-size sweep over `config.repetitions` disjoint seed ranges.
/// Repetition `r` uses old seeds starting at
/// `base + SWEEP_SEED_OFFSET + 2 r L_max` and new seeds right after them.
pub fn sweep_ensemble(lab: &Lab, sizes: &[usize]) -> Result<EnsembleSweep> {
    let largest = *sizes.last().ok_or_else(|| Error::Empty("ensemble sizes".into()))?;
    check_ensemble_size(largest)?;
    let base = lab.base_seed() + SWEEP_SEED_OFFSET;
    let eval = EvalSet {
        features: &lab.dataset.features,
        rows: &lab.build.eval.rows,
        labels: &lab.build.eval.labels,
    };
    let old_data = TrainSet::new(&lab.dataset.features, &lab.old_train.0, &lab.old_train.1)?;
    let new_data = lab.new_train_set()?;
    let sweeps = (0..lab.config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let old_base = base + (2 * rep * largest) as u64;
            let seeds = SeedRanges {
                old_base,
                new_base: old_base + largest as u64,
            };
            sweep_ensemble_size(
                &lab.build.old_job.spec,
                &lab.build.new_job.spec,
                old_data,
                new_data,
                eval,
                &lab.config.train,
                sizes,
                seeds,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let first = &sweeps[0];
    let single = |e: &crate::ensemble::Ensemble| -> Result<Vec<usize>> {
        let m = &e.members()[0];
        eval.rows.iter().map(|&r| m.predict(eval.features.row(r))).collect()
    };
    let recs = records(eval.rows, eval.labels, &single(&first.old)?, &single(&first.new)?);
    let uncertainties = first.old.uncertainties(eval.features, eval.rows)?;
    let edges = default_entropy_bins(first.old.num_classes(), 20);
    let histogram = nfr_by_uncertainty_bin(&recs, &uncertainties, &edges)?;

    let repetitions: Vec<SweepResult> = sweeps.into_iter().map(|s| s.result).collect();
    let rows = sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let pick = |f: &dyn Fn(&SweepRow) -> Option<f64>| -> Option<f64> {
                Spread::of(&repetitions.iter().filter_map(|r| f(&r.rows[i])).collect::<Vec<_>>()).map(|s| s.median)
            };
            EnsembleSweepRow {
                size,
                er_old: pick(&|r| Some(r.er_old)).unwrap_or(f64::NAN),
                er_new: pick(&|r| Some(r.er_new)).unwrap_or(f64::NAN),
                nfr: pick(&|r| Some(r.nfr)).unwrap_or(f64::NAN),
                rel_nfr: pick(&|r| r.rel_nfr),
            }
        })
        .collect();
    Ok(EnsembleSweep {
        rows,
        repetitions,
        histogram,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown format {other:?}, expected csv or json"))),
        }
    }
}

fn write_table<T: Serialize>(path: &Path, rows: &[T], json: &impl Serialize, format: Format) -> Result<()> {
    let mut file = fs::File::create(path)?;
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut file);
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut file, json)?;
            file.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn write_epoch_csv<W: Write>(writer: W, series: &[EpochRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in series {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the resolved config, one directory per repetition (`epochs.csv`,
/// `flips.csv`, `report.json`, or `error.txt` for a failed repetition) and a
/// summary in `format`. Returns the written paths.
pub fn emit_report(result: &ExperimentResult, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let config_path = dir.join("config.toml");
    fs::write(&config_path, result.config.to_toml_string()?)?;
    written.push(config_path);
    for outcome in &result.outcomes {
        match outcome {
            Ok(a) => {
                let rep = dir.join(format!("rep{}", a.repetition));
                fs::create_dir_all(&rep)?;
                let epochs = rep.join("epochs.csv");
                write_epoch_csv(fs::File::create(&epochs)?, &a.series)?;
                let flips = rep.join("flips.csv");
                write_records_csv(fs::File::create(&flips)?, &a.records)?;
                let report = rep.join("report.json");
                fs::write(&report, a.report.to_json()? + "\n")?;
                let train_report = rep.join("train_report.json");
                fs::write(&train_report, a.train_report.to_json()? + "\n")?;
                written.extend([epochs, flips, report, train_report]);
            }
            Err(f) => {
                let rep = dir.join(format!("rep{}", f.repetition));
                fs::create_dir_all(&rep)?;
                let path = rep.join("error.txt");
                fs::write(&path, format!("{}\n", f.error))?;
                written.push(path);
            }
        }
    }
    let summary = dir.join(format!("summary.{}", format.extension()));
    write_table(&summary, &[result.summary.csv_row()], &result.summary, format)?;
    written.push(summary);
    Ok(written)
}

pub fn emit_comparison(table: &ComparisonTable, dir: &Path, format: Format) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("comparison.{}", format.extension()));
    write_table(&path, &table.rows, table, format)?;
    Ok(path)
}

pub fn emit_focal_sweep(sweep: &FocalSweep, dir: &Path, format: Format) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("focal_sweep.{}", format.extension()));
    write_table(&path, &sweep.rows, sweep, format)?;
    Ok(path)
}

pub fn emit_ensemble_sweep(sweep: &EnsembleSweep, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("ensemble_sweep.{}", format.extension()));
    #[derive(Serialize)]
    struct Doc<'a> {
        rows: &'a [EnsembleSweepRow],
        repetitions: &'a [SweepResult],
    }
    let doc = Doc {
        rows: &sweep.rows,
        repetitions: &sweep.repetitions,
    };
    write_table(&path, &sweep.rows, &doc, format)?;
    let mut written = vec![path];
    for (i, rep) in sweep.repetitions.iter().enumerate() {
        let p = dir.join(format!("ensemble_sweep_rep{i}.csv"));
        rep.write_csv(fs::File::create(&p)?)?;
        written.push(p);
    }
    let hist = dir.join("uncertainty_hist.csv");
    sweep.histogram.write_csv(fs::File::create(&hist)?)?;
    written.push(hist);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            repetitions: 2,
            dataset: SyntheticSpec {
                num_classes: 4,
                input_dim: 6,
                samples_per_class: 40,
                ..SyntheticSpec::default()
            },
            train: TrainConfig {
                epochs: 3,
                learning_rate: 0.01,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn method_labels_round_trip() {
        for m in [
            Method::NoTreatment,
            Method::Naive,
            Method::FdKl,
            Method::FdLm,
            Method::Ensemble(16),
        ] {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert_eq!("fd_lm".parse::<Method>().unwrap(), Method::FdLm);
        assert!("ensemble()".parse::<Method>().is_err());
        assert!("bct".parse::<Method>().is_err());
    }

    #[test]
    fn method_selects_loss() {
        let base = PcLossConfig::default();
        assert_eq!(Method::NoTreatment.pc_config(&base).mode, PcMode::None);
        assert_eq!(Method::Naive.pc_config(&base).mode, PcMode::Naive);
        let kl = Method::FdKl.pc_config(&base);
        assert_eq!(kl.mode, PcMode::Focal);
        assert_eq!(
            kl.distance,
            DistanceKind::Kl {
                temperature: DistanceKind::DEFAULT_TEMPERATURE
            }
        );
        assert_eq!(Method::FdLm.pc_config(&base).distance, DistanceKind::LogitMatch);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = tiny();
        cfg.method = Method::FdKl;
        cfg.pc.distance = DistanceKind::Kl { temperature: 10.0 };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);

        cfg.scenario = ScenarioSource::Full(UpdateScenario::reference(ScenarioKind::ClassGrowth, 6, 4));
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn config_rejects_contradictions() {
        let mut cfg = tiny();
        cfg.method = Method::FdLm;
        cfg.pc.mode = PcMode::Naive;
        assert!(cfg.validate().is_err());
        cfg.pc.mode = PcMode::None;
        cfg.pc.distance = DistanceKind::Kl { temperature: 1.0 };
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.repetitions = 0;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn spread_median() {
        assert_eq!(Spread::of(&[]), None);
        let s = Spread::of(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.median, s.min, s.max), (2.0, 1.0, 3.0));
        assert_eq!(Spread::of(&[4.0, 1.0]).unwrap().median, 2.5);
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0:0, 1:0,1:5").unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g[2], FilterSpec { alpha: 1.0, beta: 5.0 });
        assert!(parse_grid("1-5").is_err());
        assert!(parse_grid("-1:2").is_err());
    }

    #[test]
    fn run_produces_one_series_row_per_epoch() {
        let result = run_experiment(&tiny()).unwrap();
        assert_eq!(result.summary.succeeded, 2);
        for a in result.artifacts() {
            assert_eq!(a.series.len(), 3);
            let last = a.series.last().unwrap();
            assert_eq!(last.nfr_val, a.report.nfr);
            assert_eq!(last.er_val, a.report.er_new);
            assert_eq!(last.nfr_train, a.train_report.nfr);
        }
        let seeds: Vec<u64> = result.artifacts().map(|a| a.seed).collect();
        assert_eq!(seeds, vec![1000, 1001]);
    }

    #[test]
    fn zero_filter_matches_no_treatment() {
        let lab = Lab::new(&tiny()).unwrap();
        let sweep = sweep_focal(&lab, &[FilterSpec { alpha: 0.0, beta: 0.0 }]).unwrap();
        let (_, plain) = lab.run_method(Method::NoTreatment, &lab.config.pc).unwrap();
        assert_eq!(sweep.rows[0].nfr, plain.nfr.map(|s| s.median));
        assert_eq!(sweep.rows[0].er_new, plain.er_new.map(|s| s.median));
    }

    #[test]
    fn compare_shares_the_old_model() {
        let lab = Lab::new(&tiny()).unwrap();
        let table = compare_methods(&lab, &[Method::NoTreatment, Method::Naive, Method::FdLm, Method::Ensemble(2)]).unwrap();
        let er_old: Vec<_> = table.rows[..3].iter().map(|r| r.er_old).collect();
        assert!(er_old.iter().all(|v| *v == er_old[0]));
        let single = table.row("NoTreatment").unwrap().params;
        assert_eq!(table.row("Ensemble(2)").unwrap().params, 2 * single);
    }

    #[test]
    fn ensemble_of_one_matches_single_model_pipeline() {
        let lab = Lab::new(&tiny()).unwrap();
        let (ens, _) = lab.run_method(Method::Ensemble(1), &lab.config.pc).unwrap();
        let e = ens[0].as_ref().unwrap();
        // Old side is the seed-`base` model either way.
        assert_eq!(e.report.er_old, lab.run_method(Method::NoTreatment, &lab.config.pc).unwrap().1.er_old.unwrap().median);
        assert_eq!(e.seed, ENSEMBLE_SEED_OFFSET);
    }

    #[test]
    fn divergence_fails_only_that_repetition() {
        let mut cfg = tiny();
        cfg.method = Method::FdLm;
        cfg.train.learning_rate = 50.0;
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.summary.succeeded, 0);
        assert_eq!(result.summary.failures.len(), 2);
        assert!(result.summary.nfr.is_none());
    }
}
