//! Desk-scale benchmark scenarios and reporting.
//!
//! Two families of scenario are provided: one-dimensional regression with two
//! experts whose training domains are Gaussians at different centres, and
//! 8x8 handwritten digits with ten experts each trained mostly on one digit.
//! Experts are trained here and frozen before any combination method sees
//! them; only their training features are passed on.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::density::ModelInfo;
use crate::ensembles::{bma_weights, EnsembleStrategy, StrategyKind, DEFAULT_ENTROPY_FLOOR};
use crate::error::{Result, SmcError};
use crate::metrics::{auroc_ovr, relative_rmse, rmse};
use crate::model::{Expert, MlpExpert, ModelBundle, OutputKind, Prediction};
use crate::nn::{Activation, AdamConfig, Mlp, Trainable};
use crate::pipeline::{fit, FitConfig, FittedPipeline};
use crate::representation::{LatentMap, LossWeights};
use crate::rng::{self, SmcRng};

const DIGITS_CSV: &str = include_str!("../data/digits8x8.csv");

// ---------------------------------------------------------------------------
// Expert training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertTraining {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    /// Rows per step; 0 uses the full training set.
    pub minibatch: usize,
}

impl ExpertTraining {
    pub fn regression() -> Self {
        Self {
            hidden: vec![16, 16],
            steps: 2000,
            learning_rate: 1e-2,
            minibatch: 0,
        }
    }

    pub fn classification() -> Self {
        Self {
            hidden: vec![32],
            steps: 1000,
            learning_rate: 1e-2,
            minibatch: 0,
        }
    }
}

impl Default for ExpertTraining {
    fn default() -> Self {
        Self::regression()
    }
}

fn batch_rows(n: usize, minibatch: usize, rng: &mut SmcRng) -> Vec<usize> {
    if minibatch == 0 || minibatch >= n {
        (0..n).collect()
    } else {
        let mut rows = rand::seq::index::sample(rng, n, minibatch).into_vec();
        rows.sort_unstable();
        rows
    }
}

/// Mean squared error regression network on pre-scaled inputs.
pub fn train_regressor(x: &Matrix, y: &[f64], cfg: &ExpertTraining, rng: &mut SmcRng) -> Result<Mlp> {
    if x.rows() != y.len() {
        return Err(SmcError::LengthMismatch {
            left: x.rows(),
            right: y.len(),
        });
    }
    let mut dims = vec![x.cols()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(1);
    let mut t = Trainable::new(Mlp::new(&dims, Activation::Identity, rng)?);
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    for _ in 0..cfg.steps {
        let rows = batch_rows(x.rows(), cfg.minibatch, rng);
        let xb = x.select_rows(&rows);
        let tape = t.net.forward_tape(&xb)?;
        let out = tape.output();
        let scale = 2.0 / rows.len() as f64;
        let upstream = Matrix::from_vec(
            rows.len(),
            1,
            rows.iter().enumerate().map(|(r, &i)| scale * (out.get(r, 0) - y[i])).collect(),
        )?;
        let (g, _) = t.net.backward(&tape, &upstream)?;
        t.step(&g, &adam)?;
    }
    Ok(t.net)
}

/// Softmax classifier trained on mean cross-entropy.
pub fn train_classifier(
    x: &Matrix,
    labels: &[usize],
    classes: usize,
    cfg: &ExpertTraining,
    rng: &mut SmcRng,
) -> Result<Mlp> {
    if x.rows() != labels.len() {
        return Err(SmcError::LengthMismatch {
            left: x.rows(),
            right: labels.len(),
        });
    }
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(SmcError::invalid(format!("label {l} out of range for {classes} classes")));
    }
    let mut dims = vec![x.cols()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(classes);
    let mut t = Trainable::new(Mlp::new(&dims, Activation::Softmax, rng)?);
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    for _ in 0..cfg.steps {
        let rows = batch_rows(x.rows(), cfg.minibatch, rng);
        let xb = x.select_rows(&rows);
        let tape = t.net.forward_tape(&xb)?;
        let out = tape.output();
        let mut upstream = Matrix::zeros(rows.len(), classes);
        for (r, &i) in rows.iter().enumerate() {
            let p = out.get(r, labels[i]).max(1e-12);
            upstream.set(r, labels[i], -1.0 / (p * rows.len() as f64));
        }
        let (g, _) = t.net.backward(&tape, &upstream)?;
        t.step(&g, &adam)?;
    }
    Ok(t.net)
}

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionVariant {
    Standard,
    Gap,
    Overlap,
}

/// Everything a benchmark run needs. Validation data is labelled and only
/// used by the model-averaging baseline.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub bundle: ModelBundle,
    /// The experts inside `bundle`, in order.
    pub experts: Vec<MlpExpert>,
    pub train: Vec<Dataset>,
    pub test: Dataset,
    pub validation: Dataset,
    /// Reference predictions on the test set from an ideal domain switch.
    pub oracle: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionScenario {
    pub centers: Vec<f64>,
    pub std: f64,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_validation: usize,
    pub expert: ExpertTraining,
    pub seed: u64,
}

impl Default for RegressionScenario {
    fn default() -> Self {
        Self::new(RegressionVariant::Standard, 0)
    }
}

impl RegressionScenario {
    pub fn new(variant: RegressionVariant, seed: u64) -> Self {
        let centers = match variant {
            RegressionVariant::Standard => vec![5.0, 15.0],
            RegressionVariant::Gap => vec![0.0, 20.0],
            RegressionVariant::Overlap => vec![10.0, 10.0],
        };
        Self {
            centers,
            std: 3.5,
            noise_std: 0.1,
            n_train: 500,
            n_test: 400,
            n_validation: 100,
            expert: ExpertTraining::regression(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(SmcError::Empty("regression centers"));
        }
        if !(self.std > 0.0 && self.noise_std >= 0.0) {
            return Err(SmcError::invalid("regression stds must be positive"));
        }
        if self.n_train == 0 || self.n_test == 0 || self.n_validation == 0 {
            return Err(SmcError::invalid("scenario sizes must be at least 1"));
        }
        Ok(())
    }

    /// Test domain `[min centre - 5, max centre + 5]`.
    pub fn test_range(&self) -> (f64, f64) {
        let lo = self.centers.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.centers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo - 5.0, hi + 5.0)
    }

    pub fn target(&self, x: f64) -> f64 {
        x.sin()
    }

    fn uniform_set(&self, n: usize, rng: &mut SmcRng) -> Result<Dataset> {
        let (lo, hi) = self.test_range();
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| SmcError::invalid(e.to_string()))?;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        let ys = xs.iter().map(|&x| self.target(x) + noise.sample(rng)).collect();
        Dataset::new(Matrix::from_vec(n, 1, xs)?, Some(ys))
    }

    pub fn build(&self) -> Result<Scenario> {
        self.validate()?;
        let mut rng = rng::stream(self.seed, "scenario");
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| SmcError::invalid(e.to_string()))?;
        let mut pairs: Vec<(Arc<dyn Expert>, ModelInfo)> = Vec::new();
        let mut experts = Vec::new();
        let mut train = Vec::new();
        for (j, &c) in self.centers.iter().enumerate() {
            let domain = Normal::new(c, self.std).map_err(|e| SmcError::invalid(e.to_string()))?;
            let xs: Vec<f64> = (0..self.n_train).map(|_| domain.sample(&mut rng)).collect();
            let ys: Vec<f64> = xs.iter().map(|&x| self.target(x) + noise.sample(&mut rng)).collect();
            let features = Matrix::from_vec(self.n_train, 1, xs)?;
            let scaled_rows: Vec<f64> = features.as_slice().iter().map(|x| (x - c) / self.std).collect();
            let scaled = Matrix::from_vec(self.n_train, 1, scaled_rows)?;
            let mut expert_rng = rng::stream(self.seed, &format!("expert-{j}"));
            let net = train_regressor(&scaled, &ys, &self.expert, &mut expert_rng)?;
            let expert = MlpExpert::new(format!("model-{j}"), net, vec![c], vec![self.std])?;
            pairs.push((Arc::new(expert.clone()), ModelInfo::samples(features.clone())?));
            experts.push(expert);
            train.push(Dataset::new(features, Some(ys))?);
        }
        let bundle = ModelBundle::from_pairs(pairs)?;
        let test = self.uniform_set(self.n_test, &mut rng)?;
        let validation = self.uniform_set(self.n_validation, &mut rng)?;
        let oracle = test
            .features()
            .iter_rows()
            .map(|x| {
                let nearest = self
                    .centers
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (x[0] - a.1).abs().total_cmp(&(x[0] - b.1).abs()))
                    .map(|(j, _)| j)
                    .unwrap_or(0);
                Ok(bundle.predict(nearest, x)?.as_regression().unwrap_or(f64::NAN))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scenario {
            name: "regression".into(),
            bundle,
            experts,
            train,
            test,
            validation,
            oracle: Some(oracle),
        })
    }
}

pub fn make_regression_scenario(variant: RegressionVariant, seed: u64) -> Result<Scenario> {
    let mut s = RegressionScenario::new(variant, seed).build()?;
    s.name = format!("regression-{}", variant_name(variant));
    Ok(s)
}

fn variant_name(v: RegressionVariant) -> &'static str {
    match v {
        RegressionVariant::Standard => "standard",
        RegressionVariant::Gap => "gap",
        RegressionVariant::Overlap => "overlap",
    }
}

/// Loads the 8x8 digits corpus from `path`, or the bundled copy.
pub fn load_digits(path: Option<&Path>) -> Result<Dataset> {
    let data = match path {
        Some(p) => Dataset::from_csv_path(p)?,
        None => Dataset::from_csv_reader(DIGITS_CSV.as_bytes())?,
    };
    if data.is_empty() {
        return Err(SmcError::Empty("digits corpus"));
    }
    let labels = data.class_labels()?;
    if labels.iter().any(|&l| l >= 10) {
        return Err(SmcError::invalid("digits labels must be in 0..10"));
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DigitsScenario {
    pub corpus: Option<PathBuf>,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    /// Share of each expert's set taken from its own digit.
    pub specialty_fraction: f64,
    pub expert: ExpertTraining,
    pub seed: u64,
}

impl Default for DigitsScenario {
    fn default() -> Self {
        Self {
            corpus: None,
            test_fraction: 0.2,
            validation_fraction: 0.1,
            specialty_fraction: 0.9,
            expert: ExpertTraining::classification(),
            seed: 0,
        }
    }
}

pub const DIGIT_CLASSES: usize = 10;
const PIXEL_SCALE: f64 = 16.0;

impl DigitsScenario {
    /// Ten experts, each on a tenth of the training split with
    /// `specialty_fraction` of its rows from its own digit. Model information
    /// holds each expert's full training features in shuffled order.
    pub fn build(&self) -> Result<Scenario> {
        if !(0.0..1.0).contains(&(self.test_fraction + self.validation_fraction))
            || !(0.0..=1.0).contains(&self.specialty_fraction)
        {
            return Err(SmcError::invalid("digits fractions out of range"));
        }
        let corpus = load_digits(self.corpus.as_deref())?;
        let mut rng = rng::stream(self.seed, "scenario");
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let n_test = (self.test_fraction * corpus.len() as f64).round() as usize;
        let n_val = (self.validation_fraction * corpus.len() as f64).round() as usize;
        let test = corpus.subset(&order[..n_test]);
        let validation = corpus.subset(&order[n_test..n_test + n_val]);
        let pool: Vec<usize> = order[n_test + n_val..].to_vec();
        let labels = corpus.class_labels()?;

        let per_expert = pool.len() / DIGIT_CLASSES;
        let n_own = (self.specialty_fraction * per_expert as f64).round() as usize;
        let mut pairs: Vec<(Arc<dyn Expert>, ModelInfo)> = Vec::new();
        let mut experts = Vec::new();
        let mut train = Vec::new();
        for digit in 0..DIGIT_CLASSES {
            let mut own: Vec<usize> = pool.iter().copied().filter(|&i| labels[i] == digit).collect();
            let mut other: Vec<usize> = pool.iter().copied().filter(|&i| labels[i] != digit).collect();
            own.shuffle(&mut rng);
            other.shuffle(&mut rng);
            let take_own = n_own.min(own.len());
            let mut rows: Vec<usize> = own[..take_own].to_vec();
            rows.extend_from_slice(&other[..(per_expert - take_own).min(other.len())]);
            rows.shuffle(&mut rng);
            let set = corpus.subset(&rows);
            let scaled = Matrix::from_vec(
                set.len(),
                set.dim(),
                set.features().as_slice().iter().map(|v| v / PIXEL_SCALE).collect(),
            )?;
            let mut expert_rng = rng::stream(self.seed, &format!("expert-{digit}"));
            let net = train_classifier(&scaled, &set.class_labels()?, DIGIT_CLASSES, &self.expert, &mut expert_rng)?;
            let d = set.dim();
            let expert = MlpExpert::new(format!("digit-{digit}"), net, vec![0.0; d], vec![PIXEL_SCALE; d])?;
            pairs.push((Arc::new(expert.clone()), ModelInfo::samples(set.features().clone())?));
            experts.push(expert);
            train.push(set);
        }
        Ok(Scenario {
            name: "digits".into(),
            bundle: ModelBundle::from_pairs(pairs)?,
            experts,
            train,
            test,
            validation,
            oracle: None,
        })
    }
}

pub fn make_digits_scenario(seed: u64) -> Result<Scenario> {
    DigitsScenario {
        seed,
        ..DigitsScenario::default()
    }
    .build()
}

impl Scenario {
    /// The same experts with information cut to the first `count` training
    /// samples of each (all of them when `count` exceeds the set).
    pub fn bundle_with_info(&self, count: usize) -> Result<ModelBundle> {
        if count == 0 {
            return Err(SmcError::Empty("model information samples (count 0)"));
        }
        let infos = self
            .train
            .iter()
            .map(|t| {
                let rows: Vec<usize> = (0..count.min(t.len())).collect();
                ModelInfo::samples(t.features().select_rows(&rows))
            })
            .collect::<Result<Vec<_>>>()?;
        self.bundle.with_infos(infos)
    }
}

/// Per expert, the fraction of held-out instances of its own digit that it
/// classifies correctly.
pub fn specialty_accuracy(bundle: &ModelBundle, data: &Dataset) -> Result<Vec<f64>> {
    let labels = data.class_labels()?;
    (0..bundle.len())
        .map(|j| {
            let (mut hits, mut total) = (0usize, 0usize);
            for (x, &y) in data.features().iter_rows().zip(&labels) {
                if y == j {
                    total += 1;
                    hits += usize::from(bundle.predict(j, x)?.argmax() == Some(j));
                }
            }
            if total == 0 {
                return Err(SmcError::UndefinedMetric(format!("no instances of digit {j} in data")));
            }
            Ok(hits as f64 / total as f64)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub seed: u64,
    /// Free-form run setting, e.g. `info=3` or `rec-only`.
    pub setting: String,
    pub strategy: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn extend(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
    }

    pub fn values(&self, setting: &str, strategy: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.setting == setting && r.strategy == strategy && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// Mean over seeds, `NaN` when there are no matching rows.
    pub fn mean(&self, setting: &str, strategy: &str, metric: &str) -> f64 {
        let v = self.values(setting, strategy, metric);
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }
}

/// Long-format plot data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub seed: u64,
    pub setting: String,
    pub x: f64,
    pub series: String,
    pub value: f64,
}

pub fn write_plot_csv<W: Write>(rows: &[PlotRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Benchmark runs

/// Strategies that make sense for `kind`, in canonical order.
pub fn default_strategies(kind: OutputKind) -> Vec<StrategyKind> {
    StrategyKind::ALL
        .iter()
        .copied()
        .filter(|s| !(s.classification_only() && kind == OutputKind::Regression))
        .collect()
}

#[derive(Debug, Clone)]
pub struct StrategyOutput {
    pub strategy: StrategyKind,
    pub predictions: Vec<Prediction>,
}

/// Result of one fitted run on one scenario.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub report: ExperimentReport,
    pub outputs: Vec<StrategyOutput>,
    /// Present when an SMC strategy was requested.
    pub fitted: Option<FittedPipeline>,
}

fn metric_rows(
    scenario: &Scenario,
    kind: OutputKind,
    predictions: &[Prediction],
) -> Result<Vec<(&'static str, f64)>> {
    match kind {
        OutputKind::Regression => {
            let truths = scenario
                .test
                .targets()
                .ok_or_else(|| SmcError::invalid("test data needs targets"))?;
            let p: Vec<f64> = predictions.iter().filter_map(Prediction::as_regression).collect();
            Ok(vec![("rmse", rmse(&p, truths)?), ("relative-rmse", relative_rmse(&p, truths)?)])
        }
        OutputKind::Classification { classes } => {
            let labels = scenario.test.class_labels()?;
            let mut scores = Matrix::with_cols(classes);
            for p in predictions {
                scores.push_row(p.as_probabilities().unwrap_or(&[]))?;
            }
            let correct = predictions
                .iter()
                .zip(&labels)
                .filter(|(p, &y)| p.argmax() == Some(y))
                .count();
            Ok(vec![
                ("auroc", auroc_ovr(&scores, &labels)?),
                ("accuracy", correct as f64 / labels.len() as f64),
            ])
        }
    }
}

/// Fits the pipeline on `bundle` (when needed) and evaluates every strategy
/// on the scenario's test set.
pub fn run_benchmark(
    scenario: &Scenario,
    bundle: &ModelBundle,
    strategies: &[StrategyKind],
    config: &FitConfig,
    seed: u64,
    setting: &str,
) -> Result<BenchmarkRun> {
    if strategies.is_empty() {
        return Err(SmcError::Empty("strategy list"));
    }
    let kind = bundle.output_kind();
    for s in strategies {
        if s.classification_only() && kind == OutputKind::Regression {
            return Err(SmcError::invalid(format!("strategy {s} needs classification experts")));
        }
    }
    let needs_smc = strategies.iter().any(|s| matches!(s, StrategyKind::Smc | StrategyKind::SmcBma));
    let fitted = if needs_smc {
        let mut cfg = config.clone();
        cfg.representation.seed = seed;
        Some(fit(bundle, &scenario.test, &cfg)?)
    } else {
        None
    };
    let bma = if strategies.iter().any(|s| s.needs_validation()) {
        Some(bma_weights(bundle, &scenario.validation)?)
    } else {
        None
    };

    let mut report = ExperimentReport::default();
    let mut outputs = Vec::new();
    for &s in strategies {
        let engine = fitted.as_ref().map(|f| &f.engine);
        let strategy = match s {
            StrategyKind::Smc => EnsembleStrategy::Smc(engine.expect("fitted")),
            StrategyKind::GlobalAverage => EnsembleStrategy::GlobalAverage,
            StrategyKind::MajorityVote => EnsembleStrategy::MajorityVote,
            StrategyKind::EntropyWeighted => EnsembleStrategy::EntropyWeighted {
                floor: DEFAULT_ENTROPY_FLOOR,
            },
            StrategyKind::Bma => EnsembleStrategy::Fixed(bma.clone().expect("validated")),
            StrategyKind::SmcBma => EnsembleStrategy::SmcBma {
                engine: engine.expect("fitted"),
                fixed: bma.clone().expect("validated"),
            },
        };
        let predictions = scenario
            .test
            .features()
            .iter_rows()
            .map(|x| strategy.predict(bundle, x))
            .collect::<Result<Vec<_>>>()?;
        for (metric, value) in metric_rows(scenario, kind, &predictions)? {
            report.rows.push(ReportRow {
                scenario: scenario.name.clone(),
                seed,
                setting: setting.to_string(),
                strategy: s.name().to_string(),
                metric: metric.to_string(),
                value,
            });
        }
        outputs.push(StrategyOutput { strategy: s, predictions });
    }
    if let (Some(oracle), OutputKind::Regression) = (&scenario.oracle, kind) {
        let truths = scenario.test.targets().unwrap_or(&[]);
        report.rows.push(ReportRow {
            scenario: scenario.name.clone(),
            seed,
            setting: setting.to_string(),
            strategy: "oracle".into(),
            metric: "rmse".into(),
            value: rmse(oracle, truths)?,
        });
    }
    if let Some(f) = &fitted {
        let conf = f.engine.weights_for(&scenario.test)?;
        let mean = conf.iter().map(|w| w.confidence).sum::<f64>() / conf.len().max(1) as f64;
        let low = conf.iter().filter(|w| w.confidence < f.engine.tau).count();
        let mut extra = vec![("mean-confidence", mean), ("low-confidence-fraction", low as f64 / conf.len().max(1) as f64)];
        if let Some(d) = cross_model_distance(&f.engine.map, bundle)? {
            extra.push(("latent-separation", d));
        }
        for (metric, value) in extra {
            report.rows.push(ReportRow {
                scenario: scenario.name.clone(),
                seed,
                setting: setting.to_string(),
                strategy: StrategyKind::Smc.name().into(),
                metric: metric.into(),
                value,
            });
        }
    }
    Ok(BenchmarkRun {
        report,
        outputs,
        fitted,
    })
}

/// Mean latent distance between encoded information samples of different
/// experts, averaged over every cross-expert pair. `None` when some expert
/// has no samples or there is a single expert.
pub fn cross_model_distance(map: &LatentMap, bundle: &ModelBundle) -> Result<Option<f64>> {
    let mut encoded = Vec::with_capacity(bundle.len());
    for j in 0..bundle.len() {
        match bundle.info(j) {
            ModelInfo::Samples { data } => encoded.push(map.encode_batch(data)?),
            ModelInfo::Moments { .. } => return Ok(None),
        }
    }
    let (mut sum, mut pairs) = (0.0, 0usize);
    for j in 0..encoded.len() {
        for k in j + 1..encoded.len() {
            for a in encoded[j].iter_rows() {
                for b in encoded[k].iter_rows() {
                    sum += a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
                    pairs += 1;
                }
            }
        }
    }
    Ok((pairs > 0).then(|| sum / pairs as f64))
}

/// Per-instance plot series for one-dimensional scenarios: truth, every
/// strategy's prediction, and the SMC weights and confidence.
pub fn regression_plot_rows(scenario: &Scenario, run: &BenchmarkRun, seed: u64, setting: &str) -> Result<Vec<PlotRow>> {
    let mut rows = Vec::new();
    if scenario.test.dim() != 1 {
        return Ok(rows);
    }
    let xs = scenario.test.features().column(0);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut push = |x: f64, series: String, value: f64| {
        rows.push(PlotRow {
            seed,
            setting: setting.to_string(),
            x,
            series,
            value,
        })
    };
    let truths = scenario.test.targets();
    for &i in &order {
        if let Some(t) = truths {
            push(xs[i], "truth".into(), t[i]);
        }
        for out in &run.outputs {
            if let Some(v) = out.predictions[i].as_regression() {
                push(xs[i], out.strategy.name().into(), v);
            }
        }
        if let Some(f) = &run.fitted {
            let wv = f.engine.weights(&[xs[i]])?;
            for (j, w) in wv.weights.iter().enumerate() {
                push(xs[i], format!("weight-{j}"), *w);
            }
            push(xs[i], "confidence".into(), wv.confidence);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    RegressionStandard,
    RegressionGap,
    RegressionOverlap,
    Digits,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::RegressionStandard,
        ScenarioKind::RegressionGap,
        ScenarioKind::RegressionOverlap,
        ScenarioKind::Digits,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::RegressionStandard => "regression-standard",
            ScenarioKind::RegressionGap => "regression-gap",
            ScenarioKind::RegressionOverlap => "regression-overlap",
            ScenarioKind::Digits => "digits",
        }
    }

    /// Fitting defaults per scenario. With 64-dimensional digits and ten
    /// experts the separation term outweighs reconstruction at unit weight and
    /// the latent map saturates the encoder bound; the digits defaults keep
    /// it in the regime where reconstruction still shapes the space.
    pub fn default_fit(&self) -> FitConfig {
        let mut cfg = FitConfig::default();
        if *self == ScenarioKind::Digits {
            cfg.representation.weights = LossWeights {
                rec: 1.0,
                con: 0.003,
                sep: 0.003,
                beta: 0.1,
            };
        }
        cfg
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = SmcError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                SmcError::invalid(format!("unknown scenario {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub scenario: ScenarioKind,
    pub seeds: Vec<u64>,
    /// Empty selects every strategy applicable to the scenario.
    pub strategies: Vec<StrategyKind>,
    /// Digits only: information sample counts to sweep. Empty uses each
    /// expert's full training features.
    pub info_counts: Vec<usize>,
    /// Also run SMC with the reconstruction loss alone.
    pub ablation: bool,
    /// `None` uses [`ScenarioKind::default_fit`].
    pub fit: Option<FitConfig>,
    pub digits: DigitsScenario,
    pub regression_expert: ExpertTraining,
}

impl BenchConfig {
    pub fn fit_config(&self) -> FitConfig {
        self.fit.clone().unwrap_or_else(|| self.scenario.default_fit())
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::RegressionStandard,
            seeds: vec![0],
            strategies: Vec::new(),
            info_counts: Vec::new(),
            ablation: false,
            fit: None,
            digits: DigitsScenario::default(),
            regression_expert: ExpertTraining::regression(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seed: u64,
    pub setting: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchOutput {
    pub report: ExperimentReport,
    pub plot: Vec<PlotRow>,
    pub timings: Vec<Timing>,
}

pub fn build_scenario(kind: ScenarioKind, seed: u64, config: &BenchConfig) -> Result<Scenario> {
    let variant = match kind {
        ScenarioKind::RegressionStandard => RegressionVariant::Standard,
        ScenarioKind::RegressionGap => RegressionVariant::Gap,
        ScenarioKind::RegressionOverlap => RegressionVariant::Overlap,
        ScenarioKind::Digits => {
            let mut s = DigitsScenario {
                seed,
                ..config.digits.clone()
            }
            .build()?;
            s.name = kind.name().into();
            return Ok(s);
        }
    };
    let mut s = RegressionScenario {
        expert: config.regression_expert.clone(),
        ..RegressionScenario::new(variant, seed)
    }
    .build()?;
    s.name = kind.name().into();
    Ok(s)
}

/// Every seed, every information count and optionally the
/// reconstruction-only ablation. Reports hold no timings, so equal configs
/// give identical reports.
pub fn run_bench(config: &BenchConfig) -> Result<BenchOutput> {
    if config.seeds.is_empty() {
        return Err(SmcError::Empty("seed list"));
    }
    if config.scenario != ScenarioKind::Digits && !config.info_counts.is_empty() {
        return Err(SmcError::invalid("info counts only apply to the digits scenario"));
    }
    let fit_config = config.fit_config();
    let mut out = BenchOutput::default();
    for &seed in &config.seeds {
        let scenario = build_scenario(config.scenario, seed, config)?;
        let strategies = if config.strategies.is_empty() {
            default_strategies(scenario.bundle.output_kind())
        } else {
            config.strategies.clone()
        };
        let mut settings: Vec<(String, ModelBundle)> = Vec::new();
        if config.info_counts.is_empty() {
            settings.push(("full".into(), scenario.bundle.clone()));
        } else {
            for &c in &config.info_counts {
                settings.push((format!("info={c}"), scenario.bundle_with_info(c)?));
            }
        }
        for (setting, bundle) in &settings {
            let started = std::time::Instant::now();
            let run = run_benchmark(&scenario, bundle, &strategies, &fit_config, seed, setting)?;
            out.timings.push(Timing {
                seed,
                setting: setting.clone(),
                seconds: started.elapsed().as_secs_f64(),
            });
            out.plot.extend(regression_plot_rows(&scenario, &run, seed, setting)?);
            if let OutputKind::Classification { .. } = bundle.output_kind() {
                let x = setting
                    .strip_prefix("info=")
                    .and_then(|c| c.parse::<f64>().ok())
                    .unwrap_or(f64::NAN);
                for row in run.report.rows.iter().filter(|r| r.metric == "auroc") {
                    out.plot.push(PlotRow {
                        seed,
                        setting: setting.clone(),
                        x,
                        series: row.strategy.clone(),
                        value: row.value,
                    });
                }
            }
            out.report.extend(run.report);
            if config.ablation {
                let mut fit_cfg = fit_config.clone();
                fit_cfg.representation.weights =
                    LossWeights::reconstruction_only(fit_config.representation.weights.beta);
                let label = format!("{setting}/rec-only");
                let started = std::time::Instant::now();
                let run = run_benchmark(&scenario, bundle, &[StrategyKind::Smc], &fit_cfg, seed, &label)?;
                out.timings.push(Timing {
                    seed,
                    setting: label,
                    seconds: started.elapsed().as_secs_f64(),
                });
                out.report.extend(run.report);
            }
        }
    }
    Ok(out)
}
