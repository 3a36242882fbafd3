//! Prediction strategies: the instance-wise combination and global baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Result, SmcError};
use crate::model::{ModelBundle, OutputKind, Prediction};
use crate::weights::{WeightEngine, WeightVector};

pub const DEFAULT_ENTROPY_FLOOR: f64 = 1e-3;

/// Convex combination of expert predictions. Probability vectors are
/// renormalised after mixing.
pub fn combine(predictions: &[Prediction], weights: &[f64]) -> Result<Prediction> {
    check_dim(predictions.len(), weights.len())?;
    let first = predictions.first().ok_or(SmcError::Empty("predictions to combine"))?;
    match first {
        Prediction::Regression(_) => {
            let mut acc = 0.0;
            for (p, w) in predictions.iter().zip(weights) {
                let v = p
                    .as_regression()
                    .ok_or_else(|| SmcError::KindMismatch("mixed prediction kinds".into()))?;
                acc += w * v;
            }
            Ok(Prediction::Regression(acc))
        }
        Prediction::Probabilities(p0) => {
            let mut acc = vec![0.0; p0.len()];
            for (p, w) in predictions.iter().zip(weights) {
                let probs = p
                    .as_probabilities()
                    .ok_or_else(|| SmcError::KindMismatch("mixed prediction kinds".into()))?;
                check_dim(acc.len(), probs.len())?;
                for (a, v) in acc.iter_mut().zip(probs) {
                    *a += w * v;
                }
            }
            let total: f64 = acc.iter().sum();
            if !(total > 0.0) {
                return Err(SmcError::NonFinite("combined class probabilities".into()));
            }
            acc.iter_mut().for_each(|v| *v /= total);
            Ok(Prediction::Probabilities(acc))
        }
    }
}

pub fn predict_smc(bundle: &ModelBundle, engine: &WeightEngine, x: &[f64]) -> Result<(Prediction, WeightVector)> {
    check_dim(bundle.len(), engine.n_models())?;
    let wv = engine.weights(x)?;
    let pred = combine(&bundle.predict_all(x)?, &wv.weights)?;
    Ok((pred, wv))
}

pub fn predict_global_average(bundle: &ModelBundle, x: &[f64]) -> Result<Prediction> {
    let n = bundle.len();
    combine(&bundle.predict_all(x)?, &vec![1.0 / n as f64; n])
}

fn require_classification(bundle: &ModelBundle, what: &str) -> Result<usize> {
    match bundle.output_kind() {
        OutputKind::Classification { classes } => Ok(classes),
        OutputKind::Regression => Err(SmcError::KindMismatch(format!(
            "{what} needs classification experts"
        ))),
    }
}

/// One-hot of the most-voted class; ties go to the lowest class index.
pub fn predict_majority_vote(bundle: &ModelBundle, x: &[f64]) -> Result<Prediction> {
    let k = require_classification(bundle, "majority vote")?;
    let mut votes = vec![0usize; k];
    for p in bundle.predict_all(x)? {
        votes[p.argmax().expect("classification prediction")] += 1;
    }
    let mut winner = 0;
    for (c, v) in votes.iter().enumerate() {
        if *v > votes[winner] {
            winner = c;
        }
    }
    let mut out = vec![0.0; k];
    out[winner] = 1.0;
    Ok(Prediction::Probabilities(out))
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Weights proportional to `exp(1 / max(H_j, floor))`, computed in log space.
pub fn entropy_weights(predictions: &[Prediction], floor: f64) -> Result<Vec<f64>> {
    if !(floor > 0.0) {
        return Err(SmcError::invalid("entropy floor must be positive"));
    }
    let logits = predictions
        .iter()
        .map(|p| {
            p.as_probabilities()
                .map(|q| 1.0 / entropy(q).max(floor))
                .ok_or_else(|| SmcError::KindMismatch("entropy weighting needs class probabilities".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&logits))
}

pub fn predict_entropy_weighted(bundle: &ModelBundle, x: &[f64], floor: f64) -> Result<Prediction> {
    require_classification(bundle, "entropy weighting")?;
    let preds = bundle.predict_all(x)?;
    let w = entropy_weights(&preds, floor)?;
    combine(&preds, &w)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Posterior model weights `exp(-BIC_j / 2) / sum_i exp(-BIC_i / 2)`, in log space.
pub fn bic_weights(bics: &[f64]) -> Result<Vec<f64>> {
    if bics.is_empty() {
        return Err(SmcError::Empty("BIC values"));
    }
    if bics.iter().any(|b| !b.is_finite()) {
        return Err(SmcError::NonFinite("BIC values".into()));
    }
    let logits: Vec<f64> = bics.iter().map(|b| -0.5 * b).collect();
    Ok(softmax(&logits))
}

/// `k ln(n) - 2 ln L` of every expert on labelled validation data.
///
/// Regression log-likelihood assumes Gaussian residuals with the maximum
/// likelihood variance; classification uses the categorical likelihood of the
/// true class.
pub fn bics(bundle: &ModelBundle, validation: &Dataset) -> Result<Vec<f64>> {
    if validation.is_empty() {
        return Err(SmcError::Empty("validation data"));
    }
    let targets = validation
        .targets()
        .ok_or_else(|| SmcError::invalid("validation data needs targets"))?;
    let n = validation.len() as f64;
    let mut out = Vec::with_capacity(bundle.len());
    for j in 0..bundle.len() {
        let k = bundle.expert(j).param_count().ok_or_else(|| {
            SmcError::invalid(format!("expert {} does not declare a parameter count", bundle.expert(j).id()))
        })? as f64;
        let preds = validation
            .features()
            .iter_rows()
            .map(|x| bundle.predict(j, x))
            .collect::<Result<Vec<_>>>()?;
        let log_lik = match bundle.output_kind() {
            OutputKind::Regression => {
                let sse: f64 = preds
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| {
                        let r = t - p.as_regression().unwrap();
                        r * r
                    })
                    .sum();
                let var = (sse / n).max(f64::MIN_POSITIVE);
                -0.5 * n * ((2.0 * std::f64::consts::PI * var).ln() + 1.0)
            }
            OutputKind::Classification { .. } => {
                let labels = validation.class_labels()?;
                preds
                    .iter()
                    .zip(&labels)
                    .map(|(p, &y)| {
                        let probs = p.as_probabilities().unwrap();
                        let q = probs.get(y).copied().ok_or_else(|| {
                            SmcError::invalid(format!("label {y} out of range"))
                        })?;
                        Ok(q.max(f64::MIN_POSITIVE).ln())
                    })
                    .sum::<Result<f64>>()?
            }
        };
        out.push(k * n.ln() - 2.0 * log_lik);
    }
    Ok(out)
}

pub fn bma_weights(bundle: &ModelBundle, validation: &Dataset) -> Result<Vec<f64>> {
    bic_weights(&bics(bundle, validation)?)
}

/// Elementwise mean of two weight vectors, renormalised.
pub fn average_weights(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_dim(a.len(), b.len())?;
    let mean: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    let total: f64 = mean.iter().sum();
    Ok(mean.into_iter().map(|v| v / total).collect())
}

/// Strategy names as used in configs, reports and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Smc,
    GlobalAverage,
    MajorityVote,
    EntropyWeighted,
    Bma,
    SmcBma,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Smc,
        StrategyKind::GlobalAverage,
        StrategyKind::MajorityVote,
        StrategyKind::EntropyWeighted,
        StrategyKind::Bma,
        StrategyKind::SmcBma,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Smc => "smc",
            StrategyKind::GlobalAverage => "global-average",
            StrategyKind::MajorityVote => "majority-vote",
            StrategyKind::EntropyWeighted => "entropy-weighted",
            StrategyKind::Bma => "bma",
            StrategyKind::SmcBma => "smc-bma",
        }
    }

    pub fn needs_validation(&self) -> bool {
        matches!(self, StrategyKind::Bma | StrategyKind::SmcBma)
    }

    pub fn classification_only(&self) -> bool {
        matches!(self, StrategyKind::MajorityVote | StrategyKind::EntropyWeighted)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = SmcError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SmcError::invalid(format!("unknown strategy {s:?}")))
    }
}

/// A ready-to-use strategy with its fitted state.
#[derive(Debug, Clone)]
pub enum EnsembleStrategy<'a> {
    Smc(&'a WeightEngine),
    GlobalAverage,
    MajorityVote,
    EntropyWeighted { floor: f64 },
    Fixed(Vec<f64>),
    /// Mean of the instance-wise and a fixed weight vector.
    SmcBma { engine: &'a WeightEngine, fixed: Vec<f64> },
}

impl EnsembleStrategy<'_> {
    pub fn predict(&self, bundle: &ModelBundle, x: &[f64]) -> Result<Prediction> {
        match self {
            EnsembleStrategy::Smc(engine) => Ok(predict_smc(bundle, engine, x)?.0),
            EnsembleStrategy::GlobalAverage => predict_global_average(bundle, x),
            EnsembleStrategy::MajorityVote => predict_majority_vote(bundle, x),
            EnsembleStrategy::EntropyWeighted { floor } => predict_entropy_weighted(bundle, x, *floor),
            EnsembleStrategy::Fixed(w) => {
                check_dim(bundle.len(), w.len())?;
                combine(&bundle.predict_all(x)?, w)
            }
            EnsembleStrategy::SmcBma { engine, fixed } => {
                let wv = engine.weights(x)?;
                let w = average_weights(&wv.weights, fixed)?;
                combine(&bundle.predict_all(x)?, &w)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::Matrix;
    use crate::density::{DimSpec, ModelInfo};
    use crate::model::{Expert, FnExpert};

    fn info() -> ModelInfo {
        ModelInfo::moments(vec![DimSpec::Continuous { mean: 0.0, std: 1.0 }]).unwrap()
    }

    fn reg(id: &str, v: f64) -> (Arc<dyn Expert>, ModelInfo) {
        let e: Arc<dyn Expert> = Arc::new(
            FnExpert::new(id, 1, OutputKind::Regression, move |_| Prediction::Regression(v)).with_param_count(1),
        );
        (e, info())
    }

    fn cls(id: &str, p: Vec<f64>) -> (Arc<dyn Expert>, ModelInfo) {
        let k = p.len();
        let e: Arc<dyn Expert> = Arc::new(FnExpert::new(
            id,
            1,
            OutputKind::Classification { classes: k },
            move |_| Prediction::Probabilities(p.clone()),
        ));
        (e, info())
    }

    #[test]
    fn combine_regression_half_half() {
        let p = combine(&[Prediction::Regression(2.0), Prediction::Regression(4.0)], &[0.5, 0.5]).unwrap();
        assert_eq!(p, Prediction::Regression(3.0));
    }

    #[test]
    fn global_average_of_two() {
        let b = ModelBundle::from_pairs(vec![reg("a", 2.0), reg("b", 4.0)]).unwrap();
        assert_eq!(predict_global_average(&b, &[0.0]).unwrap(), Prediction::Regression(3.0));
        let same = ModelBundle::from_pairs(vec![reg("a", 1.5), reg("b", 1.5)]).unwrap();
        assert_eq!(predict_global_average(&same, &[0.0]).unwrap(), Prediction::Regression(1.5));
    }

    #[test]
    fn majority_vote_and_tie() {
        let b = ModelBundle::from_pairs(vec![
            cls("1", vec![0.9, 0.1]),
            cls("2", vec![0.8, 0.2]),
            cls("3", vec![0.1, 0.9]),
        ])
        .unwrap();
        assert_eq!(predict_majority_vote(&b, &[0.0]).unwrap(), Prediction::Probabilities(vec![1.0, 0.0]));
        let tie = ModelBundle::from_pairs(vec![cls("1", vec![0.2, 0.8]), cls("2", vec![0.7, 0.3])]).unwrap();
        assert_eq!(predict_majority_vote(&tie, &[0.0]).unwrap(), Prediction::Probabilities(vec![1.0, 0.0]));
        let r = ModelBundle::from_pairs(vec![reg("a", 1.0)]).unwrap();
        assert!(matches!(predict_majority_vote(&r, &[0.0]), Err(SmcError::KindMismatch(_))));
        assert!(predict_entropy_weighted(&r, &[0.0], 1e-3).is_err());
    }

    #[test]
    fn entropy_weighting_examples() {
        let u = vec![1.0 / 3.0; 3];
        let b = ModelBundle::from_pairs(vec![cls("1", u.clone()), cls("2", u.clone())]).unwrap();
        let p = predict_entropy_weighted(&b, &[0.0], 1e-3).unwrap();
        for v in p.as_probabilities().unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let sharp = Prediction::Probabilities(vec![1.0 - 2e-6, 1e-6, 1e-6]);
        let w = entropy_weights(
            &[sharp, Prediction::Probabilities(u.clone()), Prediction::Probabilities(u)],
            1e-3,
        )
        .unwrap();
        assert!(w[0] > 0.99, "{w:?}");
    }

    #[test]
    fn bic_weight_examples() {
        let w = bic_weights(&[0.0, 2.0]).unwrap();
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
        assert_eq!(bic_weights(&[5.0, 5.0, 5.0]).unwrap(), vec![1.0 / 3.0; 3]);
        // Far beyond where naive exponentiation underflows.
        let w = bic_weights(&[3000.0, 3002.0]).unwrap();
        assert!((w[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn bma_requires_counts_and_data() {
        let b = ModelBundle::from_pairs(vec![reg("a", 1.0), cls_free_reg()]).unwrap();
        let val = Dataset::new(Matrix::from_rows(&[[0.0]]).unwrap(), Some(vec![1.0])).unwrap();
        assert!(bma_weights(&b, &val).is_err());
        let ok = ModelBundle::from_pairs(vec![reg("a", 1.0), reg("b", 2.0)]).unwrap();
        let empty = Dataset::new(Matrix::with_cols(1), Some(vec![])).unwrap();
        assert!(matches!(bma_weights(&ok, &empty), Err(SmcError::Empty(_))));
        let unlabeled = Dataset::new(Matrix::from_rows(&[[0.0]]).unwrap(), None).unwrap();
        assert!(bma_weights(&ok, &unlabeled).is_err());
    }

    fn cls_free_reg() -> (Arc<dyn Expert>, ModelInfo) {
        let e: Arc<dyn Expert> = Arc::new(FnExpert::new("nocount", 1, OutputKind::Regression, |_| {
            Prediction::Regression(0.0)
        }));
        (e, info())
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("stacking".parse::<StrategyKind>().is_err());
    }
}
