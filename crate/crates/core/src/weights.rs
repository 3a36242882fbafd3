//! Instance-wise weights from latent-space densities.
//!
//! Each expert's feature-space density is pushed through the encoder and
//! refit as a KDE in the latent space. An instance `x` gets weights
//! `w_i = (p_i + gamma) / sum_j (p_j + gamma)` with `p_j` the latent density of
//! expert `j` at `f(x)`, and confidence `sum_j p_j`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::density::{fit_kde, DensityModel};
use crate::error::{check_dim, Result, SmcError};
use crate::representation::LatentMap;

pub const DEFAULT_GAMMA: f64 = 1e-9;
pub const DEFAULT_LATENT_SAMPLES: usize = 500;

/// One latent KDE per expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDensitySet {
    densities: Vec<DensityModel>,
    samples_per_model: usize,
}

impl LatentDensitySet {
    pub fn from_densities(densities: Vec<DensityModel>, samples_per_model: usize) -> Result<Self> {
        let first = densities.first().ok_or(SmcError::Empty("latent densities"))?;
        let z = first.dim();
        for d in &densities {
            check_dim(z, d.dim())?;
        }
        Ok(Self {
            densities,
            samples_per_model,
        })
    }

    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.densities[0].dim()
    }

    pub fn densities(&self) -> &[DensityModel] {
        &self.densities
    }

    pub fn samples_per_model(&self) -> usize {
        self.samples_per_model
    }

    /// Latent densities `p_j(z)`, zero where the log-density hits the sentinel.
    pub fn densities_at(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.densities.iter().map(|d| d.density(z)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| SmcError::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SmcError::file(path, e))?;
        let set: LatentDensitySet = serde_json::from_str(&text).map_err(|e| SmcError::file(path, e))?;
        Self::from_densities(set.densities, set.samples_per_model).map_err(|e| SmcError::file(path, e))
    }
}

/// Draws `n_samples` from every feature-space density, encodes them and fits
/// a latent KDE per expert.
pub fn build_latent_densities<R: Rng + ?Sized>(
    map: &LatentMap,
    feature_densities: &[DensityModel],
    n_samples: usize,
    rng: &mut R,
) -> Result<LatentDensitySet> {
    if n_samples < 2 {
        return Err(SmcError::invalid("latent refit needs at least 2 samples per model"));
    }
    let densities = feature_densities
        .iter()
        .map(|d| {
            check_dim(map.input_dim(), d.dim())?;
            let encoded = map.encode_batch(&d.sample(rng, n_samples)?)?;
            fit_kde(&encoded)
        })
        .collect::<Result<Vec<_>>>()?;
    LatentDensitySet::from_densities(densities, n_samples)
}

/// Simplex weights plus the unnormalised total density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub confidence: f64,
}

/// Weights from raw per-expert densities: `(p_i + gamma) / sum_j (p_j + gamma)`.
pub fn weights_from_densities(p: &[f64], gamma: f64) -> Result<WeightVector> {
    if p.is_empty() {
        return Err(SmcError::Empty("densities"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(SmcError::invalid("gamma must be positive and finite"));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(SmcError::NonFinite(format!("densities {p:?}")));
    }
    let confidence: f64 = p.iter().sum();
    let denom: f64 = p.iter().map(|v| v + gamma).sum();
    let weights = p.iter().map(|v| (v + gamma) / denom).collect();
    Ok(WeightVector { weights, confidence })
}

/// Weight vector for one raw feature vector.
pub fn compute_weights(set: &LatentDensitySet, map: &LatentMap, x: &[f64], gamma: f64) -> Result<WeightVector> {
    let z = map.encode(x)?;
    weights_from_densities(&set.densities_at(&z)?, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceFlag {
    Confident,
    LowConfidence,
}

impl ConfidenceFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConfidenceFlag::Confident => "confident",
            ConfidenceFlag::LowConfidence => "low_confidence",
        }
    }
}

pub fn confidence_flag(wv: &WeightVector, tau: f64) -> ConfidenceFlag {
    if wv.confidence < tau {
        ConfidenceFlag::LowConfidence
    } else {
        ConfidenceFlag::Confident
    }
}

/// Linear-interpolated percentile (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(SmcError::Empty("percentile input"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// How the low-confidence threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Percentile of the confidence over the test data.
    Percentile { q: f64 },
    Fixed { tau: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Percentile { q: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightConfig {
    pub gamma: f64,
    pub n_samples: usize,
    pub threshold: ThresholdRule,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            n_samples: DEFAULT_LATENT_SAMPLES,
            threshold: ThresholdRule::default(),
        }
    }
}

/// Everything needed to weight new instances: map, latent densities, gamma
/// and the low-confidence threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEngine {
    pub map: LatentMap,
    pub densities: LatentDensitySet,
    pub gamma: f64,
    pub tau: f64,
}

impl WeightEngine {
    /// Resolves the threshold rule against `test` (percentile rules need at
    /// least one test instance).
    pub fn new(
        map: LatentMap,
        densities: LatentDensitySet,
        gamma: f64,
        rule: ThresholdRule,
        test: &Matrix,
    ) -> Result<Self> {
        check_dim(map.latent_dim(), densities.latent_dim())?;
        let mut engine = Self {
            map,
            densities,
            gamma,
            tau: 0.0,
        };
        engine.tau = match rule {
            ThresholdRule::Fixed { tau } => tau,
            ThresholdRule::Percentile { q } => {
                let conf = test
                    .iter_rows()
                    .map(|x| engine.weights(x).map(|w| w.confidence))
                    .collect::<Result<Vec<_>>>()?;
                percentile(&conf, q)?
            }
        };
        if !(engine.tau.is_finite() && engine.tau >= 0.0) {
            return Err(SmcError::invalid(format!("threshold {} must be >= 0", engine.tau)));
        }
        Ok(engine)
    }

    pub fn n_models(&self) -> usize {
        self.densities.len()
    }

    pub fn weights(&self, x: &[f64]) -> Result<WeightVector> {
        compute_weights(&self.densities, &self.map, x, self.gamma)
    }

    pub fn flag(&self, wv: &WeightVector) -> ConfidenceFlag {
        confidence_flag(wv, self.tau)
    }

    pub fn weights_for(&self, data: &Dataset) -> Result<Vec<WeightVector>> {
        data.features().iter_rows().map(|x| self.weights(x)).collect()
    }
}
