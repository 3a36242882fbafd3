//! Domain densities built from model information.
//!
//! Two families are supported: a Gaussian-kernel KDE with per-dimension
//! Scott bandwidths (used for feature samples and for every latent-space
//! density), and a factorised product of independent Gaussian and Bernoulli
//! marginals (used for published summary statistics). Mixed models multiply
//! Gaussian pdf values with Bernoulli pmf values.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{check_dim, Result, SmcError};

/// Log-density returned where the density is exactly zero.
pub const LOG_ZERO: f64 = -1e30;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const BANDWIDTH_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DimSpec {
    Continuous { mean: f64, std: f64 },
    Binary { p: f64 },
}

impl DimSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            DimSpec::Continuous { mean, std } => {
                if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
                    return Err(SmcError::invalid(format!(
                        "continuous dimension needs finite mean and std > 0 (mean {mean}, std {std})"
                    )));
                }
            }
            DimSpec::Binary { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(SmcError::invalid(format!("bernoulli p = {p} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    fn log_pdf(&self, x: f64) -> Result<f64> {
        match *self {
            DimSpec::Continuous { mean, std } => {
                let z = (x - mean) / std;
                Ok(-0.5 * z * z - std.ln() - HALF_LN_2PI)
            }
            DimSpec::Binary { p } => {
                let mass = if x == 1.0 {
                    p
                } else if x == 0.0 {
                    1.0 - p
                } else {
                    return Err(SmcError::invalid(format!("binary dimension got {x}, expected 0 or 1")));
                };
                Ok(if mass > 0.0 { mass.ln() } else { f64::NEG_INFINITY })
            }
        }
    }
}

/// Information accompanying a released model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelInfo {
    Samples {
        #[serde(with = "rows_serde")]
        data: Matrix,
    },
    Moments { dims: Vec<DimSpec> },
}

impl ModelInfo {
    pub fn samples(data: Matrix) -> Result<Self> {
        let info = ModelInfo::Samples { data };
        info.validate()?;
        Ok(info)
    }

    pub fn moments(dims: Vec<DimSpec>) -> Result<Self> {
        let info = ModelInfo::Moments { dims };
        info.validate()?;
        Ok(info)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelInfo::Samples { data } => {
                if data.rows() == 0 {
                    return Err(SmcError::Empty("model information samples"));
                }
                if data.cols() == 0 {
                    return Err(SmcError::invalid("model information samples have no columns"));
                }
                if !data.is_finite() {
                    return Err(SmcError::NonFinite("model information samples".into()));
                }
            }
            ModelInfo::Moments { dims } => {
                if dims.is_empty() {
                    return Err(SmcError::Empty("model information moments"));
                }
                dims.iter().try_for_each(DimSpec::validate)?;
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelInfo::Samples { data } => data.cols(),
            ModelInfo::Moments { dims } => dims.len(),
        }
    }

    /// Feature-space density: KDE for samples, factorised for moments.
    pub fn fit_density(&self) -> Result<DensityModel> {
        match self {
            ModelInfo::Samples { data } => fit_kde(data),
            ModelInfo::Moments { dims } => fit_factorised(dims),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SmcError::file(path, e))?;
        let info: ModelInfo = serde_json::from_str(&text).map_err(|e| SmcError::file(path, e))?;
        info.validate().map_err(|e| SmcError::file(path, e))?;
        Ok(info)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| SmcError::file(path, e))
    }
}

pub(crate) mod rows_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::data::Matrix;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = m.iter_rows().collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DensityModel {
    Kde(Kde),
    Factorised { dims: Vec<DimSpec> },
}

/// Gaussian product-kernel density estimate with a diagonal bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    #[serde(with = "rows_serde")]
    support: Matrix,
    bandwidth: Vec<f64>,
    /// Dimensions whose bandwidth was raised to the floor.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    floored_dims: Vec<usize>,
}

impl Kde {
    /// KDE with explicit bandwidths, bypassing the bandwidth rule.
    pub fn with_bandwidth(support: Matrix, bandwidth: Vec<f64>) -> Result<Self> {
        if support.rows() == 0 {
            return Err(SmcError::Empty("kde support"));
        }
        check_dim(support.cols(), bandwidth.len())?;
        if !support.is_finite() {
            return Err(SmcError::NonFinite("kde support".into()));
        }
        if bandwidth.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(SmcError::invalid("kde bandwidths must be positive"));
        }
        Ok(Self {
            support,
            bandwidth,
            floored_dims: Vec::new(),
        })
    }

    pub fn support(&self) -> &Matrix {
        &self.support
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn floored_dims(&self) -> &[usize] {
        &self.floored_dims
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let log_norm: f64 = self.bandwidth.iter().map(|h| h.ln() + HALF_LN_2PI).sum::<f64>()
            + (self.support.rows() as f64).ln();
        let mut terms = Vec::with_capacity(self.support.rows());
        let mut max = f64::NEG_INFINITY;
        for s in self.support.iter_rows() {
            let mut q = 0.0;
            for ((xv, sv), h) in x.iter().zip(s).zip(&self.bandwidth) {
                let z = (xv - sv) / h;
                q += z * z;
            }
            let t = -0.5 * q;
            max = max.max(t);
            terms.push(t);
        }
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        max + sum.ln() - log_norm
    }
}

/// Per-dimension Scott bandwidth `std * n^(-1/(d+4))`, floored at `1e-3 * std`
/// (or `1e-3` for constant dimensions). A single support point gets bandwidth
/// 1 in every dimension.
pub fn scott_bandwidth(samples: &Matrix) -> (Vec<f64>, Vec<usize>) {
    let n = samples.rows();
    let d = samples.cols();
    if n <= 1 {
        return (vec![1.0; d], Vec::new());
    }
    let (_, std) = samples.column_moments();
    let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
    let mut floored = Vec::new();
    let h = std
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let floor = BANDWIDTH_FLOOR * if s > 0.0 { s } else { 1.0 };
            let h = s * factor;
            if h < floor {
                floored.push(k);
                floor
            } else {
                h
            }
        })
        .collect();
    (h, floored)
}

pub fn fit_kde(samples: &Matrix) -> Result<DensityModel> {
    if samples.rows() == 0 {
        return Err(SmcError::Empty("kde samples"));
    }
    let (bandwidth, floored) = scott_bandwidth(samples);
    if !floored.is_empty() {
        log::warn!(
            "kde: zero-variance dimension(s) {floored:?}, bandwidth floored at {BANDWIDTH_FLOOR}"
        );
    }
    let mut kde = Kde::with_bandwidth(samples.clone(), bandwidth)?;
    kde.floored_dims = floored;
    Ok(DensityModel::Kde(kde))
}

pub fn fit_factorised(dims: &[DimSpec]) -> Result<DensityModel> {
    if dims.is_empty() {
        return Err(SmcError::Empty("factorised density dimensions"));
    }
    dims.iter().try_for_each(DimSpec::validate)?;
    Ok(DensityModel::Factorised { dims: dims.to_vec() })
}

impl DensityModel {
    pub fn dim(&self) -> usize {
        match self {
            DensityModel::Kde(k) => k.support.cols(),
            DensityModel::Factorised { dims } => dims.len(),
        }
    }

    /// Natural-log density; exact zeros come back as [`LOG_ZERO`].
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SmcError::NonFinite("density query point".into()));
        }
        let lp = match self {
            DensityModel::Kde(k) => k.log_density(x),
            DensityModel::Factorised { dims } => {
                let mut acc = 0.0;
                for (spec, &v) in dims.iter().zip(x) {
                    acc += spec.log_pdf(v)?;
                }
                acc
            }
        };
        Ok(if lp.is_finite() { lp.max(LOG_ZERO) } else { LOG_ZERO })
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// `count` i.i.d. draws, one per row.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Matrix> {
        if count == 0 {
            return Err(SmcError::invalid("sample count must be at least 1"));
        }
        let d = self.dim();
        let mut out = Matrix::zeros(count, d);
        match self {
            DensityModel::Kde(k) => {
                let n = k.support.rows();
                for r in 0..count {
                    let src = k.support.row(rng.gen_range(0..n));
                    let row = out.row_mut(r);
                    for ((o, s), h) in row.iter_mut().zip(src).zip(&k.bandwidth) {
                        let z: f64 = StandardNormal.sample(rng);
                        *o = s + h * z;
                    }
                }
            }
            DensityModel::Factorised { dims } => {
                for r in 0..count {
                    let row = out.row_mut(r);
                    for (o, spec) in row.iter_mut().zip(dims) {
                        *o = match *spec {
                            DimSpec::Continuous { mean, std } => {
                                Normal::new(mean, std).expect("validated std").sample(rng)
                            }
                            DimSpec::Binary { p } => {
                                if rng.gen::<f64>() < p {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                    }
                }
            }
        }
        Ok(out)
    }
}
