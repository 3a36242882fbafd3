//! Expert predictors and the bundle of `(expert, information)` pairs.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::density::ModelInfo;
use crate::error::{check_dim, Result, SmcError};
use crate::nn::{Activation, Checkpoint, Mlp};

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Regression,
    Classification { classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Regression(f64),
    Probabilities(Vec<f64>),
}

impl Prediction {
    pub fn kind(&self) -> OutputKind {
        match self {
            Prediction::Regression(_) => OutputKind::Regression,
            Prediction::Probabilities(p) => OutputKind::Classification { classes: p.len() },
        }
    }

    /// Checks the prediction against `kind`: finite scalar for regression,
    /// a length-K simplex point for classification.
    pub fn validate(&self, kind: OutputKind) -> Result<()> {
        if self.kind() != kind {
            return Err(SmcError::KindMismatch(format!(
                "expected {kind:?}, got {:?}",
                self.kind()
            )));
        }
        match self {
            Prediction::Regression(v) if !v.is_finite() => {
                Err(SmcError::NonFinite("regression prediction".into()))
            }
            Prediction::Probabilities(p) => {
                let sum: f64 = p.iter().sum();
                if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
                    Err(SmcError::invalid(format!("class probabilities off the simplex: {p:?}")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn as_regression(&self) -> Option<f64> {
        match self {
            Prediction::Regression(v) => Some(*v),
            Prediction::Probabilities(_) => None,
        }
    }

    pub fn as_probabilities(&self) -> Option<&[f64]> {
        match self {
            Prediction::Probabilities(p) => Some(p),
            Prediction::Regression(_) => None,
        }
    }

    /// Index of the most probable class, lowest index on ties.
    pub fn argmax(&self) -> Option<usize> {
        let p = self.as_probabilities()?;
        let mut best = 0;
        for (k, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = k;
            }
        }
        Some(best)
    }
}

/// A pre-trained predictor. Implementations must be pure.
pub trait Expert: Send + Sync + fmt::Debug {
    fn id(&self) -> &str;
    fn input_dim(&self) -> usize;
    fn output_kind(&self) -> OutputKind;
    fn predict(&self, x: &[f64]) -> Result<Prediction>;

    /// Number of fitted parameters, for information criteria.
    fn param_count(&self) -> Option<usize> {
        None
    }
}

/// Expert backed by a plain function.
pub struct FnExpert<F> {
    id: String,
    input_dim: usize,
    kind: OutputKind,
    param_count: Option<usize>,
    f: F,
}

impl<F> FnExpert<F>
where
    F: Fn(&[f64]) -> Prediction + Send + Sync,
{
    pub fn new(id: impl Into<String>, input_dim: usize, kind: OutputKind, f: F) -> Self {
        Self {
            id: id.into(),
            input_dim,
            kind,
            param_count: None,
            f,
        }
    }

    pub fn with_param_count(mut self, k: usize) -> Self {
        self.param_count = Some(k);
        self
    }
}

impl<F> fmt::Debug for FnExpert<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnExpert")
            .field("id", &self.id)
            .field("input_dim", &self.input_dim)
            .field("kind", &self.kind)
            .finish()
    }
}

impl<F> Expert for FnExpert<F>
where
    F: Fn(&[f64]) -> Prediction + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_kind(&self) -> OutputKind {
        self.kind
    }

    fn predict(&self, x: &[f64]) -> Result<Prediction> {
        check_dim(self.input_dim, x.len())?;
        Ok((self.f)(x))
    }

    fn param_count(&self) -> Option<usize> {
        self.param_count
    }
}

/// Network expert with a fixed affine input scaling `(x - shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpExpert {
    id: String,
    kind: OutputKind,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    net: Mlp,
}

/// On-disk form of [`MlpExpert`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertFile {
    pub id: String,
    pub output: OutputKind,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub network: Checkpoint,
}

impl MlpExpert {
    pub fn new(
        id: impl Into<String>,
        net: Mlp,
        input_shift: Vec<f64>,
        input_scale: Vec<f64>,
    ) -> Result<Self> {
        let d = net.input_dim();
        check_dim(d, input_shift.len())?;
        check_dim(d, input_scale.len())?;
        if input_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(SmcError::invalid("input scales must be positive"));
        }
        let kind = match net.output_activation() {
            Activation::Softmax => OutputKind::Classification {
                classes: net.output_dim(),
            },
            _ if net.output_dim() == 1 => OutputKind::Regression,
            _ => {
                return Err(SmcError::invalid(
                    "regression expert must have a single output",
                ))
            }
        };
        Ok(Self {
            id: id.into(),
            kind,
            input_shift,
            input_scale,
            net,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn scale_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_shift)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn scale_batch(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for ((v, m), s) in row.iter_mut().zip(&self.input_shift).zip(&self.input_scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn to_file(&self) -> ExpertFile {
        ExpertFile {
            id: self.id.clone(),
            output: self.kind,
            input_shift: self.input_shift.clone(),
            input_scale: self.input_scale.clone(),
            network: self.net.to_checkpoint(),
        }
    }

    pub fn from_file(file: &ExpertFile) -> Result<Self> {
        let expert = Self::new(
            file.id.clone(),
            Mlp::from_checkpoint(&file.network)?,
            file.input_shift.clone(),
            file.input_scale.clone(),
        )?;
        if expert.kind != file.output {
            return Err(SmcError::KindMismatch(format!(
                "file declares {:?}, network produces {:?}",
                file.output, expert.kind
            )));
        }
        Ok(expert)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(&self.to_file())?).map_err(|e| SmcError::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SmcError::file(path, e))?;
        let file: ExpertFile = serde_json::from_str(&text).map_err(|e| SmcError::file(path, e))?;
        Self::from_file(&file).map_err(|e| SmcError::file(path, e))
    }
}

impl Expert for MlpExpert {
    fn id(&self) -> &str {
        &self.id
    }

    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn output_kind(&self) -> OutputKind {
        self.kind
    }

    fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let out = self.net.forward(&self.scale_input(x))?;
        Ok(match self.kind {
            OutputKind::Regression => Prediction::Regression(out[0]),
            OutputKind::Classification { .. } => Prediction::Probabilities(out),
        })
    }

    fn param_count(&self) -> Option<usize> {
        Some(self.net.params().len())
    }
}

#[derive(Debug, Clone)]
pub struct BundleEntry {
    pub expert: Arc<dyn Expert>,
    pub info: ModelInfo,
}

/// The experts to combine, each with its domain information.
///
/// All experts share the input dimension and output kind, and every piece of
/// information lives in that same feature space.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    entries: Vec<BundleEntry>,
    input_dim: usize,
    kind: OutputKind,
}

impl ModelBundle {
    pub fn new(entries: Vec<BundleEntry>) -> Result<Self> {
        let first = entries.first().ok_or(SmcError::Empty("model bundle"))?;
        let input_dim = first.expert.input_dim();
        let kind = first.expert.output_kind();
        for e in &entries {
            check_dim(input_dim, e.expert.input_dim())?;
            check_dim(input_dim, e.info.dim())?;
            e.info.validate()?;
            if e.expert.output_kind() != kind {
                return Err(SmcError::KindMismatch(format!(
                    "expert {} outputs {:?}, bundle expects {kind:?}",
                    e.expert.id(),
                    e.expert.output_kind()
                )));
            }
        }
        Ok(Self {
            entries,
            input_dim,
            kind,
        })
    }

    pub fn from_pairs(pairs: Vec<(Arc<dyn Expert>, ModelInfo)>) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .map(|(expert, info)| BundleEntry { expert, info })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_kind(&self) -> OutputKind {
        self.kind
    }

    pub fn entries(&self) -> &[BundleEntry] {
        &self.entries
    }

    pub fn expert(&self, j: usize) -> &dyn Expert {
        self.entries[j].expert.as_ref()
    }

    pub fn info(&self, j: usize) -> &ModelInfo {
        &self.entries[j].info
    }

    /// Prediction of expert `j`, validated against the bundle's output kind.
    pub fn predict(&self, j: usize, x: &[f64]) -> Result<Prediction> {
        let p = self.entries[j].expert.predict(x)?;
        p.validate(self.kind)?;
        Ok(p)
    }

    pub fn predict_all(&self, x: &[f64]) -> Result<Vec<Prediction>> {
        (0..self.len()).map(|j| self.predict(j, x)).collect()
    }

    /// Same bundle with entries reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        Self::new(order.iter().map(|&j| self.entries[j].clone()).collect())
    }

    /// Same experts with replacement information.
    pub fn with_infos(&self, infos: Vec<ModelInfo>) -> Result<Self> {
        check_dim(self.len(), infos.len())?;
        Self::new(
            self.entries
                .iter()
                .zip(infos)
                .map(|(e, info)| BundleEntry {
                    expert: e.expert.clone(),
                    info,
                })
                .collect(),
        )
    }
}
