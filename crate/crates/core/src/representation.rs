//! Learning the representation space.
//!
//! An encoder `f` and decoder `g` are trained jointly on three losses:
//!
//! * reconstruction, `sum_i ||g(f(x_i)) - x_i||^2 + beta ||f(x_i)||^2` over the
//!   test minibatch and the model samples;
//! * connection, `sum_(a,b) s(a,b) ||f(x_a) - f(x_b)||^2` over ordered pairs of
//!   model samples, where `s(a,b)` is the predictive similarity between the
//!   expert that generated `x_a` and the expert that generated `x_b`, both
//!   evaluated at `x_a`;
//! * separation, `-sum_(a,b) 1/2 [m(a) != m(b)] ||f(x_a) - f(x_b)||^2`, pushing
//!   samples of different experts apart.
//!
//! Inputs are standardized per dimension before encoding and reconstruction is
//! measured in standardized units.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::density::DensityModel;
use crate::error::{check_dim, Result, SmcError};
use crate::model::{ModelBundle, Prediction};
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, Checkpoint, Gradients, Mlp};
use crate::rng;

pub const MAX_SAMPLES_PER_MODEL: usize = 8;
const SCALE_FLOOR: f64 = 1e-6;

/// Per-dimension affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Column means and standard deviations; constant columns get std 1.
    pub fn fit(data: &Matrix) -> Result<Self> {
        if data.rows() == 0 {
            return Err(SmcError::Empty("standardizer data"));
        }
        let (mean, std) = data.column_moments();
        let std = std.into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply_batch(&self, x: &Matrix) -> Result<Matrix> {
        check_dim(self.dim(), x.cols())?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Encoder/decoder pair defining the representation space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap {
    encoder: Mlp,
    decoder: Mlp,
    standardizer: Standardizer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LatentMapFile {
    standardizer: Standardizer,
    encoder: Checkpoint,
    decoder: Checkpoint,
}

impl LatentMap {
    pub fn new(encoder: Mlp, decoder: Mlp, standardizer: Standardizer) -> Result<Self> {
        check_dim(encoder.output_dim(), decoder.input_dim())?;
        check_dim(encoder.input_dim(), decoder.output_dim())?;
        check_dim(encoder.input_dim(), standardizer.dim())?;
        if standardizer.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(SmcError::invalid("standardizer stds must be positive"));
        }
        Ok(Self {
            encoder,
            decoder,
            standardizer,
        })
    }

    /// Randomly initialised map `d -> hidden -> z -> reversed(hidden) -> d`
    /// with ReLU between layers and linear outputs.
    pub fn init<R: Rng + ?Sized>(
        standardizer: Standardizer,
        latent_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let d = standardizer.dim();
        let mut enc_dims = vec![d];
        enc_dims.extend_from_slice(hidden);
        enc_dims.push(latent_dim);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        let encoder = Mlp::new(&enc_dims, Activation::Identity, rng)?;
        let decoder = Mlp::new(&dec_dims, Activation::Identity, rng)?;
        Self::new(encoder, decoder, standardizer)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// `f(x)` for a raw feature vector.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let z = self.encoder.forward(&self.standardizer.apply(x))?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SmcError::NonFinite("latent encoding".into()));
        }
        Ok(z)
    }

    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix> {
        let z = self.encoder.forward_batch(&self.standardizer.apply_batch(x)?)?;
        if !z.is_finite() {
            return Err(SmcError::NonFinite("latent encoding".into()));
        }
        Ok(z)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = LatentMapFile {
            standardizer: self.standardizer.clone(),
            encoder: self.encoder.to_checkpoint(),
            decoder: self.decoder.to_checkpoint(),
        };
        std::fs::write(path, serde_json::to_string(&file)?).map_err(|e| SmcError::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SmcError::file(path, e))?;
        let file: LatentMapFile = serde_json::from_str(&text).map_err(|e| SmcError::file(path, e))?;
        Self::new(
            Mlp::from_checkpoint(&file.encoder)?,
            Mlp::from_checkpoint(&file.decoder)?,
            file.standardizer,
        )
        .map_err(|e| SmcError::file(path, e))
    }
}

/// Gradients for both halves of a [`LatentMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct MapGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
}

impl MapGradients {
    pub fn zeros(map: &LatentMap) -> Self {
        Self {
            encoder: Gradients::zeros_like(&map.encoder),
            decoder: Gradients::zeros_like(&map.decoder),
        }
    }

    pub fn add_scaled(&mut self, other: &MapGradients, s: f64) {
        for (a, b) in self.encoder.0.iter_mut().zip(&other.encoder.0) {
            *a += s * b;
        }
        for (a, b) in self.decoder.0.iter_mut().zip(&other.decoder.0) {
            *a += s * b;
        }
    }
}

/// Points drawn from the model densities for one optimisation step.
#[derive(Debug, Clone)]
pub struct ModelSampleBatch {
    /// Raw feature rows.
    pub points: Matrix,
    /// Index of the density each row was drawn from.
    pub provenance: Vec<usize>,
    /// `predictions[row][model]`: every expert evaluated at every row.
    pub predictions: Vec<Vec<Prediction>>,
}

impl ModelSampleBatch {
    /// Builds a batch and checks that the prediction cache covers every
    /// `(row, model)` pair.
    pub fn new(points: Matrix, provenance: Vec<usize>, predictions: Vec<Vec<Prediction>>) -> Result<Self> {
        if provenance.len() != points.rows() {
            return Err(SmcError::LengthMismatch {
                left: provenance.len(),
                right: points.rows(),
            });
        }
        if predictions.len() != points.rows() {
            return Err(SmcError::invalid("prediction cache does not cover every sampled row"));
        }
        let n_models = predictions.first().map_or(0, Vec::len);
        if predictions.iter().any(|p| p.len() != n_models) {
            return Err(SmcError::invalid("prediction cache rows have different model counts"));
        }
        if let Some(&m) = provenance.iter().find(|&&m| m >= n_models) {
            return Err(SmcError::invalid(format!(
                "provenance {m} has no cached prediction ({n_models} models)"
            )));
        }
        Ok(Self {
            points,
            provenance,
            predictions,
        })
    }

    /// `per_model` draws from each density, with all experts evaluated at
    /// every draw. Rows are grouped by model in bundle order.
    pub fn draw<R: Rng + ?Sized>(
        bundle: &ModelBundle,
        densities: &[DensityModel],
        per_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_dim(bundle.len(), densities.len())?;
        let mut points = Matrix::with_cols(bundle.input_dim());
        let mut provenance = Vec::with_capacity(bundle.len() * per_model);
        for (j, density) in densities.iter().enumerate() {
            let draws = density.sample(rng, per_model)?;
            for row in draws.iter_rows() {
                points.push_row(row)?;
                provenance.push(j);
            }
        }
        let predictions = points
            .iter_rows()
            .map(|x| bundle.predict_all(x))
            .collect::<Result<Vec<_>>>()?;
        Self::new(points, provenance, predictions)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }
}

/// `1 - D(a, b)` with total variation distance for class distributions and
/// `min(|a - b| / scale, 1)` for regression outputs.
pub fn predictive_similarity(a: &Prediction, b: &Prediction, scale: f64) -> Result<f64> {
    match (a, b) {
        (Prediction::Regression(x), Prediction::Regression(y)) => {
            if !(scale > 0.0) {
                return Err(SmcError::invalid("regression similarity scale must be positive"));
            }
            Ok(1.0 - ((x - y).abs() / scale).min(1.0))
        }
        (Prediction::Probabilities(p), Prediction::Probabilities(q)) => {
            check_dim(p.len(), q.len())?;
            let tv = 0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>();
            Ok((1.0 - tv).clamp(0.0, 1.0))
        }
        _ => Err(SmcError::KindMismatch(
            "predictive similarity between regression and classification outputs".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    /// Fixed regression distance scale. When absent, the range of the cached
    /// predictions in the current batch is used.
    #[serde(default)]
    pub regression_scale: Option<f64>,
}

impl SimilarityConfig {
    fn scale_for(&self, batch: &ModelSampleBatch) -> f64 {
        if let Some(s) = self.regression_scale {
            return s;
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in batch.predictions.iter().flatten() {
            if let Prediction::Regression(v) = p {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        if hi >= lo {
            (hi - lo).max(SCALE_FLOOR)
        } else {
            1.0
        }
    }
}

/// Similarity weights `s[a][b]` between the expert of row `a` and the expert
/// of row `b`, both evaluated at row `a`.
pub fn similarity_matrix(batch: &ModelSampleBatch, config: &SimilarityConfig) -> Result<Vec<Vec<f64>>> {
    let scale = config.scale_for(batch);
    let n = batch.len();
    let mut s = vec![vec![0.0; n]; n];
    for a in 0..n {
        let own = &batch.predictions[a][batch.provenance[a]];
        for b in 0..n {
            let other = &batch.predictions[a][batch.provenance[b]];
            s[a][b] = predictive_similarity(own, other, scale)?;
        }
    }
    Ok(s)
}

/// Reconstruction loss on raw feature rows, with gradients.
pub fn loss_rec(map: &LatentMap, batch: &Matrix, beta: f64) -> Result<(f64, MapGradients)> {
    let xs = map.standardizer.apply_batch(batch)?;
    let enc = map.encoder.forward_tape(&xs)?;
    let z = enc.output();
    let dec = map.decoder.forward_tape(z)?;
    let recon = dec.output();

    let mut value = 0.0;
    let mut d_recon = Matrix::zeros(recon.rows(), recon.cols());
    for r in 0..recon.rows() {
        for ((g, y), x) in d_recon.row_mut(r).iter_mut().zip(recon.row(r)).zip(xs.row(r)) {
            let e = y - x;
            value += e * e;
            *g = 2.0 * e;
        }
    }
    let (g_dec, mut dz) = map.decoder.backward(&dec, &d_recon)?;
    for r in 0..z.rows() {
        for (g, zv) in dz.row_mut(r).iter_mut().zip(z.row(r)) {
            value += beta * zv * zv;
            *g += 2.0 * beta * zv;
        }
    }
    let (g_enc, _) = map.encoder.backward(&enc, &dz)?;
    Ok((
        value,
        MapGradients {
            encoder: g_enc,
            decoder: g_dec,
        },
    ))
}

/// `sum_(a,b) w[a][b] ||f(x_a) - f(x_b)||^2` and its encoder gradient.
fn pairwise_latent_loss(map: &LatentMap, points: &Matrix, w: &[Vec<f64>]) -> Result<(f64, MapGradients)> {
    let xs = map.standardizer.apply_batch(points)?;
    let enc = map.encoder.forward_tape(&xs)?;
    let z = enc.output();
    let n = z.rows();
    let mut value = 0.0;
    let mut dz = Matrix::zeros(n, z.cols());
    for a in 0..n {
        for b in 0..n {
            let (wab, wba) = (w[a][b], w[b][a]);
            let za = z.row(a);
            let zb = z.row(b);
            let dist2: f64 = za.iter().zip(zb).map(|(p, q)| (p - q) * (p - q)).sum();
            value += wab * dist2;
            let coeff = 2.0 * (wab + wba);
            if coeff != 0.0 {
                let diff: Vec<f64> = za.iter().zip(zb).map(|(p, q)| p - q).collect();
                for (g, d) in dz.row_mut(a).iter_mut().zip(diff) {
                    *g += coeff * d;
                }
            }
        }
    }
    let (g_enc, _) = map.encoder.backward(&enc, &dz)?;
    Ok((
        value,
        MapGradients {
            encoder: g_enc,
            decoder: Gradients::zeros_like(&map.decoder),
        },
    ))
}

/// Connection loss over all ordered pairs of model samples.
pub fn loss_con(
    map: &LatentMap,
    batch: &ModelSampleBatch,
    config: &SimilarityConfig,
) -> Result<(f64, MapGradients)> {
    let s = similarity_matrix(batch, config)?;
    pairwise_latent_loss(map, &batch.points, &s)
}

/// Separation loss over all ordered pairs of model samples.
pub fn loss_sep(map: &LatentMap, batch: &ModelSampleBatch) -> Result<(f64, MapGradients)> {
    let n = batch.len();
    let w: Vec<Vec<f64>> = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    if batch.provenance[a] != batch.provenance[b] {
                        -0.5
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    pairwise_latent_loss(map, &batch.points, &w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rec: f64,
    pub con: f64,
    pub sep: f64,
    /// Latent L2 coefficient inside the reconstruction loss.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            con: 1.0,
            sep: 1.0,
            beta: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn reconstruction_only(beta: f64) -> Self {
        Self {
            rec: 1.0,
            con: 0.0,
            sep: 0.0,
            beta,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("rec", self.rec), ("con", self.con), ("sep", self.sep), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SmcError::invalid(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepresentationConfig {
    pub steps: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub weights: LossWeights,
    pub samples_per_model: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    /// Draws per model density added to the test data when fitting the
    /// input standardization.
    pub standardizer_samples: usize,
    pub similarity: SimilarityConfig,
    /// Upper bound on the L2 norm of every encoder unit's incoming weights
    /// and bias, enforced by projection after each step. `None` leaves the
    /// encoder unconstrained.
    pub encoder_max_norm: Option<f64>,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            seed: 0,
            latent_dim: 2,
            hidden: vec![64, 32],
            weights: LossWeights::default(),
            samples_per_model: 8,
            minibatch: 64,
            learning_rate: 1e-3,
            standardizer_samples: 256,
            similarity: SimilarityConfig::default(),
            encoder_max_norm: Some(2.0),
        }
    }
}

impl RepresentationConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.latent_dim == 0 {
            return Err(SmcError::invalid("latent_dim must be at least 1"));
        }
        if !(1..=MAX_SAMPLES_PER_MODEL).contains(&self.samples_per_model) {
            return Err(SmcError::invalid(format!(
                "samples_per_model must be in 1..={MAX_SAMPLES_PER_MODEL}"
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SmcError::invalid("learning_rate must be positive"));
        }
        if let Some(s) = self.similarity.regression_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(SmcError::invalid("regression similarity scale must be positive"));
            }
        }
        if let Some(c) = self.encoder_max_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(SmcError::invalid(format!("encoder_max_norm = {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_rec: f64,
    pub l_con: f64,
    pub l_sep: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace(pub Vec<TraceRow>);

impl LossTrace {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for row in &self.0 {
            wtr.serialize(row)?;
        }
        if self.0.is_empty() {
            wtr.write_record(["step", "l_rec", "l_con", "l_sep", "l_total"])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.0.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRepresentation {
    pub map: LatentMap,
    pub trace: LossTrace,
}

fn ensure_finite(value: f64, term: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(SmcError::Divergence(format!("{term} is {value} at step {step}")))
    }
}

/// Rescales each unit's incoming weights and bias jointly to norm at most `c`.
fn project_max_norm(net: &mut Mlp, c: f64) {
    for i in 0..net.num_layers() {
        let (w, b) = net.layer_mut(i);
        let inputs = w.len() / b.len();
        for (row, bias) in w.chunks_mut(inputs).zip(b.iter_mut()) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + *bias * *bias).sqrt();
            if norm > c {
                let s = c / norm;
                row.iter_mut().for_each(|v| *v *= s);
                *bias *= s;
            }
        }
    }
}

/// Optimises the weighted sum of the three losses.
///
/// Every step draws a fresh [`ModelSampleBatch`] and a minibatch of the test
/// features (without replacement). The result is a pure function of the
/// inputs and `config`.
pub fn train_representation(
    bundle: &ModelBundle,
    densities: &[DensityModel],
    test: &Dataset,
    config: &RepresentationConfig,
) -> Result<TrainedRepresentation> {
    config.validate()?;
    check_dim(bundle.len(), densities.len())?;
    for d in densities {
        check_dim(bundle.input_dim(), d.dim())?;
    }
    if !test.is_empty() {
        check_dim(bundle.input_dim(), test.dim())?;
    }
    let mut rng = rng::stream(config.seed, "representation");

    let mut pool = test.features().clone();
    if config.standardizer_samples > 0 {
        for d in densities {
            pool = pool.vstack(&d.sample(&mut rng, config.standardizer_samples)?)?;
        }
    }
    let standardizer = if pool.is_empty() {
        Standardizer::identity(bundle.input_dim())
    } else {
        Standardizer::fit(&pool)?
    };
    let mut map = LatentMap::init(standardizer, config.latent_dim, &config.hidden, &mut rng)?;
    let mut enc_state = AdamState::new(map.encoder.params().len());
    let mut dec_state = AdamState::new(map.decoder.params().len());
    let adam = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let w = config.weights;
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch = ModelSampleBatch::draw(bundle, densities, config.samples_per_model, &mut rng)?;
        let take = config.minibatch.min(test.len());
        let mut rows = index::sample(&mut rng, test.len(), take).into_vec();
        rows.sort_unstable();
        let rec_batch = test.features().select_rows(&rows).vstack(&batch.points)?;

        let (l_rec, g_rec) = loss_rec(&map, &rec_batch, w.beta)?;
        let (l_con, g_con) = loss_con(&map, &batch, &config.similarity)?;
        let (l_sep, g_sep) = loss_sep(&map, &batch)?;
        ensure_finite(l_rec, "reconstruction loss", step)?;
        ensure_finite(l_con, "connection loss", step)?;
        ensure_finite(l_sep, "separation loss", step)?;
        let l_total = w.rec * l_rec + w.con * l_con + w.sep * l_sep;

        let mut grads = MapGradients::zeros(&map);
        grads.add_scaled(&g_rec, w.rec);
        grads.add_scaled(&g_con, w.con);
        grads.add_scaled(&g_sep, w.sep);
        if grads.encoder.0.iter().chain(&grads.decoder.0).any(|g| !g.is_finite()) {
            return Err(SmcError::Divergence(format!("non-finite gradient at step {step}")));
        }
        adam_step(map.encoder.params_mut(), grads.encoder.as_slice(), &mut enc_state, &adam)?;
        adam_step(map.decoder.params_mut(), grads.decoder.as_slice(), &mut dec_state, &adam)?;
        if let Some(c) = config.encoder_max_norm {
            project_max_norm(&mut map.encoder, c);
        }

        trace.push(TraceRow {
            step,
            l_rec,
            l_con,
            l_sep,
            l_total,
        });
    }

    Ok(TrainedRepresentation {
        map,
        trace: LossTrace(trace),
    })
}

/// Mean per-row reconstruction loss (including the latent penalty) over `data`.
pub fn reconstruction_error(map: &LatentMap, data: &Matrix, beta: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(SmcError::Empty("reconstruction data"));
    }
    let (v, _) = loss_rec(map, data, beta)?;
    Ok(v / data.rows() as f64)
}

/// Mean latent distance between encoded samples of different groups.
pub fn mean_cross_group_distance(map: &LatentMap, groups: &[Matrix]) -> Result<f64> {
    let encoded = groups
        .iter()
        .map(|g| map.encode_batch(g))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, a) in encoded.iter().enumerate() {
        for b in &encoded[i + 1..] {
            for za in a.iter_rows() {
                for zb in b.iter_rows() {
                    total += za.iter().zip(zb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(SmcError::invalid("need at least two non-empty groups"));
    }
    Ok(total / count as f64)
}

/// Ladder of multipliers tried jointly on the connection and separation weights.
pub const BALANCE_LADDER: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOutcome {
    pub weights: LossWeights,
    /// Final reconstruction error with connection and separation disabled.
    pub reference_rec: f64,
    /// `(multiplier, final reconstruction error)` per ladder rung.
    pub ladder: Vec<(f64, f64)>,
    /// False when no rung met the threshold and equal weighting was returned.
    pub qualified: bool,
}

/// Picks the largest connection/separation multiplier whose trained map keeps
/// the final reconstruction error within `(1 + threshold)` of the
/// reconstruction-only reference. Final reconstruction error is
/// [`reconstruction_error`] over the test features. Falls back to a
/// multiplier of 1 when no rung qualifies.
pub fn balance_losses(
    bundle: &ModelBundle,
    densities: &[DensityModel],
    test: &Dataset,
    base: &RepresentationConfig,
    threshold: f64,
) -> Result<BalanceOutcome> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(SmcError::invalid("threshold must be non-negative"));
    }
    if test.is_empty() {
        return Err(SmcError::Empty("test data for loss balancing"));
    }
    let beta = base.weights.beta;
    let with_weights = |weights: LossWeights| RepresentationConfig {
        weights,
        ..base.clone()
    };
    let reference = train_representation(
        bundle,
        densities,
        test,
        &with_weights(LossWeights {
            con: 0.0,
            sep: 0.0,
            ..base.weights
        }),
    )?;
    let reference_rec = reconstruction_error(&reference.map, test.features(), beta)?;
    let limit = (1.0 + threshold) * reference_rec;

    let mut ladder = Vec::with_capacity(BALANCE_LADDER.len());
    let mut best = None;
    for &lambda in &BALANCE_LADDER {
        let weights = LossWeights {
            con: lambda,
            sep: lambda,
            ..base.weights
        };
        let trained = train_representation(bundle, densities, test, &with_weights(weights))?;
        let rec = reconstruction_error(&trained.map, test.features(), beta)?;
        ladder.push((lambda, rec));
        if rec <= limit {
            best = Some(weights);
        }
    }
    let qualified = best.is_some();
    let weights = best.unwrap_or(LossWeights {
        con: 1.0,
        sep: 1.0,
        ..base.weights
    });
    Ok(BalanceOutcome {
        weights,
        reference_rec,
        ladder,
        qualified,
    })
}
