//! End-to-end fitting: information to densities, representation training,
//! latent refit and weight engine.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::density::DensityModel;
use crate::error::{check_dim, Result};
use crate::model::ModelBundle;
use crate::representation::{train_representation, LossTrace, RepresentationConfig};
use crate::rng;
use crate::weights::{build_latent_densities, WeightConfig, WeightEngine};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub representation: RepresentationConfig,
    pub weights: WeightConfig,
}

#[derive(Debug, Clone)]
pub struct FittedPipeline {
    pub feature_densities: Vec<DensityModel>,
    pub engine: WeightEngine,
    pub trace: LossTrace,
}

/// One density per expert from its information.
pub fn feature_densities(bundle: &ModelBundle) -> Result<Vec<DensityModel>> {
    (0..bundle.len()).map(|j| bundle.info(j).fit_density()).collect()
}

/// Runs every fitting step. Randomness comes from the representation seed.
pub fn fit(bundle: &ModelBundle, test: &Dataset, config: &FitConfig) -> Result<FittedPipeline> {
    let densities = feature_densities(bundle)?;
    fit_with_densities(bundle, densities, test, config)
}

pub fn fit_with_densities(
    bundle: &ModelBundle,
    densities: Vec<DensityModel>,
    test: &Dataset,
    config: &FitConfig,
) -> Result<FittedPipeline> {
    check_dim(bundle.len(), densities.len())?;
    let trained = train_representation(bundle, &densities, test, &config.representation)?;
    let mut rng = rng::stream(config.representation.seed, "latent-densities");
    let latent = build_latent_densities(&trained.map, &densities, config.weights.n_samples, &mut rng)?;
    let engine = WeightEngine::new(
        trained.map,
        latent,
        config.weights.gamma,
        config.weights.threshold,
        test.features(),
    )?;
    Ok(FittedPipeline {
        feature_densities: densities,
        engine,
        trace: trained.trace,
    })
}
