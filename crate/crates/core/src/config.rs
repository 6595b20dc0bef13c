//! Run configuration shared by the library pipeline and the command line.

use serde::{Deserialize, Serialize};

use crate::coreset::{CoresetParams, CoresetStrategy};
use crate::error::{Error, Result};
use crate::lid::{LidParams, Metric};
use crate::pipeline::{Aggregation, Baseline, ScoringConfig};
use crate::scores::{ConfidenceMethod, FusionConfig, GuidanceMethod};
use crate::superpixel::SlicParams;

/// Embedding width of the reference segmentation backbone. Inputs of any
/// width are accepted; set [`Config::feature_dim`] to enforce one.
pub const REFERENCE_FEATURE_DIM: usize = 304;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Neighbors for every LID estimate.
    pub k: usize,
    /// Coreset rows kept per class.
    pub m: usize,
    pub pixels_per_superpixel: usize,
    pub compactness: f64,
    pub slic_iterations: usize,
    pub min_region_fraction: f64,
    pub purity_threshold: f64,
    /// `null` drops the confidence term.
    pub confidence_method: Option<ConfidenceMethod>,
    pub guidance_method: GuidanceMethod,
    pub coreset_strategy: CoresetStrategy,
    pub rectify_floor: f64,
    pub seed: u64,
    pub metric: Metric,
    pub aggregation: Aggregation,
    pub baseline: Option<Baseline>,
    pub distance_floor: f64,
    pub lid_cap: f64,
    /// Required embedding width, if any.
    pub feature_dim: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            k: 400,
            m: 400,
            pixels_per_superpixel: 200,
            compactness: 10.0,
            slic_iterations: 10,
            min_region_fraction: 0.25,
            purity_threshold: 0.75,
            confidence_method: Some(ConfidenceMethod::Energy),
            guidance_method: GuidanceMethod::WeightedLid,
            coreset_strategy: CoresetStrategy::Lid,
            rectify_floor: 1e-6,
            seed: 0,
            metric: Metric::Euclidean,
            aggregation: Aggregation::Superpixel,
            baseline: None,
            distance_floor: 1e-12,
            lid_cap: 1e6,
            feature_dim: None,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.lid_params().validate()?;
        self.slic().validate()?;
        self.coreset().validate()?;
        FusionConfig {
            calibration_min: 0.0,
            ..self.fusion()
        }
        .validate()?;
        if self.feature_dim == Some(0) {
            return Err(Error::param("feature_dim must be positive"));
        }
        Ok(())
    }

    pub fn lid_params(&self) -> LidParams {
        LidParams {
            k: self.k,
            distance_floor: self.distance_floor,
            lid_cap: self.lid_cap,
        }
    }

    pub fn slic(&self) -> SlicParams {
        SlicParams {
            pixels_per_superpixel: self.pixels_per_superpixel,
            compactness: self.compactness,
            max_iterations: self.slic_iterations,
            min_region_fraction: self.min_region_fraction,
        }
    }

    pub fn coreset(&self) -> CoresetParams {
        CoresetParams {
            m: self.m,
            k: self.k,
            purity_threshold: self.purity_threshold,
            strategy: self.coreset_strategy,
            seed: self.seed,
            metric: self.metric,
            distance_floor: self.distance_floor,
            lid_cap: self.lid_cap,
        }
    }

    fn fusion(&self) -> FusionConfig {
        FusionConfig {
            confidence_method: self.confidence_method,
            guidance_method: self.guidance_method,
            rectify_floor: self.rectify_floor,
            calibration_min: 0.0,
            k_guidance: self.k,
        }
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            slic: self.slic(),
            fusion: self.fusion(),
            metric: self.metric,
            aggregation: self.aggregation,
            baseline: self.baseline,
        }
    }

    /// Checks an embedding width against [`Config::feature_dim`].
    pub fn check_feature_dim(&self, dim: usize) -> Result<()> {
        match self.feature_dim {
            Some(d) if d != dim => Err(Error::shape(format!(
                "features have dimension {dim}, config requires {d}"
            ))),
            _ => Ok(()),
        }
    }
}
