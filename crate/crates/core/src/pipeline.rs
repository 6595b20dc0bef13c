//! End-to-end training analysis and per-image scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coreset::{superpixel_embed, Coreset, SuperpixelRecord};
use crate::error::{Error, Result};
use crate::lid::{LidParams, Metric};
use crate::matrix::Matrix;
use crate::scores::{
    aggregate_confidence, broadcast_to_pixels, confidence_from_logits, fuse, knn_baseline,
    nnguide_baseline, rectify, Calibration, ConfidenceMethod, FusionConfig, GuidanceIndex,
    GuidanceMethod, KlTemplateBuilder, KlTemplates, ScoreMap,
};
use crate::superpixel::{slic_segment, SlicParams, SuperpixelPartition};
use crate::tensorio::{FeatureMap, LabelMask, LogitMap, Tensor};

/// Everything the pipeline reads for one image.
#[derive(Debug, Clone)]
pub struct ImageInputs {
    /// u8 `[H, W, 3]`.
    pub image: Tensor,
    pub features: FeatureMap,
    pub logits: LogitMap,
}

impl ImageInputs {
    pub fn new(image: Tensor, features: FeatureMap, logits: LogitMap) -> Result<Self> {
        match image.shape() {
            [h, w, 3] if *h == logits.height() && *w == logits.width() => Ok(Self {
                image,
                features,
                logits,
            }),
            s => Err(Error::shape(format!(
                "image {s:?} does not match logits {}x{}",
                logits.height(),
                logits.width()
            ))),
        }
    }
}

/// Where the confidence term lives before fusion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over each superpixel, then broadcast.
    #[default]
    Superpixel,
    /// Per pixel, multiplied by the broadcast guidance.
    Pixel,
}

/// Replaces the fused score with a feature-distance baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Negative distance to the k-th nearest coreset embedding.
    Knn,
    /// Rectified confidence times mean similarity to the k nearest.
    NnGuide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub slic: SlicParams,
    pub fusion: FusionConfig,
    pub metric: Metric,
    pub aggregation: Aggregation,
    pub baseline: Option<Baseline>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            slic: SlicParams::default(),
            fusion: FusionConfig::default(),
            metric: Metric::Euclidean,
            aggregation: Aggregation::Superpixel,
            baseline: None,
        }
    }
}

/// Superpixel records and confidence statistics of the training set.
#[derive(Debug, Clone)]
pub struct TrainingAnalysis {
    /// Per image; `confidence` holds the mean energy of each superpixel.
    pub records: Vec<Vec<SuperpixelRecord>>,
    pub templates: KlTemplates,
    pub calibration: Calibration,
}

/// Segments every training image, embeds its superpixels with majority
/// labels, and records the minimum confidence of every method. Pixels
/// labeled 255 take no part in templates or calibration.
pub fn analyze_training(
    images: &[(ImageInputs, LabelMask)],
    slic: &SlicParams,
) -> Result<TrainingAnalysis> {
    if images.is_empty() {
        return Err(Error::input("no training images"));
    }
    let k = images[0].0.logits.num_classes();
    if images.iter().any(|(i, _)| i.logits.num_classes() != k) {
        return Err(Error::shape("training logits disagree on the class count"));
    }
    let templates = images
        .par_iter()
        .map(|(img, labels)| {
            let mut b = KlTemplateBuilder::new(k);
            b.add_labeled(&img.logits, labels)?;
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .try_fold(KlTemplateBuilder::new(k), |mut acc, b| {
            acc.merge(&b)?;
            Ok::<_, Error>(acc)
        })?
        .finish()?;

    let per_image: Vec<(Vec<SuperpixelRecord>, Calibration)> = images
        .par_iter()
        .map(|(img, labels)| {
            let partition = slic_segment(&img.image, slic)?;
            let mut records = superpixel_embed(&img.features, &partition, Some(labels))?;
            let mut cal = Calibration::default();
            let mut energy = Vec::new();
            for method in ConfidenceMethod::ALL {
                let map = confidence_from_logits(&img.logits, method, Some(&templates))?;
                let agg = aggregate_confidence(&map, &partition)?;
                cal.observe_labeled_pixels(method, &map, labels);
                let kept: Vec<f64> = records.iter().map(|r| agg[r.superpixel]).collect();
                cal.observe_superpixels(method, &kept);
                if method == ConfidenceMethod::Energy {
                    energy = agg;
                }
            }
            for r in &mut records {
                r.confidence = Some(energy[r.superpixel]);
            }
            Ok((records, cal))
        })
        .collect::<Result<_>>()?;

    let mut calibration = Calibration::default();
    let mut records = Vec::with_capacity(per_image.len());
    for (r, c) in per_image {
        calibration.merge(&c);
        records.push(r);
    }
    Ok(TrainingAnalysis {
        records,
        templates,
        calibration,
    })
}

/// Scores test images against a fixed coreset.
#[derive(Debug, Clone)]
pub struct Scorer {
    config: ScoringConfig,
    coreset: Coreset,
    calibration: Calibration,
    guidance: GuidanceIndex,
}

impl Scorer {
    pub fn new(coreset: Coreset, calibration: Calibration, config: ScoringConfig) -> Result<Self> {
        config.slic.validate()?;
        config.fusion.validate()?;
        if config.fusion.confidence_method == Some(ConfidenceMethod::KlMatch)
            && coreset.templates().is_none()
        {
            return Err(Error::input(
                "kl-match needs a coreset that stores KL templates",
            ));
        }
        let guidance = GuidanceIndex::new(
            &coreset,
            config.fusion.guidance_method,
            config.metric,
            config.fusion.rectify_floor,
        )
        .with_lid_params(LidParams::with_k(config.fusion.k_guidance.max(2)));
        Ok(Self {
            config,
            coreset,
            calibration,
            guidance,
        })
    }

    pub fn config(&self) -> &ScoringConfig {
        &self.config
    }

    pub fn coreset(&self) -> &Coreset {
        &self.coreset
    }

    fn calibrated(&self, method: ConfidenceMethod, pixel: bool) -> FusionConfig {
        let table = if pixel {
            &self.calibration.pixel_min
        } else {
            &self.calibration.superpixel_min
        };
        FusionConfig {
            calibration_min: table.get(&method).copied().unwrap_or(0.0),
            ..self.config.fusion
        }
    }

    /// Segments the image, then scores it.
    pub fn score(&self, inputs: &ImageInputs) -> Result<ScoreMap> {
        let partition = slic_segment(&inputs.image, &self.config.slic)?;
        self.score_with_partition(inputs, &partition)
    }

    pub fn score_with_partition(
        &self,
        inputs: &ImageInputs,
        partition: &SuperpixelPartition,
    ) -> Result<ScoreMap> {
        let (h, w) = (inputs.logits.height(), inputs.logits.width());
        if (partition.height(), partition.width()) != (h, w) {
            return Err(Error::shape("partition does not match the logits"));
        }
        if inputs.features.dim() != self.coreset.dim() {
            return Err(Error::shape(format!(
                "features have dimension {}, coreset has {}",
                inputs.features.dim(),
                self.coreset.dim()
            )));
        }
        let fusion = &self.config.fusion;
        let records = superpixel_embed(&inputs.features, partition, None)?;
        let rows: Vec<&[f32]> = records.iter().map(|r| r.embedding.as_slice()).collect();
        let embeddings = Matrix::from_rows(&rows)?;

        let pixel_conf = match fusion.confidence_method {
            Some(m) => Some((
                m,
                confidence_from_logits(&inputs.logits, m, self.coreset.templates())?,
            )),
            None => None,
        };
        let n = partition.num_superpixels();

        if let Some(baseline) = self.config.baseline {
            let scores = match baseline {
                Baseline::Knn => knn_baseline(&embeddings, &self.coreset, fusion.k_guidance)?,
                Baseline::NnGuide => {
                    let s = match &pixel_conf {
                        Some((m, map)) => rectify(
                            &aggregate_confidence(map, partition)?,
                            &self.calibrated(*m, false),
                        ),
                        None => vec![1.0; n],
                    };
                    nnguide_baseline(&s, &embeddings, &self.coreset, fusion.k_guidance)?
                }
            };
            return Ok(ScoreMap {
                per_pixel: broadcast_to_pixels(&scores, partition)?,
                per_superpixel: Some(scores),
            });
        }

        let guided = fusion.guidance_method != GuidanceMethod::None;
        let guidance = self.guidance.score(&embeddings, fusion.k_guidance)?;
        match self.config.aggregation {
            Aggregation::Superpixel => {
                let s = match &pixel_conf {
                    // Without guidance the confidence is the score itself.
                    Some((_, map)) if !guided => aggregate_confidence(map, partition)?,
                    Some((m, map)) => rectify(
                        &aggregate_confidence(map, partition)?,
                        &self.calibrated(*m, false),
                    ),
                    None => vec![1.0; n],
                };
                let fused = fuse(&s, &guidance)?;
                Ok(ScoreMap {
                    per_pixel: broadcast_to_pixels(&fused, partition)?,
                    per_superpixel: Some(fused),
                })
            }
            Aggregation::Pixel => {
                let d = broadcast_to_pixels(&guidance, partition)?;
                let d = d.as_f32().expect("broadcast yields f32");
                let values: Vec<f32> = match &pixel_conf {
                    Some((_, map)) if !guided => map.as_f32().expect("f32 map").to_vec(),
                    Some((m, map)) => {
                        let raw: Vec<f64> = map
                            .as_f32()
                            .expect("f32 map")
                            .iter()
                            .map(|&x| x as f64)
                            .collect();
                        let s = rectify(&raw, &self.calibrated(*m, true));
                        s.iter()
                            .zip(d)
                            .map(|(a, &b)| (a * b as f64) as f32)
                            .collect()
                    }
                    None => d.to_vec(),
                };
                Ok(ScoreMap {
                    per_superpixel: None,
                    per_pixel: Tensor::from_f32(vec![h, w], values)?,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coreset::{build_coreset, CoresetParams};
    use crate::eval::evaluate;
    use crate::synth::{OodKind, SynthSpec, SynthWorld};

    fn fixture() -> (Coreset, Calibration, Vec<(ImageInputs, LabelMask)>) {
        let spec = SynthSpec::new(3, 4, 16, 40.0, [40, 48], OodKind::Far, 1);
        let world = SynthWorld::new(&spec).unwrap();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for i in 0..3 {
            let s = world.scene(i).unwrap();
            let inputs = ImageInputs::new(s.image, s.features, s.logits.unwrap()).unwrap();
            if i < 2 {
                train.push((inputs, s.train_labels));
            } else {
                test.push((inputs, s.ood_mask));
            }
        }
        let slic = SlicParams {
            pixels_per_superpixel: 30,
            ..SlicParams::default()
        };
        let analysis = analyze_training(&train, &slic).unwrap();
        let params = CoresetParams {
            m: 20,
            k: 10,
            ..CoresetParams::default()
        };
        let mut coreset = build_coreset(&analysis.records, &params).unwrap();
        coreset.set_templates(Some(analysis.templates)).unwrap();
        (coreset, analysis.calibration, test)
    }

    fn config() -> ScoringConfig {
        ScoringConfig {
            slic: SlicParams {
                pixels_per_superpixel: 30,
                ..SlicParams::default()
            },
            fusion: FusionConfig {
                k_guidance: 10,
                ..FusionConfig::default()
            },
            ..ScoringConfig::default()
        }
    }

    #[test]
    fn every_configuration_scores() {
        let (coreset, cal, test) = fixture();
        let (img, mask) = &test[0];
        for conf in ConfidenceMethod::ALL.map(Some).into_iter().chain([None]) {
            for guid in GuidanceMethod::ALL {
                for agg in [Aggregation::Superpixel, Aggregation::Pixel] {
                    let mut cfg = config();
                    cfg.fusion.confidence_method = conf;
                    cfg.fusion.guidance_method = guid;
                    cfg.aggregation = agg;
                    let s = Scorer::new(coreset.clone(), cal.clone(), cfg).unwrap();
                    let map = s.score(img).unwrap();
                    assert_eq!(map.per_pixel.shape(), &[40, 48]);
                    assert!(map
                        .per_pixel
                        .as_f32()
                        .unwrap()
                        .iter()
                        .all(|x| x.is_finite()));
                    if conf.is_some() || guid != GuidanceMethod::None {
                        evaluate(&[map.per_pixel], std::slice::from_ref(&mask)).unwrap();
                    }
                }
            }
        }
        for b in [Baseline::Knn, Baseline::NnGuide] {
            let mut cfg = config();
            cfg.baseline = Some(b);
            let s = Scorer::new(coreset.clone(), cal.clone(), cfg).unwrap();
            assert!(s.score(img).unwrap().per_superpixel.is_some());
        }
    }

    #[test]
    fn calibration_covers_every_method() {
        let (_, cal, _) = fixture();
        for m in ConfidenceMethod::ALL {
            assert!(cal.superpixel_min.contains_key(&m));
            assert!(cal.pixel_min[&m] <= cal.superpixel_min[&m]);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (coreset, cal, _) = fixture();
        let spec = SynthSpec::new(3, 4, 8, 40.0, [40, 48], OodKind::Far, 1);
        let s = SynthWorld::new(&spec).unwrap().scene(0).unwrap();
        let inputs = ImageInputs::new(s.image, s.features, s.logits.unwrap()).unwrap();
        let scorer = Scorer::new(coreset, cal, config()).unwrap();
        assert!(scorer.score(&inputs).is_err());
    }
}
