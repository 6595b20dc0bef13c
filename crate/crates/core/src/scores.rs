//! Classifier confidence, superpixel aggregation, geometric guidance, and the
//! fused score. Every score here is oriented so that higher means more
//! in-distribution.
//!
//! The fused score for superpixel `l` is `S_l * D_l`, where `S_l` is the mean
//! pixel confidence over the superpixel (shifted to be non-negative) and
//! `D_l` is the LID of the superpixel embedding measured against the
//! LID-weighted coreset `{ w_t * z_t }`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coreset::Coreset;
use crate::error::{Error, Result};
use crate::lid::{knn_search, lid_mle, LidParams, Metric};
use crate::matrix::Matrix;
use crate::superpixel::SuperpixelPartition;
use crate::tensorio::{LabelMask, LogitMap, Tensor, MASK_ID, MASK_IGNORE, MASK_OOD};

// --- methods ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMethod {
    Msp,
    MaxLogit,
    Energy,
    Entropy,
    KlMatch,
}

impl ConfidenceMethod {
    pub const ALL: [ConfidenceMethod; 5] = [
        ConfidenceMethod::Msp,
        ConfidenceMethod::MaxLogit,
        ConfidenceMethod::Energy,
        ConfidenceMethod::Entropy,
        ConfidenceMethod::KlMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConfidenceMethod::Msp => "msp",
            ConfidenceMethod::MaxLogit => "maxlogit",
            ConfidenceMethod::Energy => "energy",
            ConfidenceMethod::Entropy => "entropy",
            ConfidenceMethod::KlMatch => "kl-match",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMethod {
    WeightedLid,
    UnweightedLid,
    KnnDistance,
    None,
}

impl GuidanceMethod {
    pub const ALL: [GuidanceMethod; 4] = [
        GuidanceMethod::WeightedLid,
        GuidanceMethod::UnweightedLid,
        GuidanceMethod::KnnDistance,
        GuidanceMethod::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMethod::WeightedLid => "weighted-lid",
            GuidanceMethod::UnweightedLid => "unweighted-lid",
            GuidanceMethod::KnnDistance => "knn-distance",
            GuidanceMethod::None => "none",
        }
    }
}

fn parse_name<T: Copy>(
    all: &[T],
    name: impl Fn(T) -> &'static str,
    s: &str,
    what: &str,
) -> Result<T> {
    let norm = s.replace('_', "-");
    all.iter()
        .copied()
        .find(|&m| name(m) == norm || name(m).replace('-', "") == norm)
        .ok_or_else(|| Error::param(format!("unknown {what} {s:?}")))
}

impl FromStr for ConfidenceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_name(&Self::ALL, Self::name, s, "confidence method")
    }
}

impl FromStr for GuidanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_name(&Self::ALL, Self::name, s, "guidance method")
    }
}

impl fmt::Display for ConfidenceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for GuidanceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// --- KL templates -----------------------------------------------------------

/// Per-class mean softmax vectors `d_c`, row-major `K x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTemplates {
    num_classes: usize,
    values: Vec<f32>,
}

impl KlTemplates {
    pub fn from_values(num_classes: usize, values: Vec<f32>) -> Result<Self> {
        if num_classes < 2 || values.len() != num_classes * num_classes {
            return Err(Error::shape(format!(
                "templates need {num_classes}x{num_classes} values, got {}",
                values.len()
            )));
        }
        for (c, row) in values.chunks_exact(num_classes).enumerate() {
            if row.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
                return Err(Error::invariant(format!(
                    "template {c} has a negative entry"
                )));
            }
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::invariant(format!("template {c} sums to {s}")));
            }
        }
        Ok(Self {
            num_classes,
            values,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn template(&self, class: usize) -> &[f32] {
        &self.values[class * self.num_classes..(class + 1) * self.num_classes]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Accumulates mean softmax per predicted (argmax) class.
#[derive(Debug, Clone)]
pub struct KlTemplateBuilder {
    num_classes: usize,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl KlTemplateBuilder {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            sums: vec![0.0; num_classes * num_classes],
            counts: vec![0; num_classes],
        }
    }

    pub fn add_pixel(&mut self, logits: &[f32]) -> Result<()> {
        if logits.len() != self.num_classes {
            return Err(Error::shape(format!(
                "pixel has {} logits, expected {}",
                logits.len(),
                self.num_classes
            )));
        }
        let log_p = log_softmax(logits);
        let c = argmax(logits);
        self.counts[c] += 1;
        for (s, lp) in self.sums[c * self.num_classes..].iter_mut().zip(&log_p) {
            *s += lp.exp();
        }
        Ok(())
    }

    pub fn add_map(&mut self, logits: &LogitMap) -> Result<()> {
        for px in logits.values().chunks_exact(logits.num_classes()) {
            self.add_pixel(px)?;
        }
        Ok(())
    }

    /// Adds only the pixels whose label is not 255.
    pub fn add_labeled(&mut self, logits: &LogitMap, labels: &LabelMask) -> Result<()> {
        if (labels.height(), labels.width()) != (logits.height(), logits.width()) {
            return Err(Error::shape("label mask does not match the logits"));
        }
        let px = logits.values().chunks_exact(logits.num_classes());
        for (l, &m) in px.zip(labels.values()) {
            if m != MASK_IGNORE {
                self.add_pixel(l)?;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &KlTemplateBuilder) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("merging template builders of different K"));
        }
        self.sums
            .iter_mut()
            .zip(&other.sums)
            .for_each(|(a, b)| *a += b);
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn finish(&self) -> Result<KlTemplates> {
        let k = self.num_classes;
        if self.counts.iter().all(|&c| c == 0) {
            return Err(Error::input("no pixels were added to the template builder"));
        }
        let mut values = Vec::with_capacity(k * k);
        for c in 0..k {
            if self.counts[c] == 0 {
                warn!("no training pixel predicts class {c}; using a uniform template");
                values.extend(std::iter::repeat_n((1.0 / k as f64) as f32, k));
            } else {
                let n = self.counts[c] as f64;
                values.extend(self.sums[c * k..(c + 1) * k].iter().map(|s| (s / n) as f32));
            }
        }
        KlTemplates::from_values(k, values)
    }
}

// --- confidence -------------------------------------------------------------

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Stabilized `ln(sum exp(l))`.
pub fn logsumexp(logits: &[f32]) -> f64 {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let s: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    max + s.ln()
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&x| x as f64 - lse).collect()
}

/// Confidence of a single logit vector; higher means more in-distribution.
pub fn pixel_confidence(
    logits: &[f32],
    method: ConfidenceMethod,
    templates: Option<&KlTemplates>,
) -> Result<f64> {
    Ok(match method {
        ConfidenceMethod::Msp => {
            let lse = logsumexp(logits);
            logits
                .iter()
                .map(|&x| (x as f64 - lse).exp())
                .fold(0.0, f64::max)
        }
        ConfidenceMethod::MaxLogit => logits
            .iter()
            .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64)),
        ConfidenceMethod::Energy => logsumexp(logits),
        ConfidenceMethod::Entropy => {
            let log_p = log_softmax(logits);
            let h: f64 = log_p.iter().map(|&lp| -lp.exp() * lp).sum();
            (logits.len() as f64).ln() - h
        }
        ConfidenceMethod::KlMatch => {
            let t = templates.ok_or_else(|| Error::input("kl-match requires KL templates"))?;
            if t.num_classes() != logits.len() {
                return Err(Error::shape(format!(
                    "templates cover {} classes, logits have {}",
                    t.num_classes(),
                    logits.len()
                )));
            }
            let log_p = log_softmax(logits);
            let min_kl = (0..t.num_classes())
                .map(|c| {
                    t.template(c)
                        .iter()
                        .zip(&log_p)
                        .filter(|(&d, _)| d > 0.0)
                        .map(|(&d, &lp)| {
                            let d = d as f64;
                            d * (d.ln() - lp)
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            -min_kl
        }
    })
}

/// Per-pixel confidence map, f32 `[H, W]`.
pub fn confidence_from_logits(
    logits: &LogitMap,
    method: ConfidenceMethod,
    templates: Option<&KlTemplates>,
) -> Result<Tensor> {
    if method == ConfidenceMethod::KlMatch && templates.is_none() {
        return Err(Error::input("kl-match requires KL templates"));
    }
    let k = logits.num_classes();
    let values: Vec<f32> = logits
        .values()
        .par_chunks_exact(k)
        .map(|px| pixel_confidence(px, method, templates).map(|c| c as f32))
        .collect::<Result<_>>()?;
    Tensor::from_f32(vec![logits.height(), logits.width()], values)
}

fn map_dims(t: &Tensor) -> Result<(usize, usize, &[f32])> {
    match (t.shape(), t.as_f32()) {
        ([h, w], Some(v)) => Ok((*h, *w, v)),
        _ => Err(Error::shape(format!(
            "expected f32 [H, W] map, got {:?} {:?}",
            t.dtype(),
            t.shape()
        ))),
    }
}

/// Mean pixel confidence of every superpixel.
pub fn aggregate_confidence(
    pixel_conf: &Tensor,
    partition: &SuperpixelPartition,
) -> Result<Vec<f64>> {
    let (h, w, v) = map_dims(pixel_conf)?;
    if (h, w) != (partition.height(), partition.width()) {
        return Err(Error::shape(format!(
            "confidence map {h}x{w} vs partition {}x{}",
            partition.height(),
            partition.width()
        )));
    }
    let mut sums = vec![0.0f64; partition.num_superpixels()];
    for (&l, &s) in partition.labels().iter().zip(v) {
        sums[l as usize] += s as f64;
    }
    Ok(sums
        .iter()
        .zip(partition.pixel_counts())
        .map(|(s, &n)| s / n as f64)
        .collect())
}

// --- calibration & fusion ---------------------------------------------------

/// Minimum training confidence per method, at superpixel and pixel level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub superpixel_min: BTreeMap<ConfidenceMethod, f64>,
    pub pixel_min: BTreeMap<ConfidenceMethod, f64>,
}

impl Calibration {
    pub fn observe_superpixels(&mut self, method: ConfidenceMethod, values: &[f64]) {
        observe(&mut self.superpixel_min, method, values.iter().copied());
    }

    pub fn observe_pixels(&mut self, method: ConfidenceMethod, map: &Tensor) {
        if let Some(v) = map.as_f32() {
            observe(&mut self.pixel_min, method, v.iter().map(|&x| x as f64));
        }
    }

    /// Like [`Calibration::observe_pixels`], skipping pixels labeled 255.
    pub fn observe_labeled_pixels(
        &mut self,
        method: ConfidenceMethod,
        map: &Tensor,
        labels: &LabelMask,
    ) {
        if let Some(v) = map.as_f32() {
            let kept = v
                .iter()
                .zip(labels.values())
                .filter(|(_, &m)| m != MASK_IGNORE)
                .map(|(&x, _)| x as f64);
            observe(&mut self.pixel_min, method, kept);
        }
    }

    pub fn merge(&mut self, other: &Calibration) {
        for (m, v) in &other.superpixel_min {
            observe(&mut self.superpixel_min, *m, std::iter::once(*v));
        }
        for (m, v) in &other.pixel_min {
            observe(&mut self.pixel_min, *m, std::iter::once(*v));
        }
    }
}

fn observe(
    table: &mut BTreeMap<ConfidenceMethod, f64>,
    method: ConfidenceMethod,
    values: impl Iterator<Item = f64>,
) {
    if let Some(min) = values.fold(None::<f64>, |m, x| Some(m.map_or(x, |m| m.min(x)))) {
        let slot = table.entry(method).or_insert(min);
        *slot = slot.min(min);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// `None` replaces the confidence term with a constant 1.
    pub confidence_method: Option<ConfidenceMethod>,
    pub guidance_method: GuidanceMethod,
    pub rectify_floor: f64,
    pub calibration_min: f64,
    pub k_guidance: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            confidence_method: Some(ConfidenceMethod::Energy),
            guidance_method: GuidanceMethod::WeightedLid,
            rectify_floor: 1e-6,
            calibration_min: 0.0,
            k_guidance: 400,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rectify_floor > 0.0) {
            return Err(Error::param("rectify_floor must be positive"));
        }
        if !self.calibration_min.is_finite() {
            return Err(Error::param("calibration_min must be finite"));
        }
        if self.k_guidance < 2 && self.guidance_method != GuidanceMethod::None {
            return Err(Error::param("k_guidance must be >= 2"));
        }
        Ok(())
    }
}

/// `max(s - S_min, 0) + floor`.
pub fn rectify(s: &[f64], config: &FusionConfig) -> Vec<f64> {
    s.iter()
        .map(|&x| (x - config.calibration_min).max(0.0) + config.rectify_floor)
        .collect()
}

/// Elementwise product of rectified confidence and guidance.
pub fn fuse(s_conf: &[f64], d_guid: &[f64]) -> Result<Vec<f64>> {
    if s_conf.len() != d_guid.len() {
        return Err(Error::shape(format!(
            "{} confidences vs {} guidance scores",
            s_conf.len(),
            d_guid.len()
        )));
    }
    Ok(s_conf.iter().zip(d_guid).map(|(s, d)| s * d).collect())
}

// --- guidance ---------------------------------------------------------------

/// A coreset prepared for repeated guidance queries.
#[derive(Debug, Clone)]
pub struct GuidanceIndex {
    method: GuidanceMethod,
    metric: Metric,
    pool: Matrix,
    floor: f64,
    lid: LidParams,
}

impl GuidanceIndex {
    pub fn new(coreset: &Coreset, method: GuidanceMethod, metric: Metric, floor: f64) -> Self {
        let raw = metric.prepare(coreset.embeddings());
        let pool = match method {
            GuidanceMethod::WeightedLid | GuidanceMethod::KnnDistance => {
                let mut m = raw;
                for (i, &w) in coreset.weights().iter().enumerate() {
                    m.row_mut(i).iter_mut().for_each(|x| *x *= w);
                }
                m
            }
            _ => raw,
        };
        Self {
            method,
            metric,
            pool,
            floor,
            lid: LidParams::default(),
        }
    }

    /// Overrides the distance floor and cap used by the LID estimator.
    pub fn with_lid_params(mut self, lid: LidParams) -> Self {
        self.lid = lid;
        self
    }

    pub fn pool(&self) -> &Matrix {
        &self.pool
    }

    pub fn score(&self, embeddings: &Matrix, k: usize) -> Result<Vec<f64>> {
        if self.method == GuidanceMethod::None {
            return Ok(vec![1.0; embeddings.rows()]);
        }
        if embeddings.cols() != self.pool.cols() {
            return Err(Error::shape(format!(
                "embeddings have dimension {}, coreset has {}",
                embeddings.cols(),
                self.pool.cols()
            )));
        }
        if self.pool.rows() < 2 {
            return Err(Error::input("guidance needs a coreset of at least 2 rows"));
        }
        if k < 2 {
            return Err(Error::param("guidance k must be >= 2"));
        }
        let k = if k > self.pool.rows() {
            warn!(
                "guidance k = {k} exceeds coreset size {}; clamping",
                self.pool.rows()
            );
            self.pool.rows()
        } else {
            k
        };
        let params = LidParams { k, ..self.lid };
        (0..embeddings.rows())
            .into_par_iter()
            .map(|i| {
                let q = self.metric.prepare_query(embeddings.row(i));
                let nn = knn_search(&q, &self.pool, k)?;
                match self.method {
                    GuidanceMethod::KnnDistance => {
                        let mean = nn.distances.iter().sum::<f64>() / nn.len() as f64;
                        Ok(1.0 / (self.floor + mean))
                    }
                    _ => lid_mle(&nn.distances, &params),
                }
            })
            .collect()
    }
}

/// Guidance score `D_l` for every superpixel embedding.
pub fn guidance_score(
    superpixel_embeddings: &Matrix,
    coreset: &Coreset,
    method: GuidanceMethod,
    k: usize,
) -> Result<Vec<f64>> {
    GuidanceIndex::new(
        coreset,
        method,
        Metric::Euclidean,
        FusionConfig::default().rectify_floor,
    )
    .score(superpixel_embeddings, k)
}

/// Negative distance to the k-th nearest raw coreset embedding.
pub fn knn_baseline(embeddings: &Matrix, coreset: &Coreset, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::param("k must be >= 1"));
    }
    let pool = coreset.embeddings();
    (0..embeddings.rows())
        .into_par_iter()
        .map(|i| {
            let nn = knn_search(embeddings.row(i), pool, k)?;
            Ok(-nn.distances[nn.len() - 1])
        })
        .collect()
}

/// Rectified confidence times the mean inner product with the k nearest
/// (Euclidean) raw coreset embeddings.
pub fn nnguide_baseline(
    s_rectified: &[f64],
    embeddings: &Matrix,
    coreset: &Coreset,
    k: usize,
) -> Result<Vec<f64>> {
    if s_rectified.len() != embeddings.rows() {
        return Err(Error::shape("one confidence per embedding required"));
    }
    if k == 0 {
        return Err(Error::param("k must be >= 1"));
    }
    let pool = coreset.embeddings();
    (0..embeddings.rows())
        .into_par_iter()
        .map(|i| {
            let z = embeddings.row(i);
            let nn = knn_search(z, pool, k)?;
            let g = nn
                .indices
                .iter()
                .map(|&t| {
                    z.iter()
                        .zip(pool.row(t))
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                })
                .sum::<f64>()
                / nn.len() as f64;
            Ok(s_rectified[i] * g)
        })
        .collect()
}

// --- maps -------------------------------------------------------------------

/// Paints every pixel with the score of its superpixel.
pub fn broadcast_to_pixels(
    per_superpixel: &[f64],
    partition: &SuperpixelPartition,
) -> Result<Tensor> {
    if per_superpixel.len() != partition.num_superpixels() {
        return Err(Error::shape(format!(
            "{} scores for {} superpixels",
            per_superpixel.len(),
            partition.num_superpixels()
        )));
    }
    let v = partition
        .labels()
        .iter()
        .map(|&l| per_superpixel[l as usize] as f32)
        .collect();
    Tensor::from_f32(vec![partition.height(), partition.width()], v)
}

/// ID (0) where `score >= tau`, OOD (1) elsewhere.
pub fn threshold_map(score_map: &Tensor, tau: f64) -> Result<LabelMask> {
    let (h, w, v) = map_dims(score_map)?;
    let mask = v
        .iter()
        .map(|&s| if s as f64 >= tau { MASK_ID } else { MASK_OOD })
        .collect();
    LabelMask::evaluation(Tensor::from_u8(vec![h, w], mask)?)
}

/// Scores of one image; `per_superpixel` is absent for pixel-level maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub per_superpixel: Option<Vec<f64>>,
    pub per_pixel: Tensor,
}
