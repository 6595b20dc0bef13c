//! Synthetic fixtures with known intrinsic dimensionality.
//!
//! Class `y` lives on `c_y + B_y g + noise`, where `B_y` is an orthonormal
//! `D x d_y` basis and `g` is standard Gaussian, so its local ID is `d_y`.
//! Class centers sit at `rho * q_y` for orthonormal `q_y`, which puts every
//! pair exactly `cluster_separation` apart.
//!
//! A scene tiles the image into class rectangles and drops one OOD
//! rectangle on top. The layout is drawn on the feature grid, so every pixel
//! shares the class of the feature cell it falls in (pixel `r` lies in cell
//! `floor(r * Hf / H)`). Logits come from a fixed linear probe of the
//! features, shared by every scene of a spec, plus per-pixel noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensorio::{FeatureMap, LabelMask, LogitMap, Tensor, MASK_ID, MASK_IGNORE, MASK_OOD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    /// A separate cluster, `cluster_separation` away from every class.
    Far,
    /// A manifold centered between classes 0 and 1.
    Near,
    /// Full-rank Gaussian noise at the center of class 0.
    HighDim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(alias = "K")]
    pub num_classes: usize,
    pub intrinsic_dims: Vec<usize>,
    pub ambient_dim: usize,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    /// `[H, W]`.
    pub image_size: [usize; 2],
    pub ood_kind: OodKind,
    pub seed: u64,
    #[serde(default = "defaults::feature_stride")]
    pub feature_stride: usize,
    /// `[h, w]` of the OOD rectangle; a quarter of each side when absent.
    #[serde(default)]
    pub blob_size: Option<[usize; 2]>,
    #[serde(default = "defaults::color_noise")]
    pub color_noise: f64,
    #[serde(default = "defaults::logit_scale")]
    pub logit_scale: f64,
    #[serde(default = "defaults::logit_mix")]
    pub logit_mix: f64,
    #[serde(default = "defaults::logit_bias")]
    pub logit_bias: f64,
    #[serde(default = "defaults::logit_noise")]
    pub logit_noise: f64,
    #[serde(default = "defaults::high_dim_sigma")]
    pub high_dim_sigma: f64,
}

mod defaults {
    pub fn feature_stride() -> usize {
        4
    }
    pub fn color_noise() -> f64 {
        6.0
    }
    pub fn logit_scale() -> f64 {
        8.0
    }
    pub fn logit_mix() -> f64 {
        0.5
    }
    pub fn logit_bias() -> f64 {
        0.25
    }
    pub fn logit_noise() -> f64 {
        1.5
    }
    pub fn high_dim_sigma() -> f64 {
        1.0
    }
}

impl SynthSpec {
    /// `K` classes of equal intrinsic dimension with the default extras.
    pub fn new(
        num_classes: usize,
        intrinsic_dim: usize,
        ambient_dim: usize,
        cluster_separation: f64,
        image_size: [usize; 2],
        ood_kind: OodKind,
        seed: u64,
    ) -> Self {
        Self {
            num_classes,
            intrinsic_dims: vec![intrinsic_dim; num_classes],
            ambient_dim,
            cluster_separation,
            noise_sigma: 0.01,
            image_size,
            ood_kind,
            seed,
            feature_stride: defaults::feature_stride(),
            blob_size: None,
            color_noise: defaults::color_noise(),
            logit_scale: defaults::logit_scale(),
            logit_mix: defaults::logit_mix(),
            logit_bias: defaults::logit_bias(),
            logit_noise: defaults::logit_noise(),
            high_dim_sigma: defaults::high_dim_sigma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.ambient_dim;
        if self.num_classes == 0 || self.intrinsic_dims.len() != self.num_classes {
            return Err(Error::param(format!(
                "need one intrinsic dimension per class ({} classes, {} dims)",
                self.num_classes,
                self.intrinsic_dims.len()
            )));
        }
        if let Some(&bad) = self.intrinsic_dims.iter().find(|&&dy| dy == 0 || dy > d) {
            return Err(Error::param(format!(
                "intrinsic dimension {bad} outside [1, {d}]"
            )));
        }
        if self.num_classes + 1 > d {
            return Err(Error::param(format!(
                "{} classes plus an OOD direction need ambient_dim > {}",
                self.num_classes, self.num_classes
            )));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::param("cluster_separation must be positive"));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("color_noise", self.color_noise),
            ("logit_mix", self.logit_mix),
            ("logit_bias", self.logit_bias),
            ("logit_noise", self.logit_noise),
            ("high_dim_sigma", self.high_dim_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be non-negative")));
            }
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::param("logit_scale must be positive"));
        }
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(Error::param(format!("image size {h}x{w} out of range")));
        }
        if self.feature_stride == 0 {
            return Err(Error::param("feature_stride must be >= 1"));
        }
        let [bh, bw] = self.blob();
        if bh == 0 || bw == 0 || bh > h || bw > w {
            return Err(Error::param(format!(
                "OOD blob {bh}x{bw} does not fit in the {h}x{w} image"
            )));
        }
        Ok(())
    }

    fn blob(&self) -> [usize; 2] {
        let [h, w] = self.image_size;
        self.blob_size.unwrap_or([(h / 4).max(1), (w / 4).max(1)])
    }

    fn feature_size(&self) -> [usize; 2] {
        let [h, w] = self.image_size;
        [
            h.div_ceil(self.feature_stride),
            w.div_ceil(self.feature_stride),
        ]
    }
}

// Stream layout: kind in the top byte, then scene index, attempt, and row.
const WORLD: u64 = 1;
const MANIFOLD: u64 = 2;
const LAYOUT: u64 = 3;
const ROW: u64 = 4;
const PIXEL_ROW: u64 = 5;

fn rng_for(seed: u64, kind: u64, index: u64, attempt: u64, row: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 56) | ((index & 0xFFFF_FFFF) << 24) | ((attempt & 0xFF) << 16) | row);
    rng
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `n` orthonormal vectors in `R^d` from Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut impl Rng, d: usize, n: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        // Two passes keep the basis orthogonal to machine precision.
        for _ in 0..2 {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

/// Geometry and classifier shared by every scene of a spec.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    spec: SynthSpec,
    centers: Vec<Vec<f64>>,
    bases: Vec<Vec<Vec<f64>>>,
    ood_center: Vec<f64>,
    ood_basis: Vec<Vec<f64>>,
    /// Row-major `K x D`.
    probe: Vec<f64>,
    bias: Vec<f64>,
}

impl SynthWorld {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        // The probe must classify clean manifold samples; redraw it otherwise.
        for attempt in 0..16 {
            let world = Self::draw(spec, attempt);
            if spec.num_classes == 1 || world.validation_accuracy() >= 0.97 {
                return Ok(world);
            }
        }
        Err(Error::input(
            "could not draw a linear probe reaching 97% accuracy",
        ))
    }

    fn draw(spec: &SynthSpec, attempt: u64) -> Self {
        let (k, d) = (spec.num_classes, spec.ambient_dim);
        let mut rng = rng_for(spec.seed, WORLD, 0, attempt, 0);
        let rho = spec.cluster_separation / std::f64::consts::SQRT_2;
        let dirs = orthonormal(&mut rng, d, k + 1);
        let centers: Vec<Vec<f64>> = dirs[..k]
            .iter()
            .map(|q| q.iter().map(|x| x * rho).collect())
            .collect();
        let bases = spec
            .intrinsic_dims
            .iter()
            .map(|&dy| orthonormal(&mut rng, d, dy))
            .collect();
        let d_ood = spec.intrinsic_dims.iter().copied().max().unwrap_or(1);
        let ood_basis = orthonormal(&mut rng, d, d_ood);
        let ood_center = match spec.ood_kind {
            OodKind::Far => dirs[k].iter().map(|x| x * rho).collect(),
            OodKind::Near if k >= 2 => centers[0]
                .iter()
                .zip(&centers[1])
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
            OodKind::Near | OodKind::HighDim => centers[0].clone(),
        };
        let mut probe = Vec::with_capacity(k * d);
        for q in &dirs[..k] {
            let r = &orthonormal(&mut rng, d, 1)[0];
            probe.extend(
                q.iter()
                    .zip(r)
                    .map(|(a, b)| (spec.logit_scale * a + spec.logit_mix * b) / rho),
            );
        }
        let bias = (0..k)
            .map(|_| spec.logit_bias * gaussian(&mut rng))
            .collect();
        Self {
            spec: spec.clone(),
            centers,
            bases,
            ood_center,
            ood_basis,
            probe,
            bias,
        }
    }

    fn validation_accuracy(&self) -> f64 {
        let mut rng = rng_for(self.spec.seed, WORLD, 1, 0, 0);
        let n = 256;
        let mut hits = 0;
        for y in 0..self.spec.num_classes {
            for _ in 0..n {
                let z = self.sample_class(&mut rng, y);
                let l = self.logits(&z, &mut rng);
                hits += (argmax(&l) == y) as usize;
            }
        }
        hits as f64 / (n * self.spec.num_classes) as f64
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn center(&self, class: usize) -> &[f64] {
        &self.centers[class]
    }

    pub fn ood_center(&self) -> &[f64] {
        &self.ood_center
    }

    fn on_manifold(&self, rng: &mut impl Rng, center: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
        let mut z = center.to_vec();
        for b in basis {
            let g = gaussian(rng);
            z.iter_mut().zip(b).for_each(|(a, x)| *a += g * x);
        }
        if self.spec.noise_sigma > 0.0 {
            z.iter_mut()
                .for_each(|a| *a += self.spec.noise_sigma * gaussian(rng));
        }
        z
    }

    fn sample_class(&self, rng: &mut impl Rng, class: usize) -> Vec<f64> {
        self.on_manifold(rng, &self.centers[class], &self.bases[class])
    }

    fn sample_ood(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.spec.ood_kind {
            OodKind::HighDim => self
                .ood_center
                .iter()
                .map(|c| c + self.spec.high_dim_sigma * gaussian(rng))
                .collect(),
            _ => self.on_manifold(rng, &self.ood_center, &self.ood_basis),
        }
    }

    /// Probe logits of a feature vector with per-class Gaussian noise.
    fn logits(&self, z: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let d = self.spec.ambient_dim;
        self.probe
            .chunks_exact(d)
            .zip(&self.bias)
            .map(|(w, b)| {
                let clean: f64 = w.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + b;
                clean + self.spec.logit_noise * gaussian(rng)
            })
            .collect()
    }

    /// `n` samples of class `class`, one per row.
    pub fn manifold_samples(&self, class: usize, n: usize) -> Result<Matrix> {
        if class >= self.spec.num_classes {
            return Err(Error::param(format!("class {class} out of range")));
        }
        let mut rng = rng_for(self.spec.seed, MANIFOLD, class as u64, 0, 0);
        let mut data = Vec::with_capacity(n * self.spec.ambient_dim);
        for _ in 0..n {
            data.extend(
                self.sample_class(&mut rng, class)
                    .into_iter()
                    .map(|x| x as f32),
            );
        }
        Matrix::new(n, self.spec.ambient_dim, data)
    }

    /// Scene `index`; noise is redrawn until the probe gets 95% of ID pixels
    /// right.
    pub fn scene(&self, index: u64) -> Result<Scene> {
        let mut last = 0.0;
        for attempt in 0..32 {
            let scene = self.draw_scene(index, attempt)?;
            if scene.accuracy >= 0.95 {
                return Ok(scene);
            }
            last = scene.accuracy;
        }
        Err(Error::input(format!(
            "scene {index}: logit accuracy {last:.3} stays below 0.95"
        )))
    }

    fn draw_scene(&self, index: u64, attempt: u64) -> Result<Scene> {
        let spec = &self.spec;
        let [h, w] = spec.image_size;
        let [hf, wf] = spec.feature_size();
        let (k, d) = (spec.num_classes, spec.ambient_dim);
        let mut rng = rng_for(spec.seed, LAYOUT, index, attempt, 0);

        // Class rectangles on a near-square grid of cells, shuffled per scene.
        let cols = (k as f64).sqrt().ceil() as usize;
        let rows = k.div_ceil(cols);
        let mut order: Vec<usize> = (0..rows * cols).map(|i| i % k).collect();
        order.shuffle(&mut rng);
        let [bh, bw] = spec.blob();
        let bh = (bh * hf).div_ceil(h).clamp(1, hf);
        let bw = (bw * wf).div_ceil(w).clamp(1, wf);
        let (b0, b1) = (rng.random_range(0..=hf - bh), rng.random_range(0..=wf - bw));
        // `None` marks OOD cells.
        let cell_class = |i: usize, j: usize| -> Option<usize> {
            if (b0..b0 + bh).contains(&i) && (b1..b1 + bw).contains(&j) {
                None
            } else {
                Some(order[(i * rows / hf) * cols + j * cols / wf])
            }
        };

        // Per-cell features and clean logits, one substream per feature row.
        let cells: Vec<(Vec<f32>, Vec<f64>)> = (0..hf)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng_for(spec.seed, ROW, index, attempt, i as u64);
                let mut feats = Vec::with_capacity(wf * d);
                let mut logits = Vec::with_capacity(wf * k);
                for j in 0..wf {
                    let z = match cell_class(i, j) {
                        None => self.sample_ood(&mut rng),
                        Some(y) => self.sample_class(&mut rng, y),
                    };
                    let clean: Vec<f64> = self
                        .probe
                        .chunks_exact(d)
                        .zip(&self.bias)
                        .map(|(p, b)| p.iter().zip(&z).map(|(a, x)| a * x).sum::<f64>() + b)
                        .collect();
                    feats.extend(z.iter().map(|&x| x as f32));
                    logits.extend(clean);
                }
                (feats, logits)
            })
            .collect();
        let features: Vec<f32> = cells.iter().flat_map(|c| c.0.iter().copied()).collect();
        let cell_logits: Vec<f64> = cells.into_iter().flat_map(|c| c.1).collect();

        // Pixels: colors, masks, and noisy logits, again one stream per row.
        let rows_out: Vec<(Vec<u8>, Vec<u8>, Vec<u8>, Vec<f32>, usize, usize)> = (0..h)
            .into_par_iter()
            .map(|r| {
                let mut rng = rng_for(spec.seed, PIXEL_ROW, index, attempt, r as u64);
                let fi = r * hf / h;
                let mut rgb = Vec::with_capacity(w * 3);
                let mut train = Vec::with_capacity(w);
                let mut ood = Vec::with_capacity(w);
                let mut logits = Vec::with_capacity(w * k);
                let (mut n_id, mut hits) = (0, 0);
                for c in 0..w {
                    let fj = c * wf / w;
                    let base = &cell_logits[(fi * wf + fj) * k..(fi * wf + fj + 1) * k];
                    let l: Vec<f64> = base
                        .iter()
                        .map(|x| x + spec.logit_noise * gaussian(&mut rng))
                        .collect();
                    let color = if let Some(y) = cell_class(fi, fj) {
                        train.push(y as u8);
                        ood.push(MASK_ID);
                        n_id += 1;
                        hits += (argmax(&l) == y) as usize;
                        class_color(y)
                    } else {
                        train.push(MASK_IGNORE);
                        ood.push(MASK_OOD);
                        OOD_COLOR
                    };
                    for ch in color {
                        let jitter = if spec.color_noise > 0.0 {
                            rng.random_range(-spec.color_noise..=spec.color_noise)
                        } else {
                            0.0
                        };
                        rgb.push((ch as f64 + jitter).round().clamp(0.0, 255.0) as u8);
                    }
                    logits.extend(l.into_iter().map(|x| x as f32));
                }
                (rgb, train, ood, logits, n_id, hits)
            })
            .collect();

        let mut rgb = Vec::with_capacity(h * w * 3);
        let mut train = Vec::with_capacity(h * w);
        let mut ood = Vec::with_capacity(h * w);
        let mut logits = Vec::with_capacity(h * w * k);
        let (mut n_id, mut hits) = (0usize, 0usize);
        for (a, b, c, l, n, t) in rows_out {
            rgb.extend(a);
            train.extend(b);
            ood.extend(c);
            logits.extend(l);
            n_id += n;
            hits += t;
        }
        let accuracy = if n_id == 0 {
            1.0
        } else {
            hits as f64 / n_id as f64
        };
        let logits = if k >= 2 {
            Some(LogitMap::new(Tensor::from_f32(vec![h, w, k], logits)?)?)
        } else {
            None
        };
        Ok(Scene {
            image: Tensor::from_u8(vec![h, w, 3], rgb)?,
            features: FeatureMap::new(Tensor::from_f32(vec![hf, wf, d], features)?)?,
            logits,
            train_labels: LabelMask::training(Tensor::from_u8(vec![h, w], train)?, k)?,
            ood_mask: LabelMask::evaluation(Tensor::from_u8(vec![h, w], ood)?)?,
            accuracy,
            attempt,
        })
    }
}

const OOD_COLOR: [u8; 3] = [245, 245, 240];

fn class_color(y: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [190, 50, 50],
        [50, 150, 60],
        [50, 80, 190],
        [200, 180, 40],
        [140, 60, 170],
        [40, 170, 170],
        [220, 120, 30],
        [90, 90, 90],
    ];
    let base = PALETTE[y % PALETTE.len()];
    // Later cycles are darkened so that every class keeps a distinct color.
    let shade = 1.0 - 0.15 * (y / PALETTE.len()) as f64;
    base.map(|c| (c as f64 * shade.max(0.2)) as u8)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One synthetic image and its tensors.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor,
    pub features: FeatureMap,
    /// Absent when the spec has a single class.
    pub logits: Option<LogitMap>,
    /// Class per pixel, 255 over the OOD rectangle.
    pub train_labels: LabelMask,
    /// 1 over the OOD rectangle, 0 elsewhere.
    pub ood_mask: LabelMask,
    /// Fraction of ID pixels whose logit argmax is their class.
    pub accuracy: f64,
    /// Noise redraws needed to reach the accuracy floor.
    pub attempt: u64,
}

/// `n` samples of class `class` under `spec`.
pub fn make_manifold_samples(spec: &SynthSpec, class: usize, n: usize) -> Result<Matrix> {
    SynthWorld::new(spec)?.manifold_samples(class, n)
}

/// Scene 0 of `spec`.
pub fn make_scene(spec: &SynthSpec) -> Result<Scene> {
    SynthWorld::new(spec)?.scene(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lid::{batch_lid, squared_distance, LidParams};
    use crate::tensorio::MaskKind;
    use nalgebra::DMatrix;

    fn spec(kind: OodKind) -> SynthSpec {
        SynthSpec::new(4, 6, 64, 100.0, [48, 64], kind, 3)
    }

    fn centered_rank(m: &Matrix) -> usize {
        let (n, d) = (m.rows(), m.cols());
        let mut mean = vec![0.0f64; d];
        for r in m.iter_rows() {
            mean.iter_mut()
                .zip(r)
                .for_each(|(a, &x)| *a += x as f64 / n as f64);
        }
        let a = DMatrix::from_fn(n, d, |i, j| m.row(i)[j] as f64 - mean[j]);
        let sv = a.singular_values();
        let top = sv.max();
        sv.iter().filter(|&&s| s > 1e-6 * top.max(1.0)).count()
    }

    #[test]
    fn noiseless_manifold_rank() {
        let mut s = SynthSpec::new(1, 2, 16, 10.0, [8, 8], OodKind::Far, 5);
        s.noise_sigma = 0.0;
        let m = make_manifold_samples(&s, 0, 200).unwrap();
        assert_eq!(centered_rank(&m), 2);
        s.intrinsic_dims = vec![5];
        assert_eq!(
            centered_rank(&make_manifold_samples(&s, 0, 200).unwrap()),
            5
        );
    }

    #[test]
    fn deterministic() {
        let s = spec(OodKind::Far);
        assert_eq!(
            make_manifold_samples(&s, 2, 50).unwrap(),
            make_manifold_samples(&s, 2, 50).unwrap()
        );
        let a = make_scene(&s).unwrap();
        let b = make_scene(&s).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.features.tensor(), b.features.tensor());
        assert_eq!(a.logits.unwrap().tensor(), b.logits.unwrap().tensor());
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(make_scene(&other).unwrap().image, a.image);
    }

    #[test]
    fn centers_are_separated() {
        let w = SynthWorld::new(&spec(OodKind::Far)).unwrap();
        for a in 0..4 {
            for b in a + 1..4 {
                let d: f64 = w
                    .center(a)
                    .iter()
                    .zip(w.center(b))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!((d.sqrt() - 100.0).abs() < 1e-9);
            }
            let d: f64 = w
                .center(a)
                .iter()
                .zip(w.ood_center())
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            assert!((d.sqrt() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn scene_masks_follow_geometry() {
        let sc = make_scene(&spec(OodKind::Far)).unwrap();
        assert!(sc.accuracy >= 0.95, "{}", sc.accuracy);
        assert_eq!(
            sc.train_labels.kind(),
            MaskKind::Training { num_classes: 4 }
        );
        let blob = sc
            .ood_mask
            .values()
            .iter()
            .filter(|&&v| v == MASK_OOD)
            .count();
        assert_eq!(blob, 12 * 16);
        for (&t, &o) in sc.train_labels.values().iter().zip(sc.ood_mask.values()) {
            assert!(o == MASK_ID || o == MASK_OOD);
            assert_eq!(t == MASK_IGNORE, o == MASK_OOD);
            assert!(t < 4 || t == MASK_IGNORE);
        }
        assert_eq!(sc.features.height(), 12);
        assert_eq!(sc.features.width(), 16);
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn far_ood_distance_ratio() {
        let s = spec(OodKind::Far);
        let w = SynthWorld::new(&s).unwrap();
        let sc = w.scene(0).unwrap();
        let (hf, wf) = (sc.features.height(), sc.features.width());
        let [h, wd] = s.image_size;
        let mut ood_d = Vec::new();
        let mut by_class: Vec<Vec<&[f32]>> = vec![Vec::new(); 4];
        for i in 0..hf {
            for j in 0..wf {
                let (pr, pc) = (i * h / hf, j * wd / wf);
                let z = sc.features.cell(i, j);
                match sc.train_labels.values()[pr * wd + pc] {
                    MASK_IGNORE => {
                        for y in 0..4 {
                            let c: Vec<f32> = w.center(y).iter().map(|&x| x as f32).collect();
                            ood_d.push(squared_distance(z, &c).sqrt());
                        }
                    }
                    y => by_class[y as usize].push(z),
                }
            }
        }
        let mut intra = Vec::new();
        for pts in &by_class {
            for a in 0..pts.len().min(60) {
                for b in a + 1..pts.len().min(60) {
                    intra.push(squared_distance(pts[a], pts[b]).sqrt());
                }
            }
        }
        assert!(median(ood_d) >= 10.0 * median(intra));
    }

    #[test]
    fn high_dim_ood_has_higher_lid() {
        let s = spec(OodKind::HighDim);
        let w = SynthWorld::new(&s).unwrap();
        let id = w.manifold_samples(0, 600).unwrap();
        let mut rng = rng_for(9, ROW, 0, 0, 0);
        let ood: Vec<f32> = (0..600)
            .flat_map(|_| w.sample_ood(&mut rng).into_iter().map(|x| x as f32))
            .collect();
        let ood = Matrix::new(600, 64, ood).unwrap();
        let p = LidParams::with_k(50);
        let lid_id = median(batch_lid(&id, &id, &p, true).unwrap());
        let lid_ood = median(batch_lid(&ood, &ood, &p, true).unwrap());
        assert!(lid_ood > lid_id, "{lid_ood} vs {lid_id}");
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(OodKind::Far);
        s.intrinsic_dims[1] = 65;
        assert!(make_manifold_samples(&s, 0, 1).is_err());
        let mut s = spec(OodKind::Far);
        s.blob_size = Some([49, 10]);
        assert!(make_scene(&s).is_err());
        let mut s = spec(OodKind::Far);
        s.cluster_separation = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = spec(OodKind::Near);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<SynthSpec>(&j).unwrap(), s);
        let minimal = r#"{"K": 2, "intrinsic_dims": [3, 3], "ambient_dim": 8,
            "cluster_separation": 10, "noise_sigma": 0.0, "image_size": [16, 16],
            "ood_kind": "high_dim", "seed": 1}"#;
        let m: SynthSpec = serde_json::from_str(minimal).unwrap();
        assert_eq!(m.feature_stride, 4);
        assert!(serde_json::from_str::<SynthSpec>(&minimal.replace("seed", "sede")).is_err());
    }
}
