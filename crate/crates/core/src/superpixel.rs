//! SLIC superpixels over CIELAB color.
//!
//! Centers start on a regular grid with spacing `S = sqrt(H*W / N)`, nudge to
//! the lowest-gradient pixel of their 3x3 neighborhood, then alternate
//! windowed assignment and mean updates. Pixel-to-center distance is
//!
//! ```text
//! D = sqrt(d_lab^2 + (d_xy / S)^2 * compactness^2)
//! ```
//!
//! with `S` fixed at the initial grid spacing. A final pass makes every region
//! 4-connected and folds undersized fragments into their largest neighbor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    /// Requested superpixel count is `floor(H*W / pixels_per_superpixel)`.
    pub pixels_per_superpixel: usize,
    pub compactness: f64,
    pub max_iterations: usize,
    /// Fragments smaller than this fraction of the expected area get merged.
    pub min_region_fraction: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            pixels_per_superpixel: 200,
            compactness: 10.0,
            max_iterations: 10,
            min_region_fraction: 0.25,
        }
    }
}

impl SlicParams {
    pub fn validate(&self) -> Result<()> {
        if self.pixels_per_superpixel == 0 {
            return Err(Error::param("pixels_per_superpixel must be >= 1"));
        }
        if !(self.compactness > 0.0 && self.compactness.is_finite()) {
            return Err(Error::param("compactness must be a positive real"));
        }
        if self.max_iterations == 0 {
            return Err(Error::param("max_iterations must be >= 1"));
        }
        if !(self.min_region_fraction > 0.0 && self.min_region_fraction <= 1.0) {
            return Err(Error::param("min_region_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Requested superpixel count for an image of `height * width` pixels.
    pub fn requested_count(&self, height: usize, width: usize) -> usize {
        (height * width / self.pixels_per_superpixel).max(1)
    }

    /// Initial grid spacing `S`.
    pub fn grid_spacing(&self, height: usize, width: usize) -> f64 {
        ((height * width) as f64 / self.requested_count(height, width) as f64).sqrt()
    }
}

/// A dense labeling of an image into superpixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelPartition {
    height: usize,
    width: usize,
    labels: Vec<i32>,
    pixel_counts: Vec<usize>,
    centroids: Vec<(f64, f64)>,
}

impl SuperpixelPartition {
    /// Validates that `labels` covers `[0, N)` densely and computes bookkeeping.
    pub fn from_labels(height: usize, width: usize, labels: Vec<i32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(format!(
                "label buffer of {} for a {height}x{width} image",
                labels.len()
            )));
        }
        let max = *labels.iter().max().expect("non-empty");
        if labels.iter().any(|&l| l < 0) {
            return Err(Error::input("negative superpixel label"));
        }
        let n = max as usize + 1;
        let mut counts = vec![0usize; n];
        let mut sums = vec![(0.0f64, 0.0f64); n];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            counts[l] += 1;
            sums[l].0 += (i / width) as f64;
            sums[l].1 += (i % width) as f64;
        }
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::input(format!(
                "superpixel labels are not dense: label {missing} unused"
            )));
        }
        let centroids = sums
            .iter()
            .zip(&counts)
            .map(|(&(r, c), &k)| (r / k as f64, c / k as f64))
            .collect();
        Ok(Self {
            height,
            width,
            labels,
            pixel_counts: counts,
            centroids,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match (t.shape(), t.as_i32()) {
            ([h, w], Some(v)) => Self::from_labels(*h, *w, v.to_vec()),
            _ => Err(Error::shape(format!(
                "label map must be i32 [H, W], got {:?} {:?}",
                t.dtype(),
                t.shape()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_i32(vec![self.height, self.width], self.labels.clone())
            .expect("partition shape is valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_superpixels(&self) -> usize {
        self.pixel_counts.len()
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn label_at(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col] as usize
    }

    pub fn pixel_counts(&self) -> &[usize] {
        &self.pixel_counts
    }

    /// Mean `(row, col)` of each superpixel.
    pub fn centroids(&self) -> &[(f64, f64)] {
        &self.centroids
    }

    /// True when every label's pixel set forms one 4-connected component.
    pub fn is_four_connected(&self) -> bool {
        let (comp, _) = label_components(self.height, self.width, &self.labels);
        let mut first = vec![u32::MAX; self.num_superpixels()];
        for (i, &l) in self.labels.iter().enumerate() {
            let f = &mut first[l as usize];
            if *f == u32::MAX {
                *f = comp[i];
            } else if *f != comp[i] {
                return false;
            }
        }
        true
    }
}

// --- color ------------------------------------------------------------------

const WHITE_D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];

fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn rgb_pixel_to_lab(lut: &[f64; 256], rgb: &[u8]) -> [f32; 3] {
    let (r, g, b) = (
        lut[rgb[0] as usize],
        lut[rgb[1] as usize],
        lut[rgb[2] as usize],
    );
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let fx = lab_f(x / WHITE_D65[0]);
    let fy = lab_f(y / WHITE_D65[1]);
    let fz = lab_f(z / WHITE_D65[2]);
    [
        (116.0 * fy - 16.0) as f32,
        (500.0 * (fx - fy)) as f32,
        (200.0 * (fy - fz)) as f32,
    ]
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, &[u8])> {
    match (image.shape(), image.as_u8()) {
        ([h, w, 3], Some(v)) => Ok((*h, *w, v)),
        _ => Err(Error::shape(format!(
            "expected u8 RGB image [H, W, 3], got {:?} {:?}",
            image.dtype(),
            image.shape()
        ))),
    }
}

fn srgb_lut() -> [f64; 256] {
    let mut lut = [0.0; 256];
    for (i, v) in lut.iter_mut().enumerate() {
        *v = srgb_to_linear(i as u8);
    }
    lut
}

fn lab_pixels(rgb: &[u8]) -> Vec<[f32; 3]> {
    let lut = srgb_lut();
    rgb.par_chunks_exact(3)
        .map(|px| rgb_pixel_to_lab(&lut, px))
        .collect()
}

/// Converts an sRGB image to CIELAB (D65), returning f32 `[H, W, 3]`.
pub fn rgb_to_lab(image: &Tensor) -> Result<Tensor> {
    let (h, w, rgb) = image_dims(image)?;
    let lab = lab_pixels(rgb);
    Tensor::from_f32(vec![h, w, 3], lab.into_iter().flatten().collect())
}

// --- SLIC -------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Center {
    lab: [f64; 3],
    row: f64,
    col: f64,
}

fn gradient(lab: &[[f32; 3]], h: usize, w: usize, r: usize, c: usize) -> f64 {
    let at = |r: usize, c: usize| lab[r * w + c];
    let sq =
        |a: [f32; 3], b: [f32; 3]| -> f64 { (0..3).map(|i| ((a[i] - b[i]) as f64).powi(2)).sum() };
    let dx = sq(at(r, (c + 1).min(w - 1)), at(r, c.saturating_sub(1)));
    let dy = sq(at((r + 1).min(h - 1), c), at(r.saturating_sub(1), c));
    dx + dy
}

fn initial_centers(lab: &[[f32; 3]], h: usize, w: usize, spacing: f64) -> Vec<Center> {
    let grid_rows = ((h as f64 / spacing).round() as usize).max(1);
    let grid_cols = ((w as f64 / spacing).round() as usize).max(1);
    let mut centers = Vec::with_capacity(grid_rows * grid_cols);
    for gr in 0..grid_rows {
        let r0 = (((gr as f64 + 0.5) * h as f64 / grid_rows as f64) as usize).min(h - 1);
        for gc in 0..grid_cols {
            let c0 = (((gc as f64 + 0.5) * w as f64 / grid_cols as f64) as usize).min(w - 1);
            let (mut best_r, mut best_c) = (r0, c0);
            let mut best_g = gradient(lab, h, w, r0, c0);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (r, c) = (r0 as i64 + dr, c0 as i64 + dc);
                    if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                        continue;
                    }
                    let g = gradient(lab, h, w, r as usize, c as usize);
                    if g < best_g {
                        best_g = g;
                        best_r = r as usize;
                        best_c = c as usize;
                    }
                }
            }
            let px = lab[best_r * w + best_c];
            centers.push(Center {
                lab: [px[0] as f64, px[1] as f64, px[2] as f64],
                row: best_r as f64,
                col: best_c as f64,
            });
        }
    }
    centers
}

/// One assignment sweep. Rows are independent; within a row centers are
/// visited in index order with a strict `<`, so ties go to the lower index.
fn assign(
    lab: &[[f32; 3]],
    h: usize,
    w: usize,
    centers: &[Center],
    spacing: f64,
    compactness: f64,
) -> Vec<i32> {
    let spatial = (compactness / spacing).powi(2);
    let windows: Vec<(i64, i64, usize, usize)> = centers
        .iter()
        .map(|c| {
            let r0 = (c.row - spacing).ceil().max(0.0) as i64;
            let r1 = (c.row + spacing).floor().min((h - 1) as f64) as i64;
            let c0 = (c.col - spacing).ceil().max(0.0) as usize;
            let c1 = (c.col + spacing).floor().min((w - 1) as f64).max(0.0) as usize;
            (r0, r1, c0, c1)
        })
        .collect();

    let mut labels = vec![-1i32; h * w];
    labels.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let mut best = vec![f64::INFINITY; w];
        let r = row as i64;
        for (k, (center, &(r0, r1, c0, c1))) in centers.iter().zip(&windows).enumerate() {
            if r < r0 || r > r1 || c0 > c1 {
                continue;
            }
            let dr = row as f64 - center.row;
            let base = dr * dr;
            for col in c0..=c1 {
                let px = lab[row * w + col];
                let dl = px[0] as f64 - center.lab[0];
                let da = px[1] as f64 - center.lab[1];
                let db = px[2] as f64 - center.lab[2];
                let dc = col as f64 - center.col;
                let d = dl * dl + da * da + db * db + (base + dc * dc) * spatial;
                if d < best[col] {
                    best[col] = d;
                    out[col] = k as i32;
                }
            }
        }
    });
    labels
}

fn update_centers(lab: &[[f32; 3]], w: usize, labels: &[i32], centers: &mut [Center]) {
    let mut sums = vec![[0.0f64; 6]; centers.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 {
            continue;
        }
        let s = &mut sums[l as usize];
        let px = lab[i];
        s[0] += px[0] as f64;
        s[1] += px[1] as f64;
        s[2] += px[2] as f64;
        s[3] += (i / w) as f64;
        s[4] += (i % w) as f64;
        s[5] += 1.0;
    }
    for (c, s) in centers.iter_mut().zip(&sums) {
        if s[5] > 0.0 {
            c.lab = [s[0] / s[5], s[1] / s[5], s[2] / s[5]];
            c.row = s[3] / s[5];
            c.col = s[4] / s[5];
        }
    }
}

/// Segments an RGB image (u8 `[H, W, 3]`) into superpixels.
pub fn slic_segment(image: &Tensor, params: &SlicParams) -> Result<SuperpixelPartition> {
    params.validate()?;
    let (h, w, rgb) = image_dims(image)?;
    if h * w < params.pixels_per_superpixel {
        return Err(Error::input(format!(
            "image of {} pixels is smaller than one superpixel ({})",
            h * w,
            params.pixels_per_superpixel
        )));
    }
    let lab = lab_pixels(rgb);
    let spacing = params.grid_spacing(h, w);
    let mut centers = initial_centers(&lab, h, w, spacing);

    let mut labels = Vec::new();
    for it in 0..params.max_iterations {
        labels = assign(&lab, h, w, &centers, spacing, params.compactness);
        if it + 1 < params.max_iterations {
            update_centers(&lab, w, &labels, &mut centers);
        }
    }

    let expected_area = (h * w) as f64 / params.requested_count(h, w) as f64;
    let threshold = params.min_region_fraction * expected_area;
    let labels = merge_components(h, w, &labels, threshold);
    SuperpixelPartition::from_labels(h, w, labels)
}

// --- connectivity -----------------------------------------------------------

/// 4-connected components of equal-label pixels, numbered in scan order.
fn label_components(h: usize, w: usize, labels: &[i32]) -> (Vec<u32>, Vec<usize>) {
    let mut comp = vec![u32::MAX; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let lbl = labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == u32::MAX && labels[q] == lbl {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Splits labels into 4-connected components, then folds components below
/// `threshold` pixels (and any negative "unassigned" component) into the
/// largest adjacent component until nothing changes. Output labels are dense
/// and numbered by first appearance in scan order.
fn merge_components(h: usize, w: usize, labels: &[i32], threshold: f64) -> Vec<i32> {
    let (comp, sizes) = label_components(h, w, labels);
    let n = sizes.len();
    let mut unassigned = vec![false; n];
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    for p in 0..h * w {
        let a = comp[p];
        if labels[p] < 0 {
            unassigned[a as usize] = true;
        }
        let (r, c) = (p / w, p % w);
        for q in [(c + 1 < w).then(|| p + 1), (r + 1 < h).then(|| p + w)]
            .into_iter()
            .flatten()
        {
            let b = comp[q];
            if a != b {
                adjacency[a as usize].push(b);
                adjacency[b as usize].push(a);
            }
        }
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
        adj.dedup();
    }

    let mut parent: Vec<u32> = (0..n as u32).collect();
    let mut size = sizes.clone();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by_key(|&c| (sizes[c as usize], c));

    loop {
        let mut merged = false;
        for &c in &order {
            let root = find(&mut parent, c);
            if root != c {
                continue;
            }
            let r = root as usize;
            if !unassigned[r] && (size[r] as f64) >= threshold {
                continue;
            }
            let neighbors = std::mem::take(&mut adjacency[r]);
            let mut roots: Vec<u32> = neighbors
                .iter()
                .map(|&b| find(&mut parent, b))
                .filter(|&b| b != root)
                .collect();
            roots.sort_unstable();
            roots.dedup();
            // Prefer assigned neighbors; largest wins, lower id on ties.
            let target = roots.iter().copied().max_by_key(|&b| {
                (
                    !unassigned[b as usize],
                    size[b as usize],
                    std::cmp::Reverse(b),
                )
            });
            match target {
                Some(t) => {
                    let t_us = t as usize;
                    parent[r] = t;
                    size[t_us] += size[r];
                    if !unassigned[r] {
                        unassigned[t_us] = false;
                    }
                    let mut moved = roots;
                    moved.retain(|&b| b != t);
                    adjacency[t_us].extend(moved);
                    merged = true;
                }
                None => adjacency[r] = neighbors,
            }
        }
        if !merged {
            break;
        }
    }

    let mut dense = vec![-1i32; n];
    let mut next = 0i32;
    let mut out = Vec::with_capacity(h * w);
    for &c in &comp {
        let root = find(&mut parent, c) as usize;
        if dense[root] < 0 {
            dense[root] = next;
            next += 1;
        }
        out.push(dense[root]);
    }
    out
}

/// Makes every region of `labels` 4-connected: components smaller than
/// `min_region_fraction * expected_area` are absorbed by their largest
/// 4-adjacent neighbor and labels are re-densified.
pub fn enforce_connectivity(
    labels: &Tensor,
    expected_area: f64,
    min_region_fraction: f64,
) -> Result<Tensor> {
    let (h, w, v) = match (labels.shape(), labels.as_i32()) {
        ([h, w], Some(v)) => (*h, *w, v),
        _ => {
            return Err(Error::shape(format!(
                "label map must be i32 [H, W], got {:?} {:?}",
                labels.dtype(),
                labels.shape()
            )))
        }
    };
    let out = merge_components(h, w, v, min_region_fraction * expected_area);
    Tensor::from_i32(vec![h, w], out)
}
