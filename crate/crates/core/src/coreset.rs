//! Per-class geometrical coreset.
//!
//! Training superpixels are grouped by majority class. Within each class
//! pool, every embedding gets an LID estimate against the rest of the pool,
//! and the `m` embeddings with the lowest LID are kept together with their
//! LID as a weight. Sorting by `(LID, index)` and keeping a prefix minimizes
//! the total LID over all size-`m` subsets.
//!
//! Alternative selection strategies (random, most-confident, farthest-point)
//! change only which rows are kept; weights are always the in-pool LID.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lid::{batch_lid, squared_distance, LidParams, Metric};
use crate::matrix::Matrix;
use crate::scores::{Calibration, KlTemplates};
use crate::superpixel::SuperpixelPartition;
use crate::tensorio::{FeatureMap, LabelMask, MASK_IGNORE};

pub const SLCR_MAGIC: &[u8; 4] = b"SLCR";
pub const SLCR_VERSION: u16 = 1;

/// Class label of records built without ground truth.
pub const UNLABELED: i32 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelRecord {
    /// Index of the superpixel within its image's partition.
    pub superpixel: usize,
    pub embedding: Vec<f32>,
    pub class_label: i32,
    /// Fraction of labeled pixels that carry the majority class.
    pub purity: f64,
    /// Mean classifier confidence over the superpixel, when known.
    pub confidence: Option<f64>,
}

/// Averages feature cells per superpixel.
///
/// The partition is projected onto the (possibly coarser) feature grid: cell
/// `(i, j)` takes the label of the pixel at its center,
/// `(floor((i + 0.5) * H / Hf), floor((j + 0.5) * W / Wf))`.
/// Superpixels that cover no cell borrow the cell nearest their centroid.
/// With `train_labels`, each record gets the majority class (ignoring 255)
/// and its purity; superpixels made only of ignored pixels are dropped.
pub fn superpixel_embed(
    features: &FeatureMap,
    partition: &SuperpixelPartition,
    train_labels: Option<&LabelMask>,
) -> Result<Vec<SuperpixelRecord>> {
    let (h, w) = (partition.height(), partition.width());
    let (hf, wf, d) = (features.height(), features.width(), features.dim());
    if hf > h || wf > w {
        return Err(Error::shape(format!(
            "features {hf}x{wf} are finer than the {h}x{w} image"
        )));
    }
    let n = partition.num_superpixels();
    if n == 0 {
        return Err(Error::input("empty partition"));
    }

    let project = |i: usize, full: usize, coarse: usize| -> usize {
        (((i as f64 + 0.5) * full as f64 / coarse as f64) as usize).min(full - 1)
    };

    let mut sums = vec![0.0f64; n * d];
    let mut counts = vec![0usize; n];
    for i in 0..hf {
        let pr = project(i, h, hf);
        for j in 0..wf {
            let l = partition.label_at(pr, project(j, w, wf));
            counts[l] += 1;
            let acc = &mut sums[l * d..(l + 1) * d];
            for (a, &x) in acc.iter_mut().zip(features.cell(i, j)) {
                *a += x as f64;
            }
        }
    }

    let class_votes = match train_labels {
        Some(mask) => {
            if mask.height() != h || mask.width() != w {
                return Err(Error::shape(format!(
                    "label mask {}x{} does not match image {h}x{w}",
                    mask.height(),
                    mask.width()
                )));
            }
            let mut votes: Vec<BTreeMap<u8, usize>> = vec![BTreeMap::new(); n];
            for (&l, &c) in partition.labels().iter().zip(mask.values()) {
                if c != MASK_IGNORE {
                    *votes[l as usize].entry(c).or_default() += 1;
                }
            }
            Some(votes)
        }
        None => None,
    };

    let mut out = Vec::with_capacity(n);
    for l in 0..n {
        let embedding: Vec<f32> = if counts[l] > 0 {
            sums[l * d..(l + 1) * d]
                .iter()
                .map(|&s| (s / counts[l] as f64) as f32)
                .collect()
        } else {
            let (r, c) = partition.centroids()[l];
            let fi = ((r * hf as f64 / h as f64) as usize).min(hf - 1);
            let fj = ((c * wf as f64 / w as f64) as usize).min(wf - 1);
            features.cell(fi, fj).to_vec()
        };
        let (class_label, purity) = match &class_votes {
            None => (UNLABELED, 1.0),
            Some(votes) => {
                let total: usize = votes[l].values().sum();
                // BTreeMap iterates classes ascending, so ties keep the lower id.
                let best = votes[l]
                    .iter()
                    .fold(None::<(u8, usize)>, |acc, (&c, &k)| match acc {
                        Some((_, bk)) if bk >= k => acc,
                        _ => Some((c, k)),
                    });
                match best {
                    Some((c, k)) => (c as i32, k as f64 / total as f64),
                    None => {
                        debug!("superpixel {l} has only ignored pixels; dropping it");
                        continue;
                    }
                }
            }
        };
        out.push(SuperpixelRecord {
            superpixel: l,
            embedding,
            class_label,
            purity,
            confidence: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoresetStrategy {
    /// Lowest in-class LID.
    #[default]
    Lid,
    /// Uniform sample from the class pool.
    Random,
    /// Highest classifier confidence (energy) in the class pool.
    Energy,
    /// Greedy farthest-point selection seeded at the pool medoid.
    Diverse,
}

impl CoresetStrategy {
    pub const ALL: [CoresetStrategy; 4] = [
        CoresetStrategy::Lid,
        CoresetStrategy::Random,
        CoresetStrategy::Energy,
        CoresetStrategy::Diverse,
    ];

    pub fn code(self) -> u8 {
        match self {
            CoresetStrategy::Lid => 0,
            CoresetStrategy::Random => 1,
            CoresetStrategy::Energy => 2,
            CoresetStrategy::Diverse => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown coreset strategy code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            CoresetStrategy::Lid => "lid",
            CoresetStrategy::Random => "random",
            CoresetStrategy::Energy => "energy",
            CoresetStrategy::Diverse => "diverse",
        }
    }
}

impl fmt::Display for CoresetStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoresetStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::param(format!("unknown coreset strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoresetParams {
    /// Rows kept per class.
    pub m: usize,
    /// LID neighbor count within each class pool.
    pub k: usize,
    pub purity_threshold: f64,
    pub strategy: CoresetStrategy,
    pub seed: u64,
    pub metric: Metric,
    pub distance_floor: f64,
    pub lid_cap: f64,
}

impl Default for CoresetParams {
    fn default() -> Self {
        let lid = LidParams::default();
        Self {
            m: 400,
            k: 400,
            purity_threshold: 0.75,
            strategy: CoresetStrategy::Lid,
            seed: 0,
            metric: Metric::Euclidean,
            distance_floor: lid.distance_floor,
            lid_cap: lid.lid_cap,
        }
    }
}

impl CoresetParams {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::param("m must be >= 1"));
        }
        if !(self.purity_threshold > 0.0 && self.purity_threshold <= 1.0) {
            return Err(Error::param("purity_threshold must lie in (0, 1]"));
        }
        self.lid_params(self.k).validate()
    }

    fn lid_params(&self, k: usize) -> LidParams {
        LidParams {
            k,
            distance_floor: self.distance_floor,
            lid_cap: self.lid_cap,
        }
    }
}

/// Selected embeddings `Z'`, their LID weights `W'`, and class labels, with
/// rows grouped by ascending class.
#[derive(Debug, Clone, PartialEq)]
pub struct Coreset {
    num_classes: usize,
    k_used: usize,
    strategy: CoresetStrategy,
    class_labels: Vec<u32>,
    weights: Vec<f32>,
    embeddings: Matrix,
    templates: Option<KlTemplates>,
}

impl Coreset {
    pub fn new(
        num_classes: usize,
        k_used: usize,
        strategy: CoresetStrategy,
        class_labels: Vec<u32>,
        weights: Vec<f32>,
        embeddings: Matrix,
        templates: Option<KlTemplates>,
    ) -> Result<Self> {
        let c = Self {
            num_classes,
            k_used,
            strategy,
            class_labels,
            weights,
            embeddings,
            templates,
        };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let r = self.embeddings.rows();
        if r == 0 {
            return Err(Error::invariant("coreset has no rows"));
        }
        if self.class_labels.len() != r || self.weights.len() != r {
            return Err(Error::invariant(format!(
                "{r} rows but {} labels and {} weights",
                self.class_labels.len(),
                self.weights.len()
            )));
        }
        if self.num_classes == 0
            || self
                .class_labels
                .iter()
                .any(|&c| c as usize >= self.num_classes)
        {
            return Err(Error::invariant("class label outside [0, K)"));
        }
        if self.class_labels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invariant("rows are not grouped by class"));
        }
        if let Some(bad) = self.weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::invariant(format!("non-positive weight {bad}")));
        }
        if !self.embeddings.as_slice().iter().all(|x| x.is_finite()) {
            return Err(Error::invariant("non-finite embedding value"));
        }
        if let Some(t) = &self.templates {
            if t.num_classes() != self.num_classes {
                return Err(Error::invariant(format!(
                    "templates cover {} classes, coreset has {}",
                    t.num_classes(),
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn k_used(&self) -> usize {
        self.k_used
    }

    pub fn strategy(&self) -> CoresetStrategy {
        self.strategy
    }

    pub fn class_labels(&self) -> &[u32] {
        &self.class_labels
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn templates(&self) -> Option<&KlTemplates> {
        self.templates.as_ref()
    }

    pub fn set_templates(&mut self, templates: Option<KlTemplates>) -> Result<()> {
        self.templates = templates;
        self.validate()
    }

    /// Each row scaled by its weight: `{ w_t * z_t }`.
    pub fn weighted_embeddings(&self) -> Matrix {
        let mut m = self.embeddings.clone();
        for (i, &w) in self.weights.iter().enumerate() {
            m.row_mut(i).iter_mut().for_each(|x| *x *= w);
        }
        m
    }
}

/// Details of a build that are not persisted: for every kept row, the class
/// pool it came from and its index in the flattened record list.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    /// Class -> indices (into the flattened, purity-filtered record list).
    pub pools: BTreeMap<u32, Vec<usize>>,
    /// Class -> LID of every pool member, aligned with `pools`.
    pub pool_lids: BTreeMap<u32, Vec<f64>>,
    /// Class -> positions within the pool that were selected.
    pub selected: BTreeMap<u32, Vec<usize>>,
    pub skipped_classes: Vec<u32>,
}

/// Positions of the `m` smallest values, ordered by `(value, position)`.
pub fn select_lowest(values: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

fn select_random(n: usize, m: usize, seed: u64, class: u32) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    picked
}

fn select_most_confident(confidence: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidence.len()).collect();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// Greedy k-center: start at the medoid, then repeatedly add the point
/// farthest from everything chosen so far. Ties go to the lower index.
pub fn select_farthest_point(pool: &Matrix, m: usize) -> Vec<usize> {
    let n = pool.rows();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let medoid = (0..n)
        .map(|i| {
            let total: f64 = (0..n)
                .map(|j| squared_distance(pool.row(i), pool.row(j)).sqrt())
                .sum();
            (total, i)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, i)| i)
        .expect("non-empty pool");

    let mut chosen = vec![medoid];
    let mut nearest: Vec<f64> = (0..n)
        .map(|j| squared_distance(pool.row(medoid), pool.row(j)))
        .collect();
    while chosen.len() < m.min(n) {
        let mut best = None::<(f64, usize)>;
        for (j, &d) in nearest.iter().enumerate() {
            if chosen.contains(&j) {
                continue;
            }
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, j));
            }
        }
        let Some((_, next)) = best else { break };
        chosen.push(next);
        for (j, slot) in nearest.iter_mut().enumerate() {
            let d = squared_distance(pool.row(next), pool.row(j));
            if d < *slot {
                *slot = d;
            }
        }
    }
    chosen
}

/// Builds the coreset from per-image superpixel records.
pub fn build_coreset(images: &[Vec<SuperpixelRecord>], params: &CoresetParams) -> Result<Coreset> {
    build_coreset_with_report(images, params).map(|(c, _)| c)
}

pub fn build_coreset_with_report(
    images: &[Vec<SuperpixelRecord>],
    params: &CoresetParams,
) -> Result<(Coreset, BuildReport)> {
    params.validate()?;
    let all: Vec<&SuperpixelRecord> = images.iter().flatten().collect();
    if all.iter().any(|r| r.class_label < 0) {
        return Err(Error::input("coreset building needs labeled records"));
    }
    let records: Vec<&SuperpixelRecord> = all
        .into_iter()
        .filter(|r| r.purity >= params.purity_threshold)
        .collect();
    let dim = records
        .first()
        .map(|r| r.embedding.len())
        .ok_or_else(|| Error::input("no records pass the purity threshold"))?;
    if records.iter().any(|r| r.embedding.len() != dim) {
        return Err(Error::shape("records have differing embedding dimensions"));
    }
    let num_classes = records
        .iter()
        .map(|r| r.class_label as usize)
        .max()
        .unwrap_or(0)
        + 1;

    let mut pools: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        pools.entry(r.class_label as u32).or_default().push(i);
    }

    let mut report = BuildReport {
        pools: BTreeMap::new(),
        pool_lids: BTreeMap::new(),
        selected: BTreeMap::new(),
        skipped_classes: Vec::new(),
    };
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    let mut rows: Vec<&[f32]> = Vec::new();
    let mut k_used = 0;

    for (&class, members) in &pools {
        // Every member needs two other members to estimate its LID.
        if members.len() < 3 {
            warn!("class {class} has {} record(s); skipping", members.len());
            report.skipped_classes.push(class);
            continue;
        }
        let raw = Matrix::from_rows(
            &members
                .iter()
                .map(|&i| records[i].embedding.as_slice())
                .collect::<Vec<_>>(),
        )?;
        let pool = params.metric.prepare(&raw);
        let k = params.k.min(members.len() - 1);
        k_used = k_used.max(k);
        let lids = batch_lid(&pool, &pool, &params.lid_params(k), true)?;

        let m_eff = params.m.min(members.len());
        if m_eff < params.m {
            warn!(
                "class {class} pool has {} records; keeping all instead of m = {}",
                members.len(),
                params.m
            );
        }
        let picked = match params.strategy {
            CoresetStrategy::Lid => select_lowest(&lids, m_eff),
            CoresetStrategy::Random => select_random(members.len(), m_eff, params.seed, class),
            CoresetStrategy::Energy => {
                let conf: Vec<f64> = members
                    .iter()
                    .map(|&i| {
                        records[i].confidence.ok_or_else(|| {
                            Error::input("energy strategy needs per-record confidence")
                        })
                    })
                    .collect::<Result<_>>()?;
                select_most_confident(&conf, m_eff)
            }
            CoresetStrategy::Diverse => select_farthest_point(&pool, m_eff),
        };
        for &p in &picked {
            labels.push(class);
            weights.push(lids[p] as f32);
            rows.push(&records[members[p]].embedding);
        }
        report.pools.insert(class, members.clone());
        report.pool_lids.insert(class, lids);
        report.selected.insert(class, picked);
    }
    if rows.is_empty() {
        return Err(Error::input("no class has at least 3 records"));
    }
    let coreset = Coreset::new(
        num_classes,
        k_used,
        params.strategy,
        labels,
        weights,
        Matrix::from_rows(&rows)?,
        None,
    )?;
    Ok((coreset, report))
}

// --- persistence ------------------------------------------------------------

/// Writes the SLCR container; returns the byte count.
pub fn save_coreset<W: Write>(c: &Coreset, mut w: W) -> Result<usize> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SLCR_MAGIC);
    buf.extend_from_slice(&SLCR_VERSION.to_le_bytes());
    buf.push(c.strategy.code());
    buf.push(0);
    for v in [c.num_classes, c.len(), c.dim(), c.k_used] {
        let v = u32::try_from(v)
            .map_err(|_| Error::DimensionOverflow(format!("{v} does not fit in u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    c.class_labels
        .iter()
        .for_each(|l| buf.extend_from_slice(&l.to_le_bytes()));
    c.weights
        .iter()
        .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    c.embeddings
        .as_slice()
        .iter()
        .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    match &c.templates {
        None => buf.extend_from_slice(&0u32.to_le_bytes()),
        Some(t) => {
            buf.extend_from_slice(&1u32.to_le_bytes());
            t.values()
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(buf.len())
}

fn read_section<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    r.by_ref().take(n as u64).read_to_end(&mut v)?;
    if v.len() != n {
        return Err(Error::Format(format!(
            "truncated {what} section: expected {n} bytes, found {}",
            v.len()
        )));
    }
    Ok(v)
}

fn words(bytes: &[u8]) -> impl Iterator<Item = [u8; 4]> + '_ {
    bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]])
}

pub fn load_coreset<R: Read>(mut r: R) -> Result<Coreset> {
    let head = read_section(&mut r, 24, "header")?;
    if &head[0..4] != SLCR_MAGIC {
        return Err(Error::BadMagic {
            expected: "SLCR".into(),
            found: String::from_utf8_lossy(&head[0..4]).into_owned(),
        });
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != SLCR_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let strategy = CoresetStrategy::from_code(head[6])?;
    if head[7] != 0 {
        return Err(Error::Format("reserved byte must be 0".into()));
    }
    let fields: Vec<usize> = words(&head[8..24])
        .map(|b| u32::from_le_bytes(b) as usize)
        .collect();
    let (k, rows, dim, k_used) = (fields[0], fields[1], fields[2], fields[3]);
    let cells = rows
        .checked_mul(dim)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::DimensionOverflow("embedding section overflows".into()))?;

    let labels: Vec<u32> = words(&read_section(&mut r, rows * 4, "class label")?)
        .map(u32::from_le_bytes)
        .collect();
    let weights: Vec<f32> = words(&read_section(&mut r, rows * 4, "weight")?)
        .map(f32::from_le_bytes)
        .collect();
    let emb: Vec<f32> = words(&read_section(&mut r, cells, "embedding")?)
        .map(f32::from_le_bytes)
        .collect();
    let flag = u32::from_le_bytes(
        read_section(&mut r, 4, "template flag")?
            .try_into()
            .expect("4 bytes"),
    );
    let templates = match flag {
        0 => None,
        1 => {
            let n = k
                .checked_mul(k)
                .and_then(|x| x.checked_mul(4))
                .ok_or_else(|| Error::DimensionOverflow("template section overflows".into()))?;
            let vals: Vec<f32> = words(&read_section(&mut r, n, "template")?)
                .map(f32::from_le_bytes)
                .collect();
            Some(KlTemplates::from_values(k, vals).map_err(|e| Error::invariant(e.to_string()))?)
        }
        other => {
            return Err(Error::Format(format!(
                "template flag must be 0 or 1, got {other}"
            )))
        }
    };
    let embeddings = Matrix::new(rows, dim, emb).map_err(|e| Error::invariant(e.to_string()))?;
    Coreset::new(k, k_used, strategy, labels, weights, embeddings, templates)
}

/// Build-time settings persisted next to the binary coreset as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoresetMeta {
    pub params: CoresetParams,
    pub source: String,
    pub calibration: Calibration,
}
