//! Exact k-nearest-neighbor search and the maximum-likelihood estimator of
//! local intrinsic dimensionality:
//!
//! ```text
//! LID(x) = -( (1/k) * sum_i ln(r_i / r_k) )^(-1)
//! ```
//!
//! where `r_1 <= ... <= r_k` are the distances from `x` to its `k` nearest
//! neighbors. Distances are floored at `distance_floor` before the log, and a
//! non-negative mean log-ratio (all distances equal) yields `lid_cap`.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidParams {
    pub k: usize,
    pub distance_floor: f64,
    pub lid_cap: f64,
}

impl Default for LidParams {
    fn default() -> Self {
        Self {
            k: 400,
            distance_floor: 1e-12,
            lid_cap: 1e6,
        }
    }
}

impl LidParams {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::param(format!("k must be >= 2, got {}", self.k)));
        }
        if !(self.distance_floor > 0.0) {
            return Err(Error::param("distance floor must be positive"));
        }
        if !(self.lid_cap > 0.0) {
            return Err(Error::param("lid cap must be positive"));
        }
        Ok(())
    }
}

/// Distance between embeddings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    /// Euclidean distance between L2-normalized vectors.
    Cosine,
}

impl Metric {
    /// Applies the metric's normalization to a whole pool, so that
    /// Euclidean search over the result implements the metric.
    pub fn prepare(self, m: &Matrix) -> Matrix {
        match self {
            Metric::Euclidean => m.clone(),
            Metric::Cosine => {
                let mut out = m.clone();
                for i in 0..out.rows() {
                    normalize(out.row_mut(i));
                }
                out
            }
        }
    }

    pub fn prepare_query(self, q: &[f32]) -> Vec<f32> {
        let mut v = q.to_vec();
        if self == Metric::Cosine {
            normalize(&mut v);
        }
        v
    }
}

fn normalize(v: &mut [f32]) {
    let n = v
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborResult {
    /// Ascending Euclidean distances.
    pub distances: Vec<f64>,
    pub indices: Vec<usize>,
}

impl NeighborResult {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

/// Squared Euclidean distance with f64 accumulation over four lanes.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, ra) = a.split_at(a.len() / 4 * 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        for l in 0..4 {
            let d = x[l] as f64 - y[l] as f64;
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        let d = *x as f64 - *y as f64;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// k nearest pool rows to `query`, skipping row `exclude` if given.
pub fn knn_search_excluding(
    query: &[f32],
    pool: &Matrix,
    k: usize,
    exclude: Option<usize>,
) -> Result<NeighborResult> {
    if pool.is_empty() {
        return Err(Error::input("empty neighbor pool"));
    }
    if query.len() != pool.cols() {
        return Err(Error::shape(format!(
            "query has dimension {}, pool has {}",
            query.len(),
            pool.cols()
        )));
    }
    if k == 0 {
        return Err(Error::param("k must be >= 1"));
    }
    let mut cand: Vec<(f64, usize)> = pool
        .iter_rows()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, row)| (squared_distance(query, row), i))
        .collect();
    let k = k.min(cand.len());
    if k == 0 {
        return Err(Error::input("no candidates left after exclusion"));
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, by_distance_then_index);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_distance_then_index);
    Ok(NeighborResult {
        distances: cand.iter().map(|&(d, _)| d.sqrt()).collect(),
        indices: cand.iter().map(|&(_, i)| i).collect(),
    })
}

/// The `min(k, M)` nearest rows of `pool` to `query`, ascending by distance,
/// ties broken by lower row index.
pub fn knn_search(query: &[f32], pool: &Matrix, k: usize) -> Result<NeighborResult> {
    knn_search_excluding(query, pool, k, None)
}

/// Maximum-likelihood LID from ascending neighbor distances. Uses every
/// distance given, so `k = distances.len()`.
pub fn lid_mle(distances: &[f64], params: &LidParams) -> Result<f64> {
    if distances.len() < 2 {
        return Err(Error::param(format!(
            "LID needs at least 2 distances, got {}",
            distances.len()
        )));
    }
    if distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::input("distances must be finite and non-negative"));
    }
    if distances.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::input("distances must be sorted ascending"));
    }
    let eps = params.distance_floor;
    let rk = distances[distances.len() - 1].max(eps);
    let sum: f64 = distances.iter().map(|&r| (r.max(eps) / rk).ln()).sum();
    let mean = sum / distances.len() as f64;
    if mean >= 0.0 {
        return Ok(params.lid_cap);
    }
    Ok((-1.0 / mean).min(params.lid_cap))
}

/// LID of every query row against `pool`. With `exclude_self`, query `q` is
/// taken to be pool row `q` and that row is left out of its own neighborhood.
pub fn batch_lid(
    queries: &Matrix,
    pool: &Matrix,
    params: &LidParams,
    exclude_self: bool,
) -> Result<Vec<f64>> {
    params.validate()?;
    if queries.cols() != pool.cols() {
        return Err(Error::shape(format!(
            "queries have dimension {}, pool has {}",
            queries.cols(),
            pool.cols()
        )));
    }
    if exclude_self && queries.rows() != pool.rows() {
        return Err(Error::shape(
            "exclude_self requires the queries to be the pool rows",
        ));
    }
    let available = pool.rows().saturating_sub(exclude_self as usize);
    if available < 2 {
        return Err(Error::input(format!(
            "pool of {} points leaves {available} neighbors; LID needs 2",
            pool.rows()
        )));
    }
    let k = if params.k > available {
        warn!(
            "k = {} exceeds the {available} available neighbors; clamping",
            params.k
        );
        available
    } else {
        params.k
    };
    (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let nn = knn_search_excluding(queries.row(q), pool, k, exclude_self.then_some(q))?;
            lid_mle(&nn.distances, params)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> LidParams {
        LidParams::with_k(2)
    }

    #[test]
    fn hand_geometry() {
        let pool = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 2.0], [3.0, 3.0]]).unwrap();
        let nn = knn_search(&[0.0, 0.0], &pool, 2).unwrap();
        assert_eq!(nn.distances, vec![1.0, 2.0]);
        assert_eq!(nn.indices, vec![0, 1]);
        let nn = knn_search(&[3.0, 3.0], &pool, 1).unwrap();
        assert_eq!(nn.distances, vec![0.0]);
        assert_eq!(nn.indices, vec![2]);
        assert_eq!(knn_search(&[0.0, 0.0], &pool, 10).unwrap().len(), 3);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let pool = Matrix::from_rows(&[[1.0f32], [-1.0], [1.0], [0.5]]).unwrap();
        let nn = knn_search(&[0.0], &pool, 3).unwrap();
        assert_eq!(nn.indices, vec![3, 0, 1]);
    }

    #[test]
    fn knn_errors() {
        let pool = Matrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        assert!(knn_search(&[0.0], &pool, 1).is_err());
        let empty = Matrix::new(0, 2, vec![]).unwrap();
        assert!(knn_search(&[0.0, 0.0], &empty, 1).is_err());
    }

    #[test]
    fn closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        let a = lid_mle(&[1.0, 2.0], &params()).unwrap();
        assert!((a - 2.0 / ln2).abs() / (2.0 / ln2) < 1e-12);
        assert!((a - 2.885_390).abs() < 1e-6);
        let b = lid_mle(&[1.0, 2.0, 4.0, 8.0], &params()).unwrap();
        assert!((b - 4.0 / (6.0 * ln2)).abs() < 1e-12);
        assert!((b - 0.961_797).abs() < 1e-6);
        assert_eq!(lid_mle(&[3.0, 3.0, 3.0], &params()).unwrap(), 1e6);
        assert_eq!(lid_mle(&[0.0, 0.0], &params()).unwrap(), 1e6);
    }

    #[test]
    fn lid_rejects_bad_input() {
        assert!(lid_mle(&[1.0], &params()).is_err());
        assert!(lid_mle(&[2.0, 1.0], &params()).is_err());
        assert!(lid_mle(&[-1.0, 1.0], &params()).is_err());
    }

    #[test]
    fn zero_nearest_distance_is_finite() {
        let v = lid_mle(&[0.0, 1.0, 1.0], &params()).unwrap();
        assert!(v > 0.0 && v < 1.0, "{v}");
    }

    #[test]
    fn batch_single_query_is_composition() {
        let pool = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 2.0], [3.0, 3.0], [5.0, 1.0]]).unwrap();
        let q = Matrix::from_rows(&[[0.2f32, 0.1]]).unwrap();
        let p = LidParams::with_k(3);
        let b = batch_lid(&q, &pool, &p, false).unwrap();
        let nn = knn_search(q.row(0), &pool, 3).unwrap();
        assert_eq!(b, vec![lid_mle(&nn.distances, &p).unwrap()]);
    }

    #[test]
    fn duplicates_hit_the_cap() {
        let pool = Matrix::from_rows(&[[1.0f32, 1.0]; 3]).unwrap();
        let b = batch_lid(&pool, &pool, &LidParams::with_k(2), true).unwrap();
        assert_eq!(b, vec![1e6; 3]);
    }

    #[test]
    fn batch_clamps_and_rejects_small_pools() {
        let pool = Matrix::from_rows(&[[0.0f32], [1.0], [3.0]]).unwrap();
        let clamped = batch_lid(&pool, &pool, &LidParams::with_k(50), true).unwrap();
        let exact = batch_lid(&pool, &pool, &LidParams::with_k(2), true).unwrap();
        assert_eq!(clamped, exact);
        let two = Matrix::from_rows(&[[0.0f32], [1.0]]).unwrap();
        assert!(batch_lid(&two, &two, &LidParams::with_k(2), true).is_err());
        assert!(batch_lid(&two, &two, &LidParams::with_k(1), false).is_err());
    }

    #[test]
    fn cosine_metric_normalizes() {
        let m = Matrix::from_rows(&[[3.0f32, 4.0]]).unwrap();
        let p = Metric::Cosine.prepare(&m);
        assert!((p.row(0)[0] - 0.6).abs() < 1e-7);
        assert_eq!(Metric::Euclidean.prepare(&m), m);
    }

    fn sorted_distances() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-3f64..1e3, 2..64).prop_map(|mut v| {
            v.sort_by(f64::total_cmp);
            v
        })
    }

    proptest! {
        #[test]
        fn scale_invariance(d in sorted_distances(), c in 1e-3f64..1e3) {
            let p = LidParams::with_k(2);
            let a = lid_mle(&d, &p).unwrap();
            let scaled: Vec<f64> = d.iter().map(|x| x * c).collect();
            let b = lid_mle(&scaled, &p).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }

        #[test]
        fn positive_and_capped(d in sorted_distances()) {
            let p = LidParams::with_k(2);
            let v = lid_mle(&d, &p).unwrap();
            prop_assert!(v > 0.0 && v <= p.lid_cap);
        }

        #[test]
        fn converging_distances_approach_the_cap(spread in 1e-9f64..1e-1) {
            let p = LidParams::with_k(2);
            let far = lid_mle(&[1.0 - spread, 1.0], &p).unwrap();
            let near = lid_mle(&[1.0 - spread / 10.0, 1.0], &p).unwrap();
            prop_assert!(near >= far);
        }
    }
}
