//! Point-set primitives: farthest point sampling, exhaustive nearest
//! neighbours under Euclidean and cosine metrics, and inverse-distance
//! interpolation.
//!
//! Every selection breaks ties by the lowest index so results are
//! reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard added to norms in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
/// Guard added to `dist^power` in inverse-distance weights.
pub const IDW_EPS: f64 = 1e-12;
/// Distances below this count as coincident in interpolation.
pub const COINCIDENT: f64 = 1e-12;

/// `N` positions in 2-D or 3-D, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet<T> {
    coords: Vec<T>,
    dim: usize,
}

impl<T: Scalar> PointSet<T> {
    pub fn new(coords: Vec<T>, dim: usize) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::arg(format!("point dimension must be 2 or 3, got {dim}")));
        }
        if coords.is_empty() || !coords.len().is_multiple_of(dim) {
            return Err(Error::dim(format!("{} coordinates do not form a non-empty set of {dim}-D points", coords.len())));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("non-finite coordinate".into()));
        }
        Ok(Self { coords, dim })
    }

    /// Positions from an `[N, d]` tensor.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::dim(format!("positions must be [N, d], got {:?}", t.shape())));
        }
        Self::new(t.data().to_vec(), t.cols())
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    /// Subset in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut coords = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            coords.extend_from_slice(self.point(i));
        }
        Self { coords, dim: self.dim }
    }

    pub fn sq_dist(&self, i: usize, other: &PointSet<T>, j: usize) -> T {
        sq_dist(self.point(i), other.point(j))
    }
}

#[inline]
fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).fold(T::zero(), |s, v| s + v)
}

/// One entry of a neighbour list. `metric` is a distance for Euclidean
/// queries and a similarity for cosine queries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor<T> {
    pub index: usize,
    pub metric: T,
}

/// Per-query neighbours, sorted best first.
pub type NeighborList<T> = Vec<Vec<Neighbor<T>>>;

/// How farthest point sampling picks its first point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    Index(usize),
    /// Uniform draw from a generator seeded with this value.
    Seeded(u64),
    /// Lexicographically smallest position, lowest index on ties. Makes the
    /// start independent of node order.
    Canonical,
}

impl FpsStart {
    pub fn resolve<T: Scalar>(self, points: &PointSet<T>) -> Result<usize> {
        let n = points.len();
        match self {
            FpsStart::Index(i) if i < n => Ok(i),
            FpsStart::Index(i) => Err(Error::Index(format!("FPS start {i} >= {n} points"))),
            FpsStart::Seeded(seed) => Ok(ChaCha8Rng::seed_from_u64(seed).gen_range(0..n)),
            FpsStart::Canonical => {
                let mut best = 0;
                for i in 1..n {
                    let (a, b) = (points.point(i), points.point(best));
                    let less = a.iter().zip(b).find(|(x, y)| x != y).is_some_and(|(x, y)| x < y);
                    if less {
                        best = i;
                    }
                }
                Ok(best)
            }
        }
    }
}

/// Greedy farthest point sampling.
///
/// Each new point maximizes the minimum Euclidean distance to the points
/// already chosen. Returns exactly `n` distinct indices, starting with the
/// resolved start point.
pub fn farthest_point_sampling<T: Scalar>(points: &PointSet<T>, n: usize, start: FpsStart) -> Result<Vec<usize>> {
    let total = points.len();
    if n == 0 || n > total {
        return Err(Error::arg(format!("cannot sample {n} of {total} points")));
    }
    let mut current = start.resolve(points)?;
    let mut chosen = vec![false; total];
    let mut min_d = vec![T::infinity(); total];
    let mut out = Vec::with_capacity(n);
    out.push(current);
    chosen[current] = true;
    let dim = points.dim();
    while out.len() < n {
        let c = points.point(current).to_vec();
        let mut best: Option<(usize, T)> = None;
        let rows = points.coords().chunks_exact(dim);
        for (j, ((p, md), &taken)) in rows.zip(min_d.iter_mut()).zip(&chosen).enumerate() {
            let d = sq_dist(p, &c);
            if d < *md {
                *md = d;
            }
            if taken {
                continue;
            }
            match best {
                Some((_, bd)) if *md <= bd => {}
                _ => best = Some((j, *md)),
            }
        }
        let (next, _) = best.expect("n <= total leaves an unchosen point");
        chosen[next] = true;
        out.push(next);
        current = next;
    }
    Ok(out)
}

/// Bounded best-k buffer. `better(a, b)` is a strict order on candidates.
struct TopK<T> {
    k: usize,
    items: Vec<Neighbor<T>>,
}

impl<T: Scalar> TopK<T> {
    fn new(k: usize) -> Self {
        Self { k, items: Vec::with_capacity(k + 1) }
    }

    /// Cheap pre-filter: false when a candidate with this metric cannot
    /// enter a full buffer even with the best possible index.
    #[inline]
    fn admits(&self, metric: T, strictly_better: impl Fn(T, T) -> bool) -> bool {
        match self.items.last() {
            Some(last) if self.items.len() == self.k => !strictly_better(last.metric, metric),
            _ => true,
        }
    }

    #[inline]
    fn offer(&mut self, cand: Neighbor<T>, better: impl Fn(&Neighbor<T>, &Neighbor<T>) -> bool) {
        if self.items.len() == self.k {
            if let Some(last) = self.items.last() {
                if !better(&cand, last) {
                    return;
                }
            }
        }
        let pos = self.items.iter().position(|x| better(&cand, x)).unwrap_or(self.items.len());
        self.items.insert(pos, cand);
        self.items.truncate(self.k);
    }
}

fn closer<T: Scalar>(a: &Neighbor<T>, b: &Neighbor<T>) -> bool {
    a.metric < b.metric || (a.metric == b.metric && a.index < b.index)
}

fn closer_metric<T: Scalar>(a: T, b: T) -> bool {
    a < b
}

fn more_similar_metric<T: Scalar>(a: T, b: T) -> bool {
    a > b
}

fn more_similar<T: Scalar>(a: &Neighbor<T>, b: &Neighbor<T>) -> bool {
    a.metric > b.metric || (a.metric == b.metric && a.index < b.index)
}

/// `k` nearest keys of every query by Euclidean distance. Distances are
/// reported, ascending; ties go to the lower key index.
pub fn knn_euclidean<T: Scalar>(queries: &PointSet<T>, keys: &PointSet<T>, k: usize) -> Result<NeighborList<T>> {
    if queries.dim() != keys.dim() {
        return Err(Error::dim("query and key dimensions differ"));
    }
    if k == 0 || k > keys.len() {
        return Err(Error::arg(format!("k = {k} with {} keys", keys.len())));
    }
    Ok((0..queries.len())
        .map(|i| {
            let q = queries.point(i);
            let mut top = TopK::new(k);
            for (j, p) in keys.coords().chunks_exact(keys.dim()).enumerate() {
                let d = sq_dist(q, p);
                if top.admits(d, closer_metric) {
                    top.offer(Neighbor { index: j, metric: d }, closer);
                }
            }
            finish_sqrt(top.items)
        })
        .collect())
}

/// Euclidean kNN among `points`, excluding each point itself.
pub fn knn_euclidean_self<T: Scalar>(points: &PointSet<T>, k: usize) -> Result<NeighborList<T>> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::arg(format!("k = {k} with {} other points", n.saturating_sub(1))));
    }
    Ok((0..n)
        .map(|i| {
            let q = points.point(i);
            let mut top = TopK::new(k);
            for (j, p) in points.coords().chunks_exact(points.dim()).enumerate() {
                if j == i {
                    continue;
                }
                let d = sq_dist(q, p);
                if top.admits(d, closer_metric) {
                    top.offer(Neighbor { index: j, metric: d }, closer);
                }
            }
            finish_sqrt(top.items)
        })
        .collect())
}

fn finish_sqrt<T: Scalar>(items: Vec<Neighbor<T>>) -> Vec<Neighbor<T>> {
    items.into_iter().map(|n| Neighbor { metric: n.metric.sqrt(), ..n }).collect()
}

fn row_norms<T: Scalar>(f: &Tensor<T>) -> Vec<T> {
    (0..f.rows()).map(|i| f.row(i).iter().map(|&v| v * v).sum::<T>().sqrt()).collect()
}

#[inline]
fn cosine<T: Scalar>(a: &[T], na: T, b: &[T], nb: T) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    dot / (na * nb + T::lit(COSINE_EPS))
}

fn check_features<T: Scalar>(f: &Tensor<T>, what: &str) -> Result<()> {
    if f.shape().len() != 2 {
        return Err(Error::dim(format!("{what} features must be [N, C], got {:?}", f.shape())));
    }
    Ok(())
}

/// `k` most cosine-similar keys of every query; similarities descending.
pub fn knn_cosine<T: Scalar>(query: &Tensor<T>, keys: &Tensor<T>, k: usize) -> Result<NeighborList<T>> {
    check_features(query, "query")?;
    check_features(keys, "key")?;
    if query.cols() != keys.cols() {
        return Err(Error::dim("query and key feature widths differ"));
    }
    if k == 0 || k > keys.rows() {
        return Err(Error::arg(format!("k = {k} with {} keys", keys.rows())));
    }
    let (qn, kn) = (row_norms(query), row_norms(keys));
    Ok((0..query.rows())
        .map(|i| {
            let mut top = TopK::new(k);
            for j in 0..keys.rows() {
                let s = cosine(query.row(i), qn[i], keys.row(j), kn[j]);
                if top.admits(s, more_similar_metric) {
                    top.offer(Neighbor { index: j, metric: s }, more_similar);
                }
            }
            top.items
        })
        .collect())
}

/// Cosine kNN among the rows of `features`, excluding each row itself.
pub fn knn_cosine_self<T: Scalar>(features: &Tensor<T>, k: usize) -> Result<NeighborList<T>> {
    check_features(features, "")?;
    let n = features.rows();
    if k == 0 || k >= n {
        return Err(Error::arg(format!("k = {k} with {} other rows", n.saturating_sub(1))));
    }
    let norms = row_norms(features);
    Ok((0..n)
        .map(|i| {
            let mut top = TopK::new(k);
            for j in (0..n).filter(|&j| j != i) {
                let s = cosine(features.row(i), norms[i], features.row(j), norms[j]);
                if top.admits(s, more_similar_metric) {
                    top.offer(Neighbor { index: j, metric: s }, more_similar);
                }
            }
            top.items
        })
        .collect())
}

/// Inverse-distance-weighted interpolation of `source_features` (rows
/// aligned with `sources`) onto `targets`.
///
/// Each target averages its `k` nearest sources with weights
/// `1 / (dist^power + eps)`. A target within `1e-12` of a source copies it.
/// The average is formed relative to the nearest source's value, so constant
/// fields are reproduced exactly.
pub fn idw_interpolate<T: Scalar>(
    sources: &PointSet<T>,
    source_features: &Tensor<T>,
    targets: &PointSet<T>,
    k: usize,
    power: f64,
) -> Result<Tensor<T>> {
    check_features(source_features, "source")?;
    if sources.is_empty() || source_features.rows() != sources.len() {
        return Err(Error::arg("idw_interpolate needs one feature row per source point"));
    }
    let c = source_features.cols();
    let neighbors = knn_euclidean(targets, sources, k.min(sources.len()))?;
    let p = T::lit(power);
    let eps = T::lit(IDW_EPS);
    let mut out = Vec::with_capacity(targets.len() * c);
    for nb in &neighbors {
        let nearest = nb[0];
        let base = source_features.row(nearest.index);
        if nearest.metric < T::lit(COINCIDENT) {
            out.extend_from_slice(base);
            continue;
        }
        let weights: Vec<T> = nb.iter().map(|n| T::one() / (n.metric.powf(p) + eps)).collect();
        let total: T = weights.iter().copied().sum();
        for ch in 0..c {
            let mut acc = T::zero();
            for (n, &w) in nb.iter().zip(&weights) {
                acc += w * (source_features.at(n.index, ch) - base[ch]);
            }
            out.push(base[ch] + acc / total);
        }
    }
    Tensor::new(vec![targets.len(), c], out)
}
