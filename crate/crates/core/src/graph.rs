//! Construction of the three graphs used by each processing layer.
//!
//! * local: the `n` nodes with the largest high-frequency indicator, joined
//!   to their `k` nearest selected peers in space;
//! * global: an FPS subset joined to its `k` most feature-similar peers;
//! * physics: a complete graph over `M` virtual nodes.
//!
//! Local and global graphs are symmetrized and every node of the point set
//! carries a self-loop, so each node has at least one incoming edge.

use std::collections::BTreeSet;
use std::rc::Rc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sampling, idw_interpolate, knn_cosine_self, knn_euclidean_self, FpsStart, PointSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Neighbours used when interpolating the down-sampled field back.
pub const HF_INTERP_K: usize = 3;
/// Inverse-distance exponent for the same interpolation.
pub const HF_INTERP_POWER: f64 = 2.0;

/// Directed edge list `(source, target)` over `n_nodes` nodes, sorted by
/// target then source, without duplicates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GraphTopology {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    #[serde(skip)]
    sources: Rc<[usize]>,
    #[serde(skip)]
    targets: Rc<[usize]>,
}

impl GraphTopology {
    /// Builds a topology from arbitrary edges, deduplicating and sorting.
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (s, t) in edges {
            if s >= n_nodes || t >= n_nodes {
                return Err(Error::Index(format!("edge ({s}, {t}) outside {n_nodes} nodes")));
            }
            set.insert((t, s));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().map(|(t, s)| (s, t)).collect();
        let sources: Rc<[usize]> = edges.iter().map(|e| e.0).collect();
        let targets: Rc<[usize]> = edges.iter().map(|e| e.1).collect();
        Ok(Self { n_nodes, edges, sources, targets })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn sources(&self) -> Rc<[usize]> {
        Rc::clone(&self.sources)
    }

    pub fn targets(&self) -> Rc<[usize]> {
        Rc::clone(&self.targets)
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes];
        for &(_, t) in &self.edges {
            deg[t] += 1;
        }
        deg
    }

    pub fn contains(&self, source: usize, target: usize) -> bool {
        self.edges.binary_search_by(|&(s, t)| (t, s).cmp(&(target, source))).is_ok()
    }

    /// Same graph with node `i` renamed to `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        Self::new(self.n_nodes, self.edges.iter().map(|&(s, t)| (perm[s], perm[t])))
    }
}

/// The three graphs of one processing layer plus their selections.
#[derive(Clone, Debug, Serialize)]
pub struct MultiGraph {
    pub local: GraphTopology,
    pub global: GraphTopology,
    pub physics: GraphTopology,
    pub local_selected: Vec<usize>,
    pub global_selected: Vec<usize>,
    /// Indicator values that drove the local selection.
    pub hf_indicator: Vec<f64>,
}

/// Per-node magnitude of the residual between the features and a low-pass
/// copy obtained by FPS down-sampling to `ceil(N / ratio)` points and
/// inverse-distance interpolation back to all positions.
pub fn high_frequency_indicator<T: Scalar>(points: &PointSet<T>, features: &Tensor<T>, ratio: f64, start: FpsStart) -> Result<Vec<T>> {
    let n = points.len();
    if features.shape().len() != 2 || features.cols() == 0 {
        return Err(Error::arg("high-frequency indicator needs an [N, C] feature map with C >= 1"));
    }
    if features.rows() != n {
        return Err(Error::dim(format!("{} feature rows for {n} points", features.rows())));
    }
    if !(ratio > 1.0) {
        return Err(Error::arg(format!("down-sampling ratio must exceed 1, got {ratio}")));
    }
    if n < 4 {
        return Err(Error::arg(format!("high-frequency indicator needs at least 4 points, got {n}")));
    }
    let m = ((n as f64) / ratio).ceil() as usize;
    let sub = farthest_point_sampling(points, m.max(1), start)?;
    let sub_points = points.select(&sub);
    let mut sub_feat = Vec::with_capacity(sub.len() * features.cols());
    for &i in &sub {
        sub_feat.extend_from_slice(features.row(i));
    }
    let sub_feat = Tensor::new(vec![sub.len(), features.cols()], sub_feat)?;
    let low = idw_interpolate(&sub_points, &sub_feat, points, HF_INTERP_K, HF_INTERP_POWER)?;
    Ok((0..n).map(|i| features.row(i).iter().zip(low.row(i)).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), |s, v| s + v)).collect())
}

/// Indices of the `n` largest values, lowest index first among equals.
pub fn top_n<T: Scalar>(values: &[T], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn self_loops(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).map(|i| (i, i))
}

/// Local graph: top-`n` high-frequency nodes joined to their `k` nearest
/// selected peers (both directions), plus self-loops on all nodes.
pub fn build_local_graph<T: Scalar>(
    points: &PointSet<T>,
    features: &Tensor<T>,
    n: usize,
    k: usize,
    ratio: f64,
    start: FpsStart,
) -> Result<(Vec<usize>, GraphTopology, Vec<T>)> {
    let total = points.len();
    if n == 0 || n > total {
        return Err(Error::arg(format!("local selection of {n} from {total} nodes")));
    }
    if n > 1 && k >= n {
        return Err(Error::arg(format!("local k = {k} must be below the selection size {n}")));
    }
    let hf = high_frequency_indicator(points, features, ratio, start)?;
    let selected = top_n(&hf, n);
    let mut edges: Vec<(usize, usize)> = self_loops(total).collect();
    if n > 1 {
        let sub = points.select(&selected);
        for (qi, nb) in knn_euclidean_self(&sub, k)?.iter().enumerate() {
            let i = selected[qi];
            for n in nb {
                let j = selected[n.index];
                edges.push((j, i));
                edges.push((i, j));
            }
        }
    }
    Ok((selected, GraphTopology::new(total, edges)?, hf))
}

/// Number of nodes kept by global sampling at ratio `r`.
pub fn global_sample_count(r: f64, n: usize) -> usize {
    // round before ceil so 0.25 * 512 stays 128 despite representation error
    let raw = r * n as f64;
    let snapped = (raw * 1e9).round() / 1e9;
    (snapped.ceil() as usize).clamp(1, n)
}

/// Global graph: `ceil(r N)` FPS nodes joined to their `k` most
/// cosine-similar selected peers (both directions), plus self-loops.
pub fn build_global_graph<T: Scalar>(
    points: &PointSet<T>,
    features: &Tensor<T>,
    r: f64,
    k: usize,
    start: FpsStart,
) -> Result<(Vec<usize>, GraphTopology)> {
    let total = points.len();
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::arg(format!("global sample ratio {r} outside (0, 1]")));
    }
    if features.rows() != total {
        return Err(Error::dim(format!("{} feature rows for {total} points", features.rows())));
    }
    let m = global_sample_count(r, total);
    if m > 1 && k >= m {
        return Err(Error::arg(format!("global k = {k} must be below the sample size {m}")));
    }
    let selected = farthest_point_sampling(points, m, start)?;
    let mut edges: Vec<(usize, usize)> = self_loops(total).collect();
    if m > 1 {
        let mut sub = Vec::with_capacity(m * features.cols());
        for &i in &selected {
            sub.extend_from_slice(features.row(i));
        }
        let sub = Tensor::new(vec![m, features.cols()], sub)?;
        for (qi, nb) in knn_cosine_self(&sub, k)?.iter().enumerate() {
            let i = selected[qi];
            for n in nb {
                let j = selected[n.index];
                edges.push((j, i));
                edges.push((i, j));
            }
        }
    }
    Ok((selected, GraphTopology::new(total, edges)?))
}

/// Complete directed graph with self-loops on `m` virtual nodes.
pub fn build_physics_graph(m: usize) -> Result<GraphTopology> {
    if m == 0 {
        return Err(Error::arg("physics graph needs at least one node"));
    }
    GraphTopology::new(m, (0..m).flat_map(|t| (0..m).map(move |s| (s, t))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> PointSet<f64> {
        PointSet::new((0..n).flat_map(|i| [i as f64 / (n - 1) as f64, 0.0]).collect(), 2).unwrap()
    }

    fn random_points(seed: u64, n: usize) -> PointSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointSet::new((0..2 * n).map(|_| rng.gen::<f64>()).collect(), 2).unwrap()
    }

    fn random_features(seed: u64, n: usize, c: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_symmetric_with_loops(g: &GraphTopology) {
        for i in 0..g.n_nodes() {
            assert!(g.contains(i, i));
        }
        for &(s, t) in g.edges() {
            assert!(g.contains(t, s), "missing reverse of ({s}, {t})");
        }
    }

    #[test]
    fn topology_dedups_sorts_and_validates() {
        let g = GraphTopology::new(3, [(2, 0), (1, 0), (2, 0), (0, 2)]).unwrap();
        assert_eq!(g.edges(), &[(1, 0), (2, 0), (0, 2)]);
        assert!(GraphTopology::new(2, [(0, 2)]).is_err());
    }

    #[test]
    fn indicator_vanishes_on_constant_features() {
        let p = random_points(1, 30);
        let h = high_frequency_indicator(&p, &Tensor::full(&[30, 3], -0.7), 2.0, FpsStart::Index(0)).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indicator_peaks_at_a_spike_outside_the_subsample() {
        let p = line(20);
        let sub = farthest_point_sampling(&p, 10, FpsStart::Index(0)).unwrap();
        let spike = (0..20).find(|i| !sub.contains(i)).unwrap();
        let mut f = vec![0.0; 20];
        f[spike] = 1.0;
        let f = Tensor::new(vec![20, 1], f).unwrap();
        let h = high_frequency_indicator(&p, &f, 2.0, FpsStart::Index(0)).unwrap();
        let argmax = top_n(&h, 1)[0];
        assert_eq!(argmax, spike);
        assert_eq!(h[spike], 1.0);
    }

    #[test]
    fn indicator_is_one_homogeneous() {
        let p = random_points(2, 25);
        let f = random_features(3, 25, 4);
        let f2 = Tensor::new(vec![25, 4], f.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let h = high_frequency_indicator(&p, &f, 2.0, FpsStart::Index(3)).unwrap();
        let h2 = high_frequency_indicator(&p, &f2, 2.0, FpsStart::Index(3)).unwrap();
        for (a, b) in h.iter().zip(&h2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn indicator_argument_errors() {
        let p = random_points(2, 3);
        assert!(high_frequency_indicator(&p, &Tensor::zeros(&[3, 1]), 2.0, FpsStart::Index(0)).is_err());
        let p = random_points(2, 8);
        assert!(high_frequency_indicator(&p, &Tensor::zeros(&[8, 0]), 2.0, FpsStart::Index(0)).is_err());
        assert!(high_frequency_indicator(&p, &Tensor::zeros(&[8, 1]), 1.0, FpsStart::Index(0)).is_err());
    }

    #[test]
    fn local_graph_without_filtering_is_plain_knn() {
        let p = random_points(4, 30);
        let f = random_features(5, 30, 3);
        let (sel, g, _) = build_local_graph(&p, &f, 30, 4, 2.0, FpsStart::Index(0)).unwrap();
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..30).collect::<Vec<_>>());
        let knn = knn_euclidean_self(&p, 4).unwrap();
        let mut want = BTreeSet::new();
        for (i, nb) in knn.iter().enumerate() {
            want.insert((i, i));
            for n in nb {
                want.insert((n.index, i));
                want.insert((i, n.index));
            }
        }
        let have: BTreeSet<(usize, usize)> = g.edges().iter().copied().collect();
        assert_eq!(have, want);
        assert_symmetric_with_loops(&g);
    }

    #[test]
    fn local_selection_lands_in_the_oscillating_half() {
        let n = 64;
        let p = line(n);
        let f: Vec<f64> = (0..n)
            .map(|i| {
                let x = i as f64 / (n - 1) as f64;
                if x <= 0.5 {
                    0.0
                } else {
                    (40.0 * x).sin()
                }
            })
            .collect();
        let f = Tensor::new(vec![n, 1], f).unwrap();
        let (sel, g, h) = build_local_graph(&p, &f, n / 2, 3, 2.0, FpsStart::Index(0)).unwrap();
        // residual is identically zero on the flat half away from the interface
        for i in 0..n {
            let x = i as f64 / (n - 1) as f64;
            if x < 0.45 {
                assert_eq!(h[i], 0.0);
            }
        }
        // FPS-retained nodes carry zero residual on both halves, so only the
        // positively ranked part of the selection is informative; it may
        // reach one interpolation stencil across the interface
        let spacing = 1.0 / (n - 1) as f64;
        let positive: Vec<usize> = sel.iter().copied().filter(|&i| h[i] > 0.0).collect();
        assert!(positive.len() >= n / 4);
        for &i in &positive {
            let x = i as f64 * spacing;
            assert!(x > 0.5 - 3.0 * spacing, "selected node {i} at x = {x}");
        }
        let interior = positive.iter().filter(|&&i| i as f64 * spacing > 0.5).count();
        assert!(interior + 2 >= positive.len());
        assert_symmetric_with_loops(&g);
    }

    #[test]
    fn local_degenerate_and_error_cases() {
        let p = random_points(6, 10);
        let f = random_features(7, 10, 2);
        let (sel, g, _) = build_local_graph(&p, &f, 1, 6, 2.0, FpsStart::Index(0)).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(g.n_edges(), 10);
        assert!(build_local_graph(&p, &f, 5, 5, 2.0, FpsStart::Index(0)).is_err());
    }

    #[test]
    fn global_graph_saturates_to_complete() {
        let p = random_points(8, 9);
        let f = random_features(9, 9, 4);
        let (sel, g) = build_global_graph(&p, &f, 1.0, 8, FpsStart::Index(0)).unwrap();
        assert_eq!(sel.len(), 9);
        assert_eq!(g.n_edges(), 81);
    }

    #[test]
    fn global_edges_stay_within_feature_clusters() {
        let n = 40;
        let p = random_points(10, n);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cluster: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let f: Vec<f64> = cluster
            .iter()
            .flat_map(|&c| {
                let jitter = rng.gen_range(-0.05..0.05);
                if c {
                    [1.0, jitter]
                } else {
                    [jitter, 1.0]
                }
            })
            .collect();
        let f = Tensor::new(vec![n, 2], f).unwrap();
        let (_, g) = build_global_graph(&p, &f, 0.5, 1, FpsStart::Index(0)).unwrap();
        for &(s, t) in g.edges() {
            assert_eq!(cluster[s], cluster[t], "edge ({s}, {t}) crosses clusters");
        }
        assert_symmetric_with_loops(&g);
    }

    #[test]
    fn global_single_sample_is_self_loops_only() {
        let p = random_points(12, 10);
        let f = random_features(13, 10, 2);
        let (sel, g) = build_global_graph(&p, &f, 0.05, 3, FpsStart::Index(0)).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(g.n_edges(), 10);
        assert!(build_global_graph(&p, &f, 0.3, 3, FpsStart::Index(0)).is_err());
        assert!(build_global_graph(&p, &f, 0.0, 1, FpsStart::Index(0)).is_err());
    }

    #[test]
    fn physics_graph_counts() {
        assert_eq!(build_physics_graph(1).unwrap().n_edges(), 1);
        assert_eq!(build_physics_graph(3).unwrap().n_edges(), 9);
        assert_eq!(build_physics_graph(32).unwrap().n_edges(), 1024);
        assert!(build_physics_graph(0).is_err());
    }

    #[test]
    fn edge_counts_are_linear_in_selection() {
        let p = random_points(14, 200);
        let f = random_features(15, 200, 4);
        let (_, local, _) = build_local_graph(&p, &f, 60, 6, 2.0, FpsStart::Index(0)).unwrap();
        assert!(local.n_edges() <= 2 * 6 * 60 + 200);
        let (_, global) = build_global_graph(&p, &f, 0.25, 4, FpsStart::Index(0)).unwrap();
        assert!(global.n_edges() <= 2 * 4 * 50 + 200);
        assert!(local.in_degrees().iter().all(|&d| d >= 1));
        assert!(global.in_degrees().iter().all(|&d| d >= 1));
    }

    #[test]
    fn sample_count_is_exact_for_table_defaults() {
        assert_eq!(global_sample_count(0.25, 512), 128);
        assert_eq!(global_sample_count(0.25, 513), 129);
        assert_eq!(global_sample_count(1.0, 7), 7);
    }
}
