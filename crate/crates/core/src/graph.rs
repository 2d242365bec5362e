//! Per-scene candidate graphs: candidate selection, edge orientation,
//! relative-layout edge features and their k-means typing.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{nms, BoundingBox, NMS_THRESHOLD};

/// Candidates per scene handed to the joint model.
pub const DEFAULT_NODES: usize = 16;
/// Number of edge layout clusters.
pub const DEFAULT_CLUSTERS: usize = 20;
pub const KMEANS_MAX_ITERS: usize = 300;

/// An oriented edge between local node positions `i` (first) and `j`, typed
/// by `cluster` in `0..K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub cluster: usize,
}

/// Candidate nodes of one scene plus the complete set of oriented edges.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    /// Candidate indices into the scene record.
    pub nodes: Vec<usize>,
    pub edges: Vec<Edge>,
    pub num_clusters: usize,
    /// Ground-truth labels, when known.
    pub labels: Option<Vec<bool>>,
}

impl SceneGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Complete graph on `n` nodes with edges `(i, j), i < j` in
    /// lexicographic order and the given cluster per edge.
    pub fn complete(n: usize, num_clusters: usize, mut cluster: impl FnMut(usize, usize) -> usize) -> Self {
        let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push(Edge {
                    i,
                    j,
                    cluster: cluster(i, j),
                });
            }
        }
        Self {
            nodes: (0..n).collect(),
            edges,
            num_clusters,
            labels: None,
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let mut seen = vec![false; n * n];
        for e in &self.edges {
            if e.i >= n || e.j >= n || e.i == e.j {
                return Err(Error::Config(format!("edge ({}, {}) out of range", e.i, e.j)));
            }
            if e.cluster >= self.num_clusters {
                return Err(Error::Config(format!("edge cluster {} >= K", e.cluster)));
            }
            let (a, b) = (e.i.min(e.j), e.i.max(e.j));
            if std::mem::replace(&mut seen[a * n + b], true) {
                return Err(Error::Config(format!("duplicate edge ({a}, {b})")));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: l.len(),
                    context: "graph labels",
                });
            }
        }
        Ok(())
    }
}

/// Candidate selection for the joint model: NMS at 0.3 on the local scores,
/// then the `m` best survivors.
pub fn select_candidates(boxes: &[BoundingBox], local_scores: &[f64], m: usize) -> Vec<usize> {
    let scored: Vec<(BoundingBox, f64)> = boxes.iter().copied().zip(local_scores.iter().copied()).collect();
    let mut kept = nms(&scored, NMS_THRESHOLD);
    kept.truncate(m);
    kept
}

/// Strict total order used to orient edges: smaller x-center first, then
/// smaller y-center, then smaller index.
pub fn orientation_cmp(a: (&BoundingBox, usize), b: (&BoundingBox, usize)) -> Ordering {
    let (ax, ay) = a.0.center();
    let (bx, by) = b.0.center();
    ax.total_cmp(&bx)
        .then(ay.total_cmp(&by))
        .then(a.1.cmp(&b.1))
}

/// `sign(x) * ln(|x| + 1)`.
pub fn phi(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Layout features of an oriented pair, `a` being the first box:
/// log size ratio and the log-compressed center displacements in units of
/// the first box's size.
pub fn edge_features(a: &BoundingBox, b: &BoundingBox) -> [f64; 3] {
    let (sa, sb) = (a.size(), b.size());
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    [(sa / sb).ln(), phi((bx - ax) / sa), phi((by - ay) / sa)]
}

/// Oriented pairs over `nodes` (positions into `boxes`, `index` used as the
/// final tie-break), returned as `(first, second)` local positions.
pub fn oriented_pairs(boxes: &[BoundingBox], nodes: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(nodes.len() * nodes.len().saturating_sub(1) / 2);
    for p in 0..nodes.len() {
        for q in (p + 1)..nodes.len() {
            let a = (&boxes[nodes[p]], nodes[p]);
            let b = (&boxes[nodes[q]], nodes[q]);
            if orientation_cmp(a, b) == Ordering::Greater {
                pairs.push((q, p));
            } else {
                pairs.push((p, q));
            }
        }
    }
    pairs
}

/// Builds the scene graph on the selected candidate `nodes`, typing every
/// oriented edge with the cluster model.
pub fn build_scene_graph(boxes: &[BoundingBox], nodes: &[usize], clusters: &EdgeClusterModel) -> SceneGraph {
    let edges = oriented_pairs(boxes, nodes)
        .into_iter()
        .map(|(i, j)| Edge {
            i,
            j,
            cluster: clusters.assign(&edge_features(&boxes[nodes[i]], &boxes[nodes[j]])),
        })
        .collect();
    SceneGraph {
        nodes: nodes.to_vec(),
        edges,
        num_clusters: clusters.k(),
        labels: None,
    }
}

/// K centroids in normalized edge-feature space plus the normalization stats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeClusterModel {
    pub centroids: Vec<[f64; 3]>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Result of a k-means fit, with the objective after every Lloyd iteration.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: EdgeClusterModel,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]).powi(2)).sum()
}

fn nearest(centroids: &[[f64; 3]], p: &[f64; 3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(cen, p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

impl EdgeClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn normalize(&self, f: &[f64; 3]) -> [f64; 3] {
        [
            (f[0] - self.mean[0]) / self.std[0],
            (f[1] - self.mean[1]) / self.std[1],
            (f[2] - self.mean[2]) / self.std[2],
        ]
    }

    /// Nearest centroid (0-based) in normalized space; ties to the smaller index.
    pub fn assign(&self, raw: &[f64; 3]) -> usize {
        nearest(&self.centroids, &self.normalize(raw)).0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(6 + 3 * self.k());
        v.extend_from_slice(&self.mean);
        v.extend_from_slice(&self.std);
        for c in &self.centroids {
            v.extend_from_slice(c);
        }
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() < 9 || !v.len().is_multiple_of(3) {
            return Err(Error::Model(format!("cluster model of length {}", v.len())));
        }
        let three = |s: &[f64]| [s[0], s[1], s[2]];
        let model = Self {
            mean: three(&v[0..3]),
            std: three(&v[3..6]),
            centroids: v[6..].chunks_exact(3).map(three).collect(),
        };
        if model.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Model("cluster model standard deviations must be positive".into()));
        }
        Ok(model)
    }
}

/// Normalizes features to zero mean and unit deviation, seeds with
/// k-means++, then runs Lloyd iterations until no assignment changes (at most
/// [`KMEANS_MAX_ITERS`]). Empty clusters are reseeded with the point farthest
/// from its centroid.
pub fn fit_kmeans(features: &[[f64; 3]], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut distinct: Vec<[f64; 3]> = features.to_vec();
    distinct.sort_by(|a, b| {
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::TooFewPoints {
            k,
            distinct: distinct.len(),
        });
    }
    let n = features.len() as f64;
    let mut mean = [0.0; 3];
    for f in features {
        (0..3).for_each(|d| mean[d] += f[d]);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = [0.0; 3];
    for f in features {
        (0..3).for_each(|d| std[d] += (f[d] - mean[d]).powi(2));
    }
    // A constant feature carries no layout information; unit scale keeps it at zero.
    std.iter_mut().for_each(|s| {
        *s = (*s / n).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    });
    let mut model = EdgeClusterModel {
        centroids: Vec::with_capacity(k),
        mean,
        std,
    };
    let points: Vec<[f64; 3]> = features.iter().map(|f| model.normalize(f)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..points.len());
    model.centroids.push(points[first]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while model.centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            if d2[chosen] == 0.0 {
                d2.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap()
            } else {
                chosen
            }
        } else {
            0
        };
        model.centroids.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }

    let mut assign = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(&points) {
            let (c, _) = nearest(&model.centroids, p);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(&points) {
            (0..3).for_each(|d| sums[a][d] += p[d]);
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let m = counts[c] as f64;
                model.centroids[c] = [sums[c][0] / m, sums[c][1] / m, sums[c][2] / m];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &model.centroids[assign[a]]);
                        let db = sq_dist(&points[b], &model.centroids[assign[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                model.centroids[c] = points[far];
                assign[far] = c;
                changed = true;
            }
        }
        trace.push(objective(&model.centroids, &points, &assign));
        if !changed {
            break;
        }
    }
    Ok(KMeansFit {
        model,
        objective_trace: trace,
        iterations,
    })
}

/// Sum of squared distances of points to their assigned centroids.
pub fn objective(centroids: &[[f64; 3]], points: &[[f64; 3]], assign: &[usize]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}
