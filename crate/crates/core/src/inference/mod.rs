//! Joint score of binary candidate labelings and its exact maximization.
//!
//! The score of a labeling `y` is
//! `S(y) = sum_i y_i * unary_i + sum_(i,j) y_i * y_j * pairwise_ij`.
//! Per-candidate scores are max-marginal differences
//! `s_i = max_{y: y_i = 1} S(y) - max_{y: y_i = 0} S(y)`, computed either by a
//! single exhaustive sweep or by a cascade that fixes the labels QPBO can
//! certify and enumerates only the rest.

mod exhaustive;
mod maxflow;
mod qpbo;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SceneGraph;

pub use exhaustive::exhaustive_max_marginals;
pub use maxflow::FlowNetwork;
pub use qpbo::{qpbo_labels, PartialLabel};

/// Largest graph handled by exact enumeration.
pub const MAX_NODES: usize = 20;

/// Unary value per node and one pairwise value per edge (the component
/// selected by the edge's cluster).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potentials {
    pub unary: Vec<f64>,
    pub pairwise: Vec<f64>,
}

impl Potentials {
    pub fn zeros(graph: &SceneGraph) -> Self {
        Self {
            unary: vec![0.0; graph.len()],
            pairwise: vec![0.0; graph.edges.len()],
        }
    }

    pub fn check(&self, graph: &SceneGraph) -> Result<()> {
        if self.unary.len() != graph.len() {
            return Err(Error::DimensionMismatch {
                expected: graph.len(),
                actual: self.unary.len(),
                context: "unary potentials",
            });
        }
        if self.pairwise.len() != graph.edges.len() {
            return Err(Error::DimensionMismatch {
                expected: graph.edges.len(),
                actual: self.pairwise.len(),
                context: "pairwise potentials",
            });
        }
        if let Some(i) = self.unary.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "unary potential",
                location: format!("node {i}"),
            });
        }
        if let Some(e) = self.pairwise.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "pairwise potential",
                location: format!("edge {e}"),
            });
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            unary: self.unary.iter().map(|v| v * factor).collect(),
            pairwise: self.pairwise.iter().map(|v| v * factor).collect(),
        }
    }
}

/// A binary labeling; `true` marks a head.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Labeling(pub Vec<bool>);

impl Labeling {
    pub fn zeros(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Labeling encoded in the low `n` bits of `code`, node 0 most significant,
    /// so integer order on codes is lexicographic order on labelings.
    pub fn from_code(code: u32, n: usize) -> Self {
        Self((0..n).map(|i| code >> (n - 1 - i) & 1 == 1).collect())
    }

    pub fn code(&self) -> u32 {
        self.0.iter().fold(0u32, |acc, &b| acc << 1 | b as u32)
    }
}

/// `S(y)` summed in canonical order: unaries by node, then edges in graph order.
pub fn joint_score(graph: &SceneGraph, pots: &Potentials, y: &Labeling) -> f64 {
    let mut s = 0.0;
    for (i, &u) in pots.unary.iter().enumerate() {
        if y.0[i] {
            s += u;
        }
    }
    for (e, &p) in graph.edges.iter().zip(&pots.pairwise) {
        if y.0[e.i] && y.0[e.j] {
            s += p;
        }
    }
    s
}

/// For every node `i` and label `t`, the best score with `y_i = t` and a
/// labeling attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxMarginals {
    /// `values[i][t]`.
    pub values: Vec<[f64; 2]>,
    /// `argmax[i][t]`.
    pub argmax: Vec<[Labeling; 2]>,
}

impl MaxMarginals {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `M_i^1 - M_i^0` per node.
    pub fn differences(&self) -> Vec<f64> {
        self.values.iter().map(|v| v[1] - v[0]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMethod {
    Exhaustive,
    Cascade,
}

/// Per-candidate scores plus the MAP labeling and the max-marginals behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScores {
    pub scores: Vec<f64>,
    pub map: Labeling,
    pub max_marginals: MaxMarginals,
}

/// Compact dense form used by the solvers: symmetric weight matrix.
#[derive(Debug, Clone)]
pub(crate) struct DenseProblem {
    pub n: usize,
    pub unary: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DenseProblem {
    pub fn new(graph: &SceneGraph, pots: &Potentials) -> Self {
        let n = graph.len();
        let mut weights = vec![0.0; n * n];
        for (e, &p) in graph.edges.iter().zip(&pots.pairwise) {
            weights[e.i * n + e.j] += p;
            weights[e.j * n + e.i] += p;
        }
        Self {
            n,
            unary: pots.unary.clone(),
            weights,
        }
    }

    pub fn w(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }
}

fn precheck(graph: &SceneGraph, pots: &Potentials) -> Result<()> {
    if graph.len() > MAX_NODES {
        return Err(Error::TooManyNodes(graph.len()));
    }
    pots.check(graph)
}

/// Exact per-candidate scores by either method. Both methods produce the same
/// argmax labelings on instances without ties and recompute the reported
/// values from those labelings with [`joint_score`], so their outputs agree
/// bit for bit.
pub fn candidate_scores(graph: &SceneGraph, pots: &Potentials, method: InferenceMethod) -> Result<CandidateScores> {
    precheck(graph, pots)?;
    let max_marginals = match method {
        InferenceMethod::Exhaustive => exhaustive_max_marginals(graph, pots)?,
        InferenceMethod::Cascade => cascade_max_marginals(graph, pots)?,
    };
    let n = graph.len();
    let map = if n == 0 {
        Labeling::zeros(0)
    } else {
        let v = max_marginals.values[0];
        max_marginals.argmax[0][usize::from(v[1] > v[0])].clone()
    };
    Ok(CandidateScores {
        scores: max_marginals.differences(),
        map,
        max_marginals,
    })
}

/// Best labeling of the free nodes of `problem` given per-node label
/// constraints, using QPBO to fix what it can and enumeration for the rest.
fn constrained_argmax(problem: &DenseProblem, fixed: &[Option<bool>]) -> Labeling {
    let n = problem.n;
    let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
    // Conditioned sub-problem on the free nodes.
    let mut sub = DenseProblem {
        n: free.len(),
        unary: free
            .iter()
            .map(|&i| {
                problem.unary[i]
                    + (0..n)
                        .filter(|&j| fixed[j] == Some(true))
                        .map(|j| problem.w(i, j))
                        .sum::<f64>()
            })
            .collect(),
        weights: vec![0.0; free.len() * free.len()],
    };
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            sub.weights[a * free.len() + b] = problem.w(i, j);
        }
    }
    let partial = qpbo::qpbo_dense(&sub);
    let residual: Vec<usize> = (0..sub.n).filter(|&a| partial[a] == PartialLabel::Unknown).collect();
    let mut sub_fixed: Vec<Option<bool>> = partial
        .iter()
        .map(|l| match l {
            PartialLabel::Zero => Some(false),
            PartialLabel::One => Some(true),
            PartialLabel::Unknown => None,
        })
        .collect();
    if !residual.is_empty() {
        let res_unary: Vec<f64> = residual
            .iter()
            .map(|&a| {
                sub.unary[a]
                    + (0..sub.n)
                        .filter(|&b| sub_fixed[b] == Some(true))
                        .map(|b| sub.weights[a * sub.n + b])
                        .sum::<f64>()
            })
            .collect();
        let m = residual.len();
        let mut res_w = vec![0.0; m * m];
        for (x, &a) in residual.iter().enumerate() {
            for (z, &b) in residual.iter().enumerate() {
                res_w[x * m + z] = sub.weights[a * sub.n + b];
            }
        }
        let best = exhaustive::argmax_code(&DenseProblem {
            n: m,
            unary: res_unary,
            weights: res_w,
        });
        for (x, &a) in residual.iter().enumerate() {
            sub_fixed[a] = Some(best >> (m - 1 - x) & 1 == 1);
        }
    }
    let mut y = vec![false; n];
    for i in 0..n {
        y[i] = fixed[i].unwrap_or(false);
    }
    for (a, &i) in free.iter().enumerate() {
        y[i] = sub_fixed[a].expect("every free node labeled");
    }
    Labeling(y)
}

/// Lexicographically smallest maximizer of the joint score, by enumeration.
pub fn map_labeling(graph: &SceneGraph, pots: &Potentials) -> Result<Labeling> {
    precheck(graph, pots)?;
    let n = graph.len();
    Ok(Labeling::from_code(exhaustive::argmax_code(&DenseProblem::new(graph, pots)), n))
}

/// Max-marginals through the QPBO + enumeration cascade: one MAP solve, then
/// one conditioned solve per node for the label the MAP does not take.
pub fn cascade_max_marginals(graph: &SceneGraph, pots: &Potentials) -> Result<MaxMarginals> {
    precheck(graph, pots)?;
    let problem = DenseProblem::new(graph, pots);
    let n = graph.len();
    let map = constrained_argmax(&problem, &vec![None; n]);
    let map_value = joint_score(graph, pots, &map);
    let mut values = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for i in 0..n {
        let t = map.0[i];
        let mut fixed = vec![None; n];
        fixed[i] = Some(!t);
        let other = constrained_argmax(&problem, &fixed);
        let other_value = joint_score(graph, pots, &other);
        if t {
            values.push([other_value, map_value]);
            argmax.push([other, map.clone()]);
        } else {
            values.push([map_value, other_value]);
            argmax.push([map.clone(), other]);
        }
    }
    Ok(MaxMarginals { values, argmax })
}
