//! Roof-duality partial labeling via min-cut on the doubled network.
//!
//! Solvers here minimize the energy `E(y) = -S(y)`; that negation is the only
//! place the sign convention changes. Every binary variable `p` gets two
//! network nodes, `p` and its complement `p'`: `p` on the sink side encodes
//! `y_p = 1`, `p'` on the sink side encodes `y_p = 0`. Each energy term is
//! split evenly between the two copies, so submodular terms become ordinary
//! arcs and non-submodular terms become arcs between a node and a complement.

use super::{precheck, DenseProblem, FlowNetwork, Potentials};
use crate::error::Result;
use crate::graph::SceneGraph;

/// Label certified by roof duality, or unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartialLabel {
    Zero,
    One,
    Unknown,
}

pub(crate) fn qpbo_dense(p: &DenseProblem) -> Vec<PartialLabel> {
    let n = p.n;
    if n == 0 {
        return Vec::new();
    }
    let (src, sink) = (2 * n, 2 * n + 1);
    let bar = |v: usize| n + v;
    let mut net = FlowNetwork::new(2 * n + 2);
    // energy coefficient of [y_p = 1]
    let mut lin: Vec<f64> = p.unary.iter().map(|u| -u).collect();
    for a in 0..n {
        for b in (a + 1)..n {
            let theta = p.w(a, b);
            if theta > 0.0 {
                // -theta*y_a*y_b = -theta*y_b + theta*[y_a = 0][y_b = 1]
                lin[b] -= theta;
                net.add_edge(a, b, theta / 2.0);
                net.add_edge(bar(b), bar(a), theta / 2.0);
            } else if theta < 0.0 {
                // -theta*[y_a = 1][y_b = 1], non-submodular
                let w = -theta / 2.0;
                net.add_edge(bar(b), a, w);
                net.add_edge(bar(a), b, w);
            }
        }
    }
    for (v, &c) in lin.iter().enumerate() {
        if c > 0.0 {
            net.add_edge(src, v, c / 2.0);
            net.add_edge(bar(v), sink, c / 2.0);
        } else if c < 0.0 {
            net.add_edge(v, sink, -c / 2.0);
            net.add_edge(src, bar(v), -c / 2.0);
        }
    }
    net.max_flow(src, sink);
    let side = net.source_side(src);
    (0..n)
        .map(|v| match (side[v], side[bar(v)]) {
            (true, false) => PartialLabel::Zero,
            (false, true) => PartialLabel::One,
            _ => PartialLabel::Unknown,
        })
        .collect()
}

/// Partial labeling whose determined entries agree with at least one
/// maximizer of the joint score.
pub fn qpbo_labels(graph: &SceneGraph, pots: &Potentials) -> Result<Vec<PartialLabel>> {
    precheck(graph, pots)?;
    Ok(qpbo_dense(&DenseProblem::new(graph, pots)))
}
