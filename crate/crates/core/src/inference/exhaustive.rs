use super::{joint_score, precheck, DenseProblem, Labeling, MaxMarginals};
use crate::error::Result;
use crate::graph::SceneGraph;

/// Visits every labeling of `p` once in Gray-code order, passing its code
/// (node 0 most significant) and score. Each step flips a single node and
/// updates the score through per-node local fields, O(n) per labeling.
fn gray_sweep(p: &DenseProblem, mut visit: impl FnMut(u32, f64)) {
    let n = p.n;
    let mut fields = p.unary.clone();
    let mut code = 0u32;
    let mut score = 0.0;
    visit(code, score);
    for step in 1..(1u32 << n) {
        let pos = step.trailing_zeros() as usize;
        let node = n - 1 - pos;
        let row = &p.weights[node * n..(node + 1) * n];
        if code >> pos & 1 == 0 {
            score += fields[node];
            fields.iter_mut().zip(row).for_each(|(f, w)| *f += w);
        } else {
            score -= fields[node];
            fields.iter_mut().zip(row).for_each(|(f, w)| *f -= w);
        }
        code ^= 1 << pos;
        visit(code, score);
    }
}

#[inline]
fn better(score: f64, code: u32, best: f64, best_code: u32) -> bool {
    score > best || (score == best && code < best_code)
}

/// Lexicographically smallest maximizer of `p`, as a code.
pub(crate) fn argmax_code(p: &DenseProblem) -> u32 {
    let mut best = (f64::NEG_INFINITY, u32::MAX);
    gray_sweep(p, |code, score| {
        if better(score, code, best.0, best.1) {
            best = (score, code);
        }
    });
    best.1
}

/// All max-marginals in one sweep over the `2^n` labelings. Argmax ties go
/// to the lexicographically smallest labeling; reported values are the
/// canonical [`joint_score`] of the reported argmax.
pub fn exhaustive_max_marginals(graph: &SceneGraph, pots: &super::Potentials) -> Result<MaxMarginals> {
    precheck(graph, pots)?;
    let p = DenseProblem::new(graph, pots);
    let n = p.n;
    let mut best_val = vec![[f64::NEG_INFINITY; 2]; n];
    let mut best_code = vec![[u32::MAX; 2]; n];
    gray_sweep(&p, |code, score| {
        for i in 0..n {
            let t = (code >> (n - 1 - i) & 1) as usize;
            if better(score, code, best_val[i][t], best_code[i][t]) {
                best_val[i][t] = score;
                best_code[i][t] = code;
            }
        }
    });
    let mut values = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for codes in &best_code {
        let y0 = Labeling::from_code(codes[0], n);
        let y1 = Labeling::from_code(codes[1], n);
        values.push([joint_score(graph, pots, &y0), joint_score(graph, pots, &y1)]);
        argmax.push([y0, y1]);
    }
    Ok(MaxMarginals { values, argmax })
}
