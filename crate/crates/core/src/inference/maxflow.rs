/// Directed flow network with real capacities, solved by Dinic's algorithm.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    residual: Vec<f64>,
    eps: f64,
}

impl FlowNetwork {
    pub fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            to: Vec::new(),
            residual: Vec::new(),
            eps: 0.0,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    /// Adds arc `u -> v` with capacity `cap` (and its zero-capacity reverse).
    pub fn add_edge(&mut self, u: usize, v: usize, cap: f64) {
        debug_assert!(cap >= 0.0);
        if cap <= 0.0 {
            return;
        }
        self.adj[u].push(self.to.len());
        self.to.push(v);
        self.residual.push(cap);
        self.adj[v].push(self.to.len());
        self.to.push(u);
        self.residual.push(0.0);
        self.eps = self.eps.max(cap * 1e-12);
    }

    fn levels(&self, s: usize) -> Vec<usize> {
        let mut level = vec![usize::MAX; self.adj.len()];
        let mut queue = std::collections::VecDeque::new();
        level[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let v = self.to[e];
                if level[v] == usize::MAX && self.residual[e] > self.eps {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level
    }

    fn augment(&mut self, u: usize, t: usize, pushed: f64, level: &[usize], next: &mut [usize]) -> f64 {
        if u == t {
            return pushed;
        }
        while next[u] < self.adj[u].len() {
            let e = self.adj[u][next[u]];
            let v = self.to[e];
            if self.residual[e] > self.eps && level[v] == level[u] + 1 {
                let d = self.augment(v, t, pushed.min(self.residual[e]), level, next);
                if d > 0.0 {
                    self.residual[e] -= d;
                    self.residual[e ^ 1] += d;
                    return d;
                }
            }
            next[u] += 1;
        }
        0.0
    }

    /// Pushes a maximum flow from `s` to `t` and returns its value.
    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut total = 0.0;
        loop {
            let level = self.levels(s);
            if level[t] == usize::MAX {
                return total;
            }
            let mut next = vec![0; self.adj.len()];
            loop {
                let f = self.augment(s, t, f64::INFINITY, &level, &mut next);
                if f <= 0.0 {
                    break;
                }
                total += f;
            }
        }
    }

    /// Nodes reachable from `s` in the residual network (the source side of
    /// the minimum cut once [`max_flow`](Self::max_flow) has run).
    pub fn source_side(&self, s: usize) -> Vec<bool> {
        let level = self.levels(s);
        level.iter().map(|&l| l != usize::MAX).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_example() {
        // CLRS flow network, max flow 23
        let mut g = FlowNetwork::new(6);
        for &(u, v, c) in &[
            (0, 1, 16.0),
            (0, 2, 13.0),
            (1, 3, 12.0),
            (2, 1, 4.0),
            (2, 4, 14.0),
            (3, 2, 9.0),
            (3, 5, 20.0),
            (4, 3, 7.0),
            (4, 5, 4.0),
        ] {
            g.add_edge(u, v, c);
        }
        assert!((g.max_flow(0, 5) - 23.0).abs() < 1e-12);
        let side = g.source_side(0);
        assert!(side[0] && !side[5]);
    }

    #[test]
    fn min_cut_equals_max_flow_on_random_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = 8;
            let mut edges = Vec::new();
            for u in 0..n {
                for v in 0..n {
                    if u != v && rng.random_bool(0.4) {
                        edges.push((u, v, rng.random_range(0.1..5.0)));
                    }
                }
            }
            let mut g = FlowNetwork::new(n);
            for &(u, v, c) in &edges {
                g.add_edge(u, v, c);
            }
            let f = g.max_flow(0, n - 1);
            let side = g.source_side(0);
            let cut: f64 = edges
                .iter()
                .filter(|&&(u, v, _)| side[u] && !side[v])
                .map(|e| e.2)
                .sum();
            assert!((f - cut).abs() < 1e-9);
            // brute-force minimum over all s-t cuts
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << n) {
                if mask & 1 == 0 || mask >> (n - 1) & 1 == 1 {
                    continue;
                }
                let c: f64 = edges
                    .iter()
                    .filter(|&&(u, v, _)| mask >> u & 1 == 1 && mask >> v & 1 == 0)
                    .map(|e| e.2)
                    .sum();
                best = best.min(c);
            }
            assert!((f - best).abs() < 1e-9);
        }
    }
}
