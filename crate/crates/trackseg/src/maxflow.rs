//! Max-flow / min-cut kernel used by the binary segmentation moves.
//!
//! Dinic's algorithm over an adjacency-list residual graph. Nodes carry
//! explicit source and sink capacities; internal edges are directed arcs
//! added in residual pairs.

const EPS: f64 = 1e-11;

#[derive(Debug, Clone, Copy)]
struct Arc {
    to: usize,
    cap: f64,
    rev: usize,
}

/// Binary min-cut problem: `n` internal nodes plus implicit source and sink.
#[derive(Debug, Clone)]
pub struct MaxFlowGraph {
    adj: Vec<Vec<Arc>>,
    source: usize,
    sink: usize,
}

/// Which side of the minimum cut a node ends up on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutSide {
    Source,
    Sink,
}

impl MaxFlowGraph {
    pub fn new(n_nodes: usize) -> Self {
        MaxFlowGraph {
            adj: vec![Vec::new(); n_nodes + 2],
            source: n_nodes,
            sink: n_nodes + 1,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.len() - 2
    }

    fn push_arc(&mut self, from: usize, to: usize, cap: f64, rev_cap: f64) {
        let a = self.adj[from].len();
        let b = self.adj[to].len();
        self.adj[from].push(Arc { to, cap, rev: b });
        self.adj[to].push(Arc { to: from, cap: rev_cap, rev: a });
    }

    /// Add capacity from the source to `node` and from `node` to the sink.
    /// Capacities accumulate across calls.
    pub fn add_terminal(&mut self, node: usize, source_cap: f64, sink_cap: f64) {
        debug_assert!(source_cap >= 0.0 && sink_cap >= 0.0);
        if source_cap > 0.0 {
            self.push_arc(self.source, node, source_cap, 0.0);
        }
        if sink_cap > 0.0 {
            self.push_arc(node, self.sink, sink_cap, 0.0);
        }
    }

    /// Add a directed arc `u -> v` with capacity `cap` and the reverse arc
    /// with `rev_cap`. The arc `u -> v` is cut when `u` lies on the source
    /// side and `v` on the sink side.
    pub fn add_edge(&mut self, u: usize, v: usize, cap: f64, rev_cap: f64) {
        debug_assert!(cap >= 0.0 && rev_cap >= 0.0);
        if cap > 0.0 || rev_cap > 0.0 {
            self.push_arc(u, v, cap, rev_cap);
        }
    }

    fn bfs_levels(&self) -> Option<Vec<i32>> {
        let mut level = vec![-1; self.adj.len()];
        let mut queue = std::collections::VecDeque::new();
        level[self.source] = 0;
        queue.push_back(self.source);
        while let Some(u) = queue.pop_front() {
            for arc in &self.adj[u] {
                if arc.cap > EPS && level[arc.to] < 0 {
                    level[arc.to] = level[u] + 1;
                    queue.push_back(arc.to);
                }
            }
        }
        if level[self.sink] >= 0 {
            Some(level)
        } else {
            None
        }
    }

    fn dfs_push(&mut self, u: usize, limit: f64, level: &[i32], iter: &mut [usize]) -> f64 {
        if u == self.sink {
            return limit;
        }
        while iter[u] < self.adj[u].len() {
            let Arc { to, cap, rev } = self.adj[u][iter[u]];
            if cap > EPS && level[to] == level[u] + 1 {
                let pushed = self.dfs_push(to, limit.min(cap), level, iter);
                if pushed > EPS {
                    self.adj[u][iter[u]].cap -= pushed;
                    self.adj[to][rev].cap += pushed;
                    return pushed;
                }
            }
            iter[u] += 1;
        }
        0.0
    }

    /// Run max-flow and return the cut value together with each node's side.
    /// Source-side nodes are those still reachable in the residual graph.
    pub fn solve(&mut self) -> (f64, Vec<CutSide>) {
        let mut flow = 0.0;
        while let Some(level) = self.bfs_levels() {
            let mut iter = vec![0usize; self.adj.len()];
            loop {
                let pushed = self.dfs_push(self.source, f64::INFINITY, &level, &mut iter);
                if pushed <= EPS {
                    break;
                }
                flow += pushed;
            }
        }

        let mut side = vec![CutSide::Sink; self.n_nodes()];
        let mut seen = vec![false; self.adj.len()];
        let mut queue = std::collections::VecDeque::new();
        seen[self.source] = true;
        queue.push_back(self.source);
        while let Some(u) = queue.pop_front() {
            for arc in &self.adj[u] {
                if arc.cap > EPS && !seen[arc.to] {
                    seen[arc.to] = true;
                    queue.push_back(arc.to);
                }
            }
        }
        for (node, s) in side.iter_mut().enumerate() {
            if seen[node] {
                *s = CutSide::Source;
            }
        }
        (flow, side)
    }
}
