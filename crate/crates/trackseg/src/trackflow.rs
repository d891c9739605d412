//! Candidate generation and the per-target min-cost-flow tracking subproblem,
//! solved by forward dynamic programming over the frame-ordered DAG.

use crate::error::{Error, Result};
use crate::features::{hist_intersection, ColorHistogram};
use crate::scene::BBox;

/// One candidate box with its unary cost.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub bbox: BBox,
    /// Cost of selecting this box (negated appearance score).
    pub cost: f64,
    /// Id unique within the candidate set, assigned frame-major.
    pub id: usize,
}

/// Dense candidates for one target over the frames of a segment.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub target_id: u32,
    /// Per segment frame, in frame order.
    pub frames: Vec<Vec<Candidate>>,
}

impl CandidateSet {
    pub fn total(&self) -> usize {
        self.frames.iter().map(|f| f.len()).sum()
    }

    pub fn candidate(&self, id: usize) -> &Candidate {
        for frame in &self.frames {
            if let Some(first) = frame.first() {
                let off = first.id;
                if id < off + frame.len() {
                    return &frame[id - off];
                }
            }
        }
        panic!("candidate id {id} out of range");
    }
}

/// Sample a candidate grid around a previous box: centers within `radius`
/// (Chebyshev) at the given stride, three scales per center. Boxes whose
/// clipped region would be empty are dropped; when everything drops, the
/// propagated previous box itself is emitted.
pub fn sample_candidates(
    prev_box: &BBox,
    frame_index: usize,
    frame_width: usize,
    frame_height: usize,
    radius: f64,
    stride: f64,
) -> Vec<BBox> {
    let (cx, cy) = prev_box.center();
    let steps = (radius / stride).floor() as i64;
    let mut out = Vec::new();
    for &s in &[0.95, 1.0, 1.05] {
        let w = prev_box.w * s;
        let h = prev_box.h * s;
        for dy in -steps..=steps {
            for dx in -steps..=steps {
                let mut b = BBox::from_center(
                    cx + dx as f64 * stride,
                    cy + dy as f64 * stride,
                    w,
                    h,
                    frame_index,
                );
                b.scale = s;
                if b.intersects_frame(frame_width, frame_height) {
                    out.push(b);
                }
            }
        }
    }
    if out.is_empty() {
        let mut b = *prev_box;
        b.frame = frame_index;
        out.push(b);
    }
    out
}

/// Unary tracking cost: high appearance score means low cost.
pub fn unary_cost(appearance_score: f64) -> f64 {
    -appearance_score
}

/// Transition cost between two boxes of consecutive frames: the complement of
/// their color histogram intersection, so similar boxes transition cheaply.
pub fn pairwise_cost(h_m: &ColorHistogram, h_n: &ColorHistogram) -> Result<f64> {
    Ok(1.0 - hist_intersection(h_m, h_n)?)
}

/// Per-target flow network over a segment: one node per candidate, source
/// edges into the first frame, sink edges out of the last, dense transition
/// costs between consecutive frames.
#[derive(Debug, Clone)]
pub struct FlowGraph {
    /// Candidate unary costs per frame layer.
    pub layers: Vec<Vec<f64>>,
    /// `transitions[t][m][n]` is the cost of going from candidate m of frame
    /// t to candidate n of frame t+1.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Cost to start a track (applied to first-layer candidates).
    pub c_start: f64,
    /// Cost to end a track (applied to last-layer candidates).
    pub c_end: f64,
}

impl FlowGraph {
    pub fn n_frames(&self) -> usize {
        self.layers.len()
    }

    pub fn n_candidates(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// Energy of one selection (candidate index per frame) without any
    /// extra unary terms: start + unaries + transitions + end.
    pub fn path_cost(&self, selection: &[usize]) -> f64 {
        assert_eq!(selection.len(), self.layers.len());
        let mut cost = self.c_start + self.c_end;
        for (t, &n) in selection.iter().enumerate() {
            cost += self.layers[t][n];
            if t > 0 {
                cost += self.transitions[t - 1][selection[t - 1]][n];
            }
        }
        cost
    }
}

/// A solved track selection: one candidate index per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    pub selection: Vec<usize>,
    pub total_cost: f64,
}

impl FlowSolution {
    /// Global candidate ids (frame-major) of the selected chain.
    pub fn selected_ids(&self, graph: &FlowGraph) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.selection.len());
        let mut offset = 0;
        for (t, &n) in self.selection.iter().enumerate() {
            ids.push(offset + n);
            offset += graph.layers[t].len();
        }
        ids
    }
}

/// Minimum-cost single-unit path from source to sink by forward DP. The
/// effective cost of candidate n is its unary plus `extra_unary[n]` (indexed
/// frame-major); ties resolve to the lowest candidate index.
pub fn solve_flow(graph: &FlowGraph, extra_unary: &[f64]) -> Result<FlowSolution> {
    let n_frames = graph.n_frames();
    if n_frames == 0 {
        return Err(Error::BrokenChain(0));
    }
    assert_eq!(extra_unary.len(), graph.n_candidates());

    let mut offsets = Vec::with_capacity(n_frames);
    let mut acc = 0;
    for layer in &graph.layers {
        offsets.push(acc);
        acc += layer.len();
    }

    let mut dp: Vec<Vec<f64>> = Vec::with_capacity(n_frames);
    let mut parent: Vec<Vec<usize>> = Vec::with_capacity(n_frames);

    for (t, layer) in graph.layers.iter().enumerate() {
        if layer.is_empty() {
            return Err(Error::BrokenChain(t));
        }
        let mut costs = vec![f64::INFINITY; layer.len()];
        let mut pars = vec![usize::MAX; layer.len()];
        for (n, &c) in layer.iter().enumerate() {
            let node_cost = c + extra_unary[offsets[t] + n];
            if t == 0 {
                costs[n] = graph.c_start + node_cost;
            } else {
                let prev = &dp[t - 1];
                let trans = &graph.transitions[t - 1];
                let mut best = f64::INFINITY;
                let mut best_m = usize::MAX;
                for (m, &pc) in prev.iter().enumerate() {
                    let v = pc + trans[m][n];
                    if v < best {
                        best = v;
                        best_m = m;
                    }
                }
                costs[n] = best + node_cost;
                pars[n] = best_m;
            }
        }
        dp.push(costs);
        parent.push(pars);
    }

    let last = &dp[n_frames - 1];
    let mut best = f64::INFINITY;
    let mut best_n = usize::MAX;
    for (n, &c) in last.iter().enumerate() {
        let v = c + graph.c_end;
        if v < best {
            best = v;
            best_n = n;
        }
    }

    let mut selection = vec![0usize; n_frames];
    let mut cur = best_n;
    for t in (0..n_frames).rev() {
        selection[t] = cur;
        if t > 0 {
            cur = parent[t][cur];
        }
    }
    Ok(FlowSolution {
        selection,
        total_cost: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn radius_zero_gives_three_scales() {
        let b = BBox::new(20.0, 20.0, 10.0, 10.0, 0);
        let v = sample_candidates(&b, 1, 100, 100, 0.0, 4.0);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn grid_arithmetic() {
        let b = BBox::new(40.0, 40.0, 10.0, 10.0, 0);
        let v = sample_candidates(&b, 1, 200, 200, 8.0, 4.0);
        assert_eq!(v.len(), 75); // (2*8/4 + 1)^2 * 3
    }

    #[test]
    fn centers_stay_within_radius() {
        let b = BBox::new(40.0, 40.0, 10.0, 12.0, 0);
        let (cx, cy) = b.center();
        for cand in sample_candidates(&b, 1, 200, 200, 12.0, 4.0) {
            let (x, y) = cand.center();
            assert!((x - cx).abs() <= 12.0 + 1e-9);
            assert!((y - cy).abs() <= 12.0 + 1e-9);
        }
    }

    #[test]
    fn tiny_frame_emits_propagated_box() {
        let b = BBox::new(500.0, 500.0, 10.0, 10.0, 3);
        let v = sample_candidates(&b, 7, 20, 20, 4.0, 2.0);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].frame, 7);
        assert_eq!(v[0].w, 10.0);
    }

    #[test]
    fn unary_cost_reverses_order() {
        assert_eq!(unary_cost(0.0), 0.0);
        assert!(unary_cost(2.0) < unary_cost(1.0));
    }

    #[test]
    fn pairwise_cost_cases() {
        let h1 = ColorHistogram::from_dense(&[0.5, 0.5, 0.0]);
        let h2 = ColorHistogram::from_dense(&[0.25, 0.25, 0.5]);
        assert!((pairwise_cost(&h1, &h2).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(pairwise_cost(&h1, &h1).unwrap(), 0.0);
        let h3 = ColorHistogram::from_dense(&[0.0, 0.0, 1.0]);
        assert_eq!(pairwise_cost(&h1, &h3).unwrap(), 1.0);
    }

    fn forced_chain() -> FlowGraph {
        FlowGraph {
            layers: vec![vec![1.0], vec![2.0], vec![3.0]],
            transitions: vec![vec![vec![0.5]], vec![vec![0.25]]],
            c_start: 10.0,
            c_end: 10.0,
        }
    }

    #[test]
    fn single_chain_cost() {
        let g = forced_chain();
        let sol = solve_flow(&g, &[0.0; 3]).unwrap();
        assert_eq!(sol.selection, vec![0, 0, 0]);
        assert!((sol.total_cost - (10.0 + 1.0 + 2.0 + 3.0 + 0.5 + 0.25 + 10.0)).abs() < 1e-12);
        assert_eq!(sol.total_cost, g.path_cost(&sol.selection));
    }

    /// Exhaustive path enumeration oracle.
    pub(crate) fn enumerate_min(graph: &FlowGraph, extra: &[f64]) -> (Vec<usize>, f64) {
        let mut offsets = Vec::new();
        let mut acc = 0;
        for layer in &graph.layers {
            offsets.push(acc);
            acc += layer.len();
        }
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut sel = vec![0usize; graph.layers.len()];
        loop {
            let mut cost = graph.c_start + graph.c_end;
            for (t, &n) in sel.iter().enumerate() {
                cost += graph.layers[t][n] + extra[offsets[t] + n];
                if t > 0 {
                    cost += graph.transitions[t - 1][sel[t - 1]][n];
                }
            }
            if best.as_ref().map_or(true, |(_, b)| cost < *b) {
                best = Some((sel.clone(), cost));
            }
            // Advance odometer.
            let mut t = 0;
            while t < sel.len() {
                sel[t] += 1;
                if sel[t] < graph.layers[t].len() {
                    break;
                }
                sel[t] = 0;
                t += 1;
            }
            if t == sel.len() {
                break;
            }
        }
        best.unwrap()
    }

    pub(crate) fn random_graph(rng: &mut ChaCha8Rng, max_frames: usize, max_cands: usize) -> FlowGraph {
        let n_frames = rng.gen_range(1..=max_frames);
        let layers: Vec<Vec<f64>> = (0..n_frames)
            .map(|_| {
                (0..rng.gen_range(1..=max_cands))
                    .map(|_| rng.gen_range(-5.0..5.0))
                    .collect()
            })
            .collect();
        let transitions = (0..n_frames.saturating_sub(1))
            .map(|t| {
                (0..layers[t].len())
                    .map(|_| {
                        (0..layers[t + 1].len())
                            .map(|_| rng.gen_range(-5.0..5.0))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        FlowGraph {
            layers,
            transitions,
            c_start: rng.gen_range(-5.0..5.0),
            c_end: rng.gen_range(-5.0..5.0),
        }
    }

    #[test]
    fn two_by_two_matches_enumeration() {
        let g = FlowGraph {
            layers: vec![vec![1.0, -2.0], vec![0.5, 3.0]],
            transitions: vec![vec![vec![1.0, 0.0], vec![4.0, -1.0]]],
            c_start: 10.0,
            c_end: 10.0,
        };
        let extra = vec![0.0; 4];
        let sol = solve_flow(&g, &extra).unwrap();
        let (want_sel, want_cost) = enumerate_min(&g, &extra);
        assert_eq!(sol.selection, want_sel);
        assert!((sol.total_cost - want_cost).abs() < 1e-12);
    }

    #[test]
    fn dp_matches_enumeration_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let g = random_graph(&mut rng, 5, 6);
            let extra: Vec<f64> = (0..g.n_candidates())
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let sol = solve_flow(&g, &extra).unwrap();
            let (_, want) = enumerate_min(&g, &extra);
            assert!(
                (sol.total_cost - want).abs() < 1e-9,
                "dp {} vs enumeration {want}",
                sol.total_cost
            );
        }
    }

    #[test]
    fn constant_shift_on_one_frame_preserves_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let g = random_graph(&mut rng, 4, 5);
        let zero = vec![0.0; g.n_candidates()];
        let base = solve_flow(&g, &zero).unwrap();

        // Add k to every candidate of frame 1.
        let mut offsets = Vec::new();
        let mut acc = 0;
        for layer in &g.layers {
            offsets.push(acc);
            acc += layer.len();
        }
        let k = 3.75;
        let mut extra = zero.clone();
        let t = 1.min(g.n_frames() - 1);
        for n in 0..g.layers[t].len() {
            extra[offsets[t] + n] = k;
        }
        let shifted = solve_flow(&g, &extra).unwrap();
        assert_eq!(base.selection, shifted.selection);
        assert!((shifted.total_cost - base.total_cost - k).abs() < 1e-9);
    }

    #[test]
    fn flow_conservation_one_candidate_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let g = random_graph(&mut rng, 5, 4);
            let extra = vec![0.0; g.n_candidates()];
            let sol = solve_flow(&g, &extra).unwrap();
            // A valid unit path: exactly one selection per frame, each within
            // its layer, and consecutive picks connected by a transition.
            assert_eq!(sol.selection.len(), g.n_frames());
            for (t, &n) in sol.selection.iter().enumerate() {
                assert!(n < g.layers[t].len());
            }
        }
    }

    #[test]
    fn large_extra_unary_pushes_selection_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let g = FlowGraph {
            layers: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            transitions: vec![vec![vec![0.0, 0.0], vec![0.0, 0.0]]],
            c_start: 10.0,
            c_end: 10.0,
        };
        let zero = vec![0.0; 4];
        let base = solve_flow(&g, &zero).unwrap();
        assert_eq!(base.selection, vec![0, 0]);
        let mut extra = zero.clone();
        extra[0] = 100.0; // hit the selected candidate of frame 0
        let moved = solve_flow(&g, &extra).unwrap();
        assert_ne!(moved.selection[0], 0);
        let _ = rng.gen_range(0..2);
    }

    #[test]
    fn broken_chain_is_reported() {
        let g = FlowGraph {
            layers: vec![vec![1.0], vec![], vec![2.0]],
            transitions: vec![vec![vec![]], vec![]],
            c_start: 10.0,
            c_end: 10.0,
        };
        match solve_flow(&g, &[0.0; 2]) {
            Err(Error::BrokenChain(1)) => {}
            other => panic!("expected broken chain at layer 1, got {other:?}"),
        }
    }
}
