//! Superpixel spatio-temporal graph, the multi-label CRF energy over it, and
//! the alpha-expansion minimizer.

use crate::error::{Error, Result};
use crate::gmm::ConfidenceMap;
use crate::maxflow::{CutSide, MaxFlowGraph};
use crate::optflow::FlowField;
use crate::scene::round_half_up;
use crate::slic::{Superpixel, SuperpixelMap};

/// Undirected weighted edge between two graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// CRF graph over the superpixels of a segment: one node per superpixel per
/// frame, spatial edges between boundary-sharing superpixels within a frame,
/// temporal edges between consecutive frames.
#[derive(Debug, Clone)]
pub struct STGraph {
    /// Node id of frame f's superpixel s is `frame_offsets[f] + s`.
    pub frame_offsets: Vec<usize>,
    pub n_nodes: usize,
    pub spatial_edges: Vec<Edge>,
    pub temporal_edges: Vec<Edge>,
    /// Multiplier on spatial edge weights.
    pub beta1: f64,
    /// Multiplier on temporal edge weights.
    pub beta2: f64,
}

impl STGraph {
    pub fn node(&self, frame: usize, sp: u32) -> usize {
        self.frame_offsets[frame] + sp as usize
    }
}

/// Pairwise affinity of Eq-style color/flow similarity: `D_c * D_f` with the
/// flow term clamped to [0, 1] and defined as 1 when either mean flow is
/// (near) zero.
pub fn pairwise_weight(s_k: &Superpixel, s_l: &Superpixel) -> f64 {
    let dl = s_k.mean_lab[0] - s_l.mean_lab[0];
    let da = s_k.mean_lab[1] - s_l.mean_lab[1];
    let db = s_k.mean_lab[2] - s_l.mean_lab[2];
    let d_c = 1.0 / (1.0 + (dl * dl + da * da + db * db).sqrt());

    let (u1, v1) = s_k.mean_flow;
    let (u2, v2) = s_l.mean_flow;
    let n1 = (u1 * u1 + v1 * v1).sqrt();
    let n2 = (u2 * u2 + v2 * v2).sqrt();
    let d_f = if n1 < 1e-3 || n2 < 1e-3 {
        1.0
    } else {
        ((u1 * u2 + v1 * v2) / (n1 * n2)).max(0.0)
    };
    d_c * d_f
}

/// Temporal neighbor pairs between two consecutive frames: `(s_k, s_l)` is an
/// edge when at least one third of `s_k`'s pixels land inside `s_l` under the
/// flow of frame t. Out-of-frame landings count toward no superpixel.
pub fn temporal_neighbors(
    sp_t: &SuperpixelMap,
    sp_t1: &SuperpixelMap,
    flow: &FlowField,
) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    for sp in &sp_t.superpixels {
        let mut counts: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
        for &p in &sp.pixels {
            let (x, y) = (p as usize % sp_t.width, p as usize / sp_t.width);
            let (u, v) = flow.at(x, y);
            let nx = round_half_up(x as f64 + u as f64);
            let ny = round_half_up(y as f64 + v as f64);
            if nx < 0 || ny < 0 || nx >= sp_t1.width as i64 || ny >= sp_t1.height as i64 {
                continue;
            }
            let target = sp_t1.id_at(nx as usize, ny as usize);
            *counts.entry(target).or_insert(0) += 1;
        }
        for (target, count) in counts {
            if 3 * count >= sp.pixels.len() {
                edges.push((sp.id, target));
            }
        }
    }
    edges
}

/// Spatial neighbor pairs: superpixels sharing a 4-neighbor pixel boundary.
pub fn spatial_neighbors(map: &SuperpixelMap) -> Vec<(u32, u32)> {
    let mut pairs = std::collections::BTreeSet::new();
    for y in 0..map.height {
        for x in 0..map.width {
            let a = map.id_at(x, y);
            if x + 1 < map.width {
                let b = map.id_at(x + 1, y);
                if a != b {
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
            if y + 1 < map.height {
                let b = map.id_at(x, y + 1);
                if a != b {
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    pairs.into_iter().collect()
}

/// Assemble the segment graph. `maps[f]` must already carry mean flows for
/// frames that have a forward flow field.
pub fn build_stgraph(maps: &[SuperpixelMap], beta1: f64, beta2: f64) -> STGraph {
    let mut frame_offsets = Vec::with_capacity(maps.len());
    let mut n_nodes = 0;
    for map in maps {
        frame_offsets.push(n_nodes);
        n_nodes += map.len();
    }

    let mut spatial_edges = Vec::new();
    for (f, map) in maps.iter().enumerate() {
        for (a, b) in spatial_neighbors(map) {
            let w = pairwise_weight(&map.superpixels[a as usize], &map.superpixels[b as usize]);
            spatial_edges.push(Edge {
                a: frame_offsets[f] + a as usize,
                b: frame_offsets[f] + b as usize,
                weight: w,
            });
        }
    }
    STGraph {
        frame_offsets,
        n_nodes,
        spatial_edges,
        temporal_edges: Vec::new(),
        beta1,
        beta2,
    }
}

/// Add temporal edges for the frame pair `(f, f+1)` using that pair's flow.
pub fn add_temporal_edges(
    graph: &mut STGraph,
    maps: &[SuperpixelMap],
    f: usize,
    flow: &FlowField,
) {
    for (a, b) in temporal_neighbors(&maps[f], &maps[f + 1], flow) {
        let w = pairwise_weight(
            &maps[f].superpixels[a as usize],
            &maps[f + 1].superpixels[b as usize],
        );
        graph.temporal_edges.push(Edge {
            a: graph.frame_offsets[f] + a as usize,
            b: graph.frame_offsets[f + 1] + b as usize,
            weight: w,
        });
    }
}

/// Total assignment of graph nodes to labels 0 (background) .. N.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub labels: Vec<u8>,
}

impl Labeling {
    pub fn uniform(n_nodes: usize, label: u8) -> Self {
        Labeling {
            labels: vec![label; n_nodes],
        }
    }
}

/// Unary costs built from confidence maps: label 0 uses the background map,
/// label s+1 uses target slot s's map; each entry is the negative log of the
/// mean confidence over the superpixel's pixels.
pub fn build_unaries(
    maps: &[SuperpixelMap],
    bg: &[ConfidenceMap],
    fg: &[Vec<ConfidenceMap>],
) -> Vec<Vec<f64>> {
    let n_slots = fg.first().map_or(0, |f| f.len());
    let mut unaries = Vec::new();
    for (f, map) in maps.iter().enumerate() {
        for sp in &map.superpixels {
            let mut row = Vec::with_capacity(n_slots + 1);
            let mean_of = |cm: &ConfidenceMap| {
                let s: f64 = sp.pixels.iter().map(|&p| cm.values[p as usize]).sum();
                s / sp.pixels.len() as f64
            };
            row.push(-mean_of(&bg[f]).ln());
            for s in 0..n_slots {
                row.push(-mean_of(&fg[f][s]).ln());
            }
            unaries.push(row);
        }
    }
    unaries
}

/// Full CRF energy of a labeling: unaries plus Potts pairwise terms weighted
/// by the edge affinities and the beta multipliers.
pub fn crf_energy(graph: &STGraph, labeling: &Labeling, unaries: &[Vec<f64>]) -> Result<f64> {
    if labeling.labels.len() != graph.n_nodes || unaries.len() != graph.n_nodes {
        return Err(Error::invalid(format!(
            "energy over {} nodes with {} labels / {} unary rows",
            graph.n_nodes,
            labeling.labels.len(),
            unaries.len()
        )));
    }
    let mut e = 0.0;
    for (node, &label) in labeling.labels.iter().enumerate() {
        let row = &unaries[node];
        if label as usize >= row.len() {
            return Err(Error::invalid(format!(
                "missing unary entry for node {node} label {label}"
            )));
        }
        e += row[label as usize];
    }
    for edge in &graph.spatial_edges {
        if labeling.labels[edge.a] != labeling.labels[edge.b] {
            e += graph.beta1 * edge.weight;
        }
    }
    for edge in &graph.temporal_edges {
        if labeling.labels[edge.a] != labeling.labels[edge.b] {
            e += graph.beta2 * edge.weight;
        }
    }
    Ok(e)
}

/// Minimize the CRF energy by cycling expansion moves over all labels until a
/// full cycle brings no decrease. The returned energy never exceeds the
/// init's. Pairwise weights must be non-negative.
pub fn alpha_expansion(
    graph: &STGraph,
    unaries: &[Vec<f64>],
    n_labels: usize,
    init: &Labeling,
) -> Result<Labeling> {
    let mut current = init.clone();
    let mut energy = crf_energy(graph, &current, unaries)?;

    let weighted: Vec<(usize, usize, f64)> = graph
        .spatial_edges
        .iter()
        .map(|e| (e.a, e.b, graph.beta1 * e.weight))
        .chain(
            graph
                .temporal_edges
                .iter()
                .map(|e| (e.a, e.b, graph.beta2 * e.weight)),
        )
        .collect();

    for _cycle in 0..50 {
        let mut improved = false;
        for alpha in 0..n_labels as u8 {
            let candidate = expansion_move(graph, unaries, &weighted, &current, alpha);
            let cand_energy = crf_energy(graph, &candidate, unaries)?;
            debug_assert!(
                cand_energy <= energy + 1e-9,
                "expansion move increased energy: {energy} -> {cand_energy}"
            );
            if cand_energy < energy - 1e-12 {
                current = candidate;
                energy = cand_energy;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    Ok(current)
}

/// One binary expansion move: every node may switch to `alpha` or keep its
/// label. Solved exactly as a min-cut; keep = source side, switch = sink side.
fn expansion_move(
    graph: &STGraph,
    unaries: &[Vec<f64>],
    weighted_edges: &[(usize, usize, f64)],
    current: &Labeling,
    alpha: u8,
) -> Labeling {
    // Compact ids for the movable (non-alpha) nodes.
    let mut node_of = vec![usize::MAX; graph.n_nodes];
    let mut movable = Vec::new();
    for (n, &l) in current.labels.iter().enumerate() {
        if l != alpha {
            node_of[n] = movable.len();
            movable.push(n);
        }
    }
    if movable.is_empty() {
        return current.clone();
    }

    let mut g = MaxFlowGraph::new(movable.len());
    for &n in &movable {
        let keep_cost = unaries[n][current.labels[n] as usize];
        let switch_cost = unaries[n][alpha as usize];
        // Shift both terminal capacities to be non-negative.
        let base = keep_cost.min(switch_cost);
        g.add_terminal(node_of[n], switch_cost - base, keep_cost - base);
    }

    for &(a, b, w) in weighted_edges {
        if w <= 0.0 {
            continue;
        }
        let (la, lb) = (current.labels[a], current.labels[b]);
        match (la == alpha, lb == alpha) {
            (true, true) => {}
            (true, false) => {
                // Fixed-alpha neighbor: pay w when b keeps its label.
                g.add_terminal(node_of[b], 0.0, w);
            }
            (false, true) => {
                g.add_terminal(node_of[a], 0.0, w);
            }
            (false, false) => {
                if la == lb {
                    g.add_edge(node_of[a], node_of[b], w, w);
                } else {
                    // w[x_b = keep] + w[x_a = keep, x_b = switch]
                    g.add_terminal(node_of[b], 0.0, w);
                    g.add_edge(node_of[a], node_of[b], w, 0.0);
                }
            }
        }
    }

    let (_cut, sides) = g.solve();
    let mut labels = current.labels.clone();
    for (compact, &n) in movable.iter().enumerate() {
        if sides[compact] == CutSide::Sink {
            labels[n] = alpha;
        }
    }
    Labeling { labels }
}

/// Expand a frame's node labels into a pixel mask, mapping label slots to
/// target ids through `slot_ids` (slot s -> target id `slot_ids[s]`).
pub fn labeling_to_mask(
    graph: &STGraph,
    labeling: &Labeling,
    map: &SuperpixelMap,
    frame: usize,
    slot_ids: &[u32],
) -> crate::scene::PixelMask {
    let mut mask = crate::scene::PixelMask::background(map.width, map.height);
    for sp in &map.superpixels {
        let label = labeling.labels[graph.node(frame, sp.id)];
        if label == 0 {
            continue;
        }
        let id = slot_ids[label as usize - 1] as u8;
        for &p in &sp.pixels {
            mask.labels[p as usize] = id;
        }
    }
    mask
}
