//! Coupling of the tracking and segmentation subproblems: the box/label
//! agreement energy, the Lagrangian split with subgradient updates, the
//! spatial-constraint penalties, and the per-segment solve loop.

use crate::error::Result;
use crate::scene::{center_distance, iou, BBox, PixelMask};
use crate::slic::SuperpixelMap;
use crate::stgraph::{alpha_expansion, crf_energy, labeling_to_mask, Labeling, STGraph};
use crate::trackflow::{solve_flow, FlowGraph};

/// Shape weight over a unit box: a separable raised cosine peaking at the
/// box center and falling to zero at the borders.
#[derive(Debug, Clone, Copy)]
pub struct ShapePrior {
    /// Value at the box center.
    pub peak: f64,
}

impl Default for ShapePrior {
    fn default() -> Self {
        ShapePrior { peak: 1.0 }
    }
}

impl ShapePrior {
    /// Weight at relative coordinates within the box; zero outside [0,1]^2.
    pub fn weight(&self, rel_x: f64, rel_y: f64) -> f64 {
        if !(0.0..=1.0).contains(&rel_x) || !(0.0..=1.0).contains(&rel_y) {
            return 0.0;
        }
        let fx = 1.0 - (2.0 * std::f64::consts::PI * rel_x).cos();
        let fy = 1.0 - (2.0 * std::f64::consts::PI * rel_y).cos();
        self.peak * 0.25 * fx * fy
    }

    /// Weight at a pixel (by its center) under a concrete box.
    pub fn at_pixel(&self, bbox: &BBox, px: usize, py: usize) -> f64 {
        let rel_x = ((px as f64 + 0.5 - bbox.x) / bbox.w).clamp(0.0, 1.0);
        let rel_y = ((py as f64 + 0.5 - bbox.y) / bbox.h).clamp(0.0, 1.0);
        self.weight(rel_x, rel_y)
    }
}

/// Coupling weights: the in-box shape prior and the constant per-pixel
/// penalty for target labels outside the box.
#[derive(Debug, Clone, Copy)]
pub struct CoupleParams {
    pub prior: ShapePrior,
    /// Per-pixel weight for foreground labels outside the box.
    pub phi0: f64,
}

impl Default for CoupleParams {
    fn default() -> Self {
        CoupleParams {
            prior: ShapePrior::default(),
            phi0: 0.05,
        }
    }
}

/// Coupling cost of one target box against one frame's mask: shape-weighted
/// penalties for non-target labels inside the box plus `phi0` per target
/// pixel outside it. `total_labeled` is the mask-wide count of `target_id`.
pub fn couple_cost_for_box(
    bbox: &BBox,
    target_id: u8,
    mask: &PixelMask,
    total_labeled: usize,
    params: &CoupleParams,
) -> f64 {
    let (x0, y0, x1, y1) = bbox.pixel_rect(mask.width, mask.height);
    let mut inside_term = 0.0;
    let mut inside_count = 0usize;
    for py in y0..y1 {
        for px in x0..x1 {
            if mask.label_at(px, py) == target_id {
                inside_count += 1;
            } else {
                inside_term += params.prior.at_pixel(bbox, px, py);
            }
        }
    }
    let outside = total_labeled - inside_count;
    inside_term + params.phi0 * outside as f64
}

/// Full coupling energy over a segment: one box per live target per frame,
/// one mask per frame.
pub fn couple_energy(
    boxes: &[Vec<(u8, BBox)>],
    masks: &[PixelMask],
    params: &CoupleParams,
) -> f64 {
    assert_eq!(boxes.len(), masks.len());
    let mut total = 0.0;
    for (frame_boxes, mask) in boxes.iter().zip(masks) {
        for &(id, ref bbox) in frame_boxes {
            total += couple_cost_for_box(bbox, id, mask, mask.count(id), params);
        }
    }
    total
}

/// Subgradient step size at iteration t.
pub fn step_size(t: usize) -> f64 {
    1.0 / (10.0 + t as f64)
}

/// Boxes agree when their overlap exceeds the threshold; agreed elements are
/// skipped by the dual update.
pub fn agreement(box0: &BBox, box1: &BBox, overlap: f64) -> bool {
    iou(box0, box1) > overlap
}

/// Dual variables of a segment solve, indexed over the concatenated
/// candidate ids of all targets.
#[derive(Debug, Clone)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub t: usize,
    pub history: Vec<IterationRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iter: usize,
    pub disagreements: usize,
    pub dual_value: f64,
    pub primal_value: f64,
}

impl DualState {
    pub fn new(n_candidates: usize) -> Self {
        DualState {
            lambda: vec![0.0; n_candidates],
            gamma: vec![0.0; n_candidates],
            t: 0,
            history: Vec::new(),
        }
    }
}

/// One target's tracking subproblem within a segment.
#[derive(Debug, Clone)]
pub struct TargetProblem {
    pub target_id: u32,
    pub flow_graph: FlowGraph,
    /// Candidate boxes per segment frame, aligned with the flow graph layers.
    pub candidates: Vec<Vec<BBox>>,
    /// Offset of this target's candidates in the concatenated dual vectors.
    pub lambda_offset: usize,
}

impl TargetProblem {
    pub fn n_candidates(&self) -> usize {
        self.candidates.iter().map(|f| f.len()).sum()
    }

    /// Global dual index of a frame-local candidate.
    pub fn dual_index(&self, frame: usize, cand: usize) -> usize {
        let mut off = self.lambda_offset;
        for f in &self.candidates[..frame] {
            off += f.len();
        }
        off + cand
    }
}

/// Everything a segment solve needs, assembled by the pipeline (or directly
/// by tests).
#[derive(Debug, Clone)]
pub struct SegmentProblem {
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub targets: Vec<TargetProblem>,
    /// Mask label value for each target slot.
    pub slot_ids: Vec<u32>,
    pub graph: STGraph,
    pub maps: Vec<SuperpixelMap>,
    /// Node x (1 + n_targets) segmentation unaries.
    pub base_unaries: Vec<Vec<f64>>,
    pub params: CoupleParams,
}

impl SegmentProblem {
    pub fn total_candidates(&self) -> usize {
        self.targets.iter().map(|t| t.n_candidates()).sum()
    }
}

/// A box selection: per target, one candidate index per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSelection {
    pub per_target: Vec<Vec<usize>>,
}

impl TrackSelection {
    pub fn boxes(&self, problem: &SegmentProblem) -> Vec<Vec<(u8, BBox)>> {
        let mut frames = vec![Vec::new(); problem.n_frames];
        for (slot, sel) in self.per_target.iter().enumerate() {
            let target = &problem.targets[slot];
            let id = problem.slot_ids[slot] as u8;
            for (f, &c) in sel.iter().enumerate() {
                frames[f].push((id, target.candidates[f][c]));
            }
        }
        frames
    }

    /// lambda . Y for this selection.
    pub fn dot(&self, problem: &SegmentProblem, dual: &[f64]) -> f64 {
        let mut sum = 0.0;
        for (slot, sel) in self.per_target.iter().enumerate() {
            let target = &problem.targets[slot];
            for (f, &c) in sel.iter().enumerate() {
                sum += dual[target.dual_index(f, c)];
            }
        }
        sum
    }
}

/// Tracking subproblem: per-target min-cost flow with `lambda + gamma` folded
/// into the candidate unaries. Returns the selection and the summed value
/// (which includes the dual terms).
pub fn solve_g(problem: &SegmentProblem, lambda: &[f64], gamma: &[f64]) -> Result<(TrackSelection, f64)> {
    let mut per_target = Vec::with_capacity(problem.targets.len());
    let mut value = 0.0;
    for target in &problem.targets {
        let n = target.n_candidates();
        let extra: Vec<f64> = (0..n)
            .map(|i| lambda[target.lambda_offset + i] + gamma[target.lambda_offset + i])
            .collect();
        let sol = solve_flow(&target.flow_graph, &extra)?;
        value += sol.total_cost;
        per_target.push(sol.selection);
    }
    Ok((TrackSelection { per_target }, value))
}

/// Raw tracking energy of a selection (no dual terms).
pub fn track_energy(problem: &SegmentProblem, sel: &TrackSelection) -> f64 {
    problem
        .targets
        .iter()
        .zip(&sel.per_target)
        .map(|(t, s)| t.flow_graph.path_cost(s))
        .sum()
}

/// Expand a labeling into per-frame pixel masks.
pub fn expand_masks(problem: &SegmentProblem, labeling: &Labeling) -> Vec<PixelMask> {
    (0..problem.n_frames)
        .map(|f| {
            labeling_to_mask(
                &problem.graph,
                labeling,
                &problem.maps[f],
                f,
                &problem.slot_ids,
            )
        })
        .collect()
}

/// Per-node additions to the segmentation unaries realizing the coupling
/// energy for a fixed box selection. Exact per superpixel: summing the
/// pixel-level shape prior and outside-penalty terms.
fn couple_unary_rows(problem: &SegmentProblem, boxes: &[Vec<(u8, BBox)>]) -> Vec<Vec<f64>> {
    let n_slots = problem.slot_ids.len();
    let n_nodes = problem.graph.n_nodes;
    let mut theta = vec![vec![0.0f64; n_slots]; n_nodes];
    let mut inside = vec![vec![0usize; n_slots]; n_nodes];

    for (f, frame_boxes) in boxes.iter().enumerate() {
        let map = &problem.maps[f];
        for (slot, &(_, ref bbox)) in frame_boxes.iter().enumerate() {
            let (x0, y0, x1, y1) = bbox.pixel_rect(problem.width, problem.height);
            for py in y0..y1 {
                for px in x0..x1 {
                    let node = problem.graph.node(f, map.id_at(px, py));
                    theta[node][slot] += problem.params.prior.at_pixel(bbox, px, py);
                    inside[node][slot] += 1;
                }
            }
        }
    }

    let mut rows = vec![vec![0.0f64; n_slots + 1]; n_nodes];
    for f in 0..problem.n_frames {
        let map = &problem.maps[f];
        for sp in &map.superpixels {
            let node = problem.graph.node(f, sp.id);
            let theta_total: f64 = theta[node].iter().sum();
            rows[node][0] = theta_total;
            for slot in 0..n_slots {
                let outside = sp.pixels.len() - inside[node][slot];
                rows[node][slot + 1] =
                    theta_total - theta[node][slot] + problem.params.phi0 * outside as f64;
            }
        }
    }
    rows
}

/// Diagnostics of one segmentation-side solve.
#[derive(Debug, Clone)]
pub struct HSolveReport {
    /// Objective `E_couple + E_seg - lambda . Y1` after each A/B step.
    pub objectives: Vec<f64>,
    /// True when the warm-started candidate labeling won over the fresh
    /// alternation.
    pub reused_best: bool,
}

fn h_objective(
    problem: &SegmentProblem,
    lambda: &[f64],
    y1: &TrackSelection,
    labeling: &Labeling,
) -> Result<f64> {
    let masks = expand_masks(problem, labeling);
    let e_seg = crf_energy(&problem.graph, labeling, &problem.base_unaries)?;
    let e_couple = couple_energy(&y1.boxes(problem), &masks, &problem.params);
    Ok(e_seg + e_couple - y1.dot(problem, lambda))
}

/// Exact per-frame argmin of `couple_cost - lambda` for each target, given a
/// fixed labeling's masks. Ties resolve to the lowest candidate index.
fn step_b(
    problem: &SegmentProblem,
    lambda: &[f64],
    masks: &[PixelMask],
) -> TrackSelection {
    let mut per_target = Vec::with_capacity(problem.targets.len());
    for (slot, target) in problem.targets.iter().enumerate() {
        let id = problem.slot_ids[slot] as u8;
        let mut sel = Vec::with_capacity(problem.n_frames);
        for (f, cands) in target.candidates.iter().enumerate() {
            let total = masks[f].count(id);
            let mut best = 0usize;
            let mut best_v = f64::INFINITY;
            for (c, bbox) in cands.iter().enumerate() {
                let v = couple_cost_for_box(bbox, id, &masks[f], total, &problem.params)
                    - lambda[target.dual_index(f, c)];
                if v < best_v {
                    best_v = v;
                    best = c;
                }
            }
            sel.push(best);
        }
        per_target.push(sel);
    }
    TrackSelection { per_target }
}

/// Segmentation-plus-coupling subproblem: alternate (A) an expansion solve of
/// the CRF with the coupling folded into the unaries for fixed boxes, and (B)
/// the exact candidate argmin for fixed labels. Optionally also evaluates a
/// previously seen labeling and keeps whichever scores lower, so the returned
/// objective never regresses past the best known labeling.
pub fn solve_h(
    problem: &SegmentProblem,
    lambda: &[f64],
    y1_init: &TrackSelection,
    z_init: &Labeling,
    z_alternative: Option<&Labeling>,
) -> Result<(TrackSelection, Labeling, f64, HSolveReport)> {
    let n_labels = problem.slot_ids.len() + 1;
    let mut y1 = y1_init.clone();
    let mut z = z_init.clone();
    let mut objectives = Vec::new();

    for _round in 0..2 {
        // Step A: expansion over base + coupling unaries.
        let rows = couple_unary_rows(problem, &y1.boxes(problem));
        let unaries: Vec<Vec<f64>> = problem
            .base_unaries
            .iter()
            .zip(&rows)
            .map(|(b, r)| b.iter().zip(r).map(|(x, y)| x + y).collect())
            .collect();
        let new_z = alpha_expansion(&problem.graph, &unaries, n_labels, &z)?;
        let changed_z = new_z != z;
        z = new_z;
        objectives.push(h_objective(problem, lambda, &y1, &z)?);

        // Step B: exact candidate argmin for the new labels.
        let masks = expand_masks(problem, &z);
        let new_y1 = step_b(problem, lambda, &masks);
        let changed_y = new_y1 != y1;
        y1 = new_y1;
        objectives.push(h_objective(problem, lambda, &y1, &z)?);

        if !changed_z && !changed_y {
            break;
        }
    }

    let mut value = *objectives.last().unwrap();
    let mut reused_best = false;
    if let Some(zb) = z_alternative {
        let masks = expand_masks(problem, zb);
        let yb = step_b(problem, lambda, &masks);
        let vb = h_objective(problem, lambda, &yb, zb)?;
        if vb < value {
            value = vb;
            y1 = yb;
            z = zb.clone();
            reused_best = true;
        }
    }

    Ok((
        y1,
        z,
        value,
        HSolveReport {
            objectives,
            reused_best,
        },
    ))
}

/// Update the spatial-constraint penalties: a selected box that sits within
/// `delta` pixels of another target's selected box while owning no supporting
/// pixel in the labeling gets its penalty raised by the step size. Penalties
/// never decrease.
pub fn update_gamma(
    state: &mut DualState,
    problem: &SegmentProblem,
    y0: &TrackSelection,
    masks: &[PixelMask],
    delta: f64,
    alpha_t: f64,
) {
    let boxes = y0.boxes(problem);
    for (slot, target) in problem.targets.iter().enumerate() {
        let id = problem.slot_ids[slot] as u8;
        for (f, &c) in y0.per_target[slot].iter().enumerate() {
            let bbox = &target.candidates[f][c];
            let near_other = boxes[f]
                .iter()
                .enumerate()
                .any(|(other, &(_, ref ob))| {
                    other != slot && center_distance(bbox, ob) < delta
                });
            if !near_other {
                continue;
            }
            let (x0, y0r, x1, y1r) = bbox.pixel_rect(problem.width, problem.height);
            let mut supported = false;
            'scan: for py in y0r..y1r {
                for px in x0..x1 {
                    if masks[f].label_at(px, py) == id {
                        supported = true;
                        break 'scan;
                    }
                }
            }
            if !supported {
                state.gamma[target.dual_index(f, c)] += alpha_t;
            }
        }
    }
}

/// Subgradient update on lambda: for every (target, frame) whose two
/// solutions disagree, raise the tracking pick and lower the segmentation
/// pick by the step size. Increments the iteration counter.
pub fn subgradient_step(
    state: &mut DualState,
    problem: &SegmentProblem,
    y0: &TrackSelection,
    y1: &TrackSelection,
    overlap: f64,
) {
    let alpha = step_size(state.t);
    for (slot, target) in problem.targets.iter().enumerate() {
        for f in 0..problem.n_frames {
            let c0 = y0.per_target[slot][f];
            let c1 = y1.per_target[slot][f];
            let b0 = &target.candidates[f][c0];
            let b1 = &target.candidates[f][c1];
            if agreement(b0, b1, overlap) {
                continue;
            }
            state.lambda[target.dual_index(f, c0)] += alpha;
            state.lambda[target.dual_index(f, c1)] -= alpha;
        }
    }
    state.t += 1;
}

fn count_disagreements(problem: &SegmentProblem, y0: &TrackSelection, y1: &TrackSelection, overlap: f64) -> usize {
    let mut n = 0;
    for (slot, target) in problem.targets.iter().enumerate() {
        for f in 0..problem.n_frames {
            let b0 = &target.candidates[f][y0.per_target[slot][f]];
            let b1 = &target.candidates[f][y1.per_target[slot][f]];
            if !agreement(b0, b1, overlap) {
                n += 1;
            }
        }
    }
    n
}

/// Knobs of the per-segment dual loop.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub agreement_overlap: f64,
    /// Center-distance threshold of the spatial constraint, in pixels.
    pub delta: f64,
    /// Keep lambda and gamma at zero (decoupled baseline behavior).
    pub freeze_dual: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iters: 50,
            agreement_overlap: 0.8,
            delta: 15.0,
            freeze_dual: false,
        }
    }
}

/// Result of one segment solve.
#[derive(Debug, Clone)]
pub struct SegmentSolution {
    pub selection: TrackSelection,
    /// Per target slot, per frame.
    pub boxes: Vec<Vec<BBox>>,
    pub labeling: Labeling,
    pub masks: Vec<PixelMask>,
    pub converged: bool,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
}

/// Run the subgradient loop on one segment: alternate the two subproblem
/// solves, stop when every (target, frame) pair agrees, otherwise update the
/// dual variables; on hitting the iteration cap, fall back to the iteration
/// with the lowest primal energy.
pub fn run_segment_solve(problem: &SegmentProblem, opts: &SolveOptions) -> Result<SegmentSolution> {
    let n = problem.total_candidates();
    let mut state = DualState::new(n);
    let mut z = Labeling::uniform(problem.graph.n_nodes, 0);
    let mut best: Option<(f64, TrackSelection, Labeling)> = None;
    let mut converged = false;
    let mut final_pair: Option<(TrackSelection, Labeling)> = None;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        iterations = iter + 1;
        let (y0, _) = solve_g(problem, &state.lambda, &state.gamma)?;
        // Dual value uses the gamma-free tracking bound.
        let zero_gamma = vec![0.0; n];
        let (_, g_pure) = solve_g(problem, &state.lambda, &zero_gamma)?;

        let best_z = best.as_ref().map(|(_, _, z)| z.clone());
        let (y1, new_z, h_val, _report) =
            solve_h(problem, &state.lambda, &y0, &z, best_z.as_ref())?;
        z = new_z;

        let masks = expand_masks(problem, &z);
        let e_track = track_energy(problem, &y0);
        let e_seg = crf_energy(&problem.graph, &z, &problem.base_unaries)?;
        let e_couple = couple_energy(&y0.boxes(problem), &masks, &problem.params);
        let primal = e_track + e_couple + e_seg;
        let dual = g_pure + h_val;
        let disagreements = count_disagreements(problem, &y0, &y1, opts.agreement_overlap);

        state.history.push(IterationRecord {
            iter,
            disagreements,
            dual_value: dual,
            primal_value: primal,
        });

        if best.as_ref().map_or(true, |(p, _, _)| primal < *p) {
            best = Some((primal, y0.clone(), z.clone()));
        }

        if disagreements == 0 {
            converged = true;
            final_pair = Some((y0, z.clone()));
            break;
        }

        if !opts.freeze_dual {
            let alpha = step_size(state.t);
            update_gamma(&mut state, problem, &y0, &masks, opts.delta, alpha);
            subgradient_step(&mut state, problem, &y0, &y1, opts.agreement_overlap);
        } else {
            state.t += 1;
        }
    }

    let (selection, labeling) = match final_pair {
        Some(pair) => pair,
        None => {
            let (_, y, z) = best.expect("at least one iteration ran");
            (y, z)
        }
    };

    let masks = expand_masks(problem, &labeling);
    let boxes = selection
        .per_target
        .iter()
        .enumerate()
        .map(|(slot, sel)| {
            sel.iter()
                .enumerate()
                .map(|(f, &c)| problem.targets[slot].candidates[f][c])
                .collect()
        })
        .collect();

    Ok(SegmentSolution {
        selection,
        boxes,
        labeling,
        masks,
        converged,
        iterations,
        history: state.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stgraph::Edge;

    #[test]
    fn shape_prior_peaks_at_center_and_dies_at_border() {
        let p = ShapePrior::default();
        assert!((p.weight(0.5, 0.5) - 1.0).abs() < 1e-12);
        assert_eq!(p.weight(0.0, 0.5), 0.0);
        assert_eq!(p.weight(0.5, 1.0), 0.0);
        // Monotone toward the center along the axis.
        let mut prev = 0.0;
        for i in 0..=10 {
            let v = p.weight(i as f64 * 0.05, 0.5);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
        let scaled = ShapePrior { peak: 0.1 };
        assert!((scaled.weight(0.5, 0.5) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn couple_cost_perfect_agreement_is_zero() {
        let mut mask = PixelMask::background(10, 10);
        for y in 2..6 {
            for x in 3..7 {
                mask.set(x, y, 1);
            }
        }
        let bbox = BBox::new(3.0, 2.0, 4.0, 4.0, 0);
        let params = CoupleParams::default();
        let cost = couple_cost_for_box(&bbox, 1, &mask, mask.count(1), &params);
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn couple_cost_single_outside_pixel_is_phi0() {
        let mut mask = PixelMask::background(10, 10);
        mask.set(9, 9, 1); // far outside the box
        let bbox = BBox::new(0.0, 0.0, 4.0, 4.0, 0);
        let params = CoupleParams::default();
        let cost = couple_cost_for_box(&bbox, 1, &mask, 1, &params);
        assert!((cost - params.phi0).abs() < 1e-12);
    }

    #[test]
    fn couple_cost_hand_summed_theta() {
        // 4x4 box fully labeled except three interior background pixels.
        let bbox = BBox::new(0.0, 0.0, 4.0, 4.0, 0);
        let mut mask = PixelMask::background(8, 8);
        for y in 0..4 {
            for x in 0..4 {
                mask.set(x, y, 1);
            }
        }
        let holes = [(1usize, 1usize), (2, 1), (3, 2)];
        for &(x, y) in &holes {
            mask.set(x, y, 0);
        }
        let params = CoupleParams::default();
        let cost = couple_cost_for_box(&bbox, 1, &mask, mask.count(1), &params);

        // Hand evaluation of the raised cosine at the hole centers:
        // rel = (x + 0.5) / 4; theta = 1/4 (1 - cos 2 pi rx)(1 - cos 2 pi ry).
        let theta = |x: usize, y: usize| {
            let rx = (x as f64 + 0.5) / 4.0;
            let ry = (y as f64 + 0.5) / 4.0;
            0.25 * (1.0 - (2.0 * std::f64::consts::PI * rx).cos())
                * (1.0 - (2.0 * std::f64::consts::PI * ry).cos())
        };
        let want: f64 = holes.iter().map(|&(x, y)| theta(x, y)).sum();
        assert!((cost - want).abs() < 1e-12, "{cost} vs {want}");
    }

    #[test]
    fn step_sizes_follow_the_schedule() {
        assert!((step_size(0) - 0.1).abs() < 1e-15);
        assert!((step_size(10) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn agreement_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0, 0);
        assert!(agreement(&a, &a, 0.8));
        let b = BBox::new(100.0, 0.0, 10.0, 10.0, 0);
        assert!(!agreement(&a, &b, 0.8));
        let c = BBox::new(5.0, 0.0, 10.0, 10.0, 0); // IoU 1/3
        assert!(!agreement(&a, &c, 0.8));
    }

    /// Minimal two-frame problem with a 2x2 superpixel grid per frame and a
    /// couple of candidates per target.
    fn toy_problem(n_targets: usize) -> SegmentProblem {
        let (w, h) = (8usize, 8usize);
        let n_frames = 2;
        let mut maps = Vec::new();
        for _ in 0..n_frames {
            let mut assignment = vec![0u32; w * h];
            for y in 0..h {
                for x in 0..w {
                    assignment[y * w + x] = ((y / 4) * 2 + x / 4) as u32;
                }
            }
            let mut pixels: Vec<Vec<u32>> = vec![Vec::new(); 4];
            for (i, &a) in assignment.iter().enumerate() {
                pixels[a as usize].push(i as u32);
            }
            let superpixels = (0..4)
                .map(|id| crate::slic::Superpixel {
                    id,
                    pixels: pixels[id as usize].clone(),
                    centroid: (0.0, 0.0),
                    mean_lab: [id as f64 * 10.0, 0.0, 0.0],
                    mean_flow: (0.0, 0.0),
                })
                .collect();
            maps.push(SuperpixelMap {
                width: w,
                height: h,
                assignment,
                superpixels,
            });
        }
        let graph = STGraph {
            frame_offsets: vec![0, 4],
            n_nodes: 8,
            spatial_edges: vec![
                Edge { a: 0, b: 1, weight: 0.3 },
                Edge { a: 2, b: 3, weight: 0.3 },
                Edge { a: 4, b: 5, weight: 0.3 },
                Edge { a: 6, b: 7, weight: 0.3 },
            ],
            temporal_edges: vec![Edge { a: 0, b: 4, weight: 0.2 }],
            beta1: 1.0,
            beta2: 5.0,
        };
        // Mild preference for background everywhere.
        let base_unaries = vec![vec![0.1; n_targets + 1]; 8];

        let mut targets = Vec::new();
        let mut offset = 0;
        for slot in 0..n_targets {
            let make_boxes = |f: usize| {
                vec![
                    BBox::new(0.0, 0.0, 4.0, 4.0, f),
                    BBox::new(4.0, 4.0, 4.0, 4.0, f),
                ]
            };
            let candidates: Vec<Vec<BBox>> = (0..n_frames).map(make_boxes).collect();
            let flow_graph = FlowGraph {
                layers: vec![vec![0.0, 0.5], vec![0.0, 0.5]],
                transitions: vec![vec![vec![0.0, 1.0], vec![1.0, 0.0]]],
                c_start: 10.0,
                c_end: 10.0,
            };
            targets.push(TargetProblem {
                target_id: slot as u32 + 1,
                flow_graph,
                candidates,
                lambda_offset: offset,
            });
            offset += 4;
        }
        SegmentProblem {
            n_frames,
            width: w,
            height: h,
            targets,
            slot_ids: (0..n_targets as u32).map(|s| s + 1).collect(),
            graph,
            maps,
            base_unaries,
            params: CoupleParams::default(),
        }
    }

    #[test]
    fn solve_g_with_zero_duals_matches_plain_flow() {
        let p = toy_problem(1);
        let zeros = vec![0.0; p.total_candidates()];
        let (sel, val) = solve_g(&p, &zeros, &zeros).unwrap();
        let plain = solve_flow(&p.targets[0].flow_graph, &[0.0; 4]).unwrap();
        assert_eq!(sel.per_target[0], plain.selection);
        assert!((val - plain.total_cost).abs() < 1e-12);
    }

    #[test]
    fn huge_lambda_moves_the_selection() {
        let p = toy_problem(1);
        let zeros = vec![0.0; 4];
        let (sel0, _) = solve_g(&p, &zeros, &zeros).unwrap();
        let picked = p.targets[0].dual_index(0, sel0.per_target[0][0]);
        let mut lambda = zeros.clone();
        lambda[picked] = 100.0;
        let (sel1, _) = solve_g(&p, &lambda, &zeros).unwrap();
        assert_ne!(sel1.per_target[0][0], sel0.per_target[0][0]);
    }

    #[test]
    fn dual_function_is_concave_along_samples() {
        let p = toy_problem(2);
        let n = p.total_candidates();
        let zeros = vec![0.0; n];
        let mut rng_state = 123456789u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) * 4.0 - 2.0
        };
        for _ in 0..20 {
            let l1: Vec<f64> = (0..n).map(|_| next()).collect();
            let l2: Vec<f64> = (0..n).map(|_| next()).collect();
            let mid: Vec<f64> = l1.iter().zip(&l2).map(|(a, b)| (a + b) / 2.0).collect();
            let g = |l: &[f64]| solve_g(&p, l, &zeros).unwrap().1;
            assert!(g(&mid) >= (g(&l1) + g(&l2)) / 2.0 - 1e-9);
        }
    }

    #[test]
    fn subgradient_updates_exact_amounts() {
        let p = toy_problem(1);
        let mut state = DualState::new(p.total_candidates());
        // y0 picks candidate 0 both frames; y1 picks candidate 1 both frames.
        let y0 = TrackSelection { per_target: vec![vec![0, 0]] };
        let y1 = TrackSelection { per_target: vec![vec![1, 1]] };
        subgradient_step(&mut state, &p, &y0, &y1, 0.8);
        // Boxes (0,0,4,4) vs (4,4,4,4) are disjoint: both frames disagree.
        assert_eq!(state.lambda, vec![0.1, -0.1, 0.1, -0.1]);
        assert_eq!(state.t, 1);

        // Agreement skips updates bitwise.
        let mut state2 = DualState::new(p.total_candidates());
        state2.t = 10;
        let same = TrackSelection { per_target: vec![vec![0, 0]] };
        subgradient_step(&mut state2, &p, &same, &same, 0.8);
        assert!(state2.lambda.iter().all(|&l| l == 0.0));
        assert_eq!(state2.t, 11);

        // Step size halves by t = 10.
        let mut state3 = DualState::new(p.total_candidates());
        state3.t = 10;
        subgradient_step(&mut state3, &p, &y0, &y1, 0.8);
        assert_eq!(state3.lambda, vec![0.05, -0.05, 0.05, -0.05]);
    }

    #[test]
    fn gamma_updates_on_unsupported_collisions_only() {
        let p = toy_problem(2);
        let mut state = DualState::new(p.total_candidates());
        // Both targets pick the same candidate 0 in both frames: centers
        // coincide (distance 0 < delta).
        let y0 = TrackSelection { per_target: vec![vec![0, 0], vec![0, 0]] };
        // Masks with no pixels of either target: unsupported everywhere.
        let masks = vec![PixelMask::background(8, 8), PixelMask::background(8, 8)];
        update_gamma(&mut state, &p, &y0, &masks, 15.0, 0.1);
        assert_eq!(state.gamma[p.targets[0].dual_index(0, 0)], 0.1);
        assert_eq!(state.gamma[p.targets[1].dual_index(1, 0)], 0.1);
        // Unselected candidates untouched.
        assert_eq!(state.gamma[p.targets[0].dual_index(0, 1)], 0.0);

        // Supported boxes are exempt even when close (occlusion case).
        let mut state2 = DualState::new(p.total_candidates());
        let mut m = PixelMask::background(8, 8);
        m.set(1, 1, 1);
        m.set(2, 2, 2);
        let masks2 = vec![m.clone(), m];
        update_gamma(&mut state2, &p, &y0, &masks2, 15.0, 0.1);
        assert!(state2.gamma.iter().all(|&g| g == 0.0));

        // Far-apart targets are exempt.
        let mut state3 = DualState::new(p.total_candidates());
        let y_far = TrackSelection { per_target: vec![vec![0, 0], vec![1, 1]] };
        let masks3 = vec![PixelMask::background(8, 8), PixelMask::background(8, 8)];
        update_gamma(&mut state3, &p, &y_far, &masks3, 3.0, 0.1);
        assert!(state3.gamma.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn step_b_matches_exhaustive_candidate_scan() {
        let p = toy_problem(1);
        // Label the top-left superpixel of both frames as target 1.
        let mut labeling = Labeling::uniform(8, 0);
        labeling.labels[0] = 1;
        labeling.labels[4] = 1;
        let masks = expand_masks(&p, &labeling);
        let lambda = vec![0.0, 0.3, -0.2, 0.0];
        let sel = step_b(&p, &lambda, &masks);

        for f in 0..2 {
            let total = masks[f].count(1);
            let mut best = (f64::INFINITY, 0usize);
            for (c, bbox) in p.targets[0].candidates[f].iter().enumerate() {
                // Independent cost evaluation: loop over all mask pixels.
                let mut inside_theta = 0.0;
                let mut outside = 0usize;
                for py in 0..8 {
                    for px in 0..8 {
                        let inside = (px as f64 + 0.5) >= bbox.x
                            && (px as f64 + 0.5) < bbox.x + bbox.w
                            && (py as f64 + 0.5) >= bbox.y
                            && (py as f64 + 0.5) < bbox.y + bbox.h;
                        let labeled = masks[f].label_at(px, py) == 1;
                        if inside && !labeled {
                            inside_theta += p.params.prior.at_pixel(bbox, px, py);
                        }
                        if !inside && labeled {
                            outside += 1;
                        }
                    }
                }
                let v = inside_theta + p.params.phi0 * outside as f64
                    - lambda[p.targets[0].dual_index(f, c)];
                if v < best.0 {
                    best = (v, c);
                }
            }
            assert_eq!(sel.per_target[0][f], best.1, "frame {f}");
            let _ = total;
        }
    }

    #[test]
    fn solve_h_objective_never_increases_across_steps() {
        let mut p = toy_problem(2);
        // Bias the unaries so segmentation actually wants the targets.
        for node in 0..8 {
            p.base_unaries[node] = vec![0.5, 0.4, 0.6];
        }
        let lambda = vec![0.0; p.total_candidates()];
        let y_init = TrackSelection { per_target: vec![vec![0, 0], vec![1, 1]] };
        let z_init = Labeling::uniform(8, 0);
        let (_, _, _, report) = solve_h(&p, &lambda, &y_init, &z_init, None).unwrap();
        for w in report.objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn run_segment_solve_reaches_agreement_on_consistent_problem() {
        let mut p = toy_problem(1);
        // Make segmentation strongly favor target 1 in the top-left
        // superpixel of both frames, matching candidate 0.
        for f in 0..2 {
            let node = p.graph.node(f, 0);
            p.base_unaries[node] = vec![5.0, 0.1];
        }
        let sol = run_segment_solve(&p, &SolveOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.selection.per_target[0], vec![0, 0]);
        // Weak duality on every recorded iteration.
        let best_primal = sol
            .history
            .iter()
            .map(|r| r.primal_value)
            .fold(f64::INFINITY, f64::min);
        for rec in &sol.history {
            assert!(rec.dual_value <= best_primal + 1e-6);
        }
    }

    #[test]
    fn frozen_duals_keep_lambda_gamma_zero_and_fall_back_to_best_primal() {
        let p = toy_problem(1);
        let opts = SolveOptions {
            max_iters: 3,
            freeze_dual: true,
            ..SolveOptions::default()
        };
        let sol = run_segment_solve(&p, &opts).unwrap();
        // With frozen duals the tracking solution equals the plain flow
        // solve regardless of convergence.
        let plain = solve_flow(&p.targets[0].flow_graph, &[0.0; 4]).unwrap();
        assert_eq!(sol.selection.per_target[0], plain.selection);
    }
}
