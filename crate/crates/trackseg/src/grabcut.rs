//! GrabCut-style foreground extraction used to bootstrap the per-target
//! color models from an initial box.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gmm::fit_gmm;
use crate::maxflow::{CutSide, MaxFlowGraph};
use crate::scene::{BBox, Frame, PixelMask};

const GAMMA: f64 = 50.0;
const MAX_ROUNDS: usize = 5;
const GMM_K: usize = 5;
const GMM_ITERS: usize = 15;

/// Iteratively refine a foreground mask inside `bbox`, using the surrounding
/// region (box dilated by `margin` pixels per axis) as initial background.
/// Pixels outside the box stay background; inside-box pixels are relabeled by
/// repeated GMM fits and binary cuts. If the foreground collapses, the box
/// interior is returned unchanged.
pub fn grabcut_init(
    frame: &Frame,
    bbox: &BBox,
    margin: (f64, f64),
    rng: &mut impl Rng,
) -> Result<PixelMask> {
    let (bx0, by0, bx1, by1) = bbox.pixel_rect(frame.width, frame.height);
    if bx1 <= bx0 || by1 <= by0 {
        return Err(Error::invalid("grabcut box degenerate after clipping"));
    }
    let region_box = BBox::new(
        bbox.x - margin.0,
        bbox.y - margin.1,
        bbox.w + 2.0 * margin.0,
        bbox.h + 2.0 * margin.1,
        bbox.frame,
    );
    let (rx0, ry0, rx1, ry1) = region_box.pixel_rect(frame.width, frame.height);

    let box_interior_mask = |frame: &Frame| {
        let mut mask = PixelMask::background(frame.width, frame.height);
        for y in by0..by1 {
            for x in bx0..bx1 {
                mask.set(x, y, 1);
            }
        }
        mask
    };

    // Unknown pixels (inside the box) get graph nodes; the ring between box
    // and region stays hard background.
    let in_box = |x: usize, y: usize| x >= bx0 && x < bx1 && y >= by0 && y < by1;
    let mut unknown = Vec::new();
    let mut node_of = vec![usize::MAX; frame.width * frame.height];
    let mut ring: Vec<[f32; 3]> = Vec::new();
    for y in ry0..ry1 {
        for x in rx0..rx1 {
            if in_box(x, y) {
                node_of[y * frame.width + x] = unknown.len();
                unknown.push((x, y));
            } else {
                ring.push(frame.lab_at(x, y));
            }
        }
    }
    if ring.is_empty() {
        // Nothing to contrast against; keep the initialization.
        return Ok(box_interior_mask(frame));
    }

    // Contrast scale over 4-neighbor pairs within the region.
    let mut sum_d2 = 0.0f64;
    let mut n_pairs = 0usize;
    for y in ry0..ry1 {
        for x in rx0..rx1 {
            let a = frame.lab_at(x, y);
            if x + 1 < rx1 {
                let b = frame.lab_at(x + 1, y);
                sum_d2 += lab_dist2(a, b);
                n_pairs += 1;
            }
            if y + 1 < ry1 {
                let b = frame.lab_at(x, y + 1);
                sum_d2 += lab_dist2(a, b);
                n_pairs += 1;
            }
        }
    }
    let beta = if n_pairs > 0 && sum_d2 > 0.0 {
        0.5 / (sum_d2 / n_pairs as f64)
    } else {
        0.0
    };

    let mut is_fg: Vec<bool> = vec![true; unknown.len()];
    for _round in 0..MAX_ROUNDS {
        let fg_pixels: Vec<[f32; 3]> = unknown
            .iter()
            .zip(&is_fg)
            .filter(|(_, &f)| f)
            .map(|(&(x, y), _)| frame.lab_at(x, y))
            .collect();
        if fg_pixels.is_empty() {
            return Ok(box_interior_mask(frame));
        }
        let mut bg_pixels = ring.clone();
        bg_pixels.extend(
            unknown
                .iter()
                .zip(&is_fg)
                .filter(|(_, &f)| !f)
                .map(|(&(x, y), _)| frame.lab_at(x, y)),
        );

        let (fg_gmm, _) = fit_gmm(&fg_pixels, GMM_K, GMM_ITERS, rng);
        let (bg_gmm, _) = fit_gmm(&bg_pixels, GMM_K, GMM_ITERS, rng);

        // Binary cut: source side = foreground.
        let mut g = MaxFlowGraph::new(unknown.len());
        for (node, &(x, y)) in unknown.iter().enumerate() {
            let lab = frame.lab_at(x, y);
            let p = [lab[0] as f64, lab[1] as f64, lab[2] as f64];
            let u_fg = -fg_gmm.density(p).max(1e-300).ln();
            let u_bg = -bg_gmm.density(p).max(1e-300).ln();
            let base = u_fg.min(u_bg);
            g.add_terminal(node, u_bg - base, u_fg - base);
        }
        for (node, &(x, y)) in unknown.iter().enumerate() {
            let a = frame.lab_at(x, y);
            let mut link = |nx: usize, ny: usize| {
                let b = frame.lab_at(nx, ny);
                let w = GAMMA * (-beta * lab_dist2(a, b)).exp();
                let n = node_of[ny * frame.width + nx];
                if n != usize::MAX {
                    g.add_edge(node, n, w, w);
                } else if nx >= rx0 && nx < rx1 && ny >= ry0 && ny < ry1 {
                    // Fixed-background neighbor: pay w when this pixel is fg.
                    g.add_terminal(node, 0.0, w);
                }
            };
            // Forward neighbors carry the symmetric cost once per direction.
            if x + 1 < frame.width {
                link(x + 1, y);
            }
            if y + 1 < frame.height {
                link(x, y + 1);
            }
            if x > 0 && node_of[y * frame.width + x - 1] == usize::MAX {
                link(x - 1, y);
            }
            if y > 0 && node_of[(y - 1) * frame.width + x] == usize::MAX {
                link(x, y - 1);
            }
        }

        let (_, sides) = g.solve();
        let new_fg: Vec<bool> = sides.iter().map(|&s| s == CutSide::Source).collect();
        if new_fg.iter().all(|&f| !f) {
            return Ok(box_interior_mask(frame));
        }
        let changed = new_fg != is_fg;
        is_fg = new_fg;
        if !changed {
            break;
        }
    }

    let mut mask = PixelMask::background(frame.width, frame.height);
    for (&(x, y), &f) in unknown.iter().zip(&is_fg) {
        if f {
            mask.set(x, y, 1);
        }
    }
    Ok(mask)
}

#[inline]
fn lab_dist2(a: [f32; 3], b: [f32; 3]) -> f64 {
    (a[0] as f64 - b[0] as f64).powi(2)
        + (a[1] as f64 - b[1] as f64).powi(2)
        + (a[2] as f64 - b[2] as f64).powi(2)
}
