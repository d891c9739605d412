//! Per-target discriminative appearance models: max-margin structured
//! learning over a dense box search space, plus passive-aggressive online
//! updates during tracking.

use crate::error::{Error, Result};
use crate::features::{joint_feature, FeatureConfig};
use crate::scene::{iou, BBox, Frame};

/// Dense sampling geometry for training negatives.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub center: BBox,
    /// Chebyshev radius of the center grid in pixels.
    pub radius: f64,
    pub stride: f64,
    pub scales: Vec<f64>,
}

impl SearchSpace {
    /// Default geometry around a box: radius twice the box width, stride 2,
    /// the usual three scales.
    pub fn around(center: &BBox) -> Self {
        SearchSpace {
            center: *center,
            radius: 2.0 * center.w,
            stride: 2.0,
            scales: vec![0.95, 1.0, 1.05],
        }
    }

    pub fn with_geometry(center: &BBox, radius: f64, stride: f64) -> Self {
        SearchSpace {
            center: *center,
            radius,
            stride,
            scales: vec![0.95, 1.0, 1.05],
        }
    }

    /// Candidate boxes ordered by (scale, y, x). Centers falling outside the
    /// frame are dropped; the unshifted center box is kept as a fallback so
    /// the space is never empty.
    pub fn generate(&self, frame_width: usize, frame_height: usize) -> Vec<BBox> {
        let (cx, cy) = self.center.center();
        let steps = (self.radius / self.stride).floor() as i64;
        let mut boxes = Vec::new();
        for &s in &self.scales {
            let w = self.center.w * s;
            let h = self.center.h * s;
            for dy in -steps..=steps {
                for dx in -steps..=steps {
                    let nx = cx + dx as f64 * self.stride;
                    let ny = cy + dy as f64 * self.stride;
                    if nx < 0.0 || ny < 0.0 || nx >= frame_width as f64 || ny >= frame_height as f64
                    {
                        continue;
                    }
                    let mut b = BBox::from_center(nx, ny, w, h, self.center.frame);
                    b.scale = s;
                    boxes.push(b);
                }
            }
        }
        if boxes.is_empty() {
            boxes.push(self.center);
        }
        boxes
    }
}

/// Margin-rescaled structured loss: 1 - IoU.
pub fn structured_loss(gt: &BBox, y: &BBox) -> f64 {
    1.0 - iou(gt, y)
}

/// A working-set constraint kept for inspection after training.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub bbox: BBox,
    pub loss: f64,
}

/// Linear appearance model for one target.
#[derive(Debug, Clone)]
pub struct AppearanceModel {
    pub target_id: u32,
    pub w: Vec<f64>,
    /// Slack penalty of the training objective.
    pub c: f64,
    pub support_constraints: Vec<Constraint>,
    /// Primal objective (before, after) each working-set re-solve.
    pub objective_history: Vec<(f64, f64)>,
}

impl AppearanceModel {
    pub fn zeros(target_id: u32, dim: usize, c: f64) -> Self {
        AppearanceModel {
            target_id,
            w: vec![0.0; dim],
            c,
            support_constraints: Vec::new(),
            objective_history: Vec::new(),
        }
    }
}

/// Appearance score of a box under the model.
pub fn score(model: &AppearanceModel, frame: &Frame, bbox: &BBox, cfg: &FeatureConfig) -> Result<f64> {
    Ok(joint_feature(frame, bbox, cfg)?.dot(&model.w))
}

fn same_box(a: &BBox, b: &BBox) -> bool {
    a.x == b.x && a.y == b.y && a.w == b.w && a.h == b.h
}

/// Most violated constraint: argmax over the space (excluding the ground
/// truth box itself) of `w . phi(y) + loss(gt, y)`. Ties resolve to the
/// earliest candidate in (scale, y, x) order.
pub fn most_violated(
    model: &AppearanceModel,
    frame: &Frame,
    gt: &BBox,
    space: &SearchSpace,
    cfg: &FeatureConfig,
) -> Result<BBox> {
    let candidates = space.generate(frame.width, frame.height);
    let mut best: Option<(f64, BBox)> = None;
    for cand in candidates {
        if same_box(&cand, gt) {
            continue;
        }
        let phi = joint_feature(frame, &cand, cfg)?;
        let v = phi.dot(&model.w) + structured_loss(gt, &cand);
        if best.as_ref().map_or(true, |(b, _)| v > *b) {
            best = Some((v, cand));
        }
    }
    best.map(|(_, b)| b)
        .ok_or_else(|| Error::invalid("search space contained only the ground truth box"))
}

/// Working-set QP in dual form: maximize
/// `sum_j a_j loss_j - 0.5 || sum_j a_j d_j ||^2` over `a >= 0`,
/// `sum a <= C`, by coordinate ascent over the cached Gram matrix. Returns
/// the dual variables; the primal weight vector is `sum_j a_j d_j`.
fn solve_working_set(gram: &[Vec<f64>], losses: &[f64], c: f64, alpha: &mut Vec<f64>) {
    let m = losses.len();
    alpha.resize(m, 0.0);
    let mut total: f64 = alpha.iter().sum();
    // grad_j = loss_j - sum_k alpha_k G_jk
    let mut grad: Vec<f64> = (0..m)
        .map(|j| {
            let mut g = losses[j];
            for k in 0..m {
                g -= alpha[k] * gram[j][k];
            }
            g
        })
        .collect();

    for _pass in 0..20_000 {
        let mut max_delta = 0.0f64;
        for j in 0..m {
            let q = gram[j][j];
            if q < 1e-15 {
                continue;
            }
            let headroom = c - (total - alpha[j]);
            let target = (alpha[j] + grad[j] / q).clamp(0.0, headroom.max(0.0));
            let delta = target - alpha[j];
            if delta == 0.0 {
                continue;
            }
            alpha[j] = target;
            total += delta;
            for k in 0..m {
                grad[k] -= delta * gram[j][k];
            }
            max_delta = max_delta.max(delta.abs());
        }
        if max_delta < 1e-14 * c.max(1.0) {
            break;
        }
    }
}

fn primal_objective(w: &[f64], diffs: &[Vec<f64>], losses: &[f64], c: f64) -> f64 {
    let mut xi = 0.0f64;
    for (d, &l) in diffs.iter().zip(losses) {
        let margin: f64 = w.iter().zip(d).map(|(a, b)| a * b).sum();
        xi = xi.max(l - margin);
    }
    0.5 * w.iter().map(|x| x * x).sum::<f64>() + c * xi
}

/// Training parameters for the initial structured model.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    /// Slack penalty C.
    pub c: f64,
    /// Violation tolerance for the cutting-plane stop rule.
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c: 10.0,
            epsilon: 1e-3,
            max_iters: 50,
        }
    }
}

/// Learn an appearance model from a single annotated frame by cutting-plane
/// structured SVM training: repeatedly add the most violated candidate as a
/// constraint `w.phi(gt) - w.phi(y) >= loss - xi` and re-solve the
/// working-set QP, until no candidate is violated by more than `epsilon`
/// beyond the current slack.
pub fn train_initial(
    frame: &Frame,
    gt: &BBox,
    space: &SearchSpace,
    tc: &TrainConfig,
    fc: &FeatureConfig,
) -> Result<AppearanceModel> {
    let phi_gt = joint_feature(frame, gt, fc)?;
    if phi_gt.values.iter().all(|&v| v == 0.0) {
        return Err(Error::UntrainableTarget);
    }

    // Candidate features are cached for the whole training run.
    let candidates: Vec<BBox> = space
        .generate(frame.width, frame.height)
        .into_iter()
        .filter(|b| !same_box(b, gt) && b.intersects_frame(frame.width, frame.height))
        .collect();
    if candidates.is_empty() {
        return Err(Error::invalid("no negative candidates around the target"));
    }
    let feats: Vec<Vec<f32>> = candidates
        .iter()
        .map(|b| {
            joint_feature(frame, b, fc).map(|f| f.values.iter().map(|&v| v as f32).collect())
        })
        .collect::<Result<_>>()?;
    let losses: Vec<f64> = candidates.iter().map(|b| structured_loss(gt, b)).collect();

    // Callers re-tag target_id; training itself is target-agnostic.
    let dim = phi_gt.values.len();
    let mut model = AppearanceModel::zeros(0, dim, tc.c);

    let mut working: Vec<usize> = Vec::new();
    let mut diffs: Vec<Vec<f64>> = Vec::new();
    let mut ws_losses: Vec<f64> = Vec::new();
    let mut gram: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();

    for iter in 0..tc.max_iters {
        // Score all candidates under the current model.
        let mut best_idx = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for (i, feat) in feats.iter().enumerate() {
            let s: f64 = feat
                .iter()
                .zip(&model.w)
                .map(|(&f, &w)| f as f64 * w)
                .sum::<f64>()
                + losses[i];
            if s > best_val {
                best_val = s;
                best_idx = i;
            }
        }
        let score_gt: f64 = phi_gt.dot(&model.w);
        let violation = best_val - score_gt;
        let xi = ws_losses
            .iter()
            .zip(&diffs)
            .map(|(&l, d)| l - model.w.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .fold(0.0f64, f64::max);
        if violation <= xi + tc.epsilon {
            break;
        }
        if working.contains(&best_idx) {
            // The QP already optimized this constraint; nothing new to add.
            break;
        }

        let d: Vec<f64> = phi_gt
            .values
            .iter()
            .zip(&feats[best_idx])
            .map(|(&g, &f)| g - f as f64)
            .collect();
        let d_norm2: f64 = d.iter().map(|x| x * x).sum();
        if iter == 0 && d_norm2 < 1e-12 {
            return Err(Error::UntrainableTarget);
        }
        if d_norm2 < 1e-12 {
            break;
        }

        // Grow the Gram matrix.
        let row: Vec<f64> = diffs
            .iter()
            .map(|e| e.iter().zip(&d).map(|(a, b)| a * b).sum())
            .collect();
        for (g, &v) in gram.iter_mut().zip(&row) {
            g.push(v);
        }
        let mut new_row = row;
        new_row.push(d_norm2);
        gram.push(new_row);
        diffs.push(d);
        ws_losses.push(losses[best_idx]);
        working.push(best_idx);

        let before = primal_objective(&model.w, &diffs, &ws_losses, tc.c);
        solve_working_set(&gram, &ws_losses, tc.c, &mut alpha);
        for wi in model.w.iter_mut() {
            *wi = 0.0;
        }
        for (a, d) in alpha.iter().zip(&diffs) {
            if *a != 0.0 {
                for (wi, di) in model.w.iter_mut().zip(d) {
                    *wi += a * di;
                }
            }
        }
        let after = primal_objective(&model.w, &diffs, &ws_losses, tc.c);
        model.objective_history.push((before, after));
    }

    model.support_constraints = working
        .iter()
        .map(|&i| Constraint {
            bbox: candidates[i],
            loss: losses[i],
        })
        .collect();
    Ok(model)
}

/// One passive-aggressive step after the joint solver commits `new_box` for
/// this target: hinge loss against the current most violated candidate, with
/// step size capped at `c_pa`. A zero loss or a degenerate direction leaves
/// the model untouched.
pub fn pa_update(
    model: &AppearanceModel,
    frame: &Frame,
    new_box: &BBox,
    space: &SearchSpace,
    c_pa: f64,
    fc: &FeatureConfig,
) -> Result<AppearanceModel> {
    let y_star = most_violated(model, frame, new_box, space, fc)?;
    let phi_new = joint_feature(frame, new_box, fc)?;
    let phi_y = joint_feature(frame, &y_star, fc)?;
    let delta = structured_loss(new_box, &y_star);
    let loss = (delta - phi_new.dot(&model.w) + phi_y.dot(&model.w)).max(0.0);
    if loss == 0.0 {
        return Ok(model.clone());
    }
    let dir: Vec<f64> = phi_new
        .values
        .iter()
        .zip(&phi_y.values)
        .map(|(a, b)| a - b)
        .collect();
    let norm2: f64 = dir.iter().map(|x| x * x).sum();
    if norm2 < 1e-12 {
        return Ok(model.clone());
    }
    let tau = c_pa.min(loss / norm2);
    let mut out = model.clone();
    for (w, d) in out.w.iter_mut().zip(&dir) {
        *w += tau * d;
    }
    Ok(out)
}
