//! Feature extraction backing the appearance models and flow costs: HOG over
//! a canonical patch plus a joint CIELAB color histogram.

use crate::error::{Error, Result};
use crate::scene::{BBox, Frame};

/// Feature layout parameters. The feature length depends only on these, never
/// on the box size: every box is resampled to the canonical patch first.
#[derive(Debug, Clone, Copy)]
pub struct FeatureConfig {
    /// Canonical patch size the box region is resampled to.
    pub patch_w: usize,
    pub patch_h: usize,
    /// Cell side in patch pixels.
    pub cell: usize,
    /// Unsigned orientation bins per cell.
    pub orientations: usize,
    /// Block side in cells (blocks slide with stride one cell).
    pub block: usize,
    /// L2-Hys clipping threshold.
    pub clip: f64,
    /// Bins per LAB channel for the color histogram (total bins = cubed).
    pub lab_bins: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            patch_w: 32,
            patch_h: 64,
            cell: 8,
            orientations: 9,
            block: 2,
            clip: 0.2,
            lab_bins: 8,
        }
    }
}

impl FeatureConfig {
    pub fn cells_x(&self) -> usize {
        self.patch_w / self.cell
    }

    pub fn cells_y(&self) -> usize {
        self.patch_h / self.cell
    }

    pub fn hog_len(&self) -> usize {
        let bx = self.cells_x() + 1 - self.block;
        let by = self.cells_y() + 1 - self.block;
        bx * by * self.block * self.block * self.orientations
    }

    pub fn color_len(&self) -> usize {
        self.lab_bins * self.lab_bins * self.lab_bins
    }

    pub fn feature_len(&self) -> usize {
        self.hog_len() + self.color_len()
    }
}

/// Normalized color histogram over a joint LAB binning, stored sparsely as
/// sorted `(bin, mass)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorHistogram {
    /// Total number of bins in the layout.
    pub n_bins: usize,
    /// Sorted by bin index; masses are positive and sum to 1.
    pub bins: Vec<(u32, f64)>,
}

impl ColorHistogram {
    /// Build from a dense vector; mostly for tests and hand-set cases.
    pub fn from_dense(values: &[f64]) -> Self {
        let mass: f64 = values.iter().sum();
        let bins = values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, &v)| (i as u32, if mass > 0.0 { v / mass } else { v }))
            .collect();
        ColorHistogram {
            n_bins: values.len(),
            bins,
        }
    }

    pub fn mass(&self) -> f64 {
        self.bins.iter().map(|&(_, v)| v).sum()
    }

    pub fn value(&self, bin: u32) -> f64 {
        self.bins
            .binary_search_by_key(&bin, |&(b, _)| b)
            .map(|i| self.bins[i].1)
            .unwrap_or(0.0)
    }
}

/// Histogram intersection of two unit-mass histograms with the same layout.
pub fn hist_intersection(h1: &ColorHistogram, h2: &ColorHistogram) -> Result<f64> {
    if h1.n_bins != h2.n_bins {
        return Err(Error::HistogramLayout(h1.n_bins, h2.n_bins));
    }
    let (mut i, mut j) = (0, 0);
    let mut sum = 0.0;
    while i < h1.bins.len() && j < h2.bins.len() {
        let (b1, v1) = h1.bins[i];
        let (b2, v2) = h2.bins[j];
        if b1 == b2 {
            sum += v1.min(v2);
            i += 1;
            j += 1;
        } else if b1 < b2 {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(sum)
}

#[inline]
fn lab_bin(lab: [f32; 3], bins: usize) -> u32 {
    let b = bins as f64;
    let l = ((lab[0] as f64 / 100.0 * b).floor() as i64).clamp(0, bins as i64 - 1) as u32;
    let a = (((lab[1] as f64 + 128.0) / 256.0 * b).floor() as i64).clamp(0, bins as i64 - 1) as u32;
    let bb = (((lab[2] as f64 + 128.0) / 256.0 * b).floor() as i64).clamp(0, bins as i64 - 1) as u32;
    (l * bins as u32 + a) * bins as u32 + bb
}

/// Color histogram of the box region (clipped to the frame), unit mass.
pub fn extract_color_hist(frame: &Frame, bbox: &BBox, lab_bins: usize) -> Result<ColorHistogram> {
    let (x0, y0, x1, y1) = bbox.pixel_rect(frame.width, frame.height);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::EmptyRegion);
    }
    let n_bins = lab_bins * lab_bins * lab_bins;
    let mut counts: std::collections::BTreeMap<u32, u64> = std::collections::BTreeMap::new();
    for y in y0..y1 {
        for x in x0..x1 {
            *counts.entry(lab_bin(frame.lab_at(x, y), lab_bins)).or_insert(0) += 1;
        }
    }
    let total = ((x1 - x0) * (y1 - y0)) as f64;
    let bins = counts
        .into_iter()
        .map(|(b, c)| (b, c as f64 / total))
        .collect();
    Ok(ColorHistogram { n_bins, bins })
}

/// Bilinearly sample the L channel of the clipped box region into a
/// `patch_w x patch_h` grid. Returns `None` when the clipped region is empty.
fn sample_patch(frame: &Frame, bbox: &BBox, cfg: &FeatureConfig) -> Option<Vec<f64>> {
    let cx0 = bbox.x.max(0.0);
    let cy0 = bbox.y.max(0.0);
    let cx1 = (bbox.x + bbox.w).min(frame.width as f64);
    let cy1 = (bbox.y + bbox.h).min(frame.height as f64);
    if cx1 <= cx0 || cy1 <= cy0 {
        return None;
    }
    let (cw, ch) = (cx1 - cx0, cy1 - cy0);
    let mut patch = vec![0.0; cfg.patch_w * cfg.patch_h];
    for j in 0..cfg.patch_h {
        let sy = cy0 + (j as f64 + 0.5) / cfg.patch_h as f64 * ch - 0.5;
        let y_lo = sy.floor();
        let fy = sy - y_lo;
        let y0i = (y_lo as i64).clamp(0, frame.height as i64 - 1) as usize;
        let y1i = (y_lo as i64 + 1).clamp(0, frame.height as i64 - 1) as usize;
        for i in 0..cfg.patch_w {
            let sx = cx0 + (i as f64 + 0.5) / cfg.patch_w as f64 * cw - 0.5;
            let x_lo = sx.floor();
            let fx = sx - x_lo;
            let x0i = (x_lo as i64).clamp(0, frame.width as i64 - 1) as usize;
            let x1i = (x_lo as i64 + 1).clamp(0, frame.width as i64 - 1) as usize;
            let p00 = frame.lab_at(x0i, y0i)[0] as f64;
            let p10 = frame.lab_at(x1i, y0i)[0] as f64;
            let p01 = frame.lab_at(x0i, y1i)[0] as f64;
            let p11 = frame.lab_at(x1i, y1i)[0] as f64;
            // Incremental form: exactly constant on flat regions, where the
            // product form leaves ulp-level residue that HOG normalization
            // would amplify.
            patch[j * cfg.patch_w + i] = p00
                + fx * (p10 - p00)
                + fy * (p01 - p00)
                + fx * fy * (p00 + p11 - p10 - p01);
        }
    }
    Some(patch)
}

/// HOG descriptor of the box region: canonical resampling, per-cell unsigned
/// orientation histograms, sliding 2x2-cell blocks with L2-Hys normalization.
/// A box fully outside the frame yields the zero vector.
pub fn extract_hog(frame: &Frame, bbox: &BBox, cfg: &FeatureConfig) -> Vec<f64> {
    let patch = match sample_patch(frame, bbox, cfg) {
        Some(p) => p,
        None => return vec![0.0; cfg.hog_len()],
    };
    let (pw, ph) = (cfg.patch_w, cfg.patch_h);
    let (cells_x, cells_y) = (cfg.cells_x(), cfg.cells_y());
    let nb = cfg.orientations;

    let mut cells = vec![0.0f64; cells_x * cells_y * nb];
    for j in 0..ph {
        for i in 0..pw {
            let xm = if i > 0 { patch[j * pw + i - 1] } else { patch[j * pw + i] };
            let xp = if i + 1 < pw { patch[j * pw + i + 1] } else { patch[j * pw + i] };
            let ym = if j > 0 { patch[(j - 1) * pw + i] } else { patch[j * pw + i] };
            let yp = if j + 1 < ph { patch[(j + 1) * pw + i] } else { patch[j * pw + i] };
            let gx = xp - xm;
            let gy = yp - ym;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += std::f64::consts::PI;
            }
            if theta >= std::f64::consts::PI {
                theta -= std::f64::consts::PI;
            }
            let bin = ((theta / std::f64::consts::PI * nb as f64).floor() as usize).min(nb - 1);
            let (ci, cj) = (i / cfg.cell, j / cfg.cell);
            cells[(cj * cells_x + ci) * nb + bin] += mag;
        }
    }

    let mut out = Vec::with_capacity(cfg.hog_len());
    let eps = 1e-6;
    for bj in 0..=cells_y - cfg.block {
        for bi in 0..=cells_x - cfg.block {
            let mut v: Vec<f64> = Vec::with_capacity(cfg.block * cfg.block * nb);
            for dj in 0..cfg.block {
                for di in 0..cfg.block {
                    let c = ((bj + dj) * cells_x + bi + di) * nb;
                    v.extend_from_slice(&cells[c..c + nb]);
                }
            }
            let norm = (v.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
            for x in v.iter_mut() {
                *x = (*x / norm).min(cfg.clip);
            }
            let norm2 = (v.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
            for x in v.iter_mut() {
                *x /= norm2;
            }
            out.extend_from_slice(&v);
        }
    }
    out
}

/// Combined appearance feature: `[HOG ; color histogram]`, each section
/// L2-normalized independently.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub hog_len: usize,
}

impl FeatureVector {
    pub fn dot(&self, w: &[f64]) -> f64 {
        debug_assert_eq!(w.len(), self.values.len());
        self.values.iter().zip(w).map(|(a, b)| a * b).sum()
    }
}

pub fn joint_feature(frame: &Frame, bbox: &BBox, cfg: &FeatureConfig) -> Result<FeatureVector> {
    let hist = extract_color_hist(frame, bbox, cfg.lab_bins)?;
    let mut values = extract_hog(frame, bbox, cfg);
    let hog_len = values.len();

    let hog_norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if hog_norm > 0.0 {
        for x in values.iter_mut() {
            *x /= hog_norm;
        }
    }

    values.resize(hog_len + cfg.color_len(), 0.0);
    let color_norm = hist.bins.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
    if color_norm > 0.0 {
        for &(b, v) in &hist.bins {
            values[hog_len + b as usize] = v / color_norm;
        }
    }
    Ok(FeatureVector { values, hog_len })
}
