//! SLIC superpixels: grid-seeded clustering in joint (LAB, xy) space with
//! connectivity enforcement.

use crate::scene::Frame;

/// One superpixel with the statistics the spatio-temporal graph needs.
#[derive(Debug, Clone)]
pub struct Superpixel {
    pub id: u32,
    /// Linear pixel indices (y * width + x), ascending.
    pub pixels: Vec<u32>,
    pub centroid: (f64, f64),
    pub mean_lab: [f64; 3],
    /// Mean optical flow over the member pixels; zero until filled in.
    pub mean_flow: (f64, f64),
}

/// A full-frame superpixel partition.
#[derive(Debug, Clone)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    /// Per-pixel superpixel id.
    pub assignment: Vec<u32>,
    pub superpixels: Vec<Superpixel>,
}

impl SuperpixelMap {
    #[inline]
    pub fn id_at(&self, x: usize, y: usize) -> u32 {
        self.assignment[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.superpixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superpixels.is_empty()
    }
}

struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

/// Segment `frame` into roughly `n_sp` superpixels.
///
/// Distance is `d_lab + (compactness / S) * d_xy` with `S = sqrt(pixels /
/// n_sp)`; ten assignment/update iterations, then orphan fragments are merged
/// into their largest neighbor so every superpixel is 4-connected.
pub fn slic(frame: &Frame, n_sp: usize, compactness: f64) -> SuperpixelMap {
    let (w, h) = (frame.width, frame.height);
    let n_px = w * h;
    let n_sp = n_sp.clamp(1, n_px);
    let s = (n_px as f64 / n_sp as f64).sqrt();

    let gw = ((w as f64 / s).round() as usize).max(1);
    let gh = ((h as f64 / s).round() as usize).max(1);

    let mut centers: Vec<Center> = Vec::with_capacity(gw * gh);
    for j in 0..gh {
        for i in 0..gw {
            let x = (i as f64 + 0.5) * w as f64 / gw as f64;
            let y = (j as f64 + 0.5) * h as f64 / gh as f64;
            let px = (x as usize).min(w - 1);
            let py = (y as usize).min(h - 1);
            let lab = frame.lab_at(px, py);
            centers.push(Center {
                lab: [lab[0] as f64, lab[1] as f64, lab[2] as f64],
                x,
                y,
            });
        }
    }

    let spatial_w = compactness / s;
    let window = (1.5 * s).ceil() as i64 + 1;
    let mut assignment = vec![u32::MAX; n_px];
    let mut best_d = vec![f64::INFINITY; n_px];

    for _iter in 0..10 {
        best_d.iter_mut().for_each(|d| *d = f64::INFINITY);
        assignment.iter_mut().for_each(|a| *a = u32::MAX);
        for (c_id, c) in centers.iter().enumerate() {
            let x_lo = ((c.x as i64) - window).max(0) as usize;
            let x_hi = (((c.x as i64) + window) as usize).min(w - 1);
            let y_lo = ((c.y as i64) - window).max(0) as usize;
            let y_hi = (((c.y as i64) + window) as usize).min(h - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let lab = frame.lab_at(x, y);
                    let dl = lab[0] as f64 - c.lab[0];
                    let da = lab[1] as f64 - c.lab[1];
                    let db = lab[2] as f64 - c.lab[2];
                    let d_lab = (dl * dl + da * da + db * db).sqrt();
                    let dx = x as f64 + 0.5 - c.x;
                    let dy = y as f64 + 0.5 - c.y;
                    let d_xy = (dx * dx + dy * dy).sqrt();
                    let d = d_lab + spatial_w * d_xy;
                    let idx = y * w + x;
                    if d < best_d[idx] {
                        best_d[idx] = d;
                        assignment[idx] = c_id as u32;
                    }
                }
            }
        }

        // Pixels missed by every window: claim by nearest center globally.
        for idx in 0..n_px {
            if assignment[idx] != u32::MAX {
                continue;
            }
            let (x, y) = (idx % w, idx / w);
            let lab = frame.lab_at(x, y);
            let mut best = (f64::INFINITY, 0u32);
            for (c_id, c) in centers.iter().enumerate() {
                let dl = lab[0] as f64 - c.lab[0];
                let da = lab[1] as f64 - c.lab[1];
                let db = lab[2] as f64 - c.lab[2];
                let dx = x as f64 + 0.5 - c.x;
                let dy = y as f64 + 0.5 - c.y;
                let d = (dl * dl + da * da + db * db).sqrt()
                    + spatial_w * (dx * dx + dy * dy).sqrt();
                if d < best.0 {
                    best = (d, c_id as u32);
                }
            }
            assignment[idx] = best.1;
        }

        // Update step.
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for idx in 0..n_px {
            let c = assignment[idx] as usize;
            let (x, y) = (idx % w, idx / w);
            let lab = frame.lab_at(x, y);
            let s = &mut sums[c];
            s[0] += lab[0] as f64;
            s[1] += lab[1] as f64;
            s[2] += lab[2] as f64;
            s[3] += x as f64 + 0.5;
            s[4] += y as f64 + 0.5;
            s[5] += 1.0;
        }
        for (c, acc) in centers.iter_mut().zip(&sums) {
            if acc[5] > 0.0 {
                c.lab = [acc[0] / acc[5], acc[1] / acc[5], acc[2] / acc[5]];
                c.x = acc[3] / acc[5];
                c.y = acc[4] / acc[5];
            }
        }
    }

    enforce_connectivity(frame, &mut assignment);
    build_map(frame, assignment)
}

/// Relabel connected components; every cluster keeps its largest component
/// and each remaining fragment is absorbed by its largest final neighbor.
fn enforce_connectivity(frame: &Frame, assignment: &mut [u32]) {
    let (w, h) = (frame.width, frame.height);
    let n_px = w * h;

    let mut comp = vec![u32::MAX; n_px];
    let mut comp_size: Vec<usize> = Vec::new();
    let mut comp_cluster: Vec<u32> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n_px {
        if comp[start] != u32::MAX {
            continue;
        }
        let c_id = comp_size.len() as u32;
        let cluster = assignment[start];
        let mut size = 0;
        stack.push(start);
        comp[start] = c_id;
        while let Some(idx) = stack.pop() {
            size += 1;
            let (x, y) = (idx % w, idx / w);
            let mut visit = |nx: usize, ny: usize| {
                let n = ny * w + nx;
                if comp[n] == u32::MAX && assignment[n] == cluster {
                    comp[n] = c_id;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
        comp_size.push(size);
        comp_cluster.push(cluster);
    }

    // Largest component per cluster survives.
    let mut main_of_cluster: std::collections::BTreeMap<u32, u32> = std::collections::BTreeMap::new();
    for c_id in 0..comp_size.len() {
        let cluster = comp_cluster[c_id];
        let cur = main_of_cluster.entry(cluster).or_insert(c_id as u32);
        if comp_size[c_id] > comp_size[*cur as usize] {
            *cur = c_id as u32;
        }
    }
    let is_main: Vec<bool> = (0..comp_size.len())
        .map(|c| main_of_cluster[&comp_cluster[c]] == c as u32)
        .collect();

    // merged[c] = final component id, or MAX while unresolved.
    let mut merged: Vec<u32> = (0..comp_size.len() as u32)
        .map(|c| if is_main[c as usize] { c } else { u32::MAX })
        .collect();
    let mut final_size = comp_size.clone();

    let mut comp_pixels: Vec<Vec<u32>> = vec![Vec::new(); comp_size.len()];
    for idx in 0..n_px {
        comp_pixels[comp[idx] as usize].push(idx as u32);
    }

    loop {
        let mut progress = false;
        let mut unresolved = false;
        for frag in 0..merged.len() {
            if merged[frag] != u32::MAX {
                continue;
            }
            // Absorb into the largest already-resolved neighbor.
            let mut best: Option<(usize, u32)> = None;
            for &p in &comp_pixels[frag] {
                let idx = p as usize;
                let (x, y) = (idx % w, idx / w);
                let mut consider = |n: usize| {
                    let nc = comp[n] as usize;
                    if nc != frag && merged[nc] != u32::MAX {
                        let target = merged[nc];
                        let sz = final_size[target as usize];
                        if best.map_or(true, |(bs, bt)| sz > bs || (sz == bs && target < bt)) {
                            best = Some((sz, target));
                        }
                    }
                };
                if x > 0 {
                    consider(idx - 1);
                }
                if x + 1 < w {
                    consider(idx + 1);
                }
                if y > 0 {
                    consider(idx - w);
                }
                if y + 1 < h {
                    consider(idx + w);
                }
            }
            match best {
                Some((_, target)) => {
                    merged[frag] = target;
                    final_size[target as usize] += comp_size[frag];
                    progress = true;
                }
                None => unresolved = true,
            }
        }
        if !unresolved {
            break;
        }
        assert!(progress, "orphan fragments could not be merged");
    }

    // Resolve chains (fragment merged into fragment merged into main).
    fn resolve(merged: &[u32], mut c: u32) -> u32 {
        while merged[c as usize] != c {
            c = merged[c as usize];
        }
        c
    }

    // Compact final ids in scan order of first occurrence.
    let mut relabel: std::collections::BTreeMap<u32, u32> = std::collections::BTreeMap::new();
    for idx in 0..n_px {
        let f = resolve(&merged, comp[idx]);
        let next = relabel.len() as u32;
        let label = *relabel.entry(f).or_insert(next);
        assignment[idx] = label;
    }
}

fn build_map(frame: &Frame, assignment: Vec<u32>) -> SuperpixelMap {
    let (w, h) = (frame.width, frame.height);
    let count = assignment.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut pixels: Vec<Vec<u32>> = vec![Vec::new(); count];
    for (idx, &a) in assignment.iter().enumerate() {
        pixels[a as usize].push(idx as u32);
    }
    let superpixels = pixels
        .into_iter()
        .enumerate()
        .map(|(id, members)| {
            let mut lab = [0.0f64; 3];
            let mut cx = 0.0;
            let mut cy = 0.0;
            for &p in &members {
                let (x, y) = (p as usize % w, p as usize / w);
                let l = frame.lab_at(x, y);
                lab[0] += l[0] as f64;
                lab[1] += l[1] as f64;
                lab[2] += l[2] as f64;
                cx += x as f64 + 0.5;
                cy += y as f64 + 0.5;
            }
            let n = members.len().max(1) as f64;
            Superpixel {
                id: id as u32,
                pixels: members,
                centroid: (cx / n, cy / n),
                mean_lab: [lab[0] / n, lab[1] / n, lab[2] / n],
                mean_flow: (0.0, 0.0),
            }
        })
        .collect();
    SuperpixelMap {
        width: w,
        height: h,
        assignment,
        superpixels,
    }
}
