//! Gaussian mixture color models over CIELAB pixels and the per-frame
//! confidence maps they induce.

use rand::Rng;

use crate::scene::Frame;

const COV_FLOOR: f64 = 1e-4;
const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// One mixture component with cached inverse covariance.
#[derive(Debug, Clone)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: [f64; 3],
    pub cov: [[f64; 3]; 3],
    inv_cov: [[f64; 3]; 3],
    /// log( (2 pi)^{3/2} sqrt(det) )
    log_norm: f64,
}

impl GmmComponent {
    fn new(weight: f64, mean: [f64; 3], cov: [[f64; 3]; 3]) -> Self {
        let cov = floor_eigenvalues(cov);
        let (inv_cov, det) = invert3(&cov);
        GmmComponent {
            weight,
            mean,
            cov,
            inv_cov,
            log_norm: 1.5 * LOG_2PI + 0.5 * det.ln(),
        }
    }

    fn log_pdf(&self, x: [f64; 3]) -> f64 {
        let d = [x[0] - self.mean[0], x[1] - self.mean[1], x[2] - self.mean[2]];
        let mut q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                q += d[i] * self.inv_cov[i][j] * d[j];
            }
        }
        -0.5 * q - self.log_norm
    }
}

/// Gaussian mixture model in LAB space.
#[derive(Debug, Clone)]
pub struct Gmm {
    pub components: Vec<GmmComponent>,
}

impl Gmm {
    /// Mixture density at a point (not log).
    pub fn density(&self, x: [f64; 3]) -> f64 {
        self.components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight * c.log_pdf(x).exp())
            .sum()
    }

    fn log_likelihood(&self, data: &[[f64; 3]]) -> f64 {
        data.iter()
            .map(|&x| {
                let m = self
                    .components
                    .iter()
                    .filter(|c| c.weight > 0.0)
                    .map(|c| c.weight.ln() + c.log_pdf(x))
                    .fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return -1e300;
                }
                let s: f64 = self
                    .components
                    .iter()
                    .filter(|c| c.weight > 0.0)
                    .map(|c| (c.weight.ln() + c.log_pdf(x) - m).exp())
                    .sum();
                m + s.ln()
            })
            .sum()
    }
}

/// Per-iteration fitting record.
#[derive(Debug, Clone)]
pub struct FitReport {
    /// Log-likelihood after initialization and after each EM iteration.
    pub log_likelihood: Vec<f64>,
    /// Component count actually used (reduced when the data has fewer
    /// distinct values than requested).
    pub k: usize,
}

/// Fit a GMM with k-means++ seeding followed by EM. The M-step floors
/// covariance eigenvalues at 1e-4, which keeps every covariance SPD and the
/// log-likelihood non-decreasing. Stops early when the gain drops below 1e-5.
pub fn fit_gmm(
    pixels: &[[f32; 3]],
    k: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> (Gmm, FitReport) {
    assert!(!pixels.is_empty(), "cannot fit a GMM on zero pixels");
    let data: Vec<[f64; 3]> = pixels
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();

    let mut distinct = std::collections::BTreeSet::new();
    for p in pixels {
        distinct.insert([p[0].to_bits(), p[1].to_bits(), p[2].to_bits()]);
    }
    let k = k.min(distinct.len()).max(1);

    let seeds = kmeans_pp_seeds(&data, k, rng);
    let mut gmm = initial_model(&data, &seeds);

    let n = data.len();
    let mut history = vec![gmm.log_likelihood(&data)];
    for _ in 0..iters {
        // E-step
        let kk = gmm.components.len();
        let mut resp = vec![0.0f64; n * kk];
        for (i, &x) in data.iter().enumerate() {
            let logs: Vec<f64> = gmm
                .components
                .iter()
                .map(|c| {
                    if c.weight > 0.0 {
                        c.weight.ln() + c.log_pdf(x)
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &l in &logs {
                z += (l - m).exp();
            }
            for (c, &l) in logs.iter().enumerate() {
                resp[i * kk + c] = (l - m).exp() / z;
            }
        }

        // M-step
        let mut new_components = Vec::with_capacity(kk);
        for c in 0..kk {
            let nk: f64 = (0..n).map(|i| resp[i * kk + c]).sum();
            if nk < 1e-10 {
                let mut dead = gmm.components[c].clone();
                dead.weight = nk / n as f64;
                new_components.push(dead);
                continue;
            }
            let mut mean = [0.0; 3];
            for (i, &x) in data.iter().enumerate() {
                let r = resp[i * kk + c];
                for d in 0..3 {
                    mean[d] += r * x[d];
                }
            }
            for d in 0..3 {
                mean[d] /= nk;
            }
            let mut cov = [[0.0; 3]; 3];
            for (i, &x) in data.iter().enumerate() {
                let r = resp[i * kk + c];
                let d = [x[0] - mean[0], x[1] - mean[1], x[2] - mean[2]];
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a][b] += r * d[a] * d[b];
                    }
                }
            }
            for a in 0..3 {
                for b in 0..3 {
                    cov[a][b] /= nk;
                }
            }
            new_components.push(GmmComponent::new(nk / n as f64, mean, cov));
        }
        gmm = Gmm {
            components: new_components,
        };

        let ll = gmm.log_likelihood(&data);
        let gain = ll - history.last().unwrap();
        history.push(ll);
        if gain.abs() < 1e-5 {
            break;
        }
    }

    let k = gmm.components.len();
    (gmm, FitReport {
        log_likelihood: history,
        k,
    })
}

fn kmeans_pp_seeds(data: &[[f64; 3]], k: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut seeds = Vec::with_capacity(k);
    seeds.push(data[rng.gen_range(0..data.len())]);
    let mut d2: Vec<f64> = data.iter().map(|&x| dist2(x, seeds[0])).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a seed; k was already
            // capped at the distinct count, so this only picks duplicates
            // of distinct leftovers.
            data[rng.gen_range(0..data.len())]
        } else {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            data[pick]
        };
        seeds.push(next);
        for (i, &x) in data.iter().enumerate() {
            d2[i] = d2[i].min(dist2(x, next));
        }
    }
    seeds
}

fn initial_model(data: &[[f64; 3]], seeds: &[[f64; 3]]) -> Gmm {
    let k = seeds.len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![[0.0f64; 3]; k];
    let mut assign = vec![0usize; data.len()];
    for (i, &x) in data.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &s) in seeds.iter().enumerate() {
            let d = dist2(x, s);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assign[i] = best;
        counts[best] += 1;
        for d in 0..3 {
            sums[best][d] += x[d];
        }
    }
    let mut components = Vec::with_capacity(k);
    for c in 0..k {
        if counts[c] == 0 {
            components.push(GmmComponent::new(0.0, seeds[c], [[0.0; 3]; 3]));
            continue;
        }
        let mean = [
            sums[c][0] / counts[c] as f64,
            sums[c][1] / counts[c] as f64,
            sums[c][2] / counts[c] as f64,
        ];
        let mut cov = [[0.0; 3]; 3];
        for (i, &x) in data.iter().enumerate() {
            if assign[i] != c {
                continue;
            }
            let d = [x[0] - mean[0], x[1] - mean[1], x[2] - mean[2]];
            for a in 0..3 {
                for b in 0..3 {
                    cov[a][b] += d[a] * d[b];
                }
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] /= counts[c] as f64;
            }
        }
        components.push(GmmComponent::new(counts[c] as f64 / data.len() as f64, mean, cov));
    }
    Gmm { components }
}

#[inline]
fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Symmetric 3x3 eigendecomposition by cyclic Jacobi rotations; floors the
/// eigenvalues and reassembles. This is the exact M-step maximizer under the
/// min-eigenvalue constraint.
fn floor_eigenvalues(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut a = m;
    let mut v = [[0.0; 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..30 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off < 1e-13 {
            break;
        }
        for p in 0..2 {
            for q in p + 1..3 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..3 {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for j in 0..3 {
                    let apj = a[p][j];
                    let aqj = a[q][j];
                    a[p][j] = c * apj - s * aqj;
                    a[q][j] = s * apj + c * aqj;
                }
                for i in 0..3 {
                    let vip = v[i][p];
                    let viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }
    let evals = [a[0][0].max(COV_FLOOR), a[1][1].max(COV_FLOOR), a[2][2].max(COV_FLOOR)];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for (k, &e) in evals.iter().enumerate() {
                s += v[i][k] * e * v[j][k];
            }
            out[i][j] = s;
        }
    }
    // Symmetrize against rounding drift.
    for i in 0..3 {
        for j in i + 1..3 {
            let s = 0.5 * (out[i][j] + out[j][i]);
            out[i][j] = s;
            out[j][i] = s;
        }
    }
    out
}

fn invert3(m: &[[f64; 3]; 3]) -> ([[f64; 3]; 3], f64) {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv_det = 1.0 / det;
    let inv = [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det,
        ],
    ];
    (inv, det)
}

/// Per-pixel mixture density rescaled to (0, 1] by the frame maximum and
/// floored at 1e-6.
#[derive(Debug, Clone)]
pub struct ConfidenceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ConfidenceMap {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

pub fn confidence_map(gmm: &Gmm, frame: &Frame) -> ConfidenceMap {
    let mut values: Vec<f64> = frame
        .lab
        .iter()
        .map(|&p| gmm.density([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect();
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in values.iter_mut() {
            *v = (*v / max).max(1e-6);
        }
    } else {
        values.iter_mut().for_each(|v| *v = 1.0);
    }
    ConfidenceMap {
        width: frame.width,
        height: frame.height,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cluster(rng: &mut ChaCha8Rng, center: [f64; 3], sigma: f64, n: usize) -> Vec<[f32; 3]> {
        (0..n)
            .map(|_| {
                let mut p = [0f32; 3];
                for (d, v) in p.iter_mut().enumerate() {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(1e-9..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    *v = (center[d] + sigma * g) as f32;
                }
                p
            })
            .collect()
    }

    #[test]
    fn single_color_reduces_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pixels = vec![[50.0f32, 10.0, -5.0]; 40];
        let (gmm, report) = fit_gmm(&pixels, 4, 20, &mut rng);
        assert_eq!(report.k, 1);
        let c = &gmm.components[0];
        assert!((c.mean[0] - 50.0).abs() < 1e-6);
        assert!((c.mean[1] - 10.0).abs() < 1e-6);
        // Covariance sits exactly at the floor.
        for i in 0..3 {
            assert!((c.cov[i][i] - 1e-4).abs() < 1e-9);
        }
    }

    #[test]
    fn two_separated_clusters_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pixels = cluster(&mut rng, [20.0, 0.0, 0.0], 0.5, 300);
        pixels.extend(cluster(&mut rng, [70.0, 30.0, -20.0], 0.5, 300));
        let (gmm, _) = fit_gmm(&pixels, 2, 40, &mut rng);
        let mut means: Vec<[f64; 3]> = gmm.components.iter().map(|c| c.mean).collect();
        means.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        for (got, want) in means.iter().zip([[20.0, 0.0, 0.0], [70.0, 30.0, -20.0]]) {
            let d = dist2(*got, want).sqrt();
            assert!(d < 1.0, "mean {got:?} vs {want:?} (distance {d})");
        }
    }

    #[test]
    fn log_likelihood_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let c1 = [rng.gen_range(10.0..40.0), rng.gen_range(-30.0..30.0), 0.0];
            let c2 = [rng.gen_range(50.0..90.0), rng.gen_range(-30.0..30.0), 10.0];
            let s1 = rng.gen_range(0.5..2.0);
            let s2 = rng.gen_range(0.5..2.0);
            let mut pixels = cluster(&mut rng, c1, s1, 150);
            pixels.extend(cluster(&mut rng, c2, s2, 150));
            let (_, report) = fit_gmm(&pixels, 3, 30, &mut rng);
            for w in report.log_likelihood.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9,
                    "trial {trial}: log-likelihood dropped {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn confidence_map_orders_by_distance_and_rescales() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pixels = cluster(&mut rng, [60.0, 20.0, 10.0], 1.0, 200);
        let (gmm, _) = fit_gmm(&pixels, 1, 20, &mut rng);
        let near = gmm.density([60.0, 20.0, 10.0]);
        let far = gmm.density([60.0, 20.0 + 10.0, 10.0]);
        assert!(near >= far);

        let frame = Frame::solid(8, 8, [128, 128, 128], 0);
        let map = confidence_map(&gmm, &frame);
        assert!(map.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_target_scene_confidence_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = cluster(&mut rng, [30.0, 40.0, 20.0], 1.0, 200);
        let b = cluster(&mut rng, [70.0, -40.0, -20.0], 1.0, 200);
        let (gmm_a, _) = fit_gmm(&a, 2, 20, &mut rng);

        // Frame whose left half shows target A colors, right half target B.
        let w = 16;
        let h = 8;
        let mut rgb = vec![[0u8; 3]; w * h];
        let rgb_a = crate::color::lab_to_rgb([30.0, 40.0, 20.0]);
        let rgb_b = crate::color::lab_to_rgb([70.0, -40.0, -20.0]);
        for y in 0..h {
            for x in 0..w {
                rgb[y * w + x] = if x < w / 2 { rgb_a } else { rgb_b };
            }
        }
        let frame = Frame::from_rgb(w, h, rgb, 0).unwrap();
        let map = confidence_map(&gmm_a, &frame);
        assert!(map.at(2, 4) > 0.5, "A-region confidence {}", map.at(2, 4));
        assert!(map.at(12, 4) < 0.1, "B-region confidence {}", map.at(12, 4));
        assert!(map.values.iter().all(|&v| v > 0.0 && v <= 1.0));
        let _ = b;
    }
}
