//! Planar homographies, robust estimation, and the corner-accuracy metric
//! used by the synthetic benchmark.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const MHA_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

/// Corner displacement bound for synthetic pairs, as a fraction of each side.
pub const DEFAULT_JITTER: f64 = 0.15;

const W_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    pub h: Matrix3<f64>,
}

impl Homography {
    /// Scales so `h[2][2] == 1` when it is nonzero; rejects singular matrices.
    pub fn new(h: Matrix3<f64>) -> Result<Self> {
        let h = if h[(2, 2)].abs() > W_EPS { h / h[(2, 2)] } else { h / h.norm() };
        if !h.iter().all(|v| v.is_finite()) || h.determinant().abs() <= 1e-12 {
            return Err(Error::Estimation("singular homography".into()));
        }
        Ok(Self { h })
    }

    pub fn identity() -> Self {
        Self { h: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            h: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .h
            .try_inverse()
            .ok_or_else(|| Error::Estimation("homography is not invertible".into()))?;
        Self::new(inv)
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn after(&self, first: &Homography) -> Result<Self> {
        Self::new(self.h * first.h)
    }

    /// Projects one point; `None` for points mapped to infinity.
    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let v = self.h * Vector3::new(p[0], p[1], 1.0);
        if v[2].abs() < W_EPS {
            return None;
        }
        Some([v[0] / v[2], v[1] / v[2]])
    }
}

pub fn warp_points(h: &Homography, pts: &[[f64; 2]]) -> Vec<Option<[f64; 2]>> {
    pts.iter().map(|&p| h.apply(p)).collect()
}

/// `true` iff the point is valid and lies in `[0, width) × [0, height)`.
pub fn visibility_mask(warped: &[Option<[f64; 2]>], width: usize, height: usize) -> Vec<bool> {
    warped
        .iter()
        .map(|p| match p {
            Some([x, y]) => *x >= 0.0 && *x < width as f64 && *y >= 0.0 && *y < height as f64,
            None => false,
        })
        .collect()
}

/// Similarity transform taking the points to zero mean and mean distance √2.
fn normalizer(pts: &[[f64; 2]]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean = pts.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Least-squares homography mapping `src[i]` to `dst[i]` (normalized DLT).
pub fn dlt(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(Error::shape("point lists differ in length"));
    }
    if src.len() < 4 {
        return Err(Error::Estimation(format!("need at least 4 matches, got {}", src.len())));
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = ts * Vector3::new(s[0], s[1], 1.0);
        let d = td * Vector3::new(d[0], d[1], 1.0);
        let (x, y, u, v) = (s[0], s[1], d[0], d[1]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = nalgebra::SVD::try_new(a, false, true, 1e-15, 10_000)
        .ok_or_else(|| Error::Numeric("DLT SVD did not converge".into()))?;
    let sv = &svd.singular_values;
    // a second vanishing singular value means the solution is not unique
    if sv[7] <= 1e-9 * sv[0] {
        return Err(Error::Estimation("degenerate point configuration".into()));
    }
    let v_t = svd.v_t.expect("requested V");
    let n = v_t.row(8);
    let hn = Matrix3::new(n[0], n[1], n[2], n[3], n[4], n[5], n[6], n[7], n[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::Estimation("degenerate point configuration".into()))?;
    Homography::new(td_inv * hn * ts)
}

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let (ux, uy) = (b[0] - a[0], b[1] - a[1]);
    let (vx, vy) = (c[0] - a[0], c[1] - a[1]);
    let cross = (ux * vy - uy * vx).abs();
    let scale = (ux * ux + uy * uy).max(vx * vx + vy * vy);
    cross <= 1e-6 * scale.max(1e-12)
}

fn degenerate_sample(pts: &[[f64; 2]; 4]) -> bool {
    (0..4).any(|skip| {
        let t: Vec<_> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
        collinear(t[0], t[1], t[2])
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 2000,
            inlier_threshold: 3.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RansacResult {
    pub homography: Homography,
    pub inliers: Vec<bool>,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn reprojection_error(h: &Homography, s: [f64; 2], d: [f64; 2]) -> f64 {
    match h.apply(s) {
        Some(p) => (p[0] - d[0]).hypot(p[1] - d[1]),
        None => f64::INFINITY,
    }
}

fn consensus(h: &Homography, src: &[[f64; 2]], dst: &[[f64; 2]], thresh: f64) -> (usize, f64) {
    let mut count = 0;
    let mut cost = 0.0;
    for (&s, &d) in src.iter().zip(dst) {
        let e = reprojection_error(h, s, d);
        if e <= thresh {
            count += 1;
            cost += e;
        } else {
            cost += thresh;
        }
    }
    (count, cost)
}

/// 4-point RANSAC followed by a DLT refit on the inliers.
///
/// Iteration `i` draws its sample from its own ChaCha stream, so the result
/// does not depend on how iterations are scheduled across threads. The best
/// model has the most inliers, then the lowest truncated error, then the
/// lowest iteration index.
pub fn estimate_homography_ransac(src: &[[f64; 2]], dst: &[[f64; 2]], params: &RansacParams) -> Result<RansacResult> {
    if src.len() != dst.len() {
        return Err(Error::shape("point lists differ in length"));
    }
    if src.len() < 4 {
        return Err(Error::Estimation(format!("need at least 4 matches, got {}", src.len())));
    }
    let thresh = params.inlier_threshold;
    let best = (0..params.iterations)
        .into_par_iter()
        .filter_map(|it| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(it as u64);
            let idx = sample(&mut rng, src.len(), 4);
            let s: [[f64; 2]; 4] = std::array::from_fn(|k| src[idx.index(k)]);
            let d: [[f64; 2]; 4] = std::array::from_fn(|k| dst[idx.index(k)]);
            if degenerate_sample(&s) || degenerate_sample(&d) {
                return None;
            }
            let h = dlt(&s, &d).ok()?;
            let (count, cost) = consensus(&h, src, dst, thresh);
            Some((count, cost, it, h))
        })
        .reduce_with(|a, b| {
            let a_better = a.0 > b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2)));
            if a_better {
                a
            } else {
                b
            }
        });
    let (_, _, _, mut model) = best.ok_or_else(|| Error::Estimation("every sample was degenerate".into()))?;
    let mut inliers: Vec<bool> = src
        .iter()
        .zip(dst)
        .map(|(&s, &d)| reprojection_error(&model, s, d) <= thresh)
        .collect();
    for _ in 0..2 {
        let (s, d): (Vec<_>, Vec<_>) = src
            .iter()
            .zip(dst)
            .zip(&inliers)
            .filter(|(_, &keep)| keep)
            .map(|((&s, &d), _)| (s, d))
            .unzip();
        let Ok(refit) = dlt(&s, &d) else { break };
        let refit_inliers: Vec<bool> = src
            .iter()
            .zip(dst)
            .map(|(&s, &d)| reprojection_error(&refit, s, d) <= thresh)
            .collect();
        if refit_inliers.iter().filter(|&&b| b).count() < inliers.iter().filter(|&&b| b).count() {
            break;
        }
        model = refit;
        inliers = refit_inliers;
    }
    Ok(RansacResult {
        homography: model,
        inliers,
    })
}

/// Image corners in `(x, y)` pixel coordinates.
pub fn image_corners(width: usize, height: usize) -> [[f64; 2]; 4] {
    let (w, h) = ((width.max(1) - 1) as f64, (height.max(1) - 1) as f64);
    [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
}

/// Mean distance between the four corners projected by each homography.
pub fn corner_error(h_est: &Homography, h_gt: &Homography, width: usize, height: usize) -> f64 {
    let corners = image_corners(width, height);
    corners
        .iter()
        .map(|&c| match (h_est.apply(c), h_gt.apply(c)) {
            (Some(a), Some(b)) => (a[0] - b[0]).hypot(a[1] - b[1]),
            _ => f64::INFINITY,
        })
        .sum::<f64>()
        / 4.0
}

/// Outcome of one evaluated pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairOutcome {
    /// `None` when estimation failed.
    pub corner_error: Option<f64>,
    pub matches: usize,
    pub inliers: usize,
}

impl PairOutcome {
    pub fn passes(&self, threshold: f64) -> bool {
        self.corner_error.is_some_and(|e| e <= threshold)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub thresholds: [f64; 3],
    /// Percentage of pairs within each threshold; failed pairs count as misses.
    pub mha: [f64; 3],
    /// Mean corner error over pairs where estimation succeeded.
    pub mean_corner_error: f64,
    pub pairs: usize,
    pub failures: usize,
    pub mean_matches: f64,
}

impl EvalReport {
    pub fn aggregate(outcomes: &[PairOutcome], thresholds: [f64; 3]) -> Self {
        let pairs = outcomes.len();
        let pct = |t: f64| {
            if pairs == 0 {
                0.0
            } else {
                100.0 * outcomes.iter().filter(|o| o.passes(t)).count() as f64 / pairs as f64
            }
        };
        let ok: Vec<f64> = outcomes.iter().filter_map(|o| o.corner_error).collect();
        Self {
            thresholds,
            mha: thresholds.map(pct),
            mean_corner_error: if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            },
            pairs,
            failures: pairs - ok.len(),
            mean_matches: if pairs == 0 {
                0.0
            } else {
                outcomes.iter().map(|o| o.matches as f64).sum::<f64>() / pairs as f64
            },
        }
    }
}

/// Single-pair report at the default thresholds.
pub fn mha_eval(h_est: &Homography, h_gt: &Homography, width: usize, height: usize) -> EvalReport {
    let outcome = PairOutcome {
        corner_error: Some(corner_error(h_est, h_gt, width, height)),
        matches: 0,
        inliers: 0,
    };
    EvalReport::aggregate(&[outcome], MHA_THRESHOLDS)
}

/// Resamples `image` so that `out(p) = image(h⁻¹ p)`. Pixels whose preimage
/// falls outside the source are zero.
pub fn warp_image(image: &FeatureMap, h: &Homography, out_height: usize, out_width: usize) -> Result<FeatureMap> {
    let inv = h.inverse()?;
    let mut out = FeatureMap::zeros(out_height, out_width, image.channels);
    let (max_x, max_y) = ((image.width - 1) as f64, (image.height - 1) as f64);
    let ch = image.channels;
    out.data.par_chunks_mut(out_width * ch).enumerate().for_each(|(y, row)| {
        for x in 0..out_width {
            if let Some([sx, sy]) = inv.apply([x as f64, y as f64]) {
                if (-1e-9..=max_x + 1e-9).contains(&sx) && (-1e-9..=max_y + 1e-9).contains(&sy) {
                    image.bilinear_sample_into(sx as f32, sy as f32, &mut row[x * ch..(x + 1) * ch]);
                }
            }
        }
    });
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    /// Largest inward corner displacement as a fraction of width and height.
    pub jitter: f64,
    /// Random brightness and contrast change.
    pub photometric: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            jitter: DEFAULT_JITTER,
            photometric: false,
        }
    }
}

/// Random perspective view of `image`.
///
/// Each corner of the source is moved inward by up to `jitter` of the image
/// size; the returned homography maps that quadrilateral onto the full output
/// frame, so the whole warped image is covered by source content.
pub fn synth_pair(image: &FeatureMap, seed: u64, params: &SynthParams) -> Result<(FeatureMap, Homography)> {
    let (w, h) = (image.width, image.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners = image_corners(w, h);
    let homography = if params.jitter <= 0.0 {
        Homography::identity()
    } else {
        let jx = params.jitter * (w - 1) as f64;
        let jy = params.jitter * (h - 1) as f64;
        let inward = [[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]];
        let quad: Vec<[f64; 2]> = corners
            .iter()
            .zip(inward)
            .map(|(c, d)| [c[0] + d[0] * rng.random_range(0.0..=jx), c[1] + d[1] * rng.random_range(0.0..=jy)])
            .collect();
        dlt(&quad, &corners)?
    };
    let mut warped = warp_image(image, &homography, h, w)?;
    if params.photometric {
        let contrast: f32 = rng.random_range(0.8..1.2);
        let brightness: f32 = rng.random_range(-0.1..0.1);
        warped
            .data
            .iter_mut()
            .for_each(|v| *v = (*v * contrast + brightness).clamp(0.0, 1.0));
    }
    Ok((warped, homography))
}
