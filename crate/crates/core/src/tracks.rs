//! Feature tracks: Harris corners, pyramidal Lucas-Kanade tracking, RANSAC
//! epipolar outlier rejection, and sampling into the fixed 40 x 5 descriptor
//! block consumed by the track-based controller.

use crate::seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use nalgebra::{DMatrix, Matrix3};

/// One track descriptor: normalized position, normalized velocity per
/// second, and the number of time steps the feature has been tracked.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackFeature {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub age: u32,
}

pub const TRACK_COUNT: usize = 40;
pub const TRACK_DIM: usize = 5;
const AGE_CAP: u32 = 255;

/// Exactly 40 five-dimensional track descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrackSet {
    pub features: Vec<TrackFeature>,
}

impl FeatureTrackSet {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(TRACK_COUNT * TRACK_DIM);
        for f in &self.features {
            out.extend_from_slice(&[f.x, f.y, f.vx, f.vy, f64::from(f.age)]);
        }
        out
    }
}

/// Grayscale image as f32 luma in [0,1].
#[derive(Clone, Debug)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample; caller keeps coordinates inside
    /// [0, w-1] x [0, h-1].
    #[inline]
    fn sample(&self, x: f32, y: f32) -> f32 {
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f32).clamp(0.0, 1.0);
        let fy = (y - y0 as f32).clamp(0.0, 1.0);
        let a = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let b = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        a * (1.0 - fy) + b * fy
    }

    /// 2x downsample by 2x2 averaging.
    fn half(&self) -> GrayImage {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut data = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let (x2, y2) = (x * 2, y * 2);
                let x3 = (x2 + 1).min(self.width - 1);
                let y3 = (y2 + 1).min(self.height - 1);
                data[y * w + x] =
                    0.25 * (self.at(x2, y2) + self.at(x3, y2) + self.at(x2, y3) + self.at(x3, y3));
            }
        }
        GrayImage::new(w, h, data)
    }
}

fn sobel(img: &GrayImage) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (img.width, img.height);
    let mut gx = vec![0.0f32; w * h];
    let mut gy = vec![0.0f32; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let s = |dx: i64, dy: i64| img.at((x as i64 + dx) as usize, (y as i64 + dy) as usize);
            gx[y * w + x] = (s(1, -1) + 2.0 * s(1, 0) + s(1, 1))
                - (s(-1, -1) + 2.0 * s(-1, 0) + s(-1, 1));
            gy[y * w + x] = (s(-1, 1) + 2.0 * s(0, 1) + s(1, 1))
                - (s(-1, -1) + 2.0 * s(0, -1) + s(1, -1));
        }
    }
    (gx, gy)
}

/// Harris corner detection: response `det - k tr^2` on a 3x3-summed
/// structure tensor, thresholded relative to the strongest response and
/// non-maximum suppressed within `min_distance`. Strongest first.
pub fn harris_corners(
    img: &GrayImage,
    max_n: usize,
    quality: f64,
    min_distance: f64,
) -> Vec<(f64, f64)> {
    const K: f32 = 0.04;
    let (w, h) = (img.width, img.height);
    if w < 5 || h < 5 {
        return Vec::new();
    }
    let (gx, gy) = sobel(img);
    let mut resp = vec![0.0f32; w * h];
    let mut max_r = 0.0f32;
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let (mut sxx, mut syy, mut sxy) = (0.0f32, 0.0f32, 0.0f32);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let i = ((y as i64 + dy) as usize) * w + (x as i64 + dx) as usize;
                    sxx += gx[i] * gx[i];
                    syy += gy[i] * gy[i];
                    sxy += gx[i] * gy[i];
                }
            }
            let det = sxx * syy - sxy * sxy;
            let tr = sxx + syy;
            let r = det - K * tr * tr;
            resp[y * w + x] = r;
            if r > max_r {
                max_r = r;
            }
        }
    }
    if max_r <= 0.0 {
        return Vec::new();
    }
    let thresh = quality as f32 * max_r;
    // Local maxima above threshold.
    let mut cands: Vec<(f32, usize, usize)> = Vec::new();
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let r = resp[y * w + x];
            if r < thresh {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    if resp[((y as i64 + dy) as usize) * w + (x as i64 + dx) as usize] > r {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                cands.push((r, x, y));
            }
        }
    }
    cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let md2 = min_distance * min_distance;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (_, x, y) in cands {
        let p = (x as f64, y as f64);
        if out
            .iter()
            .all(|q| (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2) >= md2)
        {
            out.push(p);
            if out.len() >= max_n {
                break;
            }
        }
    }
    out
}

/// Image pyramid for coarse-to-fine Lucas-Kanade.
pub struct Pyramid {
    pub levels: Vec<GrayImage>,
}

impl Pyramid {
    pub fn build(img: &GrayImage, levels: usize) -> Self {
        let mut v = vec![img.clone()];
        for _ in 1..levels {
            let next = v.last().unwrap().half();
            if next.width < 8 || next.height < 8 {
                break;
            }
            v.push(next);
        }
        Self { levels: v }
    }
}

/// Pyramidal iterative Lucas-Kanade flow for a set of points.
///
/// Returns per-point flow in pixels and a tracked flag; the flag is false on
/// singular gradient structure, divergence, or leaving the image.
pub fn lk_track(
    prev: &Pyramid,
    next: &Pyramid,
    points: &[(f64, f64)],
    window: usize,
) -> Vec<((f64, f64), bool)> {
    let hw = (window / 2) as f32;
    let n_levels = prev.levels.len().min(next.levels.len());
    points
        .iter()
        .map(|&(px, py)| {
            let mut flow_x = 0.0f32;
            let mut flow_y = 0.0f32;
            let mut ok = true;
            for lvl in (0..n_levels).rev() {
                let scale = (1 << lvl) as f32;
                let ip = &prev.levels[lvl];
                let inx = &next.levels[lvl];
                let x0 = px as f32 / scale;
                let y0 = py as f32 / scale;
                flow_x *= if lvl + 1 < n_levels { 2.0 } else { 1.0 };
                flow_y *= if lvl + 1 < n_levels { 2.0 } else { 1.0 };
                if x0 - hw < 1.0
                    || y0 - hw < 1.0
                    || x0 + hw > ip.width as f32 - 2.0
                    || y0 + hw > ip.height as f32 - 2.0
                {
                    // Window does not fit at this level; try finer levels.
                    continue;
                }
                // Spatial gradient matrix over the window (central diffs).
                let (mut gxx, mut gyy, mut gxy) = (0.0f32, 0.0f32, 0.0f32);
                let win = window as i64;
                let mut gxs = vec![0.0f32; (win * win) as usize];
                let mut gys = vec![0.0f32; (win * win) as usize];
                let mut i = 0;
                for dy in 0..win {
                    for dx in 0..win {
                        let sx = x0 - hw + dx as f32;
                        let sy = y0 - hw + dy as f32;
                        let dxv = 0.5 * (ip.sample(sx + 1.0, sy) - ip.sample(sx - 1.0, sy));
                        let dyv = 0.5 * (ip.sample(sx, sy + 1.0) - ip.sample(sx, sy - 1.0));
                        gxs[i] = dxv;
                        gys[i] = dyv;
                        gxx += dxv * dxv;
                        gyy += dyv * dyv;
                        gxy += dxv * dyv;
                        i += 1;
                    }
                }
                let det = gxx * gyy - gxy * gxy;
                if det < 1e-8 || gxx + gyy < 1e-6 {
                    ok = false;
                    break;
                }
                let inv = 1.0 / det;
                for _ in 0..30 {
                    let cx = x0 + flow_x;
                    let cy = y0 + flow_y;
                    if cx - hw < 1.0
                        || cy - hw < 1.0
                        || cx + hw > inx.width as f32 - 2.0
                        || cy + hw > inx.height as f32 - 2.0
                    {
                        ok = false;
                        break;
                    }
                    let (mut bx, mut by) = (0.0f32, 0.0f32);
                    let mut i = 0;
                    for dy in 0..win {
                        for dx in 0..win {
                            let sx = x0 - hw + dx as f32;
                            let sy = y0 - hw + dy as f32;
                            let dt = ip.sample(sx, sy) - inx.sample(cx - hw + dx as f32, cy - hw + dy as f32);
                            bx += dt * gxs[i];
                            by += dt * gys[i];
                            i += 1;
                        }
                    }
                    let ux = inv * (gyy * bx - gxy * by);
                    let uy = inv * (gxx * by - gxy * bx);
                    flow_x += ux;
                    flow_y += uy;
                    if ux * ux + uy * uy < 1e-6 {
                        break;
                    }
                }
                if !ok {
                    break;
                }
            }
            let fx = f64::from(flow_x);
            let fy = f64::from(flow_y);
            let tx = px + fx;
            let ty = py + fy;
            let base = &next.levels[0];
            if tx < 1.0 || ty < 1.0 || tx > base.width as f64 - 2.0 || ty > base.height as f64 - 2.0
            {
                ok = false;
            }
            ((fx, fy), ok && fx.is_finite() && fy.is_finite())
        })
        .collect()
}

fn normalize_points(pts: &[(f64, f64)]) -> (Vec<(f64, f64)>, Matrix3<f64>) {
    let n = pts.len() as f64;
    let (mx, my) = pts
        .iter()
        .fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let mean_d = pts
        .iter()
        .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_d > 1e-12 {
        2.0f64.sqrt() / mean_d
    } else {
        1.0
    };
    let t = Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0);
    (
        pts.iter().map(|p| (s * (p.0 - mx), s * (p.1 - my))).collect(),
        t,
    )
}

/// Normalized 8-point fundamental matrix from exactly >= 8 correspondences.
fn eight_point(pairs: &[((f64, f64), (f64, f64))]) -> Option<Matrix3<f64>> {
    let (a_pts, ta) = normalize_points(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let (b_pts, tb) = normalize_points(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let n = pairs.len();
    let mut m = DMatrix::<f64>::zeros(n, 9);
    for i in 0..n {
        let (x1, y1) = a_pts[i];
        let (x2, y2) = b_pts[i];
        let row = [x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, 1.0];
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    // Null direction of M as the smallest eigenvector of M^T M. A thin SVD
    // of the n x 9 system would drop the null space entirely for n = 8.
    let mtm = m.transpose() * &m;
    let eig = nalgebra::SymmetricEigen::new(mtm);
    let mut best = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    let f_vec = eig.eigenvectors.column(best);
    let f = Matrix3::new(
        f_vec[0], f_vec[1], f_vec[2], f_vec[3], f_vec[4], f_vec[5], f_vec[6], f_vec[7], f_vec[8],
    );
    // Enforce rank 2.
    let svd3 = f.svd(true, true);
    let (u, vt3) = (svd3.u?, svd3.v_t?);
    let mut sig = svd3.singular_values;
    sig[2] = 0.0;
    let f = u * Matrix3::from_diagonal(&sig) * vt3;
    // Denormalize.
    Some(tb.transpose() * f * ta)
}

/// Normalized 4-point (or more) DLT homography.
fn homography_dlt(pairs: &[((f64, f64), (f64, f64))]) -> Option<Matrix3<f64>> {
    let (a_pts, ta) = normalize_points(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let (b_pts, tb) = normalize_points(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let n = pairs.len();
    let mut m = DMatrix::<f64>::zeros(2 * n, 9);
    for i in 0..n {
        let (x, y) = a_pts[i];
        let (u, v) = b_pts[i];
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            m[(2 * i, j)] = r0[j];
            m[(2 * i + 1, j)] = r1[j];
        }
    }
    let mtm = m.transpose() * &m;
    let eig = nalgebra::SymmetricEigen::new(mtm);
    let mut best = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    let h_vec = eig.eigenvectors.column(best);
    let h = Matrix3::new(
        h_vec[0], h_vec[1], h_vec[2], h_vec[3], h_vec[4], h_vec[5], h_vec[6], h_vec[7], h_vec[8],
    );
    let h = tb.try_inverse()? * h * ta;
    Some(h / h[(2, 2)].abs().max(1e-12) * h[(2, 2)].signum())
}

fn homography_error(h: &Matrix3<f64>, a: (f64, f64), b: (f64, f64)) -> f64 {
    let map = |h: &Matrix3<f64>, p: (f64, f64)| -> Option<(f64, f64)> {
        let v = h * nalgebra::Vector3::new(p.0, p.1, 1.0);
        (v.z.abs() > 1e-12).then(|| (v.x / v.z, v.y / v.z))
    };
    let fwd = match map(h, a) {
        Some((x, y)) => ((x - b.0).powi(2) + (y - b.1).powi(2)).sqrt(),
        None => return f64::INFINITY,
    };
    let bwd = match h.try_inverse().and_then(|hi| map(&hi, b)) {
        Some((x, y)) => ((x - a.0).powi(2) + (y - a.1).powi(2)).sqrt(),
        None => return f64::INFINITY,
    };
    fwd.max(bwd)
}

fn epipolar_distance(f: &Matrix3<f64>, a: (f64, f64), b: (f64, f64)) -> f64 {
    let x1 = nalgebra::Vector3::new(a.0, a.1, 1.0);
    let x2 = nalgebra::Vector3::new(b.0, b.1, 1.0);
    let l2 = f * x1; // epipolar line in image 2
    let l1 = f.transpose() * x2; // epipolar line in image 1
    let d2 = (x2.dot(&l2)).abs() / (l2.x * l2.x + l2.y * l2.y).sqrt().max(1e-12);
    let d1 = (x1.dot(&l1)).abs() / (l1.x * l1.x + l1.y * l1.y).sqrt().max(1e-12);
    d1.max(d2)
}

/// RANSAC epipolar outlier rejection.
///
/// Inlier = symmetric epipolar distance to the best 8-point fundamental
/// matrix <= 1 px. Under (near-)zero translation the fundamental-matrix
/// family degenerates and cannot isolate outliers, so a 4-point homography
/// model is fitted as well; when its consensus is comparable the
/// rotation-dominant interpretation wins. Fewer than 8 pairs retains
/// everything with the low-confidence flag set.
pub fn epipolar_reject(
    pairs: &[((f64, f64), (f64, f64))],
    seed_v: u64,
) -> (Vec<bool>, bool) {
    let n = pairs.len();
    if n < 8 {
        return (vec![true; n], true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_v);
    let mut idx: Vec<usize> = (0..n).collect();

    let mut f_inliers: Vec<bool> = vec![true; n];
    let mut f_count = 0usize;
    let mut h_inliers: Vec<bool> = vec![true; n];
    let mut h_count = 0usize;
    for _ in 0..300 {
        idx.shuffle(&mut rng);
        if let Some(f) = eight_point(&idx[..8].iter().map(|&i| pairs[i]).collect::<Vec<_>>()) {
            let flags: Vec<bool> = pairs
                .iter()
                .map(|&(a, b)| epipolar_distance(&f, a, b) <= 1.0)
                .collect();
            let count = flags.iter().filter(|x| **x).count();
            if count > f_count {
                f_count = count;
                f_inliers = flags;
            }
        }
        if let Some(h) = homography_dlt(&idx[..4].iter().map(|&i| pairs[i]).collect::<Vec<_>>()) {
            let flags: Vec<bool> = pairs
                .iter()
                .map(|&(a, b)| homography_error(&h, a, b) <= 1.0)
                .collect();
            let count = flags.iter().filter(|x| **x).count();
            if count > h_count {
                h_count = count;
                h_inliers = flags;
            }
        }
        if f_count == n {
            break;
        }
    }
    let (best_count, best_inliers) = if h_count as f64 >= 0.85 * f_count as f64 {
        (h_count, h_inliers)
    } else {
        (f_count, f_inliers)
    };
    if best_count < 8 {
        // Degenerate geometry; keep everything rather than dropping tracks.
        return (vec![true; n], true);
    }
    (best_inliers, false)
}

/// Sample a track list down / up to exactly [`TRACK_COUNT`] entries:
/// uniform without replacement when there are more, with replacement when
/// fewer. Seeded and reproducible.
pub fn sample_tracks(active: &[TrackFeature], seed_v: u64) -> Option<FeatureTrackSet> {
    if active.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_v);
    let features: Vec<TrackFeature> = if active.len() == TRACK_COUNT {
        active.to_vec()
    } else if active.len() > TRACK_COUNT {
        let mut idx: Vec<usize> = (0..active.len()).collect();
        idx.shuffle(&mut rng);
        let mut chosen: Vec<usize> = idx[..TRACK_COUNT].to_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| active[i]).collect()
    } else {
        let mut v: Vec<TrackFeature> = active.to_vec();
        while v.len() < TRACK_COUNT {
            v.push(active[rng.random_range(0..active.len())]);
        }
        v
    };
    Some(FeatureTrackSet { features })
}

/// Tracker tuning; defaults are stated for 128 x 96 and scale with width.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub max_corners: usize,
    pub quality: f64,
    /// Non-maximum suppression radius at 128 px image width, px.
    pub min_distance: f64,
    pub pyramid_levels: usize,
    pub lk_window: usize,
    /// Redetect every this many processed frames.
    pub redetect_every: u32,
    /// ...or whenever the active track count drops below this.
    pub min_active: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        // An NMS radius of 8 px caps the corner supply near 25 on a 128 px
        // wide frame, starving the 40-track contract; 4 px sustains it.
        Self {
            max_corners: 150,
            quality: 0.01,
            min_distance: 4.0,
            pyramid_levels: 3,
            lk_window: 7,
            redetect_every: 5,
            min_active: 60,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ActiveTrack {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    age: u32,
}

/// Stateful sequential feature tracker; one instance per rollout.
pub struct FeatureTracker {
    cfg: TrackerConfig,
    seed_root: u64,
    frame_count: u64,
    prev: Option<Pyramid>,
    active: Vec<ActiveTrack>,
    width: usize,
    height: usize,
}

impl FeatureTracker {
    pub fn new(cfg: TrackerConfig, seed_root: u64) -> Self {
        Self {
            cfg,
            seed_root,
            frame_count: 0,
            prev: None,
            active: Vec::new(),
            width: 0,
            height: 0,
        }
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn mean_age(&self) -> f64 {
        if self.active.is_empty() {
            return 0.0;
        }
        self.active.iter().map(|t| f64::from(t.age)).sum::<f64>() / self.active.len() as f64
    }

    fn norm_x(&self, x: f64) -> f64 {
        2.0 * x / (self.width as f64 - 1.0) - 1.0
    }
    fn norm_y(&self, y: f64) -> f64 {
        2.0 * y / (self.height as f64 - 1.0) - 1.0
    }

    fn detect_new(&mut self, img: &GrayImage) {
        let md = self.cfg.min_distance * img.width as f64 / 128.0;
        let corners = harris_corners(img, self.cfg.max_corners, self.cfg.quality, md);
        let md2 = md * md;
        for (x, y) in corners {
            if self.active.len() >= self.cfg.max_corners {
                break;
            }
            if self
                .active
                .iter()
                .all(|t| (t.x - x).powi(2) + (t.y - y).powi(2) >= md2)
            {
                self.active.push(ActiveTrack {
                    x,
                    y,
                    vx: 0.0,
                    vy: 0.0,
                    age: 1,
                });
            }
        }
    }

    /// Feed the next vision frame; `dt` is the inter-frame interval in
    /// seconds. Returns the exact-40 track set, or `None` before any
    /// texture is visible.
    pub fn process(&mut self, img: &GrayImage, dt: f64) -> Option<FeatureTrackSet> {
        self.width = img.width;
        self.height = img.height;
        let pyr = Pyramid::build(img, self.cfg.pyramid_levels);

        if let Some(prev) = &self.prev {
            let pts: Vec<(f64, f64)> = self.active.iter().map(|t| (t.x, t.y)).collect();
            let flows = lk_track(prev, &pyr, &pts, self.cfg.lk_window);
            let mut kept: Vec<ActiveTrack> = Vec::with_capacity(self.active.len());
            let mut pairs: Vec<((f64, f64), (f64, f64))> = Vec::new();
            for (t, ((fx, fy), ok)) in self.active.iter().zip(flows.iter()) {
                if !ok {
                    continue;
                }
                let nx = t.x + fx;
                let ny = t.y + fy;
                pairs.push(((t.x, t.y), (nx, ny)));
                kept.push(ActiveTrack {
                    x: nx,
                    y: ny,
                    vx: (self.norm_x(nx) - self.norm_x(t.x)) / dt,
                    vy: (self.norm_y(ny) - self.norm_y(t.y)) / dt,
                    age: (t.age + 1).min(AGE_CAP),
                });
            }
            let (inliers, _low_conf) = epipolar_reject(
                &pairs,
                seed::derive(self.seed_root, &[seed::label("epipolar"), self.frame_count]),
            );
            self.active = kept
                .into_iter()
                .zip(inliers)
                .filter_map(|(t, keep)| keep.then_some(t))
                .collect();
        }

        if self.prev.is_none()
            || self.frame_count % u64::from(self.cfg.redetect_every) == 0
            || self.active.len() < self.cfg.min_active
        {
            self.detect_new(img);
        }
        self.prev = Some(pyr);
        self.frame_count += 1;

        let feats: Vec<TrackFeature> = self
            .active
            .iter()
            .map(|t| TrackFeature {
                x: self.norm_x(t.x),
                y: self.norm_y(t.y),
                vx: t.vx,
                vy: t.vy,
                age: t.age,
            })
            .collect();
        sample_tracks(
            &feats,
            seed::derive(self.seed_root, &[seed::label("sample"), self.frame_count - 1]),
        )
    }
}

/// CSV dump of a per-tick track stream: `tick,slot,x,y,vx,vy,age`.
pub fn tracks_to_csv(sets: &[(u64, FeatureTrackSet)]) -> String {
    let mut out = String::from("tick,slot,x,y,vx,vy,age\n");
    for (tick, set) in sets {
        for (slot, f) in set.features.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                tick, slot, f.x, f.y, f.vx, f.vy, f.age
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(width: usize, height: usize, v: f32) -> GrayImage {
        GrayImage::new(width, height, vec![v; width * height])
    }

    fn white_square(width: usize, height: usize, x0: usize, y0: usize, side: usize) -> GrayImage {
        let mut img = flat(width, height, 0.0);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                img.data[y * width + x] = 1.0;
            }
        }
        img
    }

    #[test]
    fn uniform_image_has_no_corners() {
        let img = flat(64, 48, 0.5);
        assert!(harris_corners(&img, 50, 0.01, 4.0).is_empty());
    }

    #[test]
    fn square_corners_detected_within_one_pixel() {
        let img = white_square(64, 48, 20, 14, 16);
        let corners = harris_corners(&img, 10, 0.01, 4.0);
        let truth = [
            (20.0, 14.0),
            (35.0, 14.0),
            (20.0, 29.0),
            (35.0, 29.0),
        ];
        assert!(corners.len() >= 4, "found {corners:?}");
        for t in truth {
            let d = corners
                .iter()
                .map(|c| ((c.0 - t.0).powi(2) + (c.1 - t.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(d <= 1.0 + 1e-9, "corner {t:?} nearest detection {d}");
        }
    }

    #[test]
    fn corner_detection_is_shift_equivariant() {
        let a = white_square(64, 48, 20, 14, 16);
        let b = white_square(64, 48, 23, 14, 16);
        let ca = harris_corners(&a, 10, 0.01, 4.0);
        let cb = harris_corners(&b, 10, 0.01, 4.0);
        assert_eq!(ca.len(), cb.len());
        for p in &ca {
            let shifted = (p.0 + 3.0, p.1);
            let d = cb
                .iter()
                .map(|c| ((c.0 - shifted.0).powi(2) + (c.1 - shifted.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(d <= 0.5, "corner {p:?} shift mismatch {d}");
        }
    }

    fn textured(width: usize, height: usize, shift: f32) -> GrayImage {
        let mut data = vec![0.0f32; width * height];
        for y in 0..height {
            for x in 0..width {
                let fx = x as f32 - shift;
                let fy = y as f32;
                data[y * width + x] =
                    0.5 + 0.25 * (0.4 * fx).sin() * (0.3 * fy).cos() + 0.15 * (0.13 * (fx + fy)).sin();
            }
        }
        GrayImage::new(width, height, data)
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let img = textured(96, 64, 0.0);
        let pyr = Pyramid::build(&img, 3);
        let pts = vec![(30.0, 30.0), (50.0, 20.0), (70.0, 40.0)];
        for ((fx, fy), ok) in lk_track(&pyr, &pyr, &pts, 7) {
            assert!(ok);
            assert!(fx.abs() < 1e-3 && fy.abs() < 1e-3, "flow ({fx},{fy})");
        }
    }

    #[test]
    fn known_shift_recovered() {
        let a = textured(96, 64, 0.0);
        let b = textured(96, 64, 2.0); // content moves +2 px in x
        let pa = Pyramid::build(&a, 3);
        let pb = Pyramid::build(&b, 3);
        let pts = vec![(30.0, 30.0), (48.0, 22.0), (66.0, 40.0), (40.0, 48.0)];
        for ((fx, fy), ok) in lk_track(&pa, &pb, &pts, 7) {
            assert!(ok);
            assert!((fx - 2.0).abs() <= 0.25, "fx = {fx}");
            assert!(fy.abs() <= 0.25, "fy = {fy}");
        }
    }

    #[test]
    fn zero_gradient_region_fails_tracking() {
        let img = flat(64, 48, 0.3);
        let pyr = Pyramid::build(&img, 3);
        let res = lk_track(&pyr, &pyr, &[(32.0, 24.0)], 7);
        assert!(!res[0].1);
    }

    /// Project synthetic 3D points through two poses.
    fn rigid_pairs(
        rot: f64,
        trans: (f64, f64, f64),
        n: usize,
    ) -> Vec<((f64, f64), (f64, f64))> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = 80.0;
        let (cx, cy) = (64.0, 48.0);
        (0..n)
            .map(|_| {
                let p = nalgebra::Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(4.0..9.0),
                );
                let a = (f * p.x / p.z + cx, f * p.y / p.z + cy);
                let r = nalgebra::Rotation3::from_euler_angles(0.0, rot, 0.0);
                let q = r * p + nalgebra::Vector3::new(trans.0, trans.1, trans.2);
                let b = (f * q.x / q.z + cx, f * q.y / q.z + cy);
                (a, b)
            })
            .collect()
    }

    #[test]
    fn gross_outlier_rejected_under_pure_rotation() {
        let mut pairs = rigid_pairs(0.03, (0.0, 0.0, 0.0), 30);
        let last = pairs.len() - 1;
        pairs[last].1 .0 += 20.0; // 20 px off the epipolar line
        let (flags, low_conf) = epipolar_reject(&pairs, 42);
        assert!(!low_conf);
        assert!(!flags[last], "outlier retained");
        let kept = flags.iter().filter(|f| **f).count();
        assert!(kept >= 28, "kept {kept}/30");
    }

    #[test]
    fn all_inlier_set_mostly_retained() {
        let pairs = rigid_pairs(0.05, (0.3, 0.05, 0.1), 40);
        let (flags, low_conf) = epipolar_reject(&pairs, 7);
        assert!(!low_conf);
        let kept = flags.iter().filter(|f| **f).count();
        assert!(kept as f64 >= 0.95 * pairs.len() as f64, "kept {kept}/40");
    }

    #[test]
    fn too_few_pairs_flagged_low_confidence() {
        let pairs = rigid_pairs(0.05, (0.3, 0.0, 0.0), 7);
        let (flags, low_conf) = epipolar_reject(&pairs, 7);
        assert!(low_conf);
        assert!(flags.iter().all(|f| *f));
    }

    fn feature_at(i: usize) -> TrackFeature {
        TrackFeature {
            x: i as f64 * 0.01,
            y: -(i as f64) * 0.01,
            vx: 0.0,
            vy: 0.0,
            age: 1 + (i as u32 % 5),
        }
    }

    #[test]
    fn sampling_reaches_exactly_forty() {
        let many: Vec<TrackFeature> = (0..100).map(feature_at).collect();
        let set = sample_tracks(&many, 3).unwrap();
        assert_eq!(set.features.len(), TRACK_COUNT);
        // Without replacement: all distinct.
        for i in 0..TRACK_COUNT {
            for j in i + 1..TRACK_COUNT {
                assert_ne!(set.features[i], set.features[j]);
            }
        }

        let exact: Vec<TrackFeature> = (0..40).map(feature_at).collect();
        let set = sample_tracks(&exact, 3).unwrap();
        assert_eq!(set.features, exact);

        let few: Vec<TrackFeature> = (0..10).map(feature_at).collect();
        let set = sample_tracks(&few, 3).unwrap();
        assert_eq!(set.features.len(), TRACK_COUNT);
        for f in &set.features {
            assert!(few.contains(f));
        }
        assert!(sample_tracks(&[], 3).is_none());
    }

    #[test]
    fn padding_covers_all_originals_across_seeds() {
        // With 10 actives sampled up to 40 with replacement, each original
        // should appear at least once in nearly every draw.
        let few: Vec<TrackFeature> = (0..10).map(feature_at).collect();
        let mut all_present = 0;
        let trials = 200;
        for s in 0..trials {
            let set = sample_tracks(&few, s).unwrap();
            if few.iter().all(|f| set.features.contains(f)) {
                all_present += 1;
            }
        }
        // P(missing one) = 10 * (9/10)^30 ~ 0.42... the first 10 slots are
        // the originals themselves, so everything is always present.
        assert_eq!(all_present, trials);
    }

    #[test]
    fn sampling_is_deterministic() {
        let many: Vec<TrackFeature> = (0..77).map(feature_at).collect();
        assert_eq!(sample_tracks(&many, 9), sample_tracks(&many, 9));
    }
}
