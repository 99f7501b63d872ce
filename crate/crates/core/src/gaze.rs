//! Gaze fixations to attention maps, saliency metrics and baselines, and the
//! synthetic gaze oracle used for desk-scale data generation.
//!
//! An attention map is built per frame as the per-pixel maximum over
//! Gaussians centered on the fixations of a +/-12 frame window, then
//! normalized to sum to one.

use crate::render::{project_point, CameraModel};
use crate::sim::{QuadState, Track};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

#[derive(thiserror::Error, Debug)]
pub enum GazeError {
    #[error("empty fixation window")]
    EmptyWindow,
    #[error("empty map set")]
    EmptyInput,
    #[error("resolution mismatch: {0}x{1} vs {2}x{3}")]
    ResolutionMismatch(usize, usize, usize, usize),
    #[error("attention map invalid: {0}")]
    InvalidMap(String),
    #[error("gaze csv: {0}")]
    Csv(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One gaze sample, pixel coordinates in the source resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazeRecord {
    pub ts: f64,
    pub frame: u64,
    pub x: f64,
    pub y: f64,
}

/// Fixations feeding one attention map, with the Gaussian variance given in
/// source-resolution pixels squared.
#[derive(Clone, Debug)]
pub struct FixationWindow {
    pub fixations: Vec<(f64, f64)>,
    /// Diagonal variance (pixels^2) at the source resolution.
    pub sigma2: (f64, f64),
    /// Source resolution the fixations and variance refer to.
    pub source: (usize, usize),
}

/// Default fixation-window half width in frames (t-12 .. t+12).
pub const WINDOW_HALF: usize = 12;
/// Default Gaussian variance, pixels^2, at the 800x600 source resolution.
pub const SIGMA2_AT_800X600: f64 = 200.0;
/// Resolution the default variance is stated at.
pub const SIGMA_SOURCE: (usize, usize) = (800, 600);

/// Normalized non-negative probability grid over image pixels.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    /// Validate invariants: non-negative, sums to 1 within 1e-6.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, GazeError> {
        if values.len() != width * height {
            return Err(GazeError::InvalidMap(format!(
                "{} values for {width}x{height}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GazeError::InvalidMap("negative or non-finite value".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(GazeError::InvalidMap(format!("sum {sum} != 1")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Normalize arbitrary non-negative weights into a map.
    pub fn from_weights(width: usize, height: usize, mut w: Vec<f64>) -> Result<Self, GazeError> {
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(GazeError::InvalidMap(format!("weight sum {sum}")));
        }
        for v in &mut w {
            *v /= sum;
        }
        Self::new(width, height, w)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0usize;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Area-weighted resample to a new resolution, renormalized to sum 1.
    ///
    /// Pixel-center registration: source coordinate x maps to x * (out/in),
    /// matching the fixation-coordinate scaling of [`build_attention_map`].
    pub fn resample(&self, width: usize, height: usize) -> AttentionMap {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = vec![0.0f64; width * height];
        let overlap = |lo: f64, hi: f64, i: usize| -> f64 {
            (hi.min(i as f64 + 0.5) - lo.max(i as f64 - 0.5)).max(0.0)
        };
        for dy in 0..height {
            let y0 = (dy as f64 - 0.5) * sy;
            let y1 = (dy as f64 + 0.5) * sy;
            let sy_lo = (y0 - 0.5).floor().max(0.0) as usize;
            let sy_hi = ((y1 + 0.5).ceil() as usize).min(self.height);
            for dx in 0..width {
                let x0 = (dx as f64 - 0.5) * sx;
                let x1 = (dx as f64 + 0.5) * sx;
                let sx_lo = (x0 - 0.5).floor().max(0.0) as usize;
                let sx_hi = ((x1 + 0.5).ceil() as usize).min(self.width);
                let mut acc = 0.0;
                for sy_i in sy_lo..sy_hi {
                    let hy = overlap(y0, y1, sy_i);
                    if hy <= 0.0 {
                        continue;
                    }
                    for sx_i in sx_lo..sx_hi {
                        let hx = overlap(x0, x1, sx_i);
                        if hx > 0.0 {
                            acc += hx * hy * self.at(sx_i, sy_i);
                        }
                    }
                }
                out[dy * width + dx] = acc;
            }
        }
        AttentionMap::from_weights(width, height, out).expect("resample keeps mass positive")
    }

    /// Binary format: magic `ATTM`, u32 width, u32 height, then f32
    /// little-endian values row-major.
    pub fn save(&self, path: &Path) -> Result<(), GazeError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"ATTM")?;
        f.write_all(&(self.width as u32).to_le_bytes())?;
        f.write_all(&(self.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GazeError> {
        let mut f = std::fs::File::open(path)?;
        let mut header = [0u8; 12];
        f.read_exact(&mut header)?;
        if &header[0..4] != b"ATTM" {
            return Err(GazeError::InvalidMap("bad ATTM magic".into()));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        if buf.len() != width * height * 4 {
            return Err(GazeError::InvalidMap(format!(
                "payload {} bytes for {width}x{height}",
                buf.len()
            )));
        }
        let values: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        Self::new(width, height, values)
    }
}

/// Build the attention map for one fixation window at the given output
/// resolution. Fixation coordinates and variances are rescaled from the
/// window's source resolution (variance scales with the square of the ratio).
pub fn build_attention_map(
    win: &FixationWindow,
    out_w: usize,
    out_h: usize,
) -> Result<AttentionMap, GazeError> {
    if win.fixations.is_empty() {
        return Err(GazeError::EmptyWindow);
    }
    let rx = out_w as f64 / win.source.0 as f64;
    let ry = out_h as f64 / win.source.1 as f64;
    let s2x = win.sigma2.0 * rx * rx;
    let s2y = win.sigma2.1 * ry * ry;
    let fx: Vec<(f64, f64)> = win
        .fixations
        .iter()
        .map(|(x, y)| (x * rx, y * ry))
        .collect();

    let mut w = vec![0.0f64; out_w * out_h];
    for (fx_i, fy_i) in &fx {
        for y in 0..out_h {
            let dy = y as f64 - fy_i;
            let ey = dy * dy / (2.0 * s2y);
            let row = &mut w[y * out_w..(y + 1) * out_w];
            for (x, cell) in row.iter_mut().enumerate() {
                let dx = x as f64 - fx_i;
                let g = (-(dx * dx / (2.0 * s2x) + ey)).exp();
                if g > *cell {
                    *cell = g;
                }
            }
        }
    }
    AttentionMap::from_weights(out_w, out_h, w)
}

/// Group gaze records into per-frame fixation windows (t-half .. t+half,
/// truncated at the sequence boundaries). One window per input record; the
/// records are assumed frame-ordered within a lap.
pub fn fixation_windows(
    records: &[GazeRecord],
    half: usize,
    sigma2: f64,
    sigma_source: (usize, usize),
) -> Vec<FixationWindow> {
    let n = records.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            FixationWindow {
                fixations: records[lo..hi].iter().map(|r| (r.x, r.y)).collect(),
                sigma2: (sigma2, sigma2),
                source: sigma_source,
            }
        })
        .collect()
}

/// Kullback-Leibler divergence D(A || B) = sum A ln(A/B), natural log.
///
/// Pixels with A=0 contribute zero; any pixel with A>0 and B=0 makes the
/// divergence +inf (support mismatch).
pub fn kl_divergence(a: &AttentionMap, b: &AttentionMap) -> Result<f64, GazeError> {
    if a.width != b.width || a.height != b.height {
        return Err(GazeError::ResolutionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    let mut kl = 0.0f64;
    for (pa, pb) in a.values.iter().zip(b.values.iter()) {
        if *pa > 0.0 {
            if *pb > 0.0 {
                kl += pa * (pa / pb).ln();
            } else {
                return Ok(f64::INFINITY);
            }
        }
    }
    Ok(kl.max(0.0))
}

/// Pearson correlation over flattened pixel values. `None` when either map
/// has zero variance (undefined; excluded from averages upstream).
pub fn pearson_cc(a: &AttentionMap, b: &AttentionMap) -> Result<Option<f64>, GazeError> {
    if a.width != b.width || a.height != b.height {
        return Err(GazeError::ResolutionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    let n = a.values.len() as f64;
    let ma = a.values.iter().sum::<f64>() / n;
    let mb = b.values.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (pa, pb) in a.values.iter().zip(b.values.iter()) {
        let da = pa - ma;
        let db = pb - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    // Zero variance up to accumulation noise counts as undefined.
    let tiny_a = n * (ma.abs() * 1e-9).powi(2);
    let tiny_b = n * (mb.abs() * 1e-9).powi(2);
    if saa <= tiny_a || sbb <= tiny_b {
        return Ok(None);
    }
    Ok(Some(sab / (saa.sqrt() * sbb.sqrt())))
}

/// Mean of the given maps, renormalized to sum 1.
pub fn baseline_mean_map(maps: &[AttentionMap]) -> Result<AttentionMap, GazeError> {
    let first = maps.first().ok_or(GazeError::EmptyInput)?;
    let (w, h) = (first.width, first.height);
    let mut acc = vec![0.0f64; w * h];
    for m in maps {
        if m.width != w || m.height != h {
            return Err(GazeError::ResolutionMismatch(w, h, m.width, m.height));
        }
        for (a, v) in acc.iter_mut().zip(m.values.iter()) {
            *a += v;
        }
    }
    AttentionMap::from_weights(w, h, acc)
}

/// Within-lap shuffle pairing for the shuffled-ground-truth baseline: returns
/// a permutation of item indices that only moves items inside their own lap,
/// preferring a derangement when one exists. Seeded and reproducible.
pub fn baseline_shuffle(n: usize, laps: &[Range<usize>], seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for lap in laps {
        let lap = lap.start.min(n)..lap.end.min(n);
        let len = lap.len();
        if len < 2 {
            continue;
        }
        let mut idx: Vec<usize> = lap.clone().collect();
        for _ in 0..64 {
            idx.shuffle(&mut rng);
            if idx.iter().enumerate().all(|(k, &v)| v != lap.start + k) {
                break;
            }
        }
        for (k, &v) in idx.iter().enumerate() {
            perm[lap.start + k] = v;
        }
    }
    perm
}

/// Synthetic gaze: the projection of the next gate's center, falling back to
/// subsequent gates while the target is behind the camera. Returns the raw
/// projection plus whether it fell inside the image before clamping.
pub fn synth_gaze_point(
    s: &QuadState,
    track: &Track,
    next_gate: usize,
    cam: &CameraModel,
) -> (f64, f64, bool) {
    let n = track.gates.len();
    for k in 0..n {
        let gate = &track.gates[(next_gate + k) % n];
        let pr = project_point(&gate.center_v(), s, cam);
        if pr.in_front {
            let inside = pr.x >= 0.0
                && pr.x <= cam.width as f64 - 1.0
                && pr.y >= 0.0
                && pr.y <= cam.height as f64 - 1.0;
            return (pr.x, pr.y, inside);
        }
    }
    // Nothing visible at all; look at the image center.
    let (cx, cy) = cam.principal_point();
    (cx, cy, false)
}

/// Deterministic synthetic gaze record, clamped to image bounds.
pub fn synth_gaze_oracle(
    s: &QuadState,
    track: &Track,
    next_gate: usize,
    cam: &CameraModel,
    frame: u64,
) -> GazeRecord {
    let (x, y, _) = synth_gaze_point(s, track, next_gate, cam);
    GazeRecord {
        ts: s.t,
        frame,
        x: x.clamp(0.0, cam.width as f64 - 1.0),
        y: y.clamp(0.0, cam.height as f64 - 1.0),
    }
}

/// Write a gaze log CSV: `ts,frame,gaze_x,gaze_y`.
pub fn save_gaze_csv(records: &[GazeRecord], path: &Path) -> Result<(), GazeError> {
    let mut out = String::from("ts,frame,gaze_x,gaze_y\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.ts, r.frame, r.x, r.y));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Column mapping for loading third-party gaze CSVs onto our schema: maps
/// our column names to the names used in the source file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeColumnMap {
    pub ts: Option<String>,
    pub frame: Option<String>,
    pub gaze_x: Option<String>,
    pub gaze_y: Option<String>,
}

impl GazeColumnMap {
    pub fn load(path: &Path) -> Result<Self, GazeError> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| GazeError::Csv(e.to_string()))
    }
}

/// Load a gaze log CSV; `mapping` renames source columns onto the
/// `ts,frame,gaze_x,gaze_y` schema, unmapped names are used as-is.
pub fn load_gaze_csv(path: &Path, mapping: &GazeColumnMap) -> Result<Vec<GazeRecord>, GazeError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| GazeError::Csv(e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| GazeError::Csv(e.to_string()))?
        .clone();
    let find = |ours: &str, theirs: &Option<String>| -> Result<usize, GazeError> {
        let name = theirs.as_deref().unwrap_or(ours);
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GazeError::Csv(format!("column `{name}` not found")))
    };
    let ci_ts = find("ts", &mapping.ts)?;
    let ci_frame = find("frame", &mapping.frame)?;
    let ci_x = find("gaze_x", &mapping.gaze_x)?;
    let ci_y = find("gaze_y", &mapping.gaze_y)?;

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| GazeError::Csv(e.to_string()))?;
        let get = |i: usize| -> Result<f64, GazeError> {
            rec.get(i)
                .ok_or_else(|| GazeError::Csv("short row".into()))?
                .parse::<f64>()
                .map_err(|e| GazeError::Csv(e.to_string()))
        };
        out.push(GazeRecord {
            ts: get(ci_ts)?,
            frame: get(ci_frame)? as u64,
            x: get(ci_x)?,
            y: get(ci_y)?,
        });
    }
    Ok(out)
}

/// Per-frame average of raw gaze samples sharing a frame id; output ordered
/// by first appearance.
pub fn average_per_frame(records: &[GazeRecord]) -> Vec<GazeRecord> {
    let mut order: Vec<u64> = Vec::new();
    let mut acc: HashMap<u64, (f64, f64, f64, usize)> = HashMap::new();
    for r in records {
        let e = acc.entry(r.frame).or_insert_with(|| {
            order.push(r.frame);
            (0.0, 0.0, 0.0, 0)
        });
        e.0 += r.ts;
        e.1 += r.x;
        e.2 += r.y;
        e.3 += 1;
    }
    order
        .into_iter()
        .map(|f| {
            let (ts, x, y, n) = acc[&f];
            let n = n as f64;
            GazeRecord {
                ts: ts / n,
                frame: f,
                x: x / n,
                y: y / n,
            }
        })
        .collect()
}

/// Mean KL over map pairs with infinities reported separately, plus mean CC
/// excluding undefined values — the Table-1-style summary.
#[derive(Clone, Copy, Debug, Default)]
pub struct SaliencySummary {
    pub kl_finite_mean: f64,
    pub kl_inf_count: usize,
    pub cc_mean: f64,
    pub cc_undefined: usize,
    pub n: usize,
}

pub fn summarize_metrics(
    gt: &[AttentionMap],
    pred: &[AttentionMap],
) -> Result<SaliencySummary, GazeError> {
    if gt.len() != pred.len() || gt.is_empty() {
        return Err(GazeError::EmptyInput);
    }
    let mut s = SaliencySummary {
        n: gt.len(),
        ..Default::default()
    };
    let mut kl_sum = 0.0;
    let mut kl_n = 0usize;
    let mut cc_sum = 0.0;
    let mut cc_n = 0usize;
    for (a, b) in gt.iter().zip(pred.iter()) {
        let kl = kl_divergence(a, b)?;
        if kl.is_finite() {
            kl_sum += kl;
            kl_n += 1;
        } else {
            s.kl_inf_count += 1;
        }
        match pearson_cc(a, b)? {
            Some(cc) => {
                cc_sum += cc;
                cc_n += 1;
            }
            None => s.cc_undefined += 1,
        }
    }
    s.kl_finite_mean = if kl_n > 0 { kl_sum / kl_n as f64 } else { f64::NAN };
    s.cc_mean = if cc_n > 0 { cc_sum / cc_n as f64 } else { f64::NAN };
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_at(fixations: Vec<(f64, f64)>, res: (usize, usize)) -> FixationWindow {
        FixationWindow {
            fixations,
            sigma2: (8.0, 8.0),
            source: res,
        }
    }

    #[test]
    fn single_fixation_map_peaks_at_fixation() {
        let win = window_at(vec![(32.0, 24.0)], (64, 48));
        let m = build_attention_map(&win, 64, 48).unwrap();
        assert_eq!(m.argmax(), (32, 24));
        let sum: f64 = m.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn duplicate_fixations_change_nothing() {
        let a = build_attention_map(&window_at(vec![(10.0, 10.0)], (64, 48)), 64, 48).unwrap();
        let b = build_attention_map(
            &window_at(vec![(10.0, 10.0), (10.0, 10.0)], (64, 48)),
            64,
            48,
        )
        .unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn map_matches_bruteforce_oracle() {
        // Independent per-pixel evaluation of the max-of-Gaussians formula.
        let win = FixationWindow {
            fixations: vec![(20.0, 14.0), (44.0, 30.0)],
            sigma2: (12.0, 9.0),
            source: (64, 48),
        };
        let m = build_attention_map(&win, 64, 48).unwrap();
        let mut w = vec![0.0f64; 64 * 48];
        for y in 0..48 {
            for x in 0..64 {
                let mut best = 0.0f64;
                for (fx, fy) in &win.fixations {
                    let g = (-((x as f64 - fx).powi(2) / (2.0 * 12.0)
                        + (y as f64 - fy).powi(2) / (2.0 * 9.0)))
                        .exp();
                    best = best.max(g);
                }
                w[y * 64 + x] = best;
            }
        }
        let total: f64 = w.iter().sum();
        for (i, v) in w.iter().enumerate() {
            let got = m.values()[i];
            let want = v / total;
            let denom = want.abs().max(1e-300);
            assert!(
                ((got - want) / denom).abs() < 1e-9,
                "pixel {i}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn fixation_order_is_irrelevant() {
        let a = build_attention_map(
            &window_at(vec![(10.0, 10.0), (40.0, 30.0), (22.0, 5.0)], (64, 48)),
            64,
            48,
        )
        .unwrap();
        let b = build_attention_map(
            &window_at(vec![(22.0, 5.0), (10.0, 10.0), (40.0, 30.0)], (64, 48)),
            64,
            48,
        )
        .unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn empty_window_is_an_error() {
        assert!(build_attention_map(&window_at(vec![], (64, 48)), 64, 48).is_err());
    }

    #[test]
    fn kl_basics() {
        let m = build_attention_map(&window_at(vec![(30.0, 20.0)], (64, 48)), 64, 48).unwrap();
        assert_eq!(kl_divergence(&m, &m).unwrap(), 0.0);

        // Two-pixel hand computation.
        let a = AttentionMap::new(2, 1, vec![0.5, 0.5]).unwrap();
        let b = AttentionMap::new(2, 1, vec![0.25, 0.75]).unwrap();
        let expect = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.1438).abs() < 1e-4);

        // Support mismatch is +inf.
        let c = AttentionMap::new(2, 1, vec![1.0, 0.0]).unwrap();
        let d = AttentionMap::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(kl_divergence(&c, &d).unwrap().is_infinite());
        // ...but zero A pixels contribute nothing.
        assert_eq!(kl_divergence(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn kl_is_asymmetric_and_nonnegative() {
        let a = build_attention_map(&window_at(vec![(20.0, 20.0)], (64, 48)), 64, 48).unwrap();
        let b = build_attention_map(&window_at(vec![(36.0, 22.0)], (64, 48)), 64, 48).unwrap();
        let ab = kl_divergence(&a, &b).unwrap();
        let ba = kl_divergence(&b, &a).unwrap();
        assert!(ab >= 0.0 && ba >= 0.0);
        assert!((ab - ba).abs() > 1e-12 || ab == ba);
    }

    #[test]
    fn cc_identity_affine_and_oracle() {
        let m = build_attention_map(&window_at(vec![(25.0, 17.0)], (64, 48)), 64, 48).unwrap();
        assert!((pearson_cc(&m, &m).unwrap().unwrap() - 1.0).abs() < 1e-12);

        // Positive affine transform keeps CC = 1 (renormalized inside a map).
        let scaled: Vec<f64> = m.values().iter().map(|v| 0.3 * v + 0.01).collect();
        let total: f64 = scaled.iter().sum();
        let scaled: Vec<f64> = scaled.into_iter().map(|v| v / total).collect();
        let ms = AttentionMap::new(64, 48, scaled).unwrap();
        assert!((pearson_cc(&m, &ms).unwrap().unwrap() - 1.0).abs() < 1e-9);

        // Mirror comparison against the direct formula.
        let mut mirrored = vec![0.0; 64 * 48];
        for y in 0..48 {
            for x in 0..64 {
                mirrored[y * 64 + x] = m.at(63 - x, y);
            }
        }
        let mm = AttentionMap::new(64, 48, mirrored).unwrap();
        let got = pearson_cc(&m, &mm).unwrap().unwrap();
        let n = (64 * 48) as f64;
        let mean = 1.0 / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for i in 0..m.values().len() {
            let da = m.values()[i] - mean;
            let db = mm.values()[i] - mean;
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
        let want = sab / (saa.sqrt() * sbb.sqrt());
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn cc_zero_variance_is_undefined() {
        let n = 64 * 48;
        let flat = AttentionMap::new(64, 48, vec![1.0 / n as f64; n]).unwrap();
        let m = build_attention_map(&window_at(vec![(25.0, 17.0)], (64, 48)), 64, 48).unwrap();
        assert!(pearson_cc(&flat, &m).unwrap().is_none());
    }

    #[test]
    fn mean_map_of_identical_maps_is_identity() {
        let m = build_attention_map(&window_at(vec![(25.0, 17.0)], (64, 48)), 64, 48).unwrap();
        let mean = baseline_mean_map(&[m.clone(), m.clone()]).unwrap();
        for (a, b) in mean.values().iter().zip(m.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let sum: f64 = mean.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shuffle_is_within_lap_deranged_and_reproducible() {
        let laps = vec![0..3, 3..7];
        let p1 = baseline_shuffle(7, &laps, 99);
        let p2 = baseline_shuffle(7, &laps, 99);
        assert_eq!(p1, p2);
        // Items stay within their lap.
        for i in 0..3 {
            assert!(p1[i] < 3);
        }
        for i in 3..7 {
            assert!((3..7).contains(&p1[i]));
        }
        // Derangements exist for lap sizes 3 and 4, so no fixed points.
        for (i, &v) in p1.iter().enumerate() {
            assert_ne!(i, v, "fixed point at {i}");
        }
        // Each lap's permutation is a bijection.
        let mut sorted = p1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn downscale_consistency() {
        // Build at a high resolution, area-resample down, compare with the
        // map built directly at the low resolution with rescaled variance.
        let win = FixationWindow {
            fixations: vec![(300.0, 200.0), (420.0, 310.0)],
            sigma2: (SIGMA2_AT_800X600, SIGMA2_AT_800X600),
            source: SIGMA_SOURCE,
        };
        let hi = build_attention_map(&win, 800, 600).unwrap();
        let lo_direct = build_attention_map(&win, 128, 96).unwrap();
        let lo_down = hi.resample(128, 96);
        let cc = pearson_cc(&lo_direct, &lo_down).unwrap().unwrap();
        assert!(cc >= 0.99, "cc = {cc}");
    }

    #[test]
    fn attm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.attm");
        let m = build_attention_map(&window_at(vec![(25.0, 17.0)], (64, 48)), 64, 48).unwrap();
        m.save(&p).unwrap();
        let back = AttentionMap::load(&p).unwrap();
        assert_eq!(back.width, 64);
        assert_eq!(back.height, 48);
        let sum: f64 = back.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(back.argmax(), m.argmax());
    }

    #[test]
    fn gaze_csv_round_trip_with_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gaze.csv");
        let records = vec![
            GazeRecord {
                ts: 0.0,
                frame: 0,
                x: 12.5,
                y: 30.0,
            },
            GazeRecord {
                ts: 0.04,
                frame: 1,
                x: 14.0,
                y: 28.5,
            },
        ];
        save_gaze_csv(&records, &p).unwrap();
        let back = load_gaze_csv(&p, &GazeColumnMap::default()).unwrap();
        assert_eq!(back, records);

        // Foreign column names resolved through a mapping.
        std::fs::write(
            dir.path().join("foreign.csv"),
            "time,frame_idx,gx,gy\n1.0,7,3.0,4.0\n",
        )
        .unwrap();
        let mapping: GazeColumnMap = serde_json::from_str(
            r#"{"ts":"time","frame":"frame_idx","gaze_x":"gx","gaze_y":"gy"}"#,
        )
        .unwrap();
        let back = load_gaze_csv(&dir.path().join("foreign.csv"), &mapping).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].frame, 7);
        assert_eq!(back[0].x, 3.0);
    }

    #[test]
    fn window_extraction_truncates_at_boundaries() {
        let records: Vec<GazeRecord> = (0..40)
            .map(|i| GazeRecord {
                ts: i as f64 * 0.04,
                frame: i,
                x: i as f64,
                y: 0.0,
            })
            .collect();
        let wins = fixation_windows(&records, WINDOW_HALF, 8.0, (64, 48));
        assert_eq!(wins.len(), 40);
        assert_eq!(wins[0].fixations.len(), 13);
        assert_eq!(wins[20].fixations.len(), 25);
        assert_eq!(wins[39].fixations.len(), 13);
    }
}
