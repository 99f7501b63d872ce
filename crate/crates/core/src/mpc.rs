//! The privileged expert: reference trajectories through the gates and a
//! receding-horizon iLQR tracker on the simplified quadrotor model.
//!
//! References are closed Catmull-Rom splines through the gate centers,
//! arc-length parameterized at a commanded speed and sampled at 50 Hz. The
//! solver linearizes the quadrotor dynamics with finite differences and runs
//! an iLQR backward/forward sweep with backtracking line search.

use crate::seed;
use crate::sim::{clamp_command, Command, QuadParams, QuadState, Track};
use nalgebra::{
    Matrix3, Matrix3x4, Quaternion, SMatrix, SVector, UnitQuaternion, Vector3, Vector4,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(thiserror::Error, Debug)]
pub enum MpcError {
    #[error("reference speed {0} outside (0.5, 10] m/s")]
    BadSpeed(f64),
    #[error("track has fewer than 2 gates")]
    DegenerateTrack,
    #[error("reference crosses a gate frame between passes (gate {0})")]
    SelfIntersection(usize),
    #[error("reference window shorter than the horizon")]
    ShortWindow,
    #[error("reference csv: {0}")]
    Csv(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One 50 Hz reference sample.
#[derive(Clone, Copy, Debug)]
pub struct RefSample {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

/// Uniformly sampled (20 ms) reference trajectory.
#[derive(Clone, Debug)]
pub struct ReferenceTrajectory {
    pub samples: Vec<RefSample>,
}

pub const REF_DT: f64 = 0.02;

impl ReferenceTrajectory {
    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    /// Interpolated sample at time `t`, clamped to the trajectory span.
    /// Linear in position/velocity/rates, slerp on orientation.
    pub fn sample(&self, t: f64) -> RefSample {
        let n = self.samples.len();
        debug_assert!(n >= 2);
        let t = t.clamp(0.0, self.duration());
        let idx = (t / REF_DT).floor() as usize;
        if idx + 1 >= n {
            return self.samples[n - 1];
        }
        let a = &self.samples[idx];
        let b = &self.samples[idx + 1];
        let alpha = ((t - a.t) / REF_DT).clamp(0.0, 1.0);
        RefSample {
            t,
            p: a.p.lerp(&b.p, alpha),
            q: a.q.slerp(&b.q, alpha),
            v: a.v.lerp(&b.v, alpha),
            w: a.w.lerp(&b.w, alpha),
        }
    }

    /// Starting state for a rollout tracking this reference.
    pub fn start_state(&self) -> QuadState {
        let s0 = self.samples[0];
        QuadState {
            t: 0.0,
            p: s0.p,
            v: s0.v,
            q: s0.q,
            w: s0.w,
        }
    }

    /// CSV export: `ts,px,py,pz,qw,qx,qy,qz,vx,vy,vz,wx,wy,wz` at 50 Hz.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ts,px,py,pz,qw,qx,qy,qz,vx,vy,vz,wx,wy,wz\n");
        for s in &self.samples {
            let q = s.q.quaternion();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                s.t,
                s.p.x,
                s.p.y,
                s.p.z,
                q.w,
                q.i,
                q.j,
                q.k,
                s.v.x,
                s.v.y,
                s.v.z,
                s.w.x,
                s.w.y,
                s.w.z
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), MpcError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self, MpcError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| MpcError::Csv("empty".into()))?;
        if header != "ts,px,py,pz,qw,qx,qy,qz,vx,vy,vz,wx,wy,wz" {
            return Err(MpcError::Csv(format!("unexpected header `{header}`")));
        }
        let mut samples = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| MpcError::Csv(format!("line {}: {e}", ln + 2)))?;
            if cols.len() != 14 {
                return Err(MpcError::Csv(format!("line {}: {} columns", ln + 2, cols.len())));
            }
            samples.push(RefSample {
                t: cols[0],
                p: Vector3::new(cols[1], cols[2], cols[3]),
                q: UnitQuaternion::from_quaternion(Quaternion::new(
                    cols[4], cols[5], cols[6], cols[7],
                )),
                v: Vector3::new(cols[8], cols[9], cols[10]),
                w: Vector3::new(cols[11], cols[12], cols[13]),
            });
        }
        if samples.len() < 2 {
            return Err(MpcError::Csv("fewer than 2 samples".into()));
        }
        Ok(Self { samples })
    }
}

fn catmull_rom(p0: &Vector3<f64>, p1: &Vector3<f64>, p2: &Vector3<f64>, p3: &Vector3<f64>, u: f64) -> Vector3<f64> {
    let u2 = u * u;
    let u3 = u2 * u;
    0.5 * ((p1 * 2.0)
        + (p2 - p0) * u
        + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * u2
        + (p3 - p0 + (p1 - p2) * 3.0) * u3)
}

/// Dense closed-loop polyline through the waypoints, `per_seg` points per
/// Catmull-Rom segment, starting half a segment before waypoint 0.
fn dense_loop(points: &[Vector3<f64>], per_seg: usize) -> Vec<Vector3<f64>> {
    let n = points.len();
    let mut out = Vec::with_capacity(n * per_seg + 1);
    // Parameter runs over segments (n-1 -> 0), (0 -> 1), ..., covering one
    // full lap starting at the midpoint of the closing segment.
    for seg in 0..=n {
        let i = (seg + n - 1) % n;
        let p0 = points[(i + n - 1) % n];
        let p1 = points[i];
        let p2 = points[(i + 1) % n];
        let p3 = points[(i + 2) % n];
        let (u_lo, u_hi) = if seg == 0 {
            (0.5, 1.0)
        } else if seg == n {
            (0.0, 0.5)
        } else {
            (0.0, 1.0)
        };
        let steps = (per_seg as f64 * (u_hi - u_lo)).round() as usize;
        for k in 0..steps {
            let u = u_lo + (u_hi - u_lo) * k as f64 / steps as f64;
            out.push(catmull_rom(&p0, &p1, &p2, &p3, u));
        }
    }
    // Close the sampling interval.
    let i = (n - 1) % n;
    let p0 = points[(i + n - 1) % n];
    out.push(catmull_rom(
        &p0,
        &points[i],
        &points[0],
        &points[1],
        0.5,
    ));
    out
}

/// Generate the reference lap for a track at the given speed, passing the
/// gate centers in order (optionally offset per gate).
pub fn generate_reference_with_offsets(
    track: &Track,
    speed: f64,
    offsets: &[Vector3<f64>],
) -> Result<ReferenceTrajectory, MpcError> {
    if !(speed > 0.5 && speed <= 10.0) {
        return Err(MpcError::BadSpeed(speed));
    }
    if track.gates.len() < 2 {
        return Err(MpcError::DegenerateTrack);
    }
    let points: Vec<Vector3<f64>> = track
        .gates
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let off = offsets.get(i).copied().unwrap_or_else(Vector3::zeros);
            g.center_v() + off
        })
        .collect();

    let dense = dense_loop(&points, 400);
    // Cumulative arc length.
    let mut cum = Vec::with_capacity(dense.len());
    let mut total = 0.0;
    cum.push(0.0);
    for i in 1..dense.len() {
        total += (dense[i] - dense[i - 1]).norm();
        cum.push(total);
    }
    if total <= 0.0 {
        return Err(MpcError::DegenerateTrack);
    }

    check_frame_crossings(track, &dense)?;

    let duration = total / speed;
    let n = (duration / REF_DT).ceil() as usize + 1;
    let pos_at = |sarc: f64| -> Vector3<f64> {
        let sarc = sarc.clamp(0.0, total);
        let j = cum.partition_point(|c| *c < sarc).max(1).min(cum.len() - 1);
        let (c0, c1) = (cum[j - 1], cum[j]);
        let alpha = if c1 > c0 { (sarc - c0) / (c1 - c0) } else { 0.0 };
        dense[j - 1].lerp(&dense[j], alpha)
    };

    // Positions and velocities first.
    let mut ps = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    let ds = 0.05_f64.min(total / n as f64);
    for i in 0..n {
        let sarc = (speed * i as f64 * REF_DT).min(total);
        ps.push(pos_at(sarc));
        let tangent = (pos_at((sarc + ds).min(total)) - pos_at((sarc - ds).max(0.0))).normalize();
        vs.push(tangent * speed);
    }

    // Accelerations by central differences, then differential-flatness
    // attitude: body z along the required thrust direction, yaw along the
    // velocity.
    let g = 9.81;
    let mut samples = Vec::with_capacity(n);
    let mut qs: Vec<UnitQuaternion<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let a = if i == 0 {
            (vs[1] - vs[0]) / REF_DT
        } else if i + 1 == n {
            (vs[n - 1] - vs[n - 2]) / REF_DT
        } else {
            (vs[i + 1] - vs[i - 1]) / (2.0 * REF_DT)
        };
        let thrust_dir = (a + Vector3::new(0.0, 0.0, g)).normalize();
        let yaw = vs[i].y.atan2(vs[i].x);
        let x_des = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let yb = thrust_dir.cross(&x_des).normalize();
        let xb = yb.cross(&thrust_dir);
        let rot = Matrix3::from_columns(&[xb, yb, thrust_dir]);
        let mut q = UnitQuaternion::from_matrix(&rot);
        // Keep the quaternion track continuous across the lap.
        if let Some(prev) = qs.last() {
            if prev.coords.dot(&q.coords) < 0.0 {
                q = UnitQuaternion::from_quaternion(-*q.quaternion());
            }
        }
        qs.push(q);
    }
    for i in 0..n {
        let w = if i == 0 || i + 1 == n {
            Vector3::zeros()
        } else {
            // Body rates from the quaternion track.
            (qs[i - 1].inverse() * qs[i + 1]).scaled_axis() / (2.0 * REF_DT)
        };
        samples.push(RefSample {
            t: i as f64 * REF_DT,
            p: ps[i],
            q: qs[i],
            v: vs[i],
            w,
        });
    }
    Ok(ReferenceTrajectory { samples })
}

/// Reject reference paths that would fly through a gate frame: every plane
/// crossing within a gate's outer rectangle must be inside the aperture.
fn check_frame_crossings(track: &Track, dense: &[Vector3<f64>]) -> Result<(), MpcError> {
    for gate in &track.gates {
        let c = gate.center_v();
        let nrm = gate.normal_v();
        let r = gate.right_v();
        let u = gate.up_v();
        let hw = gate.inner_w * 0.5;
        let hh = gate.inner_h * 0.5;
        let ft = gate.frame_thickness;
        for i in 1..dense.len() {
            let a = dense[i - 1];
            let b = dense[i];
            let da = (a - c).dot(&nrm);
            let db = (b - c).dot(&nrm);
            if da * db > 0.0 || (da == 0.0 && db == 0.0) {
                continue;
            }
            let t = da / (da - db);
            let hit = a + (b - a) * t - c;
            let x = hit.dot(&r).abs();
            let y = hit.dot(&u).abs();
            let in_outer = x <= hw + ft && y <= hh + ft;
            let in_aperture = x <= hw && y <= hh;
            if in_outer && !in_aperture {
                return Err(MpcError::SelfIntersection(gate.index));
            }
        }
    }
    Ok(())
}

pub fn generate_reference(track: &Track, speed: f64) -> Result<ReferenceTrajectory, MpcError> {
    generate_reference_with_offsets(track, speed, &[])
}

/// A generated reference with its provenance.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    pub ids: Vec<String>,
    pub trajectories: Vec<ReferenceTrajectory>,
}

/// Generate `count` references by jittering gate-passage offsets (uniform in
/// the gate plane) and speeds within `speed_range`. Stand-in for a set of
/// human lap trajectories.
pub fn generate_reference_set(
    track: &Track,
    count: usize,
    speed_range: (f64, f64),
    offset_jitter: f64,
    seed_root: u64,
    tag: &str,
) -> Result<ReferenceSet, MpcError> {
    let mut ids = Vec::with_capacity(count);
    let mut trajectories = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
            seed_root,
            &[seed::label("reference"), seed::label(tag), k as u64],
        ));
        let offsets: Vec<Vector3<f64>> = track
            .gates
            .iter()
            .map(|g| {
                let dr = rng.random_range(-offset_jitter..=offset_jitter);
                let du = rng.random_range(-offset_jitter..=offset_jitter);
                g.right_v() * dr + g.up_v() * du
            })
            .collect();
        let speed = rng.random_range(speed_range.0..=speed_range.1);
        trajectories.push(generate_reference_with_offsets(track, speed, &offsets)?);
        ids.push(format!("{tag}-{k:02}"));
    }
    Ok(ReferenceSet { ids, trajectories })
}

/// iLQR tracker configuration. All numeric values are workbench defaults.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Prediction horizon, s.
    pub horizon: f64,
    /// Number of control intervals across the horizon.
    pub nodes: usize,
    pub w_p: f64,
    pub w_v: f64,
    pub w_q: f64,
    pub w_u: f64,
    pub max_iters: usize,
    /// Relative cost-decrease convergence tolerance.
    pub tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            nodes: 20,
            w_p: 50.0,
            w_v: 10.0,
            w_q: 5.0,
            w_u: 1.0,
            max_iters: 30,
            tol: 1e-4,
        }
    }
}

const NX: usize = 10;
const NU: usize = 4;
type VecX = SVector<f64, NX>;
type VecU = SVector<f64, NU>;
type MatXX = SMatrix<f64, NX, NX>;
type MatXU = SMatrix<f64, NX, NU>;
type MatUU = SMatrix<f64, NU, NU>;
type MatUX = SMatrix<f64, NU, NX>;

fn pack(s: &QuadState) -> VecX {
    let q = s.q.quaternion();
    VecX::from_column_slice(&[
        s.p.x, s.p.y, s.p.z, s.v.x, s.v.y, s.v.z, q.w, q.i, q.j, q.k,
    ])
}


/// Discrete dynamics over one node interval: RK4 on the point-mass-with-
/// attitude model with instantaneous rate tracking, then renormalization.
fn f_disc(x: &VecX, u: &VecU, dt: f64, g: f64) -> VecX {
    #[inline]
    fn deriv(x: &[f64; 10], u: &VecU, g: f64) -> [f64; 10] {
        let (qw, qx, qy, qz) = (x[6], x[7], x[8], x[9]);
        let c = u[0];
        // R(q) * e3 * c
        let ax = c * 2.0 * (qx * qz + qw * qy);
        let ay = c * 2.0 * (qy * qz - qw * qx);
        let az = c * (1.0 - 2.0 * (qx * qx + qy * qy)) - g;
        let (wx, wy, wz) = (u[1], u[2], u[3]);
        [
            x[3],
            x[4],
            x[5],
            ax,
            ay,
            az,
            0.5 * (-qx * wx - qy * wy - qz * wz),
            0.5 * (qw * wx + qy * wz - qz * wy),
            0.5 * (qw * wy - qx * wz + qz * wx),
            0.5 * (qw * wz + qx * wy - qy * wx),
        ]
    }
    let x0: [f64; 10] = (*x).into();
    let k1 = deriv(&x0, u, g);
    let mut x1 = x0;
    for i in 0..10 {
        x1[i] = x0[i] + 0.5 * dt * k1[i];
    }
    let k2 = deriv(&x1, u, g);
    for i in 0..10 {
        x1[i] = x0[i] + 0.5 * dt * k2[i];
    }
    let k3 = deriv(&x1, u, g);
    for i in 0..10 {
        x1[i] = x0[i] + dt * k3[i];
    }
    let k4 = deriv(&x1, u, g);
    let mut out = [0.0; 10];
    for i in 0..10 {
        out[i] = x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    // Renormalize the quaternion block.
    let qn = (out[6] * out[6] + out[7] * out[7] + out[8] * out[8] + out[9] * out[9]).sqrt();
    if qn > 0.0 {
        for v in &mut out[6..10] {
            *v /= qn;
        }
    }
    VecX::from_column_slice(&out)
}

/// Attitude error operator: rows 1..3 of the left-multiplication matrix of
/// conj(q_ref) times 2, so that M * q = 2 vec(q_ref^-1 ⊗ q).
fn attitude_error_matrix(q_ref: &UnitQuaternion<f64>) -> Matrix3x4<f64> {
    let a = q_ref.quaternion().conjugate();
    let (aw, ax, ay, az) = (a.w, a.i, a.j, a.k);
    2.0 * Matrix3x4::new(
        ax, aw, -az, ay, //
        ay, az, aw, -ax, //
        az, -ay, ax, aw,
    )
}

struct StageRef {
    p: Vector3<f64>,
    v: Vector3<f64>,
    m_att: Matrix3x4<f64>,
}

fn stage_cost(x: &VecX, u: Option<&VecU>, r: &StageRef, cfg: &MpcConfig, u_hover: &VecU) -> f64 {
    let dp = Vector3::new(x[0] - r.p.x, x[1] - r.p.y, x[2] - r.p.z);
    let dv = Vector3::new(x[3] - r.v.x, x[4] - r.v.y, x[5] - r.v.z);
    let qv = Vector4::new(x[6], x[7], x[8], x[9]);
    let e = r.m_att * qv;
    let mut c = cfg.w_p * dp.norm_squared() + cfg.w_v * dv.norm_squared() + cfg.w_q * e.norm_squared();
    if let Some(u) = u {
        let du = u - u_hover;
        c += cfg.w_u * du.norm_squared();
    }
    c
}

fn stage_grad_hess(
    x: &VecX,
    r: &StageRef,
    cfg: &MpcConfig,
) -> (VecX, MatXX) {
    let mut gx = VecX::zeros();
    let mut hxx = MatXX::zeros();
    for i in 0..3 {
        gx[i] = 2.0 * cfg.w_p * (x[i] - r.p[i]);
        hxx[(i, i)] = 2.0 * cfg.w_p;
        gx[3 + i] = 2.0 * cfg.w_v * (x[3 + i] - r.v[i]);
        hxx[(3 + i, 3 + i)] = 2.0 * cfg.w_v;
    }
    let qv = Vector4::new(x[6], x[7], x[8], x[9]);
    let mtm = r.m_att.transpose() * r.m_att;
    let gq = 2.0 * cfg.w_q * (mtm * qv);
    for i in 0..4 {
        gx[6 + i] = gq[i];
        for j in 0..4 {
            hxx[(6 + i, 6 + j)] = 2.0 * cfg.w_q * mtm[(i, j)];
        }
    }
    (gx, hxx)
}

/// Result of one receding-horizon solve.
#[derive(Clone, Debug)]
pub struct MpcSolution {
    /// Planned command sequence; the first element is applied.
    pub commands: Vec<Command>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// True when the solver fell back to hover because of a numerical
    /// failure.
    pub fallback: bool,
}

/// Warm-start carrier between consecutive solves.
#[derive(Clone, Debug, Default)]
pub struct MpcWarmStart {
    us: Vec<VecU>,
}

/// Solve the tracking problem from state `s` against the reference window
/// starting at time `t_now`. The reference must cover `t_now + horizon`.
pub fn solve_mpc(
    s: &QuadState,
    reference: &ReferenceTrajectory,
    t_now: f64,
    cfg: &MpcConfig,
    params: &QuadParams,
    warm: &mut MpcWarmStart,
) -> Result<MpcSolution, MpcError> {
    let n = cfg.nodes;
    if reference.duration() + 1e-9 < t_now {
        return Err(MpcError::ShortWindow);
    }
    let dt = cfg.horizon / n as f64;
    let g = params.g;
    let u_hover = VecU::from_column_slice(&[g, 0.0, 0.0, 0.0]);
    let u_min = VecU::from_column_slice(&[0.0, -params.w_max, -params.w_max, -params.w_max]);
    let u_max = VecU::from_column_slice(&[
        params.c_max_norm(),
        params.w_max,
        params.w_max,
        params.w_max,
    ]);
    let clamp_u = |u: &VecU| -> VecU {
        let mut o = *u;
        for i in 0..NU {
            o[i] = o[i].clamp(u_min[i], u_max[i]);
        }
        o
    };

    // Per-node references; the window is clamped at the end of the lap so a
    // terminal hover-hold is implied past the final sample.
    let mut refs: Vec<StageRef> = Vec::with_capacity(n + 1);
    let mut q_prev: Option<UnitQuaternion<f64>> = None;
    for k in 0..=n {
        let rs = reference.sample(t_now + k as f64 * dt);
        let mut q = rs.q;
        if let Some(prev) = q_prev {
            if prev.coords.dot(&q.coords) < 0.0 {
                q = UnitQuaternion::from_quaternion(-*q.quaternion());
            }
        }
        q_prev = Some(q);
        refs.push(StageRef {
            p: rs.p,
            v: rs.v,
            m_att: attitude_error_matrix(&q),
        });
    }

    if warm.us.len() != n {
        warm.us = vec![u_hover; n];
    }
    let mut us = warm.us.clone();
    let x0 = pack(s);

    let rollout = |us: &[VecU]| -> (Vec<VecX>, f64) {
        let mut xs = Vec::with_capacity(n + 1);
        xs.push(x0);
        let mut cost = 0.0;
        for k in 0..n {
            let u = clamp_u(&us[k]);
            cost += stage_cost(&xs[k], Some(&u), &refs[k], cfg, &u_hover);
            xs.push(f_disc(&xs[k], &u, dt, g));
        }
        cost += stage_cost(&xs[n], None, &refs[n], cfg, &u_hover);
        (xs, cost)
    };

    let (mut xs, mut cost) = rollout(&us);
    if !cost.is_finite() {
        let hover = Command::hover(params);
        return Ok(MpcSolution {
            commands: vec![hover; n],
            cost,
            iterations: 0,
            converged: false,
            fallback: true,
        });
    }

    let fd_eps = 1e-6;
    let mut mu = 1e-6;
    let mut iterations = 0;
    let mut converged = false;

    for _iter in 0..cfg.max_iters {
        iterations += 1;
        // Linearize along the trajectory.
        let mut a_mats: Vec<MatXX> = Vec::with_capacity(n);
        let mut b_mats: Vec<MatXU> = Vec::with_capacity(n);
        for k in 0..n {
            let u = clamp_u(&us[k]);
            let mut a = MatXX::zeros();
            for i in 0..NX {
                let mut xp = xs[k];
                let mut xm = xs[k];
                let h = fd_eps * (1.0 + xs[k][i].abs());
                xp[i] += h;
                xm[i] -= h;
                let fp = f_disc(&xp, &u, dt, g);
                let fm = f_disc(&xm, &u, dt, g);
                a.set_column(i, &((fp - fm) / (2.0 * h)));
            }
            let mut b = MatXU::zeros();
            for i in 0..NU {
                let mut up = u;
                let mut um = u;
                let h = fd_eps * (1.0 + u[i].abs());
                up[i] += h;
                um[i] -= h;
                let fp = f_disc(&xs[k], &up, dt, g);
                let fm = f_disc(&xs[k], &um, dt, g);
                b.set_column(i, &((fp - fm) / (2.0 * h)));
            }
            a_mats.push(a);
            b_mats.push(b);
        }

        // Backward pass with Levenberg regularization; bump mu on failure.
        let backward = |mu: f64| -> Option<(Vec<VecU>, Vec<MatUX>)> {
            let (mut vx, mut vxx) = stage_grad_hess(&xs[n], &refs[n], cfg);
            let mut kffs = vec![VecU::zeros(); n];
            let mut gains = vec![MatUX::zeros(); n];
            for k in (0..n).rev() {
                let u = clamp_u(&us[k]);
                let (lx, lxx) = stage_grad_hess(&xs[k], &refs[k], cfg);
                let lu = 2.0 * cfg.w_u * (u - u_hover);
                let luu = MatUU::identity() * (2.0 * cfg.w_u);
                let a = &a_mats[k];
                let b = &b_mats[k];
                let qx = lx + a.transpose() * vx;
                let qu = lu + b.transpose() * vx;
                let qxx = lxx + a.transpose() * vxx * a;
                let quu = luu + b.transpose() * vxx * b + MatUU::identity() * mu;
                let qux = b.transpose() * vxx * a;
                let chol = quu.cholesky()?;
                let kff = -chol.solve(&qu);
                let gain = -chol.solve(&qux);
                vx = qx + gain.transpose() * quu * kff
                    + gain.transpose() * qu
                    + qux.transpose() * kff;
                vxx = qxx
                    + gain.transpose() * quu * gain
                    + gain.transpose() * qux
                    + qux.transpose() * gain;
                vxx = (vxx + vxx.transpose()) * 0.5;
                kffs[k] = kff;
                gains[k] = gain;
            }
            Some((kffs, gains))
        };

        let (kffs, gains) = match backward(mu) {
            Some(r) => r,
            None => {
                mu *= 10.0;
                if mu > 1e8 {
                    break;
                }
                continue;
            }
        };

        // Forward pass with backtracking line search.
        let mut accepted = false;
        for alpha in [1.0, 0.5, 0.25] {
            let mut new_us = vec![VecU::zeros(); n];
            let mut x = x0;
            for k in 0..n {
                let du = alpha * kffs[k] + gains[k] * (x - xs[k]);
                let u = clamp_u(&(us[k] + du));
                new_us[k] = u;
                x = f_disc(&x, &u, dt, g);
            }
            let (new_xs, new_cost) = rollout(&new_us);
            if new_cost.is_finite() && new_cost < cost {
                let rel = (cost - new_cost) / cost.max(1.0);
                us = new_us;
                xs = new_xs;
                cost = new_cost;
                accepted = true;
                mu = (mu * 0.5).max(1e-9);
                if rel < cfg.tol {
                    converged = true;
                }
                break;
            }
        }
        if !accepted {
            mu *= 10.0;
            if mu > 1e8 {
                // No descent direction left; current iterate is the answer.
                converged = true;
            }
        }
        if converged {
            break;
        }
    }

    warm.us = us.clone();
    let commands = us
        .iter()
        .map(|u| {
            let cu = clamp_u(u);
            clamp_command(Command::new(cu[0], cu[1], cu[2], cu[3]), params).0
        })
        .collect();
    Ok(MpcSolution {
        commands,
        cost,
        iterations,
        converged,
        fallback: false,
    })
}

/// Stateful expert controller: one warm-started solve per control tick.
pub struct MpcExpert {
    pub cfg: MpcConfig,
    pub params: QuadParams,
    pub reference: ReferenceTrajectory,
    warm: MpcWarmStart,
    pub last_iterations: usize,
    pub fallback_count: usize,
}

impl MpcExpert {
    pub fn new(cfg: MpcConfig, params: QuadParams, reference: ReferenceTrajectory) -> Self {
        Self {
            cfg,
            params,
            reference,
            warm: MpcWarmStart::default(),
            last_iterations: 0,
            fallback_count: 0,
        }
    }

    /// Expert label for an arbitrary state/time, advancing the warm start.
    pub fn label(&mut self, s: &QuadState, t: f64) -> Result<Command, MpcError> {
        let sol = solve_mpc(s, &self.reference, t, &self.cfg, &self.params, &mut self.warm)?;
        self.last_iterations = sol.iterations;
        if sol.fallback {
            self.fallback_count += 1;
        }
        Ok(sol.commands[0])
    }
}

impl crate::sim::Controller for MpcExpert {
    fn command(
        &mut self,
        ctx: &crate::sim::TickContext<'_>,
    ) -> Result<crate::sim::TickDecision, String> {
        let u = self.label(ctx.state, ctx.t).map_err(|e| e.to_string())?;
        Ok(crate::sim::TickDecision::expert_only(u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::generate_track;

    #[test]
    fn reference_passes_near_gate_centers() {
        let track = generate_track("oval").unwrap();
        let r = generate_reference(&track, 3.0).unwrap();
        for gate in &track.gates {
            let c = gate.center_v();
            let min_d = r
                .samples
                .iter()
                .map(|s| (s.p - c).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(min_d < 0.2, "gate {}: min distance {min_d}", gate.index);
        }
    }

    #[test]
    fn doubling_speed_halves_duration() {
        let track = generate_track("figure8").unwrap();
        let slow = generate_reference(&track, 2.5).unwrap();
        let fast = generate_reference(&track, 5.0).unwrap();
        let ratio = slow.duration() / fast.duration();
        assert!((ratio - 2.0).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn figure8_duration_matches_arc_length() {
        let track = generate_track("figure8").unwrap();
        let speed = 5.0;
        let r = generate_reference(&track, speed).unwrap();
        let mut len = 0.0;
        for i in 1..r.samples.len() {
            len += (r.samples[i].p - r.samples[i - 1].p).norm();
        }
        let expect = len / speed;
        assert!(
            (r.duration() - expect).abs() / expect < 0.01,
            "duration {} vs arc-length/speed {expect}",
            r.duration()
        );
        // Same order of magnitude as a human lap (~11.8 s).
        assert!(r.duration() > 5.0 && r.duration() < 30.0);
    }

    #[test]
    fn reference_samples_are_uniform_and_continuous() {
        let track = generate_track("figure8").unwrap();
        let r = generate_reference(&track, 5.0).unwrap();
        for i in 1..r.samples.len() {
            let dt = r.samples[i].t - r.samples[i - 1].t;
            assert!((dt - REF_DT).abs() < 1e-9);
            let gap = (r.samples[i].p - r.samples[i - 1].p).norm();
            assert!(gap < 0.5, "gap {gap} at {i}");
        }
    }

    #[test]
    fn bad_speed_rejected() {
        let track = generate_track("oval").unwrap();
        assert!(generate_reference(&track, 0.2).is_err());
        assert!(generate_reference(&track, 22.0).is_err());
    }

    #[test]
    fn reference_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ref.csv");
        let track = generate_track("oval").unwrap();
        let r = generate_reference(&track, 3.0).unwrap();
        r.save_csv(&p).unwrap();
        let back = ReferenceTrajectory::load_csv(&p).unwrap();
        assert_eq!(back.samples.len(), r.samples.len());
        let a = back.samples[10];
        let b = r.samples[10];
        assert!((a.p - b.p).norm() < 1e-9);
        assert!((a.v - b.v).norm() < 1e-9);
    }

    fn hover_reference(p: Vector3<f64>, duration: f64) -> ReferenceTrajectory {
        let n = (duration / REF_DT).ceil() as usize + 1;
        let samples = (0..n)
            .map(|i| RefSample {
                t: i as f64 * REF_DT,
                p,
                q: UnitQuaternion::identity(),
                v: Vector3::zeros(),
                w: Vector3::zeros(),
            })
            .collect();
        ReferenceTrajectory { samples }
    }

    #[test]
    fn hover_reference_yields_hover_command() {
        let params = QuadParams::default();
        let reference = hover_reference(Vector3::new(0.0, 0.0, 2.0), 2.0);
        let s = QuadState::hover_at(Vector3::new(0.0, 0.0, 2.0));
        let mut warm = MpcWarmStart::default();
        let sol = solve_mpc(&s, &reference, 0.0, &MpcConfig::default(), &params, &mut warm)
            .unwrap();
        let u = sol.commands[0];
        assert!((u.c - params.g).abs() < 1e-3, "thrust {}", u.c);
        assert!(u.rates.norm() < 1e-3, "rates {:?}", u.rates);
    }

    #[test]
    fn hover_optimum_has_zero_command_gradient() {
        // Finite-difference the closed-loop cost around the returned first
        // command; at the optimum it should vanish.
        let params = QuadParams::default();
        let reference = hover_reference(Vector3::new(0.0, 0.0, 2.0), 2.0);
        let s = QuadState::hover_at(Vector3::new(0.0, 0.0, 2.0));
        let cfg = MpcConfig::default();
        let mut warm = MpcWarmStart::default();
        let sol = solve_mpc(&s, &reference, 0.0, &cfg, &params, &mut warm).unwrap();

        // Rebuild the rollout cost with the first command perturbed.
        let dt = cfg.horizon / cfg.nodes as f64;
        let u_hover = VecU::from_column_slice(&[params.g, 0.0, 0.0, 0.0]);
        let refs: Vec<StageRef> = (0..=cfg.nodes)
            .map(|k| {
                let rs = reference.sample(k as f64 * dt);
                StageRef {
                    p: rs.p,
                    v: rs.v,
                    m_att: attitude_error_matrix(&rs.q),
                }
            })
            .collect();
        let us: Vec<VecU> = sol
            .commands
            .iter()
            .map(|c| VecU::from_column_slice(&c.as_array()))
            .collect();
        let cost_of = |u0: &VecU| -> f64 {
            let mut x = pack(&s);
            let mut cost = 0.0;
            for k in 0..cfg.nodes {
                let u = if k == 0 { *u0 } else { us[k] };
                cost += stage_cost(&x, Some(&u), &refs[k], &cfg, &u_hover);
                x = f_disc(&x, &u, dt, params.g);
            }
            cost + stage_cost(&x, None, &refs[cfg.nodes], &cfg, &u_hover)
        };
        for i in 0..NU {
            let h = 1e-5;
            let mut up = us[0];
            let mut um = us[0];
            up[i] += h;
            um[i] -= h;
            let grad = (cost_of(&up) - cost_of(&um)) / (2.0 * h);
            assert!(grad.abs() < 1e-3, "gradient[{i}] = {grad}");
        }
    }

    #[test]
    fn lateral_displacement_steers_back() {
        // Straight-line reference along +x; the drone starts displaced +0.5 m
        // in +y. Thrust must tilt toward -y, i.e. positive roll rate.
        let speed = 3.0;
        let n = 200;
        let samples: Vec<RefSample> = (0..n)
            .map(|i| {
                let t = i as f64 * REF_DT;
                RefSample {
                    t,
                    p: Vector3::new(speed * t, 0.0, 2.0),
                    q: UnitQuaternion::identity(),
                    v: Vector3::new(speed, 0.0, 0.0),
                    w: Vector3::zeros(),
                }
            })
            .collect();
        let reference = ReferenceTrajectory { samples };
        let params = QuadParams::default();
        let mut s = reference.start_state();
        s.p.y += 0.5;
        let mut warm = MpcWarmStart::default();
        let sol = solve_mpc(&s, &reference, 0.0, &MpcConfig::default(), &params, &mut warm)
            .unwrap();
        assert!(
            sol.commands[0].rates.x > 0.01,
            "roll rate {:?}",
            sol.commands[0].rates
        );
    }

    #[test]
    fn jittered_reference_set_is_reproducible() {
        let track = generate_track("oval").unwrap();
        let a = generate_reference_set(&track, 3, (4.0, 6.0), 0.3, 11, "train").unwrap();
        let b = generate_reference_set(&track, 3, (4.0, 6.0), 0.3, 11, "train").unwrap();
        for (x, y) in a.trajectories.iter().zip(b.trajectories.iter()) {
            assert_eq!(x.to_csv(), y.to_csv());
        }
        let c = generate_reference_set(&track, 3, (4.0, 6.0), 0.3, 11, "test").unwrap();
        assert_ne!(a.trajectories[0].to_csv(), c.trajectories[0].to_csv());
    }
}
