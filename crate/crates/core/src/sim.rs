//! Quadrotor dynamics, race-track geometry, gate-pass/collision detection and
//! the closed-loop rollout driver.
//!
//! The vehicle model is a point mass with attitude: thrust acts along the
//! body z axis, body rates are tracked either instantaneously (default) or
//! through a first-order lag. Integration is RK4 with quaternion
//! renormalization after every step.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;

#[derive(thiserror::Error, Debug)]
pub enum SimError {
    #[error("non-finite quad state: {0}")]
    NonFiniteState(String),
    #[error("invalid step size dt={0}; must be in (0, 0.05]")]
    InvalidDt(f64),
    #[error("unknown track `{0}` (expected one of: figure8, oval)")]
    UnknownTrack(String),
    #[error("track has no gates")]
    EmptyTrack,
    #[error("controller failed at t={t:.3}: {msg}")]
    Controller { t: f64, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("track file error: {0}")]
    TrackFile(String),
}

/// Full kinematic state of the vehicle at a timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadState {
    /// Time, seconds.
    pub t: f64,
    /// Position, meters, world frame.
    pub p: Vector3<f64>,
    /// Velocity, m/s, world frame.
    pub v: Vector3<f64>,
    /// Orientation, unit quaternion, body-to-world.
    pub q: UnitQuaternion<f64>,
    /// Body rates, rad/s, body frame.
    pub w: Vector3<f64>,
}

impl QuadState {
    /// Hovering at `p` with identity attitude.
    pub fn hover_at(p: Vector3<f64>) -> Self {
        Self {
            t: 0.0,
            p,
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            w: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.p.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.q.coords.iter().all(|x| x.is_finite())
            && self.w.iter().all(|x| x.is_finite())
    }
}

/// Mass-normalized collective thrust plus body-rate setpoints — the output
/// of both the expert and the learned controllers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Command {
    /// Mass-normalized collective thrust, m/s².
    pub c: f64,
    /// Body-rate setpoints (wx, wy, wz), rad/s.
    pub rates: Vector3<f64>,
}

impl Command {
    pub fn new(c: f64, wx: f64, wy: f64, wz: f64) -> Self {
        Self {
            c,
            rates: Vector3::new(wx, wy, wz),
        }
    }

    /// Hover command for the given parameters: thrust cancels gravity,
    /// zero rates.
    pub fn hover(params: &QuadParams) -> Self {
        Self::new(params.g, 0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.c.is_finite() && self.rates.iter().all(|x| x.is_finite())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.c, self.rates.x, self.rates.y, self.rates.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Physical platform constants.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadParams {
    /// Vehicle mass, kg.
    pub mass: f64,
    /// Arm length, m (documentation only; the point-mass model ignores it).
    pub arm_length: f64,
    /// Maximum collective thrust, N.
    pub c_max: f64,
    /// Maximum body rate magnitude, rad/s.
    pub w_max: f64,
    /// Gravitational acceleration, m/s².
    pub g: f64,
    /// Body-rate tracking lag time constant, s. 0 = instantaneous.
    pub rate_lag_tau: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            arm_length: 0.17,
            c_max: 21.7,
            w_max: 6.0,
            g: 9.81,
            rate_lag_tau: 0.0,
        }
    }
}

impl QuadParams {
    /// Maximum mass-normalized thrust, m/s².
    pub fn c_max_norm(&self) -> f64 {
        self.c_max / self.mass
    }
}

/// Clamp a command to the platform limits.
///
/// NaN components are replaced by the hover value for that component; the
/// returned flag is true when any replacement happened.
pub fn clamp_command(u: Command, params: &QuadParams) -> (Command, bool) {
    let mut flagged = false;
    let c = if u.c.is_nan() {
        flagged = true;
        params.g
    } else {
        u.c.clamp(0.0, params.c_max_norm())
    };
    let mut rates = Vector3::zeros();
    for i in 0..3 {
        rates[i] = if u.rates[i].is_nan() {
            flagged = true;
            0.0
        } else {
            u.rates[i].clamp(-params.w_max, params.w_max)
        };
    }
    (Command { c, rates }, flagged)
}

// Raw derivative state for RK4; quaternion kept unnormalized during the step.
#[derive(Clone, Copy)]
struct DState {
    p: Vector3<f64>,
    v: Vector3<f64>,
    q: Quaternion<f64>,
    w: Vector3<f64>,
}

impl DState {
    fn scaled_add(&self, other: &DState, k: f64) -> DState {
        DState {
            p: self.p + other.p * k,
            v: self.v + other.v * k,
            q: self.q + other.q * k,
            w: self.w + other.w * k,
        }
    }
}

fn deriv(s: &DState, u: &Command, params: &QuadParams) -> DState {
    // World-frame thrust: rotate body z by the (possibly unnormalized)
    // quaternion; normalize on the fly so intermediate RK4 stages stay sane.
    let qn = UnitQuaternion::from_quaternion(s.q);
    let thrust_world = qn * Vector3::new(0.0, 0.0, u.c);
    let dv = thrust_world - Vector3::new(0.0, 0.0, params.g);
    let wq = Quaternion::new(0.0, s.w.x, s.w.y, s.w.z);
    let dq = s.q * wq * 0.5;
    let dw = if params.rate_lag_tau > 0.0 {
        (u.rates - s.w) / params.rate_lag_tau
    } else {
        Vector3::zeros()
    };
    DState {
        p: s.v,
        v: dv,
        q: dq,
        w: dw,
    }
}

/// Advance the state by `dt` under command `u` (already clamped).
///
/// RK4 integration, quaternion renormalized afterwards; bit-identical for
/// identical inputs.
pub fn step_dynamics(
    s: &QuadState,
    u: &Command,
    params: &QuadParams,
    dt: f64,
) -> Result<QuadState, SimError> {
    if !s.is_finite() {
        return Err(SimError::NonFiniteState(format!("{s:?}")));
    }
    if !u.is_finite() {
        return Err(SimError::NonFiniteState(format!("command {u:?}")));
    }
    if !(dt > 0.0 && dt <= 0.05) {
        return Err(SimError::InvalidDt(dt));
    }

    let w0 = if params.rate_lag_tau > 0.0 {
        s.w
    } else {
        u.rates
    };
    let x0 = DState {
        p: s.p,
        v: s.v,
        q: *s.q.quaternion(),
        w: w0,
    };

    let k1 = deriv(&x0, u, params);
    let k2 = deriv(&x0.scaled_add(&k1, dt * 0.5), u, params);
    let k3 = deriv(&x0.scaled_add(&k2, dt * 0.5), u, params);
    let k4 = deriv(&x0.scaled_add(&k3, dt), u, params);

    let mut q = x0.q;
    q += (k1.q + k2.q * 2.0 + k3.q * 2.0 + k4.q) * (dt / 6.0);
    let next = QuadState {
        t: s.t + dt,
        p: s.p + (k1.p + k2.p * 2.0 + k3.p * 2.0 + k4.p) * (dt / 6.0),
        v: s.v + (k1.v + k2.v * 2.0 + k3.v * 2.0 + k4.v) * (dt / 6.0),
        q: UnitQuaternion::from_quaternion(q),
        w: w0 + (k1.w + k2.w * 2.0 + k3.w * 2.0 + k4.w) * (dt / 6.0),
    };
    if !next.is_finite() {
        return Err(SimError::NonFiniteState(format!(
            "integration produced non-finite state from {s:?} with {u:?}"
        )));
    }
    Ok(next)
}

/// Rectangular gate: a planar frame around an inner aperture.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gate {
    /// Aperture center, m.
    pub center: [f64; 3],
    /// Unit normal; gates are passed flying along +normal.
    pub normal: [f64; 3],
    /// Unit up vector, perpendicular to the normal.
    pub up: [f64; 3],
    /// Inner aperture width, m.
    pub inner_w: f64,
    /// Inner aperture height, m.
    pub inner_h: f64,
    /// Frame band width around the aperture, m.
    pub frame_thickness: f64,
    /// Ordinal in the lap.
    pub index: usize,
}

impl Gate {
    pub fn center_v(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }
    pub fn normal_v(&self) -> Vector3<f64> {
        Vector3::from(self.normal)
    }
    pub fn up_v(&self) -> Vector3<f64> {
        Vector3::from(self.up)
    }
    /// In-plane horizontal axis: normal × up.
    pub fn right_v(&self) -> Vector3<f64> {
        self.normal_v().cross(&self.up_v())
    }
}

/// Axis-aligned collider bounds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Bounds {
    fn default() -> Self {
        // 30 x 15 x 8 m centered on the track, floor at z = 0.
        Self {
            min: [-15.0, -7.5, 0.0],
            max: [15.0, 7.5, 8.0],
        }
    }
}

impl Bounds {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Start pose stored in track files; expanded to a full [`QuadState`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPose {
    pub p: [f64; 3],
    /// Yaw about world z, radians; level attitude otherwise.
    pub yaw: f64,
}

impl StartPose {
    pub fn to_state(&self) -> QuadState {
        QuadState {
            t: 0.0,
            p: Vector3::from(self.p),
            v: Vector3::zeros(),
            q: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw),
            w: Vector3::zeros(),
        }
    }
}

/// Ordered gates plus collider bounds.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Track {
    pub name: String,
    pub gates: Vec<Gate>,
    pub start_pose: StartPose,
    pub bounds: Bounds,
}

impl Track {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("track serialization")
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let t: Track = serde_json::from_str(s).map_err(|e| SimError::TrackFile(e.to_string()))?;
        if t.gates.is_empty() {
            return Err(SimError::EmptyTrack);
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json().as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s)
    }
}

/// Result of testing one integration step against one gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateInteraction {
    Pass,
    FrameHit,
    None,
}

/// Test whether the segment `p_prev -> p_next` crosses the gate.
///
/// A pass requires crossing the gate plane along +normal with the
/// intersection inside the inner aperture; intersections in the frame band
/// (aperture grown by `frame_thickness`) count as frame hits.
pub fn check_gate_pass(
    s_prev: &QuadState,
    s_next: &QuadState,
    gate: &Gate,
) -> GateInteraction {
    let n = gate.normal_v();
    let d = s_next.p - s_prev.p;
    let denom = d.dot(&n);
    if denom <= 0.0 {
        // Parallel to the plane or crossing against the normal direction.
        return GateInteraction::None;
    }
    let t = (gate.center_v() - s_prev.p).dot(&n) / denom;
    if !(0.0..=1.0).contains(&t) {
        return GateInteraction::None;
    }
    let hit = s_prev.p + d * t - gate.center_v();
    let u = hit.dot(&gate.right_v());
    let v = hit.dot(&gate.up_v());
    let hw = gate.inner_w * 0.5;
    let hh = gate.inner_h * 0.5;
    if u.abs() <= hw && v.abs() <= hh {
        GateInteraction::Pass
    } else if u.abs() <= hw + gate.frame_thickness && v.abs() <= hh + gate.frame_thickness {
        GateInteraction::FrameHit
    } else {
        GateInteraction::None
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashCause {
    Ground,
    OutOfBounds,
    GateCrash,
    Timeout,
    ControllerError,
}

impl fmt::Display for CrashCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CrashCause::Ground => "ground",
            CrashCause::OutOfBounds => "out_of_bounds",
            CrashCause::GateCrash => "gate_crash",
            CrashCause::Timeout => "timeout",
            CrashCause::ControllerError => "controller_error",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RolloutStatus {
    Running,
    Completed,
    Crashed(CrashCause),
}

/// Out-of-band checks after a physics step: floor, collider bounds, gate
/// frame contact and lap completion.
pub fn check_termination(
    s: &QuadState,
    track: &Track,
    next_gate: usize,
    frame_hit: bool,
) -> RolloutStatus {
    if frame_hit {
        return RolloutStatus::Crashed(CrashCause::GateCrash);
    }
    if s.p.z <= 0.0 {
        return RolloutStatus::Crashed(CrashCause::Ground);
    }
    if !track.bounds.contains(&s.p) {
        return RolloutStatus::Crashed(CrashCause::OutOfBounds);
    }
    if next_gate >= track.gates.len() {
        return RolloutStatus::Completed;
    }
    RolloutStatus::Running
}

/// Loop rates for the closed-loop driver. Physics must be a multiple of the
/// control rate, control a multiple of the vision rate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopRates {
    pub physics_hz: u32,
    pub control_hz: u32,
    pub vision_hz: u32,
}

impl Default for LoopRates {
    fn default() -> Self {
        Self {
            physics_hz: 100,
            control_hz: 50,
            vision_hz: 25,
        }
    }
}

impl LoopRates {
    pub fn physics_dt(&self) -> f64 {
        1.0 / f64::from(self.physics_hz)
    }
    pub fn control_dt(&self) -> f64 {
        1.0 / f64::from(self.control_hz)
    }
    pub fn steps_per_tick(&self) -> u32 {
        self.physics_hz / self.control_hz
    }
    pub fn ticks_per_frame(&self) -> u32 {
        self.control_hz / self.vision_hz
    }
    pub fn validate(&self) -> Result<(), String> {
        if self.physics_hz == 0 || self.control_hz == 0 || self.vision_hz == 0 {
            return Err("loop rates must be positive".into());
        }
        if self.physics_hz % self.control_hz != 0 {
            return Err("physics_hz must be a multiple of control_hz".into());
        }
        if self.control_hz % self.vision_hz != 0 {
            return Err("control_hz must be a multiple of vision_hz".into());
        }
        Ok(())
    }
}

/// Who produced the command that was applied at a tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommandSource {
    Expert,
    Policy,
    Noise,
}

impl fmt::Display for CommandSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommandSource::Expert => "expert",
            CommandSource::Policy => "policy",
            CommandSource::Noise => "noise",
        })
    }
}

/// Gate event observed during one control tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateEvent {
    Pass(usize),
    Hit(usize),
}

/// Everything a controller may look at when deciding a command.
pub struct TickContext<'a> {
    /// Simulation time at the start of the tick.
    pub t: f64,
    /// Control tick index.
    pub tick: u64,
    /// State at the start of the tick.
    pub state: &'a QuadState,
    /// Physics-rate state history, oldest first, current state last.
    pub recent_states: &'a [QuadState],
    /// Index of the next gate to pass.
    pub next_gate: usize,
    /// True when a new vision frame is due this tick.
    pub vision_due: bool,
    /// Id of the most recent vision frame (increments at the vision rate).
    pub frame_id: u64,
}

/// A controller's decision for one tick. `expert` carries the label used
/// for imitation learning when one was computed.
pub struct TickDecision {
    pub applied: Command,
    pub expert: Option<Command>,
    pub source: CommandSource,
}

impl TickDecision {
    pub fn expert_only(u: Command) -> Self {
        Self {
            applied: u,
            expert: Some(u),
            source: CommandSource::Expert,
        }
    }
    pub fn policy_only(u: Command) -> Self {
        Self {
            applied: u,
            expert: None,
            source: CommandSource::Policy,
        }
    }
}

/// Closed-loop controller driven at the control rate.
pub trait Controller {
    fn command(&mut self, ctx: &TickContext<'_>) -> Result<TickDecision, String>;
}

impl<F> Controller for F
where
    F: FnMut(&TickContext<'_>) -> Result<TickDecision, String>,
{
    fn command(&mut self, ctx: &TickContext<'_>) -> Result<TickDecision, String> {
        self(ctx)
    }
}

/// One control tick of a rollout log.
#[derive(Clone, Debug)]
pub struct TickRecord {
    pub t: f64,
    pub state: QuadState,
    pub applied: Command,
    pub expert: Option<Command>,
    pub source: CommandSource,
    pub frame_id: u64,
    pub gate_event: Option<GateEvent>,
}

/// Time-aligned record of one closed-loop rollout.
#[derive(Clone, Debug)]
pub struct RolloutLog {
    pub ticks: Vec<TickRecord>,
    pub termination: RolloutStatus,
    pub gates_passed: usize,
    pub total_gates: usize,
    pub duration: f64,
}

impl RolloutLog {
    pub fn success(&self) -> bool {
        self.termination == RolloutStatus::Completed
    }

    pub fn termination_str(&self) -> String {
        match &self.termination {
            RolloutStatus::Completed => "completed".into(),
            RolloutStatus::Crashed(c) => c.to_string(),
            RolloutStatus::Running => "running".into(),
        }
    }

    /// CSV export, one row per control tick.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,c_cmd,wx_cmd,wy_cmd,wz_cmd,c_exp,wx_exp,wy_exp,wz_exp,source,gate_event\n",
        );
        for r in &self.ticks {
            let s = &r.state;
            let q = s.q.quaternion();
            let exp = match &r.expert {
                Some(e) => format!("{},{},{},{}", e.c, e.rates.x, e.rates.y, e.rates.z),
                None => ",,,".into(),
            };
            let ev = match r.gate_event {
                Some(GateEvent::Pass(i)) => format!("pass:{i}"),
                Some(GateEvent::Hit(i)) => format!("hit:{i}"),
                None => String::new(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.t,
                s.p.x,
                s.p.y,
                s.p.z,
                s.v.x,
                s.v.y,
                s.v.z,
                q.w,
                q.i,
                q.j,
                q.k,
                s.w.x,
                s.w.y,
                s.w.z,
                r.applied.c,
                r.applied.rates.x,
                r.applied.rates.y,
                r.applied.rates.z,
                exp,
                r.source,
                ev
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Drive a closed loop: physics at `rates.physics_hz`, the controller at
/// `rates.control_hz`, with a vision-due flag at `rates.vision_hz`
/// (zero-order hold in between).
///
/// Deterministic given the controller's own seeding. Terminates on lap
/// completion, any crash condition, `duration_limit` (logged as a timeout
/// crash) or controller failure.
pub fn run_rollout(
    controller: &mut dyn Controller,
    track: &Track,
    start: &QuadState,
    params: &QuadParams,
    rates: &LoopRates,
    duration_limit: f64,
) -> Result<RolloutLog, SimError> {
    rates.validate().map_err(SimError::TrackFile)?;
    if track.gates.is_empty() {
        return Err(SimError::EmptyTrack);
    }
    let dt = rates.physics_dt();
    let steps_per_tick = rates.steps_per_tick();
    let ticks_per_frame = u64::from(rates.ticks_per_frame());
    // Keep enough physics history for half-second observation windows.
    let history_cap = (rates.physics_hz as usize) + 1;

    let mut state = *start;
    let mut history: Vec<QuadState> = vec![state];
    let mut next_gate = 0usize;
    let mut log = RolloutLog {
        ticks: Vec::new(),
        termination: RolloutStatus::Running,
        gates_passed: 0,
        total_gates: track.gates.len(),
        duration: 0.0,
    };
    let mut tick: u64 = 0;
    let mut frame_id: u64 = 0;

    'outer: loop {
        let vision_due = tick % ticks_per_frame == 0;
        if vision_due && tick > 0 {
            frame_id += 1;
        }
        let tick_t = state.t;
        let tick_state = state;
        let decision = {
            let ctx = TickContext {
                t: tick_t,
                tick,
                state: &tick_state,
                recent_states: &history,
                next_gate,
                vision_due,
                frame_id,
            };
            match controller.command(&ctx) {
                Ok(d) => d,
                Err(msg) => {
                    log.termination = RolloutStatus::Crashed(CrashCause::ControllerError);
                    log.duration = state.t;
                    log::warn!("controller error at t={:.3}: {msg}", state.t);
                    return Ok(log);
                }
            }
        };
        let (applied, _) = clamp_command(decision.applied, params);

        let mut gate_event: Option<GateEvent> = None;
        let mut status = RolloutStatus::Running;
        for _ in 0..steps_per_tick {
            let prev = state;
            state = step_dynamics(&prev, &applied, params, dt)?;
            history.push(state);
            if history.len() > history_cap {
                let excess = history.len() - history_cap;
                history.drain(0..excess);
            }

            // Frame contact with any gate is a crash; passes only count
            // toward the next expected gate.
            let mut frame_hit = false;
            for g in &track.gates {
                match check_gate_pass(&prev, &state, g) {
                    GateInteraction::FrameHit => {
                        frame_hit = true;
                        gate_event = Some(GateEvent::Hit(g.index));
                    }
                    GateInteraction::Pass if g.index == next_gate => {
                        next_gate += 1;
                        log.gates_passed = next_gate;
                        gate_event = Some(GateEvent::Pass(g.index));
                    }
                    _ => {}
                }
            }
            status = check_termination(&state, track, next_gate, frame_hit);
            if status != RolloutStatus::Running {
                break;
            }
        }

        log.ticks.push(TickRecord {
            t: tick_t,
            state: tick_state,
            applied,
            expert: decision.expert,
            source: decision.source,
            frame_id,
            gate_event,
        });

        match status {
            RolloutStatus::Running => {}
            other => {
                log.termination = other;
                log.duration = state.t;
                break 'outer;
            }
        }
        if state.t >= duration_limit {
            log.termination = RolloutStatus::Crashed(CrashCause::Timeout);
            log.duration = state.t;
            break;
        }
        tick += 1;
    }
    Ok(log)
}

/// Construct a bundled track layout by name (`figure8` or `oval`).
pub fn generate_track(name: &str) -> Result<Track, SimError> {
    match name {
        "figure8" => Ok(figure8_track()),
        "oval" => Ok(oval_track()),
        other => Err(SimError::UnknownTrack(other.to_string())),
    }
}

fn make_gate(index: usize, center: Vector3<f64>, heading: Vector3<f64>) -> Gate {
    let n = heading.normalize();
    Gate {
        center: [center.x, center.y, center.z],
        normal: [n.x, n.y, n.z],
        up: [0.0, 0.0, 1.0],
        inner_w: 1.5,
        inner_h: 1.5,
        frame_thickness: 0.2,
        index,
    }
}

/// Figure-eight parametric footprint: x = a·sin(t), y = b·sin(t)·cos(t).
fn lemniscate(t: f64, a: f64, b: f64) -> (Vector3<f64>, Vector3<f64>) {
    let p = Vector3::new(a * t.sin(), b * t.sin() * t.cos(), 0.0);
    let d = Vector3::new(a * t.cos(), b * (2.0 * t).cos(), 0.0);
    (p, d)
}

/// 10 gates on a figure-eight footprint fitting inside the 30 x 15 m bounds.
///
/// Gate phases avoid the self-crossing at the center so no gate frame sits on
/// the crossing segment. Exact coordinates are this workbench's own layout.
fn figure8_track() -> Track {
    let a = 12.0;
    let b = 11.0; //|y| <= b/2 = 5.5 m
    let n = 10usize;
    let mut gates = Vec::with_capacity(n);
    for k in 0..n {
        let t = (k as f64 + 0.5) * std::f64::consts::TAU / n as f64;
        let (p, d) = lemniscate(t, a, b);
        // Height varies gently between 2 and 3 m.
        let z = 2.5 + 0.5 * (2.0 * t).sin();
        gates.push(make_gate(k, Vector3::new(p.x, p.y, z), d));
    }
    // Start slightly before the first gate, heading along the path.
    let t0 = 0.0;
    let (p0, d0) = lemniscate(t0, a, b);
    Track {
        name: "figure8".into(),
        gates,
        start_pose: StartPose {
            p: [p0.x, p0.y, 2.5],
            yaw: d0.y.atan2(d0.x),
        },
        bounds: Bounds::default(),
    }
}

/// 6 gates on an ellipse; the easy smoke-test track.
fn oval_track() -> Track {
    let rx = 9.0;
    let ry = 5.0;
    let n = 6usize;
    let mut gates = Vec::with_capacity(n);
    for k in 0..n {
        let t = (k as f64 + 0.5) * std::f64::consts::TAU / n as f64;
        let p = Vector3::new(rx * t.cos(), ry * t.sin(), 2.5);
        let d = Vector3::new(-rx * t.sin(), ry * t.cos(), 0.0);
        gates.push(make_gate(k, p, d));
    }
    Track {
        name: "oval".into(),
        gates,
        start_pose: StartPose {
            p: [rx, 0.0, 2.5],
            yaw: std::f64::consts::FRAC_PI_2,
        },
        bounds: Bounds::default(),
    }
}
