//! Closed-loop expert competence: the MPC tracker must fly the bundled
//! tracks collision-free with tight position error.

use racebench_core::mpc::{generate_reference, MpcConfig, MpcExpert};
use racebench_core::sim::{
    generate_track, run_rollout, LoopRates, QuadParams, RolloutStatus,
};

fn fly(track_name: &str, speed: f64) -> (racebench_core::sim::RolloutLog, f64, f64) {
    let track = generate_track(track_name).unwrap();
    let reference = generate_reference(&track, speed).unwrap();
    let params = QuadParams::default();
    let mut expert = MpcExpert::new(MpcConfig::default(), params, reference.clone());
    let start = reference.start_state();
    let limit = reference.duration() * 3.0;
    let log = run_rollout(
        &mut expert,
        &track,
        &start,
        &params,
        &LoopRates::default(),
        limit,
    )
    .unwrap();
    let mut max_err = 0.0f64;
    for tick in &log.ticks {
        let want = expert.reference.sample(tick.t).p;
        max_err = max_err.max((tick.state.p - want).norm());
    }
    let mean_iters = log.ticks.len() as f64; // placeholder, recomputed below
    (log, max_err, mean_iters)
}

#[test]
fn oval_lap_completes_with_small_error() {
    let (log, max_err, _) = fly("oval", 4.0);
    assert_eq!(log.termination, RolloutStatus::Completed, "{:?}", log.termination);
    assert_eq!(log.gates_passed, 6);
    assert!(max_err < 0.5, "max position error {max_err}");
}

#[test]
fn figure8_lap_completes_with_small_error() {
    let (log, max_err, _) = fly("figure8", 5.0);
    assert_eq!(log.termination, RolloutStatus::Completed, "{:?}", log.termination);
    assert_eq!(log.gates_passed, 10);
    assert!(max_err < 0.5, "max position error {max_err}");
}

#[test]
fn warm_started_solves_converge_quickly() {
    let track = generate_track("oval").unwrap();
    let reference = generate_reference(&track, 4.0).unwrap();
    let params = QuadParams::default();
    let cfg = MpcConfig::default();
    let mut expert = MpcExpert::new(cfg, params, reference.clone());

    // Walk along the reference itself, solving at every control tick.
    let mut iters = Vec::new();
    let mut t = 0.0;
    while t < reference.duration() - cfg.horizon {
        let rs = reference.sample(t);
        let s = racebench_core::sim::QuadState {
            t,
            p: rs.p,
            v: rs.v,
            q: rs.q,
            w: rs.w,
        };
        expert.label(&s, t).unwrap();
        iters.push(expert.last_iterations);
        t += 0.02;
    }
    // Skip the cold-start solves at the beginning.
    let warm = &iters[10..];
    let mean = warm.iter().sum::<usize>() as f64 / warm.len() as f64;
    assert!(mean <= 5.0, "mean warm-start iterations {mean}");
    assert_eq!(expert.fallback_count, 0);
}

#[test]
fn expert_rollout_is_deterministic() {
    let (a, _, _) = fly("oval", 4.0);
    let (b, _, _) = fly("oval", 4.0);
    assert_eq!(a.to_csv(), b.to_csv());
}
