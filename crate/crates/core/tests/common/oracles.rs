//! Independent reference computations shared by the module tests and the
//! acceptance suite.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ursula_core::comms::protocol::{encode, Body, Command, CommandKind, Message};
use ursula_core::contact::{in_plane_basis, PatchExtent, PlanePatch, ProxyEnvironment};
use ursula_core::dynamics::*;
use ursula_core::guidance::*;
use ursula_core::limbs::{LimbConfig, LimbGeometry, Segment};
use ursula_core::modes::*;
use ursula_core::propulsion::*;

use super::DT;

pub fn mission_toml() -> String {
    std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/mission.toml")).unwrap()
}

// ---- dynamics

fn state_vec(s: &VehicleState) -> [f64; 8] {
    [s.x, s.y, s.psi, s.u, s.v, s.r, s.z, s.w]
}

pub fn integrate(start: &VehicleState, tau: &Wrench, params: &VehicleParams, dt: f64, steps: usize) -> VehicleState {
    let mut s = *start;
    for _ in 0..steps {
        s = step_dynamics(&s, tau, params, dt).unwrap();
    }
    s
}

fn max_err(a: &VehicleState, b: &VehicleState) -> f64 {
    state_vec(a).iter().zip(state_vec(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Endpoint error ratio between dt and dt/2 against a fine-step reference.
pub fn rk4_order_ratio() -> f64 {
    let p = VehicleParams { current: [0.1, -0.05], ..Default::default() };
    let start = VehicleState { u: 0.8, v: 0.3, r: 0.4, w: 0.2, ..VehicleState::at(0.0, 0.0, 5.0, 0.2) };
    // velocities stay one-signed, so |v|v is smooth along the whole path
    let tau = Wrench { x: 25.0, y: 20.0, n: 8.0, z: 10.0 };
    // 2 s horizon
    let (coarse, n) = (0.05, 40);
    let reference = integrate(&start, &tau, &p, coarse / 256.0, n * 256);
    let e1 = max_err(&integrate(&start, &tau, &p, coarse, n), &reference);
    let e2 = max_err(&integrate(&start, &tau, &p, coarse / 2.0, 2 * n), &reference);
    e1 / e2
}

fn random_state(rng: &mut ChaCha8Rng) -> VehicleState {
    VehicleState {
        u: rng.random_range(-2.0..2.0),
        v: rng.random_range(-1.0..1.0),
        r: rng.random_range(-1.5..1.5),
        w: rng.random_range(-1.0..1.0),
        ..VehicleState::at(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 10.0, rng.random_range(-3.0..3.0))
    }
}

/// Largest energy increase seen over random unforced steps.
pub fn worst_energy_gain(steps: usize, seed: u64) -> f64 {
    let p = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..steps {
        let s = random_state(&mut rng);
        let dt = rng.random_range(1e-4..MAX_DT);
        let next = step_dynamics(&s, &Wrench::ZERO, &p, dt).unwrap();
        worst = worst.max(next.kinetic_energy(&p) - s.kinetic_energy(&p));
    }
    worst
}

/// Count of random steps where a planar wrench moved heave, or a heave
/// force moved any planar state. Zero when the channels are decoupled.
pub fn decoupling_violations(steps: usize, seed: u64) -> usize {
    let p = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..steps {
        let s = random_state(&mut rng);
        let dt = rng.random_range(1e-3..MAX_DT);
        let planar = Wrench::planar(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-10.0..10.0));
        let still = VehicleState { w: 0.0, ..s };
        let a = step_dynamics(&still, &planar, &p, dt).unwrap();
        if a.w != 0.0 || a.z != still.z {
            bad += 1;
        }
        let b = step_dynamics(&s, &Wrench { z: rng.random_range(-50.0..50.0), ..planar }, &p, dt).unwrap();
        let c = step_dynamics(&s, &planar, &p, dt).unwrap();
        if state_vec(&b)[..6] != state_vec(&c)[..6] {
            bad += 1;
        }
    }
    bad
}

// ---- propulsion

/// Total jet impulse from a full mantle: library steps vs. a 1 µs Euler
/// integration of the discharge law.
pub fn jet_impulse_error() -> f64 {
    let p = JetParams::default();
    let full = JetState { stored_volume: p.capacity, ..Default::default() };
    let (dt, horizon) = (0.01, 3.0);
    let mut jet = full;
    let mut impulse = 0.0;
    for _ in 0..(horizon / dt) as usize {
        let step = jet_step(&jet, 0.0, true, 0.0, &p, dt);
        impulse += step.wrench.x * dt;
        jet = step.state;
    }
    let h = 1e-6;
    let (mut v, mut oracle) = (p.capacity, 0.0);
    for _ in 0..(horizon / h) as usize {
        let q = p.discharge_coeff * (p.elastic_constant * v.max(0.0)).sqrt();
        oracle += p.thrust_factor * q * q * h;
        v -= q * h;
    }
    (impulse - oracle).abs() / oracle
}

fn forces(commands: &[FinState], params: &FinParams) -> DVector<f64> {
    let mut f = DVector::zeros(2 * commands.len());
    for (i, c) in commands.iter().enumerate() {
        let (fx, fy) = fin_force(c, params).unwrap();
        f[2 * i] = fx;
        f[2 * i + 1] = fy;
    }
    f
}

fn weighted_b(params: &FinParams, yaw_weight: f64) -> DMatrix<f64> {
    let n = params.mounts.len();
    let mut b = DMatrix::zeros(3, 2 * n);
    for (i, m) in params.mounts.iter().enumerate() {
        b[(0, 2 * i)] = 1.0;
        b[(1, 2 * i + 1)] = 1.0;
        b[(2, 2 * i)] = -m.y * yaw_weight;
        b[(2, 2 * i + 1)] = m.x * yaw_weight;
    }
    b
}

/// Distance moved by one projected-gradient step from the allocator's
/// answer; zero exactly at a constrained least-squares optimum.
pub fn allocation_fixed_point_residual(tau: &Wrench, params: &FinParams) -> f64 {
    let alloc = allocate(tau, &params.idle_fins(), params).unwrap();
    let f = forces(&alloc.commands, params);
    let w = if alloc.saturated { 4.0 } else { 1.0 };
    let b = weighted_b(params, w);
    let t = DVector::from_column_slice(&[tau.x, tau.y, w * tau.n]);
    let btb = b.transpose() * &b;
    let step = 1.0 / btb.symmetric_eigenvalues().max();
    let mut g = &f - (&btb * &f - b.transpose() * t) * step;
    let limit = params.max_thrust(FinMode::StandingWave);
    for i in 0..params.mounts.len() {
        let (fx, fy) = (g[2 * i], g[2 * i + 1]);
        let (px, py) = if fx < 0.0 {
            (0.0, fy.clamp(-limit, limit))
        } else if fx.hypot(fy) > limit {
            (fx * limit / fx.hypot(fy), fy * limit / fx.hypot(fy))
        } else {
            (fx, fy)
        };
        g[2 * i] = px;
        g[2 * i + 1] = py;
    }
    (g - f).norm()
}

pub fn saturating_requests() -> [Wrench; 5] {
    [
        Wrench::planar(500.0, 0.0, 0.0),
        Wrench::planar(-30.0, 10.0, 5.0),
        Wrench::planar(60.0, 60.0, -40.0),
        Wrench::planar(0.0, 0.0, 80.0),
        Wrench::planar(-100.0, -100.0, 0.0),
    ]
}

// ---- limbs

pub fn random_config(rng: &mut ChaCha8Rng, geom: &LimbGeometry, kappa_frac: f64) -> LimbConfig {
    let k = geom.kappa_limit() * kappa_frac;
    LimbConfig {
        segments: (0..geom.n_segments)
            .map(|_| Segment {
                kappa: rng.random_range(0.0..k),
                phi: rng.random_range(-PI..PI),
            })
            .collect(),
    }
}

// ---- guidance

pub fn random_spd(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let l = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    l * l.transpose() + Matrix3::identity() * 0.2
}

/// Minimise `Q^T M^-1 Q` subject to `A M^-1 Q = r` through the KKT system.
pub fn kkt_oracle(m: &Matrix3<f64>, a: &Vector3<f64>, r: f64) -> Vector3<f64> {
    let mi = m.try_inverse().unwrap();
    let row = mi.transpose() * a; // (A M^-1)^T
    let mut k = Matrix4::zeros();
    k.fixed_view_mut::<3, 3>(0, 0).copy_from(&(mi * 2.0));
    k.fixed_view_mut::<3, 1>(0, 3).copy_from(&row);
    k.fixed_view_mut::<1, 3>(3, 0).copy_from(&row.transpose());
    let sol = k.lu().solve(&Vector4::new(0.0, 0.0, 0.0, r)).unwrap();
    Vector3::new(sol[0], sol[1], sol[2])
}

/// Worst constraint residual and worst distance to the KKT oracle over
/// `n` random SPD instances.
pub fn uk_errors(n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut residual, mut gap) = (0.0_f64, 0.0_f64);
    for _ in 0..n {
        let m = random_spd(&mut rng);
        let tau = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let a_row = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let b = rng.random_range(-2.0..2.0);
        let a = DMatrix::from_row_slice(1, 3, a_row.as_slice());
        let q = uk_force(&m, &tau, &a, &DVector::from_element(1, b)).unwrap();
        let mi = m.try_inverse().unwrap();
        residual = residual.max((a_row.dot(&(mi * (tau + q))) - b).abs());
        let oracle = kkt_oracle(&m, &a_row, b - a_row.dot(&(mi * tau)));
        gap = gap.max((q - oracle).norm());
    }
    (residual, gap)
}

pub fn circle() -> TrajectoryRef {
    TrajectoryRef::Circle { center: [0.0, 0.0], radius: 5.0, rate: 0.1, phase: 0.0, duration: 120.0 }
}

/// Largest position error after a 30 s transient while tracking a 5 m circle
/// with the Udwadia–Kalaba controller.
pub fn circle_tracking_error() -> f64 {
    let params = VehicleParams::default();
    let m = params.mass_matrix();
    let reference = circle();
    let mut s = VehicleState::at(5.5, -0.3, 0.0, 1.4);
    let mut worst: f64 = 0.0;
    for k in 0..12_000 {
        let t = k as f64 * DT;
        let (a, b) = trajectory_constraints(&s, &reference, t, 1.0, 2.0).unwrap();
        let (ab, bb) = body_constraints(&s, &a, &b);
        let tau_free = params.free_force(&s.nu());
        let q = uk_force(&m, &tau_free, &ab, &bb).unwrap();
        s = step_dynamics(&s, &Wrench::from_planar_vector(&q), &params, DT).unwrap();
        if t > 30.0 {
            let r = reference.sample((t + DT).min(120.0)).unwrap();
            worst = worst.max((r.pos[0] - s.x).hypot(r.pos[1] - s.y));
        }
    }
    worst
}

pub struct LosRun {
    pub errors: Vec<f64>,
    pub reached: Vec<bool>,
}

/// LOS, autopilot, fin allocation and dynamics in closed loop.
pub fn run_los(plan: &WaypointPlan, los_params: &LosParams, current: [f64; 2], seconds: f64) -> LosRun {
    let params = VehicleParams { current, ..Default::default() };
    let fins = FinParams::default();
    let mut fin_states = fins.idle_fins();
    let gains = AutopilotGains::default();
    let mut s = VehicleState::at(0.0, 0.0, 0.0, 0.0);
    let mut los = LosState::starting_at(0.0, 0.0);
    let mut ap = AutopilotState::default();
    let mut run = LosRun { errors: Vec::new(), reached: vec![false; plan.waypoints.len()] };
    for _ in 0..(seconds / DT) as usize {
        let (out, next) = los_step(&s, plan, los_params, &los, DT);
        los = next;
        for (i, wp) in plan.waypoints.iter().enumerate() {
            if (wp.x - s.x).hypot(wp.y - s.y) < plan.acceptance_radius {
                run.reached[i] = true;
            }
        }
        if out.finished {
            break;
        }
        let (tau, next_ap) = autopilot(out.heading, out.speed, &s, &gains, &ap, DT);
        ap = next_ap;
        let alloc = allocate(&tau, &fin_states, &fins).unwrap();
        fin_states = alloc.commands;
        s = step_dynamics(&s, &alloc.achieved, &params, DT).unwrap();
        run.errors.push(out.cross_track_error);
    }
    run
}

/// A random five-leg plan starting near the origin.
pub fn random_plan(rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    let (mut x, mut y) = (0.0, 0.0);
    for _ in 0..5 {
        let heading: f64 = rng.random_range(-3.0..3.0);
        let dist: f64 = rng.random_range(6.0..15.0);
        x += dist * heading.cos();
        y += dist * heading.sin();
        pts.push((x, y));
    }
    pts
}

/// Mean |cross-track error| over the last 50 s of a long straight leg
/// flown across a 0.2 m/s current.
pub fn steady_error(gamma: f64) -> f64 {
    let plan = WaypointPlan::new(&[(1000.0, 0.0)]);
    let los = LosParams { adaptation_gain: gamma, ..Default::default() };
    let run = run_los(&plan, &los, [0.0, 0.2], 200.0);
    let tail = &run.errors[run.errors.len() - 5000..];
    tail.iter().map(|e| e.abs()).sum::<f64>() / tail.len() as f64
}

// ---- teleop

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() < 1.0 {
            return v.normalize();
        }
    }
}

pub fn plane_samples(rng: &mut ChaCha8Rng, n: &Vector3<f64>, offset: f64, count: usize) -> Vec<Vector3<f64>> {
    let (u, v) = in_plane_basis(n);
    (0..count)
        .map(|_| n * offset + u * rng.random_range(-0.05..0.05) + v * rng.random_range(-0.05..0.05))
        .collect()
}

pub fn random_proxy(rng: &mut ChaCha8Rng) -> ProxyEnvironment {
    let k = 500.0;
    let patches = (0..rng.random_range(1..=3))
        .map(|_| {
            let n = random_unit(rng);
            let mut patch = PlanePatch::unbounded(n, rng.random_range(-0.1..0.1), k * rng.random_range(0.5..2.0));
            let (u, v) = patch.plane_coords(&Vector3::zeros());
            patch.extent = Some(PatchExtent { u_min: u - 0.2, u_max: u + 0.2, v_min: v - 0.2, v_max: v + 0.2 });
            patch
        })
        .collect();
    ProxyEnvironment { patches, stiffness: k, damping: 2.0 }
}

// ---- modes

pub const SOURCES: [TransitionSource; 3] = [TransitionSource::Operator, TransitionSource::Autonomy, TransitionSource::Fault];

/// Legality written out as an explicit decision table.
pub fn mode_oracle(cur: ModeState, req: ModeState, source: TransitionSource, wireless: bool) -> Result<(ModeState, bool), ReasonCode> {
    use LinkMode::*;
    use NavMode::*;
    use OpMode::*;
    if source == TransitionSource::Fault {
        return Ok((ModeState::new(cur.op, Autnav, cur.link), true));
    }
    match (req.op, req.nav, req.link, wireless) {
        (Exp, Mancon | Sautpos, _, _) => Err(ReasonCode::TeleopRequiresInt),
        (_, _, Nowire, false) => Err(ReasonCode::LinkUnavailable),
        (Exp, Autnav, _, _) | (Int, _, Tet, _) | (Int, _, Nowire, true) => Ok((req, false)),
    }
}

// ---- comms

pub fn wire(id: u64, kind: CommandKind) -> Vec<u8> {
    encode(&Message { seq: id, t: 0.0, body: Body::Command(Command { id, kind }) }).unwrap().into_bytes()
}

pub fn transition(id: u64) -> Vec<u8> {
    let requested = if id % 2 == 0 {
        ModeState::default()
    } else {
        ModeState::new(OpMode::Int, NavMode::Mancon, LinkMode::Tet)
    };
    wire(id, CommandKind::ModeTransition { requested })
}
