//! Metrics behind each acceptance criterion. Module tests assert on them;
//! the acceptance binary prints them.

use std::collections::{BTreeSet, VecDeque};
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ursula_core::comms::link::LinkKind;
use ursula_core::comms::protocol::*;
use ursula_core::comms::*;
use ursula_core::dynamics::VehicleState;
use ursula_core::limbs::*;
use ursula_core::modes::*;
use ursula_core::nav::*;
use ursula_core::teleop::*;

use super::oracles::*;

pub const TICK_US: u64 = 10_000;

// ---- limbs

/// Tip position errors for a straight limb and a single-segment semicircle.
pub fn fk_analytic_errors() -> (f64, f64) {
    let g = LimbGeometry::default();
    let straight = forward_kinematics(&LimbConfig::straight(g.n_segments), &g).unwrap();
    let e1 = (straight.position - Vector3::new(0.0, 0.0, g.length)).norm();
    let one = LimbGeometry { n_segments: 1, ..g };
    let half = forward_kinematics(&LimbConfig::uniform(1, PI / one.length, 0.0), &one).unwrap();
    let e2 = (half.position - Vector3::new(2.0 * one.length / PI, 0.0, 0.0)).norm();
    (e1, e2)
}

/// Random configurations whose opposing tendon pairs do not cancel exactly.
pub fn tendon_antisymmetry_failures(n: usize, seed: u64) -> usize {
    let geom = LimbGeometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .filter(|_| {
            let dl = tendon_lengths(&random_config(&mut rng, &geom, 1.0), &geom).unwrap();
            dl[0] + dl[2] != 0.0 || dl[1] + dl[3] != 0.0
        })
        .count()
}

/// Worst tip residual of IK solutions for reachable targets, and how many
/// solves reported non-convergence.
pub fn ik_round_trip(n: usize, seed: u64) -> (f64, usize) {
    let geom = LimbGeometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut unconverged) = (0.0_f64, 0);
    for _ in 0..n {
        let target = forward_kinematics(&random_config(&mut rng, &geom, 0.5), &geom).unwrap().position;
        let sol = inverse_kinematics(&target, &geom, &LimbConfig::straight(geom.n_segments)).unwrap();
        let tip = forward_kinematics(&sol.config, &geom).unwrap().position;
        worst = worst.max((tip - target).norm());
        unconverged += usize::from(!sol.converged);
    }
    (worst, unconverged)
}

/// Worst distance between a mirrored limb's tip and the sagittal
/// reflection of the original tip.
pub fn mirror_error(n: usize, seed: u64) -> f64 {
    let geom = LimbGeometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c = random_config(&mut rng, &geom, 1.0);
            let a = forward_kinematics(&c, &geom).unwrap().position;
            let b = forward_kinematics(&mirror_config(&c), &geom).unwrap().position;
            (b - Vector3::new(a.x, -a.y, a.z)).norm()
        })
        .fold(0.0, f64::max)
}

// ---- guidance

/// Waypoints reached on `plans` random five-point plans in calm water.
pub fn los_plans_reached(plans: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..plans)
        .map(|_| {
            let plan = ursula_core::guidance::WaypointPlan::new(&random_plan(&mut rng));
            run_los(&plan, &Default::default(), [0.0, 0.0], 600.0).reached
        })
        .collect()
}

// ---- nav

fn map3() -> LandmarkMap {
    LandmarkMap {
        landmarks: vec![
            Landmark { id: 1, x: 10.0, y: 0.0 },
            Landmark { id: 2, x: 0.0, y: 12.0 },
            Landmark { id: 3, x: -8.0, y: -6.0 },
        ],
    }
}

/// First step index at which the covariance stopped being PSD, if any.
pub fn first_non_psd(updates: u64, seed: u64) -> Option<(u64, &'static str)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = map3();
    let noise = NoiseConfig::default();
    let params = NavParams::default();
    let mut est = NavEstimate::new(0.0, 0.0, 0.0, Matrix3::identity());
    for i in 0..updates {
        let truth = VehicleState {
            u: rng.random_range(-1.0..1.0),
            v: rng.random_range(-0.3..0.3),
            r: rng.random_range(-0.5..0.5),
            ..VehicleState::at(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 3.0, rng.random_range(-3.0..3.0))
        };
        let frame = sense(&truth, [0.0, 0.0], &map, &noise, i);
        est = predict(&est, &frame, &params, rng.random_range(0.001..0.1));
        if !est.is_psd() {
            return Some((i, "predict"));
        }
        est = update(&est, &frame.detections, &map, &noise).0;
        if !est.is_psd() {
            return Some((i, "update"));
        }
        if i % 97 == 0 {
            est = gnss_reset(&est, [truth.x, truth.y], 0.0, 0.5).unwrap();
            if !est.is_psd() {
                return Some((i, "gnss"));
            }
        }
    }
    None
}

/// Position error after repeated updates from one noiseless landmark frame.
pub fn zero_noise_error() -> f64 {
    let truth = VehicleState::at(2.0, 1.0, 4.0, 0.4);
    let map = map3();
    let frame = sense(&truth, [0.0, 0.0], &map, &NoiseConfig::noiseless(), 0);
    let mut est = NavEstimate::new(2.6, 0.5, 0.45, Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.05)));
    for _ in 0..100 {
        est = update(&est, &frame.detections, &map, &NoiseConfig::default()).0;
    }
    (est.mean[0] - truth.x).hypot(est.mean[1] - truth.y)
}

// ---- teleop

/// Worst normal and offset error fitting noiseless random planes, and the
/// number of samples left outside the fitted patch.
pub fn plane_fit_errors(n: usize, seed: u64) -> (f64, f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut normal, mut offset_err, mut outside) = (0.0_f64, 0.0_f64, 0);
    for _ in 0..n {
        let dir = random_unit(&mut rng);
        let offset = rng.random_range(-2.0..2.0);
        let pts = plane_samples(&mut rng, &dir, offset, 12);
        let view = dir * (offset + 1.0);
        let params = ProxyBuildParams { viewpoint: Some(view.into()), cluster_radius: 1.0, ..Default::default() };
        let fit = build_proxy(&pts, None, &params).unwrap();
        let patch = &fit.proxy.patches[0];
        normal = normal.max((patch.normal - dir).norm());
        offset_err = offset_err.max((patch.offset - offset).abs());
        outside += pts.iter().filter(|p| patch.edge_distance(p) < 0.0).count();
    }
    (normal, offset_err, outside)
}

#[derive(Debug, Default)]
pub struct ReconcileStats {
    pub steps: usize,
    pub contacts: usize,
    pub not_idempotent: usize,
    pub inconsistent: usize,
}

/// Randomized contact scripts against random proxies: reconcile twice must
/// equal reconcile once, and the proxy's force afterwards must agree with
/// the measurement (nonzero within a factor of ten in contact, zero free).
pub fn reconcile_scripts(scripts: usize, seed: u64) -> ReconcileStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ReconcileParams::default();
    let mut stats = ReconcileStats::default();
    for _ in 0..scripts {
        let mut proxy = random_proxy(&mut rng);
        for _ in 0..5 {
            let p = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            let force = if rng.random_bool(0.6) { random_unit(&mut rng) * rng.random_range(0.1..5.0) } else { Vector3::zeros() };
            let tactile = TactileMeasurement { force: force.into(), position: p.into(), t: 0.0 };
            let once = reconcile(&proxy, &tactile, &params).unwrap();
            let twice = reconcile(&once, &tactile, &params).unwrap();
            stats.steps += 1;
            if once != twice || once.patches.iter().any(|q| (q.normal.norm() - 1.0).abs() >= 1e-12) {
                stats.not_idempotent += 1;
            }
            let estimated = estimate_force(&p, &Vector3::zeros(), &once).norm();
            let consistent = if force.norm() > params.contact_threshold {
                stats.contacts += 1;
                estimated > 0.0 && estimated >= 0.1 * force.norm() && estimated <= 10.0 * force.norm()
            } else {
                estimated == 0.0
            };
            if !consistent {
                stats.inconsistent += 1;
            }
            proxy = once;
        }
    }
    stats
}

/// Largest ratio |ΔF| / (Σk |Δp|) over random displacements; at most 1
/// when the force is Lipschitz with the summed patch stiffness.
pub fn force_continuity_ratio(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let proxy = random_proxy(&mut rng);
        let k_sum: f64 = proxy.patches.iter().map(|p| p.stiffness).sum();
        let p = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let delta = random_unit(&mut rng) * rng.random_range(1e-6..0.01);
        let a = estimate_force(&p, &Vector3::zeros(), &proxy);
        let b = estimate_force(&(p + delta), &Vector3::zeros(), &proxy);
        worst = worst.max((a - b).norm() / (k_sum * delta.norm()));
    }
    worst
}

// ---- modes

/// Cases checked and cases disagreeing with the decision-table oracle.
pub fn transition_table_mismatches() -> (usize, Vec<String>) {
    let mut cases = 0;
    let mut bad = Vec::new();
    for cur in ModeState::all() {
        for req in ModeState::all() {
            for source in SOURCES {
                for wireless in [false, true] {
                    let link = LinkStatus { wireless_available: wireless };
                    let got = request_transition(cur, &TransitionEvent { requested: req, source }, &link)
                        .map(|o| (o.state, o.hold_position))
                        .map_err(|r| r.code);
                    if got != mode_oracle(cur, req, source, wireless) {
                        bad.push(format!("{cur} -> {req} {source:?} wireless={wireless}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    (cases, bad)
}

/// Every state reachable from the default by any accepted event.
pub fn reachable_states() -> BTreeSet<ModeState> {
    let start = ModeState::default();
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(cur) = queue.pop_front() {
        for req in ModeState::all() {
            for source in SOURCES {
                for wireless in [false, true] {
                    let link = LinkStatus { wireless_available: wireless };
                    if let Ok(out) = request_transition(cur, &TransitionEvent { requested: req, source }, &link) {
                        if seen.insert(out.state) {
                            queue.push_back(out.state);
                        }
                    }
                }
            }
        }
    }
    seen
}

// ---- comms

/// Feed `n` random and mutated byte strings to the decoder. Returns how
/// many decoded and how many panicked.
pub fn fuzz_decode(n: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<Vec<u8>> = vec![
        encode(&Message { seq: 1, t: 0.5, body: Body::Telemetry(Box::new(super::sample_frame())) })
            .unwrap()
            .into_bytes(),
        transition(4),
        wire(5, CommandKind::EmergencyStop {}),
        br#"{"v":1,"type":"ack","seq":1,"t":0.0,"body":{"command_id":1}}"#.to_vec(),
    ];
    let (mut ok, mut panicked) = (0, 0);
    for i in 0..n {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let len = rng.random_range(0..64);
            (0..len).map(|_| rng.random()).collect()
        } else {
            let mut b = seeds[i % seeds.len()].clone();
            for _ in 0..rng.random_range(1..6) {
                let at = rng.random_range(0..b.len());
                match rng.random_range(0..3) {
                    0 => b[at] = rng.random(),
                    1 => {
                        b.remove(at);
                    }
                    _ => b.insert(at, b"{}[]\",:0-e"[rng.random_range(0..10)]),
                }
            }
            b
        };
        match std::panic::catch_unwind(|| decode(&bytes).is_ok()) {
            Ok(true) => ok += 1,
            Ok(false) => {}
            Err(_) => panicked += 1,
        }
    }
    (ok, panicked)
}

/// Command ids sent and delivered over a saturated link with outages.
pub fn overload_delivery(seed: u64) -> (Vec<u64>, Vec<u64>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut session = Session::new(SessionConfig::default());
    // 1 kB/s of capacity against ~100 B commands at 10 per second, then drain
    let link = LinkQuality { kind: LinkKind::Vlc, available: true, bandwidth_kbps: 8.0, latency_ms: 35.0 };
    let (mut sent, mut got) = (Vec::new(), Vec::new());
    let mut ordered = true;
    let mut id = 0u64;
    for tick in 0..30_000u64 {
        if tick < 5_000 && rng.random_bool(0.1) {
            id += 1;
            assert!(session.receive(&transition(id)).is_none());
            sent.push(id);
        }
        if tick % 10 == 0 {
            session.send(Body::Telemetry(Box::new(super::sample_frame()))).unwrap();
        }
        let down = if tick % 700 < 100 { LinkQuality::down(LinkKind::Vlc) } else { link };
        let r = session.step(&down, TICK_US, |_| Ok(()));
        got.extend(r.delivered.iter().map(|c| c.id));
        let seqs: Vec<u64> = r.transmitted.iter().map(|s| decode(s.as_bytes()).unwrap().seq).collect();
        ordered &= seqs.windows(2).all(|w| w[0] < w[1]);
    }
    ordered &= session.commands_in_transit() == 0;
    (sent, got, ordered)
}

/// Links on which an emergency stop queued behind 50 commands was not the
/// first thing delivered on the next tick.
pub fn estop_late_links() -> Vec<LinkQuality> {
    let links = [
        LinkQuality::ideal(),
        LinkQuality { kind: LinkKind::Umbilical, available: true, bandwidth_kbps: 100_000.0, latency_ms: 1.0 },
        LinkQuality { kind: LinkKind::Vlc, available: true, bandwidth_kbps: 0.01, latency_ms: 5.0 },
        LinkQuality { kind: LinkKind::LteWifi, available: true, bandwidth_kbps: 5_000.0, latency_ms: 80.0 },
        LinkQuality::down(LinkKind::Vlc),
    ];
    links
        .into_iter()
        .filter(|link| {
            let mut session = Session::new(SessionConfig::default());
            for id in 0..50 {
                session.receive(&transition(id));
            }
            session.receive(&wire(999, CommandKind::EmergencyStop {}));
            let r = session.step(link, TICK_US, |_| Ok(()));
            r.delivered.first().map(|c| c.id) != Some(999)
        })
        .collect()
}

pub fn golden_dir() -> std::path::PathBuf {
    std::path::PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../tests/golden"))
}

/// Every `.json` file in the golden corpus, sorted by name.
pub fn golden_corpus() -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(golden_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Corpus files that fail to decode or do not re-encode byte for byte.
pub fn golden_unstable() -> Vec<String> {
    golden_corpus()
        .into_iter()
        .filter(|(_, bytes)| match decode(bytes) {
            Ok(m) => encode(&m).map(|s| s.into_bytes() != *bytes).unwrap_or(true),
            Err(_) => true,
        })
        .map(|(name, _)| name)
        .collect()
}
