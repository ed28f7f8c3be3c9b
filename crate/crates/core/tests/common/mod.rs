//! Shared closed-loop fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ursula_core::dynamics::{step_dynamics, VehicleParams, VehicleState};
use ursula_core::guidance::*;
use ursula_core::nav::*;

pub mod measure;
pub mod oracles;

pub const DT: f64 = 0.01;

/// Two-sided 95% interval of the chi-square distribution with 3 dof.
pub const CHI2_3_LO: f64 = 0.2158;
pub const CHI2_3_HI: f64 = 9.3484;

pub fn loop_landmarks() -> LandmarkMap {
    let pts = [(0.0, 0.0), (20.0, 0.0), (20.0, 20.0), (0.0, 20.0), (10.0, 10.0), (-5.0, 10.0)];
    LandmarkMap {
        landmarks: pts.iter().enumerate().map(|(i, &(x, y))| Landmark { id: i as u32 + 1, x, y }).collect(),
    }
}

/// True trajectory of a square loop flown with LOS guidance, sampled at `DT`.
pub fn loop_truth(seconds: f64) -> Vec<VehicleState> {
    let params = VehicleParams::default();
    let plan = WaypointPlan::new(&[(15.0, 2.0), (15.0, 15.0), (2.0, 15.0), (2.0, 2.0)]);
    let mut s = VehicleState::at(2.0, 2.0, 5.0, 0.0);
    let mut los = LosState::starting_at(2.0, 2.0);
    let mut ap = AutopilotState::default();
    let mut out = vec![s];
    for _ in 0..(seconds / DT) as usize {
        let (g, next) = los_step(&s, &plan, &LosParams::default(), &los, DT);
        los = next;
        let (tau, next_ap) = autopilot(g.heading, g.speed, &s, &AutopilotGains::default(), &ap, DT);
        ap = next_ap;
        s = step_dynamics(&s, &tau, &params, DT).unwrap();
        out.push(s);
    }
    out
}

/// Run the EKF on `seeds` independent sensor realisations of the loop
/// mission and return how many final NEES values fall in the 95% envelope.
pub fn loop_mission_nees(seeds: u64) -> (usize, Vec<f64>) {
    let truth = loop_truth(90.0);
    let map = loop_landmarks();
    let noise = NoiseConfig::default();
    let params = NavParams::default();
    let p0 = Matrix3::from_diagonal(&Vector3::new(0.25, 0.25, 0.01));
    let mut values = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut draw = |sigma: f64| -> f64 {
            let n: f64 = StandardNormal.sample(&mut rng);
            sigma * n
        };
        let t0 = &truth[0];
        let mut est = NavEstimate::new(t0.x + draw(0.5), t0.y + draw(0.5), t0.psi + draw(0.1), p0);
        for (k, s) in truth.iter().enumerate().skip(1) {
            let frame = sense(s, [0.0, 0.0], &map, &noise, seed * 1_000_003 + k as u64);
            est = predict(&est, &frame, &params, DT);
            if k % 100 == 0 {
                est = update(&est, &frame.detections, &map, &noise).0;
            }
        }
        values.push(est.nees(truth.last().unwrap()));
    }
    let inside = values.iter().filter(|&&v| (CHI2_3_LO..=CHI2_3_HI).contains(&v)).count();
    (inside, values)
}

/// A fully populated telemetry frame with fixed contents.
pub fn sample_frame() -> ursula_core::comms::protocol::TelemetryFrame {
    use ursula_core::comms::protocol::*;
    use ursula_core::comms::LinkKind;
    use ursula_core::contact::PlanePatch;
    use ursula_core::limbs::{forward_kinematics, tendon_state, LimbConfig, LimbGeometry, LimbId};
    use ursula_core::modes::ModeState;
    use ursula_core::power::{endurance_estimate, PowerParams, PowerState};

    let geom = LimbGeometry::default();
    let limbs = LimbId::ALL
        .iter()
        .map(|&limb| {
            let config = LimbConfig::uniform(geom.n_segments, 0.5, 0.25);
            LimbTelemetry {
                limb,
                tip: forward_kinematics(&config, &geom).unwrap(),
                tip_world: [10.9, 5.1, 3.05],
                tendons: tendon_state(&config, &geom, 2.0, 800.0).unwrap(),
                contact_force: [0.0; 3],
                haptic_force: [0.0; 3],
            }
        })
        .collect();
    let power = PowerState::full_battery(&PowerParams::default());
    TelemetryFrame {
        vehicle: VehicleState { u: 0.75, r: 0.01, t: 12.5, ..VehicleState::at(10.0, 5.0, 3.0, 0.5) },
        nav: NavSummary::from(&NavEstimate::new(10.1, 4.9, 0.49, Matrix3::identity() * 0.04)),
        mode: ModeState::default(),
        hold_position: false,
        guidance: Some(GuidanceSummary { active: 2, cross_track_error: -0.12, heading_cmd: 0.52, speed_cmd: 0.8, finished: false }),
        limbs,
        power: PowerSummary {
            source: power.source,
            soc: power.soc,
            bus_voltage: power.bus_voltage,
            loads: power.loads.clone(),
            rolling_mean: power.rolling_mean,
            endurance: endurance_estimate(&power),
        },
        link: LinkReport { kind: LinkKind::Umbilical, available: true, bandwidth_kbps: 100000.0, latency_ms: 1.0 },
        faults: vec![],
        proxy: vec![PlanePatch::unbounded(Vector3::z(), 1.0, 500.0)],
    }
}
