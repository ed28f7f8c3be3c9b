//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs under `cargo test` with its own `main` (harness = false), or alone
//! with `cargo test -p ursula-core --test acceptance`.

use std::time::{Duration, Instant};

use ursula_core::harness::run_scenario;
use ursula_core::limbs::LimbId;
use ursula_core::modes::{LinkMode, ModeState, NavMode, OpMode};
use ursula_core::power::*;
use ursula_core::propulsion::{thrust_magnitude, FinId, FinMode, FinParams, FinState};
use ursula_core::scenario::Scenario;

mod common;
use common::measure::*;
use common::oracles::*;

struct Suite {
    failed: Vec<&'static str>,
}

impl Suite {
    /// Run one criterion. The closure returns the individual checks as
    /// (passed, description) pairs; `budget` adds a wall-clock check.
    fn criterion(&mut self, name: &'static str, budget: Option<Duration>, body: impl FnOnce() -> Vec<(bool, String)>) {
        let start = Instant::now();
        let mut checks = body();
        let elapsed = start.elapsed();
        if let Some(limit) = budget {
            checks.push((elapsed < limit, format!("runtime {:.2?} < {:?}", elapsed, limit)));
        }
        let pass = checks.iter().all(|(ok, _)| *ok);
        println!("{} {name} ({elapsed:.2?})", if pass { "PASS" } else { "FAIL" });
        for (ok, what) in &checks {
            println!("     {} {what}", if *ok { "ok  " } else { "FAIL" });
        }
        if !pass {
            self.failed.push(name);
        }
    }
}

fn dynamics() -> Vec<(bool, String)> {
    let ratio = rk4_order_ratio();
    let gain = worst_energy_gain(10_000, 11);
    let coupled = decoupling_violations(10_000, 12);
    vec![
        ((12.0..=20.0).contains(&ratio), format!("RK4 dt/(dt/2) error ratio {ratio:.2} in [12, 20]")),
        (gain <= 0.0, format!("largest unforced energy change over 1e4 steps {gain:.3e} <= 0")),
        (coupled == 0, format!("heave/planar decoupling violations {coupled} of 2e4")),
    ]
}

fn propulsion() -> Vec<(bool, String)> {
    let jet = jet_impulse_error();
    let p = FinParams::default();
    let residual = saturating_requests().iter().map(|t| allocation_fixed_point_residual(t, &p)).fold(0.0, f64::max);
    let mut scaling_exact = true;
    for mode in [FinMode::StandingWave, FinMode::TravelingWave] {
        for i in 1..=400 {
            let f = i as f64 * 0.01;
            for amp in [0.05, 0.2, 0.37, 0.5] {
                let fin = |frequency| FinState { id: FinId::BowPort, swivel: 0.0, mode, amplitude: amp, frequency, phase: 0.0 };
                let t1 = thrust_magnitude(&fin(f), &p);
                scaling_exact &= thrust_magnitude(&fin(2.0 * f), &p) == 4.0 * t1;
                scaling_exact &= thrust_magnitude(&fin(0.5 * f), &p) == 0.25 * t1;
            }
        }
    }
    vec![
        (jet < 0.01, format!("jet impulse vs 1 us oracle, relative error {jet:.2e} < 1e-2")),
        (residual < 1e-6, format!("allocation fixed-point residual {residual:.2e} N < 1e-6")),
        (scaling_exact, "thrust(2f) = 4 thrust(f) and thrust(f/2) = thrust(f)/4 exactly on 3200 cases".into()),
    ]
}

fn limbs() -> Vec<(bool, String)> {
    let (straight, semicircle) = fk_analytic_errors();
    let antisym = tendon_antisymmetry_failures(1000, 11);
    let (ik, unconverged) = ik_round_trip(100, 5);
    let mirror = mirror_error(100, 21);
    vec![
        (straight < 1e-9, format!("straight limb tip error {straight:.2e} m < 1e-9")),
        (semicircle < 1e-9, format!("semicircle tip error {semicircle:.2e} m < 1e-9")),
        (antisym == 0, format!("tendon pairs not cancelling exactly: {antisym} of 1000")),
        (ik < 1e-4 && unconverged == 0, format!("IK round-trip worst residual {ik:.2e} m < 1e-4, {unconverged} unconverged of 100")),
        (mirror < 1e-12, format!("mirror reflection worst error {mirror:.2e} m on 100 configs")),
    ]
}

fn guidance() -> Vec<(bool, String)> {
    let (residual, gap) = uk_errors(100, 3);
    let plans = los_plans_reached(1, 17);
    let reached = plans[0].iter().filter(|r| **r).count();
    let fixed = steady_error(0.0);
    let adaptive = steady_error(ursula_core::guidance::LosParams::default().adaptation_gain);
    let reduction = 1.0 - adaptive / fixed;
    let circle = circle_tracking_error();
    vec![
        (residual < 1e-9, format!("UK constraint residual {residual:.2e} < 1e-9 on 100 SPD instances")),
        (gap < 1e-8, format!("UK vs dense KKT oracle {gap:.2e} < 1e-8")),
        (reached == 5, format!("LOS closed loop reached {reached}/5 waypoints")),
        (reduction >= 0.9, format!("adaptive drift cuts steady cross-track {fixed:.3} -> {adaptive:.2e} m ({:.1}% >= 90%)", reduction * 100.0)),
        (circle < 0.05, format!("circle tracking error after transient {circle:.2e} m < 0.05")),
    ]
}

fn nav() -> Vec<(bool, String)> {
    let psd = first_non_psd(100_000, 1);
    let (inside, _) = common::loop_mission_nees(100);
    let zero = zero_noise_error();
    vec![
        (psd.is_none(), format!("covariance PSD after every step of 1e5 updates (first failure {psd:?})")),
        (inside >= 90, format!("NEES inside 95% envelope in {inside}/100 seeds (>= 90)")),
        (zero < 1e-3, format!("zero-noise convergence error {zero:.2e} m < 1e-3")),
    ]
}

fn teleop() -> Vec<(bool, String)> {
    let (normal, offset, outside) = plane_fit_errors(200, 4);
    let stats = reconcile_scripts(2000, 12);
    let ratio = force_continuity_ratio(2000, 13);
    vec![
        (normal < 1e-9 && offset < 1e-9 && outside == 0, format!(
            "noiseless plane fit: normal {normal:.1e}, offset {offset:.1e}, {outside} samples outside patch"
        )),
        (stats.not_idempotent == 0, format!("reconcile not idempotent in {} of {} steps", stats.not_idempotent, stats.steps)),
        (stats.inconsistent == 0 && stats.contacts > 0, format!(
            "post-reconcile force inconsistent in {} of {} steps ({} in contact)", stats.inconsistent, stats.steps, stats.contacts
        )),
        (ratio <= 1.0 + 1e-9, format!("force Lipschitz ratio |dF| / (sum k |dp|) = {ratio:.6} <= 1")),
    ]
}

fn modes() -> Vec<(bool, String)> {
    let (cases, bad) = transition_table_mismatches();
    let reachable = reachable_states();
    let invalid = reachable.iter().filter(|m| !m.is_valid()).count();
    vec![
        (cases == 864 && bad.is_empty(), format!("12x12 table x 3 sources x 2 link states: {} of {cases} disagree", bad.len())),
        (invalid == 0, format!("{} reachable states, {invalid} violate invariants", reachable.len())),
    ]
}

fn power() -> Vec<(bool, String)> {
    let p = PowerParams::default();
    let capacity = p.capacity_wh();
    let mut s = PowerState::full_battery(&p);
    s.rolling_mean = 100.0;
    let endurance = endurance_estimate(&s);

    let demand = |w: [f64; 5]| {
        Loads::from([
            (Subsystem::Payload, w[0]),
            (Subsystem::Comms, w[1]),
            (Subsystem::Limbs, w[2]),
            (Subsystem::Propulsion, w[3]),
            (Subsystem::Computers, w[4]),
        ])
    };
    let u = PowerState::new(PowerSource::Umbilical, capacity, &p);
    let (light, ev_light) = step_power(&u, &demand([300.0, 100.0, 400.0, 1500.0, 900.0]), &p, 0.01).unwrap();
    let (heavy, ev_heavy) = step_power(&u, &demand([50.0, 20.0, 300.0, 2500.0, 900.0]), &p, 0.01).unwrap();
    let shed = |ev: &[PowerEvent]| match ev.first() {
        Some(PowerEvent::Overload { shed, .. }) => shed.clone(),
        _ => vec![],
    };
    let light_ok = shed(&ev_light) == vec![Subsystem::Payload] && light.total_load() == 2900.0;
    let heavy_ok = shed(&ev_heavy) == vec![Subsystem::Payload, Subsystem::Comms, Subsystem::Limbs, Subsystem::Propulsion]
        && heavy.loads[&Subsystem::Computers] == 900.0
        && heavy.total_load() <= p.umbilical_limit_w;
    vec![
        (capacity == 352.8, format!("battery capacity {capacity} Wh == 352.8")),
        (endurance == Endurance::Hours(3.528), format!("endurance at 100 W {endurance:?} == 3.528 h")),
        (light_ok, format!("3.2 kW on 3 kW umbilical sheds {:?}, serves {} W", shed(&ev_light), light.total_load())),
        (heavy_ok, format!("3.77 kW sheds {:?}, computers keep {} W", shed(&ev_heavy), heavy.loads[&Subsystem::Computers])),
    ]
}

fn comms() -> Vec<(bool, String)> {
    let corpus = golden_corpus().len();
    let unstable = golden_unstable();
    let (decoded, panicked) = fuzz_decode(100_000, 99);
    let (sent, got, ordered) = overload_delivery(5);
    let late = estop_late_links();
    vec![
        (corpus == 20 && unstable.is_empty(), format!("golden corpus {corpus} files, byte-unstable: {unstable:?}")),
        (panicked == 0, format!("fuzz decode 1e5 inputs: {panicked} panics, {decoded} decoded")),
        (ordered && got == sent, format!("{} commands over saturated link, {} delivered, exactly once in order: {}", sent.len(), got.len(), ordered && got == sent)),
        (late.is_empty(), format!("emergency stop delivered first on next tick on 5 links ({} late)", late.len())),
    ]
}

fn end_to_end() -> Vec<(bool, String)> {
    let scenario = Scenario::from_toml(&mission_toml()).unwrap();
    let (log, a) = run_scenario(scenario.clone()).unwrap();
    let (_, b) = run_scenario(scenario.clone()).unwrap();
    let records = log.records();
    let plan = scenario.plan.as_ref().unwrap();

    // surface fix: the estimate is pulled tight while still on the surface
    let sigma = |r: &ursula_core::replay::LogRecord| (r.frame.nav.cov[0] + r.frame.nav.cov[4]).sqrt();
    let surface: Vec<_> = records.iter().take_while(|r| r.frame.vehicle.z < 0.3).collect();
    let fixed = surface.iter().map(|r| sigma(r)).fold(f64::INFINITY, f64::min);
    let dived = records.iter().filter(|r| r.frame.vehicle.z > 2.5).count();
    let missed: Vec<usize> = plan
        .waypoints
        .iter()
        .enumerate()
        .filter(|(_, wp)| {
            records.iter().map(|r| (r.frame.vehicle.x - wp.x).hypot(r.frame.vehicle.y - wp.y)).fold(f64::INFINITY, f64::min)
                >= plan.acceptance_radius
        })
        .map(|(i, _)| i)
        .collect();
    let nav_err = records
        .iter()
        .map(|r| (r.frame.nav.mean[0] - r.frame.vehicle.x).hypot(r.frame.nav.mean[1] - r.frame.vehicle.y))
        .fold(0.0, f64::max);
    let manual = ModeState::new(OpMode::Int, NavMode::Mancon, LinkMode::Tet);
    let went_manual = records.iter().any(|r| r.frame.mode == manual);
    let touching: Vec<_> = records
        .iter()
        .filter(|r| r.frame.limbs.iter().any(|l| l.limb == LimbId::ArmStbd && l.contact_force[2].abs() > 5.0))
        .collect();
    let contact_in_teleop = !touching.is_empty() && touching.iter().all(|r| r.frame.mode == manual);
    let truth_k = scenario.environment.contact_planes[0].stiffness;
    let k0 = records[0].frame.proxy[0].stiffness;
    let k1 = touching.last().map_or(k0, |r| r.frame.proxy[0].stiffness);
    let last = records.last().unwrap();
    vec![
        (!surface.is_empty() && fixed < 1.0, format!("surface GNSS fix: position sigma {fixed:.3} m over {} surface records", surface.len())),
        (dived > 300, format!("dive: {dived} records below 2.5 m")),
        (missed.is_empty(), format!("AUTNAV transit: {} waypoints, missed {missed:?}", plan.waypoints.len())),
        (nav_err < 0.5, format!("landmark-aided estimate worst position error {nav_err:.3} m")),
        (went_manual && contact_in_teleop, format!("INT/MANCON over TET reached; {} records in contact, all in teleop", touching.len())),
        ((k1 - truth_k).abs() < 0.05 * truth_k, format!("proxy stiffness reconciled {k0} -> {k1:.1} (truth {truth_k})")),
        (last.frame.vehicle.z < 0.3, format!("surfaced: final depth {:.3} m", last.frame.vehicle.z)),
        (a.digest == b.digest, format!("two runs, same seed: digest {} vs {}", &a.digest[..16], &b.digest[..16])),
    ]
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    suite.criterion("dynamics", Some(Duration::from_secs(5)), dynamics);
    suite.criterion("propulsion", None, propulsion);
    suite.criterion("limbs", Some(Duration::from_secs(30)), limbs);
    suite.criterion("guidance", Some(Duration::from_secs(60)), guidance);
    suite.criterion("nav", None, nav);
    suite.criterion("teleop", None, teleop);
    suite.criterion("modes", None, modes);
    suite.criterion("power", None, power);
    suite.criterion("comms", None, comms);
    suite.criterion("end-to-end", Some(Duration::from_secs(120)), end_to_end);
    if suite.failed.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: {} failed: {}", suite.failed.len(), suite.failed.join(", "));
        std::process::exit(1);
    }
}
