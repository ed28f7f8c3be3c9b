use nalgebra::Matrix3;
use ursula_core::dynamics::VehicleState;
use ursula_core::nav::*;

mod common;

#[test]
fn covariance_stays_psd_under_random_updates() {
    assert_eq!(common::measure::first_non_psd(100_000, 1), None);
}

#[test]
fn stationary_zero_noise_updates_converge() {
    let err = common::measure::zero_noise_error();
    assert!(err < 1e-3, "error {err}");
}

#[test]
fn repeated_gnss_fixes_reach_riccati_fixed_point() {
    let q = 0.04;
    let sigma: f64 = 0.5;
    let r = sigma * sigma;
    let params = NavParams { process_noise: [q, q, 0.0] };
    let still = sense(&VehicleState::at(0.0, 0.0, 0.0, 0.0), [0.0; 2], &LandmarkMap::default(), &NoiseConfig::noiseless(), 0);
    let mut est = NavEstimate::new(0.0, 0.0, 0.0, Matrix3::identity() * 100.0);
    for _ in 0..200 {
        est = predict(&est, &still, &params, 1.0);
        est = gnss_reset(&est, [0.0, 0.0], 0.0, sigma).unwrap();
    }
    // posterior fixed point of P+ = (P+ + q) R / (P+ + q + R)
    let expected = (-q + (q * q + 4.0 * q * r).sqrt()) / 2.0;
    assert!((est.cov[(0, 0)] - expected).abs() < 1e-12, "{} vs {expected}", est.cov[(0, 0)]);
    assert!((est.cov[(1, 1)] - expected).abs() < 1e-12);
}

#[test]
fn nees_consistent_on_loop_mission() {
    let (inside, _) = common::loop_mission_nees(100);
    assert!(inside >= 90, "{inside}/100 seeds inside the 95% envelope");
}

#[test]
fn landmarks_bound_uncertainty_and_dead_reckoning_drifts() {
    let params = NavParams::default();
    let noise = NoiseConfig::default();
    let two = LandmarkMap {
        landmarks: vec![Landmark { id: 1, x: 10.0, y: 0.0 }, Landmark { id: 2, x: 0.0, y: 10.0 }],
    };
    let run = |map: &LandmarkMap, steps: usize, yaw_rate: f64| {
        let mut est = NavEstimate::new(0.0, 0.0, 0.0, Matrix3::identity() * 0.01);
        let mut truth = VehicleState::at(0.0, 0.0, 5.0, 0.0);
        truth.r = yaw_rate;
        truth.u = 0.5;
        let mut sigmas = Vec::new();
        for k in 0..steps {
            truth.psi += truth.r * 0.1;
            truth.x += truth.u * truth.psi.cos() * 0.1;
            truth.y += truth.u * truth.psi.sin() * 0.1;
            let frame = sense(&truth, [0.0; 2], map, &noise, k as u64);
            est = predict(&est, &frame, &params, 0.1);
            est = update(&est, &frame.detections, map, &noise).0;
            sigmas.push((est.cov[(0, 0)] + est.cov[(1, 1)]).sqrt());
        }
        sigmas
    };
    let with = run(&two, 3000, 0.05);
    let without = run(&LandmarkMap::default(), 3000, 0.0);
    let late_max = with[1000..].iter().cloned().fold(0.0, f64::max);
    assert!(late_max < 0.2, "sigma with landmarks {late_max}");
    assert!(without.iter().step_by(100).collect::<Vec<_>>().windows(2).all(|w| w[1] > w[0]));
    assert!(without[2999] > 5.0 * late_max);
}
