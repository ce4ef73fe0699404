use std::f64::consts::PI;

use collogp::simulate::{
    integrate_pendulum, sample_dataset, solve_allen_cahn, AllenCahnConfig, Interval, PendulumConfig, SamplingConfig,
    Solution,
};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn allen_cahn_halving_dt_changes_little() {
    let coarse = solve_allen_cahn(&AllenCahnConfig::default()).unwrap();
    let fine = solve_allen_cahn(&AllenCahnConfig {
        dt: 5e-5,
        save_every: 20,
        ..AllenCahnConfig::default()
    })
    .unwrap();
    let last = coarse.times().len() - 1;
    assert_eq!(coarse.times().len(), fine.times().len());
    let d = max_diff(coarse.slice(last), fine.slice(last));
    assert!(d < 1e-4, "dt-halving difference {d}");
    assert!(coarse.slice(last).iter().all(|u| u.abs() < 1.01));
    for (x, u) in coarse.positions().iter().zip(coarse.slice(0)) {
        assert_eq!(*u, x * x * (PI * x).cos());
    }
}

#[test]
fn allen_cahn_residual_is_small_on_the_grid() {
    let cfg = AllenCahnConfig {
        save_every: 1,
        t_end: 0.5,
        grid_x: 2048,
        ..AllenCahnConfig::default()
    };
    let sol = solve_allen_cahn(&cfg).unwrap();
    let n = cfg.grid_x;
    let dx = 2.0 / n as f64;
    let t = sol.times();
    let mut worst: f64 = 0.0;
    // the initial profile has a slope jump across the periodic seam, which
    // the first steps smooth out
    let start = t.iter().position(|&v| v >= 0.01).unwrap();
    for i in (start..t.len() - 1).step_by(97) {
        let dt = t[i + 1] - t[i - 1];
        let (prev, cur, next) = (sol.slice(i - 1), sol.slice(i), sol.slice(i + 1));
        for j in 0..n {
            let ut = (next[j] - prev[j]) / dt;
            let l = cur[(j + n - 1) % n];
            let r = cur[(j + 1) % n];
            // fourth-order stencil keeps the check below the interface curvature
            let ll = cur[(j + n - 2) % n];
            let rr = cur[(j + 2) % n];
            let uxx = (-ll + 16.0 * l - 30.0 * cur[j] + 16.0 * r - rr) / (12.0 * dx * dx);
            let u = cur[j];
            let res = ut - cfg.nu * uxx + cfg.gamma * (u * u * u - u);
            worst = worst.max(res.abs());
        }
    }
    assert!(worst < 1e-2, "residual {worst}");
}

fn pendulum_error(step: f64) -> f64 {
    let cfg = PendulumConfig {
        step,
        ..PendulumConfig::default()
    };
    let reference = integrate_pendulum(
        &PendulumConfig {
            step: step / 10.0,
            ..cfg.clone()
        },
        10.0,
    )
    .unwrap();
    let sol = integrate_pendulum(&cfg, 10.0).unwrap();
    (0..=100)
        .map(|i| i as f64 * 0.1)
        .map(|t| (sol.theta_at(t).unwrap() - reference.theta_at(t).unwrap()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn pendulum_is_fourth_order() {
    // grid-aligned query times, so interpolation does not enter
    let ratio = pendulum_error(0.1) / pendulum_error(0.05);
    assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn pendulum_energy_matches_a_fine_reference() {
    let sol = integrate_pendulum(&PendulumConfig::default(), 28.8).unwrap();
    let e = sol.energy();
    let drift = e.iter().map(|v| (v - e[0]).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-6);
    let fine = integrate_pendulum(
        &PendulumConfig {
            step: 1e-4,
            ..PendulumConfig::default()
        },
        28.8,
    )
    .unwrap();
    assert!((sol.theta_at(28.8).unwrap() - fine.theta_at(28.8).unwrap()).abs() < 1e-6);
}

#[test]
fn train_noise_has_the_requested_variance() {
    let sol = integrate_pendulum(&PendulumConfig::default(), 7.3).unwrap();
    let cfg = SamplingConfig {
        train_range: vec![Interval::new(0.0, 7.3).unwrap()],
        test_range: vec![Interval::new(0.0, 7.3).unwrap()],
        colloc_range: None,
        n_train: 10_000,
        n_test: 1,
        m_colloc: 0,
        noise_var: 0.1,
        seed: 5,
    };
    let data = sample_dataset(&sol, &cfg).unwrap();
    let resid: Vec<f64> = data
        .train
        .x
        .iter()
        .zip(&data.train.y)
        .map(|(z, y)| y - sol.value(z).unwrap())
        .collect();
    let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
    assert!((var - 0.1).abs() < 0.02, "variance {var}");
}
