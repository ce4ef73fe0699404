//! Built-in experiment configurations.

use anyhow::{bail, Result};
use collogp::equation::{CoeffConfig, EquationConfig};
use collogp::infer::{MnllNoise, TrainConfig};
use collogp::simulate::{AllenCahnConfig, Interval, PendulumConfig, SamplingConfig};

use crate::config::{DataSource, ExperimentConfig, Method, ModelInit, OutputConfig};

pub const EXPERIMENTS: [&str; 15] = [
    "pendulum-c-exact",
    "pendulum-i-exact",
    "pendulum-gpr-exact",
    "pendulum-c-noisy",
    "pendulum-i-noisy",
    "pendulum-gpr-noisy",
    "pendulum-damped-c-exact",
    "pendulum-damped-i-exact",
    "pendulum-damped-gpr-exact",
    "pendulum-damped-c-noisy",
    "pendulum-damped-i-noisy",
    "pendulum-damped-gpr-noisy",
    "allen-cahn-c",
    "allen-cahn-i",
    "allen-cahn-gpr",
];

/// Noise variance of the noisy pendulum variants.
pub const NOISE_VAR: f64 = 0.1;

/// Damping coefficient of the damped pendulum and the initial estimate.
pub const DAMPING: f64 = 0.2;
pub const DAMPING_INIT: f64 = 1.0;

fn iv(lo: f64, hi: f64) -> Interval {
    Interval::new(lo, hi).expect("static interval")
}

fn pendulum(variant: &str, damped: bool, noisy: bool) -> Result<ExperimentConfig> {
    let (n_train, train_hi, t_end) = if damped { (16, 6.0, 24.3) } else { (50, 7.3, 28.8) };
    let (method, equation) = match (variant, damped) {
        ("c", false) => (Method::Autoip, Some(EquationConfig::from_preset("pendulum_complete"))),
        ("c", true) => {
            let mut eq = EquationConfig::from_preset("pendulum_complete_damped");
            eq.coeffs = vec![CoeffConfig {
                name: "b".into(),
                init: Some(DAMPING_INIT),
                positive: true,
            }];
            (Method::Autoip, Some(eq))
        }
        ("i", _) => (Method::Autoip, Some(EquationConfig::from_preset("pendulum_incomplete"))),
        ("gpr", _) => (Method::Gpr, None),
        _ => bail!("unknown pendulum variant `{variant}`"),
    };
    Ok(ExperimentConfig {
        id: None,
        method,
        data: DataSource::Pendulum {
            params: PendulumConfig {
                damping_b: if damped { DAMPING } else { 0.0 },
                ..PendulumConfig::default()
            },
            t_end,
        },
        sampling: Some(SamplingConfig {
            train_range: vec![iv(0.0, train_hi)],
            test_range: vec![iv(0.0, t_end)],
            colloc_range: None,
            n_train,
            n_test: 800,
            m_colloc: 20,
            noise_var: if noisy { NOISE_VAR } else { 0.0 },
            seed: 0,
        }),
        equation,
        model: ModelInit::default(),
        train: TrainConfig {
            lr: 1e-2,
            epochs: 10_000,
            eval_interval: 1,
            ..TrainConfig::default()
        },
        output: OutputConfig::default(),
        seed: 0,
    })
}

fn allen_cahn(variant: &str) -> Result<ExperimentConfig> {
    let (method, equation) = match variant {
        "c" => (Method::Autoip, Some(EquationConfig::from_preset("allen_cahn_complete"))),
        "i" => (Method::Autoip, Some(EquationConfig::from_preset("allen_cahn_incomplete"))),
        "gpr" => (Method::Gpr, None),
        _ => bail!("unknown Allen-Cahn variant `{variant}`"),
    };
    Ok(ExperimentConfig {
        id: None,
        method,
        data: DataSource::AllenCahn {
            params: AllenCahnConfig::default(),
        },
        sampling: Some(SamplingConfig {
            train_range: vec![iv(0.0, 0.28), iv(-1.0, 1.0)],
            test_range: vec![iv(0.0, 1.0), iv(-1.0, 1.0)],
            colloc_range: None,
            n_train: 256,
            n_test: 800,
            m_colloc: 100,
            noise_var: 0.0,
            seed: 0,
        }),
        equation,
        model: ModelInit::default(),
        train: TrainConfig {
            lr: 1e-3,
            epochs: 200_000,
            eval_interval: 100,
            ..TrainConfig::default()
        },
        output: OutputConfig {
            mnll_noise: MnllNoise::Learned,
            ..OutputConfig::default()
        },
        seed: 0,
    })
}

/// The configuration of a named experiment.
pub fn experiment(id: &str) -> Result<ExperimentConfig> {
    if !EXPERIMENTS.contains(&id) {
        bail!("unknown experiment `{id}` (known: {})", EXPERIMENTS.join(", "));
    }
    let parts: Vec<&str> = id.split('-').collect();
    let mut cfg = match parts.as_slice() {
        ["pendulum", v, noise] => pendulum(v, false, *noise == "noisy")?,
        ["pendulum", "damped", v, noise] => pendulum(v, true, *noise == "noisy")?,
        ["allen", "cahn", v] => allen_cahn(v)?,
        _ => unreachable!("every listed id has a known shape"),
    };
    cfg.id = Some(id.to_string());
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_listed_experiment_builds() {
        for id in EXPERIMENTS {
            let cfg = experiment(id).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.id.as_deref(), Some(id));
            assert_eq!(cfg.method == Method::Gpr, id.contains("gpr"), "{id}");
        }
        assert!(experiment("pendulum-x-exact").is_err());
        assert!(experiment("allen-cahn").is_err());
    }

    #[test]
    fn pendulum_protocol() {
        let cfg = experiment("pendulum-c-exact").unwrap();
        let s = cfg.sampling.unwrap();
        assert_eq!((s.n_train, s.n_test, s.m_colloc), (50, 800, 20));
        assert_eq!(s.train_range[0].hi, 7.3);
        assert_eq!(cfg.train.epochs, 10_000);
        assert_eq!(cfg.train.lr, 1e-2);
        let noisy = experiment("pendulum-i-noisy").unwrap();
        assert_eq!(noisy.sampling.unwrap().noise_var, 0.1);
        let damped = experiment("pendulum-damped-c-exact").unwrap();
        let spec = damped.equation_spec().unwrap().unwrap();
        assert_eq!(spec.coeffs[0].init, DAMPING_INIT);
        assert_eq!(damped.sampling.unwrap().n_train, 16);
    }
}
