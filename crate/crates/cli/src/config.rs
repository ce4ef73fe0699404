//! Experiment configuration files.
//!
//! A config is a TOML document. It either names a built-in experiment with
//! `id` (any other section then replaces that section of the built-in) or
//! spells out every section itself.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use collogp::equation::{EquationConfig, EquationSpec};
use collogp::infer::{MnllNoise, TrainConfig};
use collogp::simulate::{AllenCahnConfig, Interval, PendulumConfig, SamplingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::experiments;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Autoip,
    Gpr,
}

/// Where the ground truth or the data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Pendulum {
        #[serde(default)]
        params: PendulumConfig,
        t_end: f64,
    },
    AllenCahn {
        #[serde(default)]
        params: AllenCahnConfig,
    },
    /// Long-format `t,x,u` table on a rectilinear grid.
    Grid { path: PathBuf },
    /// Ready-made train and test tables; collocation points come from
    /// `colloc` or are drawn uniformly from `colloc_range`.
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        colloc: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        colloc_range: Option<Vec<Interval>>,
        #[serde(default)]
        m_colloc: usize,
    },
}

/// Initial values of the model parameters. Unset entries keep the library
/// defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_s: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_amp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_v: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub mnll_noise: MnllNoise,
    pub write_model: bool,
    pub write_predictions: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            mnll_noise: MnllNoise::Learned,
            write_model: true,
            write_predictions: true,
        }
    }
}

/// A fully specified experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub method: Method,
    pub data: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equation: Option<EquationConfig>,
    #[serde(default)]
    pub model: ModelInit,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Seeds data sampling, collocation and training.
    #[serde(default)]
    pub seed: u64,
}

/// The on-disk form: every section optional so that a built-in experiment
/// can be adjusted piecemeal.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    id: Option<String>,
    method: Option<Method>,
    data: Option<DataSource>,
    sampling: Option<SamplingConfig>,
    equation: Option<EquationConfig>,
    model: Option<ModelInit>,
    train: Option<TrainConfig>,
    output: Option<OutputConfig>,
    seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).context("config is not valid")?;
        let mut cfg = match &raw.id {
            Some(id) => experiments::experiment(id)?,
            None => ExperimentConfig {
                id: None,
                method: raw.method.unwrap_or_default(),
                data: raw.data.clone().context("config: `data` is required without an `id`")?,
                sampling: None,
                equation: None,
                model: ModelInit::default(),
                train: TrainConfig::default(),
                output: OutputConfig::default(),
                seed: 0,
            },
        };
        if let Some(m) = raw.method {
            cfg.method = m;
        }
        if let Some(d) = raw.data {
            cfg.data = d;
        }
        if raw.sampling.is_some() {
            cfg.sampling = raw.sampling;
        }
        if raw.equation.is_some() {
            cfg.equation = raw.equation;
        }
        if let Some(m) = raw.model {
            cfg.model = m;
        }
        if let Some(t) = raw.train {
            cfg.train = t;
        }
        if let Some(o) = raw.output {
            cfg.output = o;
        }
        if let Some(s) = raw.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config and makes its relative data paths relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase_paths(base);
        Ok(cfg)
    }

    fn rebase_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Grid { path } => fix(path),
            DataSource::Csv { train, test, colloc, .. } => {
                fix(train);
                fix(test);
                if let Some(c) = colloc {
                    fix(c);
                }
            }
            _ => {}
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match &self.data {
            DataSource::Csv { colloc, colloc_range, m_colloc, .. } => {
                if self.method == Method::Autoip && colloc.is_none() && (colloc_range.is_none() || *m_colloc == 0) {
                    bail!("data: csv input needs `colloc` or both `colloc_range` and `m_colloc`");
                }
            }
            _ => {
                if self.sampling.is_none() {
                    bail!("`sampling` is required for simulated and grid data");
                }
            }
        }
        if self.method == Method::Autoip && self.equation.is_none() {
            bail!("`equation` is required for method = \"autoip\"");
        }
        self.equation_spec()?;
        Ok(())
    }

    pub fn equation_spec(&self) -> Result<Option<EquationSpec>> {
        match (&self.method, &self.equation) {
            (Method::Autoip, Some(eq)) => Ok(Some(eq.build()?)),
            _ => Ok(None),
        }
    }

    /// The sampling section with the run's seed.
    pub fn seeded_sampling(&self) -> Option<SamplingConfig> {
        self.sampling.clone().map(|s| SamplingConfig { seed: self.seed, ..s })
    }

    /// The training section with the run's seed.
    pub fn seeded_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig { seed, ..self.clone() }
    }

    /// SHA-256 of the canonical JSON form of everything except the seed.
    pub fn hash(&self) -> String {
        let mut unseeded = self.clone();
        unseeded.seed = 0;
        unseeded.train.seed = 0;
        if let Some(s) = unseeded.sampling.as_mut() {
            s.seed = 0;
        }
        let canonical = serde_json::to_string(&unseeded).expect("configs serialize");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies the command-line overrides.
    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(s) = o.mc_samples {
            self.train.mc_samples = s;
        }
        if o.mnll_noise_free {
            self.output.mnll_noise = MnllNoise::NoiseFree;
        }
    }
}

/// Settings that the command line can change on top of a config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub mc_samples: Option<usize>,
    pub mnll_noise_free: bool,
}
