use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use collogp_cli::config::ExperimentConfig;
use collogp_cli::experiments::experiment;
use collogp_cli::io::{write_json, Provenance, Table};
use collogp_cli::run::{self, prediction_table, ModelFile};
use collogp_cli::Overrides;

#[derive(Parser, Debug)]
#[command(name = "collogp", version, about = "Physics-informed GP regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for sampling and training
    #[arg(long, global = true, env = "COLLOGP_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    epochs_override: Option<usize>,
    #[arg(long, global = true)]
    mc_samples: Option<usize>,
    /// Derivative to predict: val, dt, dt2, dx2, ...
    #[arg(long, global = true)]
    deriv: Option<String>,
    /// Latent source to predict instead of u
    #[arg(long, global = true)]
    source: Option<String>,
    /// Score MNLL without the observation noise
    #[arg(long, global = true)]
    mnll_noise_free: bool,
    /// Accept inputs whose provenance does not match
    #[arg(long, global = true)]
    force: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            epochs: self.epochs_override,
            mc_samples: self.mc_samples,
            mnll_noise_free: self.mnll_noise_free,
        }
    }

    fn load_config(&self) -> Result<ExperimentConfig> {
        let path = self.config.as_deref().context("--config is required")?;
        let mut cfg = ExperimentConfig::load(path)?;
        cfg.apply_overrides(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train.csv, test.csv and colloc.csv
    Simulate,
    /// Train and write metrics.json, trace.csv, predictions.csv and model.bin
    Train {
        /// Read the data written by `simulate` instead of generating it
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Predict at the inputs of a CSV file
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        /// Output file (default: <out-dir>/predictions.csv)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against the truth
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Output file (default: <out-dir>/metrics.json)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in (or configured) experiment over several seeds
    Reproduce {
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn simulate(c: &Common) -> Result<()> {
    let cfg = c.load_config()?;
    let data = run::load_data(&cfg)?;
    let prov = Provenance::new(cfg.seed, cfg.hash());
    std::fs::create_dir_all(&c.out_dir)?;
    for (name, t) in data.tables(&prov) {
        t.write(&c.out_dir.join(name))?;
    }
    eprintln!(
        "wrote {} train, {} test and {} collocation points to {}",
        data.train.y.len(),
        data.test.y.len(),
        data.colloc.len(),
        c.out_dir.display()
    );
    Ok(())
}

fn train(c: &Common, data_dir: Option<&Path>) -> Result<()> {
    let cfg = c.load_config()?;
    let out = match data_dir {
        Some(dir) => {
            let prov = Provenance::new(cfg.seed, cfg.hash());
            run::run_on(&cfg, run::read_data_dir(dir, &prov, c.force)?)?
        }
        None => run::run(&cfg)?,
    };
    out.write(&c.out_dir)?;
    print_json(&out.result)
}

fn predict(c: &Common, model: &Path, inputs: &Path, out: Option<&Path>) -> Result<()> {
    let m = ModelFile::load(model)?;
    let queries = Table::read(inputs)?.inputs()?;
    let pred = m.predict(&queries, c.deriv.as_deref(), c.source.as_deref())?;
    let plain_value = c.source.is_none() && matches!(c.deriv.as_deref(), None | Some("val"));
    let noise = if plain_value && !c.mnll_noise_free { m.noise_var() } else { 0.0 };
    let table = prediction_table(&queries, &pred, noise, &m.provenance);
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| c.out_dir.join("predictions.csv"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    table.write(&path)?;
    eprintln!("wrote {} predictions to {}", queries.len(), path.display());
    Ok(())
}

fn evaluate(c: &Common, predictions: &Path, truth: &Path, out: Option<&Path>) -> Result<()> {
    let result = run::evaluate(
        &Table::read(predictions)?,
        &Table::read(truth)?,
        c.mnll_noise_free,
        c.force,
    )?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| c.out_dir.join("metrics.json"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_json(&path, &result)?;
    print_json(&result)
}

fn reproduce(c: &Common, id: Option<&str>, seeds: &[u64]) -> Result<()> {
    let mut cfg = match (id, &c.config) {
        (Some(id), None) => experiment(id)?,
        (None, Some(path)) => ExperimentConfig::load(path)?,
        (Some(_), Some(_)) => bail!("give either --experiment or --config, not both"),
        (None, None) => bail!("--experiment or --config is required"),
    };
    cfg.apply_overrides(&Overrides {
        seed: None,
        ..c.overrides()
    });
    cfg.validate()?;
    let summary = run::reproduce(&cfg, seeds, Some(&c.out_dir))?;
    print_json(&summary)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let c = &cli.common;
    match &cli.command {
        Command::Simulate => simulate(c),
        Command::Train { data_dir } => train(c, data_dir.as_deref()),
        Command::Predict { model, inputs, out } => predict(c, model, inputs, out.as_deref()),
        Command::Evaluate { predictions, truth, out } => evaluate(c, predictions, truth, out.as_deref()),
        Command::Reproduce { experiment, seeds } => reproduce(c, experiment.as_deref(), seeds),
    }
}
