//! The experiment pipeline behind the subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use collogp::baseline::{gpr_predict, gpr_train, GprModel};
use collogp::equation::{parse_feature, EquationSpec};
use collogp::infer::{train, EvalRecord, EvalSet, MnllNoise, Problem, TrainTrace};
use collogp::kernel::{ArdParams, DerivOp, PointSet};
use collogp::model::{ModelParams, DEFAULT_BETA};
use collogp::predict::{mnll, rmse, GaussianPrediction, PosteriorGP};
use collogp::simulate::{integrate_pendulum, sample_collocation, sample_dataset, solve_allen_cahn, GridSolution, Samples, Solution};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, Method};
use crate::io::{format_float, points_table, read_model, write_json, write_model, Provenance, Table};

/// Training, test and collocation inputs of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Data {
    pub train: Samples,
    pub test: Samples,
    pub colloc: PointSet,
}

impl Data {
    pub fn dim(&self) -> usize {
        self.train.x.dim()
    }

    pub fn tables(&self, prov: &Provenance) -> [(&'static str, Table); 3] {
        let mut train = points_table(&self.train.x, &[("y", &self.train.y)]);
        let mut test = points_table(&self.test.x, &[("y", &self.test.y)]);
        let mut colloc = points_table(&self.colloc, &[]);
        for t in [&mut train, &mut test, &mut colloc] {
            t.provenance = Some(prov.clone());
        }
        [("train.csv", train), ("test.csv", test), ("colloc.csv", colloc)]
    }
}

fn samples(t: &Table) -> Result<Samples> {
    let y = t.column("y").context("table needs a `y` column")?;
    Ok(Samples { x: t.inputs()?, y })
}

/// Reads a long-format `t,x,u` grid table.
pub fn read_grid(path: &Path) -> Result<GridSolution> {
    let t = Table::read(path)?;
    let (ts, xs, us) = match (t.column("t"), t.column("x"), t.column("u")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => bail!("{}: grid tables need columns t, x and u", path.display()),
    };
    let axis = |v: &[f64]| {
        let mut a = v.to_vec();
        a.sort_by(f64::total_cmp);
        a.dedup();
        a
    };
    let (t_axis, x_axis) = (axis(&ts), axis(&xs));
    let mut u = vec![f64::NAN; t_axis.len() * x_axis.len()];
    for ((tv, xv), uv) in ts.iter().zip(&xs).zip(&us) {
        let i = t_axis.binary_search_by(|a| a.total_cmp(tv)).expect("value on its own axis");
        let j = x_axis.binary_search_by(|a| a.total_cmp(xv)).expect("value on its own axis");
        u[i * x_axis.len() + j] = *uv;
    }
    ensure!(
        u.iter().all(|v| !v.is_nan()) && us.len() == u.len(),
        "{}: grid must list every (t, x) pair exactly once",
        path.display()
    );
    Ok(GridSolution::new(t_axis, x_axis, u)?)
}

/// Generates or loads the data of a run.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    let from_solution = |sol: &dyn Solution| -> Result<Data> {
        let sampling = cfg.seeded_sampling().context("`sampling` is required")?;
        let ds = sample_dataset(sol, &sampling)?;
        let colloc = sample_collocation(sampling.colloc_range(), sampling.m_colloc, cfg.seed);
        Ok(Data {
            train: ds.train,
            test: ds.test,
            colloc,
        })
    };
    match &cfg.data {
        DataSource::Pendulum { params, t_end } => from_solution(&integrate_pendulum(params, *t_end)?),
        DataSource::AllenCahn { params } => from_solution(&solve_allen_cahn(params)?),
        DataSource::Grid { path } => from_solution(&read_grid(path)?),
        DataSource::Csv {
            train,
            test,
            colloc,
            colloc_range,
            m_colloc,
        } => {
            let train = samples(&Table::read(train)?)?;
            let test = samples(&Table::read(test)?)?;
            ensure!(train.x.dim() == test.x.dim(), "train and test inputs differ in dimension");
            let colloc = match (colloc, colloc_range) {
                (Some(path), _) => Table::read(path)?.inputs()?,
                (None, Some(range)) => sample_collocation(range, *m_colloc, cfg.seed),
                (None, None) => PointSet::empty(train.x.dim()),
            };
            Ok(Data { train, test, colloc })
        }
    }
}

/// Reads `train.csv`, `test.csv` and `colloc.csv` written by `simulate`.
pub fn read_data_dir(dir: &Path, expect: &Provenance, force: bool) -> Result<Data> {
    let mut tables = Vec::new();
    for name in ["train.csv", "test.csv", "colloc.csv"] {
        let path = dir.join(name);
        let t = Table::read(&path)?;
        check_provenance(&path, t.provenance.as_ref(), expect, force)?;
        tables.push(t);
    }
    Ok(Data {
        train: samples(&tables[0])?,
        test: samples(&tables[1])?,
        colloc: tables[2].inputs()?,
    })
}

fn same_run(a: &Provenance, b: &Provenance) -> bool {
    a.config_hash == b.config_hash && a.seed == b.seed
}

fn check_provenance(path: &Path, got: Option<&Provenance>, expect: &Provenance, force: bool) -> Result<()> {
    if force || got.is_some_and(|g| same_run(g, expect)) {
        return Ok(());
    }
    match got {
        Some(g) => bail!(
            "{} comes from config {} seed {}, expected config {} seed {} (use --force to override)",
            path.display(),
            g.config_hash,
            g.seed,
            expect.config_hash,
            expect.seed
        ),
        None => bail!("{} carries no provenance (use --force to override)", path.display()),
    }
}

/// A fitted model of either kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "model", rename_all = "snake_case")]
pub enum TrainedModel {
    Autoip(PosteriorGP),
    Gpr(GprModel),
}

/// Contents of `model.bin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub provenance: Provenance,
    pub input_names: Vec<String>,
    pub model: TrainedModel,
}

impl ModelFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_model(path, self)
    }

    /// Loads a model file and checks the model's internal consistency.
    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = read_model(path)?;
        match &file.model {
            TrainedModel::Autoip(p) => {
                PosteriorGP::new(
                    p.spec().cloned(),
                    p.layout().clone(),
                    p.train_inputs().clone(),
                    p.colloc_inputs().clone(),
                    p.params().clone(),
                    p.sigma_factor().clone(),
                    p.state().clone(),
                )
                .with_context(|| format!("{}: inconsistent model", path.display()))?;
            }
            TrainedModel::Gpr(m) => {
                GprModel::new(m.kernel.clone(), m.log_beta, m.train_inputs().clone(), m.targets().to_vec())
                    .with_context(|| format!("{}: inconsistent model", path.display()))?;
            }
        }
        Ok(file)
    }

    pub fn noise_var(&self) -> f64 {
        match &self.model {
            TrainedModel::Autoip(p) => 1.0 / p.params().beta(),
            TrainedModel::Gpr(m) => 1.0 / m.beta(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            TrainedModel::Autoip(p) => p.dim(),
            TrainedModel::Gpr(m) => m.dim(),
        }
    }

    /// Predicts `u` (or one of its derivatives, named like `dt2`) or a
    /// latent source.
    pub fn predict(&self, queries: &PointSet, deriv: Option<&str>, source: Option<&str>) -> Result<GaussianPrediction> {
        let d = self.dim();
        ensure!(queries.dim() == d, "queries have {} columns, the model {}", queries.dim(), d);
        let op = match deriv {
            None | Some("val") => DerivOp::value(d),
            Some(name) => parse_feature(name, &self.input_names)?,
        };
        match (&self.model, source) {
            (TrainedModel::Autoip(p), None) => Ok(p.predict_u(queries, &op)?),
            (TrainedModel::Autoip(p), Some(name)) => {
                ensure!(op.is_value(), "--deriv cannot be combined with --source");
                let spec = p.spec().context("model has no equation, hence no sources")?;
                let i = spec
                    .source_index(name)
                    .with_context(|| format!("model has no source `{name}`"))?;
                Ok(p.predict_source(queries, i)?)
            }
            (TrainedModel::Gpr(m), None) => {
                if !op.is_value() {
                    return Err(collogp::Error::UnsupportedOrder(format!(
                        "the regression baseline predicts values only, not `{}`",
                        deriv.unwrap_or_default()
                    ))
                    .into());
                }
                Ok(gpr_predict(m, queries)?)
            }
            (TrainedModel::Gpr(_), Some(_)) => bail!("the regression baseline has no latent sources"),
        }
    }
}

/// Names of the input dimensions: the equation's, else `t` / `t, x`.
pub fn input_names(spec: Option<&EquationSpec>, d: usize) -> Vec<String> {
    match spec {
        Some(s) => s.input_names.clone(),
        None => match d {
            1 => vec!["t".into()],
            2 => vec!["t".into(), "x".into()],
            _ => (1..=d).map(|k| format!("x{k}")).collect(),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// At the epoch with the lowest test RMSE.
    pub rmse: f64,
    pub mnll: f64,
    pub best_epoch: usize,
    /// After the last epoch.
    pub final_rmse: f64,
    pub final_mnll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub log_s: Vec<f64>,
    pub log_amp: f64,
}

impl From<&ArdParams> for KernelReport {
    fn from(k: &ArdParams) -> Self {
        KernelReport {
            log_s: k.log_s.clone(),
            log_amp: k.log_amp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedParams {
    pub kernel: KernelReport,
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    pub coeffs: BTreeMap<String, f64>,
    pub source_kernels: BTreeMap<String, KernelReport>,
}

impl LearnedParams {
    fn autoip(p: &PosteriorGP) -> Self {
        let params: &ModelParams = p.params();
        let (coeffs, source_kernels) = match p.spec() {
            Some(spec) => (
                params.coeff_map(spec),
                spec.sources
                    .iter()
                    .zip(&params.kernel_g)
                    .map(|(s, k)| (s.name.clone(), k.into()))
                    .collect(),
            ),
            None => Default::default(),
        };
        LearnedParams {
            kernel: (&params.kernel_u).into(),
            beta: params.beta(),
            v: Some(params.v()),
            coeffs,
            source_kernels,
        }
    }

    fn gpr(m: &GprModel) -> Self {
        LearnedParams {
            kernel: (&m.kernel).into(),
            beta: m.beta(),
            v: None,
            coeffs: BTreeMap::new(),
            source_kernels: BTreeMap::new(),
        }
    }
}

/// Contents of `metrics.json` for a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    pub method: Method,
    pub metrics: Metrics,
    /// Of the selected (best-RMSE) model.
    pub params: LearnedParams,
    pub final_params: LearnedParams,
    /// ELBO (or log evidence) at the first and the last epoch.
    pub initial_objective: f64,
    pub final_objective: f64,
    pub provenance: Provenance,
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub data: Data,
    pub result: RunResult,
    pub trace: Table,
    pub predictions: Table,
    pub model: ModelFile,
}

impl RunOutput {
    pub fn provenance(&self) -> &Provenance {
        &self.result.provenance
    }

    /// Writes the run into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.toml"), self.config.to_toml())?;
        for (name, t) in self.data.tables(self.provenance()) {
            t.write(&dir.join(name))?;
        }
        write_json(&dir.join("metrics.json"), &self.result)?;
        self.trace.write(&dir.join("trace.csv"))?;
        if self.config.output.write_predictions {
            self.predictions.write(&dir.join("predictions.csv"))?;
        }
        if self.config.output.write_model {
            self.model.save(&dir.join("model.bin"))?;
        }
        Ok(())
    }
}

fn trace_table<M>(trace: &TrainTrace<M>, objective: &str, prov: &Provenance) -> Table {
    let mut t = Table::new(vec!["epoch".into(), objective.into(), "rmse".into(), "mnll".into()]);
    let mut evals = trace.evals.iter().peekable();
    for (k, obj) in trace.objective.iter().enumerate() {
        let epoch = k + 1;
        let (r, m) = match evals.peek() {
            Some(e) if e.epoch == epoch => {
                let e = evals.next().expect("peeked");
                (e.rmse, e.mnll)
            }
            _ => (f64::NAN, f64::NAN),
        };
        t.rows.push(vec![epoch as f64, *obj, r, m]);
    }
    t.provenance = Some(prov.clone());
    t
}

fn metrics<M>(trace: &TrainTrace<M>) -> Result<Metrics> {
    let best = trace.best.as_ref().context("training recorded no evaluation")?;
    let last: EvalRecord = trace.last_eval.context("training recorded no evaluation")?;
    let m = Metrics {
        rmse: best.record.rmse,
        mnll: best.record.mnll,
        best_epoch: best.record.epoch,
        final_rmse: last.rmse,
        final_mnll: last.mnll,
    };
    ensure!(
        [m.rmse, m.mnll, m.final_rmse, m.final_mnll].iter().all(|v| v.is_finite()),
        "non-finite metrics {m:?}"
    );
    Ok(m)
}

/// Trains the configured model on `data` and scores it on the test set.
pub fn run_on(cfg: &ExperimentConfig, data: Data) -> Result<RunOutput> {
    cfg.validate()?;
    let prov = Provenance::new(cfg.seed, cfg.hash());
    let tc = cfg.seeded_train();
    let eval = EvalSet {
        x: data.test.x.clone(),
        y: data.test.y.clone(),
        noise: cfg.output.mnll_noise,
    };
    let spec = cfg.equation_spec()?;
    let names = input_names(spec.as_ref(), data.dim());
    let init = &cfg.model;
    let d = data.dim();
    if let Some(s) = &init.log_s {
        ensure!(s.len() == d, "model.log_s has {} entries for {d} inputs", s.len());
    }
    let (result, trace, model) = match cfg.method {
        Method::Autoip => {
            let spec = spec.context("autoip needs an equation")?;
            ensure!(spec.dim() == d, "equation has {} inputs, the data {d}", spec.dim());
            let problem = Problem::new(Some(spec), data.train.x.clone(), data.train.y.clone(), data.colloc.clone())?;
            let mut params = problem.initial_params();
            if let Some(s) = &init.log_s {
                params.kernel_u.log_s = s.clone();
            }
            if let Some(a) = init.log_amp {
                params.kernel_u.log_amp = a;
            }
            if let Some(b) = init.log_beta {
                params.log_beta = b;
            }
            if let Some(v) = init.log_v {
                params.log_v = v;
            }
            params.sync_shared(problem.layout());
            let state = collogp::infer::VariationalState::prior(problem.layout().total());
            let tr = train(&problem, Some((state, params)), &tc, Some(&eval))?;
            let selected = tr.selected().clone();
            let result = RunResult {
                experiment: cfg.id.clone(),
                method: cfg.method,
                metrics: metrics(&tr)?,
                params: LearnedParams::autoip(&selected),
                final_params: LearnedParams::autoip(&tr.last),
                initial_objective: tr.objective[0],
                final_objective: *tr.objective.last().expect("at least one epoch"),
                provenance: prov.clone(),
            };
            (result, trace_table(&tr, "elbo", &prov), TrainedModel::Autoip(selected))
        }
        Method::Gpr => {
            let kernel = ArdParams::new(
                init.log_s.clone().unwrap_or_else(|| vec![0.0; d]),
                init.log_amp.unwrap_or(0.0),
            )?;
            let m = GprModel::new(
                kernel,
                init.log_beta.unwrap_or(DEFAULT_BETA.ln()),
                data.train.x.clone(),
                data.train.y.clone(),
            )?;
            let tr = gpr_train(&m, &tc, Some(&eval))?;
            let selected = tr.selected().clone();
            let result = RunResult {
                experiment: cfg.id.clone(),
                method: cfg.method,
                metrics: metrics(&tr)?,
                params: LearnedParams::gpr(&selected),
                final_params: LearnedParams::gpr(&tr.last),
                initial_objective: tr.objective[0],
                final_objective: *tr.objective.last().expect("at least one epoch"),
                provenance: prov.clone(),
            };
            (result, trace_table(&tr, "evidence", &prov), TrainedModel::Gpr(selected))
        }
    };
    let model = ModelFile {
        provenance: prov.clone(),
        input_names: names,
        model,
    };
    let pred = model.predict(&data.test.x, None, None)?;
    let noise = match cfg.output.mnll_noise {
        MnllNoise::Learned => model.noise_var(),
        MnllNoise::NoiseFree => 0.0,
    };
    let predictions = prediction_table(&data.test.x, &pred, noise, &prov);
    Ok(RunOutput {
        config: cfg.clone(),
        data,
        result,
        trace,
        predictions,
        model,
    })
}

/// Generates the data and trains.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_on(cfg, load_data(cfg)?)
}

/// `x0.., mean, var` with the observation noise variance that MNLL adds
/// recorded on the provenance line.
pub fn prediction_table(x: &PointSet, pred: &GaussianPrediction, noise_var: f64, prov: &Provenance) -> Table {
    let mut t = points_table(x, &[("mean", &pred.mean), ("var", &pred.variance)]);
    t.provenance = Some(prov.clone());
    t.meta.push(("noise_var".into(), format_float(noise_var)));
    t
}

/// Contents of `metrics.json` written by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub rmse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mnll: Option<f64>,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn truth_column(t: &Table) -> Result<Vec<f64>> {
    ["y", "u", "mean"]
        .iter()
        .find_map(|c| t.column(c))
        .or_else(|| t.header.last().and_then(|c| t.column(c)))
        .context("truth table has no columns")
}

/// Scores `predictions` against `truth`. Files from different runs are
/// refused unless `force`.
pub fn evaluate(predictions: &Table, truth: &Table, noise_free: bool, force: bool) -> Result<EvalResult> {
    if !force {
        match (&predictions.provenance, &truth.provenance) {
            (Some(a), Some(b)) if same_run(a, b) => {}
            (Some(a), Some(b)) => bail!(
                "provenance differs: predictions from config {} seed {}, truth from config {} seed {} (use --force to override)",
                a.config_hash,
                a.seed,
                b.config_hash,
                b.seed
            ),
            _ => bail!("predictions or truth carry no provenance (use --force to override)"),
        }
    }
    let mean = predictions.column("mean").context("predictions need a `mean` column")?;
    let y = truth_column(truth)?;
    let r = rmse(&mean, &y)?;
    if !force {
        if let (Ok(a), Ok(b)) = (predictions.inputs(), truth.inputs()) {
            ensure!(a == b, "predictions and truth are at different inputs (use --force to override)");
        }
    }
    let noise = if noise_free {
        0.0
    } else {
        predictions.meta("noise_var").map(str::parse).transpose()?.unwrap_or(0.0)
    };
    let m = match predictions.column("var") {
        Some(variance) => Some(mnll(
            &GaussianPrediction {
                mean: mean.clone(),
                variance,
                floored: 0,
            },
            noise,
            &y,
        )?),
        None => None,
    };
    Ok(EvalResult {
        rmse: r,
        mnll: m,
        n: y.len(),
        provenance: predictions.provenance.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (zero for a single run).
    pub std: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Stat {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub rmse: f64,
    pub mnll: f64,
    pub best_epoch: usize,
    pub final_rmse: f64,
    pub final_mnll: f64,
    pub coeffs: BTreeMap<String, f64>,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    pub method: Method,
    pub config_hash: String,
    pub version: String,
    pub runs: Vec<SeedSummary>,
    pub rmse: Stat,
    pub mnll: Stat,
    /// Estimated equation coefficients (e.g. the damping `b`).
    pub coeffs: BTreeMap<String, Stat>,
}

/// Runs one seed per entry of `seeds`, writing each into `out/seed-<s>`
/// when `out` is given, and summarizes them.
pub fn reproduce(cfg: &ExperimentConfig, seeds: &[u64], out: Option<&Path>) -> Result<Summary> {
    ensure!(!seeds.is_empty(), "no seeds");
    let runs = collogp::par::map_slice(seeds, |&seed| -> Result<SeedSummary> {
        let run = run(&cfg.with_seed(seed)).with_context(|| format!("seed {seed}"))?;
        if let Some(dir) = out {
            run.write(&dir.join(format!("seed-{seed}")))?;
        }
        let m = run.result.metrics;
        Ok(SeedSummary {
            seed,
            rmse: m.rmse,
            mnll: m.mnll,
            best_epoch: m.best_epoch,
            final_rmse: m.final_rmse,
            final_mnll: m.final_mnll,
            coeffs: run.result.params.coeffs,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&SeedSummary) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
    let mut coeffs = BTreeMap::new();
    for name in runs[0].coeffs.keys() {
        coeffs.insert(name.clone(), col(&|r| r.coeffs[name]));
    }
    let summary = Summary {
        experiment: cfg.id.clone(),
        method: cfg.method,
        config_hash: cfg.hash(),
        version: crate::io::VERSION.to_string(),
        rmse: col(&|r| r.rmse),
        mnll: col(&|r| r.mnll),
        coeffs,
        runs,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(summary)
}
