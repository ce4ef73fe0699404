//! Exact GP regression: evidence maximization and closed-form prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{is_eval_epoch, AdamState, EvalRecord, EvalSet, MnllNoise, TrainConfig, TrainTrace};
use crate::kernel::{cov_matrix_with_grad, cross_cov_matrix, ArdParams, CovBlock, DerivOp, PointSet};
use crate::linalg::{cholesky, cholesky_inverse, dot, solve_rows, JitterPolicy, LowerTriangular, Matrix, TriMode};
use crate::model::{ArdGrad, DEFAULT_BETA, HALF_LN_2PI};
use crate::predict::{mnll, rmse, GaussianPrediction, VARIANCE_FLOOR};

/// `y ~ N(0, K + β⁻¹ I)` with an SE-ARD `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GprModel {
    pub kernel: ArdParams,
    pub log_beta: f64,
    train_x: PointSet,
    y: Vec<f64>,
    #[serde(default)]
    jitter: JitterPolicy,
}

/// Evidence gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GprGrad {
    pub kernel: ArdGrad,
    pub log_beta: f64,
}

struct Factored {
    l: LowerTriangular,
    alpha: Vec<f64>,
    jitter: f64,
}

impl GprModel {
    pub fn new(kernel: ArdParams, log_beta: f64, train_x: PointSet, y: Vec<f64>) -> Result<Self> {
        kernel.validate()?;
        if kernel.dim() != train_x.dim() {
            return Err(Error::DimensionMismatch(format!(
                "kernel over {} inputs, data of dimension {}",
                kernel.dim(),
                train_x.dim()
            )));
        }
        if train_x.len() != y.len() || y.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs with {} targets",
                train_x.len(),
                y.len()
            )));
        }
        crate::error::ensure_finite(&y, "targets")?;
        crate::error::ensure_finite(train_x.as_slice(), "inputs")?;
        crate::error::ensure_finite(&[log_beta], "log_beta")?;
        Ok(GprModel {
            kernel,
            log_beta,
            train_x,
            y,
            jitter: JitterPolicy::default(),
        })
    }

    /// Unit kernel and the default noise precision.
    pub fn with_defaults(train_x: PointSet, y: Vec<f64>) -> Result<Self> {
        GprModel::new(ArdParams::unit(train_x.dim()), DEFAULT_BETA.ln(), train_x, y)
    }

    pub fn with_jitter(mut self, jitter: JitterPolicy) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn train_inputs(&self) -> &PointSet {
        &self.train_x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn dim(&self) -> usize {
        self.train_x.dim()
    }

    fn blocks(&self) -> [CovBlock; 1] {
        [CovBlock {
            op: DerivOp::value(self.dim()),
            points: self.train_x.clone(),
        }]
    }

    fn factor(&self, k: &Matrix) -> Result<Factored> {
        let mut ky = k.clone();
        ky.add_diagonal(1.0 / self.beta());
        let (l, jitter) = cholesky(&ky, &self.jitter)?;
        let mut alpha = self.y.clone();
        l.solve_in_place(&mut alpha, TriMode::Lower)?;
        l.solve_in_place(&mut alpha, TriMode::LowerTransposed)?;
        Ok(Factored { l, alpha, jitter })
    }

    fn log_density(&self, f: &Factored) -> f64 {
        -0.5 * dot(&self.y, &f.alpha) - f.l.sum_log_diagonal() - self.y.len() as f64 * HALF_LN_2PI
    }
}

/// `log N(y | 0, K + β⁻¹ I)`.
pub fn evidence(m: &GprModel) -> Result<f64> {
    let (k, _) = cov_matrix_with_grad(&m.blocks(), &m.kernel)?;
    let f = m.factor(&k)?;
    Ok(m.log_density(&f))
}

/// Evidence and its gradient by the trace identity
/// `∂E/∂θ = ½ tr((ααᵀ − K_y⁻¹) ∂K_y/∂θ)`.
pub fn evidence_grad(m: &GprModel) -> Result<(f64, GprGrad)> {
    let (k, dk) = cov_matrix_with_grad(&m.blocks(), &m.kernel)?;
    let f = m.factor(&k)?;
    let value = m.log_density(&f);
    let n = m.y.len();
    let inv = cholesky_inverse(&f.l)?;
    let mut w = Matrix::from_fn(n, n, |i, j| 0.5 * (f.alpha[i] * f.alpha[j] - inv[(i, j)]));
    if f.jitter > 0.0 && m.jitter.scale_by_mean_diag {
        let tr: f64 = w.diagonal().iter().sum();
        w.add_diagonal(f.jitter * tr / n as f64);
    }
    let grad = GprGrad {
        kernel: ArdGrad {
            d_log_s: dk.iter().map(|d| w.inner(d)).collect(),
            d_log_amp: w.inner(&k),
        },
        log_beta: -w.diagonal().iter().sum::<f64>() / m.beta(),
    };
    Ok((value, grad))
}

/// Predictive moments of the latent function at the queries.
pub fn gpr_predict(m: &GprModel, queries: &PointSet) -> Result<GaussianPrediction> {
    if queries.dim() != m.dim() {
        return Err(Error::DimensionMismatch(format!(
            "queries of dimension {} for a model of dimension {}",
            queries.dim(),
            m.dim()
        )));
    }
    crate::error::ensure_finite(queries.as_slice(), "query points")?;
    let (k, _) = cov_matrix_with_grad(&m.blocks(), &m.kernel)?;
    let f = m.factor(&k)?;
    let rows = [CovBlock {
        op: DerivOp::value(m.dim()),
        points: queries.clone(),
    }];
    let cross = cross_cov_matrix(&rows, &m.blocks(), &m.kernel)?;
    let v = solve_rows(&f.l, &cross, TriMode::Lower)?;
    let amp = m.kernel.amp();
    let mut floored = 0;
    let mut mean = Vec::with_capacity(queries.len());
    let mut variance = Vec::with_capacity(queries.len());
    for q in 0..queries.len() {
        mean.push(dot(cross.row(q), &f.alpha));
        let var = amp - dot(v.row(q), v.row(q));
        if var < VARIANCE_FLOOR {
            floored += 1;
            variance.push(VARIANCE_FLOOR);
        } else {
            variance.push(var);
        }
    }
    crate::error::ensure_finite(&mean, "predictive mean")?;
    Ok(GaussianPrediction {
        mean,
        variance,
        floored,
    })
}

/// Test RMSE and MNLL of an exact GP.
pub fn gpr_evaluate(m: &GprModel, eval: &EvalSet, epoch: usize) -> Result<EvalRecord> {
    let pred = gpr_predict(m, &eval.x)?;
    let noise = match eval.noise {
        MnllNoise::Learned => 1.0 / m.beta(),
        MnllNoise::NoiseFree => 0.0,
    };
    Ok(EvalRecord {
        epoch,
        rmse: rmse(&pred.mean, &eval.y)?,
        mnll: mnll(&pred, noise, &eval.y)?,
    })
}

/// Adam ascent on the evidence with the same evaluation protocol as
/// [`crate::infer::train`]. `learn_v` and `learn_coeffs` are ignored.
pub fn gpr_train(m: &GprModel, cfg: &TrainConfig, eval: Option<&EvalSet>) -> Result<TrainTrace<GprModel>> {
    cfg.validate()?;
    let mut model = m.clone().with_jitter(cfg.jitter);
    let d = model.dim();
    let mut flat: Vec<f64> = model.kernel.log_s.clone();
    flat.push(model.kernel.log_amp);
    flat.push(model.log_beta);
    let mut adam = AdamState::new(flat.len());
    let mut trace = TrainTrace::new(model.clone());
    let mut grad = vec![0.0; flat.len()];
    for epoch in 1..=cfg.epochs {
        let mut step = || -> Result<()> {
            let (value, g) = evidence_grad(&model)?;
            trace.objective.push(value);
            for k in 0..d {
                grad[k] = if cfg.learn_kernel { -g.kernel.d_log_s[k] } else { 0.0 };
            }
            grad[d] = if cfg.learn_amp { -g.kernel.d_log_amp } else { 0.0 };
            grad[d + 1] = if cfg.learn_beta { -g.log_beta } else { 0.0 };
            crate::error::ensure_finite(&grad, "evidence gradient")?;
            adam.step(&mut flat, &grad, cfg.lr)?;
            crate::error::ensure_finite(&flat, "parameters")?;
            model.kernel.log_s.copy_from_slice(&flat[..d]);
            model.kernel.log_amp = flat[d];
            model.log_beta = flat[d + 1];
            if is_eval_epoch(epoch, cfg) {
                if let Some(eval) = eval {
                    let rec = gpr_evaluate(&model, eval, epoch)?;
                    trace.record(rec, &model);
                    trace.last_eval = Some(rec);
                }
            }
            Ok(())
        };
        step().map_err(|e| e.at_epoch(epoch))?;
    }
    trace.last = model;
    Ok(trace)
}
