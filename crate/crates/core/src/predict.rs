//! Posterior predictive distributions and accuracy metrics.
//!
//! Under the whitened posterior `q(f) = N(Aμ, A L Lᵀ Aᵀ)` the predictive
//! distribution of any linear functional `h` of the GP (a function value, a
//! derivative, a source value) has
//!
//! ```text
//! mean = c_hᵀ A⁻ᵀ μ
//! var  = κ(h, h) - ‖A⁻¹ c_h‖² + ‖Lᵀ A⁻¹ c_h‖²
//! ```
//!
//! where `c_h = cov(f, h)`. No inverse of `Σ` is ever formed.

use serde::{Deserialize, Serialize};

use crate::equation::EquationSpec;
use crate::error::{Error, Result};
use crate::infer::VariationalState;
use crate::kernel::{cross_cov_matrix, ArdParams, CovBlock, DerivOp, PointSet};
use crate::linalg::{cholesky, dot, solve_rows, JitterPolicy, LowerTriangular, Matrix, TriMode};
use crate::model::{build_sigma, u_blocks, BlockId, JointPriorLayout, ModelParams};
use crate::par;

/// Smallest reported predictive variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Marginal predictive moments at a set of queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Number of variances raised to [`VARIANCE_FLOOR`].
    pub floored: usize,
}

/// A trained model: everything needed to predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGP {
    spec: Option<EquationSpec>,
    layout: JointPriorLayout,
    train_x: PointSet,
    colloc: PointSet,
    params: ModelParams,
    a: LowerTriangular,
    state: VariationalState,
}

impl PosteriorGP {
    pub fn new(
        spec: Option<EquationSpec>,
        layout: JointPriorLayout,
        train_x: PointSet,
        colloc: PointSet,
        params: ModelParams,
        a: LowerTriangular,
        state: VariationalState,
    ) -> Result<Self> {
        let p = layout.total();
        if a.dim() != p || state.dim() != p {
            return Err(Error::DimensionMismatch(format!(
                "layout of size {p}, factor {}, state {}",
                a.dim(),
                state.dim()
            )));
        }
        if train_x.len() != layout.n_train() || (layout.m_colloc() > 0 && colloc.len() != layout.m_colloc()) {
            return Err(Error::DimensionMismatch("inputs do not match the layout".into()));
        }
        params.validate(&layout, spec.as_ref(), train_x.dim())?;
        Ok(PosteriorGP {
            spec,
            layout,
            train_x,
            colloc,
            params,
            a,
            state,
        })
    }

    /// The untrained posterior `μ = 0, L = I`, which equals the prior.
    pub fn prior(
        spec: Option<EquationSpec>,
        train_x: PointSet,
        colloc: PointSet,
        params: ModelParams,
        jitter: &JitterPolicy,
    ) -> Result<Self> {
        let m = if spec.is_some() { colloc.len() } else { 0 };
        let layout = JointPriorLayout::new(train_x.len(), m, spec.as_ref());
        let sigma = build_sigma(&layout, &train_x, &colloc, &params)?;
        let (a, _) = cholesky(&sigma, jitter)?;
        let state = VariationalState::prior(layout.total());
        PosteriorGP::new(spec, layout, train_x, colloc, params, a, state)
    }

    pub fn spec(&self) -> Option<&EquationSpec> {
        self.spec.as_ref()
    }

    pub fn layout(&self) -> &JointPriorLayout {
        &self.layout
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn sigma_factor(&self) -> &LowerTriangular {
        &self.a
    }

    pub fn train_inputs(&self) -> &PointSet {
        &self.train_x
    }

    pub fn colloc_inputs(&self) -> &PointSet {
        &self.colloc
    }

    pub fn dim(&self) -> usize {
        self.train_x.dim()
    }

    /// `(Aμ, A L Lᵀ Aᵀ)`, the moments of `q(f)`.
    pub fn posterior_moments(&self) -> (Vec<f64>, Matrix) {
        let mean = self.a.matvec(&self.state.mu);
        let al = self
            .a
            .as_matrix()
            .matmul(self.state.chol.as_matrix())
            .expect("square factors of equal size");
        let cov = al.matmul(&al.transpose()).expect("square").symmetrized();
        (mean, cov)
    }

    /// Rows `cov(h_q, f)` for the queries, padded with zeros to length `P`.
    fn u_cross(&self, queries: &PointSet, op: &DerivOp) -> Result<Matrix> {
        let rows = [CovBlock {
            op: op.clone(),
            points: queries.clone(),
        }];
        let cols = u_blocks(&self.layout, &self.train_x, &self.colloc);
        let c = cross_cov_matrix(&rows, &cols, &self.params.kernel_u)?;
        Ok(pad(&c, 0, self.layout.total()))
    }

    fn source_cross(&self, queries: &PointSet, i: usize) -> Result<Matrix> {
        let rows = [CovBlock {
            op: DerivOp::value(self.dim()),
            points: queries.clone(),
        }];
        let cols = [CovBlock {
            op: DerivOp::value(self.dim()),
            points: self.colloc.clone(),
        }];
        let c = cross_cov_matrix(&rows, &cols, self.params.source_kernel(i, &self.layout))?;
        Ok(pad(&c, self.layout.range(BlockId::Source(i)).start, self.layout.total()))
    }

    fn check_queries(&self, queries: &PointSet) -> Result<()> {
        if queries.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "queries of dimension {} for a model of dimension {}",
                queries.dim(),
                self.dim()
            )));
        }
        if queries.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query points".into()));
        }
        Ok(())
    }

    fn moments(&self, cross: &Matrix, prior_var: impl Fn(usize) -> f64 + Sync) -> Result<GaussianPrediction> {
        let w = self.a.solve(&self.state.mu, TriMode::LowerTransposed)?;
        let z = solve_rows(&self.a, cross, TriMode::Lower)?;
        let out = par::map_range(cross.rows(), |q| {
            let mean = dot(cross.row(q), &w);
            let zq = z.row(q);
            let lt = self.state.chol.t_matvec(zq);
            let var = prior_var(q) - dot(zq, zq) + dot(&lt, &lt);
            (mean, var)
        });
        let mut floored = 0;
        let mut mean = Vec::with_capacity(out.len());
        let mut variance = Vec::with_capacity(out.len());
        for (m, v) in out {
            mean.push(m);
            if v < VARIANCE_FLOOR {
                floored += 1;
                variance.push(VARIANCE_FLOOR);
            } else {
                variance.push(v);
            }
        }
        crate::error::ensure_finite(&mean, "predictive mean")?;
        crate::error::ensure_finite(&variance, "predictive variance")?;
        Ok(GaussianPrediction {
            mean,
            variance,
            floored,
        })
    }

    /// Predictive distribution of `op` applied to `u` at each query.
    pub fn predict_u(&self, queries: &PointSet, op: &DerivOp) -> Result<GaussianPrediction> {
        self.check_queries(queries)?;
        if op.dim() != self.dim() {
            return Err(Error::DimensionMismatch("operator dimension".into()));
        }
        let cross = self.u_cross(queries, op)?;
        let kern = self.params.kernel_u.prepare();
        self.moments(&cross, |q| {
            let z = queries.point(q);
            kern.deriv(op.orders(), op.orders(), z, z)
        })
    }

    /// Predictive means only, which is much cheaper than [`Self::predict_u`].
    pub fn predict_mean_u(&self, queries: &PointSet, op: &DerivOp) -> Result<Vec<f64>> {
        self.check_queries(queries)?;
        let cross = self.u_cross(queries, op)?;
        let w = self.a.solve(&self.state.mu, TriMode::LowerTransposed)?;
        cross.matvec(&w)
    }

    /// Predictive distribution of latent source `index`.
    pub fn predict_source(&self, queries: &PointSet, index: usize) -> Result<GaussianPrediction> {
        self.check_queries(queries)?;
        if index >= self.layout.n_sources() {
            return Err(Error::IndexOutOfRange(format!(
                "source {index} of {}",
                self.layout.n_sources()
            )));
        }
        let cross = self.source_cross(queries, index)?;
        let kern = self.params.source_kernel(index, &self.layout).prepare();
        self.moments(&cross, |q| {
            let z = queries.point(q);
            kern.eval(z, z)
        })
    }

    /// Posterior covariance of `D₁u(z1)` and `D₂u(z2)`.
    pub fn posterior_cov_u(&self, op1: &DerivOp, z1: &[f64], op2: &DerivOp, z2: &[f64]) -> Result<f64> {
        let q1 = PointSet::new(self.dim(), z1.to_vec())?;
        let q2 = PointSet::new(self.dim(), z2.to_vec())?;
        self.check_queries(&q1)?;
        self.check_queries(&q2)?;
        let c1 = self.u_cross(&q1, op1)?;
        let c2 = self.u_cross(&q2, op2)?;
        let y1 = self.a.solve(c1.row(0), TriMode::Lower)?;
        let y2 = self.a.solve(c2.row(0), TriMode::Lower)?;
        let l1 = self.state.chol.t_matvec(&y1);
        let l2 = self.state.chol.t_matvec(&y2);
        let prior = crate::kernel::deriv_cov(op1, op2, z1, z2, &self.params.kernel_u)?;
        Ok(prior - dot(&y1, &y2) + dot(&l1, &l2))
    }

    /// The induced posterior kernel `ρ(z1, z2) = cov(u(z1), u(z2) | data)`.
    pub fn induced_kernel_rho(&self, z1: &[f64], z2: &[f64]) -> Result<f64> {
        let id = DerivOp::value(self.dim());
        self.posterior_cov_u(&id, z1, &id, z2)
    }

    /// Kernel of source `i` in effect.
    pub fn source_kernel(&self, i: usize) -> &ArdParams {
        self.params.source_kernel(i, &self.layout)
    }
}

fn pad(c: &Matrix, offset: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(c.rows(), width);
    for i in 0..c.rows() {
        out.row_mut(i)[offset..offset + c.cols()].copy_from_slice(c.row(i));
    }
    out
}

/// Root-mean-square error.
pub fn rmse(pred_mean: &[f64], truth: &[f64]) -> Result<f64> {
    if pred_mean.len() != truth.len() || truth.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} targets",
            pred_mean.len(),
            truth.len()
        )));
    }
    let sq: f64 = pred_mean.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / truth.len() as f64).sqrt())
}

/// Mean negative log-likelihood of `truth` under the predictive Gaussians
/// widened by `obs_noise_var`.
pub fn mnll(pred: &GaussianPrediction, obs_noise_var: f64, truth: &[f64]) -> Result<f64> {
    if pred.mean.len() != truth.len() || pred.variance.len() != truth.len() || truth.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} targets",
            pred.mean.len(),
            truth.len()
        )));
    }
    if !(obs_noise_var >= 0.0) {
        return Err(Error::schema("obs_noise_var", "must be non-negative"));
    }
    let total: f64 = truth
        .iter()
        .zip(pred.mean.iter().zip(&pred.variance))
        .map(|(t, (m, v))| {
            let s2 = v + obs_noise_var;
            0.5 * (2.0 * std::f64::consts::PI * s2).ln() + (t - m) * (t - m) / (2.0 * s2)
        })
        .sum();
    Ok(total / truth.len() as f64)
}
