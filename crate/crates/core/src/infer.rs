//! Whitened stochastic variational inference.
//!
//! The latent vector is written `f = A η` with `A = chol(Σ)`, so the prior
//! of `η` is standard normal regardless of the kernel parameters. The
//! posterior of `η` is approximated by `N(μ, L Lᵀ)` and the evidence lower
//! bound
//!
//! ```text
//! ELBO = -KL(N(μ, LLᵀ) ‖ N(0, I)) + E_q[log p(y | f) + log p(0 | f)]
//! ```
//!
//! is estimated with reparameterized samples `η = μ + L ε` and maximized
//! with Adam over `μ`, `L`, the kernel parameters, the noise and virtual
//! variances, and the equation coefficients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::equation::{CompiledResidual, EquationSpec};
use crate::error::{Error, Result};
use crate::kernel::PointSet;
use crate::linalg::{cholesky, cholesky_backward, dot, JitterPolicy, LowerTriangular, Matrix};
use crate::model::{
    build_sigma_with_grad, data_loglik_grad, sigma_vjp, virtual_loglik_grad, ArdGrad,
    JointPriorLayout, LatentVector, ModelParams, SigmaGrad,
};
use crate::par;
use crate::predict::{mnll, rmse, PosteriorGP};
use crate::rng::{SeedStream, StreamRng};

/// The whitened variational posterior `q(η) = N(μ, L Lᵀ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub(crate) mu: Vec<f64>,
    pub(crate) chol: LowerTriangular,
}

impl VariationalState {
    pub fn new(mu: Vec<f64>, chol: LowerTriangular) -> Result<Self> {
        if mu.len() != chol.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mean of length {} with a {}x{} factor",
                mu.len(),
                chol.dim(),
                chol.dim()
            )));
        }
        if let Some(i) = chol.diagonal().iter().position(|&d| !(d > 0.0)) {
            return Err(Error::SingularDiagonal(i));
        }
        crate::error::ensure_finite(&mu, "variational mean")?;
        crate::error::ensure_finite(chol.as_matrix().as_slice(), "variational factor")?;
        Ok(VariationalState { mu, chol })
    }

    /// `μ = 0, L = I`: the posterior starts at the prior.
    pub fn prior(p: usize) -> Self {
        VariationalState {
            mu: vec![0.0; p],
            chol: LowerTriangular::identity(p),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn chol(&self) -> &LowerTriangular {
        &self.chol
    }
}

/// `KL(N(μ, LLᵀ) ‖ N(0, I)) = ½(‖μ‖² + ‖L‖²_F - P - 2 Σ log L_ii)`.
pub fn kl_standard_normal(state: &VariationalState) -> Result<f64> {
    let p = state.dim() as f64;
    let fro = state.chol.as_matrix().frobenius_norm();
    let kl = 0.5 * (dot(&state.mu, &state.mu) + fro * fro - p - 2.0 * state.chol.sum_log_diagonal());
    if !kl.is_finite() {
        return Err(Error::NonFinite("KL divergence".into()));
    }
    Ok(kl)
}

/// Optimizer and inference settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub eval_interval: usize,
    pub learn_v: bool,
    pub learn_beta: bool,
    /// Learn the log length-scales of every kernel.
    pub learn_kernel: bool,
    /// Learn the log amplitudes. Off by default: the kernel then has unit
    /// signal variance.
    pub learn_amp: bool,
    pub learn_coeffs: bool,
    pub jitter: JitterPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            epochs: 1000,
            mc_samples: 10,
            seed: 0,
            eval_interval: 10,
            learn_v: true,
            learn_beta: true,
            learn_kernel: true,
            learn_amp: false,
            learn_coeffs: true,
            jitter: JitterPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::schema("train.lr", "must be positive"));
        }
        if self.epochs < 1 {
            return Err(Error::schema("train.epochs", "must be at least 1"));
        }
        if self.mc_samples < 1 {
            return Err(Error::schema("train.mc_samples", "must be at least 1"));
        }
        if self.eval_interval < 1 {
            return Err(Error::schema("train.eval_interval", "must be at least 1"));
        }
        self.jitter.validate()
    }
}

/// Training data together with the equation and the resulting layout.
#[derive(Clone, Debug)]
pub struct Problem {
    spec: Option<EquationSpec>,
    compiled: Option<CompiledResidual>,
    layout: JointPriorLayout,
    train_x: PointSet,
    train_y: Vec<f64>,
    colloc: PointSet,
}

impl Problem {
    /// Without an equation the collocation points are ignored.
    pub fn new(spec: Option<EquationSpec>, train_x: PointSet, train_y: Vec<f64>, colloc: PointSet) -> Result<Self> {
        if train_x.len() != train_y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} training inputs with {} targets",
                train_x.len(),
                train_y.len()
            )));
        }
        crate::error::ensure_finite(&train_y, "training targets")?;
        crate::error::ensure_finite(train_x.as_slice(), "training inputs")?;
        crate::error::ensure_finite(colloc.as_slice(), "collocation points")?;
        let colloc = match &spec {
            Some(s) => {
                s.validate()?;
                if s.dim() != train_x.dim() || colloc.dim() != train_x.dim() {
                    return Err(Error::DimensionMismatch(format!(
                        "equation over {} inputs, data of dimension {}",
                        s.dim(),
                        train_x.dim()
                    )));
                }
                colloc
            }
            None => PointSet::empty(train_x.dim()),
        };
        let layout = JointPriorLayout::new(train_x.len(), colloc.len(), spec.as_ref());
        Ok(Problem {
            compiled: spec.as_ref().map(|s| s.compile()),
            spec,
            layout,
            train_x,
            train_y,
            colloc,
        })
    }

    pub fn spec(&self) -> Option<&EquationSpec> {
        self.spec.as_ref()
    }

    pub fn layout(&self) -> &JointPriorLayout {
        &self.layout
    }

    pub fn train_inputs(&self) -> &PointSet {
        &self.train_x
    }

    pub fn train_targets(&self) -> &[f64] {
        &self.train_y
    }

    pub fn colloc_inputs(&self) -> &PointSet {
        &self.colloc
    }

    pub fn dim(&self) -> usize {
        self.train_x.dim()
    }

    pub fn initial_params(&self) -> ModelParams {
        ModelParams::init(self.dim(), self.spec.as_ref())
    }

    /// Assembles `Σ`, its parameter derivatives and its factor.
    pub fn prepare(&self, params: &ModelParams, jitter: &JitterPolicy) -> Result<Prepared> {
        params.validate(&self.layout, self.spec.as_ref(), self.dim())?;
        let (sigma, grad) = build_sigma_with_grad(&self.layout, &self.train_x, &self.colloc, params)?;
        let (a, jitter_used) = cholesky(&sigma, jitter)?;
        Ok(Self::prepared(grad, a, jitter_used, jitter))
    }

    fn prepared(grad: SigmaGrad, a: LowerTriangular, jitter_used: f64, jitter: &JitterPolicy) -> Prepared {
        let shift_per_unit = if jitter.scale_by_mean_diag { jitter_used } else { 0.0 };
        Prepared {
            grad,
            a,
            jitter: jitter_used,
            shift_per_unit,
        }
    }

    #[cfg(test)]
    fn prepare_at_rung(&self, params: &ModelParams, jitter: &JitterPolicy, rung: f64) -> Result<Prepared> {
        let (sigma, grad) = build_sigma_with_grad(&self.layout, &self.train_x, &self.colloc, params)?;
        let a = crate::linalg::cholesky_shifted(&sigma, rung * jitter.scale(&sigma))?;
        Ok(Self::prepared(grad, a, rung, jitter))
    }

    /// Packages a state and parameters as a predictor.
    pub fn posterior(&self, params: &ModelParams, a: LowerTriangular, state: VariationalState) -> Result<PosteriorGP> {
        PosteriorGP::new(
            self.spec.clone(),
            self.layout.clone(),
            self.train_x.clone(),
            self.colloc.clone(),
            params.clone(),
            a,
            state,
        )
    }
}

/// `Σ` for a fixed set of parameters, factored.
#[derive(Clone, Debug)]
pub struct Prepared {
    grad: SigmaGrad,
    a: LowerTriangular,
    jitter: f64,
    /// Coefficient of `mean(diag Σ)` in the diagonal shift; zero when the
    /// shift does not depend on `Σ`.
    shift_per_unit: f64,
}

impl Prepared {
    pub fn factor(&self) -> &LowerTriangular {
        &self.a
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }
}

/// Gradients of the ELBO with respect to the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperGrad {
    pub kernel_u: ArdGrad,
    /// Zero for sources sharing the kernel of `u`.
    pub kernel_g: Vec<ArdGrad>,
    pub log_beta: f64,
    pub log_v: f64,
    /// With respect to the stored (log for positive) coefficients.
    pub coeffs: Vec<f64>,
}

/// An ELBO estimate and its gradient.
#[derive(Clone, Debug)]
pub struct ElboGrad {
    pub elbo: f64,
    pub mu: Vec<f64>,
    /// With respect to the entries of `L` (lower triangle, diagonal included).
    pub chol: Matrix,
    pub hyper: HyperGrad,
}

/// Draws `s` standard normal vectors of length `p`, in order.
pub fn draw_eps(rng: &mut StreamRng, p: usize, s: usize) -> Vec<Vec<f64>> {
    (0..s)
        .map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

struct SampleTerms {
    loglik: f64,
    eta: Vec<f64>,
    g_f: Vec<f64>,
    d_log_beta: f64,
    d_log_v: f64,
    d_coeffs: Vec<f64>,
}

fn sample_terms(
    problem: &Problem,
    params: &ModelParams,
    a: &LowerTriangular,
    state: &VariationalState,
    eps: &[f64],
    want_grad: bool,
) -> Result<SampleTerms> {
    let mut eta = state.chol.matvec(eps);
    for (e, m) in eta.iter_mut().zip(&state.mu) {
        *e += m;
    }
    let f = a.matvec(&eta);
    let layout = &problem.layout;
    let n = layout.n_train();
    let mut g_f = if want_grad { vec![0.0; f.len()] } else { Vec::new() };
    let (data, d_log_beta) = data_loglik_grad(
        &f[..n],
        &problem.train_y,
        params.log_beta,
        want_grad.then(|| &mut g_f[..n]),
    );
    let (virt, d_log_v, d_coeffs) = match (&problem.spec, &problem.compiled) {
        (Some(spec), Some(compiled)) => {
            let lv = LatentVector::new(layout, &f)?;
            let g = virtual_loglik_grad(compiled, spec, lv, params, want_grad.then_some(&mut g_f[..]))?;
            (g.value, g.d_log_v, g.d_coeffs)
        }
        _ => (0.0, 0.0, Vec::new()),
    };
    Ok(SampleTerms {
        loglik: data + virt,
        eta,
        g_f,
        d_log_beta,
        d_log_v,
        d_coeffs,
    })
}

/// The ELBO for explicit noise draws, with its gradient when asked.
pub fn elbo_with_eps(
    problem: &Problem,
    prepared: &Prepared,
    state: &VariationalState,
    params: &ModelParams,
    eps: &[Vec<f64>],
    want_grad: bool,
) -> Result<(f64, Option<ElboGrad>)> {
    let p = problem.layout.total();
    if state.dim() != p {
        return Err(Error::DimensionMismatch(format!(
            "state of size {} for a layout of {p}",
            state.dim()
        )));
    }
    if eps.is_empty() || eps.iter().any(|e| e.len() != p) {
        return Err(Error::DimensionMismatch("noise draws".into()));
    }
    let a = &prepared.a;
    let samples = par::map_slice(eps, |e| sample_terms(problem, params, a, state, e, want_grad));
    let samples: Vec<SampleTerms> = samples.into_iter().collect::<Result<_>>()?;
    let s = samples.len() as f64;
    let kl = kl_standard_normal(state)?;
    let mean_ll = samples.iter().map(|t| t.loglik).sum::<f64>() / s;
    let elbo = mean_ll - kl;
    if !elbo.is_finite() {
        return Err(Error::NonFinite("ELBO".into()));
    }
    if !want_grad {
        return Ok((elbo, None));
    }

    // h_s = Aᵀ g_f,s is the gradient with respect to η_s
    let hs: Vec<Vec<f64>> = par::map_slice(&samples, |t| a.t_matvec(&t.g_f));
    let mut g_mu: Vec<f64> = state.mu.iter().map(|m| -m).collect();
    for h in &hs {
        for (g, hi) in g_mu.iter_mut().zip(h) {
            *g += hi / s;
        }
    }
    // ∂/∂L_ij = mean_s h_s,i ε_s,j and ∂/∂A_ij = mean_s g_f,s,i η_s,j on the lower triangle
    let mut g_l = Matrix::zeros(p, p);
    let mut g_a = Matrix::zeros(p, p);
    {
        let l = state.chol.as_matrix();
        par::for_each_row(g_l.as_mut_slice(), p, |i, row| {
            for (h, e) in hs.iter().zip(eps) {
                crate::linalg::axpy(&mut row[..=i], &e[..=i], h[i] / s);
            }
            for (j, v) in row[..=i].iter_mut().enumerate() {
                *v -= l[(i, j)];
            }
            row[i] += 1.0 / l[(i, i)];
        });
        par::for_each_row(g_a.as_mut_slice(), p, |i, row| {
            for t in &samples {
                crate::linalg::axpy(&mut row[..=i], &t.eta[..=i], t.g_f[i] / s);
            }
        });
    }
    let a_adj = LowerTriangular::from_lower_part(g_a)?;
    let mut sigma_adj = cholesky_backward(a, &a_adj)?;
    if prepared.shift_per_unit > 0.0 {
        // the factored matrix is Σ + j·mean(diag Σ)·I
        let tr: f64 = sigma_adj.diagonal().iter().sum();
        sigma_adj.add_diagonal(prepared.shift_per_unit * tr / p as f64);
    }
    let (kernel_u, kernel_g) = sigma_vjp(&problem.layout, &prepared.grad, &sigma_adj);
    let n_coeffs = params.coeffs.len();
    let mut hyper = HyperGrad {
        kernel_u,
        kernel_g,
        log_beta: 0.0,
        log_v: 0.0,
        coeffs: vec![0.0; n_coeffs],
    };
    for t in &samples {
        hyper.log_beta += t.d_log_beta / s;
        hyper.log_v += t.d_log_v / s;
        for (g, d) in hyper.coeffs.iter_mut().zip(&t.d_coeffs) {
            *g += d / s;
        }
    }
    Ok((
        elbo,
        Some(ElboGrad {
            elbo,
            mu: g_mu,
            chol: g_l,
            hyper,
        }),
    ))
}

/// Monte Carlo ELBO estimate with `s` draws from `rng`.
pub fn elbo_estimate(
    state: &VariationalState,
    params: &ModelParams,
    problem: &Problem,
    rng: &mut StreamRng,
    s: usize,
    jitter: &JitterPolicy,
) -> Result<f64> {
    let prepared = problem.prepare(params, jitter)?;
    let eps = draw_eps(rng, problem.layout.total(), s);
    Ok(elbo_with_eps(problem, &prepared, state, params, &eps, false)?.0)
}

/// Reparameterized gradient of [`elbo_estimate`] for the same draws.
pub fn elbo_grad(
    state: &VariationalState,
    params: &ModelParams,
    problem: &Problem,
    rng: &mut StreamRng,
    s: usize,
    jitter: &JitterPolicy,
) -> Result<ElboGrad> {
    let prepared = problem.prepare(params, jitter)?;
    let eps = draw_eps(rng, problem.layout.total(), s);
    Ok(elbo_with_eps(problem, &prepared, state, params, &eps, true)?
        .1
        .expect("gradient requested"))
}

/// Adam moments for one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected descent step along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "adam state for {} parameters, got {} and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(adam: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    adam.step(params, grads, lr)
}

/// How the observation noise enters the MNLL on held-out data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MnllNoise {
    /// Add the learned noise variance `1/β` to the predictive variance.
    #[default]
    Learned,
    /// Score the latent function's predictive distribution only.
    NoiseFree,
}

/// Held-out data for model selection during training.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub x: PointSet,
    pub y: Vec<f64>,
    pub noise: MnllNoise,
}

/// Test metrics at one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub rmse: f64,
    pub mnll: f64,
}

/// A model captured at an evaluation epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<M> {
    pub record: EvalRecord,
    pub model: M,
}

/// Everything recorded by a training run.
#[derive(Clone, Debug)]
pub struct TrainTrace<M> {
    /// Objective (ELBO or log evidence) before each epoch's update.
    pub objective: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    /// Lowest test RMSE seen; earliest wins ties.
    pub best: Option<Snapshot<M>>,
    /// The model after the last epoch.
    pub last: M,
    pub last_eval: Option<EvalRecord>,
}

impl<M: Clone> TrainTrace<M> {
    pub(crate) fn new(last: M) -> Self {
        TrainTrace {
            objective: Vec::new(),
            evals: Vec::new(),
            best: None,
            last,
            last_eval: None,
        }
    }

    pub(crate) fn record(&mut self, record: EvalRecord, model: &M) {
        self.evals.push(record);
        let better = match &self.best {
            Some(b) => record.rmse < b.record.rmse,
            None => true,
        };
        if better {
            self.best = Some(Snapshot {
                record,
                model: model.clone(),
            });
        }
    }

    /// The best snapshot if any evaluation ran, else the last model.
    pub fn selected(&self) -> &M {
        self.best.as_ref().map_or(&self.last, |b| &b.model)
    }
}

/// Epochs at which held-out metrics are computed.
pub(crate) fn is_eval_epoch(epoch: usize, cfg: &TrainConfig) -> bool {
    epoch % cfg.eval_interval == 0 || epoch == cfg.epochs
}

/// Test RMSE and MNLL of a posterior.
pub fn evaluate(post: &PosteriorGP, eval: &EvalSet, epoch: usize) -> Result<EvalRecord> {
    let pred = post.predict_u(&eval.x, &crate::kernel::DerivOp::value(post.dim()))?;
    let noise = match eval.noise {
        MnllNoise::Learned => 1.0 / post.params().beta(),
        MnllNoise::NoiseFree => 0.0,
    };
    Ok(EvalRecord {
        epoch,
        rmse: rmse(&pred.mean, &eval.y)?,
        mnll: mnll(&pred, noise, &eval.y)?,
    })
}

/// Flat packing of the state and the learnable parameters for Adam.
struct Packer {
    p: usize,
    d: usize,
    unshared: Vec<usize>,
    n_coeffs: usize,
}

impl Packer {
    fn new(layout: &JointPriorLayout, d: usize, n_coeffs: usize) -> Self {
        Packer {
            p: layout.total(),
            d,
            unshared: (0..layout.n_sources()).filter(|&i| !layout.source_shared(i)).collect(),
            n_coeffs,
        }
    }

    fn len(&self) -> usize {
        self.p + self.p * (self.p + 1) / 2 + (1 + self.unshared.len()) * (self.d + 1) + 2 + self.n_coeffs
    }

    fn pack(&self, state: &VariationalState, params: &ModelParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&state.mu);
        for i in 0..self.p {
            let row = state.chol.row_prefix(i);
            out.extend_from_slice(&row[..i]);
            out.push(row[i].ln());
        }
        let kernels = std::iter::once(&params.kernel_u).chain(self.unshared.iter().map(|&i| &params.kernel_g[i]));
        for k in kernels {
            out.extend_from_slice(&k.log_s);
            out.push(k.log_amp);
        }
        out.push(params.log_beta);
        out.push(params.log_v);
        out.extend_from_slice(&params.coeffs);
        out
    }

    fn unpack(&self, flat: &[f64], layout: &JointPriorLayout, params: &mut ModelParams) -> Result<VariationalState> {
        let p = self.p;
        let mu = flat[..p].to_vec();
        let mut l = Matrix::zeros(p, p);
        let mut pos = p;
        for i in 0..p {
            l.row_mut(i)[..i].copy_from_slice(&flat[pos..pos + i]);
            l[(i, i)] = flat[pos + i].exp();
            pos += i + 1;
        }
        let d = self.d;
        params.kernel_u.log_s.copy_from_slice(&flat[pos..pos + d]);
        params.kernel_u.log_amp = flat[pos + d];
        pos += d + 1;
        for &i in &self.unshared {
            params.kernel_g[i].log_s.copy_from_slice(&flat[pos..pos + d]);
            params.kernel_g[i].log_amp = flat[pos + d];
            pos += d + 1;
        }
        params.log_beta = flat[pos];
        params.log_v = flat[pos + 1];
        pos += 2;
        params.coeffs.copy_from_slice(&flat[pos..pos + self.n_coeffs]);
        params.sync_shared(layout);
        crate::error::ensure_finite(flat, "parameters")?;
        VariationalState::new(mu, LowerTriangular::from_lower_part(l)?)
    }

    /// Negated ELBO gradient in packed order, with frozen groups zeroed.
    fn descent_grad(&self, g: &ElboGrad, state: &VariationalState, cfg: &TrainConfig, out: &mut Vec<f64>) {
        out.clear();
        out.extend(g.mu.iter().map(|v| -v));
        for i in 0..self.p {
            let row = g.chol.row(i);
            out.extend(row[..i].iter().map(|v| -v));
            out.push(-row[i] * state.chol.as_matrix()[(i, i)]);
        }
        let kernels = std::iter::once(&g.hyper.kernel_u).chain(self.unshared.iter().map(|&i| &g.hyper.kernel_g[i]));
        for k in kernels {
            for v in &k.d_log_s {
                out.push(if cfg.learn_kernel { -v } else { 0.0 });
            }
            out.push(if cfg.learn_amp { -k.d_log_amp } else { 0.0 });
        }
        out.push(if cfg.learn_beta { -g.hyper.log_beta } else { 0.0 });
        out.push(if cfg.learn_v { -g.hyper.log_v } else { 0.0 });
        for v in &g.hyper.coeffs {
            out.push(if cfg.learn_coeffs { -v } else { 0.0 });
        }
    }
}

/// Maximizes the ELBO with Adam, starting from `init` (or from the prior
/// state and the default parameters). Held-out metrics are computed every
/// `eval_interval` epochs and after the last epoch, on the model after that
/// epoch's update.
pub fn train(
    problem: &Problem,
    init: Option<(VariationalState, ModelParams)>,
    cfg: &TrainConfig,
    eval: Option<&EvalSet>,
) -> Result<TrainTrace<PosteriorGP>> {
    cfg.validate()?;
    let (mut state, mut params) =
        init.unwrap_or_else(|| (VariationalState::prior(problem.layout.total()), problem.initial_params()));
    params.sync_shared(&problem.layout);
    if state.dim() != problem.layout.total() {
        return Err(Error::DimensionMismatch("initial state does not match the layout".into()));
    }
    let packer = Packer::new(&problem.layout, problem.dim(), params.coeffs.len());
    let mut flat = packer.pack(&state, &params);
    let mut adam = AdamState::new(flat.len());
    let mut rng = SeedStream::new(cfg.seed).rng("elbo");
    let p = problem.layout.total();
    let mut prepared = problem.prepare(&params, &cfg.jitter).map_err(|e| e.at_epoch(0))?;
    let mut trace = TrainTrace::new(problem.posterior(&params, prepared.a.clone(), state.clone())?);
    let mut grad_buf = Vec::with_capacity(flat.len());
    for epoch in 1..=cfg.epochs {
        let mut step = || -> Result<()> {
            let eps = draw_eps(&mut rng, p, cfg.mc_samples);
            let (elbo, g) = elbo_with_eps(problem, &prepared, &state, &params, &eps, true)?;
            trace.objective.push(elbo);
            packer.descent_grad(&g.expect("gradient requested"), &state, cfg, &mut grad_buf);
            crate::error::ensure_finite(&grad_buf, "ELBO gradient")?;
            adam.step(&mut flat, &grad_buf, cfg.lr)?;
            state = packer.unpack(&flat, &problem.layout, &mut params)?;
            prepared = problem.prepare(&params, &cfg.jitter)?;
            if is_eval_epoch(epoch, cfg) {
                let post = problem.posterior(&params, prepared.a.clone(), state.clone())?;
                if let Some(eval) = eval {
                    let rec = evaluate(&post, eval, epoch)?;
                    trace.record(rec, &post);
                    trace.last_eval = Some(rec);
                }
                if epoch == cfg.epochs {
                    trace.last = post;
                }
            }
            Ok(())
        };
        #[allow(clippy::redundant_closure_call)]
        step().map_err(|e| e.at_epoch(epoch))?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equation::preset;

    #[test]
    fn kl_cases() {
        assert!(kl_standard_normal(&VariationalState::prior(3)).unwrap().abs() < 1e-15);
        let s = VariationalState::new(vec![1.0, 0.0], LowerTriangular::identity(2)).unwrap();
        assert!((kl_standard_normal(&s).unwrap() - 0.5).abs() < 1e-15);
        let s = VariationalState::new(vec![0.0, 0.0], LowerTriangular::from_diagonal(&[2.0, 1.0])).unwrap();
        assert!((kl_standard_normal(&s).unwrap() - (1.5 - 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut adam = AdamState::new(3);
        let mut x = vec![1.0, 2.0, 3.0];
        adam.step(&mut x, &[0.5, -3.0, 0.0], 0.1).unwrap();
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] - 2.1).abs() < 1e-6);
        assert_eq!(x[2], 3.0);
        for _ in 0..10 {
            adam.step(&mut x, &[0.0, 0.0, 0.0], 0.1).unwrap();
        }
        assert!(adam.step(&mut x, &[0.0], 0.1).is_err());
    }

    fn toy() -> Problem {
        Problem::new(
            Some(preset("pendulum_complete").unwrap()),
            PointSet::from_scalars(&[0.0, 0.7, 1.5]),
            vec![2.2, 1.4, -0.3],
            PointSet::from_scalars(&[0.4, 2.0]),
        )
        .unwrap()
    }

    #[test]
    fn stationary_kl_gradients() {
        let problem = toy();
        let mut params = problem.initial_params();
        params.log_beta = -40.0;
        params.log_v = 40.0;
        let prepared = problem.prepare(&params, &JitterPolicy::default()).unwrap();
        let state = VariationalState::prior(problem.layout().total());
        let eps = vec![vec![0.3; problem.layout().total()]];
        let (_, g) = elbo_with_eps(&problem, &prepared, &state, &params, &eps, true).unwrap();
        let g = g.unwrap();
        assert!(g.mu.iter().all(|v| v.abs() < 1e-12));
        for i in 0..state.dim() {
            assert!(g.chol[(i, i)].abs() < 1e-12);
        }
    }

    #[test]
    fn jitter_shift_enters_the_kernel_gradient() {
        let problem = Problem::new(
            Some(preset("pendulum_complete").unwrap()),
            PointSet::from_scalars(&[0.0, 0.8, 1.6]),
            vec![1.0, 0.2, -0.7],
            PointSet::from_scalars(&[0.8, 1.2]),
        )
        .unwrap();
        let mut params = problem.initial_params();
        params.kernel_u.log_s = vec![-0.3];
        params.kernel_u.log_amp = 0.2;
        let policy = JitterPolicy::default();
        let rung = 1e-2;
        let p = problem.layout().total();
        let mut rng = SeedStream::new(9).rng("eps");
        let eps = draw_eps(&mut rng, p, 2);
        let state = VariationalState::new(
            (0..p).map(|i| 0.1 * i as f64 - 0.3).collect(),
            LowerTriangular::from_diagonal(&vec![0.7; p]),
        )
        .unwrap();
        let prep = problem.prepare_at_rung(&params, &policy, rung).unwrap();
        let g = elbo_with_eps(&problem, &prep, &state, &params, &eps, true).unwrap().1.unwrap();
        let f = |d: f64, amp: bool| {
            let mut q = params.clone();
            if amp {
                q.kernel_u.log_amp += d;
            } else {
                q.kernel_u.log_s[0] += d;
            }
            let prep = problem.prepare_at_rung(&q, &policy, rung).unwrap();
            elbo_with_eps(&problem, &prep, &state, &q, &eps, false).unwrap().0
        };
        let h = 1e-4;
        for (amp, analytic) in [(false, g.hyper.kernel_u.d_log_s[0]), (true, g.hyper.kernel_u.d_log_amp)] {
            let num = (8.0 * (f(h, amp) - f(-h, amp)) - (f(2.0 * h, amp) - f(-2.0 * h, amp))) / (12.0 * h);
            assert!((analytic - num).abs() < 1e-5 * num.abs().max(1.0), "{analytic} vs {num}");
        }
    }

    #[test]
    fn estimate_is_deterministic() {
        let problem = toy();
        let params = problem.initial_params();
        let state = VariationalState::prior(problem.layout().total());
        let jitter = JitterPolicy::default();
        let a = elbo_estimate(&state, &params, &problem, &mut SeedStream::new(3).rng("e"), 4, &jitter).unwrap();
        let b = elbo_estimate(&state, &params, &problem, &mut SeedStream::new(3).rng("e"), 4, &jitter).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn one_epoch_trace() {
        let problem = toy();
        let eval = EvalSet {
            x: PointSet::from_scalars(&[0.2, 1.0]),
            y: vec![2.0, 1.0],
            noise: MnllNoise::Learned,
        };
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let trace = train(&problem, None, &cfg, Some(&eval)).unwrap();
        assert_eq!(trace.objective.len(), 1);
        assert_eq!(trace.evals.len(), 1);
        assert_eq!(trace.best.as_ref().unwrap().record.epoch, 1);
    }
}
