//! The joint Gaussian prior over the latent vector `f` and the data and
//! virtual (equation) log-likelihoods.
//!
//! `f` stacks, in order, the function values at the training inputs, each
//! derivative feature of the equation at every collocation point, and each
//! latent source at every collocation point. The first two groups are one
//! jointly Gaussian block under the kernel of `u`; every source is an
//! independent block under its own kernel.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::equation::{CompiledResidual, EquationSpec};
use crate::error::{Error, Result};
use crate::kernel::{cov_matrix, cov_matrix_with_grad, ArdParams, CovBlock, DerivOp, PointSet};
use crate::linalg::{LowerTriangular, Matrix, TriMode};

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Identifies a block of the latent vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockId {
    TrainU,
    Feature(usize),
    Source(usize),
}

/// Index map from blocks to ranges of the latent vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointPriorLayout {
    n_train: usize,
    m_colloc: usize,
    feature_ops: Vec<DerivOp>,
    /// Whether each source shares the kernel parameters of `u`.
    source_shared: Vec<bool>,
}

impl JointPriorLayout {
    /// Layout for `n_train` observations and `m_colloc` collocation points.
    /// Without an equation there are no collocation blocks.
    pub fn new(n_train: usize, m_colloc: usize, spec: Option<&EquationSpec>) -> Self {
        match spec {
            Some(spec) => JointPriorLayout {
                n_train,
                m_colloc,
                feature_ops: spec.features.clone(),
                source_shared: spec.sources.iter().map(|s| s.share_u_params).collect(),
            },
            None => JointPriorLayout {
                n_train,
                m_colloc: 0,
                feature_ops: Vec::new(),
                source_shared: Vec::new(),
            },
        }
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn m_colloc(&self) -> usize {
        self.m_colloc
    }

    pub fn feature_ops(&self) -> &[DerivOp] {
        &self.feature_ops
    }

    pub fn n_sources(&self) -> usize {
        self.source_shared.len()
    }

    pub fn source_shared(&self, i: usize) -> bool {
        self.source_shared[i]
    }

    /// Length of the dense block governed by the kernel of `u`.
    pub fn u_len(&self) -> usize {
        self.n_train + self.m_colloc * self.feature_ops.len()
    }

    /// Total length `P` of the latent vector.
    pub fn total(&self) -> usize {
        self.u_len() + self.m_colloc * self.n_sources()
    }

    pub fn range(&self, id: BlockId) -> Range<usize> {
        let m = self.m_colloc;
        match id {
            BlockId::TrainU => 0..self.n_train,
            BlockId::Feature(k) => {
                assert!(k < self.feature_ops.len(), "feature block {k}");
                let s = self.n_train + k * m;
                s..s + m
            }
            BlockId::Source(i) => {
                assert!(i < self.n_sources(), "source block {i}");
                let s = self.u_len() + i * m;
                s..s + m
            }
        }
    }

    /// Position of the feature with operator `op`, if present.
    pub fn feature_index(&self, op: &DerivOp) -> Option<usize> {
        self.feature_ops.iter().position(|f| f == op)
    }
}

/// Builds the layout; see [`JointPriorLayout::new`].
pub fn build_layout(n_train: usize, m_colloc: usize, spec: Option<&EquationSpec>) -> JointPriorLayout {
    JointPriorLayout::new(n_train, m_colloc, spec)
}

/// Learnable parameters. Positive coefficients are stored as logs; the
/// others raw, in the declaration order of the equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kernel_u: ArdParams,
    /// One kernel per source. Entries of sources that share the kernel of
    /// `u` mirror `kernel_u`.
    pub kernel_g: Vec<ArdParams>,
    pub log_beta: f64,
    pub log_v: f64,
    pub coeffs: Vec<f64>,
}

pub const DEFAULT_BETA: f64 = 100.0;
pub const DEFAULT_V: f64 = 1e-2;

impl ModelParams {
    /// Unit length-scales and amplitude, `β = 100`, `v = 0.01`, and the
    /// equation's initial coefficients and source kernels.
    pub fn init(dim: usize, spec: Option<&EquationSpec>) -> Self {
        let mut p = ModelParams {
            kernel_u: ArdParams::unit(dim),
            kernel_g: Vec::new(),
            log_beta: DEFAULT_BETA.ln(),
            log_v: DEFAULT_V.ln(),
            coeffs: Vec::new(),
        };
        if let Some(spec) = spec {
            p.kernel_g = spec.sources.iter().map(|s| s.kernel.clone()).collect();
            p.coeffs = spec
                .coeffs
                .iter()
                .map(|c| if c.positive { c.init.ln() } else { c.init })
                .collect();
            p.sync_shared(&JointPriorLayout::new(0, 0, Some(spec)));
        }
        p
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn v(&self) -> f64 {
        self.log_v.exp()
    }

    /// The kernel in effect for source `i`.
    pub fn source_kernel(&self, i: usize, layout: &JointPriorLayout) -> &ArdParams {
        if layout.source_shared(i) {
            &self.kernel_u
        } else {
            &self.kernel_g[i]
        }
    }

    /// Copies `kernel_u` into every shared source kernel.
    pub fn sync_shared(&mut self, layout: &JointPriorLayout) {
        for i in 0..layout.n_sources() {
            if layout.source_shared(i) {
                self.kernel_g[i] = self.kernel_u.clone();
            }
        }
    }

    /// Coefficients in their natural domain.
    pub fn coeff_values(&self, spec: &EquationSpec) -> Vec<f64> {
        spec.coeffs
            .iter()
            .zip(&self.coeffs)
            .map(|(c, &v)| if c.positive { v.exp() } else { v })
            .collect()
    }

    pub fn coeff_map(&self, spec: &EquationSpec) -> BTreeMap<String, f64> {
        spec.coeffs
            .iter()
            .map(|c| c.name.clone())
            .zip(self.coeff_values(spec))
            .collect()
    }

    pub fn validate(&self, layout: &JointPriorLayout, spec: Option<&EquationSpec>, dim: usize) -> Result<()> {
        self.kernel_u.validate()?;
        if self.kernel_u.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "kernel of u has {} dimensions, inputs have {dim}",
                self.kernel_u.dim()
            )));
        }
        if self.kernel_g.len() != layout.n_sources() {
            return Err(Error::DimensionMismatch("one kernel per source".into()));
        }
        for k in &self.kernel_g {
            k.validate()?;
            if k.dim() != dim {
                return Err(Error::DimensionMismatch("source kernel dimension".into()));
            }
        }
        let n_coeffs = spec.map_or(0, |s| s.coeffs.len());
        if self.coeffs.len() != n_coeffs {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for an equation with {n_coeffs}",
                self.coeffs.len()
            )));
        }
        crate::error::ensure_finite(&[self.log_beta, self.log_v], "noise parameters")?;
        crate::error::ensure_finite(&self.coeffs, "coefficients")
    }
}

/// The covariance blocks of the `u` process: values at the training inputs,
/// then each feature at the collocation points.
pub fn u_blocks(layout: &JointPriorLayout, train_x: &PointSet, colloc: &PointSet) -> Vec<CovBlock> {
    let mut blocks = vec![CovBlock {
        op: DerivOp::value(train_x.dim()),
        points: train_x.clone(),
    }];
    for op in layout.feature_ops() {
        blocks.push(CovBlock {
            op: op.clone(),
            points: colloc.clone(),
        });
    }
    blocks
}

fn source_block(colloc: &PointSet) -> [CovBlock; 1] {
    [CovBlock {
        op: DerivOp::value(colloc.dim()),
        points: colloc.clone(),
    }]
}

fn check_inputs(layout: &JointPriorLayout, train_x: &PointSet, colloc: &PointSet, params: &ModelParams) -> Result<()> {
    if train_x.len() != layout.n_train() {
        return Err(Error::DimensionMismatch(format!(
            "{} training inputs for a layout with {}",
            train_x.len(),
            layout.n_train()
        )));
    }
    let has_colloc = layout.m_colloc() > 0;
    if has_colloc && (colloc.len() != layout.m_colloc() || colloc.dim() != train_x.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "{} collocation points for a layout with {}",
            colloc.len(),
            layout.m_colloc()
        )));
    }
    if params.kernel_u.dim() != train_x.dim() {
        return Err(Error::DimensionMismatch("kernel and input dimensions differ".into()));
    }
    if params.kernel_g.len() != layout.n_sources() {
        return Err(Error::DimensionMismatch("one kernel per source".into()));
    }
    Ok(())
}

fn place(target: &mut Matrix, block: &Matrix, offset: usize) {
    let n = block.rows();
    for i in 0..n {
        target.row_mut(offset + i)[offset..offset + n].copy_from_slice(block.row(i));
    }
}

/// The prior covariance `Σ` of the latent vector.
pub fn build_sigma(
    layout: &JointPriorLayout,
    train_x: &PointSet,
    colloc: &PointSet,
    params: &ModelParams,
) -> Result<Matrix> {
    check_inputs(layout, train_x, colloc, params)?;
    let p = layout.total();
    let mut sigma = Matrix::zeros(p, p);
    let ku = cov_matrix(&u_blocks(layout, train_x, colloc), &params.kernel_u)?;
    place(&mut sigma, &ku, 0);
    for i in 0..layout.n_sources() {
        let kg = cov_matrix(&source_block(colloc), params.source_kernel(i, layout))?;
        place(&mut sigma, &kg, layout.range(BlockId::Source(i)).start);
    }
    Ok(sigma)
}

/// Derivatives of the diagonal blocks of `Σ` with respect to the log
/// length-scales. Amplitude derivatives are the blocks themselves.
#[derive(Clone, Debug)]
pub struct SigmaGrad {
    pub u_block: Matrix,
    pub u_log_s: Vec<Matrix>,
    pub g_blocks: Vec<Matrix>,
    pub g_log_s: Vec<Vec<Matrix>>,
}

/// Gradient with respect to the parameters of one kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ArdGrad {
    pub d_log_s: Vec<f64>,
    pub d_log_amp: f64,
}

impl ArdGrad {
    pub fn zeros(dim: usize) -> Self {
        ArdGrad {
            d_log_s: vec![0.0; dim],
            d_log_amp: 0.0,
        }
    }

    fn add(&mut self, other: &ArdGrad) {
        for (a, b) in self.d_log_s.iter_mut().zip(&other.d_log_s) {
            *a += b;
        }
        self.d_log_amp += other.d_log_amp;
    }
}

/// `Σ` and the derivative blocks needed to pull an adjoint of `Σ` back to
/// the kernel parameters.
pub fn build_sigma_with_grad(
    layout: &JointPriorLayout,
    train_x: &PointSet,
    colloc: &PointSet,
    params: &ModelParams,
) -> Result<(Matrix, SigmaGrad)> {
    check_inputs(layout, train_x, colloc, params)?;
    let p = layout.total();
    let mut sigma = Matrix::zeros(p, p);
    let (ku, ku_grad) = cov_matrix_with_grad(&u_blocks(layout, train_x, colloc), &params.kernel_u)?;
    place(&mut sigma, &ku, 0);
    let mut g_blocks = Vec::new();
    let mut g_log_s = Vec::new();
    for i in 0..layout.n_sources() {
        let (kg, kg_grad) = cov_matrix_with_grad(&source_block(colloc), params.source_kernel(i, layout))?;
        place(&mut sigma, &kg, layout.range(BlockId::Source(i)).start);
        g_blocks.push(kg);
        g_log_s.push(kg_grad);
    }
    Ok((
        sigma,
        SigmaGrad {
            u_block: ku,
            u_log_s: ku_grad,
            g_blocks,
            g_log_s,
        },
    ))
}

/// `Σ_ij adj_ij ∂blocks_ij` over the square sub-block of `adj` at `offset`.
fn contract_block(adj: &Matrix, offset: usize, value: &Matrix, log_s: &[Matrix]) -> ArdGrad {
    let n = value.rows();
    let mut g = ArdGrad::zeros(log_s.len());
    for i in 0..n {
        let a = &adj.row(offset + i)[offset..offset + n];
        g.d_log_amp += crate::linalg::dot(a, value.row(i));
        for (k, m) in log_s.iter().enumerate() {
            g.d_log_s[k] += crate::linalg::dot(a, m.row(i));
        }
    }
    g
}

/// Pulls an adjoint of `Σ` back to `(kernel_u, kernel_g)`. Gradients of
/// shared sources are credited to `kernel_u` and their own entries are zero.
pub fn sigma_vjp(layout: &JointPriorLayout, grad: &SigmaGrad, adj: &Matrix) -> (ArdGrad, Vec<ArdGrad>) {
    let mut gu = contract_block(adj, 0, &grad.u_block, &grad.u_log_s);
    let mut gg = Vec::new();
    for i in 0..layout.n_sources() {
        let off = layout.range(BlockId::Source(i)).start;
        let g = contract_block(adj, off, &grad.g_blocks[i], &grad.g_log_s[i]);
        if layout.source_shared(i) {
            gu.add(&g);
            gg.push(ArdGrad::zeros(g.d_log_s.len()));
        } else {
            gg.push(g);
        }
    }
    (gu, gg)
}

/// A latent vector paired with its layout.
#[derive(Clone, Copy, Debug)]
pub struct LatentVector<'a> {
    layout: &'a JointPriorLayout,
    values: &'a [f64],
}

impl<'a> LatentVector<'a> {
    pub fn new(layout: &'a JointPriorLayout, values: &'a [f64]) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::DimensionMismatch(format!(
                "latent vector of length {} for a layout of {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(LatentVector { layout, values })
    }

    pub fn layout(&self) -> &'a JointPriorLayout {
        self.layout
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    pub fn block(&self, id: BlockId) -> &'a [f64] {
        &self.values[self.layout.range(id)]
    }
}

/// `Σ_n log N(y_n | u_n, 1/β)`.
pub fn data_loglik(f: LatentVector<'_>, y: &[f64], params: &ModelParams) -> Result<f64> {
    let u = f.block(BlockId::TrainU);
    if y.len() != u.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {} training values",
            y.len(),
            u.len()
        )));
    }
    Ok(data_loglik_grad(u, y, params.log_beta, None).0)
}

/// Data log-likelihood, optionally accumulating `∂/∂u` into `g_u`; also
/// returns `∂/∂ log β`.
pub(crate) fn data_loglik_grad(u: &[f64], y: &[f64], log_beta: f64, g_u: Option<&mut [f64]>) -> (f64, f64) {
    let beta = log_beta.exp();
    let n = y.len() as f64;
    let mut sq = 0.0;
    match g_u {
        Some(g) => {
            for i in 0..y.len() {
                let r = y[i] - u[i];
                sq += r * r;
                g[i] += beta * r;
            }
        }
        None => {
            for i in 0..y.len() {
                let r = y[i] - u[i];
                sq += r * r;
            }
        }
    }
    let value = n * (0.5 * log_beta - HALF_LN_2PI) - 0.5 * beta * sq;
    (value, 0.5 * n - 0.5 * beta * sq)
}

/// Gradients of the virtual log-likelihood besides `∂/∂f`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct VirtualGrad {
    pub value: f64,
    pub d_log_v: f64,
    /// With respect to the stored coefficient parameters.
    pub d_coeffs: Vec<f64>,
}

/// `Σ_m log N(0 | R_m, v)` with `R` the equation residual at the
/// collocation points.
pub fn virtual_loglik(f: LatentVector<'_>, spec: &EquationSpec, params: &ModelParams) -> Result<f64> {
    let compiled = spec.compile();
    Ok(virtual_loglik_grad(&compiled, spec, f, params, None)?.value)
}

pub(crate) fn virtual_loglik_grad(
    compiled: &CompiledResidual,
    spec: &EquationSpec,
    f: LatentVector<'_>,
    params: &ModelParams,
    g_f: Option<&mut [f64]>,
) -> Result<VirtualGrad> {
    let layout = f.layout();
    let m = layout.m_colloc();
    if layout.feature_ops() != spec.features.as_slice() || layout.n_sources() != spec.sources.len() {
        return Err(Error::DimensionMismatch("layout does not match the equation".into()));
    }
    if m == 0 {
        return Ok(VirtualGrad {
            value: 0.0,
            d_log_v: 0.0,
            d_coeffs: vec![0.0; spec.coeffs.len()],
        });
    }
    let features: Vec<&[f64]> = (0..spec.features.len()).map(|k| f.block(BlockId::Feature(k))).collect();
    let sources: Vec<&[f64]> = (0..spec.sources.len()).map(|i| f.block(BlockId::Source(i))).collect();
    let coeffs = params.coeff_values(spec);
    let v = params.v();
    let constant = m as f64 * (-0.5 * params.log_v - HALF_LN_2PI);
    match g_f {
        None => {
            let r = compiled.eval(&features, &sources, &coeffs)?;
            let sq: f64 = r.iter().map(|x| x * x).sum();
            Ok(VirtualGrad {
                value: constant - 0.5 * sq / v,
                d_log_v: -0.5 * m as f64 + 0.5 * sq / v,
                d_coeffs: vec![0.0; coeffs.len()],
            })
        }
        Some(g) => {
            let r = compiled.eval(&features, &sources, &coeffs)?;
            let upstream: Vec<f64> = r.iter().map(|x| -x / v).collect();
            let (_, grad) = compiled.eval_adjoint(&features, &sources, &coeffs, &upstream)?;
            for (k, gk) in grad.features.iter().enumerate() {
                let range = layout.range(BlockId::Feature(k));
                for (dst, src) in g[range].iter_mut().zip(gk) {
                    *dst += src;
                }
            }
            for (i, gi) in grad.sources.iter().enumerate() {
                let range = layout.range(BlockId::Source(i));
                for (dst, src) in g[range].iter_mut().zip(gi) {
                    *dst += src;
                }
            }
            let d_coeffs = spec
                .coeffs
                .iter()
                .zip(grad.coeffs.iter().zip(&coeffs))
                .map(|(c, (&gc, &val))| if c.positive { gc * val } else { gc })
                .collect();
            let sq: f64 = r.iter().map(|x| x * x).sum();
            Ok(VirtualGrad {
                value: constant - 0.5 * sq / v,
                d_log_v: -0.5 * m as f64 + 0.5 * sq / v,
                d_coeffs,
            })
        }
    }
}

/// `log N(f | 0, Σ) + log p(y | f) + log p(0 | f)` with `Σ = A Aᵀ`.
pub fn log_joint(
    f: LatentVector<'_>,
    y: &[f64],
    spec: Option<&EquationSpec>,
    params: &ModelParams,
    sigma_chol: &LowerTriangular,
) -> Result<f64> {
    if sigma_chol.dim() != f.values().len() {
        return Err(Error::DimensionMismatch("factor and latent vector sizes differ".into()));
    }
    let z = sigma_chol.solve(f.values(), TriMode::Lower)?;
    let p = z.len() as f64;
    let prior = -0.5 * crate::linalg::dot(&z, &z) - sigma_chol.sum_log_diagonal() - p * HALF_LN_2PI;
    let data = data_loglik(f, y, params)?;
    let virt = match spec {
        Some(spec) => virtual_loglik(f, spec, params)?,
        None => 0.0,
    };
    Ok(prior + data + virt)
}
