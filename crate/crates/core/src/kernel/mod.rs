//! SE-ARD kernel and covariances between partial derivatives of a GP sample.
//!
//! The kernel is `amp · exp(-½ Σ_k (z1_k - z2_k)² / s_k)`, where `s_k` is
//! the squared length-scale of input dimension `k`. Because it factorizes
//! over dimensions, the covariance between `∂^a u(z1)` and `∂^b u(z2)` is a
//! product of one-dimensional derivatives. In one dimension, with lag
//! `δ = z1 - z2`,
//!
//! ```text
//! d^n/dδ^n exp(-δ²/2s) = p_n(δ) exp(-δ²/2s),   p_0 = 1,   p_{n+1} = p_n' - (δ/s) p_n
//! ```
//!
//! and differentiating with respect to the second argument flips the sign
//! once per order, so the factor for dimension `k` is
//! `(-1)^{b_k} p_{a_k + b_k}(δ_k)`.

mod fd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::par;

pub use fd::fd_deriv_cov;

/// Highest supported derivative order per dimension and per side.
pub const MAX_ORDER: u8 = 2;

const MAX_POLY: usize = 2 * MAX_ORDER as usize;

/// Integer coefficients of `p_n`: `p_n(δ) = Σ_j C[n][j] δ^j s^{-(n+j)/2}`.
const HERMITE: [[f64; MAX_POLY + 1]; MAX_POLY + 1] = hermite_table();

const fn hermite_table() -> [[f64; MAX_POLY + 1]; MAX_POLY + 1] {
    let mut c = [[0.0; MAX_POLY + 1]; MAX_POLY + 1];
    c[0][0] = 1.0;
    let mut n = 0;
    while n < MAX_POLY {
        let mut j = 0;
        while j <= n {
            let v = c[n][j];
            // derivative of δ^j s^{-(n+j)/2}
            if j >= 1 {
                c[n + 1][j - 1] += j as f64 * v;
            }
            // -(δ/s) · δ^j s^{-(n+j)/2}
            c[n + 1][j + 1] -= v;
            j += 1;
        }
        n += 1;
    }
    c
}

/// Log-domain SE-ARD parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArdParams {
    /// Log of the squared length-scale `s_k` of each input dimension.
    pub log_s: Vec<f64>,
    /// Log of the signal variance.
    pub log_amp: f64,
}

impl ArdParams {
    pub fn new(log_s: Vec<f64>, log_amp: f64) -> Result<Self> {
        let p = ArdParams { log_s, log_amp };
        p.validate()?;
        Ok(p)
    }

    /// `s_k = 1` for every dimension and unit amplitude.
    pub fn unit(dim: usize) -> Self {
        ArdParams {
            log_s: vec![0.0; dim],
            log_amp: 0.0,
        }
    }

    pub fn from_squared_scales(s: &[f64], amp: f64) -> Result<Self> {
        if s.iter().any(|&v| !(v > 0.0)) || !(amp > 0.0) {
            return Err(Error::schema("kernel", "scales and amplitude must be positive"));
        }
        ArdParams::new(s.iter().map(|v| v.ln()).collect(), amp.ln())
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_s.is_empty() {
            return Err(Error::DimensionMismatch("kernel needs at least one dimension".into()));
        }
        if self.log_s.iter().chain([&self.log_amp]).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel parameters".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.log_s.len()
    }

    pub fn s(&self, k: usize) -> f64 {
        self.log_s[k].exp()
    }

    pub fn amp(&self) -> f64 {
        self.log_amp.exp()
    }

    /// Exponentiated parameters ready for repeated evaluation.
    pub fn prepare(&self) -> SeArd {
        let s: Vec<f64> = self.log_s.iter().map(|v| v.exp()).collect();
        SeArd {
            inv_s: s.iter().map(|v| 1.0 / v).collect(),
            s,
            amp: self.amp(),
        }
    }
}

/// An SE-ARD kernel with exponentiated parameters. Methods do no
/// dimension checking; use the free functions for checked access.
#[derive(Clone, Debug)]
pub struct SeArd {
    s: Vec<f64>,
    inv_s: Vec<f64>,
    amp: f64,
}

impl SeArd {
    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn eval(&self, z1: &[f64], z2: &[f64]) -> f64 {
        let mut quad = 0.0;
        for k in 0..self.s.len() {
            let d = z1[k] - z2[k];
            quad += d * d * self.inv_s[k];
        }
        self.amp * (-0.5 * quad).exp()
    }

    /// `∂^a_{z1} ∂^b_{z2} κ(z1, z2)`.
    #[inline]
    pub fn deriv(&self, a: &[u8], b: &[u8], z1: &[f64], z2: &[f64]) -> f64 {
        let mut quad = 0.0;
        let mut prod = self.amp;
        for k in 0..self.s.len() {
            let d = z1[k] - z2[k];
            quad += d * d * self.inv_s[k];
            let n = (a[k] + b[k]) as usize;
            if n > 0 {
                let (p, _) = poly(n, d, self.inv_s[k]);
                prod *= if b[k] % 2 == 1 { -p } else { p };
            }
        }
        prod * (-0.5 * quad).exp()
    }

    /// Value of [`SeArd::deriv`] plus its derivative with respect to each
    /// `log s_k`, written into `d_log_s`. The derivative with respect to the
    /// log-amplitude equals the value.
    pub fn deriv_grad(
        &self,
        a: &[u8],
        b: &[u8],
        z1: &[f64],
        z2: &[f64],
        d_log_s: &mut [f64],
    ) -> f64 {
        let dim = self.s.len();
        let mut factors = [0.0f64; 8];
        let mut dfactors = [0.0f64; 8];
        let mut big_f = Vec::new();
        let mut big_df = Vec::new();
        let (f, df): (&mut [f64], &mut [f64]) = if dim <= 8 {
            (&mut factors[..dim], &mut dfactors[..dim])
        } else {
            big_f.resize(dim, 0.0);
            big_df.resize(dim, 0.0);
            (&mut big_f[..], &mut big_df[..])
        };
        let mut quad = 0.0;
        for k in 0..dim {
            let d = z1[k] - z2[k];
            let q = d * d * self.inv_s[k];
            quad += q;
            let n = (a[k] + b[k]) as usize;
            let (p, dp) = poly(n, d, self.inv_s[k]);
            let sign = if b[k] % 2 == 1 { -1.0 } else { 1.0 };
            f[k] = sign * p;
            // s d/ds of p_n(δ) exp(-δ²/2s), with the exponential factored out
            df[k] = sign * (dp + 0.5 * q * p);
        }
        let e = self.amp * (-0.5 * quad).exp();
        for k in 0..dim {
            let mut g = df[k];
            for (l, fl) in f.iter().enumerate() {
                if l != k {
                    g *= fl;
                }
            }
            d_log_s[k] = e * g;
        }
        e * f.iter().product::<f64>()
    }
}

/// `(p_n(δ), s dp_n/ds)` for the one-dimensional recurrence.
#[inline]
fn poly(n: usize, delta: f64, inv_s: f64) -> (f64, f64) {
    let row = &HERMITE[n];
    let mut p = 0.0;
    let mut dp = 0.0;
    let mut dpow = 1.0;
    for (j, &c) in row.iter().enumerate().take(n + 1) {
        if c != 0.0 {
            let e = (n + j) / 2;
            let term = c * dpow * inv_s.powi(e as i32);
            p += term;
            dp -= e as f64 * term;
        }
        dpow *= delta;
    }
    (p, dp)
}

/// A partial-derivative operator given by its per-dimension orders. The
/// all-zero multi-index is the identity (the function value).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct DerivOp {
    orders: Vec<u8>,
}

impl TryFrom<Vec<u8>> for DerivOp {
    type Error = Error;

    fn try_from(orders: Vec<u8>) -> Result<Self> {
        DerivOp::new(orders)
    }
}

impl From<DerivOp> for Vec<u8> {
    fn from(op: DerivOp) -> Vec<u8> {
        op.orders
    }
}

impl DerivOp {
    pub fn new(orders: Vec<u8>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::DimensionMismatch("derivative operator needs a dimension".into()));
        }
        if let Some(&o) = orders.iter().find(|&&o| o > MAX_ORDER) {
            return Err(Error::UnsupportedOrder(format!(
                "order {o} exceeds the per-dimension maximum of {MAX_ORDER}"
            )));
        }
        Ok(DerivOp { orders })
    }

    pub fn value(dim: usize) -> Self {
        DerivOp {
            orders: vec![0; dim],
        }
    }

    /// `∂^order / ∂z_k^order` in a `dim`-dimensional input space.
    pub fn partial(dim: usize, k: usize, order: u8) -> Result<Self> {
        if k >= dim {
            return Err(Error::IndexOutOfRange(format!("dimension {k} of {dim}")));
        }
        let mut orders = vec![0; dim];
        orders[k] = order;
        DerivOp::new(orders)
    }

    pub fn orders(&self) -> &[u8] {
        &self.orders
    }

    pub fn dim(&self) -> usize {
        self.orders.len()
    }

    pub fn total_order(&self) -> u32 {
        self.orders.iter().map(|&o| o as u32).sum()
    }

    pub fn is_value(&self) -> bool {
        self.orders.iter().all(|&o| o == 0)
    }
}

/// A set of points of a common dimension, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates do not form points of dimension {dim}",
                data.len()
            )));
        }
        Ok(PointSet { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        PointSet {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_points(dim: usize, points: &[Vec<f64>]) -> Result<Self> {
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch(format!("points must have dimension {dim}")));
        }
        PointSet::new(dim, points.concat())
    }

    /// One-dimensional points.
    pub fn from_scalars(values: &[f64]) -> Self {
        PointSet {
            dim: 1,
            data: values.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn push(&mut self, z: &[f64]) {
        assert_eq!(z.len(), self.dim, "point dimension");
        self.data.extend_from_slice(z);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointSet {
        let mut out = PointSet::empty(self.dim);
        for &i in indices {
            out.push(self.point(i));
        }
        out
    }
}

fn check_dims(a: &DerivOp, b: &DerivOp, z1: &[f64], z2: &[f64], p: &ArdParams) -> Result<()> {
    let d = p.dim();
    if a.dim() != d || b.dim() != d || z1.len() != d || z2.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "kernel dim {d}, operators ({}, {}), points ({}, {})",
            a.dim(),
            b.dim(),
            z1.len(),
            z2.len()
        )));
    }
    if z1.iter().chain(z2).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel inputs".into()));
    }
    p.validate()
}

/// The SE-ARD kernel value.
pub fn se_ard(z1: &[f64], z2: &[f64], p: &ArdParams) -> Result<f64> {
    let id = DerivOp::value(p.dim());
    check_dims(&id, &id, z1, z2, p)?;
    Ok(p.prepare().eval(z1, z2))
}

/// `cov(∂^a u(z1), ∂^b u(z2)) = ∂^a_{z1} ∂^b_{z2} κ(z1, z2)`.
pub fn deriv_cov(a: &DerivOp, b: &DerivOp, z1: &[f64], z2: &[f64], p: &ArdParams) -> Result<f64> {
    check_dims(a, b, z1, z2, p)?;
    Ok(p.prepare().deriv(a.orders(), b.orders(), z1, z2))
}

/// [`deriv_cov`] with its gradient with respect to the log-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivCovGrad {
    pub value: f64,
    pub d_log_s: Vec<f64>,
    pub d_log_amp: f64,
}

pub fn deriv_cov_grad(
    a: &DerivOp,
    b: &DerivOp,
    z1: &[f64],
    z2: &[f64],
    p: &ArdParams,
) -> Result<DerivCovGrad> {
    check_dims(a, b, z1, z2, p)?;
    let mut d_log_s = vec![0.0; p.dim()];
    let value = p
        .prepare()
        .deriv_grad(a.orders(), b.orders(), z1, z2, &mut d_log_s);
    Ok(DerivCovGrad {
        value,
        d_log_s,
        d_log_amp: value,
    })
}

/// One segment of a covariance matrix: an operator applied at a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct CovBlock {
    pub op: DerivOp,
    pub points: PointSet,
}

/// The symmetric covariance over every (operator, point) pair of `blocks`,
/// concatenated in order. Only the upper triangle is evaluated; the lower
/// triangle is a mirror, so the result is exactly symmetric.
pub fn cov_matrix(blocks: &[CovBlock], p: &ArdParams) -> Result<Matrix> {
    p.validate()?;
    let entries = flatten(blocks, p.dim())?;
    let kern = p.prepare();
    let n = entries.len();
    let mut m = Matrix::zeros(n, n);
    par::for_each_row(m.as_mut_slice(), n, |i, row| {
        let (ai, zi) = entries[i];
        for j in i..n {
            let (bj, zj) = entries[j];
            row[j] = kern.deriv(ai, bj, zi, zj);
        }
    });
    mirror_upper(&mut m);
    Ok(m)
}

fn flatten<'a>(blocks: &'a [CovBlock], d: usize) -> Result<Vec<(&'a [u8], &'a [f64])>> {
    let mut entries = Vec::new();
    for block in blocks {
        if block.op.dim() != d || block.points.dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "block of dimension {}/{} against kernel of dimension {d}",
                block.op.dim(),
                block.points.dim()
            )));
        }
        if block.points.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance inputs".into()));
        }
        entries.extend(block.points.iter().map(|z| (block.op.orders(), z)));
    }
    Ok(entries)
}

fn mirror_upper(m: &mut Matrix) {
    let n = m.rows();
    for i in 0..n {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// [`cov_matrix`] together with its derivative with respect to each
/// `log s_k`. The derivative with respect to the log-amplitude is the
/// matrix itself.
pub fn cov_matrix_with_grad(blocks: &[CovBlock], p: &ArdParams) -> Result<(Matrix, Vec<Matrix>)> {
    p.validate()?;
    let d = p.dim();
    let entries = flatten(blocks, d)?;
    let kern = p.prepare();
    let n = entries.len();
    // one row of (value, d_log_s_0, …) interleaved per entry
    let stride = n * (d + 1);
    let mut buf = vec![0.0; n * stride];
    par::for_each_row(&mut buf, stride, |i, row| {
        let (ai, zi) = entries[i];
        let mut g = [0.0; 8];
        let mut big = vec![0.0; if d > 8 { d } else { 0 }];
        let gs: &mut [f64] = if d <= 8 { &mut g[..d] } else { &mut big };
        for j in i..n {
            let (bj, zj) = entries[j];
            let v = kern.deriv_grad(ai, bj, zi, zj, gs);
            let cell = &mut row[j * (d + 1)..(j + 1) * (d + 1)];
            cell[0] = v;
            cell[1..].copy_from_slice(gs);
        }
    });
    let mut value = Matrix::zeros(n, n);
    let mut grads = vec![Matrix::zeros(n, n); d];
    for i in 0..n {
        for j in i..n {
            let cell = &buf[i * stride + j * (d + 1)..i * stride + (j + 1) * (d + 1)];
            value[(i, j)] = cell[0];
            for k in 0..d {
                grads[k][(i, j)] = cell[k + 1];
            }
        }
    }
    mirror_upper(&mut value);
    for g in &mut grads {
        mirror_upper(g);
    }
    Ok((value, grads))
}

/// Rectangular covariance between the entries of `rows` and of `cols`.
pub fn cross_cov_matrix(rows: &[CovBlock], cols: &[CovBlock], p: &ArdParams) -> Result<Matrix> {
    p.validate()?;
    let d = p.dim();
    let left = flatten(rows, d)?;
    let right = flatten(cols, d)?;
    let kern = p.prepare();
    let mut m = Matrix::zeros(left.len(), right.len());
    par::for_each_row(m.as_mut_slice(), right.len(), |i, row| {
        let (ai, zi) = left[i];
        for (cell, &(bj, zj)) in row.iter_mut().zip(&right) {
            *cell = kern.deriv(ai, bj, zi, zj);
        }
    });
    Ok(m)
}
