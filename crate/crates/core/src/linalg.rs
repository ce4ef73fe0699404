//! Dense symmetric linear algebra.
//!
//! Row-major storage throughout. The Cholesky factor is produced with an
//! escalating diagonal jitter, and [`cholesky_backward`] propagates adjoints
//! of the factor back to the factored matrix so that gradients can flow
//! through `Σ = A Aᵀ`.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// A dense matrix stored in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn mean_diagonal(&self) -> f64 {
        let d = self.diagonal();
        if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        }
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += value;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for (j, &v) in self.row(i).iter().enumerate() {
                t.data[j * self.rows + i] = v;
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let cols = other.cols;
        par::for_each_row(&mut out.data, cols, |i, out_row| {
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(out_row, other.row(k), a);
                }
            }
        });
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cols != x.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|a_ij - a_ji|`, relative to `max(1, max |a|)`.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / self.max_abs().max(1.0)
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..i {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch("matrix subtraction".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Frobenius inner product `Σ a_ij b_ij`.
    pub fn inner(&self, other: &Matrix) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// A square lower-triangular matrix; strictly-upper entries are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct LowerTriangular(Matrix);

impl TryFrom<Matrix> for LowerTriangular {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        LowerTriangular::new(m)
    }
}

impl From<LowerTriangular> for Matrix {
    fn from(l: LowerTriangular) -> Matrix {
        l.0
    }
}

impl LowerTriangular {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "lower-triangular factor must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        for i in 0..m.rows {
            for j in i + 1..m.cols {
                if m[(i, j)] != 0.0 {
                    return Err(Error::DimensionMismatch(format!(
                        "entry ({i},{j}) above the diagonal is nonzero"
                    )));
                }
            }
        }
        Ok(LowerTriangular(m))
    }

    /// Keeps the lower triangle of `m` and zeroes the rest.
    pub fn from_lower_part(mut m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch("lower part of non-square matrix".into()));
        }
        for i in 0..m.rows {
            for j in i + 1..m.cols {
                m[(i, j)] = 0.0;
            }
        }
        Ok(LowerTriangular(m))
    }

    pub fn identity(n: usize) -> Self {
        LowerTriangular(Matrix::identity(n))
    }

    pub fn from_diagonal(values: &[f64]) -> Self {
        LowerTriangular(Matrix::from_diagonal(values))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Row `i` up to and including the diagonal.
    #[inline]
    pub fn row_prefix(&self, i: usize) -> &[f64] {
        &self.0.row(i)[..=i]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal()
    }

    /// `Σ log L_ii`; for a Cholesky factor this is half the log-determinant.
    pub fn sum_log_diagonal(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].ln()).sum()
    }

    /// `L x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| dot(self.row_prefix(i), &x[..=i]))
            .collect()
    }

    /// `Lᵀ x`.
    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (i, &xi) in x.iter().enumerate() {
            axpy(&mut out[..=i], self.row_prefix(i), xi);
        }
        out
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dot(&self.row_prefix(i)[..=j], self.row_prefix(j));
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    fn check_diagonal(&self) -> Result<()> {
        for i in 0..self.dim() {
            if self.0[(i, i)].abs() < 1e-300 {
                return Err(Error::SingularDiagonal(i));
            }
        }
        Ok(())
    }

    /// Solves `L x = b` (or `Lᵀ x = b`) in place.
    pub fn solve_in_place(&self, x: &mut [f64], mode: TriMode) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "triangular solve with dim {} and rhs length {}",
                self.dim(),
                x.len()
            )));
        }
        self.check_diagonal()?;
        self.solve_unchecked(x, mode);
        Ok(())
    }

    pub fn solve(&self, b: &[f64], mode: TriMode) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x, mode)?;
        Ok(x)
    }

    /// Forward substitution on each length-`dim` row of `rows`, with every
    /// row of the factor read once per group.
    fn forward_group(&self, rows: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let row = self.row_prefix(i);
            let head = &row[..i];
            for x in rows.chunks_mut(n) {
                let s = x[i] - dot(head, &x[..i]);
                x[i] = s / row[i];
            }
        }
    }

    #[inline]
    pub(crate) fn solve_unchecked(&self, x: &mut [f64], mode: TriMode) {
        let n = self.dim();
        match mode {
            TriMode::Lower => {
                for i in 0..n {
                    let row = self.row_prefix(i);
                    let s = x[i] - dot(&row[..i], &x[..i]);
                    x[i] = s / row[i];
                }
            }
            TriMode::LowerTransposed => {
                for i in (0..n).rev() {
                    let row = self.row_prefix(i);
                    let xi = x[i] / row[i];
                    x[i] = xi;
                    axpy(&mut x[..i], &row[..i], -xi);
                }
            }
        }
    }
}

/// Which triangular system to solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriMode {
    /// `L X = B`
    Lower,
    /// `Lᵀ X = B`
    LowerTransposed,
}

/// Jitter ladder used when a covariance matrix fails to factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterPolicy {
    pub initial: f64,
    pub growth: f64,
    pub max_tries: usize,
    pub scale_by_mean_diag: bool,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            initial: 1e-8,
            growth: 10.0,
            max_tries: 8,
            scale_by_mean_diag: true,
        }
    }
}

impl JitterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0) || !(self.growth > 1.0) || self.max_tries < 1 {
            return Err(Error::schema(
                "jitter",
                "need initial > 0, growth > 1 and max_tries >= 1",
            ));
        }
        Ok(())
    }

    /// The diagonal multiplier for a given jitter level.
    pub fn scale(&self, s: &Matrix) -> f64 {
        if self.scale_by_mean_diag {
            s.mean_diagonal()
        } else {
            1.0
        }
    }

    fn ladder(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(0.0)
            .chain((0..self.max_tries).map(|k| self.initial * self.growth.powi(k as i32)))
    }
}

/// Cholesky factorization with escalating jitter.
///
/// Returns `(L, jitter)` with `L Lᵀ = S + jitter · scale · I`, where `scale`
/// is the mean diagonal of `S` (or 1 when the policy disables scaling).
/// `jitter` is the first rung of the ladder `0, initial, initial·growth, …`
/// for which the factorization succeeds.
pub fn cholesky(s: &Matrix, policy: &JitterPolicy) -> Result<(LowerTriangular, f64)> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of non-square {}x{} matrix",
            s.rows, s.cols
        )));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("matrix passed to cholesky".into()));
    }
    let asym = s.asymmetry();
    if asym > 1e-10 {
        return Err(Error::NotSymmetric(asym));
    }
    let scale = policy.scale(s);
    for jitter in policy.ladder() {
        if let Some(l) = factor(s, jitter * scale) {
            return Ok((LowerTriangular(l), jitter));
        }
    }
    Err(Error::NotPositiveDefinite {
        tries: policy.max_tries,
    })
}

/// Factors `S + shift·I` with no retry.
#[cfg(test)]
pub(crate) fn cholesky_shifted(s: &Matrix, shift: f64) -> Result<LowerTriangular> {
    factor(s, shift)
        .map(LowerTriangular)
        .ok_or(Error::NotPositiveDefinite { tries: 1 })
}

// Cholesky–Banachiewicz, row by row; all inner products are over contiguous
// row prefixes.
fn factor(s: &Matrix, shift: f64) -> Option<Matrix> {
    let n = s.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        let (done, rest) = l.data.split_at_mut(i * n);
        let row_i = &mut rest[..n];
        for j in 0..i {
            let acc = dot(&row_i[..j], &done[j * n..j * n + j]);
            row_i[j] = (s[(i, j)] - acc) / done[j * n + j];
        }
        let d = s[(i, i)] + shift - dot(&row_i[..i], &row_i[..i]);
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        row_i[i] = d.sqrt();
    }
    Some(l)
}

/// Solves `L X = B` or `Lᵀ X = B` for a matrix right-hand side.
pub fn tri_solve(l: &LowerTriangular, b: &Matrix, mode: TriMode) -> Result<Matrix> {
    if l.dim() != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "triangular solve with dim {} and {} rhs rows",
            l.dim(),
            b.rows
        )));
    }
    Ok(solve_rows(l, &b.transpose(), mode)?.transpose())
}

/// Solves one triangular system per row of `rhs`: row `r` of the result is
/// `L⁻¹ rhs_r` (or `L⁻ᵀ rhs_r`).
pub fn solve_rows(l: &LowerTriangular, rhs: &Matrix, mode: TriMode) -> Result<Matrix> {
    if l.dim() != rhs.cols {
        return Err(Error::DimensionMismatch(format!(
            "triangular solve with dim {} and rhs rows of length {}",
            l.dim(),
            rhs.cols
        )));
    }
    l.check_diagonal()?;
    let mut out = rhs.clone();
    let cols = out.cols;
    match mode {
        TriMode::Lower => par::for_each_row_group(&mut out.data, cols, RHS_GROUP, |_, rows| l.forward_group(rows)),
        TriMode::LowerTransposed => {
            let upper = l.0.transpose();
            par::for_each_row_group(&mut out.data, cols, RHS_GROUP, |_, rows| {
                back_substitute_group(&upper, rows, None)
            });
        }
    }
    Ok(out)
}

/// Solves `U x = b` on each row of `rows` for upper triangular `U`, using
/// contiguous rows of `U`. With `Some(first)`, the row at global index
/// `first + r` is only solved for entries `i ≥ first + r`; the rest are left
/// untouched.
fn back_substitute_group(upper: &Matrix, rows: &mut [f64], first: Option<usize>) {
    let n = upper.rows;
    let count = rows.len() / n;
    for i in (0..n).rev() {
        let u = upper.row(i);
        let tail = &u[i + 1..];
        let active = match first {
            Some(f) => (i + 1).saturating_sub(f).min(count),
            None => count,
        };
        for x in rows.chunks_mut(n).take(active) {
            let s = x[i] - dot(tail, &x[i + 1..]);
            x[i] = s / u[i];
        }
    }
}

/// Right-hand sides solved together, so that each row of the factor is
/// read once per group instead of once per system.
const RHS_GROUP: usize = 8;

/// `S⁻¹ = L⁻ᵀ L⁻¹` from the factor `L` of `S`.
pub fn cholesky_inverse(l: &LowerTriangular) -> Result<Matrix> {
    let n = l.dim();
    // Row r of `inv_t` is L⁻¹ e_r, i.e. column r of L⁻¹.
    let inv_t = solve_rows(l, &Matrix::identity(n), TriMode::Lower)?;
    let mut out = Matrix::zeros(n, n);
    par::for_each_row(&mut out.data, n, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            let lo = i.max(j);
            *v = dot(&inv_t.row(i)[lo..], &inv_t.row(j)[lo..]);
        }
    });
    Ok(out)
}

/// Reverse-mode adjoint of `S ↦ chol(S)`.
///
/// Given the factor `L` and the adjoint `L̄` of a scalar objective with
/// respect to it, returns the symmetric `S̄` with `⟨S̄, dS⟩ = ⟨L̄, dL⟩` for
/// every symmetric perturbation `dS`:
///
/// `S̄ = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)`, where `Φ` keeps the lower triangle and
/// halves the diagonal.
pub fn cholesky_backward(l: &LowerTriangular, l_adj: &LowerTriangular) -> Result<Matrix> {
    let n = l.dim();
    if l_adj.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "factor dim {} vs adjoint dim {}",
            n,
            l_adj.dim()
        )));
    }
    l.check_diagonal()?;

    // Φ(Lᵀ L̄): entry (i, j ≤ i) is Σ_{k ≥ i} L_ki L̄_kj.
    let mut phi = Matrix::zeros(n, n);
    par::for_each_row_group(&mut phi.data, n, RHS_GROUP, |first, rows| {
        let count = rows.len() / n;
        for k in first..n {
            let adj_row = l_adj.row_prefix(k);
            let l_row = l.row_prefix(k);
            for (r, row) in rows.chunks_mut(n).enumerate() {
                let i = first + r;
                if k < i {
                    continue;
                }
                let lki = l_row[i];
                if lki != 0.0 {
                    axpy(&mut row[..=i], &adj_row[..=i], lki);
                }
            }
        }
        for r in 0..count {
            rows[r * n + first + r] *= 0.5;
        }
    });

    // sym(L⁻ᵀ Φ L⁻¹) = ½ L⁻ᵀ M L⁻¹ with M = Φ + Φᵀ. Rows of Yᵀ = M L⁻¹
    // come from full solves; X = Y L⁻¹ is symmetric, so each of its rows is
    // solved only on and above the diagonal.
    let mut m = phi.transpose();
    for (a, b) in m.data.iter_mut().zip(&phi.data) {
        *a += b;
    }
    let y = solve_rows(l, &m, TriMode::LowerTransposed)?.transpose();
    let upper = l.0.transpose();
    let mut x = y;
    par::for_each_row_group(&mut x.data, n, RHS_GROUP, |first, rows| {
        back_substitute_group(&upper, rows, Some(first))
    });
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * x.data[j * n + i];
            x.data[i * n + j] = v;
            x.data[j * n + i] = v;
        }
        x.data[i * n + i] *= 0.5;
    }
    Ok(x)
}

/// Inner product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..n {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize, seed: u64) -> Matrix {
        // Deterministic pseudo-random SPD matrix: B Bᵀ + n I.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let b = Matrix::from_fn(n, n, |_, _| next());
        let mut s = b.matmul(&b.transpose()).unwrap();
        s.add_diagonal(n as f64);
        s.symmetrized()
    }

    fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    #[test]
    fn identity_factors_to_identity() {
        let (l, j) = cholesky(&Matrix::identity(3), &JitterPolicy::default()).unwrap();
        assert_eq!(j, 0.0);
        assert_eq!(l.as_matrix(), &Matrix::identity(3));
    }

    #[test]
    fn two_by_two_factor() {
        let s = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let (l, j) = cholesky(&s, &JitterPolicy::default()).unwrap();
        assert_eq!(j, 0.0);
        assert_eq!(l.as_matrix()[(0, 0)], 2.0);
        assert_eq!(l.as_matrix()[(1, 0)], 1.0);
        assert!((l.as_matrix()[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
        assert!(rel_frob(&l.reconstruct(), &s) < 1e-10);
    }

    #[test]
    fn singular_matrix_needs_jitter() {
        let s = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let policy = JitterPolicy::default();
        let (l, j) = cholesky(&s, &policy).unwrap();
        assert!(j > 0.0);
        let mut shifted = s.clone();
        shifted.add_diagonal(j * s.mean_diagonal());
        assert!(rel_frob(&l.reconstruct(), &shifted) < 1e-10);
        // smallest rung: the previous rung must fail
        let prev = if j == policy.initial { 0.0 } else { j / policy.growth };
        assert!(factor(&s, prev * s.mean_diagonal()).is_none());
    }

    #[test]
    fn cholesky_errors() {
        let neg = Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert!(matches!(
            cholesky(&neg, &JitterPolicy::default()),
            Err(Error::NotPositiveDefinite { tries: 8 })
        ));
        let mut nan = Matrix::identity(2);
        nan.as_mut_slice()[1] = f64::NAN;
        assert!(matches!(
            cholesky(&nan, &JitterPolicy::default()),
            Err(Error::NonFinite(_))
        ));
        let asym = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(
            cholesky(&asym, &JitterPolicy::default()),
            Err(Error::NotSymmetric(_))
        ));
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn reconstruction_on_random_spd() {
        for n in 1..12 {
            let s = spd(n, n as u64);
            let (l, j) = cholesky(&s, &JitterPolicy::default()).unwrap();
            assert_eq!(j, 0.0);
            assert!(rel_frob(&l.reconstruct(), &s) < 1e-10, "n={n}");
        }
    }

    #[test]
    fn tri_solve_cases() {
        let l = LowerTriangular::identity(3);
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(tri_solve(&l, &b, TriMode::Lower).unwrap(), b);

        let l = LowerTriangular::new(
            Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap(),
        )
        .unwrap();
        let b = Matrix::from_rows(&[vec![4.0], vec![3.0]]).unwrap();
        let x = tri_solve(&l, &b, TriMode::Lower).unwrap();
        let back = l.as_matrix().matmul(&x).unwrap();
        assert!(rel_frob(&back, &b) < 1e-12);
        assert_eq!(x[(0, 0)], 2.0);

        let d = LowerTriangular::from_diagonal(&[2.0, 4.0]);
        let b = Matrix::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let x = tri_solve(&d, &b, TriMode::LowerTransposed).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 1.0]);

        assert!(matches!(
            tri_solve(&d, &Matrix::zeros(3, 1), TriMode::Lower),
            Err(Error::DimensionMismatch(_))
        ));
        let sing = LowerTriangular::from_diagonal(&[1.0, 0.0]);
        assert!(matches!(
            tri_solve(&sing, &b, TriMode::Lower),
            Err(Error::SingularDiagonal(1))
        ));
    }

    #[test]
    fn transposed_solve_matches_transpose_multiply() {
        let s = spd(6, 3);
        let (l, _) = cholesky(&s, &JitterPolicy::default()).unwrap();
        let b = Matrix::from_fn(6, 3, |i, j| (i * 3 + j) as f64 - 4.0);
        let x = tri_solve(&l, &b, TriMode::LowerTransposed).unwrap();
        let back = l.as_matrix().transpose().matmul(&x).unwrap();
        assert!(rel_frob(&back, &b) < 1e-12);
    }

    #[test]
    fn cholesky_inverse_inverts() {
        let s = spd(7, 11);
        let (l, _) = cholesky(&s, &JitterPolicy::default()).unwrap();
        let inv = cholesky_inverse(&l).unwrap();
        let prod = s.matmul(&inv).unwrap();
        assert!(rel_frob(&prod, &Matrix::identity(7)) < 1e-12);
    }

    #[test]
    fn backward_trivial_cases() {
        let l = LowerTriangular::identity(3);
        let zero = LowerTriangular::new(Matrix::zeros(3, 3)).unwrap();
        assert_eq!(cholesky_backward(&l, &zero).unwrap(), Matrix::zeros(3, 3));

        let l = LowerTriangular::from_diagonal(&[2.0]);
        let adj = LowerTriangular::from_diagonal(&[1.0]);
        let s_adj = cholesky_backward(&l, &adj).unwrap();
        assert!((s_adj[(0, 0)] - 0.25).abs() < 1e-15);

        assert!(cholesky_backward(&l, &LowerTriangular::identity(2)).is_err());
    }

    #[test]
    fn matrix_helpers() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.transpose()[(0, 1)], 3.0);
        assert_eq!(a.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        assert_eq!(a.mean_diagonal(), 2.5);
        assert_eq!(a.symmetrized()[(0, 1)], 2.5);
        let l = LowerTriangular::from_lower_part(a.clone()).unwrap();
        assert_eq!(l.matvec(&[1.0, 1.0]), vec![1.0, 7.0]);
        assert_eq!(l.t_matvec(&[1.0, 1.0]), vec![4.0, 4.0]);
        assert!(LowerTriangular::new(a).is_err());
    }
}
