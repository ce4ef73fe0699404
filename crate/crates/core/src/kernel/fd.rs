//! Finite-difference reference for derivative covariances.
//!
//! Mixed derivatives up to order eight lose far too many digits to central
//! differences in plain `f64`, so the kernel and the stencil sums are
//! evaluated in double-double arithmetic (about 32 significant digits).
//! Step sizes are powers of two so that every division by `h` is exact.

use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

use super::ArdParams;

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    const LN2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    fn from_f64(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    fn diff(a: f64, b: f64) -> Dd {
        let (hi, lo) = two_sum(a, -b);
        Dd { hi, lo }
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// Exact multiplication by a power of two.
    fn ldexp(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    fn div(self, y: Dd) -> Dd {
        let q1 = self.hi / y.hi;
        let r = self - y * Dd::from_f64(q1);
        let q2 = r.hi / y.hi;
        let r = r - y * Dd::from_f64(q2);
        let q3 = r.hi / y.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from_f64(q3)
    }

    fn exp(self) -> Dd {
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = (self - Dd::LN2 * Dd::from_f64(k)).ldexp(-4);
        let mut sum = Dd::from_f64(1.0);
        let mut term = Dd::from_f64(1.0);
        for i in 1..=22 {
            term = (term * r).div(Dd::from_f64(i as f64));
            sum = sum + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..4 {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }
}

impl Add for Dd {
    type Output = Dd;

    fn add(self, y: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, y.hi);
        let (t, f) = two_sum(self.lo, y.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;

    fn sub(self, y: Dd) -> Dd {
        self + (-y)
    }
}

impl Mul for Dd {
    type Output = Dd;

    fn mul(self, y: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, y.hi);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * y.lo + self.lo * y.hi));
        Dd { hi, lo }
    }
}

/// One differentiated coordinate: which point, which dimension, what order.
#[derive(Clone, Copy)]
struct Axis {
    second_point: bool,
    dim: usize,
    order: u8,
    log2_h: i32,
}

/// Stencil offsets (in units of `h`) and integer weights for central
/// differences of order one and two.
fn stencil(order: u8) -> &'static [(i32, f64)] {
    match order {
        1 => &[(-1, -1.0), (1, 1.0)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        _ => unreachable!("only first and second differences are used"),
    }
}

/// SE-ARD value in double-double at `z1 + off1·h`, `z2 + off2·h`.
fn se_dd(z1: &[f64], z2: &[f64], off: &[i32], axes: &[Axis], s: &[f64], amp: f64, shift: i32) -> Dd {
    let d = z1.len();
    let mut quad = Dd::ZERO;
    for k in 0..d {
        let mut delta = Dd::diff(z1[k], z2[k]);
        for (ax, &o) in axes.iter().zip(off) {
            if ax.dim == k && o != 0 {
                let step = Dd::from_f64(o as f64).ldexp(ax.log2_h - shift);
                delta = if ax.second_point { delta - step } else { delta + step };
            }
        }
        quad = quad + (delta * delta).div(Dd::from_f64(s[k]));
    }
    Dd::from_f64(amp) * (-quad.ldexp(-1)).exp()
}

/// Tensor-product central difference with every step divided by `2^shift`.
fn stencil_sum(z1: &[f64], z2: &[f64], axes: &[Axis], s: &[f64], amp: f64, shift: i32) -> Dd {
    let mut total = Dd::ZERO;
    let mut off = vec![0i32; axes.len()];
    let mut idx = vec![0usize; axes.len()];
    loop {
        let mut w = 1.0;
        for (j, ax) in axes.iter().enumerate() {
            let (o, wj) = stencil(ax.order)[idx[j]];
            off[j] = o;
            w *= wj;
        }
        total = total + Dd::from_f64(w) * se_dd(z1, z2, &off, axes, s, amp, shift);
        // odometer over stencil indices
        let mut j = 0;
        loop {
            if j == axes.len() {
                let mut scale = 0i32;
                for ax in axes {
                    scale += ax.order as i32 * (ax.log2_h - shift);
                    if ax.order == 1 {
                        scale += 1;
                    }
                }
                return total.ldexp(-scale);
            }
            idx[j] += 1;
            if idx[j] < stencil(axes[j].order).len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Central-difference estimate of `∂^a_{z1} ∂^b_{z2} κ(z1, z2)` taken
/// directly from the SE-ARD kernel, with one Richardson extrapolation.
///
/// `step` is relative to the length-scale: dimension `k` uses the power of
/// two nearest to `step·√s_k` (default `step = 1e-2`). Orders are raw
/// multi-indices so that totals beyond the supported range can be rejected.
pub fn fd_deriv_cov(
    a: &[u8],
    b: &[u8],
    z1: &[f64],
    z2: &[f64],
    p: &ArdParams,
    step: Option<f64>,
) -> Result<f64> {
    let d = p.dim();
    if a.len() != d || b.len() != d || z1.len() != d || z2.len() != d {
        return Err(Error::DimensionMismatch("finite-difference oracle inputs".into()));
    }
    p.validate()?;
    for k in 0..d {
        if a[k] + b[k] > 4 {
            return Err(Error::UnsupportedOrder(format!(
                "total order {} in dimension {k} exceeds 4",
                a[k] + b[k]
            )));
        }
    }
    if a.iter().chain(b).all(|&o| o == 0) {
        return Ok(p.prepare().eval(z1, z2));
    }
    let rel = step.unwrap_or(1e-2);
    if !(rel > 0.0 && rel.is_finite()) {
        return Err(Error::schema("step", "must be positive"));
    }
    let s: Vec<f64> = (0..d).map(|k| p.s(k)).collect();
    let mut axes = Vec::new();
    for (second_point, orders) in [(false, a), (true, b)] {
        for (k, &o) in orders.iter().enumerate() {
            let log2_h = (rel * s[k].sqrt()).log2().round() as i32;
            // split orders above two into repeated first/second differences
            let mut left = o;
            while left > 0 {
                let take = left.min(2);
                axes.push(Axis {
                    second_point,
                    dim: k,
                    order: take,
                    log2_h,
                });
                left -= take;
            }
        }
    }
    let amp = p.amp();
    let coarse = stencil_sum(z1, z2, &axes, &s, amp, 0);
    let fine = stencil_sum(z1, z2, &axes, &s, amp, 1);
    let extrapolated = (fine.ldexp(2) - coarse).div(Dd::from_f64(3.0));
    Ok(extrapolated.to_f64())
}
