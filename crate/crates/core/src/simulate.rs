//! Ground-truth solvers and seeded sampling of datasets and collocation
//! points.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::PointSet;
use crate::rng::SeedStream;

/// A closed interval `[lo, hi]`, written `[lo, hi]` in configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::schema("interval", format!("[{lo}, {hi}] is not a finite interval")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn covers(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }
}

impl TryFrom<[f64; 2]> for Interval {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

/// A ground-truth function that can be sampled.
pub trait Solution {
    /// Box on which `value` is defined.
    fn domain(&self) -> Vec<Interval>;

    fn value(&self, z: &[f64]) -> Result<f64>;

    fn dim(&self) -> usize {
        self.domain().len()
    }
}

fn check_in_domain(domain: &[Interval], z: &[f64]) -> Result<()> {
    if z.len() != domain.len() {
        return Err(Error::DimensionMismatch(format!(
            "point of dimension {} for a domain of dimension {}",
            z.len(),
            domain.len()
        )));
    }
    for (k, (iv, v)) in domain.iter().zip(z).enumerate() {
        if !iv.contains(*v) {
            return Err(Error::RangeOutOfDomain {
                path: format!("x{k}"),
                message: format!("{v} outside [{}, {}]", iv.lo, iv.hi),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumConfig {
    pub theta0: f64,
    pub omega0: f64,
    pub damping_b: f64,
    pub step: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        PendulumConfig {
            theta0: 0.75 * PI,
            omega0: 0.0,
            damping_b: 0.0,
            step: 1e-3,
        }
    }
}

impl PendulumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::schema("pendulum.step", "must be positive"));
        }
        if !(self.damping_b >= 0.0 && self.damping_b.is_finite()) {
            return Err(Error::schema("pendulum.damping_b", "must be non-negative"));
        }
        if !(self.theta0.is_finite() && self.omega0.is_finite()) {
            return Err(Error::schema("pendulum", "initial state must be finite"));
        }
        Ok(())
    }
}

/// `θ` and `ω = θ'` on the fixed step grid `t_i = i·step`.
#[derive(Clone, Debug, PartialEq)]
pub struct PendulumSolution {
    step: f64,
    damping_b: f64,
    theta: Vec<f64>,
    omega: Vec<f64>,
}

impl PendulumSolution {
    pub fn t_end(&self) -> f64 {
        (self.theta.len() - 1) as f64 * self.step
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        check_in_domain(&self.domain(), &[t])?;
        let pos = t / self.step;
        let i = (pos.floor() as usize).min(self.theta.len() - 2);
        Ok((i, pos - i as f64))
    }

    pub fn theta_at(&self, t: f64) -> Result<f64> {
        let (i, w) = self.locate(t)?;
        Ok((1.0 - w) * self.theta[i] + w * self.theta[i + 1])
    }

    pub fn omega_at(&self, t: f64) -> Result<f64> {
        let (i, w) = self.locate(t)?;
        Ok((1.0 - w) * self.omega[i] + w * self.omega[i + 1])
    }

    /// `½ω² − cos θ` on the step grid.
    pub fn energy(&self) -> Vec<f64> {
        self.theta
            .iter()
            .zip(&self.omega)
            .map(|(th, om)| 0.5 * om * om - th.cos())
            .collect()
    }

    pub fn damping(&self) -> f64 {
        self.damping_b
    }

    pub fn step(&self) -> f64 {
        self.step
    }
}

impl Solution for PendulumSolution {
    fn domain(&self) -> Vec<Interval> {
        vec![Interval {
            lo: 0.0,
            hi: self.t_end(),
        }]
    }

    fn value(&self, z: &[f64]) -> Result<f64> {
        check_in_domain(&self.domain(), z)?;
        self.theta_at(z[0])
    }
}

/// RK4 for `θ'' + b θ' + sin θ = 0` up to at least `t_end`.
pub fn integrate_pendulum(cfg: &PendulumConfig, t_end: f64) -> Result<PendulumSolution> {
    cfg.validate()?;
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::schema("t_end", "must be a non-negative time"));
    }
    let steps = ((t_end / cfg.step).ceil() as usize).max(1);
    let b = cfg.damping_b;
    let rhs = |th: f64, om: f64| (om, -b * om - th.sin());
    let h = cfg.step;
    let mut theta = Vec::with_capacity(steps + 1);
    let mut omega = Vec::with_capacity(steps + 1);
    let (mut th, mut om) = (cfg.theta0, cfg.omega0);
    theta.push(th);
    omega.push(om);
    for _ in 0..steps {
        let k1 = rhs(th, om);
        let k2 = rhs(th + 0.5 * h * k1.0, om + 0.5 * h * k1.1);
        let k3 = rhs(th + 0.5 * h * k2.0, om + 0.5 * h * k2.1);
        let k4 = rhs(th + h * k3.0, om + h * k3.1);
        th += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        om += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        theta.push(th);
        omega.push(om);
    }
    Ok(PendulumSolution {
        step: h,
        damping_b: b,
        theta,
        omega,
    })
}

/// `θ` at the query times, interpolated linearly on the step grid.
pub fn solve_pendulum(cfg: &PendulumConfig, query_times: &[f64]) -> Result<Vec<f64>> {
    if let Some(t) = query_times.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Error::RangeOutOfDomain {
            path: "query_times".into(),
            message: format!("{t} is not a non-negative time"),
        });
    }
    let t_end = query_times.iter().cloned().fold(0.0, f64::max);
    let sol = integrate_pendulum(cfg, t_end)?;
    query_times.iter().map(|&t| sol.theta_at(t)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllenCahnConfig {
    pub nu: f64,
    /// Reaction strength in `γ(u³ − u)`; zero gives pure diffusion.
    pub gamma: f64,
    pub grid_x: usize,
    pub dt: f64,
    pub t_end: f64,
    /// Time steps between stored slices.
    pub save_every: usize,
}

impl Default for AllenCahnConfig {
    fn default() -> Self {
        AllenCahnConfig {
            nu: 1e-4,
            gamma: 5.0,
            grid_x: 512,
            dt: 1e-4,
            t_end: 1.0,
            save_every: 10,
        }
    }
}

impl AllenCahnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_x < 4 || self.grid_x % 2 != 0 {
            return Err(Error::schema("allen_cahn.grid_x", "must be even and at least 4"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::schema("allen_cahn.dt", "must be positive"));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::schema("allen_cahn.t_end", "must be positive"));
        }
        if !(self.nu >= 0.0 && self.gamma.is_finite() && self.nu.is_finite()) {
            return Err(Error::schema("allen_cahn", "nu must be non-negative and gamma finite"));
        }
        if self.save_every < 1 {
            return Err(Error::schema("allen_cahn.save_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// `u(t, x)` on a rectilinear grid, row-major over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSolution {
    t: Vec<f64>,
    x: Vec<f64>,
    u: Vec<f64>,
    /// When set, `x` covers `[x₀, x₀ + period)` and wraps around.
    period: Option<f64>,
}

impl GridSolution {
    /// Validates a non-periodic grid with strictly increasing axes.
    pub fn new(t: Vec<f64>, x: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        Self::build(t, x, u, None)
    }

    fn build(t: Vec<f64>, x: Vec<f64>, u: Vec<f64>, period: Option<f64>) -> Result<Self> {
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if t.len() < 2 || x.len() < 2 || !increasing(&t) || !increasing(&x) {
            return Err(Error::schema("grid", "axes need at least two strictly increasing values"));
        }
        if u.len() != t.len() * x.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {}x{} grid",
                u.len(),
                t.len(),
                x.len()
            )));
        }
        crate::error::ensure_finite(&u, "grid values")?;
        crate::error::ensure_finite(&t, "grid times")?;
        crate::error::ensure_finite(&x, "grid positions")?;
        Ok(GridSolution { t, x, u, period })
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn positions(&self) -> &[f64] {
        &self.x
    }

    /// The stored slice at time index `i`.
    pub fn slice(&self, i: usize) -> &[f64] {
        &self.u[i * self.x.len()..(i + 1) * self.x.len()]
    }

    fn bracket(axis: &[f64], v: f64) -> (usize, f64) {
        let i = axis.partition_point(|&a| a <= v).saturating_sub(1).min(axis.len() - 2);
        (i, (v - axis[i]) / (axis[i + 1] - axis[i]))
    }

    /// Value at time index `i`, cubic in `x` on uniform periodic grids and
    /// linear otherwise.
    fn along_x(&self, i: usize, x: f64) -> f64 {
        let row = self.slice(i);
        let n = self.x.len();
        match self.period {
            Some(period) => {
                let h = period / n as f64;
                let pos = (x - self.x[0]).rem_euclid(period) / h;
                let j = pos.floor() as isize;
                let w = pos - j as f64;
                let at = |k: isize| row[(j + k).rem_euclid(n as isize) as usize];
                let (p0, p1, p2, p3) = (at(-1), at(0), at(1), at(2));
                // four-point Lagrange on nodes -1, 0, 1, 2
                -w * (w - 1.0) * (w - 2.0) / 6.0 * p0 + (w + 1.0) * (w - 1.0) * (w - 2.0) / 2.0 * p1
                    - (w + 1.0) * w * (w - 2.0) / 2.0 * p2
                    + (w + 1.0) * w * (w - 1.0) / 6.0 * p3
            }
            None => {
                let (j, w) = Self::bracket(&self.x, x);
                (1.0 - w) * row[j] + w * row[j + 1]
            }
        }
    }
}

impl Solution for GridSolution {
    fn domain(&self) -> Vec<Interval> {
        let x_hi = match self.period {
            Some(p) => self.x[0] + p,
            None => *self.x.last().expect("non-empty axis"),
        };
        vec![
            Interval {
                lo: self.t[0],
                hi: *self.t.last().expect("non-empty axis"),
            },
            Interval { lo: self.x[0], hi: x_hi },
        ]
    }

    /// `z = (t, x)`.
    fn value(&self, z: &[f64]) -> Result<f64> {
        check_in_domain(&self.domain(), z)?;
        let (i, w) = Self::bracket(&self.t, z[0]);
        Ok((1.0 - w) * self.along_x(i, z[1]) + w * self.along_x(i + 1, z[1]))
    }
}

/// Allen–Cahn `u_t = ν u_xx − γ(u³ − u)` on `x ∈ [−1, 1)` with periodic
/// boundary and `u(0, x) = x² cos(πx)`, by a Fourier pseudo-spectral
/// method with integrating-factor RK4 in time.
pub fn solve_allen_cahn(cfg: &AllenCahnConfig) -> Result<GridSolution> {
    cfg.validate()?;
    let n = cfg.grid_x;
    let x: Vec<f64> = (0..n).map(|j| -1.0 + 2.0 * j as f64 / n as f64).collect();
    let u0: Vec<f64> = x.iter().map(|&x| x * x * (PI * x).cos()).collect();

    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let scale = 1.0 / n as f64;
    // domain length 2, so mode m has wavenumber π m
    let lin: Vec<f64> = (0..n)
        .map(|j| {
            let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            -cfg.nu * (PI * m) * (PI * m)
        })
        .collect();
    let dt = cfg.dt;
    let e1: Vec<f64> = lin.iter().map(|l| (l * dt).exp()).collect();
    let e2: Vec<f64> = lin.iter().map(|l| (0.5 * l * dt).exp()).collect();
    let gamma = cfg.gamma;

    let mut scratch = vec![Complex::new(0.0, 0.0); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    // N̂(v̂) = FFT(γ(u − u³)) with u = IFFT(v̂)
    let mut nonlinear = |v: &[Complex<f64>], out: &mut Vec<Complex<f64>>| {
        buf.copy_from_slice(v);
        inv.process_with_scratch(&mut buf, &mut scratch);
        for c in buf.iter_mut() {
            let u = c.re * scale;
            *c = Complex::new(gamma * (u - u * u * u), 0.0);
        }
        fwd.process_with_scratch(&mut buf, &mut scratch);
        out.clear();
        out.extend_from_slice(&buf);
    };

    let mut v: Vec<Complex<f64>> = u0.iter().map(|&u| Complex::new(u, 0.0)).collect();
    {
        let mut s = vec![Complex::new(0.0, 0.0); fwd.get_inplace_scratch_len()];
        fwd.process_with_scratch(&mut v, &mut s);
    }
    let steps = (cfg.t_end / dt).round() as usize;
    let mut times = vec![0.0];
    let mut values = u0.clone();
    let (mut k1, mut k2, mut k3, mut k4) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut tmp = vec![Complex::new(0.0, 0.0); n];
    for step in 1..=steps {
        nonlinear(&v, &mut k1);
        for j in 0..n {
            tmp[j] = e2[j] * (v[j] + 0.5 * dt * k1[j]);
        }
        nonlinear(&tmp, &mut k2);
        for j in 0..n {
            tmp[j] = e2[j] * v[j] + 0.5 * dt * k2[j];
        }
        nonlinear(&tmp, &mut k3);
        for j in 0..n {
            tmp[j] = e1[j] * v[j] + e2[j] * dt * k3[j];
        }
        nonlinear(&tmp, &mut k4);
        for j in 0..n {
            v[j] = e1[j] * v[j] + dt / 6.0 * (e1[j] * k1[j] + 2.0 * e2[j] * (k2[j] + k3[j]) + k4[j]);
        }
        if step % cfg.save_every == 0 || step == steps {
            let mut u = v.clone();
            let mut s = vec![Complex::new(0.0, 0.0); inv.get_inplace_scratch_len()];
            inv.process_with_scratch(&mut u, &mut s);
            let slice: Vec<f64> = u.iter().map(|c| c.re * scale).collect();
            let peak = slice.iter().fold(0.0f64, |m, u| m.max(u.abs()));
            if !(peak <= 10.0) {
                return Err(Error::Instability(format!(
                    "max |u| = {peak} at t = {}",
                    step as f64 * dt
                )));
            }
            times.push(step as f64 * dt);
            values.extend_from_slice(&slice);
        }
    }
    GridSolution::build(times, x, values, Some(2.0))
}

/// Sizes, ranges and noise for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub train_range: Vec<Interval>,
    pub test_range: Vec<Interval>,
    /// Defaults to `test_range`.
    #[serde(default)]
    pub colloc_range: Option<Vec<Interval>>,
    pub n_train: usize,
    pub n_test: usize,
    pub m_colloc: usize,
    #[serde(default)]
    pub noise_var: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SamplingConfig {
    pub fn colloc_range(&self) -> &[Interval] {
        self.colloc_range.as_deref().unwrap_or(&self.test_range)
    }

    fn check_against(&self, domain: &[Interval]) -> Result<()> {
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::schema("sampling.noise_var", "must be non-negative"));
        }
        let ranges = [
            ("train_range", self.train_range.as_slice()),
            ("test_range", self.test_range.as_slice()),
            ("colloc_range", self.colloc_range()),
        ];
        for (name, range) in ranges {
            if range.len() != domain.len() {
                return Err(Error::schema(
                    format!("sampling.{name}"),
                    format!("needs {} intervals, got {}", domain.len(), range.len()),
                ));
            }
            for (k, (r, d)) in range.iter().zip(domain).enumerate() {
                if !d.covers(r) {
                    return Err(Error::RangeOutOfDomain {
                        path: format!("sampling.{name}[{k}]"),
                        message: format!("[{}, {}] is not inside [{}, {}]", r.lo, r.hi, d.lo, d.hi),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub x: PointSet,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Samples,
    pub test: Samples,
}

fn uniform_points(range: &[Interval], n: usize, rng: &mut impl Rng) -> PointSet {
    let mut data = Vec::with_capacity(n * range.len());
    for _ in 0..n {
        for iv in range {
            let u: f64 = rng.random();
            data.push(iv.lo + (iv.hi - iv.lo) * u);
        }
    }
    PointSet::new(range.len(), data).expect("consistent point buffer")
}

/// Uniform train and test inputs with targets from `solution`; Gaussian
/// noise of variance `noise_var` is added to the training targets only.
pub fn sample_dataset(solution: &dyn Solution, cfg: &SamplingConfig) -> Result<Dataset> {
    cfg.check_against(&solution.domain())?;
    let seeds = SeedStream::new(cfg.seed);
    let train_x = uniform_points(&cfg.train_range, cfg.n_train, &mut seeds.rng("train"));
    let test_x = uniform_points(&cfg.test_range, cfg.n_test, &mut seeds.rng("test"));
    let eval = |xs: &PointSet| xs.iter().map(|z| solution.value(z)).collect::<Result<Vec<f64>>>();
    let mut train_y = eval(&train_x)?;
    let test_y = eval(&test_x)?;
    if cfg.noise_var > 0.0 {
        let sd = cfg.noise_var.sqrt();
        let mut rng = seeds.rng("noise");
        for y in train_y.iter_mut() {
            *y += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Dataset {
        train: Samples { x: train_x, y: train_y },
        test: Samples { x: test_x, y: test_y },
    })
}

/// `m` uniform points in the box `range`.
pub fn sample_collocation(range: &[Interval], m: usize, seed: u64) -> PointSet {
    uniform_points(range, m, &mut SeedStream::new(seed).rng("colloc"))
}
