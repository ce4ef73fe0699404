//! Differential equations as residual expressions.
//!
//! An equation is stored as the residual `R(u, ∂u, …, g; θ)` whose target
//! value is zero: every term of the equation moved to one side. Leaves of
//! the expression are derivative features of `u` evaluated at collocation
//! points, latent source values at the same points, named coefficients and
//! constants. Evaluation is elementwise over collocation points.

mod parse;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ArdParams, DerivOp};

pub use parse::{feature_name, parse_equation, parse_feature, CoeffConfig, EquationConfig, SourceConfig};

/// Maximum nesting depth of a residual expression.
pub const MAX_DEPTH: usize = 64;

/// A residual expression tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ResidualExpr {
    /// Index into [`EquationSpec::features`].
    Feature(usize),
    /// Index into [`EquationSpec::sources`].
    Source(usize),
    Coeff(String),
    Const(f64),
    Add(Box<ResidualExpr>, Box<ResidualExpr>),
    Sub(Box<ResidualExpr>, Box<ResidualExpr>),
    Mul(Box<ResidualExpr>, Box<ResidualExpr>),
    Neg(Box<ResidualExpr>),
    /// Integer power with exponent at least 2.
    IntPow(Box<ResidualExpr>, u32),
    Sin(Box<ResidualExpr>),
    Cos(Box<ResidualExpr>),
}

impl ResidualExpr {
    pub fn coeff(name: &str) -> Self {
        ResidualExpr::Coeff(name.to_string())
    }

    pub fn pow(self, n: u32) -> Self {
        ResidualExpr::IntPow(Box::new(self), n)
    }

    pub fn sin(self) -> Self {
        ResidualExpr::Sin(Box::new(self))
    }

    pub fn cos(self) -> Self {
        ResidualExpr::Cos(Box::new(self))
    }

    pub fn depth(&self) -> usize {
        1 + self.children().iter().map(|c| c.depth()).max().unwrap_or(0)
    }

    fn children(&self) -> Vec<&ResidualExpr> {
        use ResidualExpr::*;
        match self {
            Feature(_) | Source(_) | Coeff(_) | Const(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            Neg(a) | IntPow(a, _) | Sin(a) | Cos(a) => vec![a],
        }
    }

    /// Pre-order traversal.
    pub fn visit(&self, f: &mut impl FnMut(&ResidualExpr)) {
        f(self);
        for c in self.children() {
            c.visit(f);
        }
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident) => {
        impl std::ops::$trait for ResidualExpr {
            type Output = ResidualExpr;

            fn $method(self, rhs: ResidualExpr) -> ResidualExpr {
                ResidualExpr::$variant(Box::new(self), Box::new(rhs))
            }
        }
    };
}

binary_op!(Add, add, Add);
binary_op!(Sub, sub, Sub);
binary_op!(Mul, mul, Mul);

impl std::ops::Neg for ResidualExpr {
    type Output = ResidualExpr;

    fn neg(self) -> ResidualExpr {
        ResidualExpr::Neg(Box::new(self))
    }
}

/// A latent source term with its own GP prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    /// Initial kernel; ignored when the parameters are shared with `u`.
    pub kernel: ArdParams,
    pub share_u_params: bool,
}

/// An unknown coefficient estimated jointly with the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffSpec {
    pub name: String,
    pub init: f64,
    /// Optimized in the log domain.
    pub positive: bool,
}

/// A validated differential equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquationSpec {
    /// Names of the input dimensions, e.g. `["t", "x"]`.
    pub input_names: Vec<String>,
    pub features: Vec<DerivOp>,
    pub sources: Vec<SourceSpec>,
    pub coeffs: Vec<CoeffSpec>,
    pub expr: ResidualExpr,
}

impl EquationSpec {
    pub fn new(
        input_names: Vec<String>,
        features: Vec<DerivOp>,
        sources: Vec<SourceSpec>,
        coeffs: Vec<CoeffSpec>,
        expr: ResidualExpr,
    ) -> Result<Self> {
        let spec = EquationSpec {
            input_names,
            features,
            sources,
            coeffs,
            expr,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.input_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::schema("equation.inputs", "at least one input dimension"));
        }
        let mut names = HashSet::new();
        for n in &self.input_names {
            if !parse::is_input_name(n) || !names.insert(n.as_str()) {
                return Err(Error::schema("equation.inputs", format!("bad or repeated name `{n}`")));
            }
        }
        let mut seen = HashSet::new();
        for (i, f) in self.features.iter().enumerate() {
            if f.dim() != d {
                return Err(Error::schema(
                    format!("equation.features[{i}]"),
                    format!("operator has {} dimensions, equation has {d}", f.dim()),
                ));
            }
            if !seen.insert(f) {
                return Err(Error::schema(format!("equation.features[{i}]"), "duplicate feature"));
            }
        }
        let mut symbols = HashSet::new();
        for (i, s) in self.sources.iter().enumerate() {
            if !parse::check_symbol(&s.name, &self.input_names) || !symbols.insert(s.name.as_str()) {
                return Err(Error::schema(
                    format!("equation.sources[{i}].name"),
                    format!("bad or repeated name `{}`", s.name),
                ));
            }
            if s.kernel.dim() != d {
                return Err(Error::schema(
                    format!("equation.sources[{i}].kernel"),
                    format!("kernel has {} dimensions, equation has {d}", s.kernel.dim()),
                ));
            }
            s.kernel.validate()?;
        }
        for (i, c) in self.coeffs.iter().enumerate() {
            if !parse::check_symbol(&c.name, &self.input_names) || !symbols.insert(c.name.as_str()) {
                return Err(Error::schema(
                    format!("equation.coeffs[{i}].name"),
                    format!("bad or repeated name `{}`", c.name),
                ));
            }
            if !c.init.is_finite() || (c.positive && c.init <= 0.0) {
                return Err(Error::schema(
                    format!("equation.coeffs[{i}].init"),
                    "must be finite, and positive for positive coefficients",
                ));
            }
        }
        if self.expr.depth() > MAX_DEPTH {
            return Err(Error::schema("equation.expr", format!("deeper than {MAX_DEPTH}")));
        }
        let mut err = None;
        let mut has_leaf = false;
        self.expr.visit(&mut |e| {
            let problem = match e {
                ResidualExpr::Feature(i) => {
                    has_leaf = true;
                    (*i >= self.features.len()).then(|| format!("feature index {i}"))
                }
                ResidualExpr::Source(i) => {
                    has_leaf = true;
                    (*i >= self.sources.len()).then(|| format!("source index {i}"))
                }
                ResidualExpr::Coeff(name) => {
                    (!self.coeffs.iter().any(|c| &c.name == name)).then(|| format!("coefficient `{name}`"))
                }
                ResidualExpr::Const(c) => (!c.is_finite()).then(|| "non-finite constant".to_string()),
                ResidualExpr::IntPow(_, n) => (*n < 2).then(|| format!("exponent {n} below 2")),
                _ => None,
            };
            if let (None, Some(p)) = (&err, problem) {
                err = Some(p);
            }
        });
        if let Some(p) = err {
            return Err(Error::schema("equation.expr", format!("undeclared or invalid {p}")));
        }
        if !has_leaf {
            return Err(Error::schema(
                "equation.expr",
                "residual must reference at least one feature or source",
            ));
        }
        Ok(())
    }

    /// Indices of the features the expression references, ascending.
    pub fn referenced_features(&self) -> Vec<usize> {
        let mut used = vec![false; self.features.len()];
        self.expr.visit(&mut |e| {
            if let ResidualExpr::Feature(i) = e {
                used[*i] = true;
            }
        });
        (0..used.len()).filter(|&i| used[i]).collect()
    }

    pub fn coeff_index(&self, name: &str) -> Option<usize> {
        self.coeffs.iter().position(|c| c.name == name)
    }

    pub fn source_index(&self, name: &str) -> Option<usize> {
        self.sources.iter().position(|s| s.name == name)
    }

    /// Initial coefficient values in declaration order.
    pub fn initial_coeffs(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.init).collect()
    }

    /// The residual as infix text, readable back by the parser.
    pub fn expr_string(&self) -> String {
        parse::format_expr(self, &self.expr)
    }

    /// Compiles the expression into a flat evaluation tape.
    pub fn compile(&self) -> CompiledResidual {
        let mut nodes = Vec::new();
        compile_into(self, &self.expr, &mut nodes);
        CompiledResidual {
            nodes,
            n_features: self.features.len(),
            n_sources: self.sources.len(),
            n_coeffs: self.coeffs.len(),
        }
    }

    fn coeff_vector(&self, coeffs: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        self.coeffs
            .iter()
            .map(|c| {
                coeffs
                    .get(&c.name)
                    .copied()
                    .ok_or_else(|| Error::MissingCoefficient(c.name.clone()))
            })
            .collect()
    }

    /// Evaluates the residual at every collocation point.
    pub fn eval_residual(
        &self,
        feature_vals: &[&[f64]],
        source_vals: &[&[f64]],
        coeffs: &BTreeMap<String, f64>,
    ) -> Result<Vec<f64>> {
        let c = self.coeff_vector(coeffs)?;
        self.compile().eval(feature_vals, source_vals, &c)
    }

    /// Reverse-mode gradient of `Σ_m upstream_m · R_m` with respect to every
    /// feature vector, source vector and coefficient.
    pub fn eval_residual_adjoint(
        &self,
        feature_vals: &[&[f64]],
        source_vals: &[&[f64]],
        coeffs: &BTreeMap<String, f64>,
        upstream: &[f64],
    ) -> Result<ResidualAdjoint> {
        let c = self.coeff_vector(coeffs)?;
        let (_, g) = self.compile().eval_adjoint(feature_vals, source_vals, &c, upstream)?;
        Ok(ResidualAdjoint {
            features: g.features,
            sources: g.sources,
            coeffs: self.coeffs.iter().map(|c| c.name.clone()).zip(g.coeffs).collect(),
        })
    }
}

/// Gradients returned by [`EquationSpec::eval_residual_adjoint`].
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualAdjoint {
    pub features: Vec<Vec<f64>>,
    pub sources: Vec<Vec<f64>>,
    pub coeffs: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Node {
    Feature(usize),
    Source(usize),
    Coeff(usize),
    Const(f64),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Pow(usize, u32),
    Sin(usize),
    Cos(usize),
}

fn compile_into(spec: &EquationSpec, e: &ResidualExpr, nodes: &mut Vec<Node>) -> usize {
    use ResidualExpr as E;
    let node = match e {
        E::Feature(i) => Node::Feature(*i),
        E::Source(i) => Node::Source(*i),
        E::Coeff(name) => Node::Coeff(spec.coeff_index(name).expect("validated coefficient")),
        E::Const(c) => Node::Const(*c),
        E::Add(a, b) => Node::Add(compile_into(spec, a, nodes), compile_into(spec, b, nodes)),
        E::Sub(a, b) => Node::Sub(compile_into(spec, a, nodes), compile_into(spec, b, nodes)),
        E::Mul(a, b) => Node::Mul(compile_into(spec, a, nodes), compile_into(spec, b, nodes)),
        E::Neg(a) => Node::Neg(compile_into(spec, a, nodes)),
        E::IntPow(a, n) => Node::Pow(compile_into(spec, a, nodes), *n),
        E::Sin(a) => Node::Sin(compile_into(spec, a, nodes)),
        E::Cos(a) => Node::Cos(compile_into(spec, a, nodes)),
    };
    nodes.push(node);
    nodes.len() - 1
}

/// Index-based gradients of a compiled residual.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualGrad {
    pub features: Vec<Vec<f64>>,
    pub sources: Vec<Vec<f64>>,
    pub coeffs: Vec<f64>,
}

/// A residual expression flattened into a tape, evaluated over whole
/// vectors of collocation points at a time. Coefficients are indexed in
/// declaration order.
#[derive(Clone, Debug)]
pub struct CompiledResidual {
    nodes: Vec<Node>,
    n_features: usize,
    n_sources: usize,
    n_coeffs: usize,
}

impl CompiledResidual {
    fn check(&self, features: &[&[f64]], sources: &[&[f64]], coeffs: &[f64]) -> Result<usize> {
        if features.len() != self.n_features || sources.len() != self.n_sources {
            return Err(Error::IndexOutOfRange(format!(
                "expected {} feature and {} source vectors, got {} and {}",
                self.n_features,
                self.n_sources,
                features.len(),
                sources.len()
            )));
        }
        if coeffs.len() != self.n_coeffs {
            return Err(Error::MissingCoefficient(format!(
                "expected {} coefficients, got {}",
                self.n_coeffs,
                coeffs.len()
            )));
        }
        let m = features
            .iter()
            .chain(sources)
            .map(|v| v.len())
            .next()
            .unwrap_or(0);
        if features.iter().chain(sources).any(|v| v.len() != m) {
            return Err(Error::DimensionMismatch(
                "feature and source vectors must share one length".into(),
            ));
        }
        Ok(m)
    }

    fn forward(&self, features: &[&[f64]], sources: &[&[f64]], coeffs: &[f64], m: usize) -> Vec<Vec<f64>> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match *node {
                Node::Feature(i) => features[i].to_vec(),
                Node::Source(i) => sources[i].to_vec(),
                Node::Coeff(i) => vec![coeffs[i]; m],
                Node::Const(c) => vec![c; m],
                Node::Add(a, b) => zip(&vals[a], &vals[b], |x, y| x + y),
                Node::Sub(a, b) => zip(&vals[a], &vals[b], |x, y| x - y),
                Node::Mul(a, b) => zip(&vals[a], &vals[b], |x, y| x * y),
                Node::Neg(a) => vals[a].iter().map(|x| -x).collect(),
                Node::Pow(a, n) => vals[a].iter().map(|x| x.powi(n as i32)).collect(),
                Node::Sin(a) => vals[a].iter().map(|x| x.sin()).collect(),
                Node::Cos(a) => vals[a].iter().map(|x| x.cos()).collect(),
            };
            vals.push(v);
        }
        vals
    }

    pub fn eval(&self, features: &[&[f64]], sources: &[&[f64]], coeffs: &[f64]) -> Result<Vec<f64>> {
        let m = self.check(features, sources, coeffs)?;
        let mut vals = self.forward(features, sources, coeffs, m);
        let out = vals.pop().expect("non-empty tape");
        crate::error::ensure_finite(&out, "residual")?;
        Ok(out)
    }

    /// The residual and the gradient of `Σ_m upstream_m · R_m`.
    pub fn eval_adjoint(
        &self,
        features: &[&[f64]],
        sources: &[&[f64]],
        coeffs: &[f64],
        upstream: &[f64],
    ) -> Result<(Vec<f64>, ResidualGrad)> {
        let m = self.check(features, sources, coeffs)?;
        if upstream.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "upstream has length {}, residual {m}",
                upstream.len()
            )));
        }
        let vals = self.forward(features, sources, coeffs, m);
        let out = vals.last().expect("non-empty tape").clone();
        crate::error::ensure_finite(&out, "residual")?;
        let mut grad = ResidualGrad {
            features: vec![vec![0.0; m]; self.n_features],
            sources: vec![vec![0.0; m]; self.n_sources],
            coeffs: vec![0.0; self.n_coeffs],
        };
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        *adj.last_mut().expect("non-empty tape") = upstream.to_vec();
        for idx in (0..self.nodes.len()).rev() {
            let g = std::mem::take(&mut adj[idx]);
            if g.is_empty() {
                continue;
            }
            match self.nodes[idx] {
                Node::Feature(i) => add_into(&mut grad.features[i], &g, |_, gi| gi),
                Node::Source(i) => add_into(&mut grad.sources[i], &g, |_, gi| gi),
                Node::Coeff(i) => grad.coeffs[i] += g.iter().sum::<f64>(),
                Node::Const(_) => {}
                Node::Add(a, b) => {
                    accumulate(&mut adj[a], &g, |_, gi| gi);
                    accumulate(&mut adj[b], &g, |_, gi| gi);
                }
                Node::Sub(a, b) => {
                    accumulate(&mut adj[a], &g, |_, gi| gi);
                    accumulate(&mut adj[b], &g, |_, gi| -gi);
                }
                Node::Mul(a, b) => {
                    let (va, vb) = (&vals[a], &vals[b]);
                    accumulate(&mut adj[a], &g, |k, gi| gi * vb[k]);
                    accumulate(&mut adj[b], &g, |k, gi| gi * va[k]);
                }
                Node::Neg(a) => accumulate(&mut adj[a], &g, |_, gi| -gi),
                Node::Pow(a, n) => {
                    let va = &vals[a];
                    accumulate(&mut adj[a], &g, |k, gi| gi * n as f64 * va[k].powi(n as i32 - 1));
                }
                Node::Sin(a) => {
                    let va = &vals[a];
                    accumulate(&mut adj[a], &g, |k, gi| gi * va[k].cos());
                }
                Node::Cos(a) => {
                    let va = &vals[a];
                    accumulate(&mut adj[a], &g, |k, gi| -gi * va[k].sin());
                }
            }
        }
        Ok((out, grad))
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (k, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
        *d += f(k, gi);
    }
}

fn accumulate(dst: &mut Vec<f64>, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    if dst.is_empty() {
        dst.resize(g.len(), 0.0);
    }
    add_into(dst, g, f);
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 7] = [
    "pendulum_complete",
    "pendulum_complete_damped",
    "pendulum_incomplete",
    "allen_cahn_complete",
    "allen_cahn_incomplete",
    "first_order_latent_force",
    "laplace_latent_source",
];

/// Built-in equations. The damping and force coefficients start at 1.
pub fn preset(name: &str) -> Result<EquationSpec> {
    let (inputs, expr, sources, coeffs): (&[&str], &str, &[(&str, bool)], &[&str]) = match name {
        "pendulum_complete" => (&["t"], "dt2(u) + sin(u)", &[], &[]),
        "pendulum_complete_damped" => (&["t"], "dt2(u) + b*dt(u) + sin(u)", &[], &["b"]),
        "pendulum_incomplete" => (&["t"], "dt2(u) + g", &[("g", true)], &[]),
        "allen_cahn_complete" => (&["t", "x"], "dt(u) - 0.0001*dx2(u) + 5*u^3 - 5*u", &[], &[]),
        "allen_cahn_incomplete" => (&["t", "x"], "dt(u) - 0.0001*dx2(u) + g", &[("g", false)], &[]),
        "first_order_latent_force" => (&["t"], "dt(u) + b*u - c - g", &[("g", false)], &["b", "c"]),
        "laplace_latent_source" => (&["x1", "x2"], "dx12(u) + dx22(u) - g", &[("g", false)], &[]),
        _ => return Err(Error::UnknownPreset(name.to_string())),
    };
    let cfg = EquationConfig {
        preset: None,
        inputs: Some(inputs.iter().map(|s| s.to_string()).collect()),
        features: None,
        sources: sources
            .iter()
            .map(|&(n, share)| SourceConfig {
                name: n.to_string(),
                share_u_params: share,
                log_s: None,
                log_amp: None,
            })
            .collect(),
        coeffs: coeffs
            .iter()
            .map(|&n| CoeffConfig {
                name: n.to_string(),
                init: Some(1.0),
                positive: true,
            })
            .collect(),
        expr: Some(expr.to_string()),
    };
    cfg.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coeffs(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    fn feature_index(spec: &EquationSpec, name: &str) -> usize {
        let op = parse_feature(name, &spec.input_names).unwrap();
        spec.features.iter().position(|f| *f == op).unwrap()
    }

    #[test]
    fn pendulum_equilibrium() {
        let spec = preset("pendulum_complete").unwrap();
        let zeros = vec![0.0; 3];
        let r = spec
            .eval_residual(&[&zeros, &zeros], &[], &BTreeMap::new())
            .unwrap();
        assert_eq!(r, vec![0.0; 3]);
    }

    #[test]
    fn allen_cahn_cubic_vanishes_at_one() {
        let spec = preset("allen_cahn_complete").unwrap();
        let mut vals = vec![vec![0.0]; 3];
        vals[feature_index(&spec, "dt")] = vec![5.0];
        vals[feature_index(&spec, "val")] = vec![1.0];
        vals[feature_index(&spec, "dx2")] = vec![0.0];
        let refs: Vec<&[f64]> = vals.iter().map(|v| v.as_slice()).collect();
        let r = spec.eval_residual(&refs, &[], &BTreeMap::new()).unwrap();
        assert_eq!(r, vec![5.0]);
    }

    #[test]
    fn damped_cancellation() {
        let spec = preset("pendulum_complete_damped").unwrap();
        let mut vals = vec![vec![0.0]; 3];
        vals[feature_index(&spec, "dt2")] = vec![-0.2];
        vals[feature_index(&spec, "dt")] = vec![1.0];
        let refs: Vec<&[f64]> = vals.iter().map(|v| v.as_slice()).collect();
        let r = spec
            .eval_residual(&refs, &[], &coeffs(&[("b", 0.2)]))
            .unwrap();
        assert!(r[0].abs() < 1e-16);
        assert!(matches!(
            spec.eval_residual(&refs, &[], &BTreeMap::new()),
            Err(Error::MissingCoefficient(_))
        ));
    }

    #[test]
    fn identity_and_sin_adjoints() {
        let spec = EquationSpec::new(
            vec!["t".into()],
            vec![DerivOp::value(1)],
            vec![],
            vec![],
            ResidualExpr::Feature(0),
        )
        .unwrap();
        let up = [0.5, -2.0];
        let g = spec
            .eval_residual_adjoint(&[&[1.0, 2.0]], &[], &BTreeMap::new(), &up)
            .unwrap();
        assert_eq!(g.features[0], up.to_vec());

        let spec = EquationSpec {
            expr: ResidualExpr::Feature(0).sin(),
            ..spec
        };
        let g = spec
            .eval_residual_adjoint(&[&[0.0]], &[], &BTreeMap::new(), &[3.0])
            .unwrap();
        assert_eq!(g.features[0], vec![3.0]);
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let spec = preset("first_order_latent_force").unwrap();
        let spec = EquationSpec {
            expr: spec.expr.clone() * ResidualExpr::Feature(0).cos() + ResidualExpr::Source(0).pow(3),
            ..spec
        };
        let f0 = vec![0.3, -0.7];
        let f1 = vec![1.1, 0.4];
        let g0 = vec![-0.2, 0.9];
        let c = coeffs(&[("b", 0.8), ("c", 1.3)]);
        let up = vec![0.7, -1.2];
        let adj = spec
            .eval_residual_adjoint(&[&f0, &f1], &[&g0], &c, &up)
            .unwrap();
        let obj = |f0: &[f64], f1: &[f64], g0: &[f64], c: &BTreeMap<String, f64>| -> f64 {
            let r = spec.eval_residual(&[f0, f1], &[g0], c).unwrap();
            r.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for m in 0..2 {
            let mut p = f0.clone();
            let mut q = f0.clone();
            p[m] += h;
            q[m] -= h;
            let fd = (obj(&p, &f1, &g0, &c) - obj(&q, &f1, &g0, &c)) / (2.0 * h);
            assert!((fd - adj.features[0][m]).abs() < 1e-6 * fd.abs().max(1.0));
            let mut p = g0.clone();
            let mut q = g0.clone();
            p[m] += h;
            q[m] -= h;
            let fd = (obj(&f0, &f1, &p, &c) - obj(&f0, &f1, &q, &c)) / (2.0 * h);
            assert!((fd - adj.sources[0][m]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        let mut cp = c.clone();
        let mut cq = c.clone();
        *cp.get_mut("b").unwrap() += h;
        *cq.get_mut("b").unwrap() -= h;
        let fd = (obj(&f0, &f1, &g0, &cp) - obj(&f0, &f1, &g0, &cq)) / (2.0 * h);
        assert!((fd - adj.coeffs["b"]).abs() < 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn preset_structures() {
        let inc = preset("pendulum_incomplete").unwrap();
        assert_eq!(inc.features, vec![DerivOp::new(vec![2]).unwrap()]);
        assert_eq!(inc.sources.len(), 1);
        assert!(inc.sources[0].share_u_params);
        assert!(inc.coeffs.is_empty());

        let ac = preset("allen_cahn_complete").unwrap();
        let ops: Vec<Vec<u8>> = ac.features.iter().map(|f| f.orders().to_vec()).collect();
        assert_eq!(ops, vec![vec![0, 0], vec![1, 0], vec![0, 2]]);
        assert!(ac.sources.is_empty());

        let lap = preset("laplace_latent_source").unwrap();
        let ops: Vec<Vec<u8>> = lap.features.iter().map(|f| f.orders().to_vec()).collect();
        assert_eq!(ops, vec![vec![2, 0], vec![0, 2]]);
        assert_eq!(lap.sources.len(), 1);
        assert!(lap.coeffs.is_empty());

        for name in PRESETS {
            let spec = preset(name).unwrap();
            assert_eq!(spec.referenced_features().len(), spec.features.len(), "{name}");
        }
        assert!(matches!(preset("heat"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let spec = EquationSpec::new(
            vec!["t".into()],
            vec![DerivOp::value(1)],
            vec![],
            vec![],
            ResidualExpr::Feature(0).pow(400),
        )
        .unwrap();
        assert!(matches!(
            spec.eval_residual(&[&[10.0]], &[], &BTreeMap::new()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn validation_errors() {
        let bad = EquationSpec::new(
            vec!["t".into()],
            vec![DerivOp::value(1)],
            vec![],
            vec![],
            ResidualExpr::Feature(3),
        );
        assert!(matches!(bad, Err(Error::Schema { .. })));
        let bad = EquationSpec::new(
            vec!["t".into()],
            vec![DerivOp::value(1)],
            vec![],
            vec![],
            ResidualExpr::Feature(0) * ResidualExpr::coeff("k"),
        );
        assert!(matches!(bad, Err(Error::Schema { .. })));
        let mut deep = ResidualExpr::Feature(0);
        for _ in 0..MAX_DEPTH {
            deep = -deep;
        }
        let bad = EquationSpec::new(vec!["t".into()], vec![DerivOp::value(1)], vec![], vec![], deep);
        assert!(bad.is_err());
    }
}
