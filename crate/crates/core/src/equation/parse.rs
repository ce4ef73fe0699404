//! Text form of equations: feature names, the infix residual grammar and
//! the configuration document.
//!
//! Features are written `val` (the function itself) or as `_`-joined tokens
//! `d<input>` / `d<input>2`, e.g. `dt`, `dx2`, `dt_dx`. In expressions `u`
//! is the function value and `dt2(u)` applies a derivative feature.
//! Operators are `+ - * ^` with integer exponents; functions are `sin`,
//! `cos` and `pow(x, n)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CoeffSpec, EquationSpec, ResidualExpr, SourceSpec, MAX_DEPTH};
use crate::error::{Error, Result};
use crate::kernel::{ArdParams, DerivOp};

const RESERVED: [&str; 5] = ["u", "val", "sin", "cos", "pow"];

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Input names must not contain `_`, which separates feature tokens.
pub(crate) fn is_input_name(s: &str) -> bool {
    is_identifier(s) && !s.contains('_') && !RESERVED.contains(&s)
}

/// Source and coefficient names may not shadow functions or features.
pub(crate) fn check_symbol(name: &str, inputs: &[String]) -> bool {
    is_identifier(name) && !RESERVED.contains(&name) && parse_feature(name, inputs).is_err()
}

/// Parses a feature name against the declared input names.
pub fn parse_feature(text: &str, inputs: &[String]) -> Result<DerivOp> {
    if text == "val" || text == "u" {
        return Ok(DerivOp::value(inputs.len()));
    }
    let mut orders = vec![0u8; inputs.len()];
    for token in text.split('_') {
        let rest = token
            .strip_prefix('d')
            .ok_or_else(|| Error::schema("feature", format!("`{text}` is not a feature name")))?;
        let (k, order) = if let Some(k) = inputs.iter().position(|n| n == rest) {
            (k, 1)
        } else if let Some(k) = rest
            .strip_suffix('2')
            .and_then(|r| inputs.iter().position(|n| n == r))
        {
            (k, 2)
        } else {
            return Err(Error::schema(
                "feature",
                format!("`{text}` does not name a derivative of the inputs {inputs:?}"),
            ));
        };
        orders[k] += order;
    }
    DerivOp::new(orders)
}

/// Canonical name of a feature, the inverse of [`parse_feature`].
pub fn feature_name(op: &DerivOp, inputs: &[String]) -> String {
    if op.is_value() {
        return "val".to_string();
    }
    let mut tokens = Vec::new();
    for (k, &o) in op.orders().iter().enumerate() {
        match o {
            0 => {}
            1 => tokens.push(format!("d{}", inputs[k])),
            _ => tokens.push(format!("d{}{}", inputs[k], o)),
        }
    }
    tokens.join("_")
}

/// Sorts by total order, then lexicographically descending multi-index:
/// `val, dt, dt2` and `val, dt, dx2`.
fn canonical_order(ops: &mut [DerivOp]) {
    ops.sort_by(|a, b| {
        a.total_order()
            .cmp(&b.total_order())
            .then_with(|| b.orders().cmp(a.orders()))
    });
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s = &text[start..i];
            let v: f64 = s
                .parse()
                .map_err(|_| Error::schema("equation.expr", format!("bad number `{s}`")))?;
            out.push(Token::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token::Ident(text[start..i].to_string()));
        } else if "+-*^(),".contains(c) {
            out.push(Token::Sym(c));
            i += 1;
        } else {
            return Err(Error::schema("equation.expr", format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

/// How a bare identifier resolves.
enum Symbol {
    Source(usize),
    Coeff,
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    depth: usize,
    inputs: &'a [String],
    symbols: &'a HashMap<String, Symbol>,
    /// Operators referenced so far; `Feature` leaves index into this list.
    ops: Vec<DerivOp>,
}

impl Parser<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::schema("equation.expr", msg)
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_at(&self, k: usize) -> Option<&Token> {
        self.tokens.get(self.pos + k)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Token::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}` at token {}", self.pos)))
        }
    }

    fn enter(&mut self) -> Result<()> {
        self.depth += 1;
        if self.depth > 4 * MAX_DEPTH {
            return Err(self.err("expression nested too deeply"));
        }
        Ok(())
    }

    fn feature(&mut self, op: DerivOp) -> ResidualExpr {
        let idx = match self.ops.iter().position(|o| *o == op) {
            Some(i) => i,
            None => {
                self.ops.push(op);
                self.ops.len() - 1
            }
        };
        ResidualExpr::Feature(idx)
    }

    fn expr(&mut self) -> Result<ResidualExpr> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = lhs + self.term()?;
            } else if self.eat('-') {
                lhs = lhs - self.term()?;
            } else {
                break;
            }
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<ResidualExpr> {
        let mut lhs = self.unary()?;
        while self.eat('*') {
            lhs = lhs * self.unary()?;
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<ResidualExpr> {
        self.enter()?;
        let out = if self.eat('-') {
            // a minus directly on a literal is part of the literal
            match (self.peek().cloned(), self.peek_at(1)) {
                (Some(Token::Num(v)), next) if next != Some(&Token::Sym('^')) => {
                    self.pos += 1;
                    ResidualExpr::Const(-v)
                }
                _ => -self.unary()?,
            }
        } else {
            self.power()?
        };
        self.depth -= 1;
        Ok(out)
    }

    fn exponent(&mut self) -> Result<u32> {
        match self.peek().cloned() {
            Some(Token::Num(v)) if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 => {
                self.pos += 1;
                Ok(v as u32)
            }
            _ => Err(self.err("exponents must be non-negative integers")),
        }
    }

    fn power(&mut self) -> Result<ResidualExpr> {
        let base = self.atom()?;
        if self.eat('^') {
            let n = self.exponent()?;
            Ok(int_pow(base, n))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<ResidualExpr> {
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(ResidualExpr::Const(v))
            }
            Some(Token::Sym('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                if self.eat('(') {
                    self.call(&name)
                } else {
                    self.name(&name)
                }
            }
            other => Err(self.err(format!("unexpected {other:?}"))),
        }
    }

    fn call(&mut self, name: &str) -> Result<ResidualExpr> {
        let out = match name {
            "sin" => self.expr()?.sin(),
            "cos" => self.expr()?.cos(),
            "pow" => {
                let base = self.expr()?;
                self.expect(',')?;
                let n = self.exponent()?;
                int_pow(base, n)
            }
            _ => {
                let op = parse_feature(name, self.inputs)
                    .map_err(|_| Error::UnknownFunction(name.to_string()))?;
                match self.peek() {
                    Some(Token::Ident(arg)) if arg == "u" => self.pos += 1,
                    _ => return Err(self.err(format!("`{name}(…)` applies only to `u`"))),
                }
                self.feature(op)
            }
        };
        self.expect(')')?;
        Ok(out)
    }

    fn name(&mut self, name: &str) -> Result<ResidualExpr> {
        match self.symbols.get(name) {
            Some(Symbol::Source(i)) => Ok(ResidualExpr::Source(*i)),
            Some(Symbol::Coeff) => Ok(ResidualExpr::coeff(name)),
            None => match parse_feature(name, self.inputs) {
                Ok(op) => Ok(self.feature(op)),
                Err(_) => Err(self.err(format!("undeclared name `{name}`"))),
            },
        }
    }
}

fn int_pow(base: ResidualExpr, n: u32) -> ResidualExpr {
    match n {
        0 => ResidualExpr::Const(1.0),
        1 => base,
        _ => base.pow(n),
    }
}

fn remap_features(e: ResidualExpr, map: &[usize]) -> ResidualExpr {
    use ResidualExpr as E;
    let r = |b: Box<E>| Box::new(remap_features(*b, map));
    match e {
        E::Feature(i) => E::Feature(map[i]),
        E::Add(a, b) => E::Add(r(a), r(b)),
        E::Sub(a, b) => E::Sub(r(a), r(b)),
        E::Mul(a, b) => E::Mul(r(a), r(b)),
        E::Neg(a) => E::Neg(r(a)),
        E::IntPow(a, n) => E::IntPow(r(a), n),
        E::Sin(a) => E::Sin(r(a)),
        E::Cos(a) => E::Cos(r(a)),
        leaf => leaf,
    }
}

/// Prints an expression so that parsing it back yields the same tree.
pub(crate) fn format_expr(spec: &EquationSpec, e: &ResidualExpr) -> String {
    fmt(spec, e, 0)
}

fn fmt(spec: &EquationSpec, e: &ResidualExpr, min_prec: u8) -> String {
    use ResidualExpr as E;
    let (prec, text) = match e {
        E::Feature(i) => {
            let op = &spec.features[*i];
            let text = if op.is_value() {
                "u".to_string()
            } else {
                format!("{}(u)", feature_name(op, &spec.input_names))
            };
            (5, text)
        }
        E::Source(i) => (5, spec.sources[*i].name.clone()),
        E::Coeff(name) => (5, name.clone()),
        E::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => (3, format!("{c:?}")),
        E::Const(c) => (5, format!("{c:?}")),
        E::Add(a, b) => (1, format!("{} + {}", fmt(spec, a, 1), fmt(spec, b, 2))),
        E::Sub(a, b) => (1, format!("{} - {}", fmt(spec, a, 1), fmt(spec, b, 2))),
        E::Mul(a, b) => (2, format!("{}*{}", fmt(spec, a, 2), fmt(spec, b, 3))),
        E::Neg(a) => match **a {
            E::Const(_) => (3, format!("-({})", fmt(spec, a, 0))),
            _ => (3, format!("-{}", fmt(spec, a, 3))),
        },
        E::IntPow(a, n) => (4, format!("{}^{n}", fmt(spec, a, 5))),
        E::Sin(a) => (5, format!("sin({})", fmt(spec, a, 0))),
        E::Cos(a) => (5, format!("cos({})", fmt(spec, a, 0))),
    };
    if prec < min_prec {
        format!("({text})")
    } else {
        text
    }
}

/// Configuration of a latent source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub name: String,
    #[serde(default)]
    pub share_u_params: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_s: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_amp: Option<f64>,
}

/// Configuration of an unknown coefficient.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<f64>,
    #[serde(default)]
    pub positive: bool,
}

/// The `equation` section of an experiment document: either a `preset`
/// (optionally overriding its sources and coefficients) or an explicit
/// `inputs`/`features`/`sources`/`coeffs`/`expr` description.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coeffs: Vec<CoeffConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
}

impl EquationConfig {
    pub fn from_preset(name: &str) -> Self {
        EquationConfig {
            preset: Some(name.to_string()),
            ..Default::default()
        }
    }

    /// Validates the document and builds the equation.
    pub fn build(&self) -> Result<EquationSpec> {
        match &self.preset {
            Some(name) => self.build_preset(name),
            None => self.build_explicit(),
        }
    }

    fn build_preset(&self, name: &str) -> Result<EquationSpec> {
        if self.inputs.is_some() || self.features.is_some() || self.expr.is_some() {
            return Err(Error::schema(
                "equation.preset",
                "a preset cannot be combined with inputs, features or expr",
            ));
        }
        let mut spec = super::preset(name)?;
        for (i, sc) in self.sources.iter().enumerate() {
            let path = format!("equation.sources[{i}]");
            let idx = spec
                .source_index(&sc.name)
                .ok_or_else(|| Error::schema(&path, format!("preset has no source `{}`", sc.name)))?;
            spec.sources[idx] = source_spec(sc, spec.dim(), &path)?;
        }
        for (i, c) in spec.coeffs.iter_mut().enumerate() {
            let cc = self.coeffs.iter().find(|cc| cc.name == c.name).ok_or_else(|| {
                Error::schema(
                    format!("equation.coeffs[{i}]"),
                    format!("preset `{name}` needs an explicit init for coefficient `{}`", c.name),
                )
            })?;
            c.init = cc.init.ok_or_else(|| {
                Error::schema(format!("equation.coeffs[{i}].init"), "missing init")
            })?;
            c.positive = cc.positive || c.positive;
        }
        for (i, cc) in self.coeffs.iter().enumerate() {
            if spec.coeff_index(&cc.name).is_none() {
                return Err(Error::schema(
                    format!("equation.coeffs[{i}].name"),
                    format!("preset `{name}` has no coefficient `{}`", cc.name),
                ));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    fn build_explicit(&self) -> Result<EquationSpec> {
        let inputs = self
            .inputs
            .clone()
            .ok_or_else(|| Error::schema("equation.inputs", "required without a preset"))?;
        for n in &inputs {
            if !is_input_name(n) {
                return Err(Error::schema("equation.inputs", format!("bad input name `{n}`")));
            }
        }
        let d = inputs.len();
        let mut symbols = HashMap::new();
        let mut sources = Vec::new();
        for (i, sc) in self.sources.iter().enumerate() {
            let path = format!("equation.sources[{i}]");
            if !check_symbol(&sc.name, &inputs) || symbols.contains_key(&sc.name) {
                return Err(Error::schema(format!("{path}.name"), format!("bad or repeated name `{}`", sc.name)));
            }
            symbols.insert(sc.name.clone(), Symbol::Source(i));
            sources.push(source_spec(sc, d, &path)?);
        }
        let mut coeffs = Vec::new();
        for (i, cc) in self.coeffs.iter().enumerate() {
            let path = format!("equation.coeffs[{i}]");
            if !check_symbol(&cc.name, &inputs) || symbols.contains_key(&cc.name) {
                return Err(Error::schema(format!("{path}.name"), format!("bad or repeated name `{}`", cc.name)));
            }
            symbols.insert(cc.name.clone(), Symbol::Coeff);
            let init = cc
                .init
                .ok_or_else(|| Error::schema(format!("{path}.init"), "missing init"))?;
            coeffs.push(CoeffSpec {
                name: cc.name.clone(),
                init,
                positive: cc.positive,
            });
        }
        let text = self
            .expr
            .as_deref()
            .ok_or_else(|| Error::schema("equation.expr", "required without a preset"))?;
        let mut parser = Parser {
            tokens: tokenize(text)?,
            pos: 0,
            depth: 0,
            inputs: &inputs,
            symbols: &symbols,
            ops: Vec::new(),
        };
        let expr = parser.expr()?;
        if parser.pos != parser.tokens.len() {
            return Err(Error::schema(
                "equation.expr",
                format!("trailing input after token {}", parser.pos),
            ));
        }
        let features = match &self.features {
            Some(names) => {
                let mut ops = Vec::new();
                for (i, n) in names.iter().enumerate() {
                    let op = parse_feature(n, &inputs).map_err(|e| match e {
                        Error::Schema { message, .. } => {
                            Error::schema(format!("equation.features[{i}]"), message)
                        }
                        other => other,
                    })?;
                    if ops.contains(&op) {
                        return Err(Error::schema(format!("equation.features[{i}]"), "duplicate feature"));
                    }
                    ops.push(op);
                }
                for op in &parser.ops {
                    if !ops.contains(op) {
                        return Err(Error::schema(
                            "equation.features",
                            format!("expr uses undeclared feature `{}`", feature_name(op, &inputs)),
                        ));
                    }
                }
                ops
            }
            None => {
                let mut ops = parser.ops.clone();
                canonical_order(&mut ops);
                ops
            }
        };
        let map: Vec<usize> = parser
            .ops
            .iter()
            .map(|op| features.iter().position(|f| f == op).expect("declared"))
            .collect();
        EquationSpec::new(inputs, features, sources, coeffs, remap_features(expr, &map))
    }

    /// The fully explicit description of `spec`.
    pub fn from_spec(spec: &EquationSpec) -> Self {
        EquationConfig {
            preset: None,
            inputs: Some(spec.input_names.clone()),
            features: Some(
                spec.features
                    .iter()
                    .map(|f| feature_name(f, &spec.input_names))
                    .collect(),
            ),
            sources: spec
                .sources
                .iter()
                .map(|s| SourceConfig {
                    name: s.name.clone(),
                    share_u_params: s.share_u_params,
                    log_s: Some(s.kernel.log_s.clone()),
                    log_amp: Some(s.kernel.log_amp),
                })
                .collect(),
            coeffs: spec
                .coeffs
                .iter()
                .map(|c| CoeffConfig {
                    name: c.name.clone(),
                    init: Some(c.init),
                    positive: c.positive,
                })
                .collect(),
            expr: Some(spec.expr_string()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("equation config is always serializable")
    }
}

fn source_spec(sc: &SourceConfig, d: usize, path: &str) -> Result<SourceSpec> {
    let log_s = sc.log_s.clone().unwrap_or_else(|| vec![0.0; d]);
    if log_s.len() != d {
        return Err(Error::schema(
            format!("{path}.log_s"),
            format!("expected {d} values, got {}", log_s.len()),
        ));
    }
    let kernel = ArdParams::new(log_s, sc.log_amp.unwrap_or(0.0))
        .map_err(|e| Error::schema(format!("{path}.log_s"), e.to_string()))?;
    Ok(SourceSpec {
        name: sc.name.clone(),
        kernel,
        share_u_params: sc.share_u_params,
    })
}

/// Parses an equation document. The document is either the equation table
/// itself or contains it under an `equation` key.
pub fn parse_equation(text: &str) -> Result<EquationSpec> {
    let value: toml::Table =
        toml::from_str(text).map_err(|e| Error::schema("equation", e.message().to_string()))?;
    let table = match value.get("equation") {
        Some(toml::Value::Table(t)) => t.clone(),
        Some(_) => return Err(Error::schema("equation", "must be a table")),
        None => value,
    };
    let cfg: EquationConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::schema("equation", e.message().to_string()))?;
    cfg.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equation::{preset, PRESETS};

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn feature_grammar() {
        let tx = names(&["t", "x"]);
        assert_eq!(parse_feature("val", &tx).unwrap().orders(), &[0, 0]);
        assert_eq!(parse_feature("dt", &tx).unwrap().orders(), &[1, 0]);
        assert_eq!(parse_feature("dx2", &tx).unwrap().orders(), &[0, 2]);
        assert_eq!(parse_feature("dt_dx", &tx).unwrap().orders(), &[1, 1]);
        assert_eq!(parse_feature("dx_dx", &tx).unwrap().orders(), &[0, 2]);
        assert!(parse_feature("dy", &tx).is_err());
        assert!(matches!(
            parse_feature("dx2_dx", &tx),
            Err(Error::UnsupportedOrder(_))
        ));
        let xs = names(&["x1", "x2"]);
        let op = parse_feature("dx12", &xs).unwrap();
        assert_eq!(op.orders(), &[2, 0]);
        assert_eq!(feature_name(&op, &xs), "dx12");
        assert_eq!(feature_name(&parse_feature("dt_dx", &tx).unwrap(), &tx), "dt_dx");
    }

    #[test]
    fn infix_matches_preset() {
        let text = r#"
            inputs = ["t"]
            expr = "dt2(u) + sin(u)"
        "#;
        assert_eq!(parse_equation(text).unwrap(), preset("pendulum_complete").unwrap());
    }

    #[test]
    fn preset_document() {
        let spec = parse_equation("[equation]\npreset = \"pendulum_complete\"\n").unwrap();
        assert_eq!(spec, preset("pendulum_complete").unwrap());
        assert!(matches!(
            parse_equation("preset = \"nope\""),
            Err(Error::UnknownPreset(_))
        ));
    }

    #[test]
    fn damped_needs_init() {
        let err = parse_equation("preset = \"pendulum_complete_damped\"").unwrap_err();
        assert!(matches!(err, Error::Schema { .. }), "{err}");
        let spec = parse_equation(
            "preset = \"pendulum_complete_damped\"\n[[coeffs]]\nname = \"b\"\ninit = 0.5\n",
        )
        .unwrap();
        assert_eq!(spec.coeffs[0].init, 0.5);
        assert!(spec.coeffs[0].positive);
    }

    #[test]
    fn undeclared_names() {
        let err = parse_equation("inputs = [\"t\"]\nexpr = \"dt(u) + k*u\"").unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
        let err = parse_equation("inputs = [\"t\"]\nexpr = \"tanh(u)\"").unwrap_err();
        assert!(matches!(err, Error::UnknownFunction(_)));
        let err = parse_equation("inputs = [\"t\"]\nfeatures = [\"dt\"]\nexpr = \"dt2(u)\"").unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
    }

    #[test]
    fn presets_round_trip() {
        for name in PRESETS {
            let spec = preset(name).unwrap();
            let text = EquationConfig::from_spec(&spec).to_toml();
            assert_eq!(parse_equation(&text).unwrap(), spec, "{name}\n{text}");
        }
    }

    #[test]
    fn tricky_printing_round_trips() {
        let base = preset("first_order_latent_force").unwrap();
        let f = || ResidualExpr::Feature(0);
        let exprs = vec![
            -ResidualExpr::Const(5.0) * f(),
            ResidualExpr::Const(-5.0) * f(),
            -(ResidualExpr::Const(5.0).pow(2)) + f(),
            ResidualExpr::Const(-5.0).pow(2) + f(),
            f() - (f() - ResidualExpr::Source(0)),
            (f() + ResidualExpr::coeff("b")) * (f() - ResidualExpr::Const(1e-5)),
            -(-f()),
            (f() * f()).pow(3).sin().cos(),
        ];
        for expr in exprs {
            let spec = EquationSpec {
                expr,
                ..base.clone()
            };
            let text = EquationConfig::from_spec(&spec).to_toml();
            assert_eq!(parse_equation(&text).unwrap(), spec, "{text}");
        }
    }

    #[test]
    fn exponent_forms() {
        let a = parse_equation("inputs = [\"t\"]\nexpr = \"pow(u, 3) - u^1 + u^0\"").unwrap();
        let b = parse_equation("inputs = [\"t\"]\nexpr = \"u^3 - u + 1.0\"").unwrap();
        assert_eq!(a, b);
        assert!(parse_equation("inputs = [\"t\"]\nexpr = \"u^1.5\"").is_err());
    }

    #[test]
    fn hostile_nesting_is_rejected() {
        let text = format!("inputs = [\"t\"]\nexpr = \"{}u{}\"", "(".repeat(5000), ")".repeat(5000));
        assert!(parse_equation(&text).is_err());
    }
}
