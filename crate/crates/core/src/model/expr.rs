//! Closed-form coefficient expressions over time `t` and parameter `theta`.
//!
//! The grammar is deliberately tiny: constants, `t`, `theta`, `exp`, n-ary
//! sums and products, and powers with a fixed real exponent. Every expression
//! can be differentiated structurally in either variable, so the estimators
//! never need numerical derivatives of user input.
//!
//! On disk an expression is a prefix s-expression in JSON:
//!
//! ```text
//! 2.5                          constant
//! "t", "theta"                 variables
//! ["exp", e]
//! ["+", e1, e2, ...]           sum
//! ["*", e1, e2, ...]           product
//! ["pow", e, 1.5]              power with a literal exponent
//! ```

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Time,
    Theta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub enum CoeffExpr {
    Const(f64),
    Time,
    Theta,
    Exp(Box<CoeffExpr>),
    Sum(Vec<CoeffExpr>),
    Product(Vec<CoeffExpr>),
    Pow(Box<CoeffExpr>, f64),
}

impl CoeffExpr {
    pub fn constant(c: f64) -> Self {
        CoeffExpr::Const(c)
    }

    pub fn exp(e: CoeffExpr) -> Self {
        CoeffExpr::Exp(Box::new(e))
    }

    pub fn sum(terms: Vec<CoeffExpr>) -> Self {
        CoeffExpr::Sum(terms)
    }

    pub fn product(factors: Vec<CoeffExpr>) -> Self {
        CoeffExpr::Product(factors)
    }

    pub fn pow(base: CoeffExpr, exponent: f64) -> Self {
        CoeffExpr::Pow(Box::new(base), exponent)
    }

    #[inline]
    pub fn eval(&self, theta: f64, t: f64) -> f64 {
        match self {
            CoeffExpr::Const(c) => *c,
            CoeffExpr::Time => t,
            CoeffExpr::Theta => theta,
            CoeffExpr::Exp(e) => e.eval(theta, t).exp(),
            CoeffExpr::Sum(terms) => terms.iter().map(|e| e.eval(theta, t)).sum(),
            CoeffExpr::Product(factors) => factors.iter().map(|e| e.eval(theta, t)).product(),
            CoeffExpr::Pow(base, p) => base.eval(theta, t).powf(*p),
        }
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            CoeffExpr::Const(_) => false,
            CoeffExpr::Time => var == Var::Time,
            CoeffExpr::Theta => var == Var::Theta,
            CoeffExpr::Exp(e) | CoeffExpr::Pow(e, _) => e.depends_on(var),
            CoeffExpr::Sum(v) | CoeffExpr::Product(v) => v.iter().any(|e| e.depends_on(var)),
        }
    }

    /// Structural partial derivative, lightly simplified.
    pub fn derivative(&self, var: Var) -> CoeffExpr {
        let d = match self {
            CoeffExpr::Const(_) => CoeffExpr::Const(0.0),
            CoeffExpr::Time => CoeffExpr::Const(if var == Var::Time { 1.0 } else { 0.0 }),
            CoeffExpr::Theta => CoeffExpr::Const(if var == Var::Theta { 1.0 } else { 0.0 }),
            CoeffExpr::Exp(e) => CoeffExpr::Product(vec![self.clone(), e.derivative(var)]),
            CoeffExpr::Sum(terms) => CoeffExpr::Sum(terms.iter().map(|e| e.derivative(var)).collect()),
            CoeffExpr::Product(factors) => {
                let mut terms = Vec::with_capacity(factors.len());
                for (i, fi) in factors.iter().enumerate() {
                    let mut prod = Vec::with_capacity(factors.len());
                    prod.push(fi.derivative(var));
                    prod.extend(
                        factors
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| j != i)
                            .map(|(_, e)| e.clone()),
                    );
                    terms.push(CoeffExpr::Product(prod));
                }
                CoeffExpr::Sum(terms)
            }
            CoeffExpr::Pow(base, p) => CoeffExpr::Product(vec![
                CoeffExpr::Const(*p),
                CoeffExpr::pow((**base).clone(), p - 1.0),
                base.derivative(var),
            ]),
        };
        d.simplify()
    }

    /// Constant folding plus removal of neutral elements.
    pub fn simplify(self) -> CoeffExpr {
        match self {
            CoeffExpr::Exp(e) => match e.simplify() {
                CoeffExpr::Const(c) => CoeffExpr::Const(c.exp()),
                e => CoeffExpr::exp(e),
            },
            CoeffExpr::Pow(base, p) => {
                if p == 0.0 {
                    return CoeffExpr::Const(1.0);
                }
                match base.simplify() {
                    CoeffExpr::Const(c) => CoeffExpr::Const(c.powf(p)),
                    b if p == 1.0 => b,
                    b => CoeffExpr::pow(b, p),
                }
            }
            CoeffExpr::Sum(terms) => {
                let mut c = 0.0;
                let mut rest = Vec::new();
                for e in terms.into_iter().map(CoeffExpr::simplify) {
                    match e {
                        CoeffExpr::Const(v) => c += v,
                        CoeffExpr::Sum(inner) => rest.extend(inner),
                        e => rest.push(e),
                    }
                }
                if c != 0.0 || rest.is_empty() {
                    rest.push(CoeffExpr::Const(c));
                }
                if rest.len() == 1 {
                    rest.pop().unwrap()
                } else {
                    CoeffExpr::Sum(rest)
                }
            }
            CoeffExpr::Product(factors) => {
                let mut c = 1.0;
                let mut rest = Vec::new();
                for e in factors.into_iter().map(CoeffExpr::simplify) {
                    match e {
                        CoeffExpr::Const(v) => c *= v,
                        CoeffExpr::Product(inner) => rest.extend(inner),
                        e => rest.push(e),
                    }
                }
                if c == 0.0 {
                    return CoeffExpr::Const(0.0);
                }
                if c != 1.0 || rest.is_empty() {
                    rest.insert(0, CoeffExpr::Const(c));
                }
                if rest.len() == 1 {
                    rest.pop().unwrap()
                } else {
                    CoeffExpr::Product(rest)
                }
            }
            e => e,
        }
    }

    pub fn from_sexpr(v: &Value) -> Result<CoeffExpr> {
        match v {
            Value::Number(n) => n
                .as_f64()
                .filter(|c| c.is_finite())
                .map(CoeffExpr::Const)
                .ok_or_else(|| Error::input(format!("bad numeric literal {n}"))),
            Value::String(s) => match s.as_str() {
                "t" => Ok(CoeffExpr::Time),
                "theta" => Ok(CoeffExpr::Theta),
                other => Err(Error::input(format!("unknown symbol {other:?} (expected \"t\" or \"theta\")"))),
            },
            Value::Array(items) => {
                let (head, args) = items
                    .split_first()
                    .ok_or_else(|| Error::input("empty expression list"))?;
                let op = head
                    .as_str()
                    .ok_or_else(|| Error::input(format!("operator must be a string, got {head}")))?;
                match op {
                    "exp" => {
                        if args.len() != 1 {
                            return Err(Error::input("exp takes exactly one argument"));
                        }
                        Ok(CoeffExpr::exp(Self::from_sexpr(&args[0])?))
                    }
                    "+" | "*" => {
                        if args.is_empty() {
                            return Err(Error::input(format!("{op} needs at least one argument")));
                        }
                        let parsed = args.iter().map(Self::from_sexpr).collect::<Result<Vec<_>>>()?;
                        Ok(if op == "+" {
                            CoeffExpr::Sum(parsed)
                        } else {
                            CoeffExpr::Product(parsed)
                        })
                    }
                    "pow" | "^" => {
                        if args.len() != 2 {
                            return Err(Error::input("pow takes a base and a literal exponent"));
                        }
                        let p = args[1]
                            .as_f64()
                            .filter(|p| p.is_finite())
                            .ok_or_else(|| Error::input("pow exponent must be a finite number"))?;
                        Ok(CoeffExpr::pow(Self::from_sexpr(&args[0])?, p))
                    }
                    other => Err(Error::input(format!("unknown operator {other:?}"))),
                }
            }
            other => Err(Error::input(format!("cannot parse expression from {other}"))),
        }
    }

    pub fn to_sexpr(&self) -> Value {
        match self {
            CoeffExpr::Const(c) => serde_json::json!(c),
            CoeffExpr::Time => Value::from("t"),
            CoeffExpr::Theta => Value::from("theta"),
            CoeffExpr::Exp(e) => Value::Array(vec![Value::from("exp"), e.to_sexpr()]),
            CoeffExpr::Sum(v) | CoeffExpr::Product(v) => {
                let op = if matches!(self, CoeffExpr::Sum(_)) { "+" } else { "*" };
                let mut out = vec![Value::from(op)];
                out.extend(v.iter().map(CoeffExpr::to_sexpr));
                Value::Array(out)
            }
            CoeffExpr::Pow(b, p) => Value::Array(vec![Value::from("pow"), b.to_sexpr(), serde_json::json!(p)]),
        }
    }
}

impl TryFrom<Value> for CoeffExpr {
    type Error = Error;

    fn try_from(v: Value) -> Result<Self> {
        CoeffExpr::from_sexpr(&v)
    }
}

impl From<CoeffExpr> for Value {
    fn from(e: CoeffExpr) -> Value {
        e.to_sexpr()
    }
}

impl fmt::Display for CoeffExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_sexpr())
    }
}

/// An expression bundled with its partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficient {
    pub expr: CoeffExpr,
    pub d_theta: CoeffExpr,
    pub d_t: CoeffExpr,
}

impl Coefficient {
    pub fn new(expr: CoeffExpr) -> Self {
        let d_theta = expr.derivative(Var::Theta);
        let d_t = expr.derivative(Var::Time);
        Coefficient { expr, d_theta, d_t }
    }

    #[inline]
    pub fn value(&self, theta: f64, t: f64) -> f64 {
        self.expr.eval(theta, t)
    }

    #[inline]
    pub fn dtheta(&self, theta: f64, t: f64) -> f64 {
        self.d_theta.eval(theta, t)
    }

    #[inline]
    pub fn dt(&self, theta: f64, t: f64) -> f64 {
        self.d_t.eval(theta, t)
    }
}
