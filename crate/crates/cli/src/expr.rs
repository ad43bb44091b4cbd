//! Arithmetic expressions over the coefficient arguments, with symbolic
//! derivatives.
//!
//! Grammar: numbers, `+ - * / ^` (right-associative `^`, unary minus),
//! parentheses, `exp(a)`, `log(a)`, `min(a, b)`, `max(a, b)` and the
//! variables `t, x1.., m1.., y, n, z, k1.., u, e`; `x`, `m` and `k` are
//! aliases for the first component.

use std::collections::HashMap;
use std::fmt;

use mfdelay_core::model::{Args, ScalarFn, Univariate, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("{message} at position {pos} in '{source_text}'")]
pub struct ExprError {
    pub message: String,
    pub pos: usize,
    pub source_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sym {
    T,
    X(usize),
    M(usize),
    Y,
    N,
    Z,
    K(usize),
    U,
    E,
}

impl Sym {
    fn parse(name: &str) -> Option<Self> {
        let indexed = |rest: &str| -> Option<usize> {
            if rest.is_empty() {
                return Some(0);
            }
            rest.parse::<usize>().ok().filter(|i| *i >= 1).map(|i| i - 1)
        };
        Some(match name {
            "t" => Sym::T,
            "y" => Sym::Y,
            "n" => Sym::N,
            "z" => Sym::Z,
            "u" => Sym::U,
            "e" => Sym::E,
            _ => {
                let (head, rest) = name.split_at(1);
                let i = indexed(rest)?;
                match head {
                    "x" => Sym::X(i),
                    "m" => Sym::M(i),
                    "k" => Sym::K(i),
                    _ => return None,
                }
            }
        })
    }

    fn from_var(v: Var) -> Self {
        match v {
            Var::X(i) => Sym::X(i),
            Var::M(i) => Sym::M(i),
            Var::Y => Sym::Y,
            Var::N => Sym::N,
            Var::Z => Sym::Z,
            Var::K(i) => Sym::K(i),
            Var::U => Sym::U,
        }
    }

    fn value(self, a: &Args) -> f64 {
        let get = |s: &[f64], i: usize| s.get(i).copied().unwrap_or(0.0);
        match self {
            Sym::T => a.t,
            Sym::X(i) => get(a.x, i),
            Sym::M(i) => get(a.m, i),
            Sym::Y => a.y,
            Sym::N => a.n,
            Sym::Z => a.z,
            Sym::K(i) => get(a.k, i),
            Sym::U => a.u,
            Sym::E => a.e,
        }
    }
}

impl fmt::Display for Sym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sym::T => write!(f, "t"),
            Sym::X(i) => write!(f, "x{}", i + 1),
            Sym::M(i) => write!(f, "m{}", i + 1),
            Sym::Y => write!(f, "y"),
            Sym::N => write!(f, "n"),
            Sym::Z => write!(f, "z"),
            Sym::K(i) => write!(f, "k{}", i + 1),
            Sym::U => write!(f, "u"),
            Sym::E => write!(f, "e"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Sym(Sym),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Sym(s) => write!(f, "{s}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Log(a) => write!(f, "log({a})"),
            Expr::Min(a, b) => write!(f, "min({a}, {b})"),
            Expr::Max(a, b) => write!(f, "max({a}, {b})"),
        }
    }
}

fn num(v: f64) -> Expr {
    Expr::Num(v)
}

// Constructors that fold the trivial cases so derivatives stay small.
fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => num(x + y),
        (Expr::Num(z), e) | (e, Expr::Num(z)) if z == 0.0 => e,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => num(x - y),
        (e, Expr::Num(z)) if z == 0.0 => e,
        (Expr::Num(z), e) if z == 0.0 => neg(e),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => num(x * y),
        (Expr::Num(z), _) | (_, Expr::Num(z)) if z == 0.0 => num(0.0),
        (Expr::Num(o), e) | (e, Expr::Num(o)) if o == 1.0 => e,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(z), _) if z == 0.0 => num(0.0),
        (e, Expr::Num(o)) if o == 1.0 => e,
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(x) => num(-x),
        Expr::Neg(e) => *e,
        e => Expr::Neg(Box::new(e)),
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self, ExprError> {
        Parser::new(src)?.parse_all()
    }

    pub fn eval(&self, a: &Args) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Sym(s) => s.value(a),
            Expr::Neg(e) => -e.eval(a),
            Expr::Add(x, y) => x.eval(a) + y.eval(a),
            Expr::Sub(x, y) => x.eval(a) - y.eval(a),
            Expr::Mul(x, y) => x.eval(a) * y.eval(a),
            Expr::Div(x, y) => x.eval(a) / y.eval(a),
            Expr::Pow(x, y) => x.eval(a).powf(y.eval(a)),
            Expr::Exp(e) => e.eval(a).exp(),
            Expr::Log(e) => e.eval(a).ln(),
            Expr::Min(x, y) => x.eval(a).min(y.eval(a)),
            Expr::Max(x, y) => x.eval(a).max(y.eval(a)),
        }
    }

    pub fn symbols(&self, out: &mut Vec<Sym>) {
        match self {
            Expr::Num(_) => {}
            Expr::Sym(s) => {
                if !out.contains(s) {
                    out.push(*s);
                }
            }
            Expr::Neg(e) | Expr::Exp(e) | Expr::Log(e) => e.symbols(out),
            Expr::Add(x, y)
            | Expr::Sub(x, y)
            | Expr::Mul(x, y)
            | Expr::Div(x, y)
            | Expr::Pow(x, y)
            | Expr::Min(x, y)
            | Expr::Max(x, y) => {
                x.symbols(out);
                y.symbols(out);
            }
        }
    }

    fn depends_on(&self, s: Sym) -> bool {
        let mut v = Vec::new();
        self.symbols(&mut v);
        v.contains(&s)
    }

    /// Symbolic derivative, or `None` when it passes through a `min` or
    /// `max` that depends on `s`.
    pub fn diff(&self, s: Sym) -> Option<Expr> {
        if !self.depends_on(s) {
            return Some(num(0.0));
        }
        Some(match self {
            Expr::Num(_) => num(0.0),
            Expr::Sym(v) => num(if *v == s { 1.0 } else { 0.0 }),
            Expr::Neg(e) => neg(e.diff(s)?),
            Expr::Add(a, b) => add(a.diff(s)?, b.diff(s)?),
            Expr::Sub(a, b) => sub(a.diff(s)?, b.diff(s)?),
            Expr::Mul(a, b) => add(mul(a.diff(s)?, (**b).clone()), mul((**a).clone(), b.diff(s)?)),
            Expr::Div(a, b) => {
                let num_part = sub(mul(a.diff(s)?, (**b).clone()), mul((**a).clone(), b.diff(s)?));
                div(num_part, Expr::Pow(b.clone(), Box::new(num(2.0))))
            }
            Expr::Pow(a, b) => {
                if let Expr::Num(k) = **b {
                    mul(
                        mul(num(k), Expr::Pow(a.clone(), Box::new(num(k - 1.0)))),
                        a.diff(s)?,
                    )
                } else {
                    // d(a^b) = a^b (b' ln a + b a' / a)
                    let inner = add(
                        mul(b.diff(s)?, Expr::Log(a.clone())),
                        div(mul((**b).clone(), a.diff(s)?), (**a).clone()),
                    );
                    mul(self.clone(), inner)
                }
            }
            Expr::Exp(e) => mul(self.clone(), e.diff(s)?),
            Expr::Log(e) => div(e.diff(s)?, (**e).clone()),
            Expr::Min(_, _) | Expr::Max(_, _) => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    src: String,
}

impl Parser {
    fn new(src: &str) -> Result<Self, ExprError> {
        let mut toks = Vec::new();
        let chars: Vec<char> = src.chars().collect();
        let mut i = 0;
        let err = |message: String, pos: usize| ExprError {
            message,
            pos,
            source_text: src.to_string(),
        };
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_digit() || c == '.' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let v = text
                    .parse::<f64>()
                    .map_err(|_| err(format!("malformed number '{text}'"), start))?;
                toks.push((Tok::Num(v), start));
            } else if c.is_ascii_alphabetic() {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                toks.push((Tok::Ident(chars[start..i].iter().collect()), start));
            } else if "+-*/^(),".contains(c) {
                toks.push((Tok::Op(c), i));
                i += 1;
            } else {
                return Err(err(format!("unexpected character '{c}'"), i));
            }
        }
        Ok(Self {
            toks,
            pos: 0,
            src: src.to_string(),
        })
    }

    fn error(&self, message: impl Into<String>) -> ExprError {
        ExprError {
            message: message.into(),
            pos: self.toks.get(self.pos).map_or(self.src.len(), |t| t.1),
            source_text: self.src.clone(),
        }
    }

    fn peek_op(&self) -> Option<char> {
        match self.toks.get(self.pos) {
            Some((Tok::Op(c), _)) => Some(*c),
            _ => None,
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        if self.peek_op() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected '{c}'")))
        }
    }

    fn parse_all(mut self) -> Result<Expr, ExprError> {
        if self.toks.is_empty() {
            return Err(self.error("empty expression"));
        }
        let e = self.sum()?;
        if self.pos != self.toks.len() {
            return Err(self.error("unexpected trailing input"));
        }
        Ok(e)
    }

    fn sum(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.product()?;
        while let Some(op @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.product()?;
            lhs = if op == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(op @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        match self.peek_op() {
            Some('-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let Some((tok, _)) = self.toks.get(self.pos).cloned() else {
            return Err(self.error("unexpected end of expression"));
        };
        match tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Tok::Op('(') => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let arity = match name.as_str() {
                    "exp" | "log" => 1,
                    "min" | "max" => 2,
                    _ => 0,
                };
                if arity == 0 {
                    let sym = Sym::parse(&name).ok_or_else(|| self.error(format!("unknown variable '{name}'")))?;
                    self.pos += 1;
                    return Ok(Expr::Sym(sym));
                }
                self.pos += 1;
                self.expect('(')?;
                let a = self.sum()?;
                let e = if arity == 2 {
                    self.expect(',')?;
                    let b = self.sum()?;
                    if name == "min" {
                        Expr::Min(Box::new(a), Box::new(b))
                    } else {
                        Expr::Max(Box::new(a), Box::new(b))
                    }
                } else if name == "exp" {
                    Expr::Exp(Box::new(a))
                } else {
                    Expr::Log(Box::new(a))
                };
                self.expect(')')?;
                Ok(e)
            }
            Tok::Op(c) => Err(self.error(format!("unexpected '{c}'"))),
        }
    }
}

/// A parsed coefficient with its symbolic partials.
#[derive(Debug, Clone)]
pub struct ExprCoef {
    expr: Expr,
    partials: HashMap<Sym, Option<Expr>>,
}

impl ExprCoef {
    pub fn parse(src: &str) -> Result<Self, ExprError> {
        let expr = Expr::parse(src)?;
        let mut syms = Vec::new();
        expr.symbols(&mut syms);
        let partials = syms.iter().map(|s| (*s, expr.diff(*s))).collect();
        Ok(Self { expr, partials })
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn symbols(&self) -> Vec<Sym> {
        let mut v = Vec::new();
        self.expr.symbols(&mut v);
        v
    }
}

impl ScalarFn for ExprCoef {
    fn eval(&self, a: &Args) -> f64 {
        self.expr.eval(a)
    }

    fn partial(&self, a: &Args, v: Var) -> Option<f64> {
        match self.partials.get(&Sym::from_var(v)) {
            None => Some(0.0),
            Some(d) => d.as_ref().map(|d| d.eval(a)),
        }
    }
}

/// A one-variable function from an expression in `var`; any other symbol is
/// an error.
pub fn univariate(src: &str, var: Sym) -> Result<Univariate, ExprError> {
    let coef = ExprCoef::parse(src)?;
    if let Some(bad) = coef.symbols().into_iter().find(|s| *s != var) {
        return Err(ExprError {
            message: format!("only '{var}' may appear here, found '{bad}'"),
            pos: 0,
            source_text: src.to_string(),
        });
    }
    let var = match var {
        Sym::X(_) => Sym::X(0),
        Sym::M(_) => Sym::M(0),
        Sym::K(_) => Sym::K(0),
        s => s,
    };
    let deriv = coef.expr.diff(var);
    let expr = coef.expr;
    let f = move |v: f64| eval_at(&expr, var, v);
    Ok(match deriv {
        Some(d) => Univariate::new(f, move |v: f64| eval_at(&d, var, v)),
        None => Univariate::numeric(f),
    })
}

fn eval_at(e: &Expr, var: Sym, v: f64) -> f64 {
    let (mut x, mut m, mut k) = ([0.0], [0.0], [0.0]);
    let mut s = [0.0; 6];
    match var {
        Sym::T => s[0] = v,
        Sym::Y => s[1] = v,
        Sym::N => s[2] = v,
        Sym::Z => s[3] = v,
        Sym::U => s[4] = v,
        Sym::E => s[5] = v,
        Sym::X(_) => x[0] = v,
        Sym::M(_) => m[0] = v,
        Sym::K(_) => k[0] = v,
    }
    e.eval(&Args {
        t: s[0],
        x: &x,
        m: &m,
        y: s[1],
        n: s[2],
        z: s[3],
        k: &k,
        u: s[4],
        e: s[5],
    })
}
