//! Scalar expressions over chart variables `q1..qn` with exact first
//! derivatives.
//!
//! The grammar is conventional: `^` binds tighter than unary minus, which
//! binds tighter than `*` `/`, which bind tighter than `+` `-`; `^` is
//! right-associative, everything else left-associative. Supported functions
//! are `sin`, `cos`, `exp`, `sqrt`.
//!
//! Differentiation is forward-mode with one dual pass per variable, so the
//! gradient of an `n`-variable expression costs `n` evaluations and is exact
//! to machine precision.

use crate::{Error, Result};

/// A first-order dual number `re + eps·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn constant(re: f64) -> Self {
        Dual { re, eps: 0.0 }
    }

    pub fn seeded(re: f64, eps: f64) -> Self {
        Dual { re, eps }
    }
}

/// Scalar abstraction so the same evaluator runs on `f64` and on [`Dual`].
pub trait Scalar: Copy {
    fn from_f64(v: f64) -> Self;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn div(self, o: Self) -> Result<Self>;
    fn neg(self) -> Self;
    fn pow(self, o: Self) -> Result<Self>;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Result<Self>;
    fn check_finite(self, ctx: &str) -> Result<Self>;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn sub(self, o: Self) -> Self {
        self - o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn div(self, o: Self) -> Result<Self> {
        if o == 0.0 {
            return Err(Error::Domain("division by zero".into()));
        }
        Ok(self / o)
    }
    fn neg(self) -> Self {
        -self
    }
    fn pow(self, o: Self) -> Result<Self> {
        pow_f64(self, o)
    }
    fn sin(self) -> Self {
        self.sin()
    }
    fn cos(self) -> Self {
        self.cos()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn sqrt(self) -> Result<Self> {
        if self < 0.0 {
            return Err(Error::Domain(format!("sqrt of negative value {self}")));
        }
        Ok(self.sqrt())
    }
    fn check_finite(self, ctx: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::Domain(format!("non-finite value in {ctx}")))
        }
    }
}

fn pow_f64(a: f64, b: f64) -> Result<f64> {
    if b.fract() == 0.0 && b.abs() < 2147483647.0 {
        return Ok(a.powi(b as i32));
    }
    if a < 0.0 {
        return Err(Error::Domain(format!(
            "{a} raised to non-integer power {b}"
        )));
    }
    Ok(a.powf(b))
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn add(self, o: Self) -> Self {
        Dual {
            re: self.re + o.re,
            eps: self.eps + o.eps,
        }
    }
    fn sub(self, o: Self) -> Self {
        Dual {
            re: self.re - o.re,
            eps: self.eps - o.eps,
        }
    }
    fn mul(self, o: Self) -> Self {
        Dual {
            re: self.re * o.re,
            eps: self.re * o.eps + self.eps * o.re,
        }
    }
    fn div(self, o: Self) -> Result<Self> {
        if o.re == 0.0 {
            return Err(Error::Domain("division by zero".into()));
        }
        Ok(Dual {
            re: self.re / o.re,
            eps: (self.eps * o.re - self.re * o.eps) / (o.re * o.re),
        })
    }
    fn neg(self) -> Self {
        Dual {
            re: -self.re,
            eps: -self.eps,
        }
    }
    fn pow(self, o: Self) -> Result<Self> {
        // Integer exponents keep the rule b·a^(b-1) valid on all of R.
        if o.eps == 0.0 && o.re.fract() == 0.0 && o.re.abs() < 2147483647.0 {
            let k = o.re as i32;
            let re = self.re.powi(k);
            let eps = if k == 0 {
                0.0
            } else {
                f64::from(k) * self.re.powi(k - 1) * self.eps
            };
            return Ok(Dual { re, eps });
        }
        if self.re <= 0.0 {
            return Err(Error::Domain(format!(
                "{} raised to non-integer power {}",
                self.re, o.re
            )));
        }
        let re = self.re.powf(o.re);
        let eps = re * (o.eps * self.re.ln() + o.re * self.eps / self.re);
        Ok(Dual { re, eps })
    }
    fn sin(self) -> Self {
        Dual {
            re: self.re.sin(),
            eps: self.re.cos() * self.eps,
        }
    }
    fn cos(self) -> Self {
        Dual {
            re: self.re.cos(),
            eps: -self.re.sin() * self.eps,
        }
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual {
            re: e,
            eps: e * self.eps,
        }
    }
    fn sqrt(self) -> Result<Self> {
        if self.re < 0.0 {
            return Err(Error::Domain(format!(
                "sqrt of negative value {}",
                self.re
            )));
        }
        let s = self.re.sqrt();
        if s == 0.0 && self.eps != 0.0 {
            return Err(Error::Domain("sqrt derivative singular at 0".into()));
        }
        Ok(Dual {
            re: s,
            eps: if self.eps == 0.0 { 0.0 } else { 0.5 * self.eps / s },
        })
    }
    fn check_finite(self, ctx: &str) -> Result<Self> {
        if self.re.is_finite() && self.eps.is_finite() {
            Ok(self)
        } else {
            Err(Error::Domain(format!("non-finite value in {ctx}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
        }
    }
}

/// Parsed expression tree. Immutable after parsing; evaluation is pure, so
/// expressions can be shared freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// 0-based variable index; `Var(k)` is the chart variable `q{k+1}`.
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    /// Parse `text` as an expression over variables `q1..q{n}`.
    pub fn parse(text: &str, n: usize) -> Result<Expr> {
        Parser::new(text, n)?.parse()
    }

    pub fn eval_scalar<T: Scalar>(&self, vars: &[T]) -> Result<T> {
        let v = match self {
            Expr::Const(c) => T::from_f64(*c),
            Expr::Var(k) => vars[*k],
            Expr::Neg(e) => e.eval_scalar(vars)?.neg(),
            Expr::Add(a, b) => a.eval_scalar(vars)?.add(b.eval_scalar(vars)?),
            Expr::Sub(a, b) => a.eval_scalar(vars)?.sub(b.eval_scalar(vars)?),
            Expr::Mul(a, b) => a.eval_scalar(vars)?.mul(b.eval_scalar(vars)?),
            Expr::Div(a, b) => a.eval_scalar(vars)?.div(b.eval_scalar(vars)?)?,
            Expr::Pow(a, b) => a.eval_scalar(vars)?.pow(b.eval_scalar(vars)?)?,
            Expr::Call(f, e) => {
                let x = e.eval_scalar(vars)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Sqrt => x.sqrt()?,
                }
            }
        };
        v.check_finite("expression evaluation")
    }

    /// Value at `q`.
    pub fn eval(&self, q: &[f64]) -> Result<f64> {
        self.eval_scalar(q)
    }

    /// Value and full gradient at `q`, one dual pass per variable.
    pub fn eval_with_jet(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = q.len();
        let mut grad = vec![0.0; n];
        let mut value = 0.0;
        let mut vars: Vec<Dual> = q.iter().map(|&x| Dual::constant(x)).collect();
        for k in 0..n {
            vars[k].eps = 1.0;
            let d = self.eval_scalar(&vars)?;
            vars[k].eps = 0.0;
            value = d.re;
            grad[k] = d.eps;
        }
        if n == 0 {
            value = self.eval(q)?;
        }
        Ok((value, grad))
    }

    /// Directional derivative d/dt f(q + t·dir) at t = 0, single dual pass.
    pub fn eval_directional(&self, q: &[f64], dir: &[f64]) -> Result<(f64, f64)> {
        let vars: Vec<Dual> = q
            .iter()
            .zip(dir.iter())
            .map(|(&x, &d)| Dual::seeded(x, d))
            .collect();
        let d = self.eval_scalar(&vars)?;
        Ok((d.re, d.eps))
    }

    /// Largest variable index used, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(k) => Some(*k),
            Expr::Neg(e) | Expr::Call(_, e) => e.max_var(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                match (a.max_var(), b.max_var()) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, None) => x,
                    (None, y) => y,
                }
            }
        }
    }

    /// Constant-coefficient linear combination `Σ c_j e_j` as a new tree.
    pub fn linear_combination(coeffs: &[f64], exprs: &[Expr]) -> Expr {
        let mut acc: Option<Expr> = None;
        for (c, e) in coeffs.iter().zip(exprs) {
            if *c == 0.0 {
                continue;
            }
            let term = if *c == 1.0 {
                e.clone()
            } else {
                Expr::Mul(Box::new(Expr::Const(*c)), Box::new(e.clone()))
            };
            acc = Some(match acc {
                None => term,
                Some(a) => Expr::Add(Box::new(a), Box::new(term)),
            });
        }
        acc.unwrap_or(Expr::Const(0.0))
    }
}

impl std::fmt::Display for Expr {
    /// Fully parenthesized form; parses back to an identically evaluating tree.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(k) => write!(f, "q{}", k + 1),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Add(a, b) => write!(f, "({a}+{b})"),
            Expr::Sub(a, b) => write!(f, "({a}-{b})"),
            Expr::Mul(a, b) => write!(f, "({a}*{b})"),
            Expr::Div(a, b) => write!(f, "({a}/{b})"),
            Expr::Pow(a, b) => write!(f, "({a}^{b})"),
            Expr::Call(c, e) => write!(f, "{}({e})", c.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    n: usize,
    end: usize,
}

impl Parser {
    fn new(text: &str, n: usize) -> Result<Parser> {
        if text.trim().is_empty() {
            return Err(Error::Parse {
                offset: 0,
                msg: "empty expression".into(),
            });
        }
        let bytes = text.as_bytes();
        let mut toks = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let b = bytes[i];
            match b {
                b' ' | b'\t' | b'\n' | b'\r' => i += 1,
                b'+' => {
                    toks.push((Tok::Plus, i));
                    i += 1;
                }
                b'-' => {
                    toks.push((Tok::Minus, i));
                    i += 1;
                }
                b'*' => {
                    toks.push((Tok::Star, i));
                    i += 1;
                }
                b'/' => {
                    toks.push((Tok::Slash, i));
                    i += 1;
                }
                b'^' => {
                    toks.push((Tok::Caret, i));
                    i += 1;
                }
                b'(' => {
                    toks.push((Tok::LParen, i));
                    i += 1;
                }
                b')' => {
                    toks.push((Tok::RParen, i));
                    i += 1;
                }
                b'0'..=b'9' | b'.' => {
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
                    let lit = &text[start..i];
                    let v: f64 = lit.parse().map_err(|_| Error::Parse {
                        offset: start,
                        msg: format!("bad number literal `{lit}`"),
                    })?;
                    toks.push((Tok::Num(v), start));
                }
                b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                    let start = i;
                    while i < bytes.len()
                        && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                    {
                        i += 1;
                    }
                    toks.push((Tok::Ident(text[start..i].to_string()), start));
                }
                _ => {
                    return Err(Error::Parse {
                        offset: i,
                        msg: format!("unexpected character `{}`", b as char),
                    })
                }
            }
        }
        Ok(Parser {
            toks,
            pos: 0,
            n,
            end: text.len(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(_, o)| *o)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        self.pos += 1;
        t
    }

    fn parse(&mut self) -> Result<Expr> {
        let e = self.sum()?;
        if self.pos != self.toks.len() {
            return Err(Error::Parse {
                offset: self.offset(),
                msg: "trailing input".into(),
            });
        }
        Ok(e)
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.product()?));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.product()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if let Some(Tok::Minus) = self.peek() {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.bump();
            // Right-associative; the exponent may carry a unary minus.
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let offset = self.offset();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::LParen) => {
                let e = self.sum()?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(Error::Parse {
                        offset: self.offset(),
                        msg: "expected `)`".into(),
                    }),
                }
            }
            Some(Tok::Ident(name)) => {
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "sqrt" => Some(Func::Sqrt),
                    _ => None,
                };
                if let Some(func) = func {
                    match self.bump() {
                        Some(Tok::LParen) => {}
                        _ => {
                            return Err(Error::Parse {
                                offset,
                                msg: format!("expected `(` after `{name}`"),
                            })
                        }
                    }
                    let arg = self.sum()?;
                    match self.bump() {
                        Some(Tok::RParen) => Ok(Expr::Call(func, Box::new(arg))),
                        _ => Err(Error::Parse {
                            offset: self.offset(),
                            msg: "expected `)`".into(),
                        }),
                    }
                } else if let Some(idx) = parse_var(&name, self.n) {
                    Ok(Expr::Var(idx))
                } else {
                    Err(Error::UnknownIdentifier { name, offset })
                }
            }
            _ => Err(Error::Parse {
                offset,
                msg: "expected number, variable, function or `(`".into(),
            }),
        }
    }
}

fn parse_var(name: &str, n: usize) -> Option<usize> {
    let digits = name.strip_prefix('q')?;
    if digits.is_empty() || digits.starts_with('0') {
        return None;
    }
    let k: usize = digits.parse().ok()?;
    if k >= 1 && k <= n {
        Some(k - 1)
    } else {
        None
    }
}
