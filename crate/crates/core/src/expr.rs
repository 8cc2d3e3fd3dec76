//! Scalar expressions over parameter variables `p1..pdp` and decision
//! variables `x1..xdx`.
//!
//! Expressions are parsed from a small infix language, printed back in a form
//! that re-parses to the same tree, and evaluated together with exact
//! forward-mode derivatives.
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := unary (('*'|'/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' integer)?
//! atom   := number | ident | func '(' expr ')' | '(' expr ')'
//! ident  := 'p' integer | 'x' integer
//! func   := 'abs' | 'sin' | 'cos' | 'exp' | 'log'
//! ```
//!
//! The derivative of `abs(t)` is taken as `sign(t)` with `sign(0) = 0`.

use std::fmt;

use thiserror::Error;

/// Expression tree. Variable indices are zero-based; they print one-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    P(usize),
    X(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Abs(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("variable `{name}` at byte {offset} is out of range (declared dp={dp}, dx={dx})")]
    IndexOutOfRange {
        offset: usize,
        name: String,
        dp: usize,
        dx: usize,
    },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownIdentifier { offset, .. }
            | ParseError::IndexOutOfRange { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("domain error in `{op}` at node {node} (`{subexpr}`): argument {argument}")]
    Domain {
        op: &'static str,
        /// Pre-order index of the offending node.
        node: usize,
        subexpr: String,
        argument: f64,
    },
}

/// Non-fatal findings reported by the parser.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub enum ParseWarning {
    /// `abs(...)` wraps a subexpression depending on `x`; the function is
    /// not differentiable in `x` at the kink.
    XDependentAbs { offset: usize },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::XDependentAbs { offset } => write!(
                f,
                "abs() at byte {offset} depends on x; derivative uses sign(0) = 0 at the kink"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub expr: Expr,
    pub warnings: Vec<ParseWarning>,
}

/// Which block of variables a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    X,
    P,
    /// Concatenated `(p, x)`.
    Both,
}

/// Parses `text` with variables restricted to `p1..p{dp}` and `x1..x{dx}`.
pub fn parse(text: &str, dp: usize, dx: usize) -> Result<Parsed, ParseError> {
    let mut parser = Parser {
        src: text.as_bytes(),
        pos: 0,
        dp,
        dx,
        warnings: Vec::new(),
    };
    let expr = parser.expr()?;
    parser.skip_ws();
    if parser.pos < parser.src.len() {
        return Err(parser.syntax("unexpected trailing input"));
    }
    Ok(Parsed {
        expr,
        warnings: parser.warnings,
    })
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    dp: usize,
    dx: usize,
    warnings: Vec<ParseWarning>,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn syntax(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            let digits = self.digits();
            if digits.is_empty() {
                return Err(self.syntax("exponent must be a non-negative integer"));
            }
            let exp: u32 = digits.parse().map_err(|_| ParseError::Syntax {
                offset: start,
                message: "exponent too large".into(),
            })?;
            return Ok(Expr::Pow(Box::new(base), exp));
        }
        Ok(base)
    }

    fn digits(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident_or_call(),
            Some(_) => Err(self.syntax("unexpected character")),
            None => Err(self.syntax("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        let s = self.src;
        let mut i = self.pos;
        while i < s.len() && s[i].is_ascii_digit() {
            i += 1;
        }
        if i < s.len() && s[i] == b'.' {
            i += 1;
            while i < s.len() && s[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            if j < s.len() && s[j].is_ascii_digit() {
                while j < s.len() && s[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        self.pos = i;
        let text = std::str::from_utf8(&s[start..i]).unwrap_or("");
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| ParseError::Syntax {
                offset: start,
                message: format!("malformed number `{text}`"),
            })
    }

    fn ident_or_call(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos])
            .unwrap_or("")
            .to_string();
        let func: Option<fn(Box<Expr>) -> Expr> = match name.as_str() {
            "abs" => Some(Expr::Abs),
            "sin" => Some(Expr::Sin),
            "cos" => Some(Expr::Cos),
            "exp" => Some(Expr::Exp),
            "log" => Some(Expr::Log),
            _ => None,
        };
        if let Some(make) = func {
            self.expect(b'(')?;
            let arg = self.expr()?;
            self.expect(b')')?;
            if name == "abs" && arg.depends_on_x() {
                self.warnings.push(ParseWarning::XDependentAbs { offset: start });
            }
            return Ok(make(Box::new(arg)));
        }
        let (kind, rest) = name.split_at(1);
        let index = if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
            rest.parse::<usize>().ok()
        } else {
            None
        };
        let (Some(index), true) = (index, kind == "p" || kind == "x") else {
            return Err(ParseError::UnknownIdentifier {
                offset: start,
                name,
            });
        };
        let bound = if kind == "p" { self.dp } else { self.dx };
        if index == 0 || index > bound {
            return Err(ParseError::IndexOutOfRange {
                offset: start,
                name,
                dp: self.dp,
                dx: self.dx,
            });
        }
        Ok(if kind == "p" {
            Expr::P(index - 1)
        } else {
            Expr::X(index - 1)
        })
    }
}

/// Value together with a dense tangent block.
#[derive(Debug, Clone)]
struct Dual {
    v: f64,
    d: Vec<f64>,
}

impl Dual {
    fn constant(v: f64, n: usize) -> Self {
        Dual { v, d: vec![0.0; n] }
    }

    /// `self.v` replaced by `v`, tangent scaled by `s`.
    fn chain(mut self, v: f64, s: f64) -> Self {
        self.v = v;
        for t in &mut self.d {
            *t *= s;
        }
        self
    }
}

impl Expr {
    pub fn depends_on_x(&self) -> bool {
        self.any_leaf(&|e| matches!(e, Expr::X(_)))
    }

    pub fn depends_on_p(&self) -> bool {
        self.any_leaf(&|e| matches!(e, Expr::P(_)))
    }

    fn any_leaf(&self, pred: &dyn Fn(&Expr) -> bool) -> bool {
        match self {
            Expr::Const(_) | Expr::P(_) | Expr::X(_) => pred(self),
            Expr::Neg(a)
            | Expr::Pow(a, _)
            | Expr::Abs(a)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Exp(a)
            | Expr::Log(a) => a.any_leaf(pred),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.any_leaf(pred) || b.any_leaf(pred)
            }
        }
    }

    /// Largest `(p, x)` variable counts referenced, i.e. one past the
    /// highest zero-based index in each block.
    pub fn var_extent(&self) -> (usize, usize) {
        match self {
            Expr::Const(_) => (0, 0),
            Expr::P(i) => (i + 1, 0),
            Expr::X(i) => (0, i + 1),
            Expr::Neg(a)
            | Expr::Pow(a, _)
            | Expr::Abs(a)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Exp(a)
            | Expr::Log(a) => a.var_extent(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                let (pa, xa) = a.var_extent();
                let (pb, xb) = b.var_extent();
                (pa.max(pb), xa.max(xb))
            }
        }
    }

    pub fn eval(&self, p: &[f64], x: &[f64]) -> Result<f64, EvalError> {
        let mut counter = 0;
        self.eval_at(p, x, &mut counter)
    }

    fn eval_at(&self, p: &[f64], x: &[f64], node: &mut usize) -> Result<f64, EvalError> {
        let id = *node;
        *node += 1;
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::P(i) => lookup(p, *i, "p")?,
            Expr::X(i) => lookup(x, *i, "x")?,
            Expr::Neg(a) => -a.eval_at(p, x, node)?,
            Expr::Add(a, b) => a.eval_at(p, x, node)? + b.eval_at(p, x, node)?,
            Expr::Sub(a, b) => a.eval_at(p, x, node)? - b.eval_at(p, x, node)?,
            Expr::Mul(a, b) => a.eval_at(p, x, node)? * b.eval_at(p, x, node)?,
            Expr::Div(a, b) => {
                let num = a.eval_at(p, x, node)?;
                let den = b.eval_at(p, x, node)?;
                if den == 0.0 {
                    return Err(self.domain("div", id, den));
                }
                num / den
            }
            Expr::Pow(a, k) => powi(a.eval_at(p, x, node)?, *k),
            Expr::Abs(a) => a.eval_at(p, x, node)?.abs(),
            Expr::Sin(a) => a.eval_at(p, x, node)?.sin(),
            Expr::Cos(a) => a.eval_at(p, x, node)?.cos(),
            Expr::Exp(a) => a.eval_at(p, x, node)?.exp(),
            Expr::Log(a) => {
                let t = a.eval_at(p, x, node)?;
                if t <= 0.0 {
                    return Err(self.domain("log", id, t));
                }
                t.ln()
            }
        })
    }

    fn domain(&self, op: &'static str, node: usize, argument: f64) -> EvalError {
        EvalError::Domain {
            op,
            node,
            subexpr: self.to_string(),
            argument,
        }
    }

    /// Value and gradient with respect to the `x` block.
    pub fn grad_x(&self, p: &[f64], x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.value_grad(p, x, Wrt::X)?.1)
    }

    /// Value and gradient with respect to the `p` block.
    pub fn grad_p(&self, p: &[f64], x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.value_grad(p, x, Wrt::P)?.1)
    }

    /// Value and exact gradient in one forward pass.
    pub fn value_grad(&self, p: &[f64], x: &[f64], wrt: Wrt) -> Result<(f64, Vec<f64>), EvalError> {
        let n = match wrt {
            Wrt::X => x.len(),
            Wrt::P => p.len(),
            Wrt::Both => p.len() + x.len(),
        };
        let mut counter = 0;
        let d = self.dual(p, x, wrt, n, &mut counter)?;
        Ok((d.v, d.d))
    }

    fn dual(
        &self,
        p: &[f64],
        x: &[f64],
        wrt: Wrt,
        n: usize,
        node: &mut usize,
    ) -> Result<Dual, EvalError> {
        let id = *node;
        *node += 1;
        Ok(match self {
            Expr::Const(c) => Dual::constant(*c, n),
            Expr::P(i) => {
                let mut d = Dual::constant(lookup(p, *i, "p")?, n);
                match wrt {
                    Wrt::P | Wrt::Both => d.d[*i] = 1.0,
                    Wrt::X => {}
                }
                d
            }
            Expr::X(i) => {
                let mut d = Dual::constant(lookup(x, *i, "x")?, n);
                match wrt {
                    Wrt::X => d.d[*i] = 1.0,
                    Wrt::Both => d.d[p.len() + *i] = 1.0,
                    Wrt::P => {}
                }
                d
            }
            Expr::Neg(a) => {
                let a = a.dual(p, x, wrt, n, node)?;
                let v = -a.v;
                a.chain(v, -1.0)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                let mut a = a.dual(p, x, wrt, n, node)?;
                let b = b.dual(p, x, wrt, n, node)?;
                let sign = if matches!(self, Expr::Add(..)) { 1.0 } else { -1.0 };
                a.v += sign * b.v;
                for (s, t) in a.d.iter_mut().zip(&b.d) {
                    *s += sign * t;
                }
                a
            }
            Expr::Mul(a, b) => {
                let a = a.dual(p, x, wrt, n, node)?;
                let b = b.dual(p, x, wrt, n, node)?;
                let d = a.d.iter().zip(&b.d).map(|(da, db)| da * b.v + a.v * db).collect();
                Dual { v: a.v * b.v, d }
            }
            Expr::Div(a, b) => {
                let a = a.dual(p, x, wrt, n, node)?;
                let b = b.dual(p, x, wrt, n, node)?;
                if b.v == 0.0 {
                    return Err(self.domain("div", id, b.v));
                }
                let v = a.v / b.v;
                let d = a.d.iter().zip(&b.d).map(|(da, db)| (da - v * db) / b.v).collect();
                Dual { v, d }
            }
            Expr::Pow(a, k) => {
                let a = a.dual(p, x, wrt, n, node)?;
                let v = powi(a.v, *k);
                let s = if *k == 0 { 0.0 } else { *k as f64 * powi(a.v, k - 1) };
                a.chain(v, s)
            }
            Expr::Abs(a) => {
                let a = a.dual(p, x, wrt, n, node)?;
                let s = if a.v > 0.0 {
                    1.0
                } else if a.v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let v = a.v.abs();
                a.chain(v, s)
            }
            Expr::Sin(a) => {
                let a = a.dual(p, x, wrt, n, node)?;
                let (v, s) = (a.v.sin(), a.v.cos());
                a.chain(v, s)
            }
            Expr::Cos(a) => {
                let a = a.dual(p, x, wrt, n, node)?;
                let (v, s) = (a.v.cos(), -a.v.sin());
                a.chain(v, s)
            }
            Expr::Exp(a) => {
                let a = a.dual(p, x, wrt, n, node)?;
                let v = a.v.exp();
                a.chain(v, v)
            }
            Expr::Log(a) => {
                let a = a.dual(p, x, wrt, n, node)?;
                if a.v <= 0.0 {
                    return Err(self.domain("log", id, a.v));
                }
                let (v, s) = (a.v.ln(), 1.0 / a.v);
                a.chain(v, s)
            }
        })
    }
}

fn lookup(v: &[f64], i: usize, what: &'static str) -> Result<f64, EvalError> {
    v.get(i).copied().ok_or(EvalError::Dimension {
        what,
        expected: i + 1,
        got: v.len(),
    })
}

fn powi(base: f64, k: u32) -> f64 {
    match i32::try_from(k) {
        Ok(k) => base.powi(k),
        Err(_) => base.powf(k as f64),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn operand(e: &Expr, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match e {
                Expr::Const(c) if *c >= 0.0 => write!(f, "{e}"),
                Expr::P(_)
                | Expr::X(_)
                | Expr::Abs(_)
                | Expr::Sin(_)
                | Expr::Cos(_)
                | Expr::Exp(_)
                | Expr::Log(_) => write!(f, "{e}"),
                _ => write!(f, "({e})"),
            }
        }
        match self {
            Expr::Const(c) if *c < 0.0 => write!(f, "-{:?}", -c),
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::P(i) => write!(f, "p{}", i + 1),
            Expr::X(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => {
                write!(f, "-")?;
                operand(a, f)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                let op = match self {
                    Expr::Add(..) => "+",
                    Expr::Sub(..) => "-",
                    Expr::Mul(..) => "*",
                    _ => "/",
                };
                operand(a, f)?;
                write!(f, " {op} ")?;
                operand(b, f)
            }
            Expr::Pow(a, k) => {
                operand(a, f)?;
                write!(f, "^{k}")
            }
            Expr::Abs(a) => write!(f, "abs({a})"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Log(a) => write!(f, "log({a})"),
        }
    }
}
