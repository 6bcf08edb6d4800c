//! Scalar expression DSL over variables `x1..xn` with second-order forward-mode
//! automatic differentiation.
//!
//! Problems are defined in data files, so objectives and constraints arrive as
//! text. [`parse`] turns text into an [`Expr`]; [`Expr::eval2`] propagates
//! value, gradient and Hessian in one forward sweep through the tree.
//!
//! Grammar (standard precedence, `^` binds tightest and is right-associative):
//!
//! ```text
//!   expr   := term (('+'|'-') term)*
//!   term   := factor (('*'|'/') factor)*
//!   factor := '-' factor | power
//!   power  := atom ('^' factor)?
//!   atom   := number | number atom'        (juxtaposition, e.g. "2x1" = 2*x1)
//!           | xK | fn '(' expr ')' | '(' expr ')'
//! ```
//!
//! Supported functions: `sin`, `cos`, `exp`, `log`, `sqrt`. There is no `abs`
//! and no conditional: the classification machinery downstream needs twice
//! continuously differentiable data.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Error produced while parsing expression text.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    /// Byte offset into the input where the problem was detected.
    pub offset: usize,
    pub message: String,
}

/// Error produced while evaluating an expression (domain violations).
#[derive(Debug, Clone, Error, PartialEq)]
#[error("evaluation error at byte {offset}: {message}")]
pub struct EvalError {
    /// Byte offset of the offending subexpression in the original text.
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl UnaryFn {
    fn name(self) -> &'static str {
        match self {
            UnaryFn::Sin => "sin",
            UnaryFn::Cos => "cos",
            UnaryFn::Exp => "exp",
            UnaryFn::Log => "log",
            UnaryFn::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone)]
enum Node {
    Num(f64),
    /// 1-based variable index, as written (`x3` stores 3).
    Var(usize),
    Neg(Box<Spanned>),
    Bin(BinOp, Box<Spanned>, Box<Spanned>),
    Call(UnaryFn, Box<Spanned>),
}

#[derive(Debug, Clone)]
struct Spanned {
    node: Node,
    /// Byte offset of the start of this subexpression.
    offset: usize,
}

/// A parsed, immutable expression over `x1..xn`.
///
/// Evaluation is pure; expressions may be shared freely across threads.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Spanned,
    text: String,
    max_var: usize,
}

/// Value, gradient and Hessian of an expression at a point.
///
/// The Hessian is exactly symmetric by construction: every propagation rule
/// only ever adds symmetric terms, entrywise in identical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Eval2 {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl Eval2 {
    /// Constant with zero derivatives over `n` variables.
    pub fn constant(value: f64, n: usize) -> Self {
        Eval2 {
            value,
            gradient: DVector::zeros(n),
            hessian: DMatrix::zeros(n, n),
        }
    }

    /// Embed an evaluation over the first `n` variables into an `m`-variable
    /// space (`m >= n`), padding gradient and Hessian with zeros.
    pub fn embed(&self, m: usize) -> Self {
        let n = self.gradient.len();
        assert!(m >= n);
        let mut gradient = DVector::zeros(m);
        gradient.rows_mut(0, n).copy_from(&self.gradient);
        let mut hessian = DMatrix::zeros(m, m);
        hessian.view_mut((0, 0), (n, n)).copy_from(&self.hessian);
        Eval2 {
            value: self.value,
            gradient,
            hessian,
        }
    }
}

// ---------------------------------------------------------------------------
// Second-order forward propagation
// ---------------------------------------------------------------------------

/// Forward-mode carrier: value, gradient and Hessian of an intermediate
/// quantity with respect to the independent variables.
#[derive(Clone)]
struct Jet2 {
    v: f64,
    g: DVector<f64>,
    h: DMatrix<f64>,
}

impl Jet2 {
    fn constant(v: f64, n: usize) -> Self {
        Jet2 {
            v,
            g: DVector::zeros(n),
            h: DMatrix::zeros(n, n),
        }
    }

    fn variable(v: f64, k: usize, n: usize) -> Self {
        let mut g = DVector::zeros(n);
        g[k] = 1.0;
        Jet2 {
            v,
            g,
            h: DMatrix::zeros(n, n),
        }
    }

    fn neg(&self) -> Self {
        Jet2 {
            v: -self.v,
            g: -&self.g,
            h: -&self.h,
        }
    }

    fn add(&self, o: &Jet2) -> Self {
        Jet2 {
            v: self.v + o.v,
            g: &self.g + &o.g,
            h: &self.h + &o.h,
        }
    }

    fn sub(&self, o: &Jet2) -> Self {
        Jet2 {
            v: self.v - o.v,
            g: &self.g - &o.g,
            h: &self.h - &o.h,
        }
    }

    fn mul(&self, o: &Jet2) -> Self {
        let n = self.g.len();
        // one triangle computed, then mirrored: symmetry is exact by
        // construction, not up to rounding
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.h[(i, j)] * o.v
                    + o.h[(i, j)] * self.v
                    + self.g[i] * o.g[j]
                    + o.g[i] * self.g[j];
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        Jet2 {
            v: self.v * o.v,
            g: &self.g * o.v + &o.g * self.v,
            h,
        }
    }

    /// Quotient rule, written so that `self = q * o` reproduces the inputs.
    fn div(&self, o: &Jet2) -> Self {
        let n = self.g.len();
        let v = self.v / o.v;
        let g = (&self.g - &o.g * v) / o.v;
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let e = (self.h[(i, j)] - v * o.h[(i, j)] - g[i] * o.g[j] - o.g[i] * g[j]) / o.v;
                h[(i, j)] = e;
                h[(j, i)] = e;
            }
        }
        Jet2 { v, g, h }
    }

    /// Chain rule for a scalar function with first and second derivative.
    fn apply(&self, v: f64, d1: f64, d2: f64) -> Self {
        let n = self.g.len();
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let e = d1 * self.h[(i, j)] + d2 * self.g[i] * self.g[j];
                h[(i, j)] = e;
                h[(j, i)] = e;
            }
        }
        Jet2 {
            v,
            g: &self.g * d1,
            h,
        }
    }

    /// Integer power by repeated multiplication (exact chain rule; avoids the
    /// `exp(k log x)` route which breaks down at nonpositive bases).
    fn powi(&self, k: i64, offset: usize) -> Result<Jet2, EvalError> {
        let n = self.g.len();
        if k == 0 {
            return Ok(Jet2::constant(1.0, n));
        }
        let negate = k < 0;
        let mut e = k.unsigned_abs();
        // exponentiation by squaring on jets
        let mut base = self.clone();
        let mut acc = Jet2::constant(1.0, n);
        loop {
            if e & 1 == 1 {
                acc = acc.mul(&base);
            }
            e >>= 1;
            if e == 0 {
                break;
            }
            base = base.mul(&base);
        }
        if negate {
            if acc.v == 0.0 {
                return Err(EvalError {
                    offset,
                    message: "negative power of zero".into(),
                });
            }
            Ok(Jet2::constant(1.0, n).div(&acc))
        } else {
            Ok(acc)
        }
    }
}

fn eval_node(node: &Spanned, x: &DVector<f64>) -> Result<Jet2, EvalError> {
    let n = x.len();
    match &node.node {
        Node::Num(v) => Ok(Jet2::constant(*v, n)),
        Node::Var(k) => {
            if *k == 0 || *k > n {
                return Err(EvalError {
                    offset: node.offset,
                    message: format!("variable x{k} out of range for a point of dimension {n}"),
                });
            }
            Ok(Jet2::variable(x[*k - 1], *k - 1, n))
        }
        Node::Neg(a) => Ok(eval_node(a, x)?.neg()),
        Node::Bin(op, a, b) => {
            let ja = eval_node(a, x)?;
            match op {
                BinOp::Add => Ok(ja.add(&eval_node(b, x)?)),
                BinOp::Sub => Ok(ja.sub(&eval_node(b, x)?)),
                BinOp::Mul => Ok(ja.mul(&eval_node(b, x)?)),
                BinOp::Div => {
                    let jb = eval_node(b, x)?;
                    if jb.v == 0.0 {
                        return Err(EvalError {
                            offset: b.offset,
                            message: "division by zero".into(),
                        });
                    }
                    Ok(ja.div(&jb))
                }
                BinOp::Pow => {
                    // Literal integer exponents go through repeated
                    // multiplication; anything else requires a positive base.
                    if let Some(k) = integer_literal(b) {
                        return ja.powi(k, node.offset);
                    }
                    let jb = eval_node(b, x)?;
                    if jb.g.iter().all(|&t| t == 0.0) && jb.v.fract() == 0.0 && jb.v.abs() < 1e15 {
                        return ja.powi(jb.v as i64, node.offset);
                    }
                    if ja.v <= 0.0 {
                        return Err(EvalError {
                            offset: node.offset,
                            message: format!("non-integer power of nonpositive base {}", ja.v),
                        });
                    }
                    // a^b = exp(b log a)
                    let la = ja.apply(ja.v.ln(), 1.0 / ja.v, -1.0 / (ja.v * ja.v));
                    let prod = jb.mul(&la);
                    let ev = prod.v.exp();
                    Ok(prod.apply(ev, ev, ev))
                }
            }
        }
        Node::Call(f, a) => {
            let ja = eval_node(a, x)?;
            let u = ja.v;
            match f {
                UnaryFn::Sin => Ok(ja.apply(u.sin(), u.cos(), -u.sin())),
                UnaryFn::Cos => Ok(ja.apply(u.cos(), -u.sin(), -u.cos())),
                UnaryFn::Exp => {
                    let e = u.exp();
                    Ok(ja.apply(e, e, e))
                }
                UnaryFn::Log => {
                    if u <= 0.0 {
                        return Err(EvalError {
                            offset: node.offset,
                            message: format!("log of nonpositive value {u}"),
                        });
                    }
                    Ok(ja.apply(u.ln(), 1.0 / u, -1.0 / (u * u)))
                }
                UnaryFn::Sqrt => {
                    if u < 0.0 {
                        return Err(EvalError {
                            offset: node.offset,
                            message: format!("sqrt of negative value {u}"),
                        });
                    }
                    if u == 0.0 {
                        return Err(EvalError {
                            offset: node.offset,
                            message: "sqrt not differentiable at zero".into(),
                        });
                    }
                    let s = u.sqrt();
                    Ok(ja.apply(s, 0.5 / s, -0.25 / (s * u)))
                }
            }
        }
    }
}

/// Extract `k` from an exponent subtree that is a literal integer, possibly
/// under unary minus.
fn integer_literal(node: &Spanned) -> Option<i64> {
    match &node.node {
        Node::Num(v) if v.fract() == 0.0 && v.abs() < 1e15 => Some(*v as i64),
        Node::Neg(inner) => integer_literal(inner).map(|k| -k),
        _ => None,
    }
}

impl Expr {
    /// Largest variable index referenced (0 for constant expressions).
    pub fn max_var(&self) -> usize {
        self.max_var
    }

    /// Original source text.
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Evaluate value, gradient and Hessian at `x`.
    pub fn eval2(&self, x: &DVector<f64>) -> Result<Eval2, EvalError> {
        let jet = eval_node(&self.root, x)?;
        Ok(Eval2 {
            value: jet.v,
            gradient: jet.g,
            hessian: jet.h,
        })
    }

    /// Value only (same domain checks as [`Expr::eval2`]).
    pub fn eval(&self, x: &DVector<f64>) -> Result<f64, EvalError> {
        Ok(self.eval2(x)?.value)
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

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

struct Lexer<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(s: &'a str) -> Self {
        Lexer {
            bytes: s.as_bytes(),
            pos: 0,
        }
    }

    fn tokens(mut self) -> Result<Vec<(Tok, usize)>, ParseError> {
        let mut out = Vec::new();
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            let start = self.pos;
            match c {
                b' ' | b'\t' | b'\r' | b'\n' => {
                    self.pos += 1;
                }
                b'+' => {
                    out.push((Tok::Plus, start));
                    self.pos += 1;
                }
                b'-' => {
                    out.push((Tok::Minus, start));
                    self.pos += 1;
                }
                b'*' => {
                    out.push((Tok::Star, start));
                    self.pos += 1;
                }
                b'/' => {
                    out.push((Tok::Slash, start));
                    self.pos += 1;
                }
                b'^' => {
                    out.push((Tok::Caret, start));
                    self.pos += 1;
                }
                b'(' => {
                    out.push((Tok::LParen, start));
                    self.pos += 1;
                }
                b')' => {
                    out.push((Tok::RParen, start));
                    self.pos += 1;
                }
                b'0'..=b'9' | b'.' => {
                    out.push((self.number(start)?, start));
                }
                b'a'..=b'z' | b'A'..=b'Z' => {
                    while self.pos < self.bytes.len()
                        && (self.bytes[self.pos].is_ascii_alphanumeric())
                    {
                        self.pos += 1;
                    }
                    let name = std::str::from_utf8(&self.bytes[start..self.pos])
                        .unwrap()
                        .to_string();
                    out.push((Tok::Ident(name), start));
                }
                _ => {
                    return Err(ParseError {
                        offset: start,
                        message: format!("unexpected character '{}'", c as char),
                    })
                }
            }
        }
        Ok(out)
    }

    fn number(&mut self, start: usize) -> Result<Tok, ParseError> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos < self.bytes.len() && self.bytes[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if self.pos < self.bytes.len() && (self.bytes[self.pos] | 32) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.bytes.len()
                && (self.bytes[self.pos] == b'+' || self.bytes[self.pos] == b'-')
            {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                // "2e" followed by non-digit: the 'e' belongs to something else
                self.pos = mark;
            }
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        s.parse::<f64>().map(Tok::Num).map_err(|_| ParseError {
            offset: start,
            message: format!("invalid number '{s}'"),
        })
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    idx: usize,
    n: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(Tok, usize)> {
        self.toks.get(self.idx)
    }

    fn next(&mut self) -> Option<(Tok, usize)> {
        let t = self.toks.get(self.idx).cloned();
        if t.is_some() {
            self.idx += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Spanned, ParseError> {
        let mut lhs = self.term()?;
        while let Some((tok, _)) = self.peek() {
            let op = match tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.next();
            let rhs = self.term()?;
            let offset = lhs.offset;
            lhs = Spanned {
                node: Node::Bin(op, Box::new(lhs), Box::new(rhs)),
                offset,
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Spanned, ParseError> {
        let mut lhs = self.factor()?;
        while let Some((tok, _)) = self.peek() {
            let op = match tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            self.next();
            let rhs = self.factor()?;
            let offset = lhs.offset;
            lhs = Spanned {
                node: Node::Bin(op, Box::new(lhs), Box::new(rhs)),
                offset,
            };
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Spanned, ParseError> {
        if let Some((Tok::Minus, off)) = self.peek().cloned() {
            self.next();
            let inner = self.factor()?;
            return Ok(Spanned {
                node: Node::Neg(Box::new(inner)),
                offset: off,
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Spanned, ParseError> {
        let base = self.atom()?;
        if let Some((Tok::Caret, _)) = self.peek() {
            self.next();
            // right-associative; exponent admits a leading unary minus
            let exp = self.factor()?;
            let offset = base.offset;
            return Ok(Spanned {
                node: Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)),
                offset,
            });
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Spanned, ParseError> {
        let (tok, off) = self.next().ok_or_else(|| ParseError {
            offset: self.end,
            message: "unexpected end of input".into(),
        })?;
        match tok {
            Tok::Num(v) => {
                let num = Spanned {
                    node: Node::Num(v),
                    offset: off,
                };
                // Juxtaposition after a literal ("2x1", "3(x1+1)") reads as
                // multiplication binding like '*'.
                match self.peek() {
                    Some((Tok::Ident(_), _)) | Some((Tok::LParen, _)) => {
                        let rhs = self.power()?;
                        Ok(Spanned {
                            node: Node::Bin(BinOp::Mul, Box::new(num), Box::new(rhs)),
                            offset: off,
                        })
                    }
                    _ => Ok(num),
                }
            }
            Tok::Ident(name) => self.ident(name, off),
            Tok::LParen => {
                let inner = self.expr()?;
                match self.next() {
                    Some((Tok::RParen, _)) => Ok(Spanned {
                        node: inner.node,
                        offset: off,
                    }),
                    other => Err(ParseError {
                        offset: other.map(|(_, o)| o).unwrap_or(self.end),
                        message: "expected ')'".into(),
                    }),
                }
            }
            other => Err(ParseError {
                offset: off,
                message: format!("unexpected token {other:?}"),
            }),
        }
    }

    fn ident(&mut self, name: String, off: usize) -> Result<Spanned, ParseError> {
        if let Some(rest) = name.strip_prefix('x') {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                let k: usize = rest.parse().map_err(|_| ParseError {
                    offset: off,
                    message: format!("invalid variable index in '{name}'"),
                })?;
                if k == 0 || k > self.n {
                    return Err(ParseError {
                        offset: off,
                        message: format!(
                            "variable index out of range: {name} (problem has n = {})",
                            self.n
                        ),
                    });
                }
                return Ok(Spanned {
                    node: Node::Var(k),
                    offset: off,
                });
            }
        }
        let f = match name.as_str() {
            "sin" => UnaryFn::Sin,
            "cos" => UnaryFn::Cos,
            "exp" => UnaryFn::Exp,
            "log" => UnaryFn::Log,
            "sqrt" => UnaryFn::Sqrt,
            _ => {
                return Err(ParseError {
                    offset: off,
                    message: format!("unknown identifier '{name}'"),
                })
            }
        };
        match self.next() {
            Some((Tok::LParen, _)) => {}
            other => {
                return Err(ParseError {
                    offset: other.map(|(_, o)| o).unwrap_or(self.end),
                    message: format!("expected '(' after function '{}'", f.name()),
                })
            }
        }
        let arg = self.expr()?;
        match self.next() {
            Some((Tok::RParen, _)) => Ok(Spanned {
                node: Node::Call(f, Box::new(arg)),
                offset: off,
            }),
            other => Err(ParseError {
                offset: other.map(|(_, o)| o).unwrap_or(self.end),
                message: "expected ')'".into(),
            }),
        }
    }
}

/// Parse `text` as an expression over `x1..xn`.
pub fn parse(text: &str, n: usize) -> Result<Expr, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError {
            offset: 0,
            message: "empty expression".into(),
        });
    }
    let toks = Lexer::new(text).tokens()?;
    let mut parser = Parser {
        toks,
        idx: 0,
        n,
        end: text.len(),
    };
    let root = parser.expr()?;
    if let Some((tok, off)) = parser.peek() {
        return Err(ParseError {
            offset: *off,
            message: format!("trailing input starting with {tok:?}"),
        });
    }
    let max_var = max_var(&root);
    Ok(Expr {
        root,
        text: text.to_string(),
        max_var,
    })
}

fn max_var(node: &Spanned) -> usize {
    match &node.node {
        Node::Num(_) => 0,
        Node::Var(k) => *k,
        Node::Neg(a) | Node::Call(_, a) => max_var(a),
        Node::Bin(_, a, b) => max_var(a).max(max_var(b)),
    }
}

// ---------------------------------------------------------------------------
// Pretty printing (re-parseable)
// ---------------------------------------------------------------------------

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(&self.root, f)
    }
}

fn write_node(node: &Spanned, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match &node.node {
        Node::Num(v) => {
            if *v < 0.0 {
                // keep literals nonnegative so the printed form re-parses
                write!(f, "(0 - {})", fmt_num(-v))
            } else {
                write!(f, "{}", fmt_num(*v))
            }
        }
        Node::Var(k) => write!(f, "x{k}"),
        Node::Neg(a) => {
            write!(f, "(-")?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Bin(op, a, b) => {
            let sym = match op {
                BinOp::Add => "+",
                BinOp::Sub => "-",
                BinOp::Mul => "*",
                BinOp::Div => "/",
                BinOp::Pow => "^",
            };
            write!(f, "(")?;
            write_node(a, f)?;
            write!(f, "{sym}")?;
            write_node(b, f)?;
            write!(f, ")")
        }
        Node::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_node(a, f)?;
            write!(f, ")")
        }
    }
}

fn fmt_num(v: f64) -> String {
    // shortest representation that round-trips through f64
    let s = format!("{v}");
    if s.parse::<f64>() == Ok(v) {
        s
    } else {
        format!("{v:e}")
    }
}

// ---------------------------------------------------------------------------
// Finite-difference cross-check
// ---------------------------------------------------------------------------

/// Outcome of comparing AD derivatives against central differences.
#[derive(Debug, Clone)]
pub struct DerivativeCheck {
    /// Max relative gradient error, denominator `max(1, |entry|)`.
    pub grad_max_rel: f64,
    /// Max relative Hessian error, same denominator convention.
    pub hess_max_rel: f64,
    /// Number of non-finite finite-difference entries encountered.
    pub nan_entries: usize,
    /// Set when evaluation failed somewhere in the stencil.
    pub domain_violation: Option<EvalError>,
}

impl DerivativeCheck {
    pub fn max_rel(&self) -> f64 {
        self.grad_max_rel.max(self.hess_max_rel)
    }

    pub fn ok(&self, tol: f64) -> bool {
        self.domain_violation.is_none() && self.nan_entries == 0 && self.max_rel() <= tol
    }
}

/// Compare the AD gradient and Hessian against central differences. The
/// gradient stencil uses `step` as given; the second-difference stencil is
/// floored at eps^(1/4), below which cancellation noise (~eps/h^2) would
/// swamp the comparison. Domain violations anywhere in the stencil are
/// reported, never raised.
pub fn check_derivatives(expr: &Expr, x: &DVector<f64>, step: f64) -> DerivativeCheck {
    assert!(step > 0.0, "step must be positive");
    let hess_step = step.max(f64::EPSILON.powf(0.25));
    let n = x.len();
    let fail = |e: EvalError| DerivativeCheck {
        grad_max_rel: f64::NAN,
        hess_max_rel: f64::NAN,
        nan_entries: 0,
        domain_violation: Some(e),
    };
    let base = match expr.eval2(x) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    let at = |dx: &[(usize, f64)]| -> Result<f64, EvalError> {
        let mut p = x.clone();
        for &(i, d) in dx {
            p[i] += d;
        }
        expr.eval(&p)
    };

    let mut grad_max_rel: f64 = 0.0;
    let mut hess_max_rel: f64 = 0.0;
    let mut nan_entries = 0;
    let h = step;
    for i in 0..n {
        let (fp, fm) = match (at(&[(i, h)]), at(&[(i, -h)])) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return fail(e),
        };
        let fd = (fp - fm) / (2.0 * h);
        let ad = base.gradient[i];
        let rel = (ad - fd).abs() / ad.abs().max(1.0);
        if rel.is_nan() {
            nan_entries += 1;
        } else {
            grad_max_rel = grad_max_rel.max(rel);
        }
        // second differences on the wider stencil
        let hh = hess_step;
        let (fp2, fm2) = match (at(&[(i, hh)]), at(&[(i, -hh)])) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return fail(e),
        };
        let fdd = (fp2 - 2.0 * base.value + fm2) / (hh * hh);
        let add = base.hessian[(i, i)];
        let rel = (add - fdd).abs() / add.abs().max(1.0);
        if rel.is_nan() {
            nan_entries += 1;
        } else {
            hess_max_rel = hess_max_rel.max(rel);
        }
        for j in (i + 1)..n {
            let stencil = [
                at(&[(i, hh), (j, hh)]),
                at(&[(i, hh), (j, -hh)]),
                at(&[(i, -hh), (j, hh)]),
                at(&[(i, -hh), (j, -hh)]),
            ];
            let mut vals = [0.0; 4];
            for (slot, r) in vals.iter_mut().zip(stencil) {
                match r {
                    Ok(v) => *slot = v,
                    Err(e) => return fail(e),
                }
            }
            let fd = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * hh * hh);
            let ad = base.hessian[(i, j)];
            let rel = (ad - fd).abs() / ad.abs().max(1.0);
            if rel.is_nan() {
                nan_entries += 1;
            } else {
                hess_max_rel = hess_max_rel.max(rel);
            }
        }
    }
    DerivativeCheck {
        grad_max_rel,
        hess_max_rel,
        nan_entries,
        domain_violation: None,
    }
}
