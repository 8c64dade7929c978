//! A small arithmetic language for payoffs and generators.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | var | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! so `^` binds tighter than unary minus (`-x^2 = -(x^2)`) and associates to
//! the right. Variables are `t`, `x`, `y`, `z`; functions are `abs`, `exp`,
//! `tanh`, `min`, `max`, `pos` (`a⁺`) and `neg` (`a⁻`).

use std::collections::BTreeSet;
use std::fmt;

/// Byte range in the source.
#[derive(Debug, Clone, Copy, Default)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    T,
    X,
    Y,
    Z,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X => "x",
            Var::Y => "y",
            Var::Z => "z",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Exp,
    Tanh,
    Min,
    Max,
    Pos,
    Neg,
}

impl Func {
    const ALL: [Func; 7] = [Func::Abs, Func::Exp, Func::Tanh, Func::Min, Func::Max, Func::Pos, Func::Neg];

    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pos => "pos",
            Func::Neg => "neg",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == s)
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

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

/// Expression tree. Equality is structural: spans are ignored.
#[derive(Debug, Clone)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr>, span: Span },
    Call { func: Func, args: Vec<Expr> },
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Expr::Num(a), Expr::Num(b)) => a.to_bits() == b.to_bits(),
            (Expr::Var(a), Expr::Var(b)) => a == b,
            (Expr::Neg(a), Expr::Neg(b)) => a == b,
            (Expr::Bin { op: o1, lhs: l1, rhs: r1, .. }, Expr::Bin { op: o2, lhs: l2, rhs: r2, .. }) => {
                o1 == o2 && l1 == l2 && r1 == r2
            }
            (Expr::Call { func: f1, args: a1 }, Expr::Call { func: f2, args: a2 }) => f1 == f2 && a1 == a2,
            _ => false,
        }
    }
}

/// Values of the free variables.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Env {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Env {
    fn get(&self, v: Var) -> f64 {
        match v {
            Var::T => self.t,
            Var::X => self.x,
            Var::Y => self.y,
            Var::Z => self.z,
        }
    }
}

/// Failure of evaluation, pointing at the offending operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.column, self.message)
    }
}

impl std::error::Error for EvalError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Unexpected { found: String, expected: Vec<String> },
    UnknownIdentifier(String),
    Arity { func: String, expected: usize, found: usize },
    BadNumber(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: ", self.line, self.column)?;
        match &self.kind {
            ParseErrorKind::Unexpected { found, expected } => {
                write!(f, "unexpected {found}, expected {}", expected.join(" or "))
            }
            ParseErrorKind::UnknownIdentifier(name) => write!(
                f,
                "unknown identifier `{name}` (variables: t, x, y, z; functions: abs, exp, tanh, min, max, pos, neg)"
            ),
            ParseErrorKind::Arity { func, expected, found } => {
                write!(f, "`{func}` takes {expected} argument(s), got {found}")
            }
            ParseErrorKind::BadNumber(s) => write!(f, "malformed number `{s}`"),
        }
    }
}

impl std::error::Error for ParseError {}

/// 1-based line and column (in characters) of a byte offset.
fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number `{v}`"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Sym(c) => format!("`{c}`"),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, Span)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |at: usize, kind| {
        let (line, column) = line_col(src, at);
        ParseError { line, column, kind }
    };
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
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
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| err(start, ParseErrorKind::BadNumber(text.into())))?;
            out.push((Tok::Num(v), Span { start, end: i }));
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].into()), Span { start, end: i }));
        } else if b"+-*/^(),".contains(&c) {
            out.push((Tok::Sym(c as char), Span { start: i, end: i + 1 }));
            i += 1;
        } else {
            let ch = src[i..].chars().next().unwrap();
            return Err(err(
                i,
                ParseErrorKind::Unexpected { found: format!("`{ch}`"), expected: vec!["an expression token".into()] },
            ));
        }
    }
    out.push((Tok::End, Span { start: src.len(), end: src.len() }));
    Ok(out)
}

const OPERAND: [&str; 4] = ["number", "variable", "function", "`(` or `-`"];

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(Tok, Span)>,
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn span(&self) -> Span {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, Span) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, kind: ParseErrorKind) -> ParseError {
        let (line, column) = line_col(self.src, self.span().start);
        ParseError { line, column, kind }
    }

    fn unexpected(&self, expected: &[&str]) -> ParseError {
        self.error(ParseErrorKind::Unexpected {
            found: self.peek().describe(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if *self.peek() == Tok::Sym(c) {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&[&format!("`{c}`")]))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Tok::Sym(c @ ('+' | '-')) = *self.peek() {
            let (_, span) = self.bump();
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin { op, lhs: Box::new(lhs), rhs: Box::new(rhs), span };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Tok::Sym(c @ ('*' | '/')) = *self.peek() {
            let (_, span) = self.bump();
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin { op, lhs: Box::new(lhs), rhs: Box::new(rhs), span };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Sym('-') {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if *self.peek() == Tok::Sym('^') {
            let (_, span) = self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Bin { op: BinOp::Pow, lhs: Box::new(base), rhs: Box::new(exp), span });
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::Sym('(') => {
                self.bump();
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let var = match name.as_str() {
                    "t" => Some(Var::T),
                    "x" => Some(Var::X),
                    "y" => Some(Var::Y),
                    "z" => Some(Var::Z),
                    _ => None,
                };
                if let Some(v) = var {
                    self.bump();
                    return Ok(Expr::Var(v));
                }
                let Some(func) = Func::from_name(&name) else {
                    return Err(self.error(ParseErrorKind::UnknownIdentifier(name)));
                };
                let at = self.span();
                self.bump();
                self.expect('(')?;
                let mut args = vec![self.expr()?];
                while *self.peek() == Tok::Sym(',') {
                    self.bump();
                    args.push(self.expr()?);
                }
                self.expect(')')?;
                if args.len() != func.arity() {
                    let (line, column) = line_col(self.src, at.start);
                    return Err(ParseError {
                        line,
                        column,
                        kind: ParseErrorKind::Arity { func: name, expected: func.arity(), found: args.len() },
                    });
                }
                Ok(Expr::Call { func, args })
            }
            _ => Err(self.unexpected(&OPERAND)),
        }
    }
}

/// Parses an expression; the whole input must be consumed.
pub fn parse_expression(src: &str) -> Result<Expression, ParseError> {
    let mut p = Parser { src, toks: lex(src)?, pos: 0 };
    let expr = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(p.unexpected(&["operator", "end of input"]));
    }
    Ok(Expression { source: src.to_string(), expr })
}

/// A parsed expression together with its source, for diagnostics.
#[derive(Debug, Clone)]
pub struct Expression {
    pub source: String,
    pub expr: Expr,
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.expr == other.expr
    }
}

impl Expression {
    pub fn variables(&self) -> BTreeSet<Var> {
        fn walk(e: &Expr, out: &mut BTreeSet<Var>) {
            match e {
                Expr::Num(_) => {}
                Expr::Var(v) => {
                    out.insert(*v);
                }
                Expr::Neg(a) => walk(a, out),
                Expr::Bin { lhs, rhs, .. } => {
                    walk(lhs, out);
                    walk(rhs, out);
                }
                Expr::Call { args, .. } => args.iter().for_each(|a| walk(a, out)),
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.expr, &mut out);
        out
    }

    /// Fails on the first division by zero, citing the `/` in the source.
    pub fn eval(&self, env: &Env) -> Result<f64, EvalError> {
        self.eval_node(&self.expr, env)
    }

    fn eval_node(&self, e: &Expr, env: &Env) -> Result<f64, EvalError> {
        Ok(match e {
            Expr::Num(v) => *v,
            Expr::Var(v) => env.get(*v),
            Expr::Neg(a) => -self.eval_node(a, env)?,
            Expr::Bin { op, lhs, rhs, span } => {
                let (a, b) = (self.eval_node(lhs, env)?, self.eval_node(rhs, env)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            let (line, column) = line_col(&self.source, span.start);
                            return Err(EvalError { line, column, message: "division by zero".into() });
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                }
            }
            Expr::Call { func, args } => {
                let a = self.eval_node(&args[0], env)?;
                match func {
                    Func::Abs => a.abs(),
                    Func::Exp => a.exp(),
                    Func::Tanh => a.tanh(),
                    Func::Pos => a.max(0.0),
                    Func::Neg => (-a).max(0.0),
                    Func::Min => a.min(self.eval_node(&args[1], env)?),
                    Func::Max => a.max(self.eval_node(&args[1], env)?),
                }
            }
        })
    }
}

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Num(_) | Expr::Var(_) | Expr::Call { .. } => 5,
        Expr::Bin { op: BinOp::Pow, .. } => 4,
        Expr::Neg(_) => 3,
        Expr::Bin { op: BinOp::Mul | BinOp::Div, .. } => 2,
        Expr::Bin { .. } => 1,
    }
}

fn write_at(e: &Expr, min: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if precedence(e) < min {
        f.write_str("(")?;
        write_at(e, 0, f)?;
        return f.write_str(")");
    }
    match e {
        // `{:?}` is the shortest representation that parses back exactly
        Expr::Num(v) => write!(f, "{v:?}"),
        Expr::Var(v) => f.write_str(v.name()),
        Expr::Neg(a) => {
            f.write_str("-")?;
            write_at(a, 3, f)
        }
        Expr::Bin { op, lhs, rhs, .. } => {
            let (l, r) = match op {
                BinOp::Add | BinOp::Sub => (1, 2),
                BinOp::Mul | BinOp::Div => (2, 3),
                BinOp::Pow => (5, 3),
            };
            write_at(lhs, l, f)?;
            match op {
                BinOp::Add | BinOp::Sub => write!(f, " {} ", op.symbol())?,
                _ => f.write_str(op.symbol())?,
            }
            write_at(rhs, r, f)
        }
        Expr::Call { func, args } => {
            write!(f, "{}(", func.name())?;
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write_at(a, 0, f)?;
            }
            f.write_str(")")
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_at(self, 0, f)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.expr.fmt(f)
    }
}
