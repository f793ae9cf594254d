//! Closed-form expressions in the two variables `t` (time) and `theta`
//! (angular coordinate), with exact symbolic differentiation.
//!
//! The grammar is a small whitelist: numeric literals, `t`, `theta`, the four
//! arithmetic operators, `^` with integer exponents, parentheses, and the
//! functions `exp`, `ln`, `log`, `sin`, `cos`, `sqrt`. Flow families take
//! their parameters as these expressions so that every derivative used by the
//! geometry layer is exact rather than finite-differenced.

use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    Theta,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Add(Arc<Expr>, Arc<Expr>),
    Sub(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Div(Arc<Expr>, Arc<Expr>),
    /// Integer power (the only exponent form in the grammar).
    Pow(Arc<Expr>, i32),
    Exp(Arc<Expr>),
    Ln(Arc<Expr>),
    Sin(Arc<Expr>),
    Cos(Arc<Expr>),
    Sqrt(Arc<Expr>),
}

#[derive(Debug, thiserror::Error)]
#[error("expression parse error at byte {pos}: {msg}")]
pub struct ParseError {
    pub pos: usize,
    pub msg: String,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ParseError> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, idx: 0 };
        let e = p.expr()?;
        if p.idx != p.tokens.len() {
            return Err(ParseError {
                pos: p.tokens[p.idx].1,
                msg: format!("unexpected trailing token {:?}", p.tokens[p.idx].0),
            });
        }
        Ok(e)
    }

    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn eval(&self, t: f64, theta: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::T) => t,
            Expr::Var(Var::Theta) => theta,
            Expr::Add(a, b) => a.eval(t, theta) + b.eval(t, theta),
            Expr::Sub(a, b) => a.eval(t, theta) - b.eval(t, theta),
            Expr::Mul(a, b) => a.eval(t, theta) * b.eval(t, theta),
            Expr::Div(a, b) => a.eval(t, theta) / b.eval(t, theta),
            Expr::Pow(a, k) => a.eval(t, theta).powi(*k),
            Expr::Exp(a) => a.eval(t, theta).exp(),
            Expr::Ln(a) => a.eval(t, theta).ln(),
            Expr::Sin(a) => a.eval(t, theta).sin(),
            Expr::Cos(a) => a.eval(t, theta).cos(),
            Expr::Sqrt(a) => a.eval(t, theta).sqrt(),
        }
    }

    /// Exact partial derivative with respect to `v`, lightly simplified.
    pub fn diff(&self, v: Var) -> Expr {
        use Expr::*;
        match self {
            Const(_) => Const(0.0),
            Var(w) => Const(if *w == v { 1.0 } else { 0.0 }),
            Add(a, b) => add(a.diff(v), b.diff(v)),
            Sub(a, b) => sub(a.diff(v), b.diff(v)),
            Mul(a, b) => add(
                mul(a.diff(v), (**b).clone()),
                mul((**a).clone(), b.diff(v)),
            ),
            Div(a, b) => div(
                sub(
                    mul(a.diff(v), (**b).clone()),
                    mul((**a).clone(), b.diff(v)),
                ),
                pow((**b).clone(), 2),
            ),
            Pow(a, k) => mul(
                mul(Const(*k as f64), pow((**a).clone(), k - 1)),
                a.diff(v),
            ),
            Exp(a) => mul(Exp(a.clone()), a.diff(v)),
            Ln(a) => div(a.diff(v), (**a).clone()),
            Sin(a) => mul(Cos(a.clone()), a.diff(v)),
            Cos(a) => mul(sub(Const(0.0), Sin(a.clone())), a.diff(v)),
            Sqrt(a) => div(a.diff(v), mul(Const(2.0), Sqrt(a.clone()))),
        }
    }

    pub fn depends_on(&self, v: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on(v) || b.depends_on(v)
            }
            Expr::Pow(a, _)
            | Expr::Exp(a)
            | Expr::Ln(a)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Sqrt(a) => a.depends_on(v),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(Var::T) => write!(f, "t"),
            Expr::Var(Var::Theta) => write!(f, "theta"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, k) => write!(f, "({a}^{k})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Ln(a) => write!(f, "ln({a})"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Sqrt(a) => write!(f, "sqrt({a})"),
        }
    }
}

// Smart constructors with constant folding; they keep derivative trees from
// blowing up across repeated differentiation.
fn is_const(e: &Expr, c: f64) -> bool {
    matches!(e, Expr::Const(x) if *x == c)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        _ if is_const(&a, 0.0) => b,
        _ if is_const(&b, 0.0) => a,
        _ => Expr::Add(Arc::new(a), Arc::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        _ if is_const(&b, 0.0) => a,
        _ => Expr::Sub(Arc::new(a), Arc::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        _ if is_const(&a, 0.0) || is_const(&b, 0.0) => Expr::Const(0.0),
        _ if is_const(&a, 1.0) => b,
        _ if is_const(&b, 1.0) => a,
        _ => Expr::Mul(Arc::new(a), Arc::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        _ if is_const(&a, 0.0) => Expr::Const(0.0),
        _ if is_const(&b, 1.0) => a,
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x / y),
        _ => Expr::Div(Arc::new(a), Arc::new(b)),
    }
}

fn pow(a: Expr, k: i32) -> Expr {
    match k {
        0 => Expr::Const(1.0),
        1 => a,
        _ => match &a {
            Expr::Const(x) => Expr::Const(x.powi(k)),
            _ => Expr::Pow(Arc::new(a), k),
        },
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

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push((Tok::Plus, i));
                i += 1;
            }
            '-' => {
                out.push((Tok::Minus, i));
                i += 1;
            }
            '*' => {
                out.push((Tok::Star, i));
                i += 1;
            }
            '/' => {
                out.push((Tok::Slash, i));
                i += 1;
            }
            '^' => {
                out.push((Tok::Caret, i));
                i += 1;
            }
            '(' => {
                out.push((Tok::LParen, i));
                i += 1;
            }
            ')' => {
                out.push((Tok::RParen, i));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == b'.'
                        || bytes[i] == b'e'
                        || bytes[i] == b'E'
                        || ((bytes[i] == b'+' || bytes[i] == b'-')
                            && i > start
                            && (bytes[i - 1] == b'e' || bytes[i - 1] == b'E')))
                {
                    i += 1;
                }
                let s = &src[start..i];
                let n: f64 = s.parse().map_err(|_| ParseError {
                    pos: start,
                    msg: format!("bad numeric literal '{s}'"),
                })?;
                out.push((Tok::Num(n), start));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
            }
            _ => {
                return Err(ParseError {
                    pos: i,
                    msg: format!("unexpected character '{c}'"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(Tok, usize)>,
    idx: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.idx).map(|(t, _)| t)
    }

    fn pos(&self) -> usize {
        self.tokens
            .get(self.idx)
            .or_else(|| self.tokens.last())
            .map(|(_, p)| *p)
            .unwrap_or(0)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(op) = self.peek().cloned() {
            match op {
                Tok::Plus => {
                    self.idx += 1;
                    lhs = add(lhs, self.term()?);
                }
                Tok::Minus => {
                    self.idx += 1;
                    lhs = sub(lhs, self.term()?);
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.peek().cloned() {
            match op {
                Tok::Star => {
                    self.idx += 1;
                    lhs = mul(lhs, self.unary()?);
                }
                Tok::Slash => {
                    self.idx += 1;
                    lhs = div(lhs, self.unary()?);
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.idx += 1;
                Ok(sub(Expr::Const(0.0), self.unary()?))
            }
            Some(Tok::Plus) => {
                self.idx += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some(&Tok::Caret) {
            self.idx += 1;
            let neg = if self.peek() == Some(&Tok::Minus) {
                self.idx += 1;
                true
            } else {
                false
            };
            let pos = self.pos();
            match self.peek().cloned() {
                Some(Tok::Num(n)) if n.fract() == 0.0 && n.abs() <= i32::MAX as f64 => {
                    self.idx += 1;
                    let k = n as i32;
                    Ok(pow(base, if neg { -k } else { k }))
                }
                other => Err(ParseError {
                    pos,
                    msg: format!("exponent must be an integer literal, got {other:?}"),
                }),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.peek().cloned() {
            Some(Tok::Num(n)) => {
                self.idx += 1;
                Ok(Expr::Const(n))
            }
            Some(Tok::LParen) => {
                self.idx += 1;
                let e = self.expr()?;
                if self.peek() == Some(&Tok::RParen) {
                    self.idx += 1;
                    Ok(e)
                } else {
                    Err(ParseError {
                        pos: self.pos(),
                        msg: "expected ')'".into(),
                    })
                }
            }
            Some(Tok::Ident(name)) => {
                self.idx += 1;
                match name.as_str() {
                    "t" => Ok(Expr::Var(Var::T)),
                    "theta" | "th" | "x" => Ok(Expr::Var(Var::Theta)),
                    "pi" => Ok(Expr::Const(std::f64::consts::PI)),
                    "exp" | "ln" | "log" | "sin" | "cos" | "sqrt" => {
                        if self.peek() != Some(&Tok::LParen) {
                            return Err(ParseError {
                                pos: self.pos(),
                                msg: format!("expected '(' after function '{name}'"),
                            });
                        }
                        self.idx += 1;
                        let arg = self.expr()?;
                        if self.peek() != Some(&Tok::RParen) {
                            return Err(ParseError {
                                pos: self.pos(),
                                msg: "expected ')'".into(),
                            });
                        }
                        self.idx += 1;
                        let arg = Arc::new(arg);
                        Ok(match name.as_str() {
                            "exp" => Expr::Exp(arg),
                            "ln" | "log" => Expr::Ln(arg),
                            "sin" => Expr::Sin(arg),
                            "cos" => Expr::Cos(arg),
                            "sqrt" => Expr::Sqrt(arg),
                            _ => unreachable!(),
                        })
                    }
                    other => Err(ParseError {
                        pos,
                        msg: format!("unknown identifier '{other}'"),
                    }),
                }
            }
            other => Err(ParseError {
                pos,
                msg: format!("expected expression, got {other:?}"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn parses_and_evaluates() {
        let e = Expr::parse("1 - 2*t + 0.5*sin(theta)^2").unwrap();
        let t = 0.3;
        let th = 1.1;
        assert_relative_eq!(
            e.eval(t, th),
            1.0 - 2.0 * t + 0.5 * th.sin().powi(2),
            epsilon = 1e-15
        );
    }

    #[test]
    fn unary_minus_and_precedence() {
        let e = Expr::parse("-t^2 + 3").unwrap();
        assert_relative_eq!(e.eval(2.0, 0.0), -4.0 + 3.0);
        let e = Expr::parse("2*t^-1").unwrap();
        assert_relative_eq!(e.eval(4.0, 0.0), 0.5);
    }

    #[test]
    fn derivative_matches_central_difference() {
        let exprs = [
            "exp(0.3*t)*cos(theta)",
            "ln(1+t) / (2 + sin(theta))",
            "sqrt(1 + t^2) - 0.1*cos(2*theta)",
        ];
        for src in exprs {
            let e = Expr::parse(src).unwrap();
            for v in [Var::T, Var::Theta] {
                let d = e.diff(v);
                let (t0, th0) = (0.37, 0.9);
                let h = 1e-6;
                let fd = match v {
                    Var::T => (e.eval(t0 + h, th0) - e.eval(t0 - h, th0)) / (2.0 * h),
                    Var::Theta => (e.eval(t0, th0 + h) - e.eval(t0, th0 - h)) / (2.0 * h),
                };
                assert_relative_eq!(d.eval(t0, th0), fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn second_derivatives() {
        let e = Expr::parse("exp(2*t)").unwrap();
        let d2 = e.diff(Var::T).diff(Var::T);
        assert_relative_eq!(d2.eval(0.5, 0.0), 4.0 * (1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Expr::parse("t +").is_err());
        assert!(Expr::parse("foo(t)").is_err());
        assert!(Expr::parse("t^theta").is_err());
        assert!(Expr::parse("t $ 2").is_err());
    }
}
