//! Scalar signals of time written as expressions, e.g. `0.3*sin(t)`.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := number | 't' | func '(' expr ')' | '(' expr ')' | '-' factor
//! func   := sin | cos | exp
//! ```

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SignalExpr {
    Const(f64),
    Time,
    Neg(Box<SignalExpr>),
    Add(Box<SignalExpr>, Box<SignalExpr>),
    Sub(Box<SignalExpr>, Box<SignalExpr>),
    Mul(Box<SignalExpr>, Box<SignalExpr>),
    Div(Box<SignalExpr>, Box<SignalExpr>),
    Call(Func, Box<SignalExpr>),
}

impl SignalExpr {
    pub fn eval(&self, t: f64) -> Result<f64> {
        Ok(match self {
            SignalExpr::Const(c) => *c,
            SignalExpr::Time => t,
            SignalExpr::Neg(a) => -a.eval(t)?,
            SignalExpr::Add(a, b) => a.eval(t)? + b.eval(t)?,
            SignalExpr::Sub(a, b) => a.eval(t)? - b.eval(t)?,
            SignalExpr::Mul(a, b) => a.eval(t)? * b.eval(t)?,
            SignalExpr::Div(a, b) => {
                let den = b.eval(t)?;
                if den == 0.0 {
                    return Err(Error::Eval(format!("division by zero at t = {t}")));
                }
                a.eval(t)? / den
            }
            SignalExpr::Call(f, a) => {
                let v = a.eval(t)?;
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                }
            }
        })
    }

    /// True when the expression does not mention `t`.
    pub fn is_constant(&self) -> bool {
        match self {
            SignalExpr::Const(_) => true,
            SignalExpr::Time => false,
            SignalExpr::Neg(a) | SignalExpr::Call(_, a) => a.is_constant(),
            SignalExpr::Add(a, b) | SignalExpr::Sub(a, b) | SignalExpr::Mul(a, b) | SignalExpr::Div(a, b) => {
                a.is_constant() && b.is_constant()
            }
        }
    }
}

impl fmt::Display for SignalExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalExpr::Const(c) => write!(f, "{c}"),
            SignalExpr::Time => f.write_str("t"),
            SignalExpr::Neg(a) => write!(f, "(-{a})"),
            SignalExpr::Add(a, b) => write!(f, "({a} + {b})"),
            SignalExpr::Sub(a, b) => write!(f, "({a} - {b})"),
            SignalExpr::Mul(a, b) => write!(f, "({a} * {b})"),
            SignalExpr::Div(a, b) => write!(f, "({a} / {b})"),
            SignalExpr::Call(func, a) => {
                let name = match func {
                    Func::Sin => "sin",
                    Func::Cos => "cos",
                    Func::Exp => "exp",
                };
                write!(f, "{name}({a})")
            }
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn syntax<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            offset,
            message: message.into(),
        })
    }

    fn expect(&mut self, want: char) -> Result<()> {
        match self.peek() {
            Some(c) if c == want => {
                self.pos += 1;
                Ok(())
            }
            Some(c) => self.syntax(self.pos, format!("expected `{want}`, found `{c}`")),
            None => self.syntax(self.pos, format!("expected `{want}`, found end of input")),
        }
    }

    fn expr(&mut self) -> Result<SignalExpr> {
        let mut lhs = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                SignalExpr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                SignalExpr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<SignalExpr> {
        let mut lhs = self.factor()?;
        while let Some(op @ ('*' | '/')) = self.peek() {
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = if op == '*' {
                SignalExpr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                SignalExpr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<SignalExpr> {
        let start = {
            self.skip_ws();
            self.pos
        };
        match self.peek() {
            None => self.syntax(start, "unexpected end of input"),
            Some('-') => {
                self.pos += 1;
                Ok(SignalExpr::Neg(Box::new(self.factor()?)))
            }
            Some('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                let end = self.src[start..]
                    .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
                    .map_or(self.src.len(), |k| start + k);
                let name = &self.src[start..end];
                self.pos = end;
                let func = match name {
                    "t" => return Ok(SignalExpr::Time),
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "exp" => Func::Exp,
                    _ => {
                        return Err(Error::UnknownIdentifier {
                            name: name.to_string(),
                            offset: start,
                        })
                    }
                };
                self.expect('(')?;
                let arg = self.expr()?;
                self.expect(')')?;
                Ok(SignalExpr::Call(func, Box::new(arg)))
            }
            Some(c) => self.syntax(start, format!("unexpected `{c}`")),
        }
    }

    fn number(&mut self) -> Result<SignalExpr> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut end = start;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut k = end + 1;
            if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                k += 1;
            }
            if k < bytes.len() && bytes[k].is_ascii_digit() {
                while k < bytes.len() && bytes[k].is_ascii_digit() {
                    k += 1;
                }
                end = k;
            }
        }
        let text = &self.src[start..end];
        match text.parse::<f64>() {
            Ok(v) => {
                self.pos = end;
                Ok(SignalExpr::Const(v))
            }
            Err(_) => self.syntax(start, format!("malformed number `{text}`")),
        }
    }
}

pub fn parse_signal(src: &str) -> Result<SignalExpr> {
    let mut p = Parser { src, pos: 0 };
    let expr = p.expr()?;
    match p.peek() {
        None => Ok(expr),
        Some(c) => p.syntax(p.pos, format!("unexpected `{c}` after expression")),
    }
}
