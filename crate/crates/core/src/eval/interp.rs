//! The mini program language.
//!
//! ```text
//! program := 'return' expr
//! expr    := term (('+' | '-') term)*
//! term    := factor ('*' factor)*
//! factor  := integer | identifier | '(' expr ')'
//! ```
//!
//! Arithmetic is on `i64` with overflow reported as an error.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterpError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unbound identifier {0:?}")]
    Unbound(String),
    #[error("integer overflow")]
    Overflow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Int(i64),
    Var(String),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

pub type Env = BTreeMap<String, i64>;

impl Expr {
    pub fn eval(&self, env: &Env) -> Result<i64, InterpError> {
        match self {
            Expr::Int(v) => Ok(*v),
            Expr::Var(name) => env.get(name).copied().ok_or_else(|| InterpError::Unbound(name.clone())),
            Expr::Add(a, b) => a.eval(env)?.checked_add(b.eval(env)?).ok_or(InterpError::Overflow),
            Expr::Sub(a, b) => a.eval(env)?.checked_sub(b.eval(env)?).ok_or(InterpError::Overflow),
            Expr::Mul(a, b) => a.eval(env)?.checked_mul(b.eval(env)?).ok_or(InterpError::Overflow),
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && matches!(self.src[self.pos], b' ' | b'\t') {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, InterpError> {
        Err(InterpError::Syntax { pos: self.pos, msg: msg.into() })
    }

    fn expr(&mut self) -> Result<Expr, InterpError> {
        let mut lhs = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == b'+' { Expr::Add(Box::new(lhs), Box::new(rhs)) } else { Expr::Sub(Box::new(lhs), Box::new(rhs)) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, InterpError> {
        let mut lhs = self.factor()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, InterpError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return self.err("expected ')'");
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
                text.parse().map(Expr::Int).or_else(|_| self.err("integer literal out of range"))
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
                    self.pos += 1;
                }
                Ok(Expr::Var(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()))
            }
            Some(_) => self.err("expected an integer, identifier or '('"),
            None => self.err("unexpected end of input"),
        }
    }
}

/// Parses an expression that must span all of `src`.
pub fn parse_expr(src: &str) -> Result<Expr, InterpError> {
    let mut p = Parser { src: src.as_bytes(), pos: 0 };
    let e = p.expr()?;
    if p.peek().is_some() {
        return p.err("trailing input");
    }
    Ok(e)
}

fn keyword_at(bytes: &[u8], i: usize) -> bool {
    let word = b"return";
    let before_ok = i == 0 || !(bytes[i - 1].is_ascii_alphanumeric() || bytes[i - 1] == b'_');
    let after = i + word.len();
    let after_ok = after >= bytes.len() || !(bytes[after].is_ascii_alphanumeric() || bytes[after] == b'_');
    bytes[i..].starts_with(word) && before_ok && after_ok
}

/// Parses a whole program, `return <expr>`, with nothing else but blanks.
pub fn parse_program(src: &str) -> Result<Expr, InterpError> {
    let trimmed = src.trim();
    if !keyword_at(trimmed.as_bytes(), 0) {
        return Err(InterpError::Syntax { pos: 0, msg: "expected 'return'".into() });
    }
    parse_expr(&trimmed["return".len()..])
}

/// Finds the program inside a model generation: the first `return` keyword,
/// followed by the longest well-formed expression on the same line. Text
/// after that expression is ignored.
pub fn extract_program(generation: &str) -> Option<Expr> {
    let bytes = generation.as_bytes();
    let start = (0..bytes.len()).find(|&i| keyword_at(bytes, i))?;
    let line_end = generation[start..].find('\n').map_or(generation.len(), |j| start + j);
    let line = &generation[start + "return".len()..line_end];
    let mut p = Parser { src: line.as_bytes(), pos: 0 };
    p.expr().ok()
}

pub fn eval_program(src: &str, env: &Env) -> Result<i64, InterpError> {
    parse_program(src)?.eval(env)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluates_literal_product() {
        assert_eq!(eval_program("return (4821*13)", &Env::new()).unwrap(), 62673);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval_program("return 2+3*4", &Env::new()).unwrap(), 14);
        assert_eq!(eval_program("return 10-3-2", &Env::new()).unwrap(), 5);
        assert_eq!(eval_program("return (10-3)*(1+1)", &Env::new()).unwrap(), 14);
    }

    #[test]
    fn identifiers_resolve_through_env() {
        let env: Env = [("a".to_string(), 6), ("b".to_string(), 7)].into();
        assert_eq!(eval_program("return (a*b)", &env).unwrap(), 42);
        assert_eq!(eval_program("return (a*c)", &env), Err(InterpError::Unbound("c".into())));
    }

    #[test]
    fn overflow_is_reported() {
        assert_eq!(eval_program("return 9223372036854775807+1", &Env::new()), Err(InterpError::Overflow));
    }

    #[test]
    fn malformed_programs_are_syntax_errors() {
        for src in ["return", "return (1+2", "return 1+", "returns 1", "the answer is 62673", "return 1 2"] {
            assert!(matches!(parse_program(src), Err(InterpError::Syntax { .. })), "{src}");
        }
    }

    #[test]
    fn extraction_takes_first_return_line() {
        let e = extract_program("sure.\nreturn (4821*13)=62673\nreturn 1").unwrap();
        assert_eq!(e.eval(&Env::new()).unwrap(), 62673);
        assert!(extract_program("the answer is 62673").is_none());
        assert!(extract_program("return (4821*13\n)").is_none());
        assert!(extract_program("nonreturn 5").is_none());
    }
}
