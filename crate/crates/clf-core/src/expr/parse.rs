//! Recursive-descent parser for the infix expression grammar.

use super::Expression;
use std::fmt;

/// Syntax error with a byte offset into the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "syntax error at offset {}: {}", self.offset, self.message)
    }
}

impl std::error::Error for ParseError {}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    names: &'a [String],
}

pub(super) fn parse_with_names(text: &str, names: &[String]) -> Result<Expression, ParseError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0, names };
    p.skip_ws();
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError { offset: self.pos, message: msg.into() }
    }

    fn arity(&self) -> usize {
        self.names.len()
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    // expr := term (('+'|'-') term)*
    fn expr(&mut self) -> Result<Expression, ParseError> {
        let mut acc = self.term()?;
        loop {
            if self.eat(b'+') {
                acc = acc.add(&self.term()?);
            } else if self.eat(b'-') {
                acc = acc.sub(&self.term()?);
            } else {
                return Ok(acc);
            }
        }
    }

    // term := factor (('*'|'/') factor)*
    fn term(&mut self) -> Result<Expression, ParseError> {
        let mut acc = self.factor()?;
        loop {
            if self.eat(b'*') {
                acc = acc.mul(&self.factor()?);
            } else if self.eat(b'/') {
                acc = acc.div(&self.factor()?);
            } else {
                return Ok(acc);
            }
        }
    }

    // factor := '-' factor | power
    fn factor(&mut self) -> Result<Expression, ParseError> {
        if self.eat(b'-') {
            return Ok(self.factor()?.neg());
        }
        self.power()
    }

    // power := atom ('^' signed-integer)*
    fn power(&mut self) -> Result<Expression, ParseError> {
        let mut base = self.atom()?;
        while self.eat(b'^') {
            let k = self.integer_exponent()?;
            base = base.powi(k);
        }
        Ok(base)
    }

    fn integer_exponent(&mut self) -> Result<i32, ParseError> {
        let neg = self.eat(b'-');
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected integer exponent after '^'"));
        }
        let digits = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let k: i32 = digits
            .parse()
            .map_err(|_| ParseError { offset: start, message: "integer exponent overflows".into() })?;
        self.skip_ws();
        Ok(if neg { -k } else { k })
    }

    fn atom(&mut self) -> Result<Expression, ParseError> {
        match self.peek() {
            None => Err(self.err("expected operand, found end of input")),
            Some(b'(') => {
                self.pos += 1;
                self.skip_ws();
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(c) => Err(self.err(format!("unexpected character '{}'", c as char))),
        }
    }

    fn number(&mut self) -> Result<Expression, ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit() || c == b'.') {
            self.pos += 1;
        }
        // Optional exponent part: e.g. 1.5e-3
        if self.peek().is_some_and(|c| c == b'e' || c == b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.peek().is_some_and(|c| c == b'+' || c == b'-') {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                self.pos = mark; // 'e' was the start of an identifier, back off
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let value: f64 = text
            .parse()
            .map_err(|_| ParseError { offset: start, message: format!("invalid number '{text}'") })?;
        self.skip_ws();
        Ok(Expression::constant(value, self.arity()))
    }

    fn identifier(&mut self) -> Result<Expression, ParseError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
        self.skip_ws();
        match name.as_str() {
            "sqrt" | "exp" | "sin" | "cos" | "tanh" => {
                if !self.eat(b'(') {
                    return Err(self.err(format!("expected '(' after '{name}'")));
                }
                let arg = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(match name.as_str() {
                    "sqrt" => arg.sqrt(),
                    "exp" => arg.exp(),
                    "sin" => arg.sin(),
                    "cos" => arg.cos(),
                    _ => arg.tanh(),
                })
            }
            "pi" => Ok(Expression::constant(std::f64::consts::PI, self.arity())),
            _ => {
                if let Some(idx) = self.names.iter().position(|n| n == &name) {
                    Ok(Expression::var(idx, self.arity()))
                } else {
                    Err(ParseError {
                        offset: start,
                        message: format!("unknown identifier '{name}'"),
                    })
                }
            }
        }
    }
}
