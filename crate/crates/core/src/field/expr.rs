//! Finite sums of `coef * monomial [* sin|cos(linear form)]` terms.
//!
//! Every expression has an exact gradient, which is what lets vector fields
//! written in scenario files carry analytic Jacobians.
//!
//! Grammar (whitespace ignored):
//!
//! ```text
//! expr   := ['+'|'-'] term (('+'|'-') term)*
//! term   := factor ('*' factor)*
//! factor := number ['/' number] | var ['^' int] | ('sin'|'cos') '(' linear ')'
//! linear := ['+'|'-'] lterm (('+'|'-') lterm)*
//! lterm  := number ['/' number] ['*' var] | var
//! ```
//!
//! At most one trigonometric factor is allowed per term.

use std::fmt;

use crate::error::{LiaoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrigKind {
    Sin,
    Cos,
}

/// `sin` or `cos` of `freq · x + phase`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trig {
    pub kind: TrigKind,
    pub freq: Vec<(usize, f64)>,
    pub phase: f64,
}

impl Trig {
    fn argument(&self, x: &[f64]) -> f64 {
        self.freq.iter().fold(self.phase, |acc, &(i, a)| acc + a * x[i])
    }

    /// Returns (value, derivative of the outer function at the argument).
    fn value_and_slope(&self, x: &[f64]) -> (f64, f64) {
        let (s, c) = self.argument(x).sin_cos();
        match self.kind {
            TrigKind::Sin => (s, c),
            TrigKind::Cos => (c, -s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub coef: f64,
    /// Sparse monomial: (variable index, power), powers >= 1, indices unique.
    pub powers: Vec<(usize, u32)>,
    pub trig: Option<Trig>,
}

impl Term {
    pub fn constant(coef: f64) -> Self {
        Term {
            coef,
            powers: Vec::new(),
            trig: None,
        }
    }

    fn monomial(&self, x: &[f64]) -> f64 {
        self.powers
            .iter()
            .fold(1.0, |acc, &(i, k)| acc * x[i].powi(k as i32))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let m = self.coef * self.monomial(x);
        match &self.trig {
            None => m,
            Some(t) => m * t.value_and_slope(x).0,
        }
    }

    /// Adds `d term / d x` into `grad`.
    pub fn accumulate_gradient(&self, x: &[f64], grad: &mut [f64]) {
        let mono = self.monomial(x);
        let (tv, ts) = match &self.trig {
            None => (1.0, 0.0),
            Some(t) => t.value_and_slope(x),
        };
        for (pos, &(i, k)) in self.powers.iter().enumerate() {
            // derivative of the monomial with respect to x_i
            let mut d = k as f64 * x[i].powi(k as i32 - 1);
            for (other, &(j, kj)) in self.powers.iter().enumerate() {
                if other != pos {
                    d *= x[j].powi(kj as i32);
                }
            }
            grad[i] += self.coef * d * tv;
        }
        if let Some(t) = &self.trig {
            for &(i, a) in &t.freq {
                grad[i] += self.coef * mono * ts * a;
            }
        }
    }

    fn multiply_var(&mut self, var: usize, power: u32) {
        if power == 0 {
            return;
        }
        match self.powers.iter_mut().find(|(i, _)| *i == var) {
            Some(slot) => slot.1 += power,
            None => {
                self.powers.push((var, power));
                self.powers.sort_by_key(|&(i, _)| i);
            }
        }
    }
}

/// A finite sum of terms over a fixed number of variables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Expr {
    pub terms: Vec<Term>,
}

impl Expr {
    pub fn zero() -> Self {
        Expr { terms: Vec::new() }
    }

    pub fn constant(c: f64) -> Self {
        if c == 0.0 {
            return Expr::zero();
        }
        Expr {
            terms: vec![Term::constant(c)],
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x)).sum()
    }

    pub fn accumulate_gradient(&self, x: &[f64], grad: &mut [f64]) {
        for t in &self.terms {
            t.accumulate_gradient(x, grad);
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.accumulate_gradient(x, &mut g);
        g
    }

    /// Largest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        self.terms
            .iter()
            .flat_map(|t| {
                t.powers
                    .iter()
                    .map(|&(i, _)| i)
                    .chain(t.trig.iter().flat_map(|tr| tr.freq.iter().map(|&(i, _)| i)))
            })
            .max()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coef == 0.0)
    }

    /// Parses `input` resolving identifiers through `vars`.
    pub fn parse(input: &str, vars: &dyn Fn(&str) -> Option<usize>) -> Result<Expr> {
        Parser::new(input, vars).parse_expr()
    }

    /// Renders the expression with variable names supplied by `name`.
    pub fn render(&self, name: &dyn Fn(usize) -> String) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let mut out = String::new();
        for (k, t) in self.terms.iter().enumerate() {
            let coef = if k == 0 {
                fmt_num(t.coef)
            } else if t.coef < 0.0 || (t.coef == 0.0 && t.coef.is_sign_negative()) {
                out.push_str(" - ");
                fmt_num(-t.coef)
            } else {
                out.push_str(" + ");
                fmt_num(t.coef)
            };
            out.push_str(&coef);
            for &(i, p) in &t.powers {
                out.push('*');
                out.push_str(&name(i));
                if p != 1 {
                    out.push_str(&format!("^{p}"));
                }
            }
            if let Some(tr) = &t.trig {
                out.push_str(match tr.kind {
                    TrigKind::Sin => "*sin(",
                    TrigKind::Cos => "*cos(",
                });
                let mut first = true;
                for &(i, a) in &tr.freq {
                    if !first {
                        out.push_str(if a < 0.0 { " - " } else { " + " });
                        out.push_str(&format!("{}*{}", fmt_num(a.abs()), name(i)));
                    } else {
                        out.push_str(&format!("{}*{}", fmt_num(a), name(i)));
                    }
                    first = false;
                }
                if first {
                    out.push_str(&fmt_num(tr.phase));
                } else if tr.phase != 0.0 {
                    out.push_str(if tr.phase < 0.0 { " - " } else { " + " });
                    out.push_str(&fmt_num(tr.phase.abs()));
                }
                out.push(')');
            }
        }
        out
    }
}

fn fmt_num(x: f64) -> String {
    // Debug keeps a decimal point or exponent and round-trips exactly.
    format!("{x:?}")
}

/// Resolver for the ambient coordinates of an `n`-dimensional field:
/// `x_1..x_n`, plus `x`, `y`, `z` when `n <= 3`.
pub fn ambient_vars(n: usize) -> impl Fn(&str) -> Option<usize> {
    move |s: &str| {
        if let Some(rest) = s.strip_prefix("x_") {
            let i: usize = rest.parse().ok()?;
            return (1..=n).contains(&i).then(|| i - 1);
        }
        let i = match s {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            _ => return None,
        };
        (n <= 3 && i < n).then_some(i)
    }
}

pub fn ambient_name(i: usize) -> String {
    format!("x_{}", i + 1)
}

/// Resolver for `(t, z_1..z_p)`: `t` is index 0, `z_k` is index k.
pub fn time_state_vars(p: usize) -> impl Fn(&str) -> Option<usize> {
    move |s: &str| {
        if s == "t" {
            return Some(0);
        }
        let k: usize = s.strip_prefix("z_")?.parse().ok()?;
        (1..=p).contains(&k).then_some(k)
    }
}

pub fn time_state_name(i: usize) -> String {
    if i == 0 {
        "t".to_string()
    } else {
        format!("z_{i}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(&ambient_name))
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

struct Parser<'a> {
    input: &'a str,
    toks: Vec<(usize, Tok)>,
    pos: usize,
    vars: &'a dyn Fn(&str) -> Option<usize>,
    lex_error: Option<LiaoError>,
}

impl<'a> Parser<'a> {
    fn new(input: &'a str, vars: &'a dyn Fn(&str) -> Option<usize>) -> Self {
        let mut p = Parser {
            input,
            toks: Vec::new(),
            pos: 0,
            vars,
            lex_error: None,
        };
        p.lex();
        p
    }

    fn err(&self, position: usize, message: impl Into<String>) -> LiaoError {
        LiaoError::Parse {
            input: self.input.to_string(),
            position,
            message: message.into(),
        }
    }

    fn lex(&mut self) {
        let bytes = self.input.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            let start = i;
            match c {
                ' ' | '\t' | '\n' | '\r' => {
                    i += 1;
                    continue;
                }
                '+' => self.toks.push((start, Tok::Plus)),
                '-' => self.toks.push((start, Tok::Minus)),
                '*' | '·' => self.toks.push((start, Tok::Star)),
                '/' => self.toks.push((start, Tok::Slash)),
                '^' => self.toks.push((start, Tok::Caret)),
                '(' => self.toks.push((start, Tok::LParen)),
                ')' => self.toks.push((start, Tok::RParen)),
                _ if c.is_ascii_digit() || c == '.' => {
                    let mut j = i;
                    while j < bytes.len() && (bytes[j].is_ascii_digit() || bytes[j] == b'.') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                        let mut k = j + 1;
                        if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                            k += 1;
                        }
                        if k < bytes.len() && bytes[k].is_ascii_digit() {
                            while k < bytes.len() && bytes[k].is_ascii_digit() {
                                k += 1;
                            }
                            j = k;
                        }
                    }
                    match self.input[i..j].parse::<f64>() {
                        Ok(v) => self.toks.push((start, Tok::Num(v))),
                        Err(_) => {
                            self.lex_error = Some(self.err(start, "malformed number"));
                            return;
                        }
                    }
                    i = j;
                    continue;
                }
                _ if c.is_ascii_alphabetic() || c == '_' => {
                    let mut j = i;
                    while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                        j += 1;
                    }
                    self.toks
                        .push((start, Tok::Ident(self.input[i..j].to_string())));
                    i = j;
                    continue;
                }
                _ => {
                    self.lex_error = Some(self.err(start, format!("unexpected character `{c}`")));
                    return;
                }
            }
            i += c.len_utf8();
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|(p, _)| *p)
            .unwrap_or(self.input.len())
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        let at = self.here();
        match self.bump() {
            Some(t) if t == want => Ok(()),
            _ => Err(self.err(at, format!("expected {want:?}"))),
        }
    }

    fn parse_expr(mut self) -> Result<Expr> {
        if let Some(e) = self.lex_error.take() {
            return Err(e);
        }
        if self.toks.is_empty() {
            return Err(self.err(0, "empty expression"));
        }
        let mut terms = Vec::new();
        let mut sign = match self.peek() {
            Some(Tok::Minus) => {
                self.pos += 1;
                -1.0
            }
            Some(Tok::Plus) => {
                self.pos += 1;
                1.0
            }
            _ => 1.0,
        };
        loop {
            let mut t = self.parse_term()?;
            t.coef *= sign;
            if t.coef != 0.0 {
                terms.push(t);
            }
            match self.peek() {
                None => break,
                Some(Tok::Plus) => sign = 1.0,
                Some(Tok::Minus) => sign = -1.0,
                Some(_) => return Err(self.err(self.here(), "expected `+`, `-` or end of input")),
            }
            self.pos += 1;
        }
        Ok(Expr { terms })
    }

    fn parse_number(&mut self) -> Result<f64> {
        let at = self.here();
        let num = match self.bump() {
            Some(Tok::Num(v)) => v,
            _ => return Err(self.err(at, "expected a number")),
        };
        if self.peek() == Some(&Tok::Slash) {
            self.pos += 1;
            let at = self.here();
            let den = match self.bump() {
                Some(Tok::Num(v)) => v,
                _ => return Err(self.err(at, "expected a denominator")),
            };
            if den == 0.0 {
                return Err(self.err(at, "zero denominator"));
            }
            return Ok(num / den);
        }
        Ok(num)
    }

    fn parse_term(&mut self) -> Result<Term> {
        let mut term = Term::constant(1.0);
        loop {
            let at = self.here();
            match self.peek().cloned() {
                Some(Tok::Num(_)) => term.coef *= self.parse_number()?,
                Some(Tok::Ident(name)) if name == "sin" || name == "cos" => {
                    self.pos += 1;
                    if term.trig.is_some() {
                        return Err(self.err(at, "at most one trigonometric factor per term"));
                    }
                    self.expect(Tok::LParen)?;
                    let (freq, phase) = self.parse_linear()?;
                    self.expect(Tok::RParen)?;
                    term.trig = Some(Trig {
                        kind: if name == "sin" { TrigKind::Sin } else { TrigKind::Cos },
                        freq,
                        phase,
                    });
                }
                Some(Tok::Ident(name)) => {
                    self.pos += 1;
                    let var = (self.vars)(&name)
                        .ok_or_else(|| self.err(at, format!("unknown variable `{name}`")))?;
                    let mut power = 1u32;
                    if self.peek() == Some(&Tok::Caret) {
                        self.pos += 1;
                        let at = self.here();
                        match self.bump() {
                            Some(Tok::Num(v)) if v >= 0.0 && v.fract() == 0.0 && v < 64.0 => {
                                power = v as u32
                            }
                            _ => return Err(self.err(at, "expected a small non-negative integer power")),
                        }
                    }
                    term.multiply_var(var, power);
                }
                _ => return Err(self.err(at, "expected a number, variable, sin or cos")),
            }
            if self.peek() == Some(&Tok::Star) {
                self.pos += 1;
            } else {
                return Ok(term);
            }
        }
    }

    fn parse_linear(&mut self) -> Result<(Vec<(usize, f64)>, f64)> {
        let mut freq: Vec<(usize, f64)> = Vec::new();
        let mut phase = 0.0;
        let mut sign = match self.peek() {
            Some(Tok::Minus) => {
                self.pos += 1;
                -1.0
            }
            Some(Tok::Plus) => {
                self.pos += 1;
                1.0
            }
            _ => 1.0,
        };
        loop {
            let mut coef = sign;
            let mut var = None;
            loop {
                let at = self.here();
                match self.peek().cloned() {
                    Some(Tok::Num(_)) => coef *= self.parse_number()?,
                    Some(Tok::Ident(name)) => {
                        self.pos += 1;
                        if var.is_some() {
                            return Err(self.err(at, "trigonometric argument must be linear"));
                        }
                        var = Some((self.vars)(&name).ok_or_else(|| {
                            self.err(at, format!("unknown variable `{name}`"))
                        })?);
                    }
                    _ => return Err(self.err(at, "expected a number or variable")),
                }
                if self.peek() == Some(&Tok::Star) {
                    self.pos += 1;
                } else {
                    break;
                }
            }
            match var {
                Some(i) => match freq.iter_mut().find(|(j, _)| *j == i) {
                    Some(slot) => slot.1 += coef,
                    None => freq.push((i, coef)),
                },
                None => phase += coef,
            }
            match self.peek() {
                Some(Tok::Plus) => sign = 1.0,
                Some(Tok::Minus) => sign = -1.0,
                _ => break,
            }
            self.pos += 1;
        }
        freq.sort_by_key(|&(i, _)| i);
        freq.retain(|&(_, a)| a != 0.0);
        Ok((freq, phase))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse3(s: &str) -> Expr {
        Expr::parse(s, &ambient_vars(3)).unwrap()
    }

    #[test]
    fn parses_rational_coefficients_and_powers() {
        let e = parse3("1/2*x_1^2*y - 3");
        assert_eq!(e.terms.len(), 2);
        assert_eq!(e.eval(&[2.0, 5.0, 0.0]), 0.5 * 4.0 * 5.0 - 3.0);
    }

    #[test]
    fn parses_trig_with_linear_argument() {
        let e = parse3("0.01*sin(x + 2*z - 0.5)");
        let x = [0.3, 0.0, -0.7];
        let expect = 0.01 * (0.3 - 1.4 - 0.5f64).sin();
        assert!((e.eval(&x) - expect).abs() < 1e-16);
    }

    #[test]
    fn gradient_of_product_with_trig() {
        let e = parse3("2*x*y^3*cos(3*z)");
        let w = [1.5, -0.5, 0.2];
        let g = e.gradient(&w);
        let c = (0.6f64).cos();
        let s = (0.6f64).sin();
        assert!((g[0] - 2.0 * (-0.125) * c).abs() < 1e-14);
        assert!((g[1] - 2.0 * 1.5 * 3.0 * 0.25 * c).abs() < 1e-14);
        assert!((g[2] - 2.0 * 1.5 * (-0.125) * (-3.0 * s)).abs() < 1e-14);
    }

    #[test]
    fn rejects_two_trig_factors_and_unknown_names() {
        assert!(Expr::parse("sin(x)*cos(y)", &ambient_vars(3)).is_err());
        assert!(Expr::parse("w + 1", &ambient_vars(3)).is_err());
        assert!(Expr::parse("x_4", &ambient_vars(3)).is_err());
        assert!(Expr::parse("x*(y)", &ambient_vars(3)).is_err());
        assert!(Expr::parse("", &ambient_vars(3)).is_err());
        assert!(Expr::parse("1/0", &ambient_vars(3)).is_err());
    }

    #[test]
    fn aliases_only_in_low_dimension() {
        assert!(Expr::parse("y", &ambient_vars(4)).is_err());
        assert!(Expr::parse("x_4", &ambient_vars(4)).is_ok());
    }

    #[test]
    fn render_round_trips() {
        let e = parse3("-1*z + 1/3*x^2*sin(-x + 0.25) - 4*cos(y)");
        let back = Expr::parse(&e.to_string(), &ambient_vars(3)).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn time_state_variables() {
        let e = Expr::parse("0.01*sin(t) + 2*z_2", &time_state_vars(2)).unwrap();
        assert!((e.eval(&[1.0, 7.0, 3.0]) - (0.01 * 1f64.sin() + 6.0)).abs() < 1e-15);
        assert!(Expr::parse("z_3", &time_state_vars(2)).is_err());
    }
}
