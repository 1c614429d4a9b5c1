//! Expression parser.
//!
//! Infix grammar over a [`Context`]: exact rationals (`3`, `1/2`), the
//! operators `+ - * / ^`, `exp ln sin cos`, jet atoms `u[J1;J2]` with
//! comma-separated index lists (derivative orders before the semicolon,
//! shifts after), bare variable names, `(-1)^n` for a declared discrete
//! variable, unknown-function applications `f(t)` with the derivative form
//! `diff(f;1)(t)`, and the eager operators `D[t](...)` and `S[n](...)`.
//!
//! Floating-point literals are rejected: every coefficient is an exact
//! rational, and zero-testing downstream depends on that. Errors carry the
//! byte offset of the offending token.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::Signed;

use crate::calculus::{shift, total_derivative};
use crate::context::{Context, JetAtom, Namespace};
use crate::error::{EngineError, ParseError};
use crate::expr::{add2, div, mul, pow, sub, Expr, Rational};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Int(BigInt),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Semi,
    Comma,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Int(n) => format!("number `{n}`"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Plus => "`+`".to_string(),
            Tok::Minus => "`-`".to_string(),
            Tok::Star => "`*`".to_string(),
            Tok::Slash => "`/`".to_string(),
            Tok::Caret => "`^`".to_string(),
            Tok::LParen => "`(`".to_string(),
            Tok::RParen => "`)`".to_string(),
            Tok::LBracket => "`[`".to_string(),
            Tok::RBracket => "`]`".to_string(),
            Tok::Semi => "`;`".to_string(),
            Tok::Comma => "`,`".to_string(),
        }
    }
}

fn err(offset: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        offset,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\r' | b'\n' => i += 1,
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    return Err(err(
                        i,
                        "floating-point constants are not supported; write an exact \
                         rational like 1/2",
                    ));
                }
                let n: BigInt = text[start..i]
                    .parse()
                    .expect("digit run parses as an integer");
                toks.push((start, Tok::Int(n)));
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                toks.push((start, Tok::Ident(text[start..i].to_string())));
            }
            b'+' => {
                toks.push((i, Tok::Plus));
                i += 1;
            }
            b'-' => {
                toks.push((i, Tok::Minus));
                i += 1;
            }
            b'*' => {
                toks.push((i, Tok::Star));
                i += 1;
            }
            b'/' => {
                toks.push((i, Tok::Slash));
                i += 1;
            }
            b'^' => {
                toks.push((i, Tok::Caret));
                i += 1;
            }
            b'(' => {
                toks.push((i, Tok::LParen));
                i += 1;
            }
            b')' => {
                toks.push((i, Tok::RParen));
                i += 1;
            }
            b'[' => {
                toks.push((i, Tok::LBracket));
                i += 1;
            }
            b']' => {
                toks.push((i, Tok::RBracket));
                i += 1;
            }
            b';' => {
                toks.push((i, Tok::Semi));
                i += 1;
            }
            b',' => {
                toks.push((i, Tok::Comma));
                i += 1;
            }
            b'.' => {
                return Err(err(
                    i,
                    "floating-point constants are not supported; write an exact \
                     rational like 1/2",
                ))
            }
            _ => return Err(err(i, format!("unexpected character `{}`", &text[i..][..text[i..].chars().next().map_or(1, char::len_utf8)]))),
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    ctx: &'a Context,
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

/// Parses `text` in `ctx` and returns the normalized expression.
pub fn parse(ctx: &Context, text: &str) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser {
        ctx,
        toks,
        pos: 0,
        end: text.len(),
    };
    let e = p.sum()?;
    if let Some((o, t)) = p.peek_at() {
        return Err(err(o, format!("unexpected {} after expression", t.describe())));
    }
    Ok(e)
}

impl<'a> Parser<'a> {
    fn peek_at(&self) -> Option<(usize, &Tok)> {
        self.toks.get(self.pos).map(|(o, t)| (*o, t))
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn peek2(&self) -> Option<&Tok> {
        self.toks.get(self.pos + 1).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.peek_at().map_or(self.end, |(o, _)| o)
    }

    fn bump(&mut self) -> (usize, Tok) {
        let t = self.toks[self.pos].clone();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<usize, ParseError> {
        match self.peek_at() {
            Some((o, t)) if t == want => {
                self.pos += 1;
                Ok(o)
            }
            Some((o, t)) => Err(err(o, format!("expected {what}, found {}", t.describe()))),
            None => Err(err(self.end, format!("expected {what}, found end of input"))),
        }
    }

    fn engine(&self, offset: usize, r: Result<Expr, EngineError>) -> Result<Expr, ParseError> {
        r.map_err(|e| err(offset, format!("{e}")))
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = add2(acc, rhs);
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = sub(acc, rhs);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    acc = mul(alloc::vec![acc, rhs]);
                }
                Some(Tok::Slash) => {
                    let (o, _) = self.bump();
                    let rhs = self.unary()?;
                    acc = self.engine(o, div(acc, rhs))?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.pos += 1;
                Ok(crate::expr::neg(self.unary()?))
            }
            Some(Tok::Plus) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            let (o, _) = self.bump();
            let exp = self.unary()?;
            return self.apply_pow(base, exp, o);
        }
        Ok(base)
    }

    fn apply_pow(&mut self, base: Expr, exp: Expr, o: usize) -> Result<Expr, ParseError> {
        if base == Expr::int(-1) {
            if let Some(e) = alt_sign_power(&exp) {
                return Ok(e);
            }
        }
        match exp {
            Expr::Num(r) => self.engine(o, pow(base, r)),
            _ => Err(err(
                o,
                "exponent must be a rational constant (or an integer combination of \
                 discrete variables over the base (-1))",
            )),
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek_at() {
            Some((_, Tok::Int(_))) => {
                let (_, t) = self.bump();
                let Tok::Int(n) = t else { unreachable!() };
                Ok(Expr::Num(Rational::from(n)))
            }
            Some((_, Tok::LParen)) => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some((o, Tok::Ident(_))) => {
                let (_, t) = self.bump();
                let Tok::Ident(name) = t else { unreachable!() };
                self.ident(o, name)
            }
            Some((o, t)) => Err(err(o, format!("expected expression, found {}", t.describe()))),
            None => Err(err(self.end, "expected expression, found end of input")),
        }
    }

    fn ident(&mut self, o: usize, name: String) -> Result<Expr, ParseError> {
        // eager operators D[t](...) and S[n](...)
        if (name == "D" || name == "S")
            && self.peek() == Some(&Tok::LBracket)
            && matches!(self.peek2(), Some(Tok::Ident(v))
                if (name == "D" && self.ctx.continuous.contains(v))
                    || (name == "S" && self.ctx.discrete.contains(v)))
        {
            self.pos += 1;
            let (_, t) = self.bump();
            let Tok::Ident(var) = t else { unreachable!() };
            self.expect(&Tok::RBracket, "`]`")?;
            self.expect(&Tok::LParen, "`(`")?;
            let inner = self.sum()?;
            self.expect(&Tok::RParen, "`)`")?;
            return if name == "D" {
                let i = self.ctx.continuous.iter().position(|v| *v == var).unwrap();
                self.engine(o, total_derivative(self.ctx, &inner, i))
            } else {
                let d = self.ctx.discrete.iter().position(|v| *v == var).unwrap();
                self.engine(o, shift(self.ctx, &inner, d, 1))
            };
        }

        if self.peek() == Some(&Tok::LParen) {
            return self.call(o, name);
        }

        if self.peek() == Some(&Tok::LBracket) {
            let (ns, dep) = self.jet_var(o, &name)?;
            self.pos += 1;
            let (deriv, shift) = self.jet_indices(o)?;
            return Ok(Expr::jet(JetAtom {
                namespace: ns,
                dep,
                deriv,
                shift,
            }));
        }

        // bare identifier
        if let Some(i) = self.ctx.continuous.iter().position(|v| *v == name) {
            return Ok(Expr::ContVar(i));
        }
        if let Some(i) = self.ctx.discrete.iter().position(|v| *v == name) {
            return Ok(Expr::DiscVar(i));
        }
        if let Ok((ns, dep)) = self.jet_var(o, &name) {
            return Ok(Expr::jet(JetAtom {
                namespace: ns,
                dep,
                deriv: alloc::vec![0; self.ctx.p1()],
                shift: alloc::vec![0; self.ctx.p2()],
            }));
        }
        if self.ctx.parameters.iter().any(|p| p.name == name) {
            return Ok(Expr::Param(name));
        }
        if self.ctx.function(&name).is_some() {
            return Err(err(
                o,
                format!("function `{name}` must be applied to arguments"),
            ));
        }
        Err(err(o, format!("unknown identifier `{name}`")))
    }

    fn jet_var(&self, o: usize, name: &str) -> Result<(Namespace, usize), ParseError> {
        if let Some(i) = self.ctx.dependent.iter().position(|v| v == name) {
            return Ok((Namespace::Dependent, i));
        }
        if let Some(i) = self.ctx.auxiliary.iter().position(|v| v == name) {
            return Ok((Namespace::Auxiliary, i));
        }
        Err(err(
            o,
            format!("`{name}` is not a dependent or auxiliary variable"),
        ))
    }

    /// Index lists after `[`. Both lists may appear separated by `;`; a
    /// single list is allowed when exactly one of p1, p2 is zero.
    fn jet_indices(&mut self, at: usize) -> Result<(Vec<u32>, Vec<i32>), ParseError> {
        let (p1, p2) = (self.ctx.p1(), self.ctx.p2());
        let first = self.int_list()?;
        let second = if self.peek() == Some(&Tok::Semi) {
            self.pos += 1;
            Some(self.int_list()?)
        } else {
            None
        };
        self.expect(&Tok::RBracket, "`]`")?;
        let (derivs, shifts) = match second {
            Some(s) => (first, s),
            None => {
                if p1 == 0 {
                    (Vec::new(), first)
                } else if p2 == 0 {
                    (first, Vec::new())
                } else {
                    return Err(err(
                        at,
                        "expected `;` separating derivative and shift index lists",
                    ));
                }
            }
        };
        if derivs.len() != p1 {
            return Err(err(
                at,
                format!(
                    "expected {p1} derivative index(es), found {}",
                    derivs.len()
                ),
            ));
        }
        if shifts.len() != p2 {
            return Err(err(
                at,
                format!("expected {p2} shift index(es), found {}", shifts.len()),
            ));
        }
        let mut deriv = Vec::with_capacity(p1);
        for (o, n) in derivs {
            if n.is_negative() {
                return Err(err(o, "derivative index must be non-negative"));
            }
            deriv.push(
                u32::try_from(n).map_err(|_| err(o, "derivative index out of range"))?,
            );
        }
        let mut shift = Vec::with_capacity(p2);
        for (o, n) in shifts {
            shift.push(i32::try_from(n).map_err(|_| err(o, "shift index out of range"))?);
        }
        Ok((deriv, shift))
    }

    /// Comma-separated signed integers; empty when the closing token follows
    /// immediately.
    fn int_list(&mut self) -> Result<Vec<(usize, BigInt)>, ParseError> {
        let mut out = Vec::new();
        if matches!(self.peek(), Some(Tok::RBracket) | Some(Tok::Semi)) {
            return Ok(out);
        }
        loop {
            out.push(self.signed_int()?);
            if self.peek() == Some(&Tok::Comma) {
                self.pos += 1;
            } else {
                return Ok(out);
            }
        }
    }

    fn signed_int(&mut self) -> Result<(usize, BigInt), ParseError> {
        let neg = if self.peek() == Some(&Tok::Minus) {
            self.pos += 1;
            true
        } else {
            false
        };
        match self.peek_at() {
            Some((o, Tok::Int(_))) => {
                let (_, t) = self.bump();
                let Tok::Int(n) = t else { unreachable!() };
                Ok((o, if neg { -n } else { n }))
            }
            Some((o, t)) => Err(err(o, format!("expected integer, found {}", t.describe()))),
            None => Err(err(self.end, "expected integer, found end of input")),
        }
    }

    fn call(&mut self, o: usize, name: String) -> Result<Expr, ParseError> {
        match name.as_str() {
            "exp" | "ln" | "sin" | "cos" => {
                self.expect(&Tok::LParen, "`(`")?;
                let arg = self.sum()?;
                self.expect(&Tok::RParen, "`)`")?;
                match name.as_str() {
                    "exp" => Ok(crate::expr::exp_(arg)),
                    "ln" => self.engine(o, crate::expr::ln_(arg)),
                    "sin" => Ok(crate::expr::sin_(arg)),
                    _ => Ok(crate::expr::cos_(arg)),
                }
            }
            "diff" => {
                self.expect(&Tok::LParen, "`(`")?;
                let (fo, ft) = match self.peek_at() {
                    Some((fo, Tok::Ident(_))) => {
                        let (_, t) = self.bump();
                        let Tok::Ident(f) = t else { unreachable!() };
                        (fo, f)
                    }
                    Some((fo, t)) => {
                        return Err(err(
                            fo,
                            format!("expected function name, found {}", t.describe()),
                        ))
                    }
                    None => {
                        return Err(err(self.end, "expected function name, found end of input"))
                    }
                };
                let sig = self.ctx.function(&ft).ok_or_else(|| {
                    err(fo, format!("unknown function `{ft}`"))
                })?;
                let arity = sig.args.len();
                self.expect(&Tok::Semi, "`;`")?;
                let orders = self.int_list()?;
                self.expect(&Tok::RParen, "`)`")?;
                if orders.len() != arity {
                    return Err(err(
                        o,
                        format!("expected {arity} derivative order(s) for `{ft}`"),
                    ));
                }
                let mut derivs = Vec::with_capacity(arity);
                for (oo, n) in orders {
                    if n.is_negative() {
                        return Err(err(oo, "derivative order must be non-negative"));
                    }
                    derivs.push(
                        u32::try_from(n).map_err(|_| err(oo, "derivative order out of range"))?,
                    );
                }
                self.expect(&Tok::LParen, "`(`")?;
                let args = self.expr_list(arity, &ft)?;
                Ok(Expr::Func(crate::expr::FuncApp {
                    name: ft,
                    derivs,
                    args,
                }))
            }
            _ => {
                let Some(sig) = self.ctx.function(&name) else {
                    return Err(err(o, format!("unknown identifier `{name}`")));
                };
                let arity = sig.args.len();
                self.expect(&Tok::LParen, "`(`")?;
                let args = self.expr_list(arity, &name)?;
                Ok(Expr::Func(crate::expr::FuncApp {
                    name,
                    derivs: alloc::vec![0; arity],
                    args,
                }))
            }
        }
    }

    /// Exactly `arity` comma-separated expressions followed by `)`.
    fn expr_list(&mut self, arity: usize, fname: &str) -> Result<Vec<Expr>, ParseError> {
        let mut args = Vec::with_capacity(arity);
        for k in 0..arity {
            if k > 0 {
                self.expect(&Tok::Comma, "`,`")?;
            }
            args.push(self.sum()?);
        }
        let o = self.here();
        self.expect(&Tok::RParen, "`)`").map_err(|_| {
            err(o, format!("`{fname}` takes exactly {arity} argument(s)"))
        })?;
        Ok(args)
    }
}

/// `(-1)^e` for `e` an integer-linear combination of discrete variables:
/// the parity constant times the product of the odd directions' tokens.
fn alt_sign_power(exp: &Expr) -> Option<Expr> {
    let mut odd_const = false;
    let mut dirs: Vec<usize> = Vec::new();
    for t in exp.terms() {
        let (c, mono) = crate::expr::split_coeff(t);
        if !c.is_integer() {
            return None;
        }
        let odd = c.numer().is_odd();
        match mono.as_slice() {
            [] => odd_const ^= odd,
            [Expr::DiscVar(d)] => {
                if odd {
                    if let Some(i) = dirs.iter().position(|x| x == d) {
                        dirs.remove(i);
                    } else {
                        dirs.push(*d);
                    }
                }
            }
            _ => return None,
        }
    }
    let mut factors: Vec<Expr> = dirs.into_iter().map(Expr::AltSign).collect();
    if odd_const {
        factors.push(Expr::int(-1));
    }
    if factors.is_empty() {
        return Some(Expr::one());
    }
    Some(mul(factors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Parameter;
    use alloc::vec;

    fn volterra_ctx() -> Context {
        Context {
            continuous: vec!["t".to_string()],
            discrete: vec!["n".to_string()],
            dependent: vec!["u".to_string()],
            ..Context::default()
        }
    }

    fn jet(deriv: u32, shift: i32) -> Expr {
        Expr::jet(JetAtom {
            namespace: Namespace::Dependent,
            dep: 0,
            deriv: vec![deriv],
            shift: vec![shift],
        })
    }

    #[test]
    fn volterra_lhs() {
        let ctx = volterra_ctx();
        let e = parse(&ctx, "u[1;0] / u - u[0;1] + u[0;-1]").unwrap();
        let want = add2(
            sub(
                div(jet(1, 0), jet(0, 0)).unwrap(),
                jet(0, 1),
            ),
            jet(0, -1),
        );
        assert_eq!(e, want);
    }

    #[test]
    fn cancellation_and_parity() {
        let ctx = volterra_ctx();
        assert!(parse(&ctx, "u[0;0] - u[0;0]").unwrap().is_zero());
        assert!(parse(&ctx, "(-1)^n * (-1)^n").unwrap().is_one());
        assert_eq!(parse(&ctx, "(-1)^(n+1)").unwrap(), crate::expr::neg(Expr::AltSign(0)));
    }

    #[test]
    fn rationals_are_exact_and_floats_rejected() {
        let ctx = volterra_ctx();
        assert_eq!(
            parse(&ctx, "1/2 + 1/3").unwrap(),
            Expr::Num(Rational::new(5.into(), 6.into()))
        );
        let e = parse(&ctx, "0.5 * u").unwrap_err();
        assert_eq!(e.offset, 1);
        assert!(e.message.contains("floating-point"));
    }

    #[test]
    fn eager_operators_apply() {
        let ctx = volterra_ctx();
        assert_eq!(parse(&ctx, "D[t](u*u)").unwrap(), parse(&ctx, "2*u*u[1;0]").unwrap());
        assert_eq!(parse(&ctx, "S[n](u[0;-1]*t)").unwrap(), parse(&ctx, "u*t").unwrap());
        assert_eq!(
            parse(&ctx, "S[n]((-1)^n)").unwrap(),
            parse(&ctx, "-(-1)^n").unwrap()
        );
    }

    #[test]
    fn single_list_shorthand() {
        let pend = Context {
            continuous: vec!["t".to_string()],
            dependent: vec!["u".to_string()],
            parameters: vec![Parameter {
                name: "a".to_string(),
                positive: true,
            }],
            ..Context::default()
        };
        let full = parse(&pend, "u[2]").unwrap();
        assert_eq!(full, parse(&pend, "u[2;]").unwrap());
        let dkdv = Context {
            discrete: vec!["m".to_string(), "n".to_string()],
            dependent: vec!["u".to_string()],
            ..Context::default()
        };
        assert_eq!(
            parse(&dkdv, "u[1,-1]").unwrap(),
            parse(&dkdv, "u[;1,-1]").unwrap()
        );
        assert_eq!(parse(&dkdv, "(-1)^(m+n)").unwrap(),
            mul(vec![Expr::AltSign(0), Expr::AltSign(1)]));
    }

    #[test]
    fn arity_and_identifier_errors() {
        let ctx = volterra_ctx();
        assert!(parse(&ctx, "u[1;0;2]").is_err());
        assert!(parse(&ctx, "u[1]").is_err());
        assert!(parse(&ctx, "u[-1;0]").unwrap_err().message.contains("non-negative"));
        assert!(parse(&ctx, "w + 1").unwrap_err().message.contains("unknown identifier"));
        let off = parse(&ctx, "u[0;1] + $").unwrap_err();
        assert_eq!(off.offset, 9);
    }

    #[test]
    fn functions_and_derivatives() {
        let mut ctx = volterra_ctx();
        ctx.functions.push(crate::context::FunctionSig {
            name: "c3".to_string(),
            args: vec!["n".to_string()],
        });
        let f = parse(&ctx, "c3(n)").unwrap();
        assert_eq!(
            f,
            Expr::Func(crate::expr::FuncApp {
                name: "c3".to_string(),
                derivs: vec![0],
                args: vec![Expr::DiscVar(0)],
            })
        );
        let df = parse(&ctx, "diff(c3;1)(n+1)").unwrap();
        assert_eq!(
            df,
            Expr::Func(crate::expr::FuncApp {
                name: "c3".to_string(),
                derivs: vec![1],
                args: vec![add2(Expr::DiscVar(0), Expr::one())],
            })
        );
        assert!(parse(&ctx, "c3").unwrap_err().message.contains("applied"));
        assert!(parse(&ctx, "c3(n, n)").is_err());
    }

    #[test]
    fn division_by_zero_reports_offset() {
        let ctx = volterra_ctx();
        let e = parse(&ctx, "u / (1 - 1)").unwrap_err();
        assert_eq!(e.offset, 2);
        assert!(e.message.contains("division"));
    }
}
