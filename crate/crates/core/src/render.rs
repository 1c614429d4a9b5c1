//! Deterministic expression rendering.
//!
//! Output parses back to the same normalized tree. Negative powers print as
//! division (`u[1;0]/u`, `1/(u*v)`), rational exponents are parenthesized
//! (`u^(1/2)`), and unknown-function derivatives use the `diff(f;1)(t)`
//! form the parser accepts.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::{One, Signed};

use crate::context::Context;
use crate::expr::{base_exp, sign_split, split_coeff, Expr, Rational};

/// Renders `e` using the variable names declared in `ctx`.
pub fn render(ctx: &Context, e: &Expr) -> String {
    match e {
        Expr::Sum(ts) => {
            let mut out = render_term(ctx, &ts[0]);
            for t in &ts[1..] {
                let (s, pos) = sign_split(t);
                if s < 0 {
                    out.push_str(" - ");
                    out.push_str(&render_term(ctx, &pos));
                } else {
                    out.push_str(" + ");
                    out.push_str(&render_term(ctx, t));
                }
            }
            out
        }
        _ => render_term(ctx, e),
    }
}

/// One additive term: coefficient and factors over a division bar.
fn render_term(ctx: &Context, term: &Expr) -> String {
    let (c, factors) = split_coeff(term);
    let neg = c.is_negative();
    let c = c.abs();
    let mut num: Vec<String> = Vec::new();
    let mut den: Vec<String> = Vec::new();
    for f in &factors {
        let (b, r) = base_exp(f);
        if r.is_negative() {
            den.push(render_pow(ctx, b, &-r));
        } else {
            num.push(render_pow(ctx, b, &r));
        }
    }
    if !c.numer().is_one() || num.is_empty() {
        num.insert(0, c.numer().to_string());
    }
    if !c.denom().is_one() {
        den.insert(0, c.denom().to_string());
    }
    let mut out = String::new();
    if neg {
        out.push('-');
    }
    out.push_str(&num.join("*"));
    if !den.is_empty() {
        out.push('/');
        if den.len() > 1 {
            out.push('(');
            out.push_str(&den.join("*"));
            out.push(')');
        } else {
            out.push_str(&den[0]);
        }
    }
    out
}

/// `base^r` for non-negative `r` (exponent 1 prints the base alone).
fn render_pow(ctx: &Context, base: &Expr, r: &Rational) -> String {
    let b = render_factor(ctx, base);
    if r.is_one() {
        return b;
    }
    if r.is_integer() {
        format!("{b}^{}", r.numer())
    } else {
        format!("{b}^({}/{})", r.numer(), r.denom())
    }
}

/// A multiplicand or power base: anything looser-binding than `^` gets
/// parenthesized.
fn render_factor(ctx: &Context, e: &Expr) -> String {
    match e {
        Expr::Num(c) => {
            if c.is_negative() || !c.is_integer() {
                format!("({c})")
            } else {
                format!("{c}")
            }
        }
        Expr::Param(p) => p.clone(),
        Expr::ContVar(i) => ctx.continuous[*i].clone(),
        Expr::DiscVar(d) => ctx.discrete[*d].clone(),
        Expr::AltSign(d) => format!("(-1)^{}", ctx.discrete[*d]),
        Expr::Jet(a) => {
            let name = ctx.atom_name(a);
            if a.deriv.iter().all(|&k| k == 0) && a.shift.iter().all(|&k| k == 0) {
                return name.to_string();
            }
            let d: Vec<String> = a.deriv.iter().map(|k| k.to_string()).collect();
            let s: Vec<String> = a.shift.iter().map(|k| k.to_string()).collect();
            if a.deriv.is_empty() {
                format!("{name}[{}]", s.join(","))
            } else if a.shift.is_empty() {
                format!("{name}[{}]", d.join(","))
            } else {
                format!("{name}[{};{}]", d.join(","), s.join(","))
            }
        }
        Expr::Func(f) => {
            let args: Vec<String> = f.args.iter().map(|a| render(ctx, a)).collect();
            if f.derivs.iter().all(|&k| k == 0) {
                format!("{}({})", f.name, args.join(", "))
            } else {
                let o: Vec<String> = f.derivs.iter().map(|k| k.to_string()).collect();
                format!("diff({};{})({})", f.name, o.join(","), args.join(", "))
            }
        }
        Expr::Exp(g) => format!("exp({})", render(ctx, g)),
        Expr::Ln(g) => format!("ln({})", render(ctx, g)),
        Expr::Sin(g) => format!("sin({})", render(ctx, g)),
        Expr::Cos(g) => format!("cos({})", render(ctx, g)),
        Expr::Pow(..) | Expr::Prod(_) | Expr::Sum(_) => {
            format!("({})", render(ctx, e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{Context, FunctionSig, Parameter};
    use crate::parse::parse;
    use alloc::vec;

    fn ctx() -> Context {
        Context {
            continuous: vec!["t".to_string()],
            discrete: vec!["n".to_string()],
            dependent: vec!["u".to_string()],
            auxiliary: vec!["v".to_string()],
            parameters: vec![Parameter {
                name: "a".to_string(),
                positive: true,
            }],
            functions: vec![FunctionSig {
                name: "c3".to_string(),
                args: vec!["n".to_string()],
            }],
        }
    }

    #[test]
    fn round_trips() {
        let ctx = ctx();
        for s in [
            "u[1;0]/u - u[0;1] + u[0;-1]",
            "-u*u[0;-1]",
            "exp(u - u[0;1]) + a^2*u",
            "(-1)^n*t*u[1;0] - 1/2",
            "1/(u*u[0;1]) + u^(1/2)",
            "c3(n)*u - diff(c3;1)(n)",
            "sin(a*t) + cos(t)/a",
            "(u - u[0;1])^2/4",
            "-3/2*v[1;1]",
            "ln(u) - t^3",
            "2^(1/2)*u",
        ] {
            let e = parse(&ctx, s).unwrap();
            let r = render(&ctx, &e);
            let back = parse(&ctx, &r).unwrap_or_else(|err| {
                panic!("rendered `{r}` failed to reparse: {err}")
            });
            assert_eq!(back, e, "render `{s}` -> `{r}` changed value");
        }
    }

    #[test]
    fn stable_forms() {
        let ctx = ctx();
        let e = parse(&ctx, "u[1;0] / u - u[0;1] + u[0;-1]").unwrap();
        assert_eq!(render(&ctx, &e), "u[0;-1] - u[0;1] + u[1;0]/u");
        let z = parse(&ctx, "u - u").unwrap();
        assert_eq!(render(&ctx, &z), "0");
        let m = parse(&ctx, "-u*u[0;-1]").unwrap();
        assert_eq!(render(&ctx, &m), "-u[0;-1]*u");
    }

    #[test]
    fn single_index_dimensions() {
        let pend = Context {
            continuous: vec!["t".to_string()],
            dependent: vec!["u".to_string()],
            ..Context::default()
        };
        let e = parse(&pend, "u[2]").unwrap();
        assert_eq!(render(&pend, &e), "u[2]");
        let dkdv = Context {
            discrete: vec!["m".to_string(), "n".to_string()],
            dependent: vec!["u".to_string()],
            ..Context::default()
        };
        let e = parse(&dkdv, "u[1,-1] * (-1)^(m+n)").unwrap();
        let r = render(&dkdv, &e);
        assert_eq!(parse(&dkdv, &r).unwrap(), e);
    }
}
