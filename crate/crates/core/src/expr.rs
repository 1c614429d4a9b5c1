//! Expression trees over exact rationals, kept in a canonical normal form.
//!
//! Invariants of a normalized expression:
//! - sums and products are flattened and sorted by a fixed total order;
//! - numeric constants are folded exactly; a product carries at most one
//!   numeric factor, at the head; a sum combines like terms over identical
//!   monomials, so `x - x` is the literal `0`;
//! - products of sums are distributed and positive integer powers of sums
//!   are expanded, so polynomial identities normalize to `0`;
//! - exponents are exact rationals; same-base factors add exponents;
//!   `(-1)^n` squares to `1`; integer powers of sum bases extract the sign
//!   and rational content of the base, making denominators canonical up to
//!   ordering;
//! - `exp(0) = 1`, `ln(1) = 0`, `exp` of a sum absorbs `ln` summands
//!   (`exp(k*ln X + r) = X^k * exp(r)`), `sin`/`cos` drop the canonical
//!   sign of their argument (`sin` with a factor `-1`).
//!
//! Zero-testing everywhere in the engine is normalization to the literal
//! `0`. This decides ideal membership for the rational-function fragment
//! generated by jets, parameters, and structurally distinct transcendental
//! factors; cancellations that need polynomial factorization (e.g.
//! `(u^2 - w^2)/(u - w)`) are outside the fragment and stay unevaluated.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, Zero};

use crate::context::{JetAtom, Namespace};
use crate::error::EngineError;

pub type Rational = num_rational::BigRational;

/// Reserved parameter name for the homotopy scale; not a legal identifier,
/// so it can never collide with a declared parameter.
pub(crate) const EPS: &str = "#eps";

/// An unknown-function application `name(args)` with formal partial
/// derivatives recorded per argument slot (`derivs[i]` = order in slot `i`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FuncApp {
    pub name: String,
    pub derivs: Vec<u32>,
    pub args: Vec<Expr>,
}

/// Expression node. The variant order fixes the total order used for
/// canonical sorting; do not reorder.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Expr {
    Num(Rational),
    Param(String),
    ContVar(usize),
    DiscVar(usize),
    /// `(-1)^{n_d}` for discrete direction `d`.
    AltSign(usize),
    Jet(JetAtom),
    Func(FuncApp),
    Pow(Box<Expr>, Rational),
    Exp(Box<Expr>),
    Ln(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Prod(Vec<Expr>),
    Sum(Vec<Expr>),
}

impl Expr {
    pub fn zero() -> Expr {
        Expr::Num(Rational::zero())
    }

    pub fn one() -> Expr {
        Expr::Num(Rational::one())
    }

    pub fn int(n: i64) -> Expr {
        Expr::Num(Rational::from_integer(BigInt::from(n)))
    }

    /// Exact rational constant `num/den`; `den` must be nonzero.
    pub fn rat(num: i64, den: i64) -> Expr {
        assert!(den != 0, "rational literal with zero denominator");
        Expr::Num(Rational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn jet(atom: JetAtom) -> Expr {
        Expr::Jet(atom)
    }

    pub fn param(name: &str) -> Expr {
        Expr::Param(String::from(name))
    }

    pub(crate) fn eps() -> Expr {
        Expr::Param(String::from(EPS))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(r) if r.is_zero())
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Num(r) if r.is_one())
    }

    pub fn as_num(&self) -> Option<&Rational> {
        match self {
            Expr::Num(r) => Some(r),
            _ => None,
        }
    }

    /// Terms of a sum, or the expression itself as a single term.
    pub fn terms(&self) -> &[Expr] {
        match self {
            Expr::Sum(ts) => ts,
            _ => core::slice::from_ref(self),
        }
    }

    /// Factors of a product, or the expression itself as a single factor.
    pub fn factors(&self) -> &[Expr] {
        match self {
            Expr::Prod(fs) => fs,
            _ => core::slice::from_ref(self),
        }
    }
}

// ---------------------------------------------------------------------------
// rational helpers

fn rat_is_int(r: &Rational) -> bool {
    r.is_integer()
}

fn rat_to_i64(r: &Rational) -> Option<i64> {
    if !r.is_integer() {
        return None;
    }
    let b = r.to_integer();
    i64::try_from(b).ok()
}

fn rat_pow(c: &Rational, k: i64) -> Result<Rational, EngineError> {
    if c.is_zero() {
        return if k > 0 {
            Ok(Rational::zero())
        } else if k == 0 {
            Ok(Rational::one())
        } else {
            Err(EngineError::DivisionByZero)
        };
    }
    let mag = k.unsigned_abs();
    let exp = u32::try_from(mag)
        .map_err(|_| EngineError::UnsupportedExponent(format!("exponent {k} too large")))?;
    let n = c.numer().pow(exp);
    let d = c.denom().pow(exp);
    Ok(if k >= 0 {
        Rational::new(n, d)
    } else {
        Rational::new(d, n)
    })
}

/// gcd of absolute values of a set of rationals: gcd of numerators over
/// lcm of denominators. Zero inputs are skipped; result is positive.
fn rat_gcd(values: impl Iterator<Item = Rational>) -> Rational {
    let mut num = BigInt::zero();
    let mut den = BigInt::one();
    for v in values {
        if v.is_zero() {
            continue;
        }
        num = num.gcd(v.numer());
        den = den.lcm(v.denom());
    }
    if num.is_zero() {
        Rational::one()
    } else {
        Rational::new(num, den)
    }
}

// ---------------------------------------------------------------------------
// term and factor decomposition

/// Splits a normalized non-sum expression into (rational coefficient,
/// sorted monomial factors).
pub(crate) fn split_coeff(term: &Expr) -> (Rational, Vec<Expr>) {
    match term {
        Expr::Num(c) => (c.clone(), Vec::new()),
        Expr::Prod(fs) => {
            if let Some(Expr::Num(c)) = fs.first() {
                (c.clone(), fs[1..].to_vec())
            } else {
                (Rational::one(), fs.clone())
            }
        }
        other => (Rational::one(), vec![other.clone()]),
    }
}

fn from_coeff(c: Rational, mut factors: Vec<Expr>) -> Expr {
    if c.is_zero() || factors.is_empty() {
        return Expr::Num(c);
    }
    if c.is_one() {
        return if factors.len() == 1 {
            factors.pop().unwrap()
        } else {
            Expr::Prod(factors)
        };
    }
    let mut fs = Vec::with_capacity(factors.len() + 1);
    fs.push(Expr::Num(c));
    fs.append(&mut factors);
    Expr::Prod(fs)
}

/// Base and exponent view of a factor.
pub(crate) fn base_exp(factor: &Expr) -> (&Expr, Rational) {
    match factor {
        Expr::Pow(b, r) => (b, r.clone()),
        other => (other, Rational::one()),
    }
}

/// Canonical sign and content of a normalized sum: returns
/// (sign, content, primitive-positive sum) with
/// `sum = sign * content * primitive`.
fn sum_sign_content(ts: &[Expr]) -> (i8, Rational, Expr) {
    let coeffs: Vec<Rational> = ts.iter().map(|t| split_coeff(t).0).collect();
    let sign: i8 = if coeffs[0].is_negative() { -1 } else { 1 };
    let mut content = rat_gcd(coeffs.iter().cloned());
    if sign < 0 {
        content = -content;
    }
    if content.is_one() {
        return (sign, content.abs(), Expr::Sum(ts.to_vec()));
    }
    let scaled: Vec<Expr> = ts
        .iter()
        .map(|t| {
            let (c, m) = split_coeff(t);
            from_coeff(c / content.clone(), m)
        })
        .collect();
    (sign, content.abs(), Expr::Sum(scaled))
}

/// Canonical sign of any normalized expression: (-1, |e|) if the leading
/// rational coefficient is negative, else (1, e).
pub(crate) fn sign_split(e: &Expr) -> (i8, Expr) {
    match e {
        Expr::Num(c) if c.is_negative() => (-1, Expr::Num(-c.clone())),
        Expr::Prod(fs) => {
            if let Some(Expr::Num(c)) = fs.first() {
                if c.is_negative() {
                    return (-1, from_coeff(-c.clone(), fs[1..].to_vec()));
                }
            }
            (1, e.clone())
        }
        Expr::Sum(ts) => {
            let (c0, _) = split_coeff(&ts[0]);
            if c0.is_negative() {
                let flipped: Vec<Expr> = ts
                    .iter()
                    .map(|t| {
                        let (c, m) = split_coeff(t);
                        from_coeff(-c, m)
                    })
                    .collect();
                (-1, Expr::Sum(flipped))
            } else {
                (1, e.clone())
            }
        }
        _ => (1, e.clone()),
    }
}

// ---------------------------------------------------------------------------
// normalizing constructors

/// Sum of normalized inputs; flattens, combines like terms, folds constants.
pub fn add(terms: Vec<Expr>) -> Expr {
    let mut acc: BTreeMap<Vec<Expr>, Rational> = BTreeMap::new();
    let mut stack = terms;
    stack.reverse();
    while let Some(t) = stack.pop() {
        match t {
            Expr::Sum(ts) => {
                for s in ts.into_iter().rev() {
                    stack.push(s);
                }
            }
            other => {
                let (c, mon) = split_coeff(&other);
                if c.is_zero() {
                    continue;
                }
                let entry = acc.entry(mon).or_insert_with(Rational::zero);
                *entry += c;
            }
        }
    }
    let mut out: Vec<Expr> = Vec::new();
    for (mon, c) in acc {
        if c.is_zero() {
            continue;
        }
        out.push(from_coeff(c, mon));
    }
    match out.len() {
        0 => Expr::zero(),
        1 => out.pop().unwrap(),
        _ => Expr::Sum(out),
    }
}

pub fn add2(a: Expr, b: Expr) -> Expr {
    add(vec![a, b])
}

pub fn neg(a: Expr) -> Expr {
    mul2(Expr::int(-1), a)
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    add2(a, neg(b))
}

/// Product of normalized inputs; flattens, folds constants, combines
/// same-base factors, distributes over sums.
pub fn mul(factors: Vec<Expr>) -> Expr {
    nmul(factors).expect("product arithmetic cannot fail on normalized inputs")
}

pub fn mul2(a: Expr, b: Expr) -> Expr {
    mul(vec![a, b])
}

fn nmul(factors: Vec<Expr>) -> Result<Expr, EngineError> {
    let mut coeff = Rational::one();
    // base -> accumulated exponent; sum bases are keyed primitive-positive.
    let mut bases: BTreeMap<Expr, Rational> = BTreeMap::new();
    let mut stack = factors;
    stack.reverse();
    while let Some(f) = stack.pop() {
        match f {
            Expr::Num(c) => {
                if c.is_zero() {
                    return Ok(Expr::zero());
                }
                coeff *= c;
            }
            Expr::Prod(fs) => {
                for g in fs.into_iter().rev() {
                    stack.push(g);
                }
            }
            Expr::Sum(ts) => {
                let (sign, content, prim) = sum_sign_content(&ts);
                if sign < 0 {
                    coeff = -coeff;
                }
                coeff *= content;
                *bases.entry(prim).or_insert_with(Rational::zero) += Rational::one();
            }
            Expr::Pow(b, r) => match *b {
                // Integer-exponent pows of sums are stored primitive-positive
                // already, but fold defensively so raw trees normalize too.
                Expr::Sum(ts) if rat_is_int(&r) => {
                    let (sign, content, prim) = sum_sign_content(&ts);
                    let k = rat_to_i64(&r).ok_or_else(|| {
                        EngineError::UnsupportedExponent(format!("exponent {r} too large"))
                    })?;
                    if sign < 0 && k.rem_euclid(2) == 1 {
                        coeff = -coeff;
                    }
                    coeff *= rat_pow(&content, k)?;
                    *bases.entry(prim).or_insert_with(Rational::zero) += r;
                }
                other => {
                    *bases.entry(other).or_insert_with(Rational::zero) += r;
                }
            },
            other => {
                *bases.entry(other).or_insert_with(Rational::zero) += Rational::one();
            }
        }
    }
    if coeff.is_zero() {
        return Ok(Expr::zero());
    }

    let mut plain: Vec<Expr> = Vec::new();
    let mut sums: Vec<Expr> = Vec::new();
    let mut respin: Vec<Expr> = Vec::new();
    let mut exp_args: Vec<Expr> = Vec::new();
    for (b, r) in bases {
        if r.is_zero() {
            continue;
        }
        let piece = npow(b, r)?;
        match piece {
            Expr::Num(c) => {
                if c.is_zero() {
                    return Ok(Expr::zero());
                }
                coeff *= c;
            }
            // exponentials multiply by adding arguments, so a product
            // carries at most one exp factor
            Expr::Exp(g) => exp_args.push(*g),
            Expr::Sum(_) => sums.push(piece),
            Expr::Prod(_) => respin.push(piece),
            other => plain.push(other),
        }
    }
    if !exp_args.is_empty() {
        match nexp(add(exp_args))? {
            Expr::Num(c) => {
                if c.is_zero() {
                    return Ok(Expr::zero());
                }
                coeff *= c;
            }
            p @ (Expr::Prod(_) | Expr::Sum(_)) => respin.push(p),
            other => plain.push(other),
        }
    }
    if !respin.is_empty() {
        // A rebuilt piece expanded into a product (e.g. a pow of a product
        // distributing); fold everything through one more pass.
        respin.push(Expr::Num(coeff));
        respin.extend(plain);
        respin.extend(sums);
        return nmul(respin);
    }
    if !sums.is_empty() {
        // Distribute the first sum over the remaining product.
        let first = sums.remove(0);
        let Expr::Sum(ts) = first else { unreachable!() };
        let mut out_terms = Vec::with_capacity(ts.len());
        for t in ts {
            let mut fs = Vec::with_capacity(plain.len() + sums.len() + 2);
            fs.push(Expr::Num(coeff.clone()));
            fs.extend(plain.iter().cloned());
            fs.extend(sums.iter().cloned());
            fs.push(t);
            out_terms.push(nmul(fs)?);
        }
        return Ok(add(out_terms));
    }
    plain.sort();
    Ok(from_coeff(coeff, plain))
}

/// `base^k` for an integer exponent.
pub fn powi(base: Expr, k: i64) -> Expr {
    npow(base, Rational::from_integer(BigInt::from(k)))
        .expect("integer power of a nonzero base cannot fail")
}

/// `base^r` for an exact rational exponent. Errors on `0^r` with `r < 0`
/// and on formally meaningless exponents like non-integer powers of
/// `(-1)^n`.
pub fn pow(base: Expr, r: Rational) -> Result<Expr, EngineError> {
    npow(base, r)
}

fn npow(base: Expr, r: Rational) -> Result<Expr, EngineError> {
    if r.is_zero() {
        return Ok(Expr::one());
    }
    if r.is_one() {
        return Ok(base);
    }
    match base {
        Expr::Num(c) => {
            if let Some(k) = rat_to_i64(&r) {
                return Ok(Expr::Num(rat_pow(&c, k)?));
            }
            if c.is_zero() {
                return if r.is_negative() {
                    Err(EngineError::DivisionByZero)
                } else {
                    Ok(Expr::zero())
                };
            }
            if c.is_one() {
                return Ok(Expr::one());
            }
            Ok(Expr::Pow(Box::new(Expr::Num(c)), r))
        }
        Expr::AltSign(d) => {
            let k = rat_to_i64(&r).ok_or_else(|| {
                EngineError::UnsupportedExponent(format!(
                    "non-integer power {r} of an alternating sign"
                ))
            })?;
            Ok(if k.rem_euclid(2) == 0 {
                Expr::one()
            } else {
                Expr::AltSign(d)
            })
        }
        Expr::Pow(b, r2) => {
            if rat_is_int(&r) {
                npow(*b, r2 * r)
            } else {
                Ok(Expr::Pow(Box::new(Expr::Pow(b, r2)), r))
            }
        }
        Expr::Exp(g) => nexp(mul2(*g, Expr::Num(r))),
        Expr::Prod(fs) => {
            if rat_is_int(&r) {
                let mut out = Vec::with_capacity(fs.len());
                for f in fs {
                    out.push(npow(f, r.clone())?);
                }
                nmul(out)
            } else {
                Ok(Expr::Pow(Box::new(Expr::Prod(fs)), r))
            }
        }
        Expr::Sum(ts) => {
            if let Some(k) = rat_to_i64(&r) {
                if k > 1 {
                    // Expand multinomially, multiplying term by term; going
                    // through nmul with whole sums would re-merge the base
                    // and recurse back here.
                    let s = Expr::Sum(ts);
                    let mut acc = s.clone();
                    for _ in 1..k {
                        let mut next = Vec::new();
                        for a in acc.terms() {
                            for b in s.terms() {
                                next.push(nmul(vec![a.clone(), b.clone()])?);
                            }
                        }
                        acc = add(next);
                    }
                    return Ok(acc);
                }
                // negative integer power: canonical primitive-positive base
                let (sign, content, prim) = sum_sign_content(&ts);
                let mut c = rat_pow(&content, k)?;
                if sign < 0 && k.rem_euclid(2) == 1 {
                    c = -c;
                }
                return Ok(from_coeff(c, vec![Expr::Pow(Box::new(prim), r)]));
            }
            Ok(Expr::Pow(Box::new(Expr::Sum(ts)), r))
        }
        other => Ok(Expr::Pow(Box::new(other), r)),
    }
}

/// `a / b`; errors when `b` normalizes to the literal zero.
pub fn div(a: Expr, b: Expr) -> Result<Expr, EngineError> {
    let inv = npow(b, -Rational::one())?;
    Ok(mul2(a, inv))
}

pub fn exp_(arg: Expr) -> Expr {
    nexp(arg).expect("exp arithmetic cannot fail on normalized inputs")
}

fn nexp(arg: Expr) -> Result<Expr, EngineError> {
    if arg.is_zero() {
        return Ok(Expr::one());
    }
    // Absorb logarithmic summands: exp(k*ln X + rest) = X^k exp(rest).
    let mut lns: Vec<Expr> = Vec::new();
    let mut rest: Vec<Expr> = Vec::new();
    for t in arg.terms() {
        let (c, mon) = split_coeff(t);
        if mon.len() == 1 {
            if let Expr::Ln(x) = &mon[0] {
                lns.push(npow((**x).clone(), c)?);
                continue;
            }
        }
        rest.push(t.clone());
    }
    if lns.is_empty() {
        return Ok(Expr::Exp(Box::new(arg)));
    }
    let remainder = add(rest);
    if !remainder.is_zero() {
        lns.push(Expr::Exp(Box::new(remainder)));
    }
    nmul(lns)
}

pub fn ln_(arg: Expr) -> Result<Expr, EngineError> {
    if arg.is_zero() {
        return Err(EngineError::DivisionByZero);
    }
    if arg.is_one() {
        return Ok(Expr::zero());
    }
    if let Expr::Exp(g) = arg {
        return Ok(*g);
    }
    Ok(Expr::Ln(Box::new(arg)))
}

pub fn sin_(arg: Expr) -> Expr {
    if arg.is_zero() {
        return Expr::zero();
    }
    let (sign, abs) = sign_split(&arg);
    let s = Expr::Sin(Box::new(abs));
    if sign < 0 {
        neg(s)
    } else {
        s
    }
}

pub fn cos_(arg: Expr) -> Expr {
    if arg.is_zero() {
        return Expr::one();
    }
    let (_, abs) = sign_split(&arg);
    Expr::Cos(Box::new(abs))
}

/// Rebuilds an arbitrary tree bottom-up through the normalizing
/// constructors. Idempotent on its own output.
pub fn normalize(e: &Expr) -> Result<Expr, EngineError> {
    Ok(match e {
        Expr::Num(_)
        | Expr::Param(_)
        | Expr::ContVar(_)
        | Expr::DiscVar(_)
        | Expr::AltSign(_)
        | Expr::Jet(_) => e.clone(),
        Expr::Func(f) => {
            let mut args = Vec::with_capacity(f.args.len());
            for a in &f.args {
                args.push(normalize(a)?);
            }
            Expr::Func(FuncApp {
                name: f.name.clone(),
                derivs: f.derivs.clone(),
                args,
            })
        }
        Expr::Pow(b, r) => npow(normalize(b)?, r.clone())?,
        Expr::Exp(g) => nexp(normalize(g)?)?,
        Expr::Ln(g) => ln_(normalize(g)?)?,
        Expr::Sin(g) => sin_(normalize(g)?),
        Expr::Cos(g) => cos_(normalize(g)?),
        Expr::Prod(fs) => {
            let mut out = Vec::with_capacity(fs.len());
            for f in fs {
                out.push(normalize(f)?);
            }
            nmul(out)?
        }
        Expr::Sum(ts) => {
            let mut out = Vec::with_capacity(ts.len());
            for t in ts {
                out.push(normalize(t)?);
            }
            add(out)
        }
    })
}

// ---------------------------------------------------------------------------
// traversal helpers

/// All jet atoms (both namespaces) occurring in `e`, including inside
/// unknown-function arguments.
pub fn atoms(e: &Expr) -> BTreeSet<JetAtom> {
    let mut out = BTreeSet::new();
    collect_atoms(e, &mut out);
    out
}

fn collect_atoms(e: &Expr, out: &mut BTreeSet<JetAtom>) {
    match e {
        Expr::Jet(a) => {
            out.insert(a.clone());
        }
        Expr::Func(f) => {
            for a in &f.args {
                collect_atoms(a, out);
            }
        }
        Expr::Pow(b, _) => collect_atoms(b, out),
        Expr::Exp(g) | Expr::Ln(g) | Expr::Sin(g) | Expr::Cos(g) => collect_atoms(g, out),
        Expr::Prod(es) | Expr::Sum(es) => {
            for x in es {
                collect_atoms(x, out);
            }
        }
        _ => {}
    }
}

/// Whether any node satisfies the predicate.
pub fn any_node(e: &Expr, pred: &mut impl FnMut(&Expr) -> bool) -> bool {
    if pred(e) {
        return true;
    }
    match e {
        Expr::Func(f) => f.args.iter().any(|a| any_node(a, pred)),
        Expr::Pow(b, _) => any_node(b, pred),
        Expr::Exp(g) | Expr::Ln(g) | Expr::Sin(g) | Expr::Cos(g) => any_node(g, pred),
        Expr::Prod(es) | Expr::Sum(es) => es.iter().any(|x| any_node(x, pred)),
        _ => false,
    }
}

pub fn mentions_param(e: &Expr, name: &str) -> bool {
    any_node(e, &mut |x| matches!(x, Expr::Param(p) if p == name))
}

pub(crate) fn mentions_eps(e: &Expr) -> bool {
    mentions_param(e, EPS)
}

pub fn mentions_namespace(e: &Expr, ns: Namespace) -> bool {
    any_node(e, &mut |x| matches!(x, Expr::Jet(a) if a.namespace == ns))
}

/// Structural dependence on an explicit independent variable (a jet atom
/// does not count; `(-1)^n` counts for its discrete direction).
pub fn mentions_cont_var(e: &Expr, i: usize) -> bool {
    any_node(e, &mut |x| matches!(x, Expr::ContVar(j) if *j == i))
}

pub fn mentions_disc_var(e: &Expr, d: usize) -> bool {
    any_node(e, &mut |x| {
        matches!(x, Expr::DiscVar(j) if *j == d) || matches!(x, Expr::AltSign(j) if *j == d)
    })
}

// ---------------------------------------------------------------------------
// partial derivatives

/// Coordinate for formal partial differentiation. Every distinct jet atom,
/// continuous variable, and parameter is an independent coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Coord {
    Jet(JetAtom),
    Cont(usize),
    Param(String),
}

fn coord_matches(c: &Coord, e: &Expr) -> bool {
    match (c, e) {
        (Coord::Jet(a), Expr::Jet(b)) => a == b,
        (Coord::Cont(i), Expr::ContVar(j)) => i == j,
        (Coord::Param(p), Expr::Param(q)) => p == q,
        _ => false,
    }
}

/// Formal partial derivative of `e` in the coordinate `c`.
pub fn partial(e: &Expr, c: &Coord) -> Expr {
    if coord_matches(c, e) {
        return Expr::one();
    }
    match e {
        Expr::Num(_)
        | Expr::Param(_)
        | Expr::ContVar(_)
        | Expr::DiscVar(_)
        | Expr::AltSign(_)
        | Expr::Jet(_) => Expr::zero(),
        Expr::Func(f) => {
            // chain rule over argument slots
            let mut parts = Vec::new();
            for (i, a) in f.args.iter().enumerate() {
                let da = partial(a, c);
                if da.is_zero() {
                    continue;
                }
                let mut derivs = f.derivs.clone();
                derivs[i] += 1;
                parts.push(mul2(
                    Expr::Func(FuncApp {
                        name: f.name.clone(),
                        derivs,
                        args: f.args.clone(),
                    }),
                    da,
                ));
            }
            add(parts)
        }
        Expr::Pow(b, r) => {
            let db = partial(b, c);
            if db.is_zero() {
                return Expr::zero();
            }
            let lower = npow((**b).clone(), r.clone() - Rational::one())
                .expect("derivative of a stored power cannot fail");
            mul(vec![Expr::Num(r.clone()), lower, db])
        }
        Expr::Exp(g) => {
            let dg = partial(g, c);
            if dg.is_zero() {
                return Expr::zero();
            }
            mul2(Expr::Exp(g.clone()), dg)
        }
        Expr::Ln(g) => {
            let dg = partial(g, c);
            if dg.is_zero() {
                return Expr::zero();
            }
            let inv = npow((**g).clone(), -Rational::one())
                .expect("stored ln argument is structurally nonzero");
            mul2(dg, inv)
        }
        Expr::Sin(g) => {
            let dg = partial(g, c);
            if dg.is_zero() {
                return Expr::zero();
            }
            mul2(cos_((**g).clone()), dg)
        }
        Expr::Cos(g) => {
            let dg = partial(g, c);
            if dg.is_zero() {
                return Expr::zero();
            }
            neg(mul2(sin_((**g).clone()), dg))
        }
        Expr::Prod(fs) => {
            let mut parts = Vec::new();
            for (i, f) in fs.iter().enumerate() {
                let df = partial(f, c);
                if df.is_zero() {
                    continue;
                }
                let mut rest: Vec<Expr> = Vec::with_capacity(fs.len());
                rest.extend(fs.iter().take(i).cloned());
                rest.push(df);
                rest.extend(fs.iter().skip(i + 1).cloned());
                parts.push(mul(rest));
            }
            add(parts)
        }
        Expr::Sum(ts) => add(ts.iter().map(|t| partial(t, c)).collect()),
    }
}

pub fn partial_atom(e: &Expr, a: &JetAtom) -> Expr {
    partial(e, &Coord::Jet(a.clone()))
}

// ---------------------------------------------------------------------------
// substitution

/// Simultaneous substitution of jet atoms. Bindings do not feed back into
/// each other. When any atom of an auxiliary variable is bound, every
/// occurring atom of that variable must be bound too; otherwise the shifted
/// closure the caller intended is ambiguous and we fail loudly.
pub fn substitute(e: &Expr, bindings: &BTreeMap<JetAtom, Expr>) -> Result<Expr, EngineError> {
    let mut bound_aux: BTreeSet<usize> = BTreeSet::new();
    for a in bindings.keys() {
        if a.namespace == Namespace::Auxiliary {
            bound_aux.insert(a.dep);
        }
    }
    if !bound_aux.is_empty() {
        for a in atoms(e) {
            if a.namespace == Namespace::Auxiliary
                && bound_aux.contains(&a.dep)
                && !bindings.contains_key(&a)
            {
                return Err(EngineError::UnboundShiftedAuxiliary(format!(
                    "auxiliary atom dep={} deriv={:?} shift={:?} has no binding",
                    a.dep, a.deriv, a.shift
                )));
            }
        }
    }
    subst_rebuild(e, &mut |x| match x {
        Expr::Jet(a) => bindings.get(a).cloned(),
        _ => None,
    })
}

/// Replaces the parameter `name` by `value` everywhere.
pub fn subst_param(e: &Expr, name: &str, value: &Expr) -> Result<Expr, EngineError> {
    subst_rebuild(e, &mut |x| match x {
        Expr::Param(p) if p == name => Some(value.clone()),
        _ => None,
    })
}

/// Bottom-up rebuild applying `hit` at every node (pre-order match,
/// children substituted first in non-matching nodes).
pub(crate) fn subst_rebuild(
    e: &Expr,
    hit: &mut impl FnMut(&Expr) -> Option<Expr>,
) -> Result<Expr, EngineError> {
    if let Some(r) = hit(e) {
        return Ok(r);
    }
    Ok(match e {
        Expr::Num(_)
        | Expr::Param(_)
        | Expr::ContVar(_)
        | Expr::DiscVar(_)
        | Expr::AltSign(_)
        | Expr::Jet(_) => e.clone(),
        Expr::Func(f) => {
            let mut args = Vec::with_capacity(f.args.len());
            for a in &f.args {
                args.push(subst_rebuild(a, hit)?);
            }
            Expr::Func(FuncApp {
                name: f.name.clone(),
                derivs: f.derivs.clone(),
                args,
            })
        }
        Expr::Pow(b, r) => npow(subst_rebuild(b, hit)?, r.clone())?,
        Expr::Exp(g) => nexp(subst_rebuild(g, hit)?)?,
        Expr::Ln(g) => ln_(subst_rebuild(g, hit)?)?,
        Expr::Sin(g) => sin_(subst_rebuild(g, hit)?),
        Expr::Cos(g) => cos_(subst_rebuild(g, hit)?),
        Expr::Prod(fs) => {
            let mut out = Vec::with_capacity(fs.len());
            for f in fs {
                out.push(subst_rebuild(f, hit)?);
            }
            nmul(out)?
        }
        Expr::Sum(ts) => {
            let mut out = Vec::with_capacity(ts.len());
            for t in ts {
                out.push(subst_rebuild(t, hit)?);
            }
            add(out)
        }
    })
}

// ---------------------------------------------------------------------------
// rational normal form

/// Monomial over opaque bases with non-negative integer exponents, ordered
/// by graded lex so that leading-term polynomial division terminates.
#[derive(Debug, Clone, PartialEq, Eq)]
struct MonoKey(Vec<(Expr, u64)>);

impl MonoKey {
    fn degree(&self) -> u64 {
        self.0.iter().map(|(_, k)| *k).sum()
    }

    fn mul(&self, other: &MonoKey) -> MonoKey {
        let mut m: BTreeMap<Expr, u64> = self.0.iter().cloned().collect();
        for (b, k) in &other.0 {
            *m.entry(b.clone()).or_insert(0) += k;
        }
        MonoKey(m.into_iter().collect())
    }

    /// `self / other` when componentwise divisible.
    fn div(&self, other: &MonoKey) -> Option<MonoKey> {
        let mut m: BTreeMap<Expr, u64> = self.0.iter().cloned().collect();
        for (b, k) in &other.0 {
            let e = m.get_mut(b)?;
            if *e < *k {
                return None;
            }
            *e -= k;
            if *e == 0 {
                m.remove(b);
            }
        }
        Some(MonoKey(m.into_iter().collect()))
    }
}

impl PartialOrd for MonoKey {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MonoKey {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        use core::cmp::Ordering;
        match self.degree().cmp(&other.degree()) {
            Ordering::Equal => {}
            o => return o,
        }
        // aligned lex over the union of bases (entries are sorted by base)
        let mut i = 0;
        let mut j = 0;
        loop {
            match (self.0.get(i), other.0.get(j)) {
                (None, None) => return Ordering::Equal,
                (None, Some(_)) => return Ordering::Less,
                (Some(_), None) => return Ordering::Greater,
                (Some((b1, k1)), Some((b2, k2))) => match b1.cmp(b2) {
                    // earlier base present only on one side: that side has
                    // positive exponent where the other has zero
                    Ordering::Less => return Ordering::Greater,
                    Ordering::Greater => return Ordering::Less,
                    Ordering::Equal => match k1.cmp(k2) {
                        Ordering::Equal => {
                            i += 1;
                            j += 1;
                        }
                        o => return o,
                    },
                },
            }
        }
    }
}

type Poly = BTreeMap<MonoKey, Rational>;

fn poly_add_term(p: &mut Poly, m: MonoKey, c: Rational) {
    if c.is_zero() {
        return;
    }
    let entry = p.entry(m.clone()).or_insert_with(Rational::zero);
    *entry += c;
    if entry.is_zero() {
        p.remove(&m);
    }
}

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = Poly::new();
    for (ma, ca) in a {
        for (mb, cb) in b {
            poly_add_term(&mut out, ma.mul(mb), ca.clone() * cb.clone());
        }
    }
    out
}

/// Exact division `n / d`; `None` when the remainder is nonzero.
fn poly_div_exact(n: &Poly, d: &Poly) -> Option<Poly> {
    let (lead_m, lead_c) = d.last_key_value()?;
    let mut work = n.clone();
    let mut q = Poly::new();
    while let Some((m, c)) = work.last_key_value() {
        let qm = m.div(lead_m)?;
        let qc = c.clone() / lead_c.clone();
        for (dm, dc) in d {
            poly_add_term(&mut work, dm.mul(&qm), -(dc.clone() * qc.clone()));
        }
        poly_add_term(&mut q, qm, qc);
    }
    Some(q)
}

/// Splits one normalized term into coefficient, numerator monomial, and
/// denominator monomial. Factors with non-integer exponents stay opaque in
/// the numerator.
fn split_term_nd(term: &Expr) -> (Rational, MonoKey, MonoKey) {
    let (c, factors) = split_coeff(term);
    let mut num: BTreeMap<Expr, u64> = BTreeMap::new();
    let mut den: BTreeMap<Expr, u64> = BTreeMap::new();
    for f in factors {
        let (b, r) = match &f {
            Expr::Pow(b, r) => ((**b).clone(), r.clone()),
            other => (other.clone(), Rational::one()),
        };
        if r.is_integer() {
            if let Ok(k) = i64::try_from(r.to_integer()) {
                if k > 0 {
                    *num.entry(b).or_insert(0) += k as u64;
                } else if k < 0 {
                    *den.entry(b).or_insert(0) += k.unsigned_abs();
                }
                continue;
            }
        }
        *num.entry(f).or_insert(0) += 1;
    }
    (
        c,
        MonoKey(num.into_iter().collect()),
        MonoKey(den.into_iter().collect()),
    )
}

/// A base as a polynomial; `None` when it has non-monomial structure that
/// the division cannot see through (nested denominators, fractional powers).
fn poly_of_base(b: &Expr) -> Option<Poly> {
    let mut p = Poly::new();
    for t in b.terms() {
        let (c, num, den) = split_term_nd(t);
        if !den.0.is_empty() {
            return None;
        }
        poly_add_term(&mut p, num, c);
    }
    if p.is_empty() {
        None
    } else {
        Some(p)
    }
}

fn poly_to_expr(p: &Poly) -> Expr {
    let mut terms = Vec::with_capacity(p.len());
    for (m, c) in p {
        let mut fs = Vec::with_capacity(m.0.len() + 1);
        fs.push(Expr::Num(c.clone()));
        for (b, k) in &m.0 {
            fs.push(powi(b.clone(), *k as i64));
        }
        terms.push(mul(fs));
    }
    add(terms)
}

/// Rational normal form: every term cleared over the common factored
/// denominator, the numerator expanded, and each denominator base divided
/// out exactly where possible. Decides zero for sums of rational functions
/// over the engine's opaque bases (e.g. `w/(w-u) - u/(w-u) - 1` -> `0`).
/// Nested quotients flatten (`1/(1/u + 1)` -> `u/(u + 1)`); arguments of
/// elementary functions are normalized recursively.
pub fn rational_normal(e: &Expr) -> Expr {
    let flat = rn_flatten(e);
    let (num, den) = quotient_split(&flat);
    if den.is_empty() {
        return num;
    }
    let mut inv = Vec::with_capacity(den.len());
    for (b, k) in den {
        inv.push(powi(b, -(k as i64)));
    }
    mul2(num, mul(inv))
}

/// Recursive rebuild that keeps denominators from nesting: an integer power
/// of a base distributes over the base's own numerator/denominator split.
fn rn_flatten(e: &Expr) -> Expr {
    match e {
        Expr::Func(f) => Expr::Func(FuncApp {
            name: f.name.clone(),
            derivs: f.derivs.clone(),
            args: f.args.iter().map(rational_normal).collect(),
        }),
        Expr::Pow(b, r) => {
            let fb = rn_flatten(b);
            let int_exp = if r.is_integer() {
                i64::try_from(r.to_integer()).ok()
            } else {
                None
            };
            match int_exp {
                Some(k) => {
                    let (num, den) = quotient_split(&fb);
                    if num.is_zero() {
                        // a semantically zero base under a negative power is
                        // formal; leave the original shape alone
                        return if k > 0 { Expr::zero() } else { e.clone() };
                    }
                    let mut fs = Vec::with_capacity(den.len() + 1);
                    match npow(num, Rational::from_integer(k.into())) {
                        Ok(p) => fs.push(p),
                        Err(_) => return e.clone(),
                    }
                    for (bb, kk) in den {
                        fs.push(powi(bb, -(kk as i64) * k));
                    }
                    mul(fs)
                }
                None => npow(fb, r.clone()).unwrap_or_else(|_| e.clone()),
            }
        }
        Expr::Exp(g) => exp_(rational_normal(g)),
        Expr::Ln(g) => Expr::Ln(Box::new(rational_normal(g))),
        Expr::Sin(g) => sin_(rational_normal(g)),
        Expr::Cos(g) => cos_(rational_normal(g)),
        Expr::Prod(fs) => mul(fs.iter().map(rn_flatten).collect()),
        Expr::Sum(ts) => add(ts.iter().map(rn_flatten).collect()),
        other => other.clone(),
    }
}

/// Clears the terms of `e` over their common factored denominator and
/// divides the expanded numerator by each denominator base as far as the
/// division stays exact. Returns the numerator and the surviving
/// denominator factors.
pub(crate) fn quotient_split(e: &Expr) -> (Expr, Vec<(Expr, u64)>) {
    let parsed: Vec<(Rational, MonoKey, MonoKey)> = e.terms().iter().map(split_term_nd).collect();
    let mut den_global: BTreeMap<Expr, u64> = BTreeMap::new();
    for (_, _, den) in &parsed {
        for (b, k) in &den.0 {
            let entry = den_global.entry(b.clone()).or_insert(0);
            *entry = (*entry).max(*k);
        }
    }
    if den_global.is_empty() {
        return (e.clone(), Vec::new());
    }
    // numerator = sum over terms of coeff * num * (den_global / den)
    let mut npoly = Poly::new();
    for (c, num, den) in &parsed {
        let mut p = Poly::new();
        poly_add_term(&mut p, num.clone(), c.clone());
        for (b, k_all) in &den_global {
            let have = den
                .0
                .iter()
                .find(|(bb, _)| bb == b)
                .map(|(_, k)| *k)
                .unwrap_or(0);
            if *k_all == have {
                continue;
            }
            match poly_of_base(b) {
                Some(bp) => {
                    for _ in have..*k_all {
                        p = poly_mul(&p, &bp);
                    }
                }
                None => {
                    // opaque base: multiply in as a single monomial
                    let mono = MonoKey(alloc::vec![(b.clone(), k_all - have)]);
                    let mut q = Poly::new();
                    for (m, cc) in &p {
                        q.insert(m.mul(&mono), cc.clone());
                    }
                    p = q;
                }
            }
        }
        for (m, cc) in p {
            poly_add_term(&mut npoly, m, cc);
        }
    }
    // divide out each base while the division stays exact
    let mut den_left: Vec<(Expr, u64)> = Vec::new();
    for (b, mut k) in den_global {
        if !npoly.is_empty() {
            if let Some(bp) = poly_of_base(&b) {
                while k > 0 {
                    match poly_div_exact(&npoly, &bp) {
                        Some(q) => {
                            npoly = q;
                            k -= 1;
                            if npoly.is_empty() {
                                break;
                            }
                        }
                        None => break,
                    }
                }
            }
        }
        if k > 0 {
            den_left.push((b, k));
        }
    }
    (poly_to_expr(&npoly), den_left)
}

/// Semantic zero test for the rational fragment: normalization plus
/// common-denominator clearing.
pub fn vanishes(e: &Expr) -> bool {
    if e.is_zero() {
        return true;
    }
    rational_normal(e).is_zero()
}

/// Scales every jet atom (both namespaces) by the homotopy parameter.
pub(crate) fn scale_atoms_by_eps(e: &Expr) -> Result<Expr, EngineError> {
    subst_rebuild(e, &mut |x| match x {
        Expr::Jet(a) => Some(mul2(Expr::eps(), Expr::Jet(a.clone()))),
        _ => None,
    })
}
