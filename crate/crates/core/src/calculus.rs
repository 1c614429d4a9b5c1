//! The differential-difference operator calculus: total derivatives and
//! shifts, Euler operator, Fréchet derivative and its adjoint, divergences,
//! by-parts reduction, and null-Lagrangian decomposition by homotopy.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};

use crate::context::{Context, JetAtom, MultiIndexD, MultiIndexS, Namespace};
use crate::error::EngineError;
use crate::expr::{
    self, add, add2, atoms, cos_, div, exp_, mentions_eps, mul, mul2, neg, partial, partial_atom,
    powi, rational_normal, scale_atoms_by_eps, sin_, sub, subst_param, Coord, Expr,
    Rational,
};
use crate::linsys;

/// A candidate conservation-law pair: `p1` continuous flux components and
/// `p2` discrete ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DivergencePair {
    pub p1: Vec<Expr>,
    pub p2: Vec<Expr>,
}

impl DivergencePair {
    pub fn zero(ctx: &Context) -> Self {
        DivergencePair {
            p1: vec![Expr::zero(); ctx.p1()],
            p2: vec![Expr::zero(); ctx.p2()],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.p1.iter().all(Expr::is_zero) && self.p2.iter().all(Expr::is_zero)
    }
}

/// Total derivative `D_i`: explicit `x^i`-derivative plus promotion of every
/// jet atom one derivative order up in direction `i`.
pub fn total_derivative(ctx: &Context, e: &Expr, i: usize) -> Result<Expr, EngineError> {
    if i >= ctx.p1() {
        return Err(EngineError::NoSuchDirection(format!(
            "continuous direction {i} in a context with p1={}",
            ctx.p1()
        )));
    }
    let mut parts = vec![partial(e, &Coord::Cont(i))];
    for a in atoms(e) {
        let p = partial_atom(e, &a);
        if p.is_zero() {
            continue;
        }
        parts.push(mul2(p, Expr::jet(a.derived(i))));
    }
    Ok(add(parts))
}

/// Single shift `S_d^k`: every jet atom's shift index moves by `k` in
/// direction `d`; explicit `n_d` becomes `n_d + k`; `(-1)^{n_d}` picks up
/// the parity factor `(-1)^k`.
pub fn shift(ctx: &Context, e: &Expr, d: usize, k: i32) -> Result<Expr, EngineError> {
    if d >= ctx.p2() {
        return Err(EngineError::NoSuchDirection(format!(
            "discrete direction {d} in a context with p2={}",
            ctx.p2()
        )));
    }
    if k == 0 {
        return Ok(e.clone());
    }
    expr::subst_rebuild(e, &mut |x| match x {
        Expr::Jet(a) => Some(Expr::jet(a.shifted_one(d, k))),
        Expr::DiscVar(j) if *j == d => Some(add2(Expr::DiscVar(d), Expr::int(i64::from(k)))),
        Expr::AltSign(j) if *j == d => Some(if k.rem_euclid(2) == 0 {
            Expr::AltSign(d)
        } else {
            neg(Expr::AltSign(d))
        }),
        _ => None,
    })
}

/// `D_{J1}`: iterated total derivative over all continuous directions.
pub fn d_multi(ctx: &Context, e: &Expr, j1: &MultiIndexD) -> Result<Expr, EngineError> {
    if j1.len() != ctx.p1() {
        return Err(EngineError::Shape(format!(
            "derivative multi-index arity {} does not match p1={}",
            j1.len(),
            ctx.p1()
        )));
    }
    let mut out = e.clone();
    for (i, &k) in j1.iter().enumerate() {
        for _ in 0..k {
            out = total_derivative(ctx, &out, i)?;
        }
    }
    Ok(out)
}

/// `S_{J2}`: iterated shift over all discrete directions.
pub fn s_multi(ctx: &Context, e: &Expr, j2: &MultiIndexS) -> Result<Expr, EngineError> {
    if j2.len() != ctx.p2() {
        return Err(EngineError::Shape(format!(
            "shift multi-index arity {} does not match p2={}",
            j2.len(),
            ctx.p2()
        )));
    }
    let mut out = e.clone();
    for (d, &k) in j2.iter().enumerate() {
        out = shift(ctx, &out, d, k)?;
    }
    Ok(out)
}

/// `D_{J1} S_{J2}` (the two families commute).
pub fn apply_ds(
    ctx: &Context,
    e: &Expr,
    j1: &MultiIndexD,
    j2: &MultiIndexS,
) -> Result<Expr, EngineError> {
    d_multi(ctx, &s_multi(ctx, e, j2)?, j1)
}

/// `(-D)_{J1} S_{-J2}`: the formal adjoint of `D_{J1} S_{J2}`.
pub fn apply_ds_adjoint(
    ctx: &Context,
    e: &Expr,
    j1: &MultiIndexD,
    j2: &MultiIndexS,
) -> Result<Expr, EngineError> {
    let minus: MultiIndexS = j2.iter().map(|k| -k).collect();
    let shifted = s_multi(ctx, e, &minus)?;
    let derived = d_multi(ctx, &shifted, j1)?;
    let order: u32 = j1.iter().sum();
    Ok(if order.is_multiple_of(2) { derived } else { neg(derived) })
}

/// Euler operator `E_alpha(L) = sum (-D)_{J1} S_{-J2} dL/du^alpha_{J1;J2}`
/// for the variable `(ns, dep)`.
pub fn euler(ctx: &Context, l: &Expr, ns: Namespace, dep: usize) -> Result<Expr, EngineError> {
    let mut parts = Vec::new();
    for a in atoms(l) {
        if a.namespace != ns || a.dep != dep {
            continue;
        }
        let p = partial_atom(l, &a);
        if p.is_zero() {
            continue;
        }
        parts.push(apply_ds_adjoint(ctx, &p, &a.deriv, &a.shift)?);
    }
    Ok(add(parts))
}

/// All Euler components over the dependent variables (namespace `u`).
pub fn euler_all(ctx: &Context, l: &Expr) -> Result<Vec<Expr>, EngineError> {
    (0..ctx.q())
        .map(|alpha| euler(ctx, l, Namespace::Dependent, alpha))
        .collect()
}

/// Fréchet derivative `(D_F Q)_alpha = sum_beta sum_{J}
/// dF_alpha/du^beta_{J1;J2} D_{J1} S_{J2} Q^beta`.
pub fn frechet(ctx: &Context, f: &[Expr], q: &[Expr]) -> Result<Vec<Expr>, EngineError> {
    if q.len() != ctx.q() {
        return Err(EngineError::Shape(format!(
            "characteristic arity {} does not match q={}",
            q.len(),
            ctx.q()
        )));
    }
    let mut out = Vec::with_capacity(f.len());
    for fa in f {
        let mut parts = Vec::new();
        for a in atoms(fa) {
            if a.namespace != Namespace::Dependent {
                continue;
            }
            let p = partial_atom(fa, &a);
            if p.is_zero() {
                continue;
            }
            parts.push(mul2(p, apply_ds(ctx, &q[a.dep], &a.deriv, &a.shift)?));
        }
        out.push(add(parts));
    }
    Ok(out)
}

/// Adjoint Fréchet derivative `(D_F^* W)_alpha = sum_beta sum_{J}
/// (-D)_{J1} S_{-J2} ( dF^beta/du^alpha_{J1;J2} * W^beta )`.
pub fn frechet_adjoint(ctx: &Context, f: &[Expr], w: &[Expr]) -> Result<Vec<Expr>, EngineError> {
    if w.len() != f.len() {
        return Err(EngineError::Shape(format!(
            "cotangent arity {} does not match the number of equations {}",
            w.len(),
            f.len()
        )));
    }
    let mut out = Vec::with_capacity(ctx.q());
    for alpha in 0..ctx.q() {
        let mut parts = Vec::new();
        for (beta, fb) in f.iter().enumerate() {
            for a in atoms(fb) {
                if a.namespace != Namespace::Dependent || a.dep != alpha {
                    continue;
                }
                let p = partial_atom(fb, &a);
                if p.is_zero() {
                    continue;
                }
                let c = mul2(p, w[beta].clone());
                parts.push(apply_ds_adjoint(ctx, &c, &a.deriv, &a.shift)?);
            }
        }
        out.push(add(parts));
    }
    Ok(out)
}

/// `Div P1 + Div^Delta P2 = sum_i D_i P1^i + sum_d (S_d - id) P2^d`.
pub fn divergence(ctx: &Context, p: &DivergencePair) -> Result<Expr, EngineError> {
    if p.p1.len() != ctx.p1() || p.p2.len() != ctx.p2() {
        return Err(EngineError::Shape(format!(
            "divergence pair arity ({}, {}) does not match (p1, p2) = ({}, {})",
            p.p1.len(),
            p.p2.len(),
            ctx.p1(),
            ctx.p2()
        )));
    }
    let mut parts = Vec::new();
    for (i, c) in p.p1.iter().enumerate() {
        parts.push(total_derivative(ctx, c, i)?);
    }
    for (d, c) in p.p2.iter().enumerate() {
        parts.push(sub(shift(ctx, c, d, 1)?, c.clone()));
    }
    Ok(add(parts))
}

/// One summand `coeff * D_{J1} S_{J2} (targets[target])` of a by-parts
/// reduction problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByPartsTerm {
    pub coeff: Expr,
    pub deriv: MultiIndexD,
    pub shift: MultiIndexS,
    pub target: usize,
}

/// Output of `by_parts`: the input rewritten as
/// `sum_alpha characteristic[alpha] * targets[alpha] + Div(flux_d) +
/// Div^Delta(flux_s)`, exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByPartsResult {
    pub characteristic: Vec<Expr>,
    pub flux_d: Vec<Expr>,
    pub flux_s: Vec<Expr>,
}

/// Integrates and sums by parts. Derivative indices are peeled before shift
/// indices, directions in ascending order; this fixes the representative
/// among equivalents differing by trivial conservation laws.
///
/// Steps, for a term `c * D_i(h)`:   `c D_i h = D_i(c h) - D_i(c) h`.
/// For `c * S_d(g)`:                 `c S g = (S - id)(S_{-1}c * g) + S_{-1}c * g`.
/// For `c * S_d^{-1}(g)`:            `c S^{-1} g = (S - id)(-c S^{-1} g) + S(c) g`.
pub fn by_parts(
    ctx: &Context,
    terms: &[ByPartsTerm],
    targets: &[Expr],
) -> Result<ByPartsResult, EngineError> {
    let mut characteristic = vec![Expr::zero(); targets.len()];
    let mut flux_d = vec![Expr::zero(); ctx.p1()];
    let mut flux_s = vec![Expr::zero(); ctx.p2()];
    for term in terms {
        if term.target >= targets.len() {
            return Err(EngineError::Shape(format!(
                "by-parts target index {} out of range",
                term.target
            )));
        }
        let target = &targets[term.target];
        let mut c = term.coeff.clone();
        let mut j1 = term.deriv.clone();
        let mut j2 = term.shift.clone();
        if j1.len() != ctx.p1() || j2.len() != ctx.p2() {
            return Err(EngineError::Shape(
                "by-parts term multi-index arity mismatch".to_string(),
            ));
        }
        for i in 0..ctx.p1() {
            while j1[i] > 0 {
                j1[i] -= 1;
                let inner = apply_ds(ctx, target, &j1, &j2)?;
                flux_d[i] = add2(flux_d[i].clone(), mul2(c.clone(), inner));
                c = neg(total_derivative(ctx, &c, i)?);
            }
        }
        for d in 0..ctx.p2() {
            while j2[d] > 0 {
                j2[d] -= 1;
                let inner = apply_ds(ctx, target, &j1, &j2)?;
                let back = shift(ctx, &c, d, -1)?;
                flux_s[d] = add2(flux_s[d].clone(), mul2(back.clone(), inner));
                c = back;
            }
            while j2[d] < 0 {
                let inner = apply_ds(ctx, target, &j1, &j2)?;
                flux_s[d] = add2(flux_s[d].clone(), neg(mul2(c.clone(), inner)));
                c = shift(ctx, &c, d, 1)?;
                j2[d] += 1;
            }
        }
        characteristic[term.target] = add2(characteristic[term.target].clone(), c);
    }
    Ok(ByPartsResult {
        characteristic,
        flux_d,
        flux_s,
    })
}

/// Re-expands a by-parts result; used to check the reconstruction identity.
pub fn by_parts_reconstruct(
    ctx: &Context,
    r: &ByPartsResult,
    targets: &[Expr],
) -> Result<Expr, EngineError> {
    let mut parts = Vec::new();
    for (c, t) in r.characteristic.iter().zip(targets) {
        parts.push(mul2(c.clone(), t.clone()));
    }
    parts.push(divergence(
        ctx,
        &DivergencePair {
            p1: r.flux_d.clone(),
            p2: r.flux_s.clone(),
        },
    )?);
    Ok(add(parts))
}

// ---------------------------------------------------------------------------
// closed-form integration over the homotopy parameter

fn rat_of_usize(k: usize) -> Rational {
    Rational::from_integer(BigInt::from(k))
}

pub(crate) fn binom(k: usize, j: usize) -> Rational {
    let mut num = BigInt::one();
    let mut den = BigInt::one();
    for t in 0..j {
        num *= BigInt::from(k - t);
        den *= BigInt::from(t + 1);
    }
    Rational::new(num, den)
}

/// Splits `g` as `A + B*eps` with `A`, `B` free of the homotopy parameter;
/// `None` when `g` is not linear in it.
fn linear_in_eps(g: &Expr) -> Option<(Expr, Expr)> {
    let b = partial(g, &Coord::Param(expr::EPS.to_string()));
    if mentions_eps(&b) {
        return None;
    }
    let a = subst_param(g, expr::EPS, &Expr::zero()).ok()?;
    let residual = sub(g.clone(), add2(a.clone(), mul2(b.clone(), Expr::eps())));
    if residual.is_zero() {
        Some((a, b))
    } else {
        None
    }
}

enum TransFactor {
    None,
    Exp { a: Expr, b: Expr },
    Pow { a: Expr, b: Expr, r: Rational },
    Sin { a: Expr, b: Expr },
    Cos { a: Expr, b: Expr },
}

/// `int_0^1 eps^k exp(A + B eps) deps`, exact, `B` structurally nonzero.
fn int_exp(k: usize, a: &Expr, b: &Expr) -> Result<Expr, EngineError> {
    let e_top = exp_(add2(a.clone(), b.clone()));
    if k == 0 {
        return div(sub(e_top, exp_(a.clone())), b.clone());
    }
    let prev = int_exp(k - 1, a, b)?;
    div(
        sub(e_top, mul2(Expr::Num(rat_of_usize(k)), prev)),
        b.clone(),
    )
}

/// `int_0^1 eps^k sin(A + B eps) deps` and the cosine companion.
fn int_sin(k: usize, a: &Expr, b: &Expr) -> Result<Expr, EngineError> {
    let top = add2(a.clone(), b.clone());
    if k == 0 {
        return div(sub(cos_(a.clone()), cos_(top)), b.clone());
    }
    let prev = int_cos(k - 1, a, b)?;
    div(
        add2(neg(cos_(top)), mul2(Expr::Num(rat_of_usize(k)), prev)),
        b.clone(),
    )
}

fn int_cos(k: usize, a: &Expr, b: &Expr) -> Result<Expr, EngineError> {
    let top = add2(a.clone(), b.clone());
    if k == 0 {
        return div(sub(sin_(top), sin_(a.clone())), b.clone());
    }
    let prev = int_sin(k - 1, a, b)?;
    div(
        sub(sin_(top), mul2(Expr::Num(rat_of_usize(k)), prev)),
        b.clone(),
    )
}

/// `int_A^X w^m dw` for rational `m`, `X = A + B`.
fn int_w_power(a: &Expr, x: &Expr, m: Rational) -> Result<Expr, EngineError> {
    let m1 = m + Rational::one();
    if m1.is_zero() {
        let la = crate::expr::ln_(a.clone())?;
        let lx = crate::expr::ln_(x.clone())?;
        return Ok(sub(lx, la));
    }
    let hi = expr::pow(x.clone(), m1.clone())?;
    let lo = expr::pow(a.clone(), m1.clone())?;
    div(sub(hi, lo), Expr::Num(m1))
}

/// Exact `int_0^1 e deps` for the supported fragment: per term, a rational
/// power of eps times at most one eps-linear transcendental factor
/// (`exp`, `sin`, `cos`, or a power of an eps-linear base).
pub(crate) fn integrate_eps(e: &Expr) -> Result<Expr, EngineError> {
    let mut out = Vec::new();
    for term in e.terms() {
        let mut k_pow = Rational::zero();
        let mut rest: Vec<Expr> = Vec::new();
        let mut trans = TransFactor::None;
        let set_trans = |slot: &mut TransFactor, f: TransFactor| -> Result<(), EngineError> {
            if matches!(slot, TransFactor::None) {
                *slot = f;
                Ok(())
            } else {
                Err(EngineError::HomotopyNotClosedForm(
                    "more than one eps-dependent transcendental factor in a term".to_string(),
                ))
            }
        };
        for f in term.factors() {
            if !mentions_eps(f) {
                rest.push(f.clone());
                continue;
            }
            match f {
                Expr::Param(_) => k_pow += Rational::one(),
                Expr::Pow(b, r) if matches!(&**b, Expr::Param(p) if p == expr::EPS) => {
                    k_pow += r.clone();
                }
                Expr::Exp(g) => {
                    let (a, b) = linear_in_eps(g).ok_or_else(|| {
                        EngineError::HomotopyNotClosedForm(
                            "exp argument not linear in the homotopy parameter".to_string(),
                        )
                    })?;
                    match &mut trans {
                        TransFactor::Exp { a: a0, b: b0 } => {
                            *a0 = add2(a0.clone(), a);
                            *b0 = add2(b0.clone(), b);
                        }
                        TransFactor::None => trans = TransFactor::Exp { a, b },
                        _ => {
                            return Err(EngineError::HomotopyNotClosedForm(
                                "mixed transcendental eps factors".to_string(),
                            ))
                        }
                    }
                }
                Expr::Sin(g) => {
                    let (a, b) = linear_in_eps(g).ok_or_else(|| {
                        EngineError::HomotopyNotClosedForm(
                            "sin argument not linear in the homotopy parameter".to_string(),
                        )
                    })?;
                    set_trans(&mut trans, TransFactor::Sin { a, b })?;
                }
                Expr::Cos(g) => {
                    let (a, b) = linear_in_eps(g).ok_or_else(|| {
                        EngineError::HomotopyNotClosedForm(
                            "cos argument not linear in the homotopy parameter".to_string(),
                        )
                    })?;
                    set_trans(&mut trans, TransFactor::Cos { a, b })?;
                }
                Expr::Pow(b, r) => {
                    let (a, bb) = linear_in_eps(b).ok_or_else(|| {
                        EngineError::HomotopyNotClosedForm(
                            "power base not linear in the homotopy parameter".to_string(),
                        )
                    })?;
                    if a.is_zero() {
                        // (B eps)^r = B^r eps^r
                        rest.push(expr::pow(bb, r.clone())?);
                        k_pow += r.clone();
                    } else {
                        set_trans(
                            &mut trans,
                            TransFactor::Pow {
                                a,
                                b: bb,
                                r: r.clone(),
                            },
                        )?;
                    }
                }
                other => {
                    return Err(EngineError::HomotopyNotClosedForm(format!(
                        "unsupported eps-dependent factor of kind {:?}",
                        core::mem::discriminant(other)
                    )))
                }
            }
        }
        let prefactor = mul(rest);
        let integrated = match trans {
            TransFactor::None => {
                // int_0^1 eps^k = 1/(k+1), divergent at the lower end for
                // k <= -1
                let k1 = k_pow + Rational::one();
                if k1.is_positive() {
                    expr::div(Expr::one(), Expr::Num(k1))?
                } else {
                    return Err(EngineError::HomotopyNotClosedForm(
                        "divergent eps power at the base point".to_string(),
                    ));
                }
            }
            other => {
                let Some(k) = nonneg_int(&k_pow) else {
                    return Err(EngineError::HomotopyNotClosedForm(
                        "non-integer eps power against a transcendental factor".to_string(),
                    ));
                };
                match other {
                    TransFactor::Exp { a, b } => {
                        if b.is_zero() {
                            // eps-free after merging; fold back
                            mul2(
                                exp_(a),
                                expr::div(
                                    Expr::one(),
                                    Expr::Num(rat_of_usize(k) + Rational::one()),
                                )?,
                            )
                        } else {
                            int_exp(k, &a, &b).map_err(homotopy_div)?
                        }
                    }
                    TransFactor::Sin { a, b } => int_sin(k, &a, &b).map_err(homotopy_div)?,
                    TransFactor::Cos { a, b } => int_cos(k, &a, &b).map_err(homotopy_div)?,
                    TransFactor::Pow { a, b, r } => {
                        // w = A + B eps:  int_0^1 eps^k (A+B eps)^r
                        //   = B^{-k-1} sum_j C(k,j) (-A)^{k-j} int_A^{A+B} w^{r+j}
                        let x = add2(a.clone(), b.clone());
                        let mut parts = Vec::new();
                        for j in 0..=k {
                            let c = binom(k, j);
                            let apow = powi(neg(a.clone()), (k - j) as i64);
                            let w = int_w_power(&a, &x, r.clone() + rat_of_usize(j))
                                .map_err(homotopy_div)?;
                            parts.push(mul(vec![Expr::Num(c), apow, w]));
                        }
                        let sum = add(parts);
                        let binv = expr::pow(b, -(rat_of_usize(k) + Rational::one()))
                            .map_err(homotopy_div)?;
                        mul2(binv, sum)
                    }
                    TransFactor::None => unreachable!(),
                }
            }
        };
        out.push(mul2(prefactor, integrated));
    }
    let total = add(out);
    if mentions_eps(&total) {
        return Err(EngineError::HomotopyNotClosedForm(
            "residual homotopy parameter after integration".to_string(),
        ));
    }
    Ok(total)
}

fn homotopy_div(e: EngineError) -> EngineError {
    match e {
        EngineError::DivisionByZero => EngineError::HomotopyNotClosedForm(
            "singular integrand (zero structural denominator)".to_string(),
        ),
        other => other,
    }
}

/// `L([0])`, taken as the `eps -> 0` limit of `L([eps u])`. Zeroing atoms
/// outright is singular on rational terms whose numerator vanishes with the
/// atoms; the limit along the scaling path is the value the homotopy needs,
/// and a genuine pole surfaces as a closed-form failure.
fn value_at_zero(l: &Expr) -> Result<Expr, EngineError> {
    let scaled = rational_normal(&scale_atoms_by_eps(l)?);
    subst_param(&scaled, expr::EPS, &Expr::zero()).map_err(homotopy_div)
}

fn nonneg_int(r: &Rational) -> Option<usize> {
    if r.is_integer() && !r.is_negative() {
        usize::try_from(r.to_integer()).ok()
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// absorbing the base-point value L([0])

/// Antiderivative of `e` in the continuous variable `x^i`; supports
/// polynomial (and integer-power) dependence with `x^i`-free coefficients.
fn antiderivative_cont(ctx: &Context, e: &Expr, i: usize) -> Result<Expr, EngineError> {
    let _ = ctx;
    let mut out = Vec::new();
    for term in e.terms() {
        let mut k = Rational::zero();
        let mut rest = Vec::new();
        for f in term.factors() {
            match f {
                Expr::ContVar(j) if *j == i => k += Rational::one(),
                Expr::Pow(b, r) if matches!(&**b, Expr::ContVar(j) if *j == i) => k += r.clone(),
                other => {
                    if expr::mentions_cont_var(other, i) {
                        return Err(EngineError::HomotopyNotClosedForm(format!(
                            "base-point value is not polynomial in continuous variable {i}"
                        )));
                    }
                    rest.push(other.clone());
                }
            }
        }
        let k1 = k + Rational::one();
        let integrated = if k1.is_zero() {
            crate::expr::ln_(Expr::ContVar(i))?
        } else {
            mul2(
                expr::div(Expr::one(), Expr::Num(k1.clone()))?,
                expr::pow(Expr::ContVar(i), k1)?,
            )
        };
        out.push(mul2(mul(rest), integrated));
    }
    Ok(add(out))
}

/// Discrete antidifference in direction `d`: finds `g` with
/// `(S_d - id) g = e` for `e` polynomial in `n_d` with an optional
/// alternating factor, coefficients free of `n_d`.
fn antidifference_disc(ctx: &Context, e: &Expr, d: usize) -> Result<Expr, EngineError> {
    let mut plain: BTreeMap<usize, Vec<Expr>> = BTreeMap::new();
    let mut alt: BTreeMap<usize, Vec<Expr>> = BTreeMap::new();
    for term in e.terms() {
        let mut k = 0usize;
        let mut has_alt = false;
        let mut rest = Vec::new();
        for f in term.factors() {
            match f {
                Expr::DiscVar(j) if *j == d => k += 1,
                Expr::Pow(b, r) if matches!(&**b, Expr::DiscVar(j) if *j == d) => {
                    let kk = nonneg_int(r).ok_or_else(|| {
                        EngineError::HomotopyNotClosedForm(format!(
                            "base-point value is not polynomial in discrete variable {d}"
                        ))
                    })?;
                    k += kk;
                }
                Expr::AltSign(j) if *j == d => has_alt = true,
                other => {
                    if expr::mentions_disc_var(other, d) {
                        return Err(EngineError::HomotopyNotClosedForm(format!(
                            "base-point value is not polynomial in discrete variable {d}"
                        )));
                    }
                    rest.push(other.clone());
                }
            }
        }
        let bucket = if has_alt { &mut alt } else { &mut plain };
        bucket.entry(k).or_default().push(mul(rest));
    }

    let mut parts = Vec::new();
    // plain n^k: g = q(n) with q(n+1) - q(n) = n^k, q in span{n^1..n^{k+1}}
    for (k, coeffs) in plain {
        let coeff = add(coeffs);
        let dim = k + 1;
        // unknowns c_1..c_{k+1}; row m: coefficient of n^m in q(n+1)-q(n)
        let mut mat = vec![vec![Rational::zero(); dim]; k + 1];
        for (col, j) in (1..=dim).enumerate() {
            // (n+1)^j - n^j = sum_{m<j} C(j,m) n^m
            for (m, row) in mat.iter_mut().enumerate().take(j) {
                row[col] = binom(j, m);
            }
        }
        let mut rhs = vec![Rational::zero(); k + 1];
        rhs[k] = Rational::one();
        let sol = linsys::solve(mat, rhs).ok_or_else(|| {
            EngineError::HomotopyNotClosedForm("polynomial antidifference failed".to_string())
        })?;
        let mut q = Vec::new();
        for (col, j) in (1..=dim).enumerate() {
            let c = sol.particular[col].clone();
            if c.is_zero() {
                continue;
            }
            q.push(mul2(Expr::Num(c), powi(Expr::DiscVar(d), j as i64)));
        }
        parts.push(mul2(coeff, add(q)));
    }
    // (-1)^n n^k: g = (-1)^n q(n) with -q(n+1) - q(n) = n^k, q degree k
    for (k, coeffs) in alt {
        let coeff = add(coeffs);
        let dim = k + 1;
        let mut mat = vec![vec![Rational::zero(); dim]; k + 1];
        for (col, j) in (0..dim).enumerate() {
            // -(n+1)^j - n^j = -sum_m C(j,m) n^m - n^j
            for (m, row) in mat.iter_mut().enumerate().take(j + 1) {
                row[col] = -binom(j, m);
                if m == j {
                    row[col] -= Rational::one();
                }
            }
        }
        let mut rhs = vec![Rational::zero(); k + 1];
        rhs[k] = Rational::one();
        let sol = linsys::solve(mat, rhs).ok_or_else(|| {
            EngineError::HomotopyNotClosedForm("alternating antidifference failed".to_string())
        })?;
        let mut q = Vec::new();
        for (col, j) in (0..dim).enumerate() {
            let c = sol.particular[col].clone();
            if c.is_zero() {
                continue;
            }
            q.push(mul2(Expr::Num(c), powi(Expr::DiscVar(d), j as i64)));
        }
        parts.push(mul(vec![coeff, Expr::AltSign(d), add(q)]));
    }
    let g = add(parts);
    // confirm (S - id) g = e exactly
    let check = sub(shift(ctx, &g, d, 1)?, g.clone());
    if !sub(check, e.clone()).is_zero() {
        return Err(EngineError::HomotopyNotClosedForm(
            "antidifference verification failed".to_string(),
        ));
    }
    Ok(g)
}

/// Null-Lagrangian decomposition by the homotopy construction. Requires
/// every Euler component (dependent and auxiliary) to vanish identically;
/// then `divergence(result) = L` exactly.
pub fn null_lagrangian_decompose(
    ctx: &Context,
    l: &Expr,
) -> Result<DivergencePair, EngineError> {
    // which variables actually occur
    let occurring: Vec<(Namespace, usize)> = {
        let mut seen = alloc::collections::BTreeSet::new();
        for a in atoms(l) {
            seen.insert((a.namespace, a.dep));
        }
        seen.into_iter().collect()
    };
    for &(ns, dep) in &occurring {
        let e = euler(ctx, l, ns, dep)?;
        if !e.is_zero() {
            return Err(EngineError::NotNull(format!(
                "Euler component for {} is nonzero",
                ctx.var_name(ns, dep)
            )));
        }
    }

    // d/deps L([eps u]) = sum over atoms a of a * (dL/da)([eps u]);
    // by parts against the base variables, the characteristic part is
    // E([eps u]) = 0, leaving pure fluxes.
    let targets: Vec<Expr> = occurring
        .iter()
        .map(|&(ns, dep)| {
            Expr::jet(JetAtom {
                namespace: ns,
                dep,
                deriv: vec![0; ctx.p1()],
                shift: vec![0; ctx.p2()],
            })
        })
        .collect();
    let index_of = |ns: Namespace, dep: usize| -> usize {
        occurring
            .iter()
            .position(|&(n, d)| n == ns && d == dep)
            .expect("atom variable listed")
    };
    let mut terms = Vec::new();
    for a in atoms(l) {
        let p = partial_atom(l, &a);
        if p.is_zero() {
            continue;
        }
        terms.push(ByPartsTerm {
            coeff: scale_atoms_by_eps(&p)?,
            deriv: a.deriv.clone(),
            shift: a.shift.clone(),
            target: index_of(a.namespace, a.dep),
        });
    }
    let reduced = by_parts(ctx, &terms, &targets)?;
    debug_assert!(
        reduced.characteristic.iter().all(Expr::is_zero),
        "characteristic of a null Lagrangian homotopy must vanish"
    );

    let mut p1 = Vec::with_capacity(ctx.p1());
    for f in &reduced.flux_d {
        p1.push(integrate_eps(f)?);
    }
    let mut p2 = Vec::with_capacity(ctx.p2());
    for f in &reduced.flux_s {
        p2.push(integrate_eps(f)?);
    }

    // base-point value L([0]) is itself a divergence in the explicit
    // variables; absorb it into the first available direction
    let l0 = value_at_zero(l)?;
    if !l0.is_zero() {
        if ctx.p1() > 0 {
            p1[0] = add2(p1[0].clone(), antiderivative_cont(ctx, &l0, 0)?);
        } else if ctx.p2() > 0 {
            p2[0] = add2(p2[0].clone(), antidifference_disc(ctx, &l0, 0)?);
        } else {
            return Err(EngineError::Shape(
                "cannot absorb a constant with no independent variables".to_string(),
            ));
        }
    }
    // per-term integration distributes rational structure; fold it back
    let p1 = p1.iter().map(rational_normal).collect();
    let p2 = p2.iter().map(rational_normal).collect();
    Ok(DivergencePair { p1, p2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Context;
    use alloc::string::String;

    fn ctx11() -> Context {
        Context {
            continuous: vec![String::from("t")],
            discrete: vec![String::from("n")],
            dependent: vec![String::from("u")],
            auxiliary: vec![String::from("v")],
            parameters: vec![],
            functions: vec![],
        }
    }

    fn u_jet(deriv: u32, shift: i32) -> Expr {
        Expr::jet(JetAtom {
            namespace: Namespace::Dependent,
            dep: 0,
            deriv: vec![deriv],
            shift: vec![shift],
        })
    }

    fn v_aux(deriv: u32, shift: i32) -> Expr {
        Expr::jet(JetAtom {
            namespace: Namespace::Auxiliary,
            dep: 0,
            deriv: vec![deriv],
            shift: vec![shift],
        })
    }

    fn volterra(ctx: &Context) -> Expr {
        let _ = ctx;
        add(vec![
            div(u_jet(1, 0), u_jet(0, 0)).unwrap(),
            neg(u_jet(0, 1)),
            u_jet(0, -1),
        ])
    }

    #[test]
    fn total_derivative_leibniz() {
        let ctx = ctx11();
        let e = mul2(u_jet(0, 0), u_jet(0, 1));
        let d = total_derivative(&ctx, &e, 0).unwrap();
        let expect = add2(
            mul2(u_jet(1, 0), u_jet(0, 1)),
            mul2(u_jet(0, 0), u_jet(1, 1)),
        );
        assert_eq!(d, expect);
    }

    #[test]
    fn total_derivative_explicit_time() {
        let ctx = ctx11();
        let e = mul2(Expr::ContVar(0), u_jet(1, 0));
        let d = total_derivative(&ctx, &e, 0).unwrap();
        let expect = add2(u_jet(1, 0), mul2(Expr::ContVar(0), u_jet(2, 0)));
        assert_eq!(d, expect);
    }

    #[test]
    fn total_derivative_kdv_cubic_term() {
        // p1=2 (t, x), p2=0, dependent v; D_x(v_x^3/6) = v_x^2 v_xx / 2
        let ctx = Context {
            continuous: vec![String::from("t"), String::from("x")],
            dependent: vec![String::from("v")],
            ..Context::default()
        };
        let vx = Expr::jet(JetAtom {
            namespace: Namespace::Dependent,
            dep: 0,
            deriv: vec![0, 1],
            shift: vec![],
        });
        let vxx = Expr::jet(JetAtom {
            namespace: Namespace::Dependent,
            dep: 0,
            deriv: vec![0, 2],
            shift: vec![],
        });
        let e = mul2(Expr::rat(1, 6), powi(vx.clone(), 3));
        let d = total_derivative(&ctx, &e, 1).unwrap();
        assert_eq!(d, mul(vec![Expr::rat(1, 2), powi(vx, 2), vxx]));
    }

    #[test]
    fn shift_examples() {
        let ctx = ctx11();
        // S_n(u u_-1) = u_1 u
        let e = mul2(u_jet(0, 0), u_jet(0, -1));
        assert_eq!(
            shift(&ctx, &e, 0, 1).unwrap(),
            mul2(u_jet(0, 1), u_jet(0, 0))
        );
        // S_n((-1)^n u) = -(-1)^n u_1
        let e2 = mul2(Expr::AltSign(0), u_jet(0, 0));
        assert_eq!(
            shift(&ctx, &e2, 0, 1).unwrap(),
            neg(mul2(Expr::AltSign(0), u_jet(0, 1)))
        );
        // S_n(b + c n) = b + c (n + 1)
        let b = Expr::param("b");
        let c = Expr::param("c");
        let e3 = add2(b.clone(), mul2(c.clone(), Expr::DiscVar(0)));
        let expect = add2(
            b,
            mul2(c, add2(Expr::DiscVar(0), Expr::one())),
        );
        assert_eq!(
            shift(&ctx, &e3, 0, 1).unwrap(),
            crate::expr::normalize(&expect).unwrap()
        );
    }

    #[test]
    fn shift_derivative_commute() {
        let ctx = ctx11();
        let e = add2(
            mul2(exp_(sub(u_jet(0, 0), u_jet(0, 1))), u_jet(1, -1)),
            powi(u_jet(2, 2), 2),
        );
        let a = shift(&ctx, &total_derivative(&ctx, &e, 0).unwrap(), 0, 1).unwrap();
        let b = total_derivative(&ctx, &shift(&ctx, &e, 0, 1).unwrap(), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn euler_toda() {
        let ctx = ctx11();
        // L = -u'^2/2 + exp(u - u_1)
        let l = add2(
            mul2(Expr::rat(-1, 2), powi(u_jet(1, 0), 2)),
            exp_(sub(u_jet(0, 0), u_jet(0, 1))),
        );
        let e = euler(&ctx, &l, Namespace::Dependent, 0).unwrap();
        let expect = add(vec![
            u_jet(2, 0),
            exp_(sub(u_jet(0, 0), u_jet(0, 1))),
            neg(exp_(sub(u_jet(0, -1), u_jet(0, 0)))),
        ]);
        assert_eq!(e, expect);
    }

    #[test]
    fn euler_transformed_volterra_lagrangian() {
        // dependent named v here; L = v (v_1' - v') + exp(v_2 - v)
        let ctx = Context {
            continuous: vec![String::from("t")],
            discrete: vec![String::from("n")],
            dependent: vec![String::from("v")],
            ..Context::default()
        };
        let l = add2(
            mul2(u_jet(0, 0), sub(u_jet(1, 1), u_jet(1, 0))),
            exp_(sub(u_jet(0, 2), u_jet(0, 0))),
        );
        let e = euler(&ctx, &l, Namespace::Dependent, 0).unwrap();
        let expect = add(vec![
            u_jet(1, 1),
            neg(u_jet(1, -1)),
            neg(exp_(sub(u_jet(0, 2), u_jet(0, 0)))),
            exp_(sub(u_jet(0, 0), u_jet(0, -2))),
        ]);
        assert_eq!(e, expect);
    }

    #[test]
    fn euler_annihilates_divergence() {
        let ctx = ctx11();
        let l = add2(
            total_derivative(&ctx, &powi(u_jet(0, 0), 2), 0).unwrap(),
            sub(
                shift(&ctx, &mul2(u_jet(0, 0), u_jet(0, -1)), 0, 1).unwrap(),
                mul2(u_jet(0, 0), u_jet(0, -1)),
            ),
        );
        assert!(euler(&ctx, &l, Namespace::Dependent, 0).unwrap().is_zero());
    }

    #[test]
    fn frechet_volterra() {
        let ctx = ctx11();
        let f = vec![volterra(&ctx)];
        let q = vec![u_jet(0, 0)];
        let r = frechet(&ctx, &f, &q).unwrap();
        assert_eq!(r[0], sub(u_jet(0, -1), u_jet(0, 1)));
        // F = (u'): frechet is D_t
        let f2 = vec![u_jet(1, 0)];
        let q2 = vec![mul2(u_jet(0, 0), u_jet(0, 1))];
        let r2 = frechet(&ctx, &f2, &q2).unwrap();
        assert_eq!(r2[0], total_derivative(&ctx, &q2[0], 0).unwrap());
    }

    #[test]
    fn frechet_adjoint_volterra() {
        let ctx = ctx11();
        let f = vec![volterra(&ctx)];
        let w = vec![v_aux(0, 0)];
        let r = frechet_adjoint(&ctx, &f, &w).unwrap();
        let expect = add(vec![
            neg(div(v_aux(1, 0), u_jet(0, 0)).unwrap()),
            v_aux(0, 1),
            neg(v_aux(0, -1)),
        ]);
        assert_eq!(r[0], expect);
        // adjoint of D_t is -D_t
        let f2 = vec![u_jet(1, 0)];
        let r2 = frechet_adjoint(&ctx, &f2, &w).unwrap();
        assert_eq!(r2[0], neg(v_aux(1, 0)));
    }

    #[test]
    fn divergence_examples() {
        let ctx = ctx11();
        let p = DivergencePair {
            p1: vec![u_jet(0, 0)],
            p2: vec![neg(mul2(u_jet(0, 0), u_jet(0, -1)))],
        };
        let d = divergence(&ctx, &p).unwrap();
        let expect = add(vec![
            u_jet(1, 0),
            neg(mul2(u_jet(0, 0), u_jet(0, 1))),
            mul2(u_jet(0, 0), u_jet(0, -1)),
        ]);
        assert_eq!(d, expect);

        let p2 = DivergencePair {
            p1: vec![u_jet(1, 0)],
            p2: vec![exp_(sub(u_jet(0, -1), u_jet(0, 0)))],
        };
        let d2 = divergence(&ctx, &p2).unwrap();
        let expect2 = add(vec![
            u_jet(2, 0),
            exp_(sub(u_jet(0, 0), u_jet(0, 1))),
            neg(exp_(sub(u_jet(0, -1), u_jet(0, 0)))),
        ]);
        assert_eq!(d2, expect2);
    }

    #[test]
    fn by_parts_single_steps() {
        let ctx = ctx11();
        let f = volterra(&ctx);
        // c=v, one derivative: characteristic -v', flux_d = v F
        let r = by_parts(
            &ctx,
            &[ByPartsTerm {
                coeff: v_aux(0, 0),
                deriv: vec![1],
                shift: vec![0],
                target: 0,
            }],
            core::slice::from_ref(&f),
        )
        .unwrap();
        assert_eq!(r.characteristic[0], neg(v_aux(1, 0)));
        assert_eq!(r.flux_d[0], mul2(v_aux(0, 0), f.clone()));
        assert!(r.flux_s[0].is_zero());

        // c=v, one shift: characteristic v_-1, flux_s = v_-1 F
        let r2 = by_parts(
            &ctx,
            &[ByPartsTerm {
                coeff: v_aux(0, 0),
                deriv: vec![0],
                shift: vec![1],
                target: 0,
            }],
            core::slice::from_ref(&f),
        )
        .unwrap();
        assert_eq!(r2.characteristic[0], v_aux(0, -1));
        assert_eq!(r2.flux_s[0], mul2(v_aux(0, -1), f.clone()));

        // mixed: characteristic -S_{-1}(v')
        let r3 = by_parts(
            &ctx,
            &[ByPartsTerm {
                coeff: v_aux(0, 0),
                deriv: vec![1],
                shift: vec![1],
                target: 0,
            }],
            core::slice::from_ref(&f),
        )
        .unwrap();
        assert_eq!(r3.characteristic[0], neg(v_aux(1, -1)));
        // reconstruction: input was v * D S F
        let input = mul2(
            v_aux(0, 0),
            apply_ds(&ctx, &f, &vec![1], &vec![1]).unwrap(),
        );
        let back = by_parts_reconstruct(&ctx, &r3, core::slice::from_ref(&f)).unwrap();
        assert!(sub(input, back).is_zero());
    }

    #[test]
    fn by_parts_negative_shift() {
        let ctx = ctx11();
        let f = volterra(&ctx);
        let r = by_parts(
            &ctx,
            &[ByPartsTerm {
                coeff: v_aux(0, 0),
                deriv: vec![0],
                shift: vec![-2],
                target: 0,
            }],
            core::slice::from_ref(&f),
        )
        .unwrap();
        assert_eq!(r.characteristic[0], v_aux(0, 2));
        let input = mul2(
            v_aux(0, 0),
            apply_ds(&ctx, &f, &vec![0], &vec![-2]).unwrap(),
        );
        let back = by_parts_reconstruct(&ctx, &r, core::slice::from_ref(&f)).unwrap();
        assert!(sub(input, back).is_zero());
    }

    #[test]
    fn integrate_eps_closed_forms() {
        // int eps^2 = 1/3
        let e = powi(Expr::eps(), 2);
        assert_eq!(integrate_eps(&e).unwrap(), Expr::rat(1, 3));
        // int cos(eps u) = sin(u)/u
        let e2 = cos_(mul2(Expr::eps(), u_jet(0, 0)));
        let expect = div(sin_(u_jet(0, 0)), u_jet(0, 0)).unwrap();
        assert!(sub(integrate_eps(&e2).unwrap(), expect).is_zero());
        // int (1 + eps u)^-2 = (1 - (1+u)^-1)/u
        let base = add2(Expr::one(), mul2(Expr::eps(), u_jet(0, 0)));
        let e3 = powi(base, -2);
        let expect3 = div(
            sub(Expr::one(), powi(add2(Expr::one(), u_jet(0, 0)), -1)),
            u_jet(0, 0),
        )
        .unwrap();
        assert!(sub(integrate_eps(&e3).unwrap(), expect3).is_zero());
        // int exp(u + eps u_1) eps = e^{u+u_1}/u_1 - (e^{u+u_1}-e^u)/u_1^2
        let e4 = mul2(
            Expr::eps(),
            exp_(add2(u_jet(0, 0), mul2(Expr::eps(), u_jet(0, 1)))),
        );
        let top = exp_(add2(u_jet(0, 0), u_jet(0, 1)));
        let expect4 = sub(
            div(top.clone(), u_jet(0, 1)).unwrap(),
            div(sub(top, exp_(u_jet(0, 0))), powi(u_jet(0, 1), 2)).unwrap(),
        );
        assert!(sub(integrate_eps(&e4).unwrap(), expect4).is_zero());
        // divergent: int eps^-1 fails
        assert!(matches!(
            integrate_eps(&powi(Expr::eps(), -1)),
            Err(EngineError::HomotopyNotClosedForm(_))
        ));
    }

    #[test]
    fn null_decompose_simple() {
        let ctx = ctx11();
        // L = u' -> P1 = (u)
        let p = null_lagrangian_decompose(&ctx, &u_jet(1, 0)).unwrap();
        assert_eq!(p.p1[0], u_jet(0, 0));
        assert!(p.p2[0].is_zero());
    }

    #[test]
    fn null_decompose_discrete_pair() {
        let ctx = ctx11();
        // L = u_1 u_1' - u u' is (S - id)(u u')
        let l = sub(
            mul2(u_jet(0, 1), u_jet(1, 1)),
            mul2(u_jet(0, 0), u_jet(1, 0)),
        );
        let p = null_lagrangian_decompose(&ctx, &l).unwrap();
        let back = divergence(&ctx, &p).unwrap();
        assert!(sub(back, l).is_zero());
    }

    #[test]
    fn null_decompose_rejects_non_null() {
        let ctx = ctx11();
        let l = mul2(u_jet(0, 0), u_jet(0, 1));
        assert!(matches!(
            null_lagrangian_decompose(&ctx, &l),
            Err(EngineError::NotNull(_))
        ));
    }

    #[test]
    fn null_decompose_absorbs_base_point() {
        let ctx = ctx11();
        // L = u' + 1: P1 = u + t
        let l = add2(u_jet(1, 0), Expr::one());
        let p = null_lagrangian_decompose(&ctx, &l).unwrap();
        let back = divergence(&ctx, &p).unwrap();
        assert!(sub(back, l).is_zero());

        // pure-difference case with alternating constant
        let ctx0 = Context {
            discrete: vec![String::from("n")],
            dependent: vec![String::from("u")],
            ..Context::default()
        };
        let u0 = Expr::jet(JetAtom {
            namespace: Namespace::Dependent,
            dep: 0,
            deriv: vec![],
            shift: vec![0],
        });
        let u1 = Expr::jet(JetAtom {
            namespace: Namespace::Dependent,
            dep: 0,
            deriv: vec![],
            shift: vec![1],
        });
        let l0 = add(vec![
            sub(u1, u0),
            Expr::AltSign(0),
            Expr::DiscVar(0),
            Expr::int(3),
        ]);
        let p0 = null_lagrangian_decompose(&ctx0, &l0).unwrap();
        let back0 = divergence(&ctx0, &p0).unwrap();
        assert!(sub(back0, l0).is_zero());
    }

    #[test]
    fn exp_lagrangian_homotopy() {
        let ctx = ctx11();
        // L = divergence of (0; exp(u_{-1} - u)) has an exp base point
        let flux = exp_(sub(u_jet(0, -1), u_jet(0, 0)));
        let l = sub(shift(&ctx, &flux, 0, 1).unwrap(), flux.clone());
        let p = null_lagrangian_decompose(&ctx, &l).unwrap();
        let back = divergence(&ctx, &p).unwrap();
        assert!(sub(back, l).is_zero());
    }
}

