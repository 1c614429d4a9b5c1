//! Lagrangian workflows: Euler-Lagrange systems, variational symmetries,
//! and the constructive Noether map.
//!
//! A field `X` is a variational symmetry of `L` when `E_a(pr X(L) +
//! L D_i xi^i) = 0` for every dependent variable, which covers the
//! divergence-variational case without hunting for the boundary tuple.
//! Noether's theorem then follows its constructive proof: decompose
//! `pr X(L) + L Div xi` as a divergence `(P^1; P^2)` by the homotopy,
//! integrate and sum `pr(Q d/du)(L)` by parts into `Q * E(L) + Div R`,
//! and assemble `P1 = P^1 - R1 - L xi`, `P2 = P^2 - R2`. The returned
//! law is re-verified exactly; the construction is checked, not trusted.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::calculus::{
    by_parts, divergence, euler_all, null_lagrangian_decompose, total_derivative, ByPartsTerm,
    DivergencePair,
};
use crate::context::{Context, Namespace};
use crate::error::EngineError;
use crate::expr::{add, add2, atoms, mul2, partial_atom, rational_normal, sub, Expr};
use crate::render::render;
use crate::symmetry::{Generator, ProlongationMode, ProlongedField};
use crate::system::{reduce_mod, DDESystem};

/// How a conservation law has been checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verified {
    ExactIdentity,
    OnSolutions,
    Unverified,
}

/// A conservation law in characteristic form: `Div P1 + Div^Delta P2 =
/// sum_a Q^a F_a` (exact identity) or `Div P1 + Div^Delta P2 = 0` on
/// solutions.
#[derive(Debug, Clone)]
pub struct ConservationLaw {
    pub p: DivergencePair,
    pub q: Vec<Expr>,
    pub system: DDESystem,
    pub verified: Verified,
}

/// Which identity `verify_cl` should test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyMode {
    Identity,
    OnSolutions,
}

/// Outcome of `verify_cl`; a failed check carries the normalized residue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClVerdict {
    ExactIdentity,
    OnSolutions,
    Residue(Expr),
}

/// The Euler-Lagrange system `E_a(L) = 0`; solved forms are left for the
/// caller to designate.
pub fn euler_lagrange(ctx: &Context, l: &Expr) -> Result<DDESystem, EngineError> {
    Ok(DDESystem::new(euler_all(ctx, l)?))
}

/// `pr X(L) + L Div xi`, the quantity whose Euler components decide the
/// variational symmetry criterion and whose divergence form feeds Noether.
fn variation_source(ctx: &Context, l: &Expr, x: &Generator) -> Result<Expr, EngineError> {
    let pf = ProlongedField::new(ctx, x, ProlongationMode::Regular)?;
    let mut e = pf.apply(l)?;
    for (i, xie) in pf.xi.iter().enumerate() {
        if xie.is_zero() {
            continue;
        }
        e = add2(e, mul2(l.clone(), total_derivative(ctx, xie, i)?));
    }
    Ok(e)
}

/// Whether `X` is a (possibly divergence) variational symmetry of `L`:
/// `E_a(pr X(L) + L D_i xi^i) = 0` identically for all `a`. Vector fields
/// must be regular.
pub fn is_variational_symmetry(
    ctx: &Context,
    l: &Expr,
    x: &Generator,
) -> Result<bool, EngineError> {
    let src = variation_source(ctx, l, x)?;
    for e in euler_all(ctx, &src)? {
        if !rational_normal(&e).is_zero() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The characteristic of a regular generator.
fn characteristic(ctx: &Context, x: &Generator) -> Result<Vec<Expr>, EngineError> {
    match x {
        Generator::Evolutionary(f) => Ok(f.q.clone()),
        Generator::Vector(v) => Ok(crate::symmetry::to_evolutionary(ctx, v)?.q),
    }
}

/// Noether's theorem: maps a variational symmetry of `L` to a conservation
/// law of the Euler-Lagrange system with the same characteristic. The
/// returned law satisfies `Div P1 + Div^Delta P2 = sum Q^a E_a(L)` as an
/// exact identity, re-checked before returning.
pub fn noether(ctx: &Context, l: &Expr, x: &Generator) -> Result<ConservationLaw, EngineError> {
    if !is_variational_symmetry(ctx, l, x)? {
        return Err(EngineError::NotASymmetry(
            "the field is not a variational symmetry of the Lagrangian".to_string(),
        ));
    }
    let q = characteristic(ctx, x)?;
    let src = variation_source(ctx, l, x)?;
    let hat = null_lagrangian_decompose(ctx, &src)?;

    // pr(Q d/du)(L) = sum over atoms (D S Q^a) dL/da, by parts
    let mut terms = Vec::new();
    for a in atoms(l) {
        if a.namespace != Namespace::Dependent {
            continue;
        }
        let c = partial_atom(l, &a);
        if c.is_zero() {
            continue;
        }
        terms.push(ByPartsTerm {
            coeff: c,
            deriv: a.deriv.clone(),
            shift: a.shift.clone(),
            target: a.dep,
        });
    }
    let parts = by_parts(ctx, &terms, &q)?;

    let xi = match x {
        Generator::Vector(v) => v.xi.clone(),
        Generator::Evolutionary(_) => alloc::vec![Expr::zero(); ctx.p1()],
    };
    let p1: Vec<Expr> = hat
        .p1
        .iter()
        .zip(&parts.flux_d)
        .zip(&xi)
        .map(|((ph, r), xie)| {
            rational_normal(&sub(sub(ph.clone(), r.clone()), mul2(l.clone(), xie.clone())))
        })
        .collect();
    let p2: Vec<Expr> = hat
        .p2
        .iter()
        .zip(&parts.flux_s)
        .map(|(ph, r)| rational_normal(&sub(ph.clone(), r.clone())))
        .collect();
    let p = DivergencePair { p1, p2 };

    let system = euler_lagrange(ctx, l)?;
    let mut rhs = Vec::new();
    for (qa, fa) in q.iter().zip(&system.equations) {
        rhs.push(mul2(qa.clone(), fa.clone()));
    }
    let residue = rational_normal(&sub(divergence(ctx, &p)?, add(rhs)));
    if !residue.is_zero() {
        return Err(EngineError::Shape(format!(
            "noether construction failed to verify; residue {}",
            render(ctx, &residue)
        )));
    }
    Ok(ConservationLaw {
        p,
        q,
        system,
        verified: Verified::ExactIdentity,
    })
}

/// Checks the law: identity mode tests `Div P - sum Q^a F_a = 0` exactly,
/// on-solutions mode tests `reduce_mod(Div P) = 0` over the stored
/// system's solved forms.
pub fn verify_cl(
    ctx: &Context,
    cl: &ConservationLaw,
    mode: VerifyMode,
) -> Result<ClVerdict, EngineError> {
    let div = divergence(ctx, &cl.p)?;
    match mode {
        VerifyMode::Identity => {
            let mut rhs = Vec::new();
            for (qa, fa) in cl.q.iter().zip(&cl.system.equations) {
                rhs.push(mul2(qa.clone(), fa.clone()));
            }
            let r = rational_normal(&sub(div, add(rhs)));
            if r.is_zero() {
                Ok(ClVerdict::ExactIdentity)
            } else {
                Ok(ClVerdict::Residue(r))
            }
        }
        VerifyMode::OnSolutions => {
            let r = rational_normal(&reduce_mod(ctx, &div, &cl.system)?);
            if r.is_zero() {
                Ok(ClVerdict::OnSolutions)
            } else {
                Ok(ClVerdict::Residue(r))
            }
        }
    }
}

/// Whether two flux pairs differ by a trivial conservation law: the
/// divergence of their difference vanishes after reduction (identically,
/// when the system has no solved forms).
pub fn eq_mod_trivial(
    ctx: &Context,
    a: &DivergencePair,
    b: &DivergencePair,
    sys: &DDESystem,
) -> Result<bool, EngineError> {
    let d = DivergencePair {
        p1: a.p1.iter().zip(&b.p1).map(|(x, y)| sub(x.clone(), y.clone())).collect(),
        p2: a.p2.iter().zip(&b.p2).map(|(x, y)| sub(x.clone(), y.clone())).collect(),
    };
    let div = divergence(ctx, &d)?;
    let r = if sys.solved.is_empty() {
        div
    } else {
        reduce_mod(ctx, &div, sys)?
    };
    Ok(rational_normal(&r).is_zero())
}

/// Convenience: a law stated directly as `(P, Q)` against a system,
/// initially unverified.
pub fn stated_cl(p: DivergencePair, q: Vec<Expr>, system: DDESystem) -> ConservationLaw {
    ConservationLaw {
        p,
        q,
        system,
        verified: Verified::Unverified,
    }
}
