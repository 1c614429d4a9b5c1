//! Adjoint systems and self-adjointness through formal Lagrangians.
//!
//! A system with no variational structure still embeds into one: pair each
//! equation with an auxiliary variable and take `L = sum_alpha v^alpha
//! F_alpha` over the doubled variable set. The original equations return as
//! the `v`-Euler components of `L`; the `u`-Euler components form the
//! adjoint system. When a substitution `v = f(x, n, [u])` makes every
//! adjoint equation vanish on solutions, the system is called self-adjoint
//! (strictly for `f = u`, quasi for `f = f([u])`, weakly otherwise), and
//! every regular symmetry then yields a conservation law of the original
//! system with no Lagrangian in sight.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::calculus::{
    apply_ds, apply_ds_adjoint, by_parts, divergence, euler, null_lagrangian_decompose,
    ByPartsTerm, DivergencePair,
};
use crate::context::{Context, JetAtom, Namespace};
use crate::error::EngineError;
use crate::expr::{
    add, atoms, mentions_namespace, mul2, partial_atom, rational_normal, sub, substitute,
    vanishes, Expr,
};
use crate::render::render;
use crate::symmetry::{
    decompose_symmetry, express_in_system, fresh_name, to_evolutionary, EvolutionaryField,
    ExpressOutcome, Generator, ProlongationMode, ProlongedField,
};
use crate::system::{reduce_mod, DDESystem};
use crate::variational::{ConservationLaw, Verified};

/// `L = sum_alpha v^alpha F_alpha` over the doubled variable set. `ctx`
/// extends the origin system's context with one auxiliary variable per
/// equation; the adjoint system, substitutions, and extended characteristics
/// all live in this context.
#[derive(Debug, Clone)]
pub struct FormalLagrangian {
    pub ctx: Context,
    pub l: Expr,
    pub origin: DDESystem,
}

/// Builds the formal Lagrangian, introducing fresh auxiliary variables
/// (named `v`, `v2`, ...) as needed. The `v`-Euler components of the result
/// reproduce the equations, so nothing is lost in the embedding.
pub fn formal_lagrangian(ctx: &Context, sys: &DDESystem) -> Result<FormalLagrangian, EngineError> {
    if sys.equations.is_empty() {
        return Err(EngineError::Shape(
            "formal Lagrangian needs at least one equation".to_string(),
        ));
    }
    if ctx.auxiliary.len() > sys.equations.len() {
        return Err(EngineError::Shape(format!(
            "context declares {} auxiliary variables but the system has only {} equations",
            ctx.auxiliary.len(),
            sys.equations.len()
        )));
    }
    for f in &sys.equations {
        if mentions_namespace(f, Namespace::Auxiliary) {
            return Err(EngineError::Shape(
                "equations must not mention auxiliary atoms".to_string(),
            ));
        }
    }
    let mut ctx2 = ctx.clone();
    while ctx2.auxiliary.len() < sys.equations.len() {
        let name = fresh_name(&ctx2, "v");
        ctx2.auxiliary.push(name);
    }
    ctx2.validate()?;
    let mut parts = Vec::with_capacity(sys.equations.len());
    for (alpha, f) in sys.equations.iter().enumerate() {
        let v = Expr::jet(JetAtom::base(Namespace::Auxiliary, alpha, ctx2.p1(), ctx2.p2()));
        parts.push(mul2(v, f.clone()));
    }
    Ok(FormalLagrangian {
        ctx: ctx2,
        l: add(parts),
        origin: sys.clone(),
    })
}

/// `F*_alpha = E_{u^alpha}(v^beta F_beta)`, one component per dependent
/// variable. Coincides with the adjoint Frechet derivative of the system
/// paired with `v`.
pub fn adjoint_system(fl: &FormalLagrangian) -> Result<Vec<Expr>, EngineError> {
    (0..fl.ctx.q())
        .map(|alpha| Ok(rational_normal(&euler(&fl.ctx, &fl.l, Namespace::Dependent, alpha)?)))
        .collect()
}

/// `v^alpha -> bindings[alpha]`, functions of the base variables and the
/// `u`-jets only. Shifted and derived `v` atoms follow the prolonged closure
/// `v^alpha_{J1;J2} -> D_{J1} S_{J2} bindings[alpha]`, which is what makes
/// substitution commute with the total operators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Substitution {
    pub bindings: Vec<Expr>,
}

impl Substitution {
    pub fn new(ctx: &Context, bindings: Vec<Expr>) -> Result<Self, EngineError> {
        if bindings.len() != ctx.auxiliary.len() {
            return Err(EngineError::Shape(format!(
                "substitution has {} bindings for {} auxiliary variables",
                bindings.len(),
                ctx.auxiliary.len()
            )));
        }
        for b in &bindings {
            if mentions_namespace(b, Namespace::Auxiliary) {
                return Err(EngineError::Shape(
                    "substitution bindings must not mention auxiliary atoms".to_string(),
                ));
            }
        }
        Ok(Substitution { bindings })
    }
}

/// Applies a substitution to every auxiliary atom of `e` through the
/// prolonged closure.
pub fn apply_substitution(
    ctx: &Context,
    e: &Expr,
    s: &Substitution,
) -> Result<Expr, EngineError> {
    let mut map = BTreeMap::new();
    for a in atoms(e) {
        if a.namespace != Namespace::Auxiliary {
            continue;
        }
        if a.dep >= s.bindings.len() {
            return Err(EngineError::Shape(format!(
                "auxiliary variable index {} has no binding",
                a.dep
            )));
        }
        map.insert(a.clone(), apply_ds(ctx, &s.bindings[a.dep], &a.deriv, &a.shift)?);
    }
    if map.is_empty() {
        return Ok(e.clone());
    }
    substitute(e, &map)
}

/// How a witnessing substitution depends on its arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfAdjointness {
    /// `v^alpha = u^alpha`.
    Strict,
    /// `v = f([u])` with no explicit base-variable dependence.
    Quasi,
    /// `v = f(x, n, [u])`.
    Weak,
}

impl fmt::Display for SelfAdjointness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelfAdjointness::Strict => write!(f, "strict"),
            SelfAdjointness::Quasi => write!(f, "quasi"),
            SelfAdjointness::Weak => write!(f, "weak"),
        }
    }
}

/// Verdict of `check_self_adjoint`: either the substitution witnesses
/// self-adjointness (classified by its shape) or the reduced residues of
/// the substituted adjoint system are returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdjointVerdict {
    SelfAdjoint(SelfAdjointness),
    No(Vec<Expr>),
}

/// Substitutes `v = f` into the adjoint system and reduces modulo the
/// original system. The verdict is affirmative exactly when every component
/// reduces to zero.
pub fn check_self_adjoint(
    fl: &FormalLagrangian,
    s: &Substitution,
) -> Result<AdjointVerdict, EngineError> {
    if fl.origin.solved.is_empty() {
        return Err(EngineError::Shape(
            "self-adjointness reduction requires a system with solved forms".to_string(),
        ));
    }
    let fstar = adjoint_system(fl)?;
    let mut residues = Vec::with_capacity(fstar.len());
    let mut all_zero = true;
    for e in &fstar {
        let subbed = apply_substitution(&fl.ctx, e, s)?;
        let r = rational_normal(&reduce_mod(&fl.ctx, &subbed, &fl.origin)?);
        if !r.is_zero() {
            all_zero = false;
        }
        residues.push(r);
    }
    if all_zero {
        Ok(AdjointVerdict::SelfAdjoint(classify(&fl.ctx, s)))
    } else {
        Ok(AdjointVerdict::No(residues))
    }
}

fn classify(ctx: &Context, s: &Substitution) -> SelfAdjointness {
    let strict = s.bindings.len() == ctx.q()
        && s.bindings.iter().enumerate().all(|(alpha, b)| {
            let u = Expr::jet(JetAtom::base(Namespace::Dependent, alpha, ctx.p1(), ctx.p2()));
            vanishes(&sub(b.clone(), u))
        });
    if strict {
        return SelfAdjointness::Strict;
    }
    if s.bindings.iter().any(mentions_explicit_site) {
        SelfAdjointness::Weak
    } else {
        SelfAdjointness::Quasi
    }
}

/// Whether the expression depends explicitly on a base variable (through a
/// coordinate, a lattice parity, or a declared function of coordinates).
fn mentions_explicit_site(e: &Expr) -> bool {
    match e {
        Expr::ContVar(_) | Expr::DiscVar(_) | Expr::AltSign(_) | Expr::Func(_) => true,
        Expr::Num(_) | Expr::Param(_) | Expr::Jet(_) => false,
        Expr::Pow(b, _) | Expr::Exp(b) | Expr::Ln(b) | Expr::Sin(b) | Expr::Cos(b) => {
            mentions_explicit_site(b)
        }
        Expr::Prod(ts) | Expr::Sum(ts) => ts.iter().any(mentions_explicit_site),
    }
}

fn characteristic_of(ctx: &Context, x: &Generator) -> Result<Vec<Expr>, EngineError> {
    match x {
        Generator::Evolutionary(f) => {
            if f.q.len() != ctx.q() {
                return Err(EngineError::Shape(format!(
                    "evolutionary field has {} components; the context needs {}",
                    f.q.len(),
                    ctx.q()
                )));
            }
            Ok(f.q.clone())
        }
        Generator::Vector(v) => Ok(to_evolutionary(ctx, v)?.q),
    }
}

/// The auxiliary half of the extended characteristic induced by a symmetry
/// of the origin system: with `pr X_Q (F_alpha) = sum K^beta_{alpha;J1,J2}
/// D_{J1} S_{J2} F_beta`,
///
/// `Q*^beta = - sum_{alpha,J1,J2} (-D)_{J1} S_{-J2} (v^alpha K^beta_{alpha;J1,J2})`.
///
/// The pair `(Q, Q*)` is then an evolutionary variational symmetry of the
/// formal Lagrangian. The decomposition is taken in the evolutionary
/// representative; the coefficients of a vector field's own prolongation
/// would extend to a field that fails the variational property.
pub fn extend_characteristic(
    fl: &FormalLagrangian,
    x: &Generator,
) -> Result<Vec<Expr>, EngineError> {
    let qu = characteristic_of(&fl.ctx, x)?;
    let ev = Generator::Evolutionary(EvolutionaryField { q: qu });
    let dec = decompose_symmetry(&fl.ctx, &fl.origin, &ev, ProlongationMode::Regular)?;
    let mut qstar = vec![Expr::zero(); fl.origin.equations.len()];
    for (alpha, row) in dec.rows.iter().enumerate() {
        let v = Expr::jet(JetAtom::base(Namespace::Auxiliary, alpha, fl.ctx.p1(), fl.ctx.p2()));
        for t in row {
            let adj =
                apply_ds_adjoint(&fl.ctx, &mul2(v.clone(), t.coeff.clone()), &t.j1, &t.j2)?;
            qstar[t.eq] = sub(qstar[t.eq].clone(), adj);
        }
    }
    Ok(qstar.iter().map(rational_normal).collect())
}

/// `pr Y (e)` for the evolutionary field acting as `qu` on the dependent
/// and `qv` on the auxiliary variables.
fn prolong_joint(
    ctx: &Context,
    qu: &[Expr],
    qv: &[Expr],
    e: &Expr,
) -> Result<Expr, EngineError> {
    let mut parts = Vec::new();
    for a in atoms(e) {
        let src = match a.namespace {
            Namespace::Dependent => &qu[a.dep],
            Namespace::Auxiliary => &qv[a.dep],
        };
        let p = partial_atom(e, &a);
        if p.is_zero() {
            continue;
        }
        parts.push(mul2(p, apply_ds(ctx, src, &a.deriv, &a.shift)?));
    }
    Ok(add(parts))
}

/// Whether `(qu, qv)` is an evolutionary variational symmetry of the formal
/// Lagrangian: every Euler component of `pr Y (L)`, over the dependent and
/// the auxiliary variables alike, vanishes identically.
pub fn is_extended_variational(
    fl: &FormalLagrangian,
    qu: &[Expr],
    qv: &[Expr],
) -> Result<bool, EngineError> {
    let g = prolong_joint(&fl.ctx, qu, qv, &fl.l)?;
    for alpha in 0..fl.ctx.q() {
        if !vanishes(&euler(&fl.ctx, &g, Namespace::Dependent, alpha)?) {
            return Ok(false);
        }
    }
    for beta in 0..fl.ctx.auxiliary.len() {
        if !vanishes(&euler(&fl.ctx, &g, Namespace::Auxiliary, beta)?) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Conservation law of the origin system from a symmetry and a witnessing
/// substitution. The direct route uses the identity
///
/// `Div Phat = sum_alpha Q^alpha F*_alpha - sum_alpha v^alpha pr X_Q (F_alpha)`,
///
/// which holds with no solution constraint; the fluxes `Phat` are recovered
/// by homotopy, the substitution lands them in the origin jets, and the
/// right side is re-expressed through the equations to close the law in
/// characteristic form. When the homotopy leaves the supported fragment the
/// construction falls back to the explicit extension route; when the final
/// re-expression fails the law is still returned, verified on solutions,
/// with a zero characteristic vector marking the open reduction.
pub fn adjoint_cl(
    fl: &FormalLagrangian,
    x: &Generator,
    s: &Substitution,
) -> Result<ConservationLaw, EngineError> {
    match check_self_adjoint(fl, s)? {
        AdjointVerdict::SelfAdjoint(_) => {}
        AdjointVerdict::No(rs) => {
            let worst = rs
                .iter()
                .find(|r| !r.is_zero())
                .cloned()
                .unwrap_or_else(Expr::zero);
            return Err(EngineError::Shape(format!(
                "substitution does not witness self-adjointness; adjoint residue {}",
                render(&fl.ctx, &worst)
            )));
        }
    }
    let qu = characteristic_of(&fl.ctx, x)?;
    match adjoint_cl_direct(fl, &qu, s) {
        Ok(cl) => Ok(cl),
        Err(EngineError::HomotopyNotClosedForm(_)) | Err(EngineError::NotNull(_)) => {
            adjoint_cl_extension_inner(fl, &qu, s)
        }
        Err(e) => Err(e),
    }
}

fn adjoint_cl_direct(
    fl: &FormalLagrangian,
    qu: &[Expr],
    s: &Substitution,
) -> Result<ConservationLaw, EngineError> {
    let fstar = adjoint_system(fl)?;
    let ev = Generator::Evolutionary(EvolutionaryField { q: qu.to_vec() });
    let pf = ProlongedField::new(&fl.ctx, &ev, ProlongationMode::Regular)?;
    let mut parts = Vec::new();
    for (alpha, fs) in fstar.iter().enumerate() {
        parts.push(mul2(qu[alpha].clone(), fs.clone()));
    }
    for (alpha, f) in fl.origin.equations.iter().enumerate() {
        let v = Expr::jet(JetAtom::base(Namespace::Auxiliary, alpha, fl.ctx.p1(), fl.ctx.p2()));
        parts.push(mul2(Expr::int(-1), mul2(v, pf.apply(f)?)));
    }
    let g = add(parts);
    let hat = null_lagrangian_decompose(&fl.ctx, &g)?;
    let p0 = substitute_pair(&fl.ctx, &hat, s)?;
    let h = rational_normal(&apply_substitution(&fl.ctx, &g, s)?);
    close_law(fl, p0, &h)
}

/// The same law through the explicit extension: `(Q, Q*)` is variational
/// for the formal Lagrangian, its Noether fluxes are computed in the
/// doubled variables, and the substitution specializes them.
pub fn adjoint_cl_via_extension(
    fl: &FormalLagrangian,
    x: &Generator,
    s: &Substitution,
) -> Result<ConservationLaw, EngineError> {
    match check_self_adjoint(fl, s)? {
        AdjointVerdict::SelfAdjoint(_) => {}
        AdjointVerdict::No(rs) => {
            let worst = rs
                .iter()
                .find(|r| !r.is_zero())
                .cloned()
                .unwrap_or_else(Expr::zero);
            return Err(EngineError::Shape(format!(
                "substitution does not witness self-adjointness; adjoint residue {}",
                render(&fl.ctx, &worst)
            )));
        }
    }
    let qu = characteristic_of(&fl.ctx, x)?;
    adjoint_cl_extension_inner(fl, &qu, s)
}

fn adjoint_cl_extension_inner(
    fl: &FormalLagrangian,
    qu: &[Expr],
    s: &Substitution,
) -> Result<ConservationLaw, EngineError> {
    let ev = Generator::Evolutionary(EvolutionaryField { q: qu.to_vec() });
    let qstar = extend_characteristic(fl, &ev)?;
    let src = prolong_joint(&fl.ctx, qu, &qstar, &fl.l)?;
    let hat = null_lagrangian_decompose(&fl.ctx, &src)?;
    // pr Y (L) = sum_a dL/da * D S (Q_joint); by parts against the joint
    // characteristic leaves sum Q^alpha F*_alpha + sum Q*^beta F_beta
    let mut terms = Vec::new();
    for a in atoms(&fl.l) {
        let c = partial_atom(&fl.l, &a);
        if c.is_zero() {
            continue;
        }
        let target = match a.namespace {
            Namespace::Dependent => a.dep,
            Namespace::Auxiliary => fl.ctx.q() + a.dep,
        };
        terms.push(ByPartsTerm {
            coeff: c,
            deriv: a.deriv.clone(),
            shift: a.shift.clone(),
            target,
        });
    }
    let mut targets: Vec<Expr> = qu.to_vec();
    targets.extend(qstar.iter().cloned());
    let bp = by_parts(&fl.ctx, &terms, &targets)?;
    let p_joint = DivergencePair {
        p1: hat
            .p1
            .iter()
            .zip(&bp.flux_d)
            .map(|(a, b)| sub(a.clone(), b.clone()))
            .collect(),
        p2: hat
            .p2
            .iter()
            .zip(&bp.flux_s)
            .map(|(a, b)| sub(a.clone(), b.clone()))
            .collect(),
    };
    let mut rhs_parts = Vec::new();
    for (c, t) in bp.characteristic.iter().zip(&targets) {
        rhs_parts.push(mul2(t.clone(), c.clone()));
    }
    let rhs = add(rhs_parts);
    let p0 = substitute_pair(&fl.ctx, &p_joint, s)?;
    let h = rational_normal(&apply_substitution(&fl.ctx, &rhs, s)?);
    close_law(fl, p0, &h)
}

fn substitute_pair(
    ctx: &Context,
    p: &DivergencePair,
    s: &Substitution,
) -> Result<DivergencePair, EngineError> {
    let map = |es: &[Expr]| -> Result<Vec<Expr>, EngineError> {
        es.iter()
            .map(|e| Ok(rational_normal(&apply_substitution(ctx, e, s)?)))
            .collect()
    };
    Ok(DivergencePair {
        p1: map(&p.p1)?,
        p2: map(&p.p2)?,
    })
}

/// Finishes either route. On entry `Div p0 = h` exactly and `h` vanishes on
/// solutions; re-expressing `h` through the equations and summing by parts
/// turns the law into characteristic form with an exact identity.
fn close_law(
    fl: &FormalLagrangian,
    p0: DivergencePair,
    h: &Expr,
) -> Result<ConservationLaw, EngineError> {
    if let ExpressOutcome::Terms(terms) = express_in_system(&fl.ctx, &fl.origin, h)? {
        let bp_terms: Vec<ByPartsTerm> = terms
            .iter()
            .map(|t| ByPartsTerm {
                coeff: t.coeff.clone(),
                deriv: t.j1.clone(),
                shift: t.j2.clone(),
                target: t.eq,
            })
            .collect();
        let bp = by_parts(&fl.ctx, &bp_terms, &fl.origin.equations)?;
        let p = DivergencePair {
            p1: p0
                .p1
                .iter()
                .zip(&bp.flux_d)
                .map(|(a, b)| rational_normal(&sub(a.clone(), b.clone())))
                .collect(),
            p2: p0
                .p2
                .iter()
                .zip(&bp.flux_s)
                .map(|(a, b)| rational_normal(&sub(a.clone(), b.clone())))
                .collect(),
        };
        let q: Vec<Expr> = bp.characteristic.iter().map(rational_normal).collect();
        let mut rhs = Vec::new();
        for (c, f) in q.iter().zip(&fl.origin.equations) {
            rhs.push(mul2(c.clone(), f.clone()));
        }
        let res = sub(divergence(&fl.ctx, &p)?, add(rhs));
        if !vanishes(&res) {
            return Err(EngineError::Shape(format!(
                "adjoint construction failed to certify its divergence identity; residue {}",
                render(&fl.ctx, &rational_normal(&res))
            )));
        }
        return Ok(ConservationLaw {
            p,
            q,
            system: fl.origin.clone(),
            verified: Verified::ExactIdentity,
        });
    }
    // the reduction did not close in characteristic form; the law itself
    // still holds on solutions
    let r = rational_normal(&reduce_mod(&fl.ctx, &divergence(&fl.ctx, &p0)?, &fl.origin)?);
    if !r.is_zero() {
        return Err(EngineError::Shape(format!(
            "adjoint law does not vanish on solutions; residue {}",
            render(&fl.ctx, &r)
        )));
    }
    Ok(ConservationLaw {
        p: p0,
        q: vec![Expr::zero(); fl.origin.equations.len()],
        system: fl.origin.clone(),
        verified: Verified::OnSolutions,
    })
}

/// Heuristic candidates `v^alpha = c * s(n) * u^alpha` with `c` a sign and
/// `s` a product of parities over discrete directions. These witness most
/// quasi and weak self-adjointness seen in practice; an empty yield proves
/// nothing.
pub fn candidate_substitutions(ctx: &Context) -> Vec<Substitution> {
    let mut parities = vec![Expr::one()];
    for d in 0..ctx.p2() {
        let mut next = Vec::with_capacity(parities.len() * 2);
        for p in &parities {
            next.push(p.clone());
            next.push(mul2(p.clone(), Expr::AltSign(d)));
        }
        parities = next;
    }
    let mut out = Vec::new();
    for p in &parities {
        for c in [1i64, -1] {
            let bindings: Vec<Expr> = (0..ctx.q())
                .map(|alpha| {
                    let u =
                        Expr::jet(JetAtom::base(Namespace::Dependent, alpha, ctx.p1(), ctx.p2()));
                    rational_normal(&mul2(Expr::int(c), mul2(p.clone(), u)))
                })
                .collect();
            out.push(Substitution { bindings });
        }
    }
    out
}

/// First heuristic candidate that witnesses self-adjointness, with its
/// class. `None` only means the heuristic family failed.
pub fn find_self_adjoint(
    fl: &FormalLagrangian,
) -> Result<Option<(Substitution, SelfAdjointness)>, EngineError> {
    for s in candidate_substitutions(&fl.ctx) {
        if s.bindings.len() != fl.ctx.auxiliary.len() {
            continue;
        }
        if let AdjointVerdict::SelfAdjoint(kind) = check_self_adjoint(fl, &s)? {
            return Ok(Some((s, kind)));
        }
    }
    Ok(None)
}
