//! Vector fields, their differential-difference prolongations, and point
//! symmetries.
//!
//! A generalized vector field `X = xi^i d/dx^i + phi^a d/du^a` prolongs to
//! the jet space in three inequivalent ways, depending on how the discrete
//! translations interact with the continuous flow:
//!
//! * case I: shifts are applied before the flow, so each shifted stalk
//!   carries its own multi-characteristic `Q_{J2} = S_{J2} phi - xi^i
//!   u[1_i; J2]` and the coefficient at `u[J1; J2]` is `D_{J1} Q_{J2} +
//!   xi^i u[J1 + 1_i; J2]`;
//! * case II: the flow acts stalk-wise with shifted velocities, giving
//!   `D_{J1} S_{J2} Q + (S_{J2} xi^i) u[J1 + 1_i; J2]` with the single
//!   characteristic `Q = phi - xi^i u[1_i; 0]`;
//! * regular: `xi = xi(x)` only, where both cases collapse to `pr X =
//!   xi^i D_i + sum D_{J1} S_{J2} Q^a d/du^a[J1; J2]`.
//!
//! Evolutionary fields (`xi = 0`) make the three modes coincide. On top of
//! the prolongation the module decides the linearized symmetry condition
//! modulo a system's solved forms, computes commutators of evolutionary
//! fields, exhibits `pr X(F)` as a linear combination of `D_{J1} S_{J2}
//! F_beta`, and mechanizes the classical determining-equation split for
//! first-order scalar lattice equations together with a finite carrier
//! ansatz for solving the split conditions exactly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::calculus::{apply_ds, binom, d_multi, s_multi, total_derivative};
use crate::context::{Context, FunctionSig, JetAtom, MultiIndexD, MultiIndexS, Namespace, Parameter};
use crate::error::EngineError;
use crate::expr::{
    add, add2, any_node, atoms, base_exp, mentions_namespace, mentions_param, mul, mul2, neg,
    partial, partial_atom, powi, quotient_split, rational_normal, split_coeff, sub, subst_param,
    subst_rebuild, vanishes, Coord, Expr, FuncApp, Rational,
};
use crate::linsys;
use crate::render::render;
use crate::system::{reduce_mod, replace_atoms, DDESystem};

/// Substitution events before a decomposition is declared non-terminating.
const DECOMPOSE_EVENT_CAP: u32 = 4096;

/// How a vector field with nonzero `xi` acts on shifted jets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProlongationMode {
    CaseI,
    CaseII,
    /// Requires `xi = xi(x)`; agrees with both cases on such fields.
    Regular,
}

/// A generalized vector field: one `xi` per continuous direction, one
/// `phi` per dependent variable. Components are arbitrary expressions;
/// point fields keep them inside the zero-order jet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorField {
    pub xi: Vec<Expr>,
    pub phi: Vec<Expr>,
}

impl VectorField {
    /// Whether every `xi` component is free of the lattice variables and
    /// of all jet atoms, the regularity condition for mode `Regular`.
    pub fn is_regular(&self) -> bool {
        self.xi.iter().all(|e| !depends_on_lattice_or_jets(e))
    }
}

/// A field `Q^a d/du^a` in characteristic form; `xi = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvolutionaryField {
    pub q: Vec<Expr>,
}

/// Either presentation of a symmetry generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Generator {
    Vector(VectorField),
    Evolutionary(EvolutionaryField),
}

fn depends_on_lattice_or_jets(e: &Expr) -> bool {
    any_node(e, &mut |x| {
        matches!(x, Expr::DiscVar(_) | Expr::AltSign(_) | Expr::Jet(_))
    })
}

/// The evolutionary representative `Q^a = phi^a - xi^i u^a[1_i; 0]` of a
/// regular field. Fields whose `xi` depends on the lattice or on jets have
/// no mode-independent representative and are rejected.
pub fn to_evolutionary(ctx: &Context, x: &VectorField) -> Result<EvolutionaryField, EngineError> {
    check_field_arity(ctx, x)?;
    if !x.is_regular() {
        return Err(EngineError::NotRegular(
            "xi depends on the lattice or the jet variables".to_string(),
        ));
    }
    let mut q = Vec::with_capacity(x.phi.len());
    for (alpha, ph) in x.phi.iter().enumerate() {
        let mut e = ph.clone();
        for (i, xie) in x.xi.iter().enumerate() {
            if xie.is_zero() {
                continue;
            }
            let a = JetAtom::base(Namespace::Dependent, alpha, ctx.p1(), ctx.p2()).derived(i);
            e = sub(e, mul2(xie.clone(), Expr::jet(a)));
        }
        q.push(e);
    }
    Ok(EvolutionaryField { q })
}

fn check_field_arity(ctx: &Context, x: &VectorField) -> Result<(), EngineError> {
    if x.xi.len() != ctx.p1() || x.phi.len() != ctx.q() {
        return Err(EngineError::Shape(format!(
            "vector field has {} xi and {} phi components; the context needs {} and {}",
            x.xi.len(),
            x.phi.len(),
            ctx.p1(),
            ctx.q()
        )));
    }
    Ok(())
}

/// A prolonged field with lazily computed jet coefficients.
pub struct ProlongedField<'c> {
    ctx: &'c Context,
    pub mode: ProlongationMode,
    pub xi: Vec<Expr>,
    pub phi: Vec<Expr>,
    // characteristics Q^a = phi^a - xi^i u^a[1_i; 0]
    q: Vec<Expr>,
    cache: RefCell<BTreeMap<JetAtom, Expr>>,
}

impl<'c> ProlongedField<'c> {
    pub fn new(ctx: &'c Context, x: &Generator, mode: ProlongationMode) -> Result<Self, EngineError> {
        let (xi, phi) = match x {
            Generator::Vector(v) => {
                check_field_arity(ctx, v)?;
                if mode == ProlongationMode::Regular && !v.is_regular() {
                    return Err(EngineError::NotRegular(
                        "regular prolongation needs xi = xi(x); use case I or case II".to_string(),
                    ));
                }
                (v.xi.clone(), v.phi.clone())
            }
            Generator::Evolutionary(f) => {
                if f.q.len() != ctx.q() {
                    return Err(EngineError::Shape(format!(
                        "evolutionary field has {} components; the context needs {}",
                        f.q.len(),
                        ctx.q()
                    )));
                }
                (vec![Expr::zero(); ctx.p1()], f.q.clone())
            }
        };
        let mut q = Vec::with_capacity(phi.len());
        for (alpha, ph) in phi.iter().enumerate() {
            let mut e = ph.clone();
            for (i, xie) in xi.iter().enumerate() {
                if xie.is_zero() {
                    continue;
                }
                let a = JetAtom::base(Namespace::Dependent, alpha, ctx.p1(), ctx.p2()).derived(i);
                e = sub(e, mul2(xie.clone(), Expr::jet(a)));
            }
            q.push(e);
        }
        Ok(ProlongedField {
            ctx,
            mode,
            xi,
            phi,
            q,
            cache: RefCell::new(BTreeMap::new()),
        })
    }

    /// The prolongation coefficient at the atom `a`, per mode. Atoms of
    /// the auxiliary namespace are fixed by the field.
    pub fn coefficient(&self, a: &JetAtom) -> Result<Expr, EngineError> {
        if a.namespace != Namespace::Dependent {
            return Ok(Expr::zero());
        }
        if let Some(c) = self.cache.borrow().get(a) {
            return Ok(c.clone());
        }
        let val = match self.mode {
            ProlongationMode::Regular => apply_ds(self.ctx, &self.q[a.dep], &a.deriv, &a.shift)?,
            ProlongationMode::CaseI => {
                // multi-characteristic on the atom's stalk; xi is not shifted
                let mut qj = s_multi(self.ctx, &self.phi[a.dep], &a.shift)?;
                for (i, xie) in self.xi.iter().enumerate() {
                    if xie.is_zero() {
                        continue;
                    }
                    let mut b = JetAtom::base(Namespace::Dependent, a.dep, self.ctx.p1(), self.ctx.p2());
                    b.deriv[i] = 1;
                    b.shift = a.shift.clone();
                    qj = sub(qj, mul2(xie.clone(), Expr::jet(b)));
                }
                let mut c = d_multi(self.ctx, &qj, &a.deriv)?;
                for (i, xie) in self.xi.iter().enumerate() {
                    if xie.is_zero() {
                        continue;
                    }
                    c = add2(c, mul2(xie.clone(), Expr::jet(a.derived(i))));
                }
                c
            }
            ProlongationMode::CaseII => {
                let mut c = apply_ds(self.ctx, &self.q[a.dep], &a.deriv, &a.shift)?;
                for (i, xie) in self.xi.iter().enumerate() {
                    if xie.is_zero() {
                        continue;
                    }
                    c = add2(
                        c,
                        mul2(s_multi(self.ctx, xie, &a.shift)?, Expr::jet(a.derived(i))),
                    );
                }
                c
            }
        };
        self.cache.borrow_mut().insert(a.clone(), val.clone());
        Ok(val)
    }

    /// `pr X (e)`: the explicit part plus one coefficient per atom of `e`.
    pub fn apply(&self, e: &Expr) -> Result<Expr, EngineError> {
        let has_xi = self.xi.iter().any(|x| !x.is_zero());
        if has_xi && mentions_namespace(e, Namespace::Auxiliary) {
            return Err(EngineError::Shape(
                "prolongation with nonzero xi does not act on auxiliary atoms; \
                 use an evolutionary field"
                    .to_string(),
            ));
        }
        let mut parts = Vec::new();
        for (i, xie) in self.xi.iter().enumerate() {
            if xie.is_zero() {
                continue;
            }
            // in the regular collapse xi multiplies the full total
            // derivative; in both cases it multiplies only the explicit
            // x-dependence, the jet part being inside the coefficients
            let di = match self.mode {
                ProlongationMode::Regular => total_derivative(self.ctx, e, i)?,
                _ => partial(e, &Coord::Cont(i)),
            };
            if !di.is_zero() {
                parts.push(mul2(xie.clone(), di));
            }
        }
        for a in atoms(e) {
            if a.namespace != Namespace::Dependent {
                continue;
            }
            let pe = partial_atom(e, &a);
            if pe.is_zero() {
                continue;
            }
            let c = self.coefficient(&a)?;
            if c.is_zero() {
                continue;
            }
            parts.push(mul2(c, pe));
        }
        Ok(add(parts))
    }
}

/// One-shot `pr X (e)` in the given mode.
pub fn prolong_apply(
    ctx: &Context,
    x: &Generator,
    e: &Expr,
    mode: ProlongationMode,
) -> Result<Expr, EngineError> {
    ProlongedField::new(ctx, x, mode)?.apply(e)
}

/// Outcome of the linearized symmetry condition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SymmetryVerdict {
    Yes,
    /// Normalized nonzero residues of `pr X (F_alpha)`, one per equation.
    No(Vec<Expr>),
}

/// Checks `pr X (F_alpha) = 0` on all solutions; with no solved forms the
/// condition is tested as an identity instead.
pub fn check_symmetry(
    ctx: &Context,
    sys: &DDESystem,
    x: &Generator,
    mode: ProlongationMode,
) -> Result<SymmetryVerdict, EngineError> {
    let pf = ProlongedField::new(ctx, x, mode)?;
    let mut residues = Vec::with_capacity(sys.equations.len());
    let mut all = true;
    for f in &sys.equations {
        let g = pf.apply(f)?;
        let r = if sys.solved.is_empty() {
            g
        } else {
            reduce_mod(ctx, &g, sys)?
        };
        let r = rational_normal(&r);
        if !r.is_zero() {
            all = false;
        }
        residues.push(r);
    }
    if all {
        Ok(SymmetryVerdict::Yes)
    } else {
        Ok(SymmetryVerdict::No(residues))
    }
}

/// Commutator of evolutionary fields: `[X_a, X_b]` has characteristic
/// `pr X_a (Q_b) - pr X_b (Q_a)`.
pub fn lie_bracket(
    ctx: &Context,
    a: &EvolutionaryField,
    b: &EvolutionaryField,
) -> Result<EvolutionaryField, EngineError> {
    let pa = ProlongedField::new(ctx, &Generator::Evolutionary(a.clone()), ProlongationMode::Regular)?;
    let pb = ProlongedField::new(ctx, &Generator::Evolutionary(b.clone()), ProlongationMode::Regular)?;
    let mut q = Vec::with_capacity(a.q.len());
    for alpha in 0..a.q.len().min(b.q.len()) {
        q.push(rational_normal(&sub(
            pa.apply(&b.q[alpha])?,
            pb.apply(&a.q[alpha])?,
        )));
    }
    Ok(EvolutionaryField { q })
}

/// One term `coeff * D_{j1} S_{j2} F_eq` of a decomposition row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecompositionTerm {
    pub coeff: Expr,
    pub j1: MultiIndexD,
    pub j2: MultiIndexS,
    pub eq: usize,
}

/// `pr X (F_alpha) = sum coeff * D_{j1} S_{j2} F_beta`, one row per
/// equation. Existence of such a bi-infinite-order-free combination is the
/// equivalent characterization of the symmetry condition for systems in
/// solved form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetryDecomposition {
    pub rows: Vec<Vec<DecompositionTerm>>,
}

/// Result of trying to exhibit an expression as `sum coeff * D S F_eq`.
#[derive(Debug, Clone)]
pub(crate) enum ExpressOutcome {
    Terms(Vec<DecompositionTerm>),
    /// Reduction left a nonzero residue: the input does not vanish on
    /// solutions.
    Residue(Expr),
    /// Reduction closed but the certifying identity failed to reconstruct
    /// the input (guards against cancellation bookkeeping errors).
    Unreconstructed,
}

/// Writes `g = sum coeff * D_{j1} S_{j2} F_eq` by eliminating in-cone atoms
/// one at a time and tracking each substitution's exact contribution. Such
/// a combination exists precisely when `g` vanishes modulo the system.
pub(crate) fn express_in_system(
    ctx: &Context,
    sys: &DDESystem,
    g0: &Expr,
) -> Result<ExpressOutcome, EngineError> {
    let mut g = rational_normal(g0);
    let mut acc: BTreeMap<(usize, MultiIndexD, MultiIndexS), Expr> = BTreeMap::new();
    let mut events = 0u32;
    loop {
        // highest eliminable atom first: total order, then derivative
        // order, then the atom order itself
        let mut target: Option<JetAtom> = None;
        for a in atoms(&g) {
            if sys.form_for(&a).is_none() {
                continue;
            }
            let better = match &target {
                None => true,
                Some(t) => decomp_key(&a) > decomp_key(t),
            };
            if better {
                target = Some(a);
            }
        }
        let Some(a) = target else { break };
        events += 1;
        if events > DECOMPOSE_EVENT_CAP {
            return Err(EngineError::ReductionDepthExceeded(DECOMPOSE_EVENT_CAP));
        }
        let form = sys.form_for(&a).expect("target was selected through form_for");
        let eq = form.eq;
        let repl = form.replacement(ctx, &a)?;
        let mut map = BTreeMap::new();
        map.insert(a.clone(), repl.clone());
        let g_next = replace_atoms(&g, &map)?;
        // g = g_next + (a - repl) * h exactly, as rational functions
        let diff = sub(Expr::jet(a.clone()), repl);
        let h = rational_normal(&mul2(sub(g.clone(), g_next.clone()), powi(diff, -1)));
        if !h.is_zero() {
            // a - repl = D_{d1} ( S_{d2} mu^-1 * S_{d2 + off} F_eq )
            let d1: MultiIndexD = a
                .deriv
                .iter()
                .zip(&form.lead.deriv)
                .map(|(x, k)| x - k)
                .collect();
            let d2: MultiIndexS = a
                .shift
                .iter()
                .zip(&form.lead.shift)
                .map(|(x, k)| x - k)
                .collect();
            let mu_inv = powi(form.multiplier.clone(), -1);
            let mu_shift = s_multi(ctx, &mu_inv, &d2)?;
            let j2: MultiIndexS = d2.iter().zip(&form.shift_off).map(|(x, k)| x + k).collect();
            for (k1, c) in leibniz_indices(&d1) {
                let dk_mu = d_multi(ctx, &mu_shift, &k1)?;
                if dk_mu.is_zero() {
                    continue;
                }
                let j1: MultiIndexD = d1.iter().zip(&k1).map(|(x, k)| x - k).collect();
                let term = mul(vec![h.clone(), Expr::Num(c), dk_mu]);
                let slot = acc.entry((eq, j1, j2.clone())).or_insert_with(Expr::zero);
                *slot = add2(slot.clone(), term);
            }
        }
        g = rational_normal(&g_next);
    }
    if !g.is_zero() {
        return Ok(ExpressOutcome::Residue(g));
    }
    let mut row = Vec::new();
    let mut recon = Vec::new();
    for ((eq, j1, j2), k) in acc {
        let k = rational_normal(&k);
        if k.is_zero() {
            continue;
        }
        recon.push(mul2(k.clone(), apply_ds(ctx, &sys.equations[eq], &j1, &j2)?));
        row.push(DecompositionTerm { coeff: k, j1, j2, eq });
    }
    if !vanishes(&sub(g0.clone(), add(recon))) {
        return Ok(ExpressOutcome::Unreconstructed);
    }
    Ok(ExpressOutcome::Terms(row))
}

/// Exhibits `pr X (F_alpha)` as a combination of derived and shifted
/// equations. Fails with `NotASymmetry` when a nonzero residue survives
/// full reduction, i.e. when `X` is not a symmetry.
pub fn decompose_symmetry(
    ctx: &Context,
    sys: &DDESystem,
    x: &Generator,
    mode: ProlongationMode,
) -> Result<SymmetryDecomposition, EngineError> {
    if sys.solved.is_empty() {
        return Err(EngineError::Shape(
            "decomposition requires a system with solved forms".to_string(),
        ));
    }
    let pf = ProlongedField::new(ctx, x, mode)?;
    let mut rows = Vec::with_capacity(sys.equations.len());
    for f_alpha in &sys.equations {
        let applied = pf.apply(f_alpha)?;
        match express_in_system(ctx, sys, &applied)? {
            ExpressOutcome::Terms(row) => rows.push(row),
            ExpressOutcome::Residue(g) => {
                return Err(EngineError::NotASymmetry(format!(
                    "decomposition failed: nonzero residue {}",
                    render(ctx, &g)
                )));
            }
            ExpressOutcome::Unreconstructed => {
                return Err(EngineError::NotASymmetry(
                    "decomposition failed: the reconstruction identity does not hold".to_string(),
                ));
            }
        }
    }
    Ok(SymmetryDecomposition { rows })
}

fn decomp_key(a: &JetAtom) -> (u32, u32, JetAtom) {
    let d: u32 = a.deriv.iter().sum();
    let s: u32 = a.shift.iter().map(|k| k.unsigned_abs()).sum();
    (d + s, d, a.clone())
}

/// All `k <= d` componentwise with the product of binomial coefficients.
fn leibniz_indices(d: &[u32]) -> Vec<(MultiIndexD, Rational)> {
    let mut out: Vec<(MultiIndexD, Rational)> = vec![(Vec::new(), Rational::one())];
    for &di in d {
        let mut next = Vec::with_capacity(out.len() * (di as usize + 1));
        for (prefix, c) in &out {
            for k in 0..=di {
                let mut p = prefix.clone();
                p.push(k);
                next.push((p, c * binom(di as usize, k as usize)));
            }
        }
        out = next;
    }
    out
}

// ---------------------------------------------------------------------------
// determining equations

/// Output of the staged determining-equation split. `ctx` extends the
/// input context with the fresh linear-coefficient functions, `field` is
/// the refined ansatz over it, `killed` lists `(function, slot)` pairs
/// whose slot dependence was resolved away, `resolved` the conditions
/// discharged by those structural steps, and `conditions` the remaining
/// split equations on the surviving unknowns.
#[derive(Debug, Clone)]
pub struct DeterminingSystem {
    pub ctx: Context,
    pub field: VectorField,
    pub killed: Vec<(String, usize)>,
    pub resolved: Vec<Expr>,
    pub conditions: Vec<Expr>,
}

/// Splits the linearized symmetry condition of a first-order scalar
/// lattice equation over an ansatz whose components apply unknown
/// functions of `(x, n, u)`.
///
/// Stage A probes mixed second partials in distinct shifted atoms: each
/// nonzero coefficient must be annihilated by one unknown's field-slot
/// partials, which are then discarded. Stage B probes repeated second
/// partials: a surviving one forces the matching unknown to be linear in
/// its field slot, so it is replaced by `a(..) u + b(..)` with fresh
/// functions. Stage C re-expands the condition and splits it by jet
/// monomials, whose coefficients (functions of the remaining unknowns)
/// are returned as the determining system.
pub fn determining_equations(
    ctx: &Context,
    sys: &DDESystem,
    ansatz: &VectorField,
) -> Result<DeterminingSystem, EngineError> {
    let first_order_scalar = ctx.p1() == 1
        && ctx.p2() == 1
        && ctx.q() == 1
        && sys.equations.len() == 1
        && sys.solved.iter().any(|f| {
            f.lead.namespace == Namespace::Dependent
                && f.lead.deriv == vec![1]
                && f.lead.shift == vec![0]
                && atoms(&f.rhs).iter().all(|a| a.total_deriv_order() == 0)
        });
    if !first_order_scalar {
        return Err(EngineError::Shape(
            "pre violated: not first-order scalar".to_string(),
        ));
    }
    check_field_arity(ctx, ansatz)?;
    let unknowns = collect_unknowns(ctx, &[&ansatz.xi[0], &ansatz.phi[0]])?;

    let pf = ProlongedField::new(ctx, &Generator::Vector(ansatz.clone()), ProlongationMode::CaseI)?;
    let r0 = rational_normal(&reduce_mod(ctx, &pf.apply(&sys.equations[0])?, sys)?);
    let shifted: Vec<JetAtom> = atoms(&r0)
        .into_iter()
        .filter(|a| a.namespace == Namespace::Dependent && a.shift.iter().any(|&s| s != 0))
        .collect();

    let mut resolved: BTreeSet<Expr> = BTreeSet::new();
    let mut killed: BTreeSet<(String, usize)> = BTreeSet::new();

    // stage A: mixed pairs of shifted atoms
    for i in 0..shifted.len() {
        for j in (i + 1)..shifted.len() {
            let c = rational_normal(&partial_atom(&partial_atom(&r0, &shifted[i]), &shifted[j]));
            let c = rational_normal(&apply_kills(&c, &killed)?);
            if c.is_zero() {
                continue;
            }
            let hit = find_annihilating_unknown(&c, &unknowns, 1)?;
            match hit {
                Some(key) => {
                    resolved.insert(primitive_normal(&c));
                    killed.insert(key);
                }
                None => {
                    return Err(EngineError::CannotSplit(format!(
                        "mixed-pair coefficient {}",
                        render(ctx, &c)
                    )))
                }
            }
        }
    }

    // stage B: repeated second partials force linear field dependence
    let r1 = rational_normal(&apply_kills(&r0, &killed)?);
    let mut refine: BTreeSet<String> = BTreeSet::new();
    for a in &shifted {
        let c = rational_normal(&partial_atom(&partial_atom(&r1, a), a));
        if c.is_zero() {
            continue;
        }
        let hit = find_annihilating_unknown(&c, &unknowns, 2)?;
        match hit {
            Some((name, _)) => {
                resolved.insert(primitive_normal(&c));
                refine.insert(name);
            }
            None => {
                return Err(EngineError::CannotSplit(format!(
                    "second-order coefficient {}",
                    render(ctx, &c)
                )))
            }
        }
    }

    // refine the marked unknowns to a(..) u + b(..)
    let mut ctx2 = ctx.clone();
    let mut field = ansatz.clone();
    for name in &refine {
        let (dep_slot, dep_var) = unknowns
            .get(name)
            .and_then(|slots| slots.first().copied())
            .expect("refined unknowns come from the registry");
        let sig = ctx
            .function(name)
            .expect("registered unknowns are declared")
            .clone();
        let rest_args: Vec<String> = sig
            .args
            .iter()
            .enumerate()
            .filter(|(s, _)| *s != dep_slot)
            .map(|(_, a)| a.clone())
            .collect();
        let lin_name = fresh_name(&ctx2, "a");
        ctx2.functions.push(FunctionSig {
            name: lin_name.clone(),
            args: rest_args.clone(),
        });
        let aff_name = fresh_name(&ctx2, "b");
        ctx2.functions.push(FunctionSig {
            name: aff_name.clone(),
            args: rest_args,
        });
        let _ = dep_var;
        field = refine_field(&field, name, dep_slot, &lin_name, &aff_name)?;
    }
    ctx2.validate()?;

    // stage C: full split by jet monomials
    let unknowns2 = collect_unknowns(&ctx2, &[&field.xi[0], &field.phi[0]])?;
    let pf2 = ProlongedField::new(&ctx2, &Generator::Vector(field.clone()), ProlongationMode::CaseI)?;
    let rc = reduce_mod(&ctx2, &pf2.apply(&sys.equations[0])?, sys)?;
    let rc = rational_normal(&apply_kills(&rc, &killed)?);
    let (num, _den) = quotient_split(&rc);
    let mut groups: BTreeMap<Expr, Vec<Expr>> = BTreeMap::new();
    for t in term_list(&num) {
        let (c, fs) = split_coeff(&t);
        let mut key = Vec::new();
        let mut rest = vec![Expr::Num(c)];
        for f in fs {
            let (b, _) = base_exp(&f);
            if matches!(b, Expr::Jet(_)) {
                key.push(f);
            } else {
                rest.push(f);
            }
        }
        groups.entry(mul(key)).or_default().push(mul(rest));
    }
    let mut conditions: BTreeSet<Expr> = BTreeSet::new();
    for (_key, parts) in groups {
        let cond = rational_normal(&add(parts));
        if cond.is_zero() {
            continue;
        }
        guard_entanglement(&ctx2, &cond, &unknowns2, &killed)?;
        conditions.insert(primitive_normal(&cond));
    }

    Ok(DeterminingSystem {
        ctx: ctx2,
        field,
        killed: killed.into_iter().collect(),
        resolved: resolved.into_iter().collect(),
        conditions: conditions.into_iter().collect(),
    })
}

/// Unknown functions applied in the ansatz, mapped to their dependent
/// variable slots as `(slot, dep index)` pairs.
fn collect_unknowns(
    ctx: &Context,
    components: &[&Expr],
) -> Result<BTreeMap<String, Vec<(usize, usize)>>, EngineError> {
    let mut names: BTreeSet<String> = BTreeSet::new();
    for e in components {
        collect_fn_names(e, &mut names);
    }
    let mut out = BTreeMap::new();
    for name in names {
        let sig = ctx.function(&name).ok_or_else(|| {
            EngineError::Shape(format!("function `{name}` is not declared in the context"))
        })?;
        let mut slots = Vec::new();
        for (s, arg) in sig.args.iter().enumerate() {
            if let Some(v) = ctx.dep_index(arg) {
                slots.push((s, v));
            }
        }
        out.insert(name, slots);
    }
    Ok(out)
}

fn collect_fn_names(e: &Expr, out: &mut BTreeSet<String>) {
    let _ = any_node(e, &mut |x| {
        if let Expr::Func(g) = x {
            out.insert(g.name.clone());
        }
        false
    });
}

/// Zeroes every application of `name` whose derivative order in `slot`
/// is at least `min_order`.
fn kill_dep_partials(
    e: &Expr,
    name: &str,
    slot: usize,
    min_order: u32,
) -> Result<Expr, EngineError> {
    subst_rebuild(e, &mut |x| match x {
        Expr::Func(g)
            if g.name == name && g.derivs.get(slot).copied().unwrap_or(0) >= min_order =>
        {
            Some(Expr::zero())
        }
        _ => None,
    })
}

fn apply_kills(e: &Expr, killed: &BTreeSet<(String, usize)>) -> Result<Expr, EngineError> {
    let mut out = e.clone();
    for (name, slot) in killed {
        out = kill_dep_partials(&out, name, *slot, 1)?;
    }
    Ok(out)
}

/// The unique unknown whose field-slot partials of order `>= min_order`
/// annihilate `c`, searched in name order.
fn find_annihilating_unknown(
    c: &Expr,
    unknowns: &BTreeMap<String, Vec<(usize, usize)>>,
    min_order: u32,
) -> Result<Option<(String, usize)>, EngineError> {
    for (name, slots) in unknowns {
        for (slot, _) in slots {
            let killed = kill_dep_partials(c, name, *slot, min_order)?;
            if rational_normal(&killed).is_zero() {
                return Ok(Some((name.clone(), *slot)));
            }
        }
    }
    Ok(None)
}

/// Replaces every plain application `f(..., w, ...)` of the unknown by
/// `a(...) w + b(...)`, dropping the field slot from the argument list.
fn refine_field(
    field: &VectorField,
    name: &str,
    dep_slot: usize,
    lin_name: &str,
    aff_name: &str,
) -> Result<VectorField, EngineError> {
    let mut refine_expr = |e: &Expr| -> Result<Expr, EngineError> {
        let mut bad: Option<EngineError> = None;
        let out = subst_rebuild(e, &mut |x| {
            let Expr::Func(g) = x else { return None };
            if g.name != name {
                return None;
            }
            if g.derivs.iter().any(|&d| d > 0) {
                bad = Some(EngineError::Shape(format!(
                    "cannot refine `{name}`: the ansatz applies it with explicit derivatives"
                )));
                return Some(Expr::zero());
            }
            let dep_arg = g.args[dep_slot].clone();
            let rest: Vec<Expr> = g
                .args
                .iter()
                .enumerate()
                .filter(|(s, _)| *s != dep_slot)
                .map(|(_, a)| a.clone())
                .collect();
            let derivs = vec![0; rest.len()];
            let lin = Expr::Func(FuncApp {
                name: lin_name.to_string(),
                derivs: derivs.clone(),
                args: rest.clone(),
            });
            let aff = Expr::Func(FuncApp {
                name: aff_name.to_string(),
                derivs,
                args: rest,
            });
            Some(add2(mul2(lin, dep_arg), aff))
        })?;
        match bad {
            Some(e) => Err(e),
            None => Ok(out),
        }
    };
    Ok(VectorField {
        xi: field.xi.iter().map(&mut refine_expr).collect::<Result<_, _>>()?,
        phi: field.phi.iter().map(&mut refine_expr).collect::<Result<_, _>>()?,
    })
}

/// A split coefficient may mention jets only through argument slots whose
/// dependence is already resolved away; anything else means the shifted
/// unknowns do not separate from the unshifted ones.
fn guard_entanglement(
    ctx: &Context,
    cond: &Expr,
    unknowns: &BTreeMap<String, Vec<(usize, usize)>>,
    killed: &BTreeSet<(String, usize)>,
) -> Result<(), EngineError> {
    let mut offender: Option<String> = None;
    let _ = any_node(cond, &mut |x| {
        let Expr::Func(g) = x else { return false };
        for (s, arg) in g.args.iter().enumerate() {
            let has_jet = any_node(arg, &mut |y| matches!(y, Expr::Jet(_)));
            if !has_jet {
                continue;
            }
            let dead = unknowns.contains_key(&g.name)
                && killed.contains(&(g.name.clone(), s))
                && g.derivs.get(s).copied().unwrap_or(0) == 0;
            if !dead {
                offender = Some(render(ctx, x));
                return true;
            }
        }
        false
    });
    match offender {
        Some(app) => Err(EngineError::CannotSplit(format!(
            "coefficient depends on the field through {app}"
        ))),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// function substitution

#[derive(Debug, Clone, Copy)]
enum SlotRole {
    Cont(usize),
    Disc(usize),
    Dep(usize),
}

fn slot_roles(ctx: &Context, name: &str) -> Result<Vec<SlotRole>, EngineError> {
    let sig = ctx.function(name).ok_or_else(|| {
        EngineError::Shape(format!("function `{name}` is not declared in the context"))
    })?;
    sig.args
        .iter()
        .map(|a| {
            ctx.cont_index(a)
                .map(SlotRole::Cont)
                .or_else(|| ctx.disc_index(a).map(SlotRole::Disc))
                .or_else(|| ctx.dep_index(a).map(SlotRole::Dep))
                .ok_or_else(|| {
                    EngineError::Shape(format!(
                        "function `{name}` slot `{a}` is not a declared variable"
                    ))
                })
        })
        .collect()
}

/// Lattice offsets of an application, read from its discrete arguments.
/// Continuous arguments must be the bare variables; field arguments must
/// be the base atom translated by the same offsets.
fn app_offsets(ctx: &Context, roles: &[SlotRole], g: &FuncApp) -> Result<MultiIndexS, EngineError> {
    if g.args.len() != roles.len() {
        return Err(EngineError::Shape(format!(
            "function `{}` applied with arity {} instead of {}",
            g.name,
            g.args.len(),
            roles.len()
        )));
    }
    let mut off = vec![0i32; ctx.p2()];
    for (s, role) in roles.iter().enumerate() {
        match role {
            SlotRole::Disc(d) => {
                off[*d] = disc_offset(&g.args[s], *d).ok_or_else(|| {
                    EngineError::Shape(format!(
                        "function `{}` discrete argument is not the variable plus an integer",
                        g.name
                    ))
                })?;
            }
            SlotRole::Cont(i) => {
                if g.args[s] != Expr::ContVar(*i) {
                    return Err(EngineError::Shape(format!(
                        "function `{}` continuous argument must be the bare variable",
                        g.name
                    )));
                }
            }
            SlotRole::Dep(_) => {}
        }
    }
    for (s, role) in roles.iter().enumerate() {
        if let SlotRole::Dep(v) = role {
            let expect =
                Expr::jet(JetAtom::base(Namespace::Dependent, *v, ctx.p1(), ctx.p2()).shifted(&off));
            if g.args[s] != expect {
                return Err(EngineError::Shape(format!(
                    "function `{}` field argument is not the coherently shifted base variable",
                    g.name
                )));
            }
        }
    }
    Ok(off)
}

fn disc_offset(arg: &Expr, d: usize) -> Option<i32> {
    match arg {
        Expr::DiscVar(x) if *x == d => Some(0),
        Expr::Sum(ts) if ts.len() == 2 => {
            let mut var = false;
            let mut k: Option<i32> = None;
            for t in ts {
                match t {
                    Expr::DiscVar(x) if *x == d => var = true,
                    Expr::Num(r) if r.is_integer() => k = r.to_integer().to_i32(),
                    _ => return None,
                }
            }
            if var {
                k
            } else {
                None
            }
        }
        _ => None,
    }
}

fn collect_apps(e: &Expr, name: &str, out: &mut BTreeSet<FuncApp>) {
    let _ = any_node(e, &mut |x| {
        if let Expr::Func(g) = x {
            if g.name == name {
                out.insert(g.clone());
            }
        }
        false
    });
}

fn mentions_function(e: &Expr, name: &str) -> bool {
    any_node(e, &mut |x| matches!(x, Expr::Func(g) if g.name == name))
}

/// Replaces every application of `name` by `body` evaluated at the
/// application's arguments: slot derivatives become derivatives of the
/// body, discrete offsets become lattice shifts.
pub fn substitute_function(
    ctx: &Context,
    e: &Expr,
    name: &str,
    body: &Expr,
) -> Result<Expr, EngineError> {
    if !mentions_function(e, name) {
        return Ok(e.clone());
    }
    let roles = slot_roles(ctx, name)?;
    let mut apps = BTreeSet::new();
    collect_apps(e, name, &mut apps);
    let mut images: BTreeMap<FuncApp, Expr> = BTreeMap::new();
    for g in apps {
        let off = app_offsets(ctx, &roles, &g)?;
        let mut img = body.clone();
        for (s, role) in roles.iter().enumerate() {
            for _ in 0..g.derivs[s] {
                img = match role {
                    SlotRole::Cont(i) => partial(&img, &Coord::Cont(*i)),
                    SlotRole::Dep(v) => partial_atom(
                        &img,
                        &JetAtom::base(Namespace::Dependent, *v, ctx.p1(), ctx.p2()),
                    ),
                    SlotRole::Disc(_) => {
                        return Err(EngineError::Shape(format!(
                            "function `{name}` has a derivative in a discrete slot"
                        )))
                    }
                };
            }
        }
        img = s_multi(ctx, &img, &off)?;
        images.insert(g, img);
    }
    subst_rebuild(e, &mut |x| match x {
        Expr::Func(g) if g.name == name => images.get(g).cloned(),
        _ => None,
    })
}

// ---------------------------------------------------------------------------
// linear carrier solver

/// Exact solution set of linear conditions in declared constants and free
/// functions. `basis` spans the homogeneous solutions over `constants`;
/// `solved_functions` are the eliminated free functions, written over the
/// constants and the surviving (never constrained) `free_functions`.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub consistent: bool,
    pub constants: Vec<String>,
    pub particular: Vec<Rational>,
    pub basis: Vec<Vec<Rational>>,
    pub solved_functions: BTreeMap<String, Expr>,
    pub free_functions: Vec<String>,
}

/// Splits each condition by powers of the continuous variables and by jet
/// monomials, eliminates free-function applications with invertible
/// coefficients, splits what remains by the discrete carriers, and solves
/// the resulting exact linear system for the constants.
pub fn solve_linear_ansatz(
    ctx: &Context,
    conds: &[Expr],
    constants: &[String],
    free_fns: &[String],
) -> Result<LinearSolution, EngineError> {
    for c in constants {
        if ctx.param_index(c).is_none() {
            return Err(EngineError::Shape(format!(
                "constant `{c}` is not a declared parameter"
            )));
        }
    }
    for f in free_fns {
        if ctx.function(f).is_none() {
            return Err(EngineError::Shape(format!(
                "free function `{f}` is not declared in the context"
            )));
        }
    }

    let mut pieces: Vec<Expr> = Vec::new();
    for c in conds {
        pieces.extend(split_pieces(c));
    }

    // eliminate free functions that occur with invertible coefficients
    let mut solved_fns: BTreeMap<String, Expr> = BTreeMap::new();
    loop {
        let mut next = Vec::with_capacity(pieces.len());
        for p in &pieces {
            let mut q = p.clone();
            for (f, body) in &solved_fns {
                q = substitute_function(ctx, &q, f, body)?;
            }
            let q = rational_normal(&q);
            if !q.is_zero() {
                next.push(q);
            }
        }
        pieces = next;
        let step = elimination_step(ctx, &pieces, free_fns, &solved_fns)?;
        match step {
            Some((name, body)) => {
                solved_fns.insert(name, body);
            }
            None => break,
        }
    }
    for p in &pieces {
        for f in free_fns {
            if !solved_fns.contains_key(f) && mentions_function(p, f) {
                return Err(EngineError::Shape(format!(
                    "free function `{f}` is not eliminable from the split conditions"
                )));
            }
        }
    }

    // split by discrete carriers and assemble the linear system
    let nc = constants.len();
    let mut rows: Vec<Vec<Rational>> = Vec::new();
    let mut rhs: Vec<Rational> = Vec::new();
    for p in &pieces {
        let mut by_carrier: BTreeMap<Expr, (Vec<Rational>, Rational)> = BTreeMap::new();
        for t in term_list(p) {
            let (c, fs) = split_coeff(&t);
            let mut pidx: Option<usize> = None;
            let mut carrier = Vec::new();
            for f in &fs {
                let (b, ex) = base_exp(f);
                if let Expr::Param(name) = b {
                    if let Some(i) = constants.iter().position(|x| x == name) {
                        if pidx.is_some() || ex != Rational::one() {
                            return Err(EngineError::NonlinearAnsatz(format!(
                                "term {}",
                                render(ctx, &t)
                            )));
                        }
                        pidx = Some(i);
                        continue;
                    }
                }
                for name in constants {
                    if mentions_param(f, name) {
                        return Err(EngineError::NonlinearAnsatz(format!(
                            "term {}",
                            render(ctx, &t)
                        )));
                    }
                }
                carrier.push(f.clone());
            }
            let entry = by_carrier
                .entry(mul(carrier))
                .or_insert_with(|| (vec![Rational::zero(); nc], Rational::zero()));
            match pidx {
                Some(i) => entry.0[i] += c,
                None => entry.1 += c,
            }
        }
        for (_carrier, (row, aff)) in by_carrier {
            if row.iter().all(|x| x.is_zero()) && aff.is_zero() {
                continue;
            }
            rows.push(row);
            rhs.push(-aff);
        }
    }

    let (consistent, particular, basis) = if rows.is_empty() {
        let mut basis = Vec::with_capacity(nc);
        for i in 0..nc {
            let mut v = vec![Rational::zero(); nc];
            v[i] = Rational::one();
            basis.push(v);
        }
        (true, vec![Rational::zero(); nc], basis)
    } else {
        match linsys::solve(rows, rhs) {
            Some(s) => (true, s.particular, s.nullspace),
            None => (false, vec![Rational::zero(); nc], Vec::new()),
        }
    };
    let free_functions = free_fns
        .iter()
        .filter(|f| !solved_fns.contains_key(*f))
        .cloned()
        .collect();
    Ok(LinearSolution {
        consistent,
        constants: constants.to_vec(),
        particular,
        basis,
        solved_functions: solved_fns,
        free_functions,
    })
}

/// Groups the numerator terms of `e` by their continuous-variable and jet
/// factors; each group's coefficient must vanish separately.
fn split_pieces(e: &Expr) -> Vec<Expr> {
    let (num, _den) = quotient_split(&rational_normal(e));
    let mut groups: BTreeMap<Expr, Vec<Expr>> = BTreeMap::new();
    for t in term_list(&num) {
        let (c, fs) = split_coeff(&t);
        let mut key = Vec::new();
        let mut rest = vec![Expr::Num(c)];
        for f in fs {
            let (b, _) = base_exp(&f);
            if matches!(b, Expr::ContVar(_) | Expr::Jet(_)) {
                key.push(f);
            } else {
                rest.push(f);
            }
        }
        groups.entry(mul(key)).or_default().push(mul(rest));
    }
    groups
        .into_values()
        .map(|ps| rational_normal(&add(ps)))
        .filter(|p| !p.is_zero())
        .collect()
}

/// One elimination: find a piece `c * f(args) + rest = 0` where `c` is a
/// rational times alternating signs and `rest` is free of `f`, and solve
/// for the base application of `f`.
fn elimination_step(
    ctx: &Context,
    pieces: &[Expr],
    free_fns: &[String],
    solved: &BTreeMap<String, Expr>,
) -> Result<Option<(String, Expr)>, EngineError> {
    for p in pieces {
        let ts = term_list(p);
        'terms: for t in &ts {
            let (c, fs) = split_coeff(t);
            let mut app: Option<&FuncApp> = None;
            let mut signs = Vec::new();
            for f in &fs {
                match f {
                    Expr::Func(g)
                        if free_fns.contains(&g.name) && !solved.contains_key(&g.name) =>
                    {
                        if app.is_some() {
                            continue 'terms;
                        }
                        app = Some(g);
                    }
                    Expr::AltSign(_) => signs.push(f.clone()),
                    _ => continue 'terms,
                }
            }
            let Some(g) = app else { continue };
            if g.derivs.iter().any(|&d| d > 0) {
                continue;
            }
            let rest = add(ts.iter().filter(|x| *x != t).cloned().collect());
            if mentions_function(&rest, &g.name) {
                continue;
            }
            let roles = match slot_roles(ctx, &g.name) {
                Ok(r) => r,
                Err(_) => continue,
            };
            let off = match app_offsets(ctx, &roles, g) {
                Ok(o) => o,
                Err(_) => continue,
            };
            // alternating signs square to one, so the inverse of the
            // coefficient is its own sign part over the rational part
            let inv = mul2(Expr::Num(c.recip()), mul(signs));
            let at_args = neg(mul2(inv, rest));
            if !atoms(&at_args).is_empty() {
                continue;
            }
            let back: MultiIndexS = off.iter().map(|k| -k).collect();
            let body = rational_normal(&s_multi(ctx, &at_args, &back)?);
            return Ok(Some((g.name.clone(), body)));
        }
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// point-symmetry solver

/// Point symmetries of a first-order scalar lattice equation, solved over
/// the documented carrier ansatz.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub ctx: Context,
    pub resolved: Vec<Expr>,
    pub conditions: Vec<Expr>,
    pub consistent: bool,
    /// one field per basis vector of the solution space, then one per
    /// surviving free function
    pub generators: Vec<VectorField>,
    pub free_functions: Vec<String>,
}

/// Runs the full pipeline: generic point ansatz `xi(x, n, u) d/dx +
/// phi(x, n, u) d/du`, staged determining equations, carrier expansion
/// (constants on `{1, (-1)^n, x, x (-1)^n}` for the field-side unknowns,
/// free lattice functions on `{1, x}` for `xi`), and the exact linear
/// solve. Completeness is relative to this ansatz.
pub fn solve_point(ctx: &Context, sys: &DDESystem) -> Result<SolveReport, EngineError> {
    // generic point ansatz
    let mut ctx1 = ctx.clone();
    let tname = ctx.continuous[0].clone();
    let nname = ctx.discrete[0].clone();
    let uname = ctx.dependent[0].clone();
    let xi_name = fresh_name(&ctx1, "xi");
    ctx1.functions.push(FunctionSig {
        name: xi_name.clone(),
        args: vec![tname.clone(), nname.clone(), uname.clone()],
    });
    let phi_name = fresh_name(&ctx1, "phi");
    ctx1.functions.push(FunctionSig {
        name: phi_name.clone(),
        args: vec![tname, nname, uname],
    });
    ctx1.validate()?;
    let point_app = |name: &str| {
        Expr::Func(FuncApp {
            name: name.to_string(),
            derivs: vec![0, 0, 0],
            args: vec![
                Expr::ContVar(0),
                Expr::DiscVar(0),
                Expr::jet(JetAtom::base(Namespace::Dependent, 0, 1, 1)),
            ],
        })
    };
    let ansatz = VectorField {
        xi: vec![point_app(&xi_name)],
        phi: vec![point_app(&phi_name)],
    };
    let det = determining_equations(&ctx1, sys, &ansatz)?;

    // classify the surviving unknowns by the side they appear on
    let mut xi_fns: BTreeSet<String> = BTreeSet::new();
    let mut phi_fns: BTreeSet<String> = BTreeSet::new();
    for e in &det.field.xi {
        collect_fn_names(e, &mut xi_fns);
    }
    for e in &det.field.phi {
        collect_fn_names(e, &mut phi_fns);
    }
    xi_fns.retain(|f| ctx.function(f).is_none());
    phi_fns.retain(|f| ctx.function(f).is_none());
    if let Some(shared) = xi_fns.intersection(&phi_fns).next() {
        return Err(EngineError::Shape(format!(
            "unknown `{shared}` appears in both xi and phi; the carrier ansatz cannot separate it"
        )));
    }

    // carrier expansions
    let mut ctx2 = det.ctx.clone();
    let mut constants: Vec<String> = Vec::new();
    let mut free_fns: Vec<String> = Vec::new();
    let mut expansions: Vec<(String, Expr)> = Vec::new();
    let killed: BTreeSet<(String, usize)> = det.killed.iter().cloned().collect();
    for name in phi_fns.iter().chain(xi_fns.iter()) {
        let roles = slot_roles(&det.ctx, name)?;
        let mut dep_live = false;
        for (s, role) in roles.iter().enumerate() {
            if matches!(role, SlotRole::Dep(_)) && !killed.contains(&(name.clone(), s)) {
                dep_live = true;
            }
        }
        let on_xi = xi_fns.contains(name);
        if dep_live && on_xi {
            return Err(EngineError::Shape(format!(
                "unknown `{name}` keeps live dependence on the field variable; \
                 the carrier ansatz does not cover it"
            )));
        }
        let t = Expr::ContVar(0);
        let s = Expr::AltSign(0);
        if on_xi {
            // free lattice functions on the carriers 1 and x
            let f0 = fresh_name(&ctx2, &format!("{name}0"));
            ctx2.functions.push(FunctionSig {
                name: f0.clone(),
                args: vec![ctx.discrete[0].clone()],
            });
            let f1 = fresh_name(&ctx2, &format!("{name}1"));
            ctx2.functions.push(FunctionSig {
                name: f1.clone(),
                args: vec![ctx.discrete[0].clone()],
            });
            let app = |fname: &str| {
                Expr::Func(FuncApp {
                    name: fname.to_string(),
                    derivs: vec![0],
                    args: vec![Expr::DiscVar(0)],
                })
            };
            let body = add2(app(&f0), mul2(app(&f1), t));
            free_fns.push(f0);
            free_fns.push(f1);
            expansions.push((name.clone(), body));
        } else {
            // constants on the four carriers, doubled when the unknown
            // still depends on the field linearly
            let carriers = [
                Expr::one(),
                s.clone(),
                t.clone(),
                mul2(t.clone(), s.clone()),
            ];
            let mut terms = Vec::new();
            let push_block = |ctx2: &mut Context,
                                  constants: &mut Vec<String>,
                                  terms: &mut Vec<Expr>,
                                  extra: Option<Expr>| {
                for (k, carrier) in carriers.iter().enumerate() {
                    let pname = fresh_name(ctx2, &format!("{name}{k}"));
                    ctx2.parameters.push(Parameter {
                        name: pname.clone(),
                        positive: false,
                    });
                    constants.push(pname.clone());
                    let mut fs = vec![Expr::param(&pname), carrier.clone()];
                    if let Some(x) = &extra {
                        fs.push(x.clone());
                    }
                    terms.push(mul(fs));
                }
            };
            push_block(&mut ctx2, &mut constants, &mut terms, None);
            if dep_live {
                let base = Expr::jet(JetAtom::base(Namespace::Dependent, 0, 1, 1));
                push_block(&mut ctx2, &mut constants, &mut terms, Some(base));
            }
            expansions.push((name.clone(), add(terms)));
        }
    }
    ctx2.validate()?;

    // expand the conditions and solve
    let mut conds2 = Vec::with_capacity(det.conditions.len());
    for c in &det.conditions {
        let mut e = c.clone();
        for (name, body) in &expansions {
            e = substitute_function(&ctx2, &e, name, body)?;
        }
        conds2.push(rational_normal(&e));
    }
    let sol = solve_linear_ansatz(&ctx2, &conds2, &constants, &free_fns)?;

    let mut generators = Vec::new();
    if sol.consistent {
        let assemble = |assign: &[Rational], keep: Option<&str>| -> Result<VectorField, EngineError> {
            let build = |e: &Expr| -> Result<Expr, EngineError> {
                let mut x = e.clone();
                for (name, body) in &expansions {
                    x = substitute_function(&ctx2, &x, name, body)?;
                }
                for (f, body) in &sol.solved_functions {
                    x = substitute_function(&ctx2, &x, f, body)?;
                }
                for f in &sol.free_functions {
                    if Some(f.as_str()) == keep {
                        continue;
                    }
                    x = substitute_function(&ctx2, &x, f, &Expr::zero())?;
                }
                for (i, name) in constants.iter().enumerate() {
                    x = subst_param(&x, name, &Expr::Num(assign[i].clone()))?;
                }
                Ok(rational_normal(&x))
            };
            Ok(VectorField {
                xi: det.field.xi.iter().map(&build).collect::<Result<_, _>>()?,
                phi: det.field.phi.iter().map(&build).collect::<Result<_, _>>()?,
            })
        };
        if sol.particular.iter().any(|x| !x.is_zero()) {
            generators.push(assemble(&sol.particular, None)?);
        }
        for v in &sol.basis {
            generators.push(assemble(v, None)?);
        }
        let zeros = vec![Rational::zero(); constants.len()];
        for f in &sol.free_functions {
            generators.push(assemble(&zeros, Some(f))?);
        }
        generators.retain(|g| {
            g.xi.iter().any(|e| !e.is_zero()) || g.phi.iter().any(|e| !e.is_zero())
        });
    }

    Ok(SolveReport {
        ctx: ctx2,
        resolved: det.resolved.clone(),
        conditions: det.conditions.clone(),
        consistent: sol.consistent,
        generators,
        free_functions: sol.free_functions.clone(),
    })
}

// ---------------------------------------------------------------------------
// small shared helpers

fn term_list(e: &Expr) -> Vec<Expr> {
    if e.is_zero() {
        return Vec::new();
    }
    match e {
        Expr::Sum(ts) => ts.clone(),
        _ => vec![e.clone()],
    }
}

/// Clears denominators, divides out the rational content, and makes the
/// leading term positive.
fn primitive_normal(e: &Expr) -> Expr {
    let (num, _den) = quotient_split(&rational_normal(e));
    let ts = term_list(&num);
    if ts.is_empty() {
        return Expr::zero();
    }
    let mut g = BigInt::zero();
    let mut l = BigInt::one();
    for t in &ts {
        let (c, _) = split_coeff(t);
        g = g.gcd(c.numer());
        l = l.lcm(c.denom());
    }
    if g.is_zero() {
        return Expr::zero();
    }
    let mut scale = Rational::new(l, g);
    let (c0, _) = split_coeff(&ts[0]);
    if c0.is_negative() {
        scale = -scale;
    }
    rational_normal(&mul2(Expr::Num(scale), num))
}

pub(crate) fn fresh_name(ctx: &Context, base: &str) -> String {
    if !ctx.name_taken(base) {
        return base.to_string();
    }
    let mut k = 2usize;
    loop {
        let name = format!("{base}{k}");
        if !ctx.name_taken(&name) {
            return name;
        }
        k += 1;
    }
}
