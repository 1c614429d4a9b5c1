//! Systems of DDEs and reduction modulo their solved (Kovalevskaya) forms.
//!
//! A solved form isolates a pure derivative (differential sense) or an
//! extreme shift (difference sense) of one variable. Reduction repeatedly
//! replaces every atom lying in a solved form's elimination cone by the
//! correspondingly shifted and derived right-hand side, which is how "on
//! all solutions" identities are decided.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::calculus::{d_multi, s_multi};
use crate::context::{Context, JetAtom, Namespace};
use crate::error::EngineError;
use crate::expr::{self, atoms, mul2, rational_normal, sub, vanishes, Expr};
use crate::render::render;

/// Substitution rounds before reduction is declared non-terminating.
pub const REDUCTION_DEPTH_CAP: u32 = 64;

/// One solved form `lead = rhs`, certified against equation `eq` through
/// the exact identity `S_{shift_off} F_eq = multiplier * (lead - rhs)`.
/// The shift offset lets backward forms (e.g. a quad-graph's lower corner)
/// certify against the base equation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolvedForm {
    pub eq: usize,
    pub shift_off: Vec<i32>,
    pub lead: JetAtom,
    pub rhs: Expr,
    pub multiplier: Expr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FormKind {
    /// Lead is a pure derivative; shifts are unconstrained in the cone.
    Differential,
    /// Lead is a pure shift; discrete directions where the lead shift is
    /// zero are pinned to zero in the cone.
    Difference,
}

impl SolvedForm {
    fn kind(&self) -> Result<FormKind, EngineError> {
        let has_deriv = self.lead.deriv.iter().any(|&k| k > 0);
        let has_shift = self.lead.shift.iter().any(|&k| k != 0);
        match (has_deriv, has_shift) {
            (true, false) => {
                if self.lead.deriv.iter().filter(|&&k| k > 0).count() == 1 {
                    Ok(FormKind::Differential)
                } else {
                    Err(EngineError::BadSolvedForm(
                        "differential lead must be a pure derivative in one direction"
                            .to_string(),
                    ))
                }
            }
            (false, true) => Ok(FormKind::Difference),
            _ => Err(EngineError::BadSolvedForm(
                "lead must isolate either a pure derivative or a pure shift".to_string(),
            )),
        }
    }

    /// Whether `a` is eliminable through this form.
    fn in_cone(&self, kind: FormKind, a: &JetAtom) -> bool {
        if a.namespace != self.lead.namespace || a.dep != self.lead.dep {
            return false;
        }
        if a.deriv.iter().zip(&self.lead.deriv).any(|(x, k)| x < k) {
            return false;
        }
        a.shift.iter().zip(&self.lead.shift).all(|(x, k)| {
            if *k > 0 {
                x >= k
            } else if *k < 0 {
                x <= k
            } else {
                kind == FormKind::Differential || *x == 0
            }
        })
    }

    /// `D^{a.deriv - lead.deriv} S^{a.shift - lead.shift} rhs` for an
    /// in-cone atom `a`.
    pub(crate) fn replacement(&self, ctx: &Context, a: &JetAtom) -> Result<Expr, EngineError> {
        let ds: Vec<i32> = a
            .shift
            .iter()
            .zip(&self.lead.shift)
            .map(|(x, k)| x - k)
            .collect();
        let dd: Vec<u32> = a
            .deriv
            .iter()
            .zip(&self.lead.deriv)
            .map(|(x, k)| x - k)
            .collect();
        let shifted = s_multi(ctx, &self.rhs, &ds)?;
        d_multi(ctx, &shifted, &dd)
    }

    /// Graded shift weight over the lead's nonzero discrete directions;
    /// new in-cone atoms produced by a substitution strictly decrease it.
    fn weight(&self, shift: &[i32]) -> i64 {
        shift
            .iter()
            .zip(&self.lead.shift)
            .map(|(x, k)| (*x as i64) * (k.signum() as i64))
            .sum()
    }
}

/// Equations `F_alpha = 0` with optional solved forms for reduction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DDESystem {
    pub equations: Vec<Expr>,
    pub solved: Vec<SolvedForm>,
}

impl DDESystem {
    pub fn new(equations: Vec<Expr>) -> Self {
        DDESystem {
            equations,
            solved: Vec::new(),
        }
    }

    /// Attaches solved forms after validating each one: the lead shape, the
    /// certifying identity against its equation, and cone-freeness of every
    /// right-hand side and multiplier (which is what makes reduction both
    /// sound and terminating).
    pub fn with_solved_forms(
        ctx: &Context,
        equations: Vec<Expr>,
        solved: Vec<SolvedForm>,
    ) -> Result<Self, EngineError> {
        let sys = DDESystem { equations, solved };
        for (i, f) in sys.solved.iter().enumerate() {
            let kind = f.kind()?;
            if f.eq >= sys.equations.len() {
                return Err(EngineError::BadSolvedForm(format!(
                    "solved form {i} names equation {} of {}",
                    f.eq,
                    sys.equations.len()
                )));
            }
            if f.lead.deriv.len() != ctx.p1()
                || f.lead.shift.len() != ctx.p2()
                || f.shift_off.len() != ctx.p2()
            {
                return Err(EngineError::BadSolvedForm(format!(
                    "solved form {i} has index arity not matching the context"
                )));
            }
            if vanishes(&f.multiplier) {
                return Err(EngineError::BadSolvedForm(format!(
                    "solved form {i} has a vanishing multiplier"
                )));
            }
            let shifted_eq = s_multi(ctx, &sys.equations[f.eq], &f.shift_off)?;
            let claim = mul2(
                f.multiplier.clone(),
                sub(Expr::jet(f.lead.clone()), f.rhs.clone()),
            );
            if !vanishes(&sub(shifted_eq, claim)) {
                return Err(EngineError::BadSolvedForm(format!(
                    "solved form {i} does not certify against its equation: \
                     S_off(F) != multiplier*(lead - rhs)"
                )));
            }
            // termination grading for difference forms: an rhs atom of the
            // lead variable whose pinned components are all zero must sit
            // strictly below the lead in the graded shift weight
            if kind == FormKind::Difference {
                for a in atoms(&f.rhs) {
                    let same_var =
                        a.namespace == f.lead.namespace && a.dep == f.lead.dep;
                    let unpinned_zero = a
                        .shift
                        .iter()
                        .zip(&f.lead.shift)
                        .all(|(x, k)| *k != 0 || *x == 0);
                    if same_var
                        && unpinned_zero
                        && f.weight(&a.shift) >= f.weight(&f.lead.shift)
                    {
                        return Err(EngineError::BadSolvedForm(format!(
                            "solved form {i}: rhs atom {} is not below the lead \
                             in the shift grading",
                            render(ctx, &Expr::jet(a))
                        )));
                    }
                }
            }
        }
        // cross-check: no rhs may contain an eliminable atom (multipliers
        // are certification-only and may mention the lead)
        for (i, f) in sys.solved.iter().enumerate() {
            for a in atoms(&f.rhs) {
                if let Some(g) = sys.form_for(&a) {
                    return Err(EngineError::BadSolvedForm(format!(
                        "solved form {i} contains atom {} eliminable by the \
                         form with lead {}",
                        render(ctx, &Expr::jet(a)),
                        render(ctx, &Expr::jet(g.lead.clone()))
                    )));
                }
            }
        }
        Ok(sys)
    }

    /// First declared solved form whose cone contains `a`.
    pub(crate) fn form_for(&self, a: &JetAtom) -> Option<&SolvedForm> {
        self.solved.iter().find(|f| {
            f.kind().map(|k| f.in_cone(k, a)).unwrap_or(false)
        })
    }

    /// The dependent variables this system constrains, for shape checks.
    pub fn arity(&self) -> usize {
        self.equations.len()
    }
}

/// Normalizes `e` modulo the system: every eliminable atom is replaced by
/// its solved-form image, simultaneously per round, until fixpoint.
pub fn reduce_mod(ctx: &Context, e: &Expr, sys: &DDESystem) -> Result<Expr, EngineError> {
    if sys.solved.is_empty() {
        return Err(EngineError::Shape(
            "reduction requires a system with solved forms".to_string(),
        ));
    }
    let mut cur = e.clone();
    for _ in 0..REDUCTION_DEPTH_CAP {
        let mut bindings: BTreeMap<JetAtom, Expr> = BTreeMap::new();
        for a in atoms(&cur) {
            if let Some(f) = sys.form_for(&a) {
                let r = f.replacement(ctx, &a)?;
                bindings.insert(a, r);
            }
        }
        if bindings.is_empty() {
            return Ok(cur);
        }
        cur = replace_atoms(&cur, &bindings)?;
        cur = rational_normal(&cur);
    }
    Err(EngineError::ReductionDepthExceeded(REDUCTION_DEPTH_CAP))
}

/// Raw atom replacement without the auxiliary-completeness contract of
/// `substitute`; reduction intentionally binds only the eliminable atoms.
pub(crate) fn replace_atoms(e: &Expr, map: &BTreeMap<JetAtom, Expr>) -> Result<Expr, EngineError> {
    expr::subst_rebuild(e, &mut |node| match node {
        Expr::Jet(a) => map.get(a).cloned(),
        _ => None,
    })
}

/// Convenience for tests and callers assembling scalar evolution systems.
pub fn scalar_solved(
    ctx: &Context,
    equation: Expr,
    lead: JetAtom,
    rhs: Expr,
    multiplier: Expr,
) -> Result<DDESystem, EngineError> {
    DDESystem::with_solved_forms(
        ctx,
        alloc::vec![equation],
        alloc::vec![SolvedForm {
            eq: 0,
            shift_off: alloc::vec![0; ctx.p2()],
            lead,
            rhs,
            multiplier,
        }],
    )
}

/// True when `a` is the zero-jet atom of a dependent variable.
pub fn is_base_atom(a: &JetAtom) -> bool {
    a.namespace == Namespace::Dependent
        && a.deriv.iter().all(|&k| k == 0)
        && a.shift.iter().all(|&k| k == 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::FunctionSig;
    use crate::parse::parse;
    use alloc::vec;

    fn volterra() -> (Context, DDESystem) {
        let ctx = Context {
            continuous: vec!["t".to_string()],
            discrete: vec!["n".to_string()],
            dependent: vec!["u".to_string()],
            ..Context::default()
        };
        let f = parse(&ctx, "u[1;0]/u - u[0;1] + u[0;-1]").unwrap();
        let sys = scalar_solved(
            &ctx,
            f,
            JetAtom {
                namespace: Namespace::Dependent,
                dep: 0,
                deriv: vec![1],
                shift: vec![0],
            },
            parse(&ctx, "u*(u[0;1] - u[0;-1])").unwrap(),
            parse(&ctx, "1/u").unwrap(),
        )
        .unwrap();
        (ctx, sys)
    }

    #[test]
    fn volterra_solved_form_validates() {
        let (_, sys) = volterra();
        assert_eq!(sys.solved.len(), 1);
    }

    #[test]
    fn bad_solved_form_rejected() {
        let ctx = Context {
            continuous: vec!["t".to_string()],
            discrete: vec!["n".to_string()],
            dependent: vec!["u".to_string()],
            ..Context::default()
        };
        let f = parse(&ctx, "u[1;0]/u - u[0;1] + u[0;-1]").unwrap();
        let r = scalar_solved(
            &ctx,
            f,
            JetAtom {
                namespace: Namespace::Dependent,
                dep: 0,
                deriv: vec![1],
                shift: vec![0],
            },
            parse(&ctx, "u*(u[0;1] + u[0;-1])").unwrap(),
            parse(&ctx, "1/u").unwrap(),
        );
        assert!(matches!(r, Err(EngineError::BadSolvedForm(_))));
    }

    #[test]
    fn shifted_and_derived_reduction() {
        let (ctx, sys) = volterra();
        // u_1' under the shifted solved form
        let e = parse(&ctx, "u[1;1]").unwrap();
        let got = reduce_mod(&ctx, &e, &sys).unwrap();
        assert_eq!(got, parse(&ctx, "u[0;1]*(u[0;2] - u)").unwrap());
        // u'' expands through D_t of the rhs with inner primes re-reduced
        let e2 = parse(&ctx, "u[2;0]").unwrap();
        let got2 = reduce_mod(&ctx, &e2, &sys).unwrap();
        let want = parse(
            &ctx,
            "u*(u[0;1] - u[0;-1])^2 + u*(u[0;1]*(u[0;2] - u) - u[0;-1]*(u - u[0;-2]))",
        )
        .unwrap();
        assert!(vanishes(&sub(got2, want)));
    }

    #[test]
    fn residue_of_non_solution_survives() {
        let (ctx, sys) = volterra();
        let e = parse(&ctx, "u[1;0] - u*(u[0;1] - u[0;-1]) + u[0;1]").unwrap();
        let got = reduce_mod(&ctx, &e, &sys).unwrap();
        assert_eq!(got, parse(&ctx, "u[0;1]").unwrap());
    }

    fn dkdv_ctx() -> Context {
        Context {
            discrete: vec!["m".to_string(), "n".to_string()],
            dependent: vec!["u".to_string()],
            functions: vec![
                FunctionSig {
                    name: "a".to_string(),
                    args: vec!["m".to_string()],
                },
                FunctionSig {
                    name: "b".to_string(),
                    args: vec!["n".to_string()],
                },
            ],
            ..Context::default()
        }
    }

    fn dkdv_f(ctx: &Context) -> Expr {
        parse(ctx, "u[1,0] - u[0,1] - (a(m) - b(n))/(u - u[1,1])").unwrap()
    }

    #[test]
    fn dkdv_line_form_reduces_next_shift() {
        let ctx = dkdv_ctx();
        let sys = scalar_solved(
            &ctx,
            dkdv_f(&ctx),
            JetAtom {
                namespace: Namespace::Dependent,
                dep: 0,
                deriv: vec![],
                shift: vec![1, 0],
            },
            parse(&ctx, "u[0,1] + (a(m) - b(n))/(u - u[1,1])").unwrap(),
            Expr::one(),
        )
        .unwrap();
        let got = reduce_mod(&ctx, &parse(&ctx, "u[2,0]").unwrap(), &sys).unwrap();
        // S_m of the rhs, with the u[1,0] it contains reduced once more;
        // u[1,1] and u[2,1] are off the pinned line and must survive
        let want = parse(
            &ctx,
            "u[1,1] + (a(m+1) - b(n))/(u[0,1] + (a(m) - b(n))/(u - u[1,1]) - u[2,1])",
        )
        .unwrap();
        assert!(vanishes(&sub(got, want)));
    }

    fn dkdv_corner_system(ctx: &Context) -> DDESystem {
        let f = dkdv_f(ctx);
        let fwd = SolvedForm {
            eq: 0,
            shift_off: vec![0, 0],
            lead: JetAtom {
                namespace: Namespace::Dependent,
                dep: 0,
                deriv: vec![],
                shift: vec![1, 1],
            },
            rhs: parse(ctx, "u - (a(m) - b(n))/(u[1,0] - u[0,1])").unwrap(),
            multiplier: parse(ctx, "-(u[1,0] - u[0,1])/(u - u[1,1])").unwrap(),
        };
        let bwd = SolvedForm {
            eq: 0,
            shift_off: vec![-1, -1],
            lead: JetAtom {
                namespace: Namespace::Dependent,
                dep: 0,
                deriv: vec![],
                shift: vec![-1, -1],
            },
            rhs: parse(ctx, "u + (a(m-1) - b(n-1))/(u[0,-1] - u[-1,0])").unwrap(),
            multiplier: parse(ctx, "(u[0,-1] - u[-1,0])/(u[-1,-1] - u)").unwrap(),
        };
        DDESystem::with_solved_forms(ctx, vec![f], vec![fwd, bwd]).unwrap()
    }

    #[test]
    fn dkdv_corner_forms_decide_solutions() {
        let ctx = dkdv_ctx();
        let sys = dkdv_corner_system(&ctx);
        // the equation itself vanishes on solutions
        let r = reduce_mod(&ctx, &dkdv_f(&ctx), &sys).unwrap();
        assert!(r.is_zero(), "residue: {r:?}");
        // and so does its double back-shift
        let back = s_multi(&ctx, &dkdv_f(&ctx), &vec![-1, -1]).unwrap();
        let r2 = reduce_mod(&ctx, &back, &sys).unwrap();
        assert!(vanishes(&r2), "residue: {r2:?}");
    }

    #[test]
    fn depth_cap_catches_hand_built_loops() {
        let ctx = Context {
            discrete: vec!["n".to_string()],
            dependent: vec!["u".to_string()],
            ..Context::default()
        };
        // invalid by construction (rhs lies inside its own cone); assembled
        // directly to exercise the guard
        let sys = DDESystem {
            equations: vec![parse(&ctx, "u[1] - u[2]").unwrap()],
            solved: vec![SolvedForm {
                eq: 0,
                shift_off: vec![0],
                lead: JetAtom {
                    namespace: Namespace::Dependent,
                    dep: 0,
                    deriv: vec![],
                    shift: vec![1],
                },
                rhs: parse(&ctx, "u[2]").unwrap(),
                multiplier: Expr::one(),
            }],
        };
        let r = reduce_mod(&ctx, &parse(&ctx, "u[1]").unwrap(), &sys);
        assert!(matches!(r, Err(EngineError::ReductionDepthExceeded(_))));
        // the validator refuses the same declaration
        let v = DDESystem::with_solved_forms(
            &ctx,
            sys.equations.clone(),
            sys.solved.clone(),
        );
        assert!(matches!(v, Err(EngineError::BadSolvedForm(_))));
    }

    #[test]
    fn validator_message_names_the_atom(){
        let ctx = dkdv_ctx();
        // certifies fine but the rhs atom sits above the lead in the grading
        let f = parse(&ctx, "u[1,1] - u[2,2]").unwrap();
        let bad = SolvedForm {
            eq: 0,
            shift_off: vec![0, 0],
            lead: JetAtom {
                namespace: Namespace::Dependent,
                dep: 0,
                deriv: vec![],
                shift: vec![1, 1],
            },
            rhs: parse(&ctx, "u[2,2]").unwrap(),
            multiplier: Expr::one(),
        };
        match DDESystem::with_solved_forms(&ctx, vec![f], vec![bad]) {
            Err(EngineError::BadSolvedForm(m)) => {
                assert!(m.contains("u[2,2]"), "message: {m}")
            }
            other => panic!("expected BadSolvedForm, got {other:?}"),
        }
    }
}
