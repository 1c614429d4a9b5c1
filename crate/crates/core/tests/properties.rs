//! Randomized structural identities of the calculus.
//!
//! Every assertion here demands an exact zero after normalization; there is
//! no numeric tolerance anywhere. The generators deliberately include
//! lattice-dependent coefficients, alternating signs and (where the identity
//! allows it) rational and transcendental subexpressions, so the suites
//! exercise the same shapes the worked systems produce.

use ddnoether_core::calculus::{
    apply_ds, by_parts, by_parts_reconstruct, d_multi, divergence, euler, euler_all, frechet,
    frechet_adjoint, s_multi, shift, total_derivative, ByPartsTerm, DivergencePair,
};
use ddnoether_core::expr::{add2, exp_, mul2, powi, sin_, sub, vanishes};
use ddnoether_core::symmetry::prolong_apply;
use ddnoether_core::{
    Context, EvolutionaryField, Expr, Generator, JetAtom, Namespace, ProlongationMode,
    ProlongedField, VectorField,
};
use proptest::collection::vec as pvec;
use proptest::prelude::*;

fn ctx1() -> Context {
    Context {
        continuous: vec!["t".to_string()],
        discrete: vec!["n".to_string()],
        dependent: vec!["u".to_string()],
        ..Context::default()
    }
}

fn ctx2() -> Context {
    Context {
        continuous: vec!["t".to_string(), "x".to_string()],
        discrete: vec!["m".to_string(), "n".to_string()],
        dependent: vec!["u".to_string()],
        ..Context::default()
    }
}

fn uat(deriv: Vec<u32>, shift: Vec<i32>) -> Expr {
    Expr::jet(JetAtom {
        namespace: Namespace::Dependent,
        dep: 0,
        deriv,
        shift,
    })
}

fn leaf1() -> BoxedStrategy<Expr> {
    prop_oneof![
        4 => (0u32..=2, -2i32..=2).prop_map(|(k, s)| uat(vec![k], vec![s])),
        1 => Just(Expr::ContVar(0)),
        1 => Just(Expr::DiscVar(0)),
        1 => Just(Expr::AltSign(0)),
        2 => (-3i64..=3).prop_map(Expr::int),
    ]
    .boxed()
}

fn compose(leaf: BoxedStrategy<Expr>, size: u32) -> BoxedStrategy<Expr> {
    leaf.prop_recursive(2, size, 2, |e| {
        prop_oneof![
            (e.clone(), e.clone()).prop_map(|(a, b)| add2(a, b)),
            (e.clone(), e.clone()).prop_map(|(a, b)| mul2(a, b)),
            e.prop_map(|a| powi(a, 2)),
        ]
        .boxed()
    })
    .boxed()
}

fn poly1() -> BoxedStrategy<Expr> {
    compose(leaf1(), 12)
}

/// Smaller polynomials for the suites that chain Euler and Frechet passes.
fn poly1_small() -> BoxedStrategy<Expr> {
    compose(leaf1(), 7)
}

/// A polynomial dressed with one non-polynomial factor or summand. The
/// inverse is taken of `a^2 + 1`, which no normalization step can kill.
fn rich1() -> BoxedStrategy<Expr> {
    let extra = prop_oneof![
        leaf1().prop_map(|a| powi(add2(powi(a, 2), Expr::one()), -1)),
        (0u32..=1, -1i32..=1).prop_map(|(k, s)| sin_(uat(vec![k], vec![s]))),
        (-1i32..=1).prop_map(|s| exp_(uat(vec![0], vec![s]))),
    ];
    (poly1(), extra, any::<bool>())
        .prop_map(|(p, e, as_sum)| if as_sum { add2(p, e) } else { mul2(p, e) })
        .boxed()
}

fn leaf2() -> BoxedStrategy<Expr> {
    prop_oneof![
        4 => (0u32..=1, 0u32..=1, -1i32..=1, -1i32..=1)
            .prop_map(|(k1, k2, s1, s2)| uat(vec![k1, k2], vec![s1, s2])),
        1 => prop_oneof![Just(Expr::ContVar(0)), Just(Expr::ContVar(1))],
        1 => prop_oneof![Just(Expr::DiscVar(0)), Just(Expr::DiscVar(1))],
        1 => prop_oneof![Just(Expr::AltSign(0)), Just(Expr::AltSign(1))],
        2 => (-2i64..=2).prop_map(Expr::int),
    ]
    .boxed()
}

fn poly2() -> BoxedStrategy<Expr> {
    compose(leaf2(), 8)
}

fn rich2() -> BoxedStrategy<Expr> {
    let extra = prop_oneof![
        leaf2().prop_map(|a| powi(add2(powi(a, 2), Expr::one()), -1)),
        leaf2().prop_map(sin_),
    ];
    (poly2(), extra, any::<bool>())
        .prop_map(|(p, e, as_sum)| if as_sum { add2(p, e) } else { mul2(p, e) })
        .boxed()
}

/// Coefficients free of the lattice and of jets, as mode `Regular` requires.
fn xi_regular() -> BoxedStrategy<Expr> {
    pvec(-2i64..=2, 1..=3)
        .prop_map(|cs| {
            let mut e = Expr::zero();
            for (k, c) in cs.into_iter().enumerate() {
                e = add2(e, mul2(Expr::int(c), powi(Expr::ContVar(0), k as i64)));
            }
            e
        })
        .boxed()
}

fn atom2(j1: &[u32], j2: &[i32]) -> JetAtom {
    JetAtom {
        namespace: Namespace::Dependent,
        dep: 0,
        deriv: j1.to_vec(),
        shift: j2.to_vec(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn total_operators_commute_in_all_directions(e in rich2()) {
        let ctx = ctx2();
        let d = |f: &Expr, i: usize| total_derivative(&ctx, f, i).unwrap();
        let s = |f: &Expr, k: usize, step: i32| shift(&ctx, f, k, step).unwrap();

        prop_assert!(vanishes(&sub(d(&d(&e, 0), 1), d(&d(&e, 1), 0))));
        prop_assert!(vanishes(&sub(s(&s(&e, 0, 1), 1, 1), s(&s(&e, 1, 1), 0, 1))));
        for i in 0..2 {
            for k in 0..2 {
                for step in [1, -1] {
                    let a = d(&s(&e, k, step), i);
                    let b = s(&d(&e, i), k, step);
                    prop_assert!(vanishes(&sub(a, b)));
                }
            }
        }
        // forward and backward shifts are inverse to each other
        prop_assert!(vanishes(&sub(s(&s(&e, 0, 1), 0, -1), e.clone())));
        prop_assert!(vanishes(&sub(s(&s(&e, 1, -1), 1, 1), e)));
    }

    #[test]
    fn euler_annihilates_divergences(a in poly1(), b in poly1()) {
        let ctx = ctx1();
        let p = DivergencePair { p1: vec![a], p2: vec![b] };
        let div = divergence(&ctx, &p).unwrap();
        prop_assert!(vanishes(&euler(&ctx, &div, Namespace::Dependent, 0).unwrap()));
    }

    #[test]
    fn euler_annihilates_divergences_in_higher_dimensions(es in pvec(poly2(), 4)) {
        let ctx = ctx2();
        let p = DivergencePair { p1: es[0..2].to_vec(), p2: es[2..4].to_vec() };
        let div = divergence(&ctx, &p).unwrap();
        prop_assert!(vanishes(&euler(&ctx, &div, Namespace::Dependent, 0).unwrap()));
    }

    // E(A.B) = D_A*(B) + D_B*(A) for tuples A, B.
    #[test]
    fn euler_expands_products_by_the_adjoint_rule(
        a in pvec(poly1_small(), 2),
        b in pvec(poly1_small(), 2),
    ) {
        let ctx = ctx1();
        let l = add2(mul2(a[0].clone(), b[0].clone()), mul2(a[1].clone(), b[1].clone()));
        let lhs = euler_all(&ctx, &l).unwrap().pop().unwrap();
        let da = frechet_adjoint(&ctx, &a, &b).unwrap().pop().unwrap();
        let db = frechet_adjoint(&ctx, &b, &a).unwrap().pop().unwrap();
        prop_assert!(vanishes(&sub(lhs, add2(da, db))));
    }

    // A.D_F(B) and B.D_F*(A) differ by a total divergence.
    #[test]
    fn frechet_pairing_is_a_total_divergence(
        f in poly1_small(),
        a in poly1_small(),
        b in poly1_small(),
    ) {
        let ctx = ctx1();
        let fwd = frechet(&ctx, &[f.clone()], &[b.clone()]).unwrap().pop().unwrap();
        let adj = frechet_adjoint(&ctx, &[f], &[a.clone()]).unwrap().pop().unwrap();
        let paired = sub(mul2(a, fwd), mul2(b, adj));
        prop_assert!(vanishes(&euler(&ctx, &paired, Namespace::Dependent, 0).unwrap()));
    }

    // phi[J1 + 1_i; J2] = D_i phi[J1; J2] - (D_i xi^j) u[J1 + 1_j; J2]
    #[test]
    fn case_one_coefficients_obey_the_derivative_recursion(
        xi in pvec(poly2(), 2),
        phi in poly2(),
        j1 in pvec(0u32..=1, 2),
        j2 in pvec(-1i32..=1, 2),
        i in 0usize..2,
    ) {
        let ctx = ctx2();
        let x = Generator::Vector(VectorField { xi: xi.clone(), phi: vec![phi] });
        let pf = ProlongedField::new(&ctx, &x, ProlongationMode::CaseI).unwrap();
        let a = atom2(&j1, &j2);
        let lhs = pf.coefficient(&a.derived(i)).unwrap();
        let mut rhs = total_derivative(&ctx, &pf.coefficient(&a).unwrap(), i).unwrap();
        for (j, xie) in xi.iter().enumerate() {
            let dxi = total_derivative(&ctx, xie, i).unwrap();
            rhs = sub(rhs, mul2(dxi, Expr::jet(a.derived(j))));
        }
        prop_assert!(vanishes(&sub(lhs, rhs)));
    }

    // order-zero coefficients propagate through shifts unchanged
    #[test]
    fn case_one_order_zero_coefficients_shift_plainly(
        xi in pvec(poly2(), 2),
        phi in poly2(),
        j2 in pvec(-1i32..=1, 2),
        k in 0usize..2,
    ) {
        let ctx = ctx2();
        let x = Generator::Vector(VectorField { xi, phi: vec![phi] });
        let pf = ProlongedField::new(&ctx, &x, ProlongationMode::CaseI).unwrap();
        let a = atom2(&[0, 0], &j2);
        let lhs = pf.coefficient(&a.shifted_one(k, 1)).unwrap();
        let rhs = shift(&ctx, &pf.coefficient(&a).unwrap(), k, 1).unwrap();
        prop_assert!(vanishes(&sub(lhs, rhs)));
    }

    // phi[J1; J2 + 1_k] = S_k phi[J1; J2]
    //   + D_J1((S_k xi^i - xi^i) u[1_i; J2 + 1_k])
    //   - (S_k xi^i - xi^i) u[J1 + 1_i; J2 + 1_k]
    #[test]
    fn case_one_coefficients_obey_the_shift_recursion(
        xi in pvec(poly2(), 2),
        phi in poly2(),
        j1 in pvec(0u32..=1, 2),
        j2 in pvec(-1i32..=1, 2),
        k in 0usize..2,
    ) {
        let ctx = ctx2();
        let x = Generator::Vector(VectorField { xi: xi.clone(), phi: vec![phi] });
        let pf = ProlongedField::new(&ctx, &x, ProlongationMode::CaseI).unwrap();
        let a = atom2(&j1, &j2);
        let up = a.shifted_one(k, 1);
        let lhs = pf.coefficient(&up).unwrap();

        let mut rhs = shift(&ctx, &pf.coefficient(&a).unwrap(), k, 1).unwrap();
        let mut inner = Expr::zero();
        for (i, xie) in xi.iter().enumerate() {
            let jump = sub(shift(&ctx, xie, k, 1).unwrap(), xie.clone());
            let mut base = atom2(&[0, 0], &up.shift);
            base.deriv[i] = 1;
            inner = add2(inner, mul2(jump, Expr::jet(base)));
        }
        rhs = add2(rhs, d_multi(&ctx, &inner, &j1).unwrap());
        for (i, xie) in xi.iter().enumerate() {
            let jump = sub(shift(&ctx, xie, k, 1).unwrap(), xie.clone());
            rhs = sub(rhs, mul2(jump, Expr::jet(up.derived(i))));
        }
        prop_assert!(vanishes(&sub(lhs, rhs)));
    }

    // phi[J1 + 1_i; J2] = D_i phi[J1; J2] - (S_J2 D_i xi^j) u[J1 + 1_j; J2],
    // and shifts act on the coefficients atom by atom
    #[test]
    fn case_two_coefficients_obey_the_recursions(
        xi in pvec(poly2(), 2),
        phi in poly2(),
        j1 in pvec(0u32..=1, 2),
        j2 in pvec(-1i32..=1, 2),
        i in 0usize..2,
        k in 0usize..2,
    ) {
        let ctx = ctx2();
        let x = Generator::Vector(VectorField { xi: xi.clone(), phi: vec![phi] });
        let pf = ProlongedField::new(&ctx, &x, ProlongationMode::CaseII).unwrap();
        let a = atom2(&j1, &j2);

        let lhs = pf.coefficient(&a.derived(i)).unwrap();
        let mut rhs = total_derivative(&ctx, &pf.coefficient(&a).unwrap(), i).unwrap();
        for (j, xie) in xi.iter().enumerate() {
            let dxi = total_derivative(&ctx, xie, i).unwrap();
            let moved = s_multi(&ctx, &dxi, &a.shift).unwrap();
            rhs = sub(rhs, mul2(moved, Expr::jet(a.derived(j))));
        }
        prop_assert!(vanishes(&sub(lhs, rhs)));

        let lhs2 = pf.coefficient(&a.shifted_one(k, 1)).unwrap();
        let rhs2 = shift(&ctx, &pf.coefficient(&a).unwrap(), k, 1).unwrap();
        prop_assert!(vanishes(&sub(lhs2, rhs2)));
    }

    #[test]
    fn evolutionary_prolongations_commute_with_total_operators(
        q in poly1(),
        f in rich1(),
    ) {
        let ctx = ctx1();
        let x = Generator::Evolutionary(EvolutionaryField { q: vec![q] });
        let pf = ProlongedField::new(&ctx, &x, ProlongationMode::Regular).unwrap();

        let df = total_derivative(&ctx, &f, 0).unwrap();
        let lhs = pf.apply(&df).unwrap();
        let rhs = total_derivative(&ctx, &pf.apply(&f).unwrap(), 0).unwrap();
        prop_assert!(vanishes(&sub(lhs, rhs)));

        for step in [1, -1] {
            let sf = shift(&ctx, &f, 0, step).unwrap();
            let lhs = pf.apply(&sf).unwrap();
            let rhs = shift(&ctx, &pf.apply(&f).unwrap(), 0, step).unwrap();
            prop_assert!(vanishes(&sub(lhs, rhs)));
        }
    }

    // every mode agrees on a regular field and collapses to
    // xi D_t + (Frechet derivative along the characteristic)
    #[test]
    fn regular_prolongations_collapse_to_the_frechet_derivative(
        xi in xi_regular(),
        phi in poly1(),
        f in poly1(),
    ) {
        let ctx = ctx1();
        let q = sub(phi.clone(), mul2(xi.clone(), uat(vec![1], vec![0])));
        let fr = frechet(&ctx, &[f.clone()], &[q.clone()]).unwrap().pop().unwrap();
        let expected = add2(
            mul2(xi.clone(), total_derivative(&ctx, &f, 0).unwrap()),
            fr.clone(),
        );

        let x = Generator::Vector(VectorField { xi: vec![xi], phi: vec![phi] });
        for mode in [
            ProlongationMode::Regular,
            ProlongationMode::CaseI,
            ProlongationMode::CaseII,
        ] {
            let got = prolong_apply(&ctx, &x, &f, mode).unwrap();
            prop_assert!(vanishes(&sub(got, expected.clone())));
        }

        let ev = Generator::Evolutionary(EvolutionaryField { q: vec![q] });
        let got = prolong_apply(&ctx, &ev, &f, ProlongationMode::Regular).unwrap();
        prop_assert!(vanishes(&sub(got, fr)));
    }

    #[test]
    fn by_parts_reconstructs_its_input(
        spec in pvec((poly1_small(), 0u32..=2, -2i32..=2, 0usize..=1), 1..=3),
        targets in pvec(poly1_small(), 2),
    ) {
        let ctx = ctx1();
        let mut terms = Vec::new();
        let mut direct = Expr::zero();
        for (coeff, d, s, w) in spec {
            let moved = apply_ds(&ctx, &targets[w], &vec![d], &vec![s]).unwrap();
            direct = add2(direct, mul2(coeff.clone(), moved));
            terms.push(ByPartsTerm { coeff, deriv: vec![d], shift: vec![s], target: w });
        }
        let r = by_parts(&ctx, &terms, &targets).unwrap();
        let rebuilt = by_parts_reconstruct(&ctx, &r, &targets).unwrap();
        prop_assert!(vanishes(&sub(rebuilt, direct)));
    }

    // Helmholtz: linearizations of Euler-Lagrange expressions are
    // self-adjoint, whatever the Lagrangian
    #[test]
    fn euler_lagrange_linearizations_are_self_adjoint(
        l in poly1_small(),
        w in poly1_small(),
    ) {
        let ctx = ctx1();
        let el = euler(&ctx, &l, Namespace::Dependent, 0).unwrap();
        let lin = frechet(&ctx, &[el.clone()], &[w.clone()]).unwrap().pop().unwrap();
        let adj = frechet_adjoint(&ctx, &[el], &[w]).unwrap().pop().unwrap();
        prop_assert!(vanishes(&sub(lin, adj)));
    }
}
