//! Exact symbolic calculus for differential-difference equations (DDEs).
//!
//! Unknowns are fields `u^a(x, n)` of `p1` continuous and `p2` discrete
//! independent variables. Jet atoms `u^a[J1;J2] = D_{J1} S_{J2} u^a` carry a
//! non-negative derivative multi-index `J1` and a signed shift multi-index
//! `J2`. On top of the jet algebra the crate provides total derivatives and
//! shifts, Euler and Frechet operators, discrete/continuous integration by
//! parts, prolongations of vector fields, conservation-law construction via
//! Noether's theorem, and the formal-Lagrangian (adjointness) route for
//! non-variational systems.
//!
//! All arithmetic is exact (arbitrary-precision rationals); zero-testing is
//! normalization to the literal zero. The crate is `no_std` + `alloc`; IO,
//! file formats, and floating-point evaluation live in the companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adjointness;
pub mod calculus;
pub mod context;
pub mod error;
pub mod expr;
pub(crate) mod linsys;
pub mod parse;
pub mod render;
pub mod symmetry;
pub mod system;
pub mod variational;

pub use adjointness::{
    adjoint_cl, adjoint_cl_via_extension, adjoint_system, apply_substitution,
    candidate_substitutions, check_self_adjoint, extend_characteristic, find_self_adjoint,
    formal_lagrangian, is_extended_variational, AdjointVerdict, FormalLagrangian,
    SelfAdjointness, Substitution,
};
pub use context::{Context, JetAtom, MultiIndexD, MultiIndexS, Namespace};
pub use error::{EngineError, ParseError};
pub use expr::{Expr, Rational};
pub use symmetry::{
    EvolutionaryField, Generator, ProlongationMode, ProlongedField, SymmetryVerdict, VectorField,
};
pub use system::{DDESystem, SolvedForm};
pub use variational::{ClVerdict, ConservationLaw, Verified, VerifyMode};
