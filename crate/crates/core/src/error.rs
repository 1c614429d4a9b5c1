//! Error types shared across the engine.

use alloc::string::String;
use core::fmt;

/// Parse failure with the byte offset of the offending token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parse error at byte {}: {}", self.offset, self.message)
    }
}

impl core::error::Error for ParseError {}

/// Engine-level failures. Every variant is a contract violation the caller
/// can act on; none are silently recovered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineError {
    /// Malformed context (duplicate names, bad signatures, ...).
    Context(String),
    /// Division by the literal zero constant.
    DivisionByZero,
    /// Exponentiation that leaves the supported fragment (e.g. a
    /// non-constant exponent that is not a pure discrete parity).
    UnsupportedExponent(String),
    /// An operation addressed a direction or variable the context lacks.
    NoSuchDirection(String),
    /// `substitute` bound some atoms of an auxiliary variable but an
    /// unbound shifted atom of the same variable remains.
    UnboundShiftedAuxiliary(String),
    /// A solved form failed validation against its equation.
    BadSolvedForm(String),
    /// reduce_mod exceeded the substitution depth cap.
    ReductionDepthExceeded(u32),
    /// Vector field is not regular (coefficients of `d/dx` depend on n or [u])
    /// where a regular field is required.
    NotRegular(String),
    /// Symmetry decomposition failed: nonzero residue after elimination.
    NotASymmetry(String),
    /// Determining-equation splitting hit entangled unknown functions.
    CannotSplit(String),
    /// Ansatz solving found a condition nonlinear in the unknowns.
    NonlinearAnsatz(String),
    /// Euler operator precondition failed: expression not a null Lagrangian.
    NotNull(String),
    /// Homotopy integrand outside the closed-form fragment.
    HomotopyNotClosedForm(String),
    /// System/operation shape mismatch (arity, dimensions, missing pieces).
    Shape(String),
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::Context(m) => write!(f, "context error: {m}"),
            EngineError::DivisionByZero => write!(f, "division by the literal zero constant"),
            EngineError::UnsupportedExponent(m) => write!(f, "unsupported exponent: {m}"),
            EngineError::NoSuchDirection(m) => write!(f, "no such direction: {m}"),
            EngineError::UnboundShiftedAuxiliary(m) => {
                write!(f, "unbound shifted auxiliary atom: {m}")
            }
            EngineError::BadSolvedForm(m) => write!(f, "bad solved form: {m}"),
            EngineError::ReductionDepthExceeded(cap) => {
                write!(f, "reduction depth cap exceeded ({cap} rounds)")
            }
            EngineError::NotRegular(m) => write!(f, "not regular: {m}"),
            EngineError::NotASymmetry(m) => write!(f, "not a symmetry: {m}"),
            EngineError::CannotSplit(m) => {
                write!(f, "cannot split: unshifted unknowns entangled: {m}")
            }
            EngineError::NonlinearAnsatz(m) => write!(f, "nonlinear in unknowns: {m}"),
            EngineError::NotNull(m) => write!(f, "not a null Lagrangian: {m}"),
            EngineError::HomotopyNotClosedForm(m) => {
                write!(f, "homotopy integrand not closed-form: {m}")
            }
            EngineError::Shape(m) => write!(f, "{m}"),
        }
    }
}

impl core::error::Error for EngineError {}
