//! Declarations a jet expression lives over: independent variables,
//! dependent variables, auxiliary variables, parameters, unknown functions.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::EngineError;

/// Derivative multi-index: one non-negative order per continuous direction.
pub type MultiIndexD = Vec<u32>;

/// Shift multi-index: one signed offset per discrete direction.
pub type MultiIndexS = Vec<i32>;

/// Which family of fields an atom belongs to. Auxiliary variables (the `v`'s
/// of formal Lagrangians) share the jet machinery but never mix with the
/// dependent `u`'s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Namespace {
    Dependent,
    Auxiliary,
}

/// A single jet coordinate `u^dep[deriv; shift]` (or `v^dep[..]` for the
/// auxiliary namespace).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JetAtom {
    pub namespace: Namespace,
    pub dep: usize,
    pub deriv: MultiIndexD,
    pub shift: MultiIndexS,
}

impl JetAtom {
    pub fn base(namespace: Namespace, dep: usize, p1: usize, p2: usize) -> Self {
        JetAtom {
            namespace,
            dep,
            deriv: alloc::vec![0; p1],
            shift: alloc::vec![0; p2],
        }
    }

    pub fn total_deriv_order(&self) -> u32 {
        self.deriv.iter().sum()
    }

    /// The atom obtained by applying one more total derivative in direction `i`.
    pub fn derived(&self, i: usize) -> Self {
        let mut a = self.clone();
        a.deriv[i] += 1;
        a
    }

    /// The atom translated by the shift multi-index `j`.
    pub fn shifted(&self, j: &[i32]) -> Self {
        let mut a = self.clone();
        for (s, d) in a.shift.iter_mut().zip(j) {
            *s += d;
        }
        a
    }

    /// The atom translated by `k` steps in the single discrete direction `d`.
    pub fn shifted_one(&self, d: usize, k: i32) -> Self {
        let mut a = self.clone();
        a.shift[d] += k;
        a
    }
}

/// An unknown-function declaration: a name plus the independent-variable
/// signature its applications must match, e.g. `a(t, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSig {
    pub name: String,
    /// Argument slots by name; each must be a declared continuous,
    /// discrete, or dependent variable (the slot fixes arity, not the
    /// actual argument, which may be shifted like `n + 1`).
    pub args: Vec<String>,
}

/// A parameter declaration; positivity is metadata only (never used to
/// decide simplifications).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parameter {
    pub name: String,
    pub positive: bool,
}

/// The ambient declarations for a computation. Contexts are immutable;
/// operations that need extra variables take an extended copy.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Context {
    pub continuous: Vec<String>,
    pub discrete: Vec<String>,
    pub dependent: Vec<String>,
    pub auxiliary: Vec<String>,
    pub parameters: Vec<Parameter>,
    pub functions: Vec<FunctionSig>,
}

impl Context {
    pub fn p1(&self) -> usize {
        self.continuous.len()
    }

    pub fn p2(&self) -> usize {
        self.discrete.len()
    }

    pub fn q(&self) -> usize {
        self.dependent.len()
    }

    pub fn cont_index(&self, name: &str) -> Option<usize> {
        self.continuous.iter().position(|v| v == name)
    }

    pub fn disc_index(&self, name: &str) -> Option<usize> {
        self.discrete.iter().position(|v| v == name)
    }

    pub fn dep_index(&self, name: &str) -> Option<usize> {
        self.dependent.iter().position(|v| v == name)
    }

    pub fn aux_index(&self, name: &str) -> Option<usize> {
        self.auxiliary.iter().position(|v| v == name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p.name == name)
    }

    pub fn function(&self, name: &str) -> Option<&FunctionSig> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn atom_name(&self, atom: &JetAtom) -> &str {
        self.var_name(atom.namespace, atom.dep)
    }

    pub fn var_name(&self, ns: Namespace, dep: usize) -> &str {
        match ns {
            Namespace::Dependent => &self.dependent[dep],
            Namespace::Auxiliary => &self.auxiliary[dep],
        }
    }

    pub(crate) fn name_taken(&self, name: &str) -> bool {
        self.continuous.iter().any(|v| v == name)
            || self.discrete.iter().any(|v| v == name)
            || self.dependent.iter().any(|v| v == name)
            || self.auxiliary.iter().any(|v| v == name)
            || self.parameters.iter().any(|p| p.name == name)
            || self.functions.iter().any(|f| f.name == name)
    }

    /// Checks that every declared name is a unique identifier and that
    /// function signatures reference declared independent variables.
    pub fn validate(&self) -> Result<(), EngineError> {
        let mut seen: Vec<&str> = Vec::new();
        let all = self
            .continuous
            .iter()
            .chain(self.discrete.iter())
            .chain(self.dependent.iter())
            .chain(self.auxiliary.iter())
            .chain(self.parameters.iter().map(|p| &p.name))
            .chain(self.functions.iter().map(|f| &f.name));
        for name in all {
            if !is_identifier(name) {
                return Err(EngineError::Context(alloc::format!(
                    "invalid identifier `{name}`"
                )));
            }
            if seen.contains(&name.as_str()) {
                return Err(EngineError::Context(alloc::format!(
                    "duplicate declaration `{name}`"
                )));
            }
            seen.push(name);
        }
        for f in &self.functions {
            for arg in &f.args {
                if self.cont_index(arg).is_none()
                    && self.disc_index(arg).is_none()
                    && self.dep_index(arg).is_none()
                {
                    return Err(EngineError::Context(alloc::format!(
                        "function `{}` argument `{arg}` is not a declared variable",
                        f.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Extends the context with one auxiliary variable per dependent
    /// variable when none are declared (used by the formal Lagrangian).
    /// Prefers `v` (then `v1`, `v2`, ...) and skips taken names.
    pub fn with_auto_auxiliary(&self) -> Result<Context, EngineError> {
        if self.auxiliary.len() >= self.dependent.len() {
            return Ok(self.clone());
        }
        let mut ctx = self.clone();
        if ctx.dependent.len() == 1 && !ctx.name_taken("v") {
            ctx.auxiliary.push(String::from("v"));
            return Ok(ctx);
        }
        for k in 0..ctx.dependent.len() {
            if ctx.auxiliary.len() > k {
                continue;
            }
            let name = alloc::format!("v{}", k + 1);
            if ctx.name_taken(&name) {
                return Err(EngineError::Context(alloc::format!(
                    "cannot auto-name auxiliary variable: `{name}` already declared"
                )));
            }
            ctx.auxiliary.push(name);
        }
        Ok(ctx)
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
