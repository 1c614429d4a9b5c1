//! Exact dense linear algebra over the rationals: row reduction with full
//! solution structure (particular solution + nullspace basis).

use alloc::vec::Vec;

use num_traits::Zero;

use crate::expr::Rational;

/// Result of solving `A x = b` exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinSolution {
    /// One particular solution (all free variables set to zero).
    pub particular: Vec<Rational>,
    /// Nullspace basis vectors, one per free variable, in column order.
    pub nullspace: Vec<Vec<Rational>>,
}

/// Gauss-Jordan over the rationals. Returns `None` when the system is
/// inconsistent. Deterministic: pivots are chosen as the first nonzero
/// entry scanning rows top-down.
pub fn solve(mut a: Vec<Vec<Rational>>, mut b: Vec<Rational>) -> Option<LinSolution> {
    let rows = a.len();
    assert_eq!(rows, b.len(), "matrix/rhs row mismatch");
    let cols = if rows == 0 { 0 } else { a[0].len() };
    let mut pivot_of_col: Vec<Option<usize>> = alloc::vec![None; cols];
    let mut row = 0usize;
    for col in 0..cols {
        let Some(p) = (row..rows).find(|&r| !a[r][col].is_zero()) else {
            continue;
        };
        a.swap(row, p);
        b.swap(row, p);
        let inv = {
            let piv = a[row][col].clone();
            Rational::new(piv.denom().clone(), piv.numer().clone())
        };
        for x in a[row].iter_mut() {
            *x *= inv.clone();
        }
        b[row] *= inv;
        for r in 0..rows {
            if r == row || a[r][col].is_zero() {
                continue;
            }
            let f = a[r][col].clone();
            let pivot_row = a[row].clone();
            for (x, pv) in a[r].iter_mut().zip(&pivot_row) {
                *x -= pv.clone() * f.clone();
            }
            let d = b[row].clone() * f;
            b[r] -= d;
        }
        pivot_of_col[col] = Some(row);
        row += 1;
        if row == rows {
            break;
        }
    }
    // inconsistency: zero row with nonzero rhs
    if b.iter().skip(row).any(|x| !x.is_zero()) {
        return None;
    }
    let mut particular = alloc::vec![Rational::zero(); cols];
    for (col, piv) in pivot_of_col.iter().enumerate() {
        if let Some(r) = piv {
            particular[col] = b[*r].clone();
        }
    }
    let mut nullspace = Vec::new();
    for free in 0..cols {
        if pivot_of_col[free].is_some() {
            continue;
        }
        let mut v = alloc::vec![Rational::zero(); cols];
        v[free] = Rational::new(1.into(), 1.into());
        for (col, piv) in pivot_of_col.iter().enumerate() {
            if let Some(r) = piv {
                v[col] = -a[*r][free].clone();
            }
        }
        nullspace.push(v);
    }
    Some(LinSolution {
        particular,
        nullspace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;

    fn r(n: i64) -> Rational {
        Rational::from_integer(BigInt::from(n))
    }

    #[test]
    fn unique_solution() {
        // x + y = 3, x - y = 1 -> x = 2, y = 1
        let a = alloc::vec![alloc::vec![r(1), r(1)], alloc::vec![r(1), r(-1)]];
        let b = alloc::vec![r(3), r(1)];
        let s = solve(a, b).unwrap();
        assert_eq!(s.particular, alloc::vec![r(2), r(1)]);
        assert!(s.nullspace.is_empty());
    }

    #[test]
    fn underdetermined_has_nullspace() {
        // x + y = 1 -> particular (1, 0), nullspace (-1, 1)
        let a = alloc::vec![alloc::vec![r(1), r(1)]];
        let b = alloc::vec![r(1)];
        let s = solve(a, b).unwrap();
        assert_eq!(s.particular, alloc::vec![r(1), r(0)]);
        assert_eq!(s.nullspace, alloc::vec![alloc::vec![r(-1), r(1)]]);
    }

    #[test]
    fn inconsistent_is_none() {
        let a = alloc::vec![alloc::vec![r(1), r(1)], alloc::vec![r(2), r(2)]];
        let b = alloc::vec![r(1), r(3)];
        assert!(solve(a, b).is_none());
    }
}
