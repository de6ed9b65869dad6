//! Column orthonormalization by iterated modified Gram-Schmidt.
//!
//! Each candidate column is re-orthogonalized until its norm stops shrinking
//! (at most [`MAX_PASSES`] passes), which keeps the result orthonormal to working
//! precision even for nearly dependent inputs. Columns whose residual collapses
//! below [`DEPENDENCE_TOL`] of their original norm count as dependent.

use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};
use crate::scalar::Scalar;

const MAX_PASSES: usize = 5;
/// A pass that keeps at least this fraction of the norm leaves the vector
/// orthogonal to working precision.
const STABLE_RATIO: f64 = 0.7;
const DEPENDENCE_TOL: f64 = 1e-12;

/// Orthogonalizes `v` in place against the orthonormal `basis`.
///
/// Returns `true` when `v` is independent of the basis, in which case it has
/// also been normalized.
fn orthonormalize_against<T: Scalar>(v: &mut [T], basis: &[Vec<T>]) -> bool {
    let norm0 = dot(v, v).sqrt();
    if norm0 == T::zero() || !norm0.is_finite() {
        return false;
    }
    let mut norm = norm0;
    for _ in 0..MAX_PASSES {
        for q in basis {
            let c = dot(q, v);
            for (x, &qi) in v.iter_mut().zip(q) {
                *x -= c * qi;
            }
        }
        let next = dot(v, v).sqrt();
        let stable = next >= T::lit(STABLE_RATIO) * norm;
        norm = next;
        if norm <= T::lit(DEPENDENCE_TOL) * norm0 {
            return false;
        }
        if stable {
            break;
        }
    }
    let inv = norm.recip();
    v.iter_mut().for_each(|x| *x *= inv);
    true
}

/// Unit vector orthogonal to every column of `basis`.
///
/// Picks the standard basis vector least covered by `basis` (smallest row norm),
/// so the choice is deterministic. Requires `basis.len() < dim`.
fn complete_one<T: Scalar>(dim: usize, basis: &[Vec<T>]) -> Vec<T> {
    debug_assert!(basis.len() < dim);
    let mut best = 0;
    let mut best_cover = T::infinity();
    for i in 0..dim {
        let cover: T = basis.iter().map(|q| q[i] * q[i]).sum();
        if cover < best_cover {
            best_cover = cover;
            best = i;
        }
    }
    let mut e = vec![T::zero(); dim];
    e[best] = T::one();
    let ok = orthonormalize_against(&mut e, basis);
    debug_assert!(ok, "least covered unit vector must be independent");
    e
}

/// Orthonormalizes the columns of `a` (n×k, k ≤ n).
///
/// The first `j` output columns span the first `j` independent input columns.
/// A column that depends on its predecessors is replaced by a unit vector from
/// the orthogonal complement of the columns produced so far.
pub fn qr_orthonormalize<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let (n, k) = a.shape();
    if k > n {
        return Err(Error::invalid(format!(
            "cannot orthonormalize {k} columns in dimension {n}"
        )));
    }
    if !a.is_finite() {
        return Err(Error::invalid(
            "non-finite entries in orthonormalization input",
        ));
    }
    let mut q: Vec<Vec<T>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = a.column(j);
        if !orthonormalize_against(&mut v, &q) {
            v = complete_one(n, &q);
        }
        q.push(v);
    }
    Ok(Matrix::from_columns(n, &q))
}

/// Orthonormal basis `[B | B̃]` of `span([basis | candidates])`, padded to
/// `basis.cols() + extra` columns.
///
/// `basis` is re-orthonormalized in place order first. Candidate columns are
/// then processed in order; dependent ones are skipped rather than replaced, so
/// the leading columns of `B̃` carry the genuinely new directions. Remaining
/// slots are filled from the orthogonal complement. `extra` is capped at the
/// ambient dimension.
pub fn orthonormal_extension<T: Scalar>(
    basis: &Matrix<T>,
    candidates: &Matrix<T>,
    extra: usize,
) -> Result<Matrix<T>> {
    let (n, r) = basis.shape();
    if candidates.rows() != n {
        return Err(Error::invalid(format!(
            "candidate rows {} do not match basis rows {n}",
            candidates.rows()
        )));
    }
    if r > n {
        return Err(Error::invalid("basis has more columns than rows"));
    }
    if !basis.is_finite() || !candidates.is_finite() {
        return Err(Error::invalid(
            "non-finite entries in basis augmentation input",
        ));
    }
    let target = r + extra.min(n - r);
    let mut q: Vec<Vec<T>> = Vec::with_capacity(target);
    for j in 0..r {
        let mut v = basis.column(j);
        if !orthonormalize_against(&mut v, &q) {
            v = complete_one(n, &q);
        }
        q.push(v);
    }
    for j in 0..candidates.cols() {
        if q.len() == target {
            break;
        }
        let mut v = candidates.column(j);
        if orthonormalize_against(&mut v, &q) {
            q.push(v);
        }
    }
    while q.len() < target {
        let v = complete_one(n, &q);
        q.push(v);
    }
    Ok(Matrix::from_columns(n, &q))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_columns_are_kept_up_to_sign() {
        let a = Matrix::<f64>::eye(3, 2);
        let q = qr_orthonormalize(&a).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((q[(i, j)].abs() - a[(i, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_column_normalization() {
        let q = qr_orthonormalize(&m(&[&[3.0, 0.0], &[4.0, 0.0], &[0.0, 5.0]])).unwrap();
        assert!((q[(0, 0)].abs() - 0.6).abs() < 1e-15);
        assert!((q[(1, 0)].abs() - 0.8).abs() < 1e-15);
        assert_eq!(q[(2, 0)], 0.0);
    }

    #[test]
    fn duplicate_columns_still_orthonormal() {
        let a = m(&[&[1.0, 1.0], &[2.0, 2.0], &[-1.0, -1.0], &[0.5, 0.5]]);
        let q = qr_orthonormalize(&a).unwrap();
        assert!(q.orthonormality_error() < 1e-12);
        let first = q.column(0);
        let second = q.column(1);
        assert!(dot(&first, &second).abs() < 1e-14);
    }

    #[test]
    fn too_many_columns_is_invalid_argument() {
        let err = qr_orthonormalize(&Matrix::<f64>::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn zero_matrix_gets_completed() {
        let q = qr_orthonormalize(&Matrix::<f64>::zeros(4, 3)).unwrap();
        assert!(q.orthonormality_error() < 1e-14);
    }

    #[test]
    fn extension_skips_dependent_candidates_and_caps_dimension() {
        let basis = Matrix::<f64>::eye(4, 2);
        // first candidate lies in the span of the basis, second brings e3 + e4
        let cand = m(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let q = orthonormal_extension(&basis, &cand, 2).unwrap();
        assert_eq!(q.shape(), (4, 4));
        assert!(q.orthonormality_error() < 1e-14);
        let s = 0.5f64.sqrt();
        assert!((q[(2, 2)].abs() - s).abs() < 1e-14 && (q[(3, 2)].abs() - s).abs() < 1e-14);

        let q =
            orthonormal_extension(&Matrix::<f64>::eye(3, 2), &cand.block(0, 3, 0, 2), 2).unwrap();
        assert_eq!(q.cols(), 3);
    }
}
