//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! One-sided Jacobi orthogonalizes the columns of `A V` directly, so the left
//! singular vectors come out orthogonal relative to each column's own norm and
//! small singular values are resolved to high relative accuracy. The matrices
//! factored here are at most a few dozen columns wide.

use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// `A = left · diag(singular_values) · rightᵀ` with `k = min(m, n)`.
#[derive(Debug, Clone)]
pub struct SvdResult<T> {
    /// m×k, orthonormal columns.
    pub left: Matrix<T>,
    /// Non-negative, non-increasing.
    pub singular_values: Vec<T>,
    /// n×k, orthonormal columns.
    pub right: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        self.left
            .scale_columns(&self.singular_values)
            .matmul_t(&self.right)
    }
}

/// Computes the thin SVD of `a`.
///
/// Each singular pair is sign-normalized so the largest-magnitude entry of the
/// left vector is positive (first such entry on ties).
pub fn svd<T: Scalar>(a: &Matrix<T>) -> Result<SvdResult<T>> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::invalid("svd of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::invalid("svd input has non-finite entries"));
    }
    let (left, singular_values, right) = if m >= n {
        jacobi_tall(a)?
    } else {
        let (v, s, u) = jacobi_tall(&a.transpose())?;
        (u, s, v)
    };
    Ok(SvdResult {
        left,
        singular_values,
        right,
    })
}

/// Jacobi SVD for `m >= n`.
fn jacobi_tall<T: Scalar>(a: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>, Matrix<T>)> {
    let (m, n) = a.shape();
    let mut w = a.columns_vec();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut e = vec![T::zero(); n];
            e[j] = T::one();
            e
        })
        .collect();
    let tol = T::epsilon() * T::lit(m as f64).sqrt();
    // Columns below rounding level of the whole matrix are left alone; rotating
    // them against large columns only reshuffles noise and never converges.
    let floor = {
        let scale = T::epsilon() * a.frobenius_norm();
        scale * scale
    };

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if alpha <= floor || beta <= floor {
                    continue;
                }
                if gamma.abs() <= tol * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let sign = if zeta >= T::zero() {
                    T::one()
                } else {
                    -T::one()
                };
                let t = sign / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = (T::one() + t * t).sqrt().recip();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric(
            "svd",
            format!("Jacobi sweeps did not converge for a {m}x{n} matrix"),
        ));
    }

    let mut sigma: Vec<T> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        sigma[j]
            .partial_cmp(&sigma[i])
            .expect("finite singular values")
    });

    // Columns at or below rounding level carry no reliable direction; they
    // count as zero and their left vectors come from the orthogonal complement.
    let negligible = floor.sqrt().max(T::min_positive_value().sqrt());
    let mut left: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut right: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut values: Vec<T> = Vec::with_capacity(n);
    let mut pending_zero = Vec::new();
    for &j in &order {
        let s = sigma[j];
        if s > negligible {
            let inv = s.recip();
            left.push(w[j].iter().map(|&x| x * inv).collect());
            right.push(v[j].clone());
            values.push(s);
        } else {
            sigma[j] = T::zero();
            pending_zero.push(j);
        }
    }
    if !pending_zero.is_empty() {
        let basis = Matrix::from_columns(m, &left);
        let completed =
            super::qr::orthonormal_extension(&basis, &Matrix::zeros(m, 0), pending_zero.len())?;
        let nonzero = left.len();
        for (offset, &j) in pending_zero.iter().enumerate() {
            left.push(completed.column(nonzero + offset));
            right.push(v[j].clone());
            values.push(T::zero());
        }
    }

    for (u, vv) in left.iter_mut().zip(right.iter_mut()) {
        let mut pivot = 0;
        for (i, x) in u.iter().enumerate() {
            if x.abs() > u[pivot].abs() {
                pivot = i;
            }
        }
        if u[pivot] < T::zero() {
            u.iter_mut().for_each(|x| *x = -*x);
            vv.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok((
        Matrix::from_columns(m, &left),
        values,
        Matrix::from_columns(n, &right),
    ))
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check_invariants(a: &Matrix<f64>, r: &SvdResult<f64>) {
        assert!(
            r.left.orthonormality_error() < 1e-12,
            "left not orthonormal"
        );
        assert!(
            r.right.orthonormality_error() < 1e-12,
            "right not orthonormal"
        );
        let resid = (&r.reconstruct() - a).frobenius_norm() / a.frobenius_norm().max(1.0);
        assert!(resid < 1e-10, "reconstruction residual {resid}");
        assert!(r.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rounding_level_columns_converge() {
        // augmented coefficient block whose trailing columns are pure rounding noise
        let a = Matrix::from_rows(&[
            vec![
                2.9841405436296253,
                -3.316663280542739e-5,
                4.628718074360735e-5,
                5.330914135766715e-5,
                0.0001060744108544523,
                -9.71445146547012e-17,
                -8.185726402265558e-18,
                2.7755575615628914e-17,
            ],
            vec![
                -3.867180202347004e-5,
                2.8105643435160452,
                7.964692806857499e-6,
                -5.366070513005864e-5,
                8.44055503638301e-5,
                3.9092302277588496e-5,
                -5.2014599224992075e-17,
                -2.7755575615628914e-17,
            ],
            vec![
                -3.2850795745765185e-5,
                -3.416760239540708e-5,
                1.732537894048297,
                5.0869447733475936e-5,
                2.1143696295036762e-5,
                5.084630705040269e-5,
                -3.474867962816042e-17,
                -8.326672684688674e-17,
            ],
            vec![
                4.4885073302918804e-5,
                -4.122276659390204e-5,
                1.876067919977431e-5,
                1.2846582735116165,
                -4.075428102632422e-6,
                6.999003091763545e-6,
                -5.990217002982412e-18,
                -2.7755575615628914e-17,
            ],
            vec![
                0.00010837937375776999,
                3.089617377959042e-5,
                -8.163886584758133e-6,
                -1.7575734831979696e-5,
                0.0,
                0.0,
                0.0,
                0.0,
            ],
            vec![
                6.938893903907228e-17,
                3.4914301497830647e-5,
                -3.431551414230082e-5,
                8.818062223350884e-6,
                0.0,
                0.0,
                0.0,
                0.0,
            ],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![
                -8.290127848454295e-17,
                -6.693396230640268e-18,
                9.337124597437152e-20,
                -8.333978571834895e-17,
                0.0,
                0.0,
                0.0,
                0.0,
            ],
        ])
        .unwrap();
        let r = svd(&a).unwrap();
        check_invariants(&a, &r);
    }

    #[test]
    fn diagonal_input() {
        let a = Matrix::from_diag(&[3.0, 1.0]);
        let r = svd(&a).unwrap();
        assert_eq!(r.singular_values, vec![3.0, 1.0]);
        assert_eq!(r.left, Matrix::identity(2));
        assert_eq!(r.right, Matrix::identity(2));
    }

    #[test]
    fn stiffness_target_block_singular_values() {
        let a: Matrix<f64> = Matrix::from_rows(&[vec![0.0, 15.0], vec![-2.0, 0.0]]).unwrap();
        let r = svd(&a).unwrap();
        assert!((r.singular_values[0] - 15.0).abs() < 1e-14);
        assert!((r.singular_values[1] - 2.0).abs() < 1e-14);
        check_invariants(&a, &r);
    }

    #[test]
    fn random_square_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let r = svd(&a).unwrap();
        check_invariants(&a, &r);
    }

    #[test]
    fn wide_and_rank_deficient_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wide = Matrix::from_fn(3, 7, |_, _| rng.random_range(-1.0..1.0));
        check_invariants(&wide, &svd(&wide).unwrap());

        let u = Matrix::from_fn(6, 1, |i, _| i as f64 + 1.0);
        let v = Matrix::from_fn(4, 1, |i, _| 1.0 - i as f64);
        let rank_one = u.matmul_t(&v);
        let r = svd(&rank_one).unwrap();
        check_invariants(&rank_one, &r);
        assert!(r.singular_values[1..].iter().all(|&s| s < 1e-12));

        let zero = Matrix::<f64>::zeros(4, 3);
        let r = svd(&zero).unwrap();
        assert_eq!(r.singular_values, vec![0.0; 3]);
        check_invariants(&zero, &r);
    }

    #[test]
    fn resolves_tiny_singular_values() {
        let a: Matrix<f64> = Matrix::from_diag(&[10.0, 1e-2, 1e-4, 1e-6]);
        let r = svd(&a).unwrap();
        for (s, e) in r.singular_values.iter().zip([10.0, 1e-2, 1e-4, 1e-6]) {
            assert!(((s - e) / e).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_is_invalid_argument() {
        let a = Matrix::from_rows(&[vec![f64::NAN, 1.0]]).unwrap();
        assert!(matches!(svd(&a), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sign_convention_largest_left_entry_positive() {
        let a: Matrix<f64> =
            Matrix::from_rows(&[vec![-4.0, 0.0], vec![1.0, 2.0], vec![0.0, -3.0]]).unwrap();
        let r = svd(&a).unwrap();
        for j in 0..2 {
            let col = r.left.column(j);
            let big = col
                .iter()
                .copied()
                .fold(0.0f64, |m, x: f64| if x.abs() > m.abs() { x } else { m });
            assert!(big > 0.0);
        }
    }
}
