//! The factored adapter `W = U diag(S) Vᵀ`, tangent-space projections and
//! SVD truncation of an augmented factorization.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{qr_orthonormalize, svd, Matrix, SvdResult};
use crate::scalar::Scalar;

/// Orthonormality tolerance checked on construction.
pub const ORTHO_TOL: f64 = 1e-10;

/// Low-rank adapter with orthonormal bases and diagonal coefficients.
///
/// `first_step` marks coefficients that are (partly) zero, in which case the
/// matching entries of `s_inverse` are 1 instead of a reciprocal.
#[derive(Debug, Clone)]
pub struct LowRankAdapter<T> {
    u: Matrix<T>,
    s: Vec<T>,
    v: Matrix<T>,
    s_inv: Vec<T>,
    frozen_base: Option<Matrix<T>>,
    first_step: bool,
}

fn inverse_coefficients<T: Scalar>(s: &[T]) -> (Vec<T>, bool) {
    let mut any_zero = false;
    let inv = s
        .iter()
        .map(|&x| {
            if x == T::zero() {
                any_zero = true;
                T::one()
            } else {
                x.recip()
            }
        })
        .collect();
    (inv, any_zero)
}

impl<T: Scalar> LowRankAdapter<T> {
    /// Validates shapes, orthonormality and finiteness.
    pub fn new(u: Matrix<T>, s: Vec<T>, v: Matrix<T>) -> Result<Self> {
        let (n, r) = u.shape();
        let m = v.rows();
        if r == 0 || r > n.min(m) {
            return Err(Error::invalid(format!(
                "rank {r} outside [1, {}] for a {n}x{m} adapter",
                n.min(m)
            )));
        }
        if v.cols() != r || s.len() != r {
            return Err(Error::invalid(format!(
                "factor shapes disagree: U {:?}, S {}, V {:?}",
                u.shape(),
                s.len(),
                v.shape()
            )));
        }
        if !u.is_finite() || !v.is_finite() || s.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("adapter factors have non-finite entries"));
        }
        let tol = T::lit(ORTHO_TOL);
        if u.orthonormality_error() > tol || v.orthonormality_error() > tol {
            return Err(Error::invalid("adapter bases are not orthonormal"));
        }
        Ok(Self::from_parts(u, s, v))
    }

    pub(crate) fn from_parts(u: Matrix<T>, s: Vec<T>, v: Matrix<T>) -> Self {
        let (s_inv, first_step) = inverse_coefficients(&s);
        Self {
            u,
            s,
            v,
            s_inv,
            frozen_base: None,
            first_step,
        }
    }

    /// Random orthonormal bases and `S = 0`, the fine-tuning initialization.
    pub fn zero_init<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let u = random_orthonormal(rows, rank, rng)?;
        let v = random_orthonormal(cols, rank, rng)?;
        Self::new(u, vec![T::zero(); rank], v)
    }

    pub fn with_frozen_base(mut self, base: Matrix<T>) -> Result<Self> {
        if base.shape() != self.shape() {
            return Err(Error::invalid("frozen base shape does not match adapter"));
        }
        self.frozen_base = Some(base);
        Ok(self)
    }

    pub fn u(&self) -> &Matrix<T> {
        &self.u
    }

    pub fn s(&self) -> &[T] {
        &self.s
    }

    pub fn v(&self) -> &Matrix<T> {
        &self.v
    }

    pub fn s_inverse(&self) -> &[T] {
        &self.s_inv
    }

    pub fn frozen_base(&self) -> Option<&Matrix<T>> {
        self.frozen_base.as_ref()
    }

    pub fn first_step(&self) -> bool {
        self.first_step
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `(n, m)` of the represented matrix.
    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    pub fn s_matrix(&self) -> Matrix<T> {
        Matrix::from_diag(&self.s)
    }

    /// `max(‖UᵀU − I‖_F, ‖VᵀV − I‖_F)`.
    pub fn orthonormality_error(&self) -> T {
        self.u
            .orthonormality_error()
            .max(self.v.orthonormality_error())
    }

    pub(crate) fn carry_frozen_base(mut self, from: &LowRankAdapter<T>) -> Self {
        self.frozen_base = from.frozen_base.clone();
        self
    }
}

/// Pre-truncation factorization `Û Ŝ V̂ᵀ` of a GeoLoRA step.
#[derive(Debug, Clone)]
pub struct AugmentedState<T> {
    pub(crate) aug_u: Matrix<T>,
    pub(crate) aug_s: Matrix<T>,
    pub(crate) aug_v: Matrix<T>,
    pub(crate) base_rank: usize,
}

impl<T: Scalar> AugmentedState<T> {
    pub fn aug_u(&self) -> &Matrix<T> {
        &self.aug_u
    }

    pub fn aug_s(&self) -> &Matrix<T> {
        &self.aug_s
    }

    pub fn aug_v(&self) -> &Matrix<T> {
        &self.aug_v
    }

    /// Rank of the adapter the state was built from.
    pub fn base_rank(&self) -> usize {
        self.base_rank
    }

    pub fn dense(&self) -> Matrix<T> {
        self.aug_u.matmul(&self.aug_s).matmul_t(&self.aug_v)
    }

    pub fn svd(&self) -> Result<SvdResult<T>> {
        svd(&self.aug_s).map_err(|e| match e {
            Error::InvalidArgument(d) => Error::numeric("truncation", d),
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    #[default]
    LocalRelative,
    GlobalRelative,
    GlobalBudget {
        budget: usize,
    },
}

/// Norm the local threshold `ϑ` is taken relative to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdNorm {
    /// `ϑ = τ Σ sᵢ²`.
    #[default]
    FrobeniusSquared,
    /// `ϑ = τ Σ sᵢ`.
    Nuclear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPolicy<T> {
    pub mode: TruncationMode,
    pub tau: T,
    pub min_rank: usize,
    pub norm: ThresholdNorm,
}

impl<T: Scalar> TruncationPolicy<T> {
    pub fn local(tau: T) -> Self {
        Self {
            mode: TruncationMode::LocalRelative,
            tau,
            min_rank: 1,
            norm: ThresholdNorm::FrobeniusSquared,
        }
    }

    pub fn with_min_rank(self, min_rank: usize) -> Self {
        Self { min_rank, ..self }
    }

    pub fn with_norm(self, norm: ThresholdNorm) -> Self {
        Self { norm, ..self }
    }

    pub fn with_mode(self, mode: TruncationMode) -> Self {
        Self { mode, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= T::zero() && self.tau < T::one()) {
            return Err(Error::invalid("tau must lie in [0, 1)"));
        }
        if self.min_rank == 0 {
            return Err(Error::invalid("min_rank must be at least 1"));
        }
        if let TruncationMode::GlobalBudget { budget } = self.mode {
            if budget == 0 {
                return Err(Error::invalid("budget must be positive"));
            }
        }
        Ok(())
    }

    pub fn is_local(&self) -> bool {
        self.mode == TruncationMode::LocalRelative
    }

    /// Local threshold `ϑ` for the singular values `s`.
    pub fn threshold(&self, s: &[T]) -> T {
        let norm: T = match self.norm {
            ThresholdNorm::FrobeniusSquared => s.iter().map(|&x| x * x).sum(),
            ThresholdNorm::Nuclear => s.iter().copied().sum(),
        };
        self.tau * norm
    }

    /// Smallest `r` whose squared tail `Σ_{i≥r} sᵢ²` is below `ϑ` (or exactly
    /// zero), clamped to `[min_rank, s.len()]`.
    pub fn select_rank(&self, s: &[T]) -> usize {
        let theta = self.threshold(s);
        let k = s.len();
        let mut tail = vec![T::zero(); k + 1];
        for i in (0..k).rev() {
            tail[i] = tail[i + 1] + s[i] * s[i];
        }
        let r = (0..=k)
            .find(|&r| tail[r] < theta || tail[r] == T::zero())
            .unwrap_or(k);
        r.max(self.min_rank).min(k)
    }
}

/// `U diag(S) Vᵀ` without the frozen base.
pub fn assemble_dense<T: Scalar>(adapter: &LowRankAdapter<T>) -> Matrix<T> {
    adapter.u.scale_columns(&adapter.s).matmul_t(&adapter.v)
}

fn check_shape<T: Scalar>(adapter: &LowRankAdapter<T>, z: &Matrix<T>) -> Result<()> {
    if z.shape() != adapter.shape() {
        return Err(Error::invalid(format!(
            "matrix shape {:?} does not match adapter shape {:?}",
            z.shape(),
            adapter.shape()
        )));
    }
    Ok(())
}

/// Orthogonal projection onto the tangent space at `U S Vᵀ`:
/// `UUᵀZ + ZVVᵀ − UUᵀZVVᵀ`.
pub fn tangent_project<T: Scalar>(adapter: &LowRankAdapter<T>, z: &Matrix<T>) -> Result<Matrix<T>> {
    check_shape(adapter, z)?;
    let (u, v) = (&adapter.u, &adapter.v);
    let utz = u.t_matmul(z);
    let zv = z.matmul(v);
    let core = utz.matmul(v);
    let mut out = u.matmul(&utz);
    out.axpy(T::one(), &zv.matmul_t(v));
    out.axpy(-T::one(), &u.matmul(&core).matmul_t(v));
    Ok(out)
}

/// The simultaneous-descent map as displayed for the SVD-LoRA flow:
/// `Z V S² Vᵀ − U Uᵀ Z V Vᵀ + U S² Uᵀ Z`. Coincides with the tangent
/// projection when `S = I`.
pub fn hat_project<T: Scalar>(adapter: &LowRankAdapter<T>, z: &Matrix<T>) -> Result<Matrix<T>> {
    check_shape(adapter, z)?;
    let (u, v) = (&adapter.u, &adapter.v);
    let s2: Vec<T> = adapter.s.iter().map(|&x| x * x).collect();
    let zv = z.matmul(v);
    let utz = u.t_matmul(z);
    let mut out = zv.scale_columns(&s2).matmul_t(v);
    out.axpy(-T::one(), &u.matmul(&utz.matmul(v)).matmul_t(v));
    out.axpy(T::one(), &u.scale_columns(&s2).matmul(&utz));
    Ok(out)
}

/// First-order increment map of one simultaneous factor step on `W = U S Vᵀ`
/// with dense `S` and arbitrary `U`, `V`: `Z V SᵀS Vᵀ + U Uᵀ Z V Vᵀ + U S Sᵀ Uᵀ Z`.
///
/// A step of size `λ` on the loss with gradient `Z` moves `W` by
/// `−λ · simultaneous_project(Z) + O(λ²)`.
pub fn simultaneous_project<T: Scalar>(
    u: &Matrix<T>,
    s: &Matrix<T>,
    v: &Matrix<T>,
    z: &Matrix<T>,
) -> Matrix<T> {
    let zv = z.matmul(v);
    let utz = u.t_matmul(z);
    let mut out = zv.matmul(&s.t_matmul(s)).matmul_t(v);
    out.axpy(T::one(), &u.matmul(&utz.matmul(v)).matmul_t(v));
    out.axpy(T::one(), &u.matmul(&s.matmul_t(s)).matmul(&utz));
    out
}

/// Truncates to the leading `rank` singular triplets of the augmented `Ŝ`.
pub fn truncate_to_rank<T: Scalar>(
    state: &AugmentedState<T>,
    decomposition: &SvdResult<T>,
    rank: usize,
) -> LowRankAdapter<T> {
    let k = decomposition.singular_values.len();
    let r = rank.clamp(1, k);
    let p = decomposition.left.columns(0, r);
    let q = decomposition.right.columns(0, r);
    LowRankAdapter::from_parts(
        state.aug_u.matmul(&p),
        decomposition.singular_values[..r].to_vec(),
        state.aug_v.matmul(&q),
    )
}

/// Local truncation by the relative threshold of `policy`.
pub fn truncate<T: Scalar>(
    state: &AugmentedState<T>,
    policy: &TruncationPolicy<T>,
) -> Result<LowRankAdapter<T>> {
    if !policy.is_local() {
        return Err(Error::invalid(
            "truncate handles local policies; use global_truncate for global modes",
        ));
    }
    let dec = state.svd()?;
    let r = policy.select_rank(&dec.singular_values);
    Ok(truncate_to_rank(state, &dec, r))
}

/// `‖Û Ŝ V̂ᵀ − U₁ S₁ V₁ᵀ‖_F`, evaluated in the augmented coordinates.
pub fn truncation_drop<T: Scalar>(state: &AugmentedState<T>, result: &LowRankAdapter<T>) -> T {
    let pu = state.aug_u.t_matmul(&result.u);
    let pv = state.aug_v.t_matmul(&result.v);
    let kept = pu.scale_columns(&result.s).matmul_t(&pv);
    (&state.aug_s - &kept).frobenius_norm()
}

/// `rows × cols` matrix with orthonormal columns from a Gaussian draw.
pub fn random_orthonormal<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<Matrix<T>> {
    let g = gaussian_matrix(rows, cols, 1.0, rng);
    qr_orthonormalize(&g)
}

pub fn gaussian_matrix<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let x: f64 = rng.sample(StandardNormal);
        T::lit(std * x)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_adapter(n: usize, m: usize, s: &[f64], seed: u64) -> LowRankAdapter<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_orthonormal(n, s.len(), &mut rng).unwrap();
        let v = random_orthonormal(m, s.len(), &mut rng).unwrap();
        LowRankAdapter::new(u, s.to_vec(), v).unwrap()
    }

    fn state_from_diag(values: &[f64]) -> AugmentedState<f64> {
        let k = values.len();
        AugmentedState {
            aug_u: Matrix::eye(k + 2, k),
            aug_s: Matrix::from_diag(values),
            aug_v: Matrix::eye(k + 1, k),
            base_rank: k / 2,
        }
    }

    #[test]
    fn construction_rejects_bad_factors() {
        let u = Matrix::<f64>::eye(3, 2);
        assert!(LowRankAdapter::new(u.clone(), vec![1.0], Matrix::eye(3, 2)).is_err());
        assert!(LowRankAdapter::new(u.scale(2.0), vec![1.0, 1.0], Matrix::eye(3, 2)).is_err());
        assert!(LowRankAdapter::new(Matrix::<f64>::eye(3, 0), vec![], Matrix::eye(3, 0)).is_err());
        let a = LowRankAdapter::new(u, vec![0.0, 0.0], Matrix::eye(4, 2)).unwrap();
        assert!(a.first_step());
        assert_eq!(a.s_inverse(), &[1.0, 1.0]);
    }

    #[test]
    fn dense_assembly() {
        let zero = random_adapter(5, 4, &[0.0, 0.0], 1);
        assert_eq!(assemble_dense(&zero), Matrix::zeros(5, 4));

        let e1 = Matrix::eye(3, 1);
        let e2 = Matrix::from_fn(3, 1, |i, _| if i == 1 { 1.0 } else { 0.0 });
        let a = LowRankAdapter::new(e1, vec![7.0], e2).unwrap();
        let w = assemble_dense(&a);
        assert_eq!(w[(0, 1)], 7.0);
        assert_eq!(w.frobenius_norm(), 7.0);

        let a = random_adapter(6, 5, &[3.0, 1.5, 0.2], 2);
        let explicit = a.u().matmul(&a.s_matrix()).matmul_t(a.v());
        assert!((&assemble_dense(&a) - &explicit).frobenius_norm() < 1e-12);
    }

    #[test]
    fn tangent_projection_cases() {
        let a = random_adapter(7, 6, &[2.0, 1.0], 3);
        let core = Matrix::from_fn(2, 2, |i, j| (i as f64) - 2.0 * j as f64 + 0.5);
        let z = a.u().matmul(&core).matmul_t(a.v());
        assert!((&tangent_project(&a, &z).unwrap() - &z).frobenius_norm() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let full_u = crate::linalg::orthonormal_extension(a.u(), &Matrix::zeros(7, 0), 1).unwrap();
        let full_v = crate::linalg::orthonormal_extension(a.v(), &Matrix::zeros(6, 0), 1).unwrap();
        let normal = full_u.columns(2, 3).matmul_t(&full_v.columns(2, 3));
        assert!(tangent_project(&a, &normal).unwrap().frobenius_norm() < 1e-12);

        let z: Matrix<f64> = gaussian_matrix(7, 6, 1.0, &mut rng);
        let p = tangent_project(&a, &z).unwrap();
        let pp = tangent_project(&a, &p).unwrap();
        assert!((&pp - &p).frobenius_norm() < 1e-12);
        assert!(matches!(
            tangent_project(&a, &Matrix::zeros(6, 7)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn hat_projection_degenerates_at_identity_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_adapter(8, 6, &[1.0, 1.0, 1.0], 6);
        let z: Matrix<f64> = gaussian_matrix(8, 6, 1.0, &mut rng);
        let diff = &hat_project(&a, &z).unwrap() - &tangent_project(&a, &z).unwrap();
        assert!(diff.frobenius_norm() < 1e-12);
        assert_eq!(
            hat_project(&a, &Matrix::zeros(8, 6)).unwrap(),
            Matrix::zeros(8, 6)
        );

        let b = random_adapter(8, 6, &[3.0, 0.5, 0.1], 6);
        let diff = &hat_project(&b, &z).unwrap() - &tangent_project(&b, &z).unwrap();
        assert!(diff.frobenius_norm() > 1e-3);
    }

    #[test]
    fn threshold_rank_selection() {
        let nuclear = TruncationPolicy::local(0.15).with_norm(ThresholdNorm::Nuclear);
        assert_eq!(nuclear.select_rank(&[15.0, 2.0, 1e-9, 0.0]), 2);
        let squared = TruncationPolicy::local(0.15);
        assert_eq!(squared.select_rank(&[15.0, 2.0, 1e-9, 0.0]), 1);

        let exact = TruncationPolicy::local(0.0);
        assert_eq!(exact.select_rank(&[3.0, 1e-30, 0.0, 0.0]), 2);

        // tail of two equal values: 2 < 0.55 * 4 while a tail of three is not
        let ties = TruncationPolicy::local(0.55);
        assert_eq!(ties.select_rank(&[1.0, 1.0, 1.0, 1.0]), 2);

        let floor = TruncationPolicy::local(0.9).with_min_rank(3);
        assert_eq!(floor.select_rank(&[1.0, 1e-3, 1e-4, 1e-5]), 3);
        assert_eq!(floor.select_rank(&[1.0, 1e-3]), 2);
    }

    #[test]
    fn truncation_and_drop() {
        let state = state_from_diag(&[15.0, 2.0, 1e-9, 0.0]);
        let policy = TruncationPolicy::local(0.15).with_norm(ThresholdNorm::Nuclear);
        let out = truncate(&state, &policy).unwrap();
        assert_eq!(out.rank(), 2);
        assert_eq!(out.s(), &[15.0, 2.0]);
        assert!(!out.first_step());
        assert!(out.orthonormality_error() < 1e-14);
        assert!((truncation_drop(&state, &out) - 1e-9).abs() < 1e-18);

        let state = state_from_diag(&[1.0, 0.4, 0.3]);
        let out = truncate(&state, &TruncationPolicy::local(0.3)).unwrap();
        assert_eq!(out.rank(), 1);
        assert!((truncation_drop(&state, &out) - 0.5).abs() < 1e-14);

        let all = truncate(&state, &TruncationPolicy::local(0.0)).unwrap();
        assert_eq!(truncation_drop(&state, &all), 0.0);

        let global = TruncationPolicy::local(0.1).with_mode(TruncationMode::GlobalRelative);
        assert!(truncate(&state, &global).is_err());
    }
}
