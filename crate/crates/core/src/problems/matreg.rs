use rand::Rng;

use super::{FactorGradients, GradientBundle, LayerGradient, LayerParam, Problem};
use crate::baselines::DenseFactorAdapter;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::{random_orthonormal, LowRankAdapter, ThresholdNorm, TruncationPolicy};
use crate::scalar::Scalar;

/// `L(W) = ½‖W_target − W‖²_F` on a single layer.
#[derive(Debug, Clone)]
pub struct MatrixRegression<T> {
    target: Matrix<T>,
    true_rank: Option<usize>,
}

impl<T: Scalar> MatrixRegression<T> {
    pub fn new(target: Matrix<T>) -> Result<Self> {
        if target.rows() == 0 || target.cols() == 0 {
            return Err(Error::invalid("regression target must be non-empty"));
        }
        if !target.is_finite() {
            return Err(Error::invalid("regression target has non-finite entries"));
        }
        Ok(Self {
            target,
            true_rank: None,
        })
    }

    /// `U diag(σ) Vᵀ` with random orthonormal `U`, `V`.
    pub fn random<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        sigma: &[T],
        rng: &mut R,
    ) -> Result<Self> {
        let r = sigma.len();
        if r == 0 || r > rows.min(cols) {
            return Err(Error::invalid(format!(
                "target rank {r} outside [1, {}]",
                rows.min(cols)
            )));
        }
        let u = random_orthonormal(rows, r, rng)?;
        let v = random_orthonormal(cols, r, rng)?;
        let mut p = Self::new(u.scale_columns(sigma).matmul_t(&v))?;
        p.true_rank = Some(r);
        Ok(p)
    }

    pub fn with_true_rank(mut self, rank: usize) -> Self {
        self.true_rank = Some(rank);
        self
    }

    pub fn target(&self) -> &Matrix<T> {
        &self.target
    }

    pub fn true_rank(&self) -> Option<usize> {
        self.true_rank
    }

    fn residual(&self, params: &[LayerParam<'_, T>]) -> Result<Matrix<T>> {
        self.check_params(params)?;
        Ok(&params[0].dense() - &self.target)
    }
}

impl<T: Scalar> Problem<T> for MatrixRegression<T> {
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        vec![self.target.shape()]
    }

    fn loss(&self, params: &[LayerParam<'_, T>]) -> Result<T> {
        Ok(T::lit(0.5) * self.residual(params)?.frobenius_norm_sq())
    }

    fn gradients(
        &self,
        params: &[LayerParam<'_, T>],
        want_dense: bool,
    ) -> Result<GradientBundle<T>> {
        let g = self.residual(params)?;
        let loss = T::lit(0.5) * g.frobenius_norm_sq();
        let layer = match params[0] {
            LayerParam::Dense(_) => LayerGradient::Dense(g.clone()),
            LayerParam::Factored { u, s, v } => {
                let gv = g.matmul(v);
                let gtu = g.t_matmul(u);
                LayerGradient::Factored(FactorGradients {
                    g_u: gv.matmul_t(s),
                    g_s: u.t_matmul(&gv),
                    g_v: gtu.matmul(s),
                })
            }
        };
        Ok(GradientBundle {
            loss,
            layers: vec![layer],
            dense_gradient: want_dense.then(|| vec![g]),
        })
    }

    fn lipschitz_estimate(&self) -> Option<T> {
        Some(T::one())
    }
}

/// The 20×20 fast-decaying-spectrum instance with its method settings.
#[derive(Debug, Clone)]
pub struct StiffnessCase<T> {
    pub problem: MatrixRegression<T>,
    pub adapter: LowRankAdapter<T>,
    pub dense: DenseFactorAdapter<T>,
    pub policy: TruncationPolicy<T>,
    pub geolora_rate: T,
    pub adalora_rate: T,
    pub svd_lora_rate: T,
}

pub const STIFFNESS_DIM: usize = 20;
pub const STIFFNESS_S0: [f64; 4] = [10.0, 1e-2, 1e-4, 1e-6];

pub fn build_stiffness_case<T: Scalar>() -> StiffnessCase<T> {
    let n = STIFFNESS_DIM;
    let mut target = Matrix::zeros(n, n);
    target[(0, 1)] = T::lit(15.0);
    target[(1, 0)] = T::lit(-2.0);
    let s0: Vec<T> = STIFFNESS_S0.iter().map(|&x| T::lit(x)).collect();
    let basis = Matrix::eye(n, s0.len());
    StiffnessCase {
        problem: MatrixRegression::new(target)
            .expect("finite target")
            .with_true_rank(2),
        adapter: LowRankAdapter::new(basis.clone(), s0.clone(), basis.clone())
            .expect("identity columns are orthonormal"),
        dense: DenseFactorAdapter::new(basis.clone(), Matrix::from_diag(&s0), basis)
            .expect("consistent shapes"),
        policy: TruncationPolicy::local(T::lit(0.15)).with_norm(ThresholdNorm::Nuclear),
        geolora_rate: T::lit(0.1),
        adalora_rate: T::lit(0.178),
        svd_lora_rate: T::lit(0.00178),
    }
}
