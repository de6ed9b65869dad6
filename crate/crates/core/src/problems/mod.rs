//! Differentiable objectives with factored gradients from one reverse pass.

mod descriptor;
mod matreg;
mod tinynet;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use descriptor::{ProblemDescriptor, SingularSpectrum};
pub use matreg::{build_stiffness_case, MatrixRegression, StiffnessCase};
pub use tinynet::{Activation, LayerSpec, NetCache, TinyNet};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::LowRankAdapter;
use crate::scalar::Scalar;

/// How a layer's trainable increment is parameterized for one evaluation.
#[derive(Debug, Clone, Copy)]
pub enum LayerParam<'a, T> {
    /// The increment `W` itself.
    Dense(&'a Matrix<T>),
    /// `W = U S Vᵀ` with dense `S`. The factors need not be orthonormal.
    Factored {
        u: &'a Matrix<T>,
        s: &'a Matrix<T>,
        v: &'a Matrix<T>,
    },
}

impl<T: Scalar> LayerParam<'_, T> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerParam::Dense(w) => w.shape(),
            LayerParam::Factored { u, v, .. } => (u.rows(), v.rows()),
        }
    }

    pub fn dense(&self) -> Matrix<T> {
        match self {
            LayerParam::Dense(w) => (*w).clone(),
            LayerParam::Factored { u, s, v } => u.matmul(s).matmul_t(v),
        }
    }

    pub(crate) fn check(&self, expected: (usize, usize), layer: usize) -> Result<()> {
        if let LayerParam::Factored { u, s, v } = self {
            if s.shape() != (u.cols(), v.cols()) {
                return Err(Error::invalid(format!(
                    "layer {layer}: S is {:?} but U, V have {} and {} columns",
                    s.shape(),
                    u.cols(),
                    v.cols()
                )));
            }
        }
        if self.shape() != expected {
            return Err(Error::invalid(format!(
                "layer {layer}: parameter shape {:?}, expected {expected:?}",
                self.shape()
            )));
        }
        Ok(())
    }
}

/// `(G_U, G_S, G_V)` for one factored layer.
#[derive(Debug, Clone)]
pub struct FactorGradients<T> {
    pub g_u: Matrix<T>,
    pub g_s: Matrix<T>,
    pub g_v: Matrix<T>,
}

impl<T: Scalar> FactorGradients<T> {
    pub fn is_finite(&self) -> bool {
        self.g_u.is_finite() && self.g_s.is_finite() && self.g_v.is_finite()
    }
}

#[derive(Debug, Clone)]
pub enum LayerGradient<T> {
    Dense(Matrix<T>),
    Factored(FactorGradients<T>),
}

impl<T: Scalar> LayerGradient<T> {
    pub fn factors(&self) -> Option<&FactorGradients<T>> {
        match self {
            LayerGradient::Factored(f) => Some(f),
            LayerGradient::Dense(_) => None,
        }
    }

    pub fn into_factors(self) -> Result<FactorGradients<T>> {
        match self {
            LayerGradient::Factored(f) => Ok(f),
            LayerGradient::Dense(_) => Err(Error::invalid("expected factored gradients")),
        }
    }

    pub fn into_dense(self) -> Result<Matrix<T>> {
        match self {
            LayerGradient::Dense(g) => Ok(g),
            LayerGradient::Factored(_) => Err(Error::invalid("expected a dense gradient")),
        }
    }
}

/// Loss and per-layer gradients from one evaluation.
#[derive(Debug, Clone)]
pub struct GradientBundle<T> {
    pub loss: T,
    pub layers: Vec<LayerGradient<T>>,
    /// `∇_W L` per layer, filled only when requested.
    pub dense_gradient: Option<Vec<Matrix<T>>>,
}

pub trait Problem<T: Scalar>: Send + Sync {
    /// `(rows, cols)` of every trainable layer increment, in order.
    fn layer_shapes(&self) -> Vec<(usize, usize)>;

    fn loss(&self, params: &[LayerParam<'_, T>]) -> Result<T>;

    /// One reverse pass. Factored layers get factor gradients, dense layers a
    /// dense gradient; `want_dense` additionally materializes `∇_W L` for all
    /// layers.
    fn gradients(
        &self,
        params: &[LayerParam<'_, T>],
        want_dense: bool,
    ) -> Result<GradientBundle<T>>;

    /// Gradient Lipschitz estimate used by the descent check.
    fn lipschitz_estimate(&self) -> Option<T> {
        None
    }

    fn check_params(&self, params: &[LayerParam<'_, T>]) -> Result<()> {
        let shapes = self.layer_shapes();
        if shapes.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} layers, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (l, (p, &shape)) in params.iter().zip(&shapes).enumerate() {
            p.check(shape, l)?;
        }
        Ok(())
    }
}

/// Counts gradient evaluations of the wrapped problem.
pub struct CountingProblem<'a, T> {
    inner: &'a dyn Problem<T>,
    count: AtomicUsize,
}

impl<'a, T: Scalar> CountingProblem<'a, T> {
    pub fn new(inner: &'a dyn Problem<T>) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &'a dyn Problem<T> {
        self.inner
    }
}

impl<T: Scalar> Problem<T> for CountingProblem<'_, T> {
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.inner.layer_shapes()
    }

    fn loss(&self, params: &[LayerParam<'_, T>]) -> Result<T> {
        self.inner.loss(params)
    }

    fn gradients(
        &self,
        params: &[LayerParam<'_, T>],
        want_dense: bool,
    ) -> Result<GradientBundle<T>> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.gradients(params, want_dense)
    }

    fn lipschitz_estimate(&self) -> Option<T> {
        self.inner.lipschitz_estimate()
    }
}

/// Owned factors of one layer, convertible to a [`LayerParam`].
#[derive(Debug, Clone)]
pub struct OwnedFactors<T> {
    pub u: Matrix<T>,
    pub s: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> OwnedFactors<T> {
    pub fn from_adapter(a: &LowRankAdapter<T>) -> Self {
        Self {
            u: a.u().clone(),
            s: a.s_matrix(),
            v: a.v().clone(),
        }
    }

    pub fn param(&self) -> LayerParam<'_, T> {
        LayerParam::Factored {
            u: &self.u,
            s: &self.s,
            v: &self.v,
        }
    }
}

pub fn params_of<T: Scalar>(factors: &[OwnedFactors<T>]) -> Vec<LayerParam<'_, T>> {
    factors.iter().map(OwnedFactors::param).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    U,
    S,
    V,
}

/// Central differences of the loss in every entry of one factor of `layer`.
pub fn finite_diff_gradient<T: Scalar>(
    problem: &dyn Problem<T>,
    factors: &[OwnedFactors<T>],
    layer: usize,
    which: Factor,
    epsilon: T,
) -> Result<Matrix<T>> {
    if epsilon.is_nan() || epsilon <= T::zero() {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if layer >= factors.len() {
        return Err(Error::invalid("layer index out of range"));
    }
    let mut work = factors.to_vec();
    let (rows, cols) = get(&work[layer], which).shape();
    let mut grad = Matrix::zeros(rows, cols);
    let two = T::lit(2.0);
    for i in 0..rows {
        for j in 0..cols {
            let orig = get(&work[layer], which)[(i, j)];
            get_mut(&mut work[layer], which)[(i, j)] = orig + epsilon;
            let plus = problem.loss(&params_of(&work))?;
            get_mut(&mut work[layer], which)[(i, j)] = orig - epsilon;
            let minus = problem.loss(&params_of(&work))?;
            get_mut(&mut work[layer], which)[(i, j)] = orig;
            grad[(i, j)] = (plus - minus) / (two * epsilon);
        }
    }
    Ok(grad)
}

fn get<T>(f: &OwnedFactors<T>, which: Factor) -> &Matrix<T> {
    match which {
        Factor::U => &f.u,
        Factor::S => &f.s,
        Factor::V => &f.v,
    }
}

fn get_mut<T>(f: &mut OwnedFactors<T>, which: Factor) -> &mut Matrix<T> {
    match which {
        Factor::U => &mut f.u,
        Factor::S => &mut f.s,
        Factor::V => &mut f.v,
    }
}

/// `‖G_U S⁻ᵀ − ∇_K L‖_F` and `‖G_V S⁻¹ − ∇_L L‖_F` for every layer.
///
/// The first terms come from one evaluation at `(U, S, V)`; the second from
/// evaluations at `(K = US, I, V)` and `(U, I, L = VSᵀ)`.
pub fn gradient_trick_residual<T: Scalar>(
    problem: &dyn Problem<T>,
    adapters: &[LowRankAdapter<T>],
) -> Result<Vec<(T, T)>> {
    if adapters.iter().any(LowRankAdapter::first_step) {
        return Err(Error::invalid(
            "gradient trick needs invertible coefficients",
        ));
    }
    let base: Vec<OwnedFactors<T>> = adapters.iter().map(OwnedFactors::from_adapter).collect();
    let at_w = problem.gradients(&params_of(&base), false)?;

    let k_form: Vec<OwnedFactors<T>> = adapters
        .iter()
        .map(|a| OwnedFactors {
            u: a.u().scale_columns(a.s()),
            s: Matrix::identity(a.rank()),
            v: a.v().clone(),
        })
        .collect();
    let at_k = problem.gradients(&params_of(&k_form), false)?;

    let l_form: Vec<OwnedFactors<T>> = adapters
        .iter()
        .map(|a| OwnedFactors {
            u: a.u().clone(),
            s: Matrix::identity(a.rank()),
            v: a.v().scale_columns(a.s()),
        })
        .collect();
    let at_l = problem.gradients(&params_of(&l_form), false)?;

    let mut out = Vec::with_capacity(adapters.len());
    for (l, a) in adapters.iter().enumerate() {
        let g = factor_at(&at_w, l)?;
        let gk = factor_at(&at_k, l)?;
        let gl = factor_at(&at_l, l)?;
        let k_res = (&g.g_u.scale_columns(a.s_inverse()) - &gk.g_u).frobenius_norm();
        let l_res = (&g.g_v.scale_columns(a.s_inverse()) - &gl.g_v).frobenius_norm();
        out.push((k_res, l_res));
    }
    Ok(out)
}

fn factor_at<T: Scalar>(bundle: &GradientBundle<T>, layer: usize) -> Result<&FactorGradients<T>> {
    bundle
        .layers
        .get(layer)
        .and_then(LayerGradient::factors)
        .ok_or_else(|| Error::invalid(format!("layer {layer} has no factor gradients")))
}
