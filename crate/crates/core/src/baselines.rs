//! Comparison optimizers sharing the [`Problem`] interface: full gradient
//! descent, LoRA with `W = A Bᵀ`, simultaneous descent on `U S Vᵀ` with and
//! without orthogonality regularization, and sequential DLRT.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geolora::{basis_augmentation, truncate_states, Truncated};
use crate::linalg::{svd, Matrix};
use crate::lowrank::{gaussian_matrix, AugmentedState, LowRankAdapter, TruncationPolicy};
use crate::optim::{adam_step, AdamOpts, AdamState};
use crate::problems::{params_of, FactorGradients, LayerParam, OwnedFactors, Problem};
use crate::scalar::Scalar;

/// `W = U S Vᵀ` with dense `S` and unconstrained `U`, `V`.
#[derive(Debug, Clone)]
pub struct DenseFactorAdapter<T> {
    u: Matrix<T>,
    s: Matrix<T>,
    v: Matrix<T>,
}

impl<T: Scalar> DenseFactorAdapter<T> {
    pub fn new(u: Matrix<T>, s: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        if u.cols() != s.rows() || v.cols() != s.cols() || u.cols() == 0 {
            return Err(Error::invalid(format!(
                "factor shapes disagree: U {:?}, S {:?}, V {:?}",
                u.shape(),
                s.shape(),
                v.shape()
            )));
        }
        if !(u.is_finite() && s.is_finite() && v.is_finite()) {
            return Err(Error::invalid(
                "dense factor adapter has non-finite entries",
            ));
        }
        Ok(Self { u, s, v })
    }

    /// Gaussian `U`, `V` with standard deviation `std` and `S = 0`.
    pub fn gaussian<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        rank: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            gaussian_matrix(rows, rank, std, rng),
            Matrix::zeros(rank, rank),
            gaussian_matrix(cols, rank, std, rng),
        )
    }

    pub fn u(&self) -> &Matrix<T> {
        &self.u
    }

    pub fn s(&self) -> &Matrix<T> {
        &self.s
    }

    pub fn v(&self) -> &Matrix<T> {
        &self.v
    }

    pub fn rank(&self) -> usize {
        self.s.rows()
    }

    pub fn dense(&self) -> Matrix<T> {
        self.u.matmul(&self.s).matmul_t(&self.v)
    }

    pub fn param(&self) -> LayerParam<'_, T> {
        LayerParam::Factored {
            u: &self.u,
            s: &self.s,
            v: &self.v,
        }
    }

    /// `max(‖UᵀU − I‖_F, ‖VᵀV − I‖_F)`.
    pub fn orthonormality_error(&self) -> T {
        self.u
            .orthonormality_error()
            .max(self.v.orthonormality_error())
    }

    /// `‖UᵀU − I‖²_F + ‖VᵀV − I‖²_F`.
    pub fn orthogonality_penalty(&self) -> T {
        let a = self.u.orthonormality_error();
        let b = self.v.orthonormality_error();
        a * a + b * b
    }
}

/// `W = scale · A Bᵀ`.
#[derive(Debug, Clone)]
pub struct AbAdapter<T> {
    a: Matrix<T>,
    b: Matrix<T>,
    scale: T,
    /// `scale · I`, the coefficient block used to evaluate the problem.
    coeff: Matrix<T>,
}

impl<T: Scalar> AbAdapter<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>, scale: T) -> Result<Self> {
        if a.cols() != b.cols() || a.cols() == 0 {
            return Err(Error::invalid(format!(
                "A is {:?} but B is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if !scale.is_finite() {
            return Err(Error::invalid("LoRA scale must be finite"));
        }
        let coeff = Matrix::identity(a.cols()).scale(scale);
        Ok(Self { a, b, scale, coeff })
    }

    /// Gaussian `A` with standard deviation `std`, zero `B`.
    pub fn gaussian<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        rank: usize,
        std: f64,
        scale: T,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            gaussian_matrix(rows, rank, std, rng),
            Matrix::zeros(cols, rank),
            scale,
        )
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn dense(&self) -> Matrix<T> {
        self.a.matmul_t(&self.b).scale(self.scale)
    }

    pub fn param(&self) -> LayerParam<'_, T> {
        LayerParam::Factored {
            u: &self.a,
            s: &self.coeff,
            v: &self.b,
        }
    }
}

fn finite_loss<T: Scalar>(loss: T, stage: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(stage, "loss is not finite"))
    }
}

fn checked<T: Scalar>(m: Matrix<T>, stage: &str, layer: usize) -> Result<Matrix<T>> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::numeric(stage, "update produced non-finite entries").at_layer(layer))
    }
}

/// `W ← W − λ∇_W L(W)` on every layer.
pub fn full_gd_step<T: Scalar>(
    weights: &[Matrix<T>],
    problem: &dyn Problem<T>,
    lr: T,
) -> Result<Vec<Matrix<T>>> {
    let params: Vec<LayerParam<'_, T>> = weights.iter().map(LayerParam::Dense).collect();
    let bundle = problem.gradients(&params, false)?;
    finite_loss(bundle.loss, "full_gd")?;
    weights
        .iter()
        .zip(bundle.layers)
        .enumerate()
        .map(|(l, (w, g))| {
            let mut next = w.clone();
            next.axpy(-lr, &g.into_dense()?);
            checked(next, "full_gd", l)
        })
        .collect()
}

/// Simultaneous step on `A` and `B` from one evaluation.
pub fn lora_ab_step<T: Scalar>(
    adapters: &[AbAdapter<T>],
    problem: &dyn Problem<T>,
    lr: T,
) -> Result<Vec<AbAdapter<T>>> {
    let params: Vec<LayerParam<'_, T>> = adapters.iter().map(AbAdapter::param).collect();
    let bundle = problem.gradients(&params, false)?;
    finite_loss(bundle.loss, "lora_ab")?;
    adapters
        .iter()
        .zip(bundle.layers)
        .enumerate()
        .map(|(l, (ad, g))| {
            // with S = scale·I the factor gradients are ∇_W L·B·scale and ∇_W Lᵀ·A·scale
            let g = g.into_factors()?;
            let mut a = ad.a.clone();
            a.axpy(-lr, &g.g_u);
            let mut b = ad.b.clone();
            b.axpy(-lr, &g.g_v);
            Ok(AbAdapter {
                a: checked(a, "lora_ab", l)?,
                b: checked(b, "lora_ab", l)?,
                scale: ad.scale,
                coeff: ad.coeff.clone(),
            })
        })
        .collect()
}

fn factor_gradients<T: Scalar>(
    adapters: &[DenseFactorAdapter<T>],
    problem: &dyn Problem<T>,
    stage: &str,
) -> Result<Vec<FactorGradients<T>>> {
    let params: Vec<LayerParam<'_, T>> = adapters.iter().map(DenseFactorAdapter::param).collect();
    let bundle = problem.gradients(&params, false)?;
    finite_loss(bundle.loss, stage)?;
    bundle
        .layers
        .into_iter()
        .map(|g| g.into_factors())
        .collect()
}

/// Explicit Euler step of the simultaneous factor flow:
/// `U ← U − λ∇_W L V Sᵀ`, `S ← S − λUᵀ∇_W L V`, `V ← V − λ∇_W Lᵀ U S`.
pub fn svd_lora_step<T: Scalar>(
    adapters: &[DenseFactorAdapter<T>],
    problem: &dyn Problem<T>,
    lr: T,
) -> Result<Vec<DenseFactorAdapter<T>>> {
    let grads = factor_gradients(adapters, problem, "svd_lora")?;
    adapters
        .iter()
        .zip(grads)
        .enumerate()
        .map(|(l, (ad, g))| {
            let step = |p: &Matrix<T>, d: &Matrix<T>| -> Result<Matrix<T>> {
                let mut x = p.clone();
                x.axpy(-lr, d);
                checked(x, "svd_lora", l)
            };
            Ok(DenseFactorAdapter {
                u: step(&ad.u, &g.g_u)?,
                s: step(&ad.s, &g.g_s)?,
                v: step(&ad.v, &g.g_v)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineOptimizer {
    #[default]
    Sgd,
    Adam,
}

/// Settings of the regularized simultaneous-descent baseline.
#[derive(Debug, Clone, Copy)]
pub struct AdaLoraOpts<T> {
    pub learning_rate: T,
    /// Weight of `‖UᵀU − I‖²_F + ‖VᵀV − I‖²_F`.
    pub gamma: T,
    pub optimizer: BaselineOptimizer,
    /// Truncate after every `truncate_every` steps; 0 disables truncation.
    pub truncate_every: usize,
    pub policy: TruncationPolicy<T>,
}

impl<T: Scalar> AdaLoraOpts<T> {
    pub fn new(learning_rate: T, gamma: T, policy: TruncationPolicy<T>) -> Self {
        Self {
            learning_rate,
            gamma,
            optimizer: BaselineOptimizer::Sgd,
            truncate_every: 1,
            policy,
        }
    }
}

/// Step count and Adam moments of the regularized baseline.
#[derive(Debug, Clone, Default)]
pub struct AdaLoraState<T> {
    steps: usize,
    moments: Vec<[Option<AdamState<T>>; 3]>,
}

impl<T: Scalar> AdaLoraState<T> {
    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// One regularized simultaneous step, then (every `truncate_every` steps) an
/// SVD of each dense `S` truncated by the policy. Adam moments restart
/// whenever truncation re-expresses the factors.
pub fn adalora_lite_step<T: Scalar>(
    adapters: &[DenseFactorAdapter<T>],
    problem: &dyn Problem<T>,
    opts: &AdaLoraOpts<T>,
    state: &mut AdaLoraState<T>,
) -> Result<Vec<DenseFactorAdapter<T>>> {
    if opts.gamma.is_nan() || opts.gamma < T::zero() {
        return Err(Error::invalid("gamma must be non-negative"));
    }
    let grads = factor_gradients(adapters, problem, "adalora_lite")?;
    if state.moments.len() != adapters.len() {
        state.moments = vec![[None, None, None]; adapters.len()];
    }
    let four_gamma = T::lit(4.0) * opts.gamma;
    let lr = opts.learning_rate;
    let adam = AdamOpts::default();
    let mut out = Vec::with_capacity(adapters.len());
    for (l, ((ad, g), moments)) in adapters
        .iter()
        .zip(grads)
        .zip(state.moments.iter_mut())
        .enumerate()
    {
        let mut g_u = g.g_u;
        let mut g_v = g.g_v;
        if opts.gamma != T::zero() {
            let r = ad.rank();
            let eye = Matrix::identity(r);
            g_u.axpy(four_gamma, &ad.u.matmul(&(&ad.u.t_matmul(&ad.u) - &eye)));
            g_v.axpy(four_gamma, &ad.v.matmul(&(&ad.v.t_matmul(&ad.v) - &eye)));
        }
        let params = [(&ad.u, &g_u), (&ad.s, &g.g_s), (&ad.v, &g_v)];
        let mut next: Vec<Matrix<T>> = Vec::with_capacity(3);
        for ((p, d), m) in params.into_iter().zip(moments.iter_mut()) {
            let x = match opts.optimizer {
                BaselineOptimizer::Sgd => {
                    let mut x = p.clone();
                    x.axpy(-lr, d);
                    x
                }
                BaselineOptimizer::Adam => adam_step(p, d, lr, &adam, m)?,
            };
            next.push(checked(x, "adalora_lite", l)?);
        }
        let v = next.pop().expect("three factors");
        let s = next.pop().expect("three factors");
        let u = next.pop().expect("three factors");
        out.push(DenseFactorAdapter { u, s, v });
    }
    state.steps += 1;
    if opts.truncate_every > 0 && state.steps.is_multiple_of(opts.truncate_every) {
        for (l, (ad, moments)) in out.iter_mut().zip(state.moments.iter_mut()).enumerate() {
            *ad = svd_truncate(ad, &opts.policy).map_err(|e| e.at_layer(l))?;
            *moments = [None, None, None];
        }
    }
    Ok(out)
}

/// `U S Vᵀ → (U P₁) Σ₁ (V Q₁)ᵀ` from the SVD `S = P Σ Qᵀ`, truncated by `policy`.
pub fn svd_truncate<T: Scalar>(
    ad: &DenseFactorAdapter<T>,
    policy: &TruncationPolicy<T>,
) -> Result<DenseFactorAdapter<T>> {
    let dec = svd(&ad.s).map_err(|e| match e {
        Error::InvalidArgument(d) => Error::numeric("truncation", d),
        other => other,
    })?;
    let r = policy.select_rank(&dec.singular_values);
    Ok(DenseFactorAdapter {
        u: ad.u.matmul(&dec.left.columns(0, r)),
        s: Matrix::from_diag(&dec.singular_values[..r]),
        v: ad.v.matmul(&dec.right.columns(0, r)),
    })
}

/// Outcome of one sequential DLRT iteration.
#[derive(Debug, Clone)]
pub struct DlrtReport<T> {
    pub layers: Vec<Truncated<T>>,
}

/// Sequential DLRT: a K-step and an L-step from two separate evaluations,
/// basis augmentation, then an S-step on the augmented bases from a third
/// evaluation, followed by truncation.
pub fn dlrt_sequential_step<T: Scalar>(
    adapters: &[LowRankAdapter<T>],
    problem: &dyn Problem<T>,
    lr: T,
    policy: &TruncationPolicy<T>,
) -> Result<(Vec<LowRankAdapter<T>>, DlrtReport<T>)> {
    let eval = |factors: &[OwnedFactors<T>], stage: &str| -> Result<Vec<FactorGradients<T>>> {
        let bundle = problem.gradients(&params_of(factors), false)?;
        finite_loss(bundle.loss, stage)?;
        bundle
            .layers
            .into_iter()
            .map(|g| g.into_factors())
            .collect()
    };

    let k_form: Vec<OwnedFactors<T>> = adapters
        .iter()
        .map(|a| OwnedFactors {
            u: a.u().scale_columns(a.s()),
            s: Matrix::identity(a.rank()),
            v: a.v().clone(),
        })
        .collect();
    let gk = eval(&k_form, "dlrt_k")?;
    let l_form: Vec<OwnedFactors<T>> = adapters
        .iter()
        .map(|a| OwnedFactors {
            u: a.u().clone(),
            s: Matrix::identity(a.rank()),
            v: a.v().scale_columns(a.s()),
        })
        .collect();
    let gl = eval(&l_form, "dlrt_l")?;

    let mut bases = Vec::with_capacity(adapters.len());
    for (l, a) in adapters.iter().enumerate() {
        let mut k = k_form[l].u.clone();
        k.axpy(-lr, &gk[l].g_u);
        let mut lm = l_form[l].v.clone();
        lm.axpy(-lr, &gl[l].g_v);
        let k = checked(k, "dlrt_k", l)?;
        let lm = checked(lm, "dlrt_l", l)?;
        bases.push(basis_augmentation(a, &k, &lm).map_err(|e| e.at_layer(l))?);
    }

    // S₀ expressed in the augmented bases
    let s_form: Vec<OwnedFactors<T>> = adapters
        .iter()
        .zip(&bases)
        .map(|(a, (uh, vh))| {
            let left = uh.t_matmul(a.u()).scale_columns(a.s());
            OwnedFactors {
                u: uh.clone(),
                s: left.matmul(&a.v().t_matmul(vh)),
                v: vh.clone(),
            }
        })
        .collect();
    let gs = eval(&s_form, "dlrt_s")?;
    let states: Vec<AugmentedState<T>> = s_form
        .into_iter()
        .zip(gs)
        .zip(adapters)
        .enumerate()
        .map(|(l, ((f, g), a))| {
            let mut s = f.s;
            s.axpy(-lr, &g.g_s);
            Ok(AugmentedState {
                aug_u: f.u,
                aug_s: checked(s, "dlrt_s", l)?,
                aug_v: f.v,
                base_rank: a.rank(),
            })
        })
        .collect::<Result<_>>()?;
    let truncated = truncate_states(&states, policy, false)?;
    let next = truncated
        .iter()
        .zip(adapters)
        .map(|(t, old)| t.adapter.clone().carry_frozen_base(old))
        .collect();
    Ok((next, DlrtReport { layers: truncated }))
}
