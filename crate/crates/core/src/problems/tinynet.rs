use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FactorGradients, GradientBundle, LayerGradient, LayerParam, Problem};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::gaussian_matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative at the pre-activation `x`; `relu'(0) = 0`.
    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// One layer `z ↦ σ(W_pt z + ΔW z)`.
#[derive(Debug, Clone)]
pub struct LayerSpec<T> {
    pub frozen_base: Matrix<T>,
    pub activation: Activation,
}

/// Mean-squared-error network over a fixed batch of column inputs.
#[derive(Debug, Clone)]
pub struct TinyNet<T> {
    layers: Vec<LayerSpec<T>>,
    inputs: Matrix<T>,
    targets: Matrix<T>,
}

/// Forward quantities kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct NetCache<T> {
    /// Input of every layer.
    pub inputs: Vec<Matrix<T>>,
    pub pre_activations: Vec<Matrix<T>>,
    /// `Vᵀ z` for factored layers.
    pub projected: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> TinyNet<T> {
    pub fn new(layers: Vec<LayerSpec<T>>, inputs: Matrix<T>, targets: Matrix<T>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        let mut width = inputs.rows();
        for (l, spec) in layers.iter().enumerate() {
            if spec.frozen_base.cols() != width {
                return Err(Error::invalid(format!(
                    "layer {l} expects input width {}, previous width is {width}",
                    spec.frozen_base.cols()
                )));
            }
            width = spec.frozen_base.rows();
        }
        if targets.shape() != (width, inputs.cols()) {
            return Err(Error::invalid(format!(
                "targets are {:?}, expected {:?}",
                targets.shape(),
                (width, inputs.cols())
            )));
        }
        if inputs.cols() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok(Self {
            layers,
            inputs,
            targets,
        })
    }

    /// Frozen Gaussian weights (std `1/√fan_in`), Gaussian inputs, and targets
    /// produced by the same network with a random rank-`teacher_rank` increment
    /// of scale `teacher_scale` on every layer.
    pub fn teacher<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        batch: usize,
        teacher_rank: usize,
        teacher_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("widths need an input and an output size"));
        }
        let mut layers = Vec::new();
        let mut increments = Vec::new();
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let act = if l + 2 == widths.len() {
                Activation::Identity
            } else {
                activation
            };
            layers.push(LayerSpec {
                frozen_base: gaussian_matrix(fan_out, fan_in, 1.0 / (fan_in as f64).sqrt(), rng),
                activation: act,
            });
            let r = teacher_rank.min(fan_in).min(fan_out);
            let a: Matrix<T> = gaussian_matrix(fan_out, r, 1.0, rng);
            let b: Matrix<T> = gaussian_matrix(fan_in, r, 1.0, rng);
            let scale = T::lit(teacher_scale / ((fan_in * fan_out) as f64).sqrt());
            increments.push(a.matmul_t(&b).scale(scale));
        }
        let inputs = gaussian_matrix(widths[0], batch, 1.0, rng);
        let placeholder = Matrix::zeros(widths[widths.len() - 1], batch);
        let mut net = Self::new(layers, inputs, placeholder)?;
        let params: Vec<LayerParam<'_, T>> = increments.iter().map(LayerParam::Dense).collect();
        let (out, _) = net.forward(&params)?;
        net.targets = out;
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec<T>] {
        &self.layers
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.cols()
    }

    /// The same network restricted to the batch columns `cols`.
    pub fn with_columns(&self, cols: &[usize]) -> Result<Self> {
        if cols.is_empty() || cols.iter().any(|&c| c >= self.batch_size()) {
            return Err(Error::invalid("minibatch columns out of range"));
        }
        let pick = |m: &Matrix<T>| Matrix::from_fn(m.rows(), cols.len(), |i, j| m[(i, cols[j])]);
        Ok(Self {
            layers: self.layers.clone(),
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
        })
    }

    /// Seeded shuffle of the batch into consecutive minibatches of `size`
    /// (the last one may be shorter).
    pub fn minibatch_partition<R: Rng + ?Sized>(
        &self,
        size: usize,
        rng: &mut R,
    ) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.batch_size()).collect();
        idx.shuffle(rng);
        idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// `z_{ℓ+1} = σ_ℓ(W_pt,ℓ z_ℓ + ΔW_ℓ z_ℓ)` for the whole batch.
    pub fn forward(&self, params: &[LayerParam<'_, T>]) -> Result<(Matrix<T>, NetCache<T>)> {
        self.check_params(params)?;
        let mut z = self.inputs.clone();
        let mut cache = NetCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
            projected: Vec::with_capacity(self.layers.len()),
        };
        for (spec, p) in self.layers.iter().zip(params) {
            let mut a = spec.frozen_base.matmul(&z);
            let projected = match p {
                LayerParam::Dense(w) => {
                    a.axpy(T::one(), &w.matmul(&z));
                    None
                }
                LayerParam::Factored { u, s, v } => {
                    let h = v.t_matmul(&z);
                    a.axpy(T::one(), &u.matmul(&s.matmul(&h)));
                    Some(h)
                }
            };
            let next = a.map(|x| spec.activation.apply(x));
            cache.inputs.push(z);
            cache.pre_activations.push(a);
            cache.projected.push(projected);
            z = next;
        }
        Ok((z, cache))
    }

    fn loss_of_outputs(&self, out: &Matrix<T>) -> T {
        let b = T::lit(self.batch_size() as f64);
        (out - &self.targets).frobenius_norm_sq() / (T::lit(2.0) * b)
    }

    /// One reverse traversal producing every layer's gradient.
    pub fn backprop(
        &self,
        params: &[LayerParam<'_, T>],
        outputs: &Matrix<T>,
        cache: &NetCache<T>,
        want_dense: bool,
    ) -> Result<GradientBundle<T>> {
        let nl = self.layers.len();
        let b = T::lit(self.batch_size() as f64);
        let mut upstream = (outputs - &self.targets).scale(b.recip());
        let mut layers: Vec<Option<LayerGradient<T>>> = vec![None; nl];
        let mut dense: Vec<Option<Matrix<T>>> = vec![None; nl];
        for l in (0..nl).rev() {
            let spec = &self.layers[l];
            let delta = upstream.zip_map(&cache.pre_activations[l], |g, a| {
                g * spec.activation.derivative(a)
            });
            let z = &cache.inputs[l];
            if want_dense {
                dense[l] = Some(delta.matmul_t(z));
            }
            let mut back = spec.frozen_base.t_matmul(&delta);
            match params[l] {
                LayerParam::Dense(w) => {
                    let g = dense[l].clone().unwrap_or_else(|| delta.matmul_t(z));
                    back.axpy(T::one(), &w.t_matmul(&delta));
                    layers[l] = Some(LayerGradient::Dense(g));
                }
                LayerParam::Factored { u, s, v } => {
                    let h = cache.projected[l]
                        .as_ref()
                        .ok_or_else(|| Error::invalid("cache does not match parameters"))?;
                    let p = u.t_matmul(&delta);
                    let stp = s.t_matmul(&p);
                    back.axpy(T::one(), &v.matmul(&stp));
                    layers[l] = Some(LayerGradient::Factored(FactorGradients {
                        g_u: delta.matmul_t(&s.matmul(h)),
                        g_s: p.matmul_t(h),
                        g_v: z.matmul_t(&stp),
                    }));
                }
            }
            upstream = back;
        }
        Ok(GradientBundle {
            loss: self.loss_of_outputs(outputs),
            layers: layers
                .into_iter()
                .map(|g| g.expect("every layer visited"))
                .collect(),
            dense_gradient: want_dense.then(|| dense.into_iter().flatten().collect()),
        })
    }
}

impl<T: Scalar> Problem<T> for TinyNet<T> {
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.frozen_base.shape()).collect()
    }

    fn loss(&self, params: &[LayerParam<'_, T>]) -> Result<T> {
        let (out, _) = self.forward(params)?;
        Ok(self.loss_of_outputs(&out))
    }

    fn gradients(
        &self,
        params: &[LayerParam<'_, T>],
        want_dense: bool,
    ) -> Result<GradientBundle<T>> {
        let (out, cache) = self.forward(params)?;
        self.backprop(params, &out, &cache, want_dense)
    }
}
