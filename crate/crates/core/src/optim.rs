//! First-order update rules shared by GeoLoRA and the baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Step size, heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerOpts<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Scalar> OptimizerOpts<T> {
    pub fn sgd(learning_rate: T) -> Self {
        Self {
            learning_rate,
            momentum: T::zero(),
            weight_decay: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= T::zero() || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if !(self.momentum >= T::zero() && self.momentum < T::one()) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < T::zero() || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn with_learning_rate(self, learning_rate: T) -> Self {
        Self {
            learning_rate,
            ..self
        }
    }
}

/// One update of `param` along `grad`.
///
/// Weight decay is folded into the gradient first. With momentum the buffer
/// accumulates `buffer = momentum * buffer + grad` and the step uses the buffer.
/// A `None` buffer starts from zero.
pub fn optimizer_step<T: Scalar>(
    param: &Matrix<T>,
    grad: &Matrix<T>,
    opts: &OptimizerOpts<T>,
    buffer: &mut Option<Matrix<T>>,
) -> Result<Matrix<T>> {
    if param.shape() != grad.shape() {
        return Err(Error::invalid(format!(
            "parameter shape {:?} does not match gradient shape {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let mut g = grad.clone();
    if opts.weight_decay != T::zero() {
        g.axpy(opts.weight_decay, param);
    }
    let direction = if opts.momentum != T::zero() {
        let next = match buffer.take() {
            Some(b) if b.shape() == g.shape() => {
                let mut b = b.scale(opts.momentum);
                b.axpy(T::one(), &g);
                b
            }
            _ => g,
        };
        *buffer = Some(next.clone());
        next
    } else {
        g
    };
    let mut out = param.clone();
    out.axpy(-opts.learning_rate, &direction);
    Ok(out)
}

/// Adam moment estimates for one parameter matrix.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Matrix<T>,
    v: Matrix<T>,
    t: i32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamOpts<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamOpts<T> {
    fn default() -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

/// Bias-corrected Adam update. A missing or mis-shaped state restarts at step 1.
pub fn adam_step<T: Scalar>(
    param: &Matrix<T>,
    grad: &Matrix<T>,
    lr: T,
    opts: &AdamOpts<T>,
    state: &mut Option<AdamState<T>>,
) -> Result<Matrix<T>> {
    if param.shape() != grad.shape() {
        return Err(Error::invalid("adam: parameter and gradient shapes differ"));
    }
    let (rows, cols) = grad.shape();
    let st = match state {
        Some(s) if s.m.shape() == grad.shape() => s,
        _ => state.insert(AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
        }),
    };
    st.t += 1;
    let one = T::one();
    st.m =
        st.m.zip_map(grad, |m, g| opts.beta1 * m + (one - opts.beta1) * g);
    st.v =
        st.v.zip_map(grad, |v, g| opts.beta2 * v + (one - opts.beta2) * g * g);
    let c1 = one - opts.beta1.powi(st.t);
    let c2 = one - opts.beta2.powi(st.t);
    let step =
        st.m.zip_map(&st.v, |m, v| (m / c1) / ((v / c2).sqrt() + opts.eps));
    let mut out = param.clone();
    out.axpy(-lr, &step);
    Ok(out)
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// `λ_t = λ / (1 + t / t0)`; satisfies the Robbins-Monro conditions.
    InverseTime { t0: f64 },
}

impl Schedule {
    pub fn rate<T: Scalar>(&self, base: T, iteration: usize) -> T {
        match *self {
            Schedule::Constant => base,
            Schedule::InverseTime { t0 } => base / (T::one() + T::lit(iteration as f64 / t0)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Matrix<f64> {
        Matrix::from_vec(1, 1, vec![x]).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_parameter() {
        let p = Matrix::from_fn(2, 3, |i, j| (i + 2 * j) as f64);
        let out = optimizer_step(
            &p,
            &Matrix::zeros(2, 3),
            &OptimizerOpts::sgd(0.5),
            &mut None,
        )
        .unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn scalar_gradient_step() {
        let (s, w, lr) = (3.0, 1.0, 0.25);
        let out = optimizer_step(
            &scalar(s),
            &scalar(s - w),
            &OptimizerOpts::sgd(lr),
            &mut None,
        )
        .unwrap();
        assert_eq!(out[(0, 0)], s - lr * (s - w));
    }

    #[test]
    fn momentum_unrolls_by_hand() {
        let opts = OptimizerOpts {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut buf = None;
        let p1 = optimizer_step(&scalar(0.0), &scalar(1.0), &opts, &mut buf).unwrap();
        let p2 = optimizer_step(&p1, &scalar(1.0), &opts, &mut buf).unwrap();
        assert!((p1[(0, 0)] + 0.1).abs() < 1e-15);
        assert!(((p2[(0, 0)] - p1[(0, 0)]) + 1.9 * 0.1).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        let opts = OptimizerOpts {
            learning_rate: 1.0,
            momentum: 0.0,
            weight_decay: 0.5,
        };
        let out = optimizer_step(&scalar(2.0), &scalar(0.0), &opts, &mut None).unwrap();
        assert_eq!(out[(0, 0)], 1.0);
    }

    #[test]
    fn shape_mismatch_is_invalid() {
        let err = optimizer_step(
            &Matrix::<f64>::zeros(2, 2),
            &Matrix::zeros(2, 3),
            &OptimizerOpts::sgd(0.1),
            &mut None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut st = None;
        let out = adam_step(
            &scalar(1.0),
            &scalar(-4.0),
            0.1,
            &AdamOpts::default(),
            &mut st,
        )
        .unwrap();
        assert!((out[(0, 0)] - 1.1).abs() < 1e-8);
    }

    #[test]
    fn inverse_time_schedule() {
        let s = Schedule::InverseTime { t0: 10.0 };
        assert_eq!(s.rate(1.0f64, 0), 1.0);
        assert_eq!(s.rate(1.0f64, 10), 0.5);
        assert_eq!(Schedule::Constant.rate(0.3f64, 99), 0.3);
    }

    #[test]
    fn validate_rejects_bad_values() {
        assert!(OptimizerOpts::sgd(0.0f64).validate().is_err());
        assert!(OptimizerOpts {
            learning_rate: 0.1f64,
            momentum: 1.0,
            weight_decay: 0.0
        }
        .validate()
        .is_err());
    }
}
