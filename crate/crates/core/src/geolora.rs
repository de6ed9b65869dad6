//! The parallel GeoLoRA integrator: one gradient evaluation per iteration,
//! K/L/S updates, basis augmentation, and local or global truncation.

use rayon::prelude::*;
use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::linalg::{orthonormal_extension, Matrix, SvdResult};
use crate::lowrank::{
    truncate_to_rank, truncation_drop, AugmentedState, LowRankAdapter, TruncationMode,
    TruncationPolicy,
};
use crate::optim::{optimizer_step, OptimizerOpts, Schedule};
use crate::problems::{params_of, FactorGradients, OwnedFactors, Problem};
use crate::scalar::Scalar;

/// Momentum buffers of one layer, in `(S, K, L)` coordinates.
#[derive(Debug, Clone, Default)]
pub struct KlsBuffers<T> {
    pub s: Option<Matrix<T>>,
    pub k: Option<Matrix<T>>,
    pub l: Option<Matrix<T>>,
}

impl<T> KlsBuffers<T> {
    pub fn clear(&mut self) {
        self.s = None;
        self.k = None;
        self.l = None;
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_none() && self.k.is_none() && self.l.is_none()
    }
}

/// `S_new`, `K_new = U S`-update and `L_new = V Sᵀ`-update of one layer.
#[derive(Debug, Clone)]
pub struct KlsUpdate<T> {
    pub s: Matrix<T>,
    pub k: Matrix<T>,
    pub l: Matrix<T>,
}

fn check_grads<T: Scalar>(adapter: &LowRankAdapter<T>, g: &FactorGradients<T>) -> Result<()> {
    let (n, m) = adapter.shape();
    let r = adapter.rank();
    if g.g_u.shape() != (n, r) || g.g_s.shape() != (r, r) || g.g_v.shape() != (m, r) {
        return Err(Error::invalid(format!(
            "gradient shapes {:?}, {:?}, {:?} do not match a rank-{r} {n}x{m} adapter",
            g.g_u.shape(),
            g.g_s.shape(),
            g.g_v.shape()
        )));
    }
    if !g.is_finite() {
        return Err(Error::numeric("kls_step", "non-finite factor gradients"));
    }
    Ok(())
}

/// `S₀ − λG_S`, `U₀S₀ − λG_U S₀⁻ᵀ` and `V₀S₀ᵀ − λG_V S₀⁻¹`, each through
/// [`optimizer_step`].
pub fn kls_step<T: Scalar>(
    adapter: &LowRankAdapter<T>,
    grads: &FactorGradients<T>,
    opts: &OptimizerOpts<T>,
    buffers: &mut KlsBuffers<T>,
) -> Result<KlsUpdate<T>> {
    check_grads(adapter, grads)?;
    let s = adapter.s();
    let s_inv = adapter.s_inverse();
    let s_new = optimizer_step(&adapter.s_matrix(), &grads.g_s, opts, &mut buffers.s)?;
    let k_new = optimizer_step(
        &adapter.u().scale_columns(s),
        &grads.g_u.scale_columns(s_inv),
        opts,
        &mut buffers.k,
    )?;
    let l_new = optimizer_step(
        &adapter.v().scale_columns(s),
        &grads.g_v.scale_columns(s_inv),
        opts,
        &mut buffers.l,
    )?;
    Ok(KlsUpdate {
        s: s_new,
        k: k_new,
        l: l_new,
    })
}

/// `Û = [U₀ | Ũ]` and `V̂ = [V₀ | Ṽ]` spanning the old bases and the updated
/// `K`, `L`. Each side gains `min(r, dim − r)` columns.
pub fn basis_augmentation<T: Scalar>(
    adapter: &LowRankAdapter<T>,
    k_new: &Matrix<T>,
    l_new: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let r = adapter.rank();
    let relabel = |e: Error| match e {
        Error::InvalidArgument(d) if !(k_new.is_finite() && l_new.is_finite()) => {
            Error::numeric("basis_augmentation", d)
        }
        other => other,
    };
    let u_hat = orthonormal_extension(adapter.u(), k_new, r).map_err(relabel)?;
    let v_hat = orthonormal_extension(adapter.v(), l_new, r).map_err(relabel)?;
    Ok((u_hat, v_hat))
}

/// `Ŝ = [[S_new, L_newᵀṼ], [ŨᵀK_new, 0]]`.
pub fn assemble_augmented_s<T: Scalar>(
    s_new: &Matrix<T>,
    k_new: &Matrix<T>,
    l_new: &Matrix<T>,
    u_tilde: &Matrix<T>,
    v_tilde: &Matrix<T>,
) -> Matrix<T> {
    let r = s_new.rows();
    let mut out = Matrix::zeros(r + u_tilde.cols(), r + v_tilde.cols());
    out.set_block(0, 0, s_new);
    if v_tilde.cols() > 0 {
        out.set_block(0, r, &l_new.t_matmul(v_tilde));
    }
    if u_tilde.cols() > 0 {
        out.set_block(r, 0, &u_tilde.t_matmul(k_new));
    }
    out
}

/// Steps 1 to 3 for one layer: the pre-truncation state.
pub fn augment_layer<T: Scalar>(
    adapter: &LowRankAdapter<T>,
    grads: &FactorGradients<T>,
    opts: &OptimizerOpts<T>,
    buffers: &mut KlsBuffers<T>,
) -> Result<AugmentedState<T>> {
    let upd = kls_step(adapter, grads, opts, buffers)?;
    if !(upd.s.is_finite() && upd.k.is_finite() && upd.l.is_finite()) {
        return Err(Error::numeric(
            "kls_step",
            "update produced non-finite factors",
        ));
    }
    let (u_hat, v_hat) = basis_augmentation(adapter, &upd.k, &upd.l)?;
    let r = adapter.rank();
    let u_tilde = u_hat.columns(r, u_hat.cols());
    let v_tilde = v_hat.columns(r, v_hat.cols());
    let aug_s = assemble_augmented_s(&upd.s, &upd.k, &upd.l, &u_tilde, &v_tilde);
    Ok(AugmentedState {
        aug_u: u_hat,
        aug_s,
        aug_v: v_hat,
        base_rank: r,
    })
}

/// Per-layer ranks chosen by a global policy from each layer's singular values.
///
/// Relative mode discards the globally smallest `s²` while the discarded mass
/// stays below `τ/(1−τ)` times the kept mass. Budget mode keeps `min_rank`
/// values per layer, then the globally largest ones until the relative
/// criterion holds or the budget is spent.
pub fn global_allocation<T: Scalar>(
    spectra: &[Vec<T>],
    policy: &TruncationPolicy<T>,
) -> Result<Vec<usize>> {
    policy.validate()?;
    if spectra.is_empty() || spectra.iter().any(Vec::is_empty) {
        return Err(Error::invalid("global truncation needs non-empty spectra"));
    }
    let floors: Vec<usize> = spectra
        .iter()
        .map(|s| policy.min_rank.min(s.len()))
        .collect();
    let total: T = spectra.iter().flatten().map(|&x| x * x).sum();
    let ratio = policy.tau / (T::one() - policy.tau);
    let satisfied =
        |discarded: T| discarded == T::zero() || discarded < ratio * (total - discarded);

    let mut cands: Vec<(T, usize, usize)> = spectra
        .iter()
        .enumerate()
        .flat_map(|(l, s)| (floors[l]..s.len()).map(move |i| (s[i] * s[i], l, i)))
        .collect();
    match policy.mode {
        TruncationMode::LocalRelative => {
            Err(Error::invalid("global allocation needs a global mode"))
        }
        TruncationMode::GlobalRelative => {
            cands.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(b.2.cmp(&a.2))
            });
            let mut ranks: Vec<usize> = spectra.iter().map(Vec::len).collect();
            let mut discarded = T::zero();
            for (v, l, _) in cands {
                let next = discarded + v;
                if !satisfied(next) {
                    break;
                }
                discarded = next;
                ranks[l] -= 1;
            }
            Ok(ranks)
        }
        TruncationMode::GlobalBudget { budget } => {
            let forced: usize = floors.iter().sum();
            if budget < forced {
                return Err(Error::invalid(format!(
                    "budget {budget} below {} layers x min_rank {}",
                    spectra.len(),
                    policy.min_rank
                )));
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            // discarded[j] = mass left out after keeping the first j candidates
            let mut discarded = vec![T::zero(); cands.len() + 1];
            for j in (0..cands.len()).rev() {
                discarded[j] = discarded[j + 1] + cands[j].0;
            }
            let mut ranks = floors;
            for (j, &(_, l, _)) in cands.iter().enumerate().take(budget - forced) {
                if satisfied(discarded[j]) {
                    break;
                }
                ranks[l] += 1;
            }
            Ok(ranks)
        }
    }
}

/// Truncates every layer to its globally allocated rank.
pub fn global_truncate<T: Scalar>(
    states: &[AugmentedState<T>],
    policy: &TruncationPolicy<T>,
) -> Result<Vec<LowRankAdapter<T>>> {
    let decs = decompose(states, false)?;
    let spectra: Vec<Vec<T>> = decs.iter().map(|d| d.singular_values.clone()).collect();
    let ranks = global_allocation(&spectra, policy)?;
    Ok(states
        .iter()
        .zip(&decs)
        .zip(ranks)
        .map(|((st, d), r)| truncate_to_rank(st, d, r))
        .collect())
}

fn decompose<T: Scalar>(states: &[AugmentedState<T>], parallel: bool) -> Result<Vec<SvdResult<T>>> {
    let run = |(l, st): (usize, &AugmentedState<T>)| st.svd().map_err(|e| e.at_layer(l));
    if parallel {
        states.par_iter().enumerate().map(run).collect()
    } else {
        states.iter().enumerate().map(run).collect()
    }
}

/// Result of truncating one layer.
#[derive(Debug, Clone)]
pub struct Truncated<T> {
    pub adapter: LowRankAdapter<T>,
    /// `‖ÛŜV̂ᵀ − U₁S₁V₁ᵀ‖_F`.
    pub drop: T,
    /// Threshold the discarded squared tail was compared against.
    pub threshold: T,
    /// Singular values of `Ŝ` before truncation.
    pub spectrum: Vec<T>,
}

/// Local or global truncation of all layers, depending on `policy.mode`.
pub fn truncate_states<T: Scalar>(
    states: &[AugmentedState<T>],
    policy: &TruncationPolicy<T>,
    parallel: bool,
) -> Result<Vec<Truncated<T>>> {
    let decs = decompose(states, parallel)?;
    let spectra: Vec<Vec<T>> = decs.iter().map(|d| d.singular_values.clone()).collect();
    let (ranks, thresholds): (Vec<usize>, Vec<T>) = if policy.is_local() {
        spectra
            .iter()
            .map(|s| (policy.select_rank(s), policy.threshold(s)))
            .unzip()
    } else {
        let ranks = global_allocation(&spectra, policy)?;
        let total: T = spectra.iter().flatten().map(|&x| x * x).sum();
        (ranks, vec![policy.tau * total; states.len()])
    };
    let mut out = Vec::with_capacity(states.len());
    for (l, ((st, d), r)) in states.iter().zip(&decs).zip(ranks).enumerate() {
        let adapter = truncate_to_rank(st, d, r);
        if !(adapter.u().is_finite() && adapter.v().is_finite()) {
            return Err(Error::numeric("truncation", "non-finite truncated bases").at_layer(l));
        }
        out.push(Truncated {
            drop: truncation_drop(st, &adapter),
            adapter,
            threshold: thresholds[l],
            spectrum: spectra[l].clone(),
        });
    }
    Ok(out)
}

/// Adapters of all trainable layers sharing one truncation policy.
#[derive(Debug, Clone)]
pub struct LayerStack<T> {
    pub layers: Vec<LowRankAdapter<T>>,
    pub policy: TruncationPolicy<T>,
}

impl<T: Scalar> LayerStack<T> {
    pub fn new(layers: Vec<LowRankAdapter<T>>, policy: TruncationPolicy<T>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layer stack must not be empty"));
        }
        policy.validate()?;
        Ok(Self { layers, policy })
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(LowRankAdapter::rank).collect()
    }
}

/// What one iteration did.
#[derive(Debug, Clone)]
pub struct IterationReport<T> {
    /// Loss at the iterate the gradient was taken at.
    pub loss: T,
    pub ranks: Vec<usize>,
    pub truncation_drops: Vec<T>,
    pub thresholds: Vec<T>,
    /// Singular values kept per layer.
    pub singular_values: Vec<Vec<T>>,
    /// Pre-truncation states, kept only when requested.
    pub augmented: Option<Vec<AugmentedState<T>>>,
}

fn advance<T: Scalar>(
    layers: &[LowRankAdapter<T>],
    policy: &TruncationPolicy<T>,
    problem: &dyn Problem<T>,
    opts: &OptimizerOpts<T>,
    buffers: &mut [KlsBuffers<T>],
    parallel: bool,
    keep_augmented: bool,
) -> Result<(Vec<LowRankAdapter<T>>, IterationReport<T>)> {
    let factors: Vec<OwnedFactors<T>> = layers.iter().map(OwnedFactors::from_adapter).collect();
    let bundle = problem.gradients(&params_of(&factors), false)?;
    if !bundle.loss.is_finite() {
        return Err(Error::numeric("backprop", "loss is not finite"));
    }
    if bundle.layers.len() != layers.len() {
        return Err(Error::invalid(
            "problem returned gradients for a different layer count",
        ));
    }
    let step = |(l, buf): (usize, &mut KlsBuffers<T>)| -> Result<AugmentedState<T>> {
        let g = bundle.layers[l]
            .factors()
            .ok_or_else(|| Error::invalid("expected factor gradients"))?;
        augment_layer(&layers[l], g, opts, buf).map_err(|e| e.at_layer(l))
    };
    let states: Vec<AugmentedState<T>> = if parallel {
        buffers
            .par_iter_mut()
            .enumerate()
            .map(step)
            .collect::<Result<_>>()?
    } else {
        buffers
            .iter_mut()
            .enumerate()
            .map(step)
            .collect::<Result<_>>()?
    };
    let truncated = truncate_states(&states, policy, parallel)?;

    let mut next = Vec::with_capacity(layers.len());
    let mut report = IterationReport {
        loss: bundle.loss,
        ranks: Vec::with_capacity(layers.len()),
        truncation_drops: Vec::with_capacity(layers.len()),
        thresholds: Vec::with_capacity(layers.len()),
        singular_values: Vec::with_capacity(layers.len()),
        augmented: None,
    };
    for ((old, t), buf) in layers.iter().zip(truncated).zip(buffers.iter_mut()) {
        if !same_frame(old, &t.adapter) {
            buf.clear();
        }
        report.ranks.push(t.adapter.rank());
        report.truncation_drops.push(t.drop);
        report.thresholds.push(t.threshold);
        report.singular_values.push(t.adapter.s().to_vec());
        next.push(t.adapter.carry_frozen_base(old));
    }
    if keep_augmented {
        report.augmented = Some(states);
    }
    Ok((next, report))
}

/// Momentum survives only if truncation left rank and both bases unchanged.
fn same_frame<T: Scalar>(a: &LowRankAdapter<T>, b: &LowRankAdapter<T>) -> bool {
    let tol = T::lit(1e-12);
    a.rank() == b.rank() && (a.u() - b.u()).max_abs() <= tol && (a.v() - b.v()).max_abs() <= tol
}

/// One iteration of a single-layer adapter without momentum state.
pub fn geolora_iteration<T: Scalar>(
    adapter: &LowRankAdapter<T>,
    problem: &dyn Problem<T>,
    opts: &OptimizerOpts<T>,
    policy: &TruncationPolicy<T>,
) -> Result<(LowRankAdapter<T>, IterationReport<T>)> {
    let (mut layers, report) = advance(
        std::slice::from_ref(adapter),
        policy,
        problem,
        opts,
        &mut [KlsBuffers::default()],
        false,
        false,
    )?;
    Ok((layers.pop().expect("one layer"), report))
}

/// One iteration over all layers from a single shared gradient evaluation.
pub fn stack_iteration<T: Scalar>(
    stack: &LayerStack<T>,
    problem: &dyn Problem<T>,
    opts: &OptimizerOpts<T>,
) -> Result<(LayerStack<T>, IterationReport<T>)> {
    let mut buffers = vec![KlsBuffers::default(); stack.layers.len()];
    let (layers, report) = advance(
        &stack.layers,
        &stack.policy,
        problem,
        opts,
        &mut buffers,
        false,
        false,
    )?;
    Ok((
        LayerStack {
            layers,
            policy: stack.policy,
        },
        report,
    ))
}

/// Stateful optimizer carrying momentum buffers and the iteration count.
#[derive(Debug, Clone)]
pub struct GeoLora<T> {
    stack: LayerStack<T>,
    opts: OptimizerOpts<T>,
    schedule: Schedule,
    buffers: Vec<KlsBuffers<T>>,
    iteration: usize,
    parallel: bool,
    keep_augmented: bool,
}

impl<T: Scalar> GeoLora<T> {
    pub fn new(stack: LayerStack<T>, opts: OptimizerOpts<T>) -> Result<Self> {
        opts.validate()?;
        let buffers = vec![KlsBuffers::default(); stack.layers.len()];
        Ok(Self {
            stack,
            opts,
            schedule: Schedule::Constant,
            buffers,
            iteration: 0,
            parallel: false,
            keep_augmented: false,
        })
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// Runs the per-layer updates and SVDs on the rayon pool. Results are
    /// identical to the sequential path.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    /// Keep the pre-truncation states in every report.
    pub fn keep_augmented(mut self, keep: bool) -> Self {
        self.keep_augmented = keep;
        self
    }

    pub fn stack(&self) -> &LayerStack<T> {
        &self.stack
    }

    pub fn layers(&self) -> &[LowRankAdapter<T>] {
        &self.stack.layers
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn buffers(&self) -> &[KlsBuffers<T>] {
        &self.buffers
    }

    pub fn step(&mut self, problem: &dyn Problem<T>) -> Result<IterationReport<T>> {
        let opts = self
            .opts
            .with_learning_rate(self.schedule.rate(self.opts.learning_rate, self.iteration));
        let (layers, report) = advance(
            &self.stack.layers,
            &self.stack.policy,
            problem,
            &opts,
            &mut self.buffers,
            self.parallel,
            self.keep_augmented,
        )
        .map_err(|e| e.at_iteration(self.iteration))?;
        self.stack.layers = layers;
        self.iteration += 1;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{
        assemble_dense, gaussian_matrix, random_orthonormal, tangent_project, ThresholdNorm,
    };
    use crate::problems::{build_stiffness_case, MatrixRegression};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn adapter(n: usize, m: usize, s: &[f64], rng: &mut ChaCha8Rng) -> LowRankAdapter<f64> {
        LowRankAdapter::new(
            random_orthonormal(n, s.len(), rng).unwrap(),
            s.to_vec(),
            random_orthonormal(m, s.len(), rng).unwrap(),
        )
        .unwrap()
    }

    fn zero_grads(n: usize, m: usize, r: usize) -> FactorGradients<f64> {
        FactorGradients {
            g_u: Matrix::zeros(n, r),
            g_s: Matrix::zeros(r, r),
            g_v: Matrix::zeros(m, r),
        }
    }

    #[test]
    fn kls_with_zero_gradient_returns_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = adapter(6, 5, &[2.0, 0.5], &mut rng);
        let upd = kls_step(
            &a,
            &zero_grads(6, 5, 2),
            &OptimizerOpts::sgd(0.3),
            &mut KlsBuffers::default(),
        )
        .unwrap();
        assert_eq!(upd.s, a.s_matrix());
        assert_eq!(upd.k, a.u().scale_columns(a.s()));
        assert_eq!(upd.l, a.v().scale_columns(a.s()));
    }

    #[test]
    fn scalar_kls_step_by_hand() {
        let (s, w, lam) = (1.5f64, 4.0, 0.2);
        let one = Matrix::from_diag(&[1.0]);
        let a = LowRankAdapter::new(one.clone(), vec![s], one).unwrap();
        let p = MatrixRegression::new(Matrix::from_diag(&[w])).unwrap();
        let f = vec![OwnedFactors::from_adapter(&a)];
        let g = p.gradients(&params_of(&f), false).unwrap();
        let upd = kls_step(
            &a,
            g.layers[0].factors().unwrap(),
            &OptimizerOpts::sgd(lam),
            &mut KlsBuffers::default(),
        )
        .unwrap();
        let expected = s - lam * (s - w);
        for x in [upd.s[(0, 0)], upd.k[(0, 0)], upd.l[(0, 0)]] {
            assert!((x - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_numeric_failure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = adapter(4, 4, &[1.0], &mut rng);
        let mut g = zero_grads(4, 4, 1);
        g.g_s[(0, 0)] = f64::NAN;
        let err =
            kls_step(&a, &g, &OptimizerOpts::sgd(0.1), &mut KlsBuffers::default()).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn augmentation_without_new_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = adapter(8, 7, &[3.0, 1.0], &mut rng);
        let s_new = Matrix::from_rows(&[vec![2.0, 0.1], vec![0.3, 1.0]]).unwrap();
        let k = a.u().matmul(&s_new);
        let l = a.v().matmul_t(&s_new);
        let (uh, vh) = basis_augmentation(&a, &k, &l).unwrap();
        assert!(uh.orthonormality_error() < 1e-12 && vh.orthonormality_error() < 1e-12);
        let ut = uh.columns(2, 4);
        let vt = vh.columns(2, 4);
        assert!(ut.t_matmul(&k).max_abs() < 1e-10);
        let s_hat = assemble_augmented_s(&s_new, &k, &l, &ut, &vt);
        assert_eq!(s_hat.block(0, 2, 0, 2), s_new);
        assert!(s_hat.block(0, 2, 2, 4).max_abs() < 1e-10);
        assert!(s_hat.block(2, 4, 0, 2).max_abs() < 1e-10);
        assert_eq!(s_hat.block(2, 4, 2, 4), Matrix::zeros(2, 2));
    }

    #[test]
    fn augmentation_with_one_new_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = adapter(9, 9, &[1.0, 1.0], &mut rng);
        let mut w: Matrix<f64> = gaussian_matrix(9, 1, 1.0, &mut rng);
        let c = a.u().t_matmul(&w);
        w.axpy(-1.0, &a.u().matmul(&c));
        let k = a.u().hcat(&Matrix::zeros(9, 1)).columns(0, 2);
        let mut k = k;
        k.set_column(1, &w.column(0));
        let (uh, _) = basis_augmentation(&a, &k, a.v()).unwrap();
        assert_eq!(uh.cols(), 4);
        // the new direction lies in the first extra column
        let e = uh.columns(2, 3);
        let wn = w.scale(1.0 / w.frobenius_norm());
        let overlap = e.t_matmul(&wn)[(0, 0)].abs();
        assert!((overlap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_augmentation_is_square_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = adapter(6, 6, &[1.0, 0.5, 0.2], &mut rng);
        let k: Matrix<f64> = gaussian_matrix(6, 3, 1.0, &mut rng);
        let (uh, vh) = basis_augmentation(&a, &k, &k).unwrap();
        assert_eq!(uh.shape(), (6, 6));
        assert!(uh.matmul_t(&uh).orthonormality_error() < 1e-12);
        assert_eq!(vh.shape(), (6, 6));
    }

    #[test]
    fn augmentation_is_capped_by_ambient_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = adapter(5, 3, &[1.0, 0.5], &mut rng);
        let k: Matrix<f64> = gaussian_matrix(5, 2, 1.0, &mut rng);
        let l: Matrix<f64> = gaussian_matrix(3, 2, 1.0, &mut rng);
        let (uh, vh) = basis_augmentation(&a, &k, &l).unwrap();
        assert_eq!(uh.cols(), 4);
        assert_eq!(vh.cols(), 3);
    }

    fn identity_state(
        n: usize,
        m: usize,
        rng: &mut ChaCha8Rng,
        r: usize,
    ) -> (LowRankAdapter<f64>, MatrixRegression<f64>) {
        let a = adapter(n, m, &vec![1.0; r], rng);
        let sig: Vec<f64> = (0..r + 2).map(|i| 3.0 - 0.4 * i as f64).collect();
        let p = MatrixRegression::random(n, m, &sig, rng).unwrap();
        (a, p)
    }

    #[test]
    fn augmented_state_reproduces_tangent_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            let r = 1 + trial % 3;
            let (mut a, p) = identity_state(10, 8, &mut rng, r);
            let s: Vec<f64> = (0..r).map(|_| rng.random_range(0.3..2.0)).collect();
            a = LowRankAdapter::new(a.u().clone(), s, a.v().clone()).unwrap();
            let lam = 0.1;
            let f = vec![OwnedFactors::from_adapter(&a)];
            let b = p.gradients(&params_of(&f), true).unwrap();
            let state = augment_layer(
                &a,
                b.layers[0].factors().unwrap(),
                &OptimizerOpts::sgd(lam),
                &mut KlsBuffers::default(),
            )
            .unwrap();
            let g = &b.dense_gradient.unwrap()[0];
            let mut expected = assemble_dense(&a);
            expected.axpy(-lam, &tangent_project(&a, g).unwrap());
            let rel = (&state.dense() - &expected).frobenius_norm() / expected.frobenius_norm();
            assert!(rel < 1e-12, "trial {trial}: {rel}");
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = adapter(7, 6, &[2.0, 1.0], &mut rng);
        let p = MatrixRegression::new(assemble_dense(&a)).unwrap();
        let (next, rep) = geolora_iteration(
            &a,
            &p,
            &OptimizerOpts::sgd(0.1),
            &TruncationPolicy::local(1e-6),
        )
        .unwrap();
        assert_eq!(next.rank(), 2);
        assert!((&assemble_dense(&next) - &assemble_dense(&a)).frobenius_norm() < 1e-12);
        assert!(rep.loss < 1e-28);
    }

    #[test]
    fn stiffness_first_iteration_matches_dense_oracle() {
        let case = build_stiffness_case::<f64>();
        let a = &case.adapter;
        let lam = case.geolora_rate;
        let w = assemble_dense(a);
        let g = &w - case.problem.target();
        // oracle: form S_new, K, L from the dense gradient, then project onto
        // the augmented bases the integrator chose
        let s = a.s();
        let s_new = {
            let mut m = a.s_matrix();
            m.axpy(-lam, &a.u().t_matmul(&g).matmul(a.v()));
            m
        };
        let k = {
            let mut k = a.u().scale_columns(s);
            k.axpy(-lam, &g.matmul(a.v()));
            k
        };
        let l = {
            let mut l = a.v().scale_columns(s);
            l.axpy(-lam, &g.t_matmul(a.u()));
            l
        };
        let f = vec![OwnedFactors::from_adapter(a)];
        let b = case.problem.gradients(&params_of(&f), false).unwrap();
        let st = augment_layer(
            a,
            b.layers[0].factors().unwrap(),
            &OptimizerOpts::sgd(lam),
            &mut KlsBuffers::default(),
        )
        .unwrap();
        let (uh, vh) = (st.aug_u(), st.aug_v());
        let mut oracle = Matrix::zeros(uh.cols(), vh.cols());
        oracle.set_block(0, 0, &s_new);
        oracle.set_block(0, 4, &l.t_matmul(&vh.columns(4, vh.cols())));
        oracle.set_block(4, 0, &uh.columns(4, uh.cols()).t_matmul(&k));
        assert!((st.aug_s() - &oracle).max_abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_without_truncation_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MatrixRegression::random(12, 10, &[2.0, 1.5, 1.0], &mut rng).unwrap();
        let mut a = adapter(12, 10, &[0.5, 0.5, 0.5], &mut rng);
        let policy = TruncationPolicy::local(0.0);
        let mut prev = f64::INFINITY;
        for _ in 0..30 {
            let (next, rep) = geolora_iteration(&a, &p, &OptimizerOpts::sgd(0.5), &policy).unwrap();
            assert!(rep.loss < prev);
            prev = rep.loss;
            a = next;
        }
    }

    fn brute_force(spectra: &[Vec<f64>], tau: f64, min_rank: usize, budget: usize) -> Vec<usize> {
        let total: f64 = spectra.iter().flatten().map(|x| x * x).sum();
        let ratio = tau / (1.0 - tau);
        let mut best: Option<(bool, usize, f64, Vec<usize>)> = None;
        let mut ranks = vec![0usize; spectra.len()];
        fn rec(
            l: usize,
            spectra: &[Vec<f64>],
            ranks: &mut Vec<usize>,
            min_rank: usize,
            visit: &mut dyn FnMut(&[usize]),
        ) {
            if l == spectra.len() {
                visit(ranks);
                return;
            }
            for r in min_rank.min(spectra[l].len())..=spectra[l].len() {
                ranks[l] = r;
                rec(l + 1, spectra, ranks, min_rank, visit);
            }
        }
        rec(0, spectra, &mut ranks, min_rank, &mut |rk: &[usize]| {
            let count: usize = rk.iter().sum();
            if count > budget {
                return;
            }
            let kept: f64 = rk
                .iter()
                .zip(spectra)
                .map(|(&r, s)| s[..r].iter().map(|x| x * x).sum::<f64>())
                .sum();
            let d = total - kept;
            let ok = d <= 0.0 || d < ratio * kept;
            let better = match &best {
                None => true,
                Some((bok, bc, bk, _)) => {
                    if ok != *bok {
                        ok
                    } else if ok {
                        count < *bc || (count == *bc && kept > *bk)
                    } else {
                        kept > *bk
                    }
                }
            };
            if better {
                best = Some((ok, count, kept, rk.to_vec()));
            }
        });
        best.unwrap().3
    }

    #[test]
    fn budget_allocation_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..40 {
            let spectra: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    let k = rng.random_range(2..6);
                    let mut s: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..3.0)).collect();
                    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    s
                })
                .collect();
            let tau = [0.0, 1e-3, 0.05][trial % 3];
            let budget = rng.random_range(3..10);
            let policy =
                TruncationPolicy::local(tau).with_mode(TruncationMode::GlobalBudget { budget });
            let got = global_allocation(&spectra, &policy).unwrap();
            assert_eq!(
                got,
                brute_force(&spectra, tau, 1, budget),
                "trial {trial}: {spectra:?}"
            );
            assert!(got.iter().sum::<usize>() <= budget);
        }
    }

    #[test]
    fn dominant_values_split_budget() {
        let spectra = vec![vec![10.0, 1e-6], vec![10.0, 1e-6]];
        let policy =
            TruncationPolicy::local(1e-9).with_mode(TruncationMode::GlobalBudget { budget: 2 });
        assert_eq!(global_allocation(&spectra, &policy).unwrap(), vec![1, 1]);
    }

    #[test]
    fn budget_below_floor_is_rejected() {
        let spectra = vec![vec![1.0, 0.5]; 3];
        let policy = TruncationPolicy::local(0.1)
            .with_min_rank(2)
            .with_mode(TruncationMode::GlobalBudget { budget: 5 });
        assert!(matches!(
            global_allocation(&spectra, &policy),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_layer_global_relative_equals_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let k = rng.random_range(2..8);
            let mut s: Vec<f64> = (0..k)
                .map(|_| rng.random_range(0.0..2.0f64).powi(3))
                .collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let tau = rng.random_range(0.0..0.3);
            let local = TruncationPolicy::local(tau);
            let global = local.with_mode(TruncationMode::GlobalRelative);
            assert_eq!(
                global_allocation(&[s.clone()], &global).unwrap(),
                vec![local.select_rank(&s)],
                "{s:?} {tau}"
            );
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = crate::problems::TinyNet::<f64>::teacher(
            &[6, 5, 5, 4],
            crate::problems::Activation::Tanh,
            10,
            2,
            1.0,
            &mut rng,
        )
        .unwrap();
        let layers: Vec<LowRankAdapter<f64>> = net
            .layer_shapes()
            .into_iter()
            .map(|(n, m)| adapter(n, m, &[0.2], &mut rng))
            .collect();
        let policy =
            TruncationPolicy::local(1e-3).with_mode(TruncationMode::GlobalBudget { budget: 5 });
        let stack = LayerStack::new(layers, policy).unwrap();
        let mut a = GeoLora::new(stack.clone(), OptimizerOpts::sgd(0.2)).unwrap();
        let mut b = GeoLora::new(stack, OptimizerOpts::sgd(0.2))
            .unwrap()
            .with_parallel(true);
        for _ in 0..10 {
            let ra = a.step(&net).unwrap();
            let rb = b.step(&net).unwrap();
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert!(ra.ranks.iter().sum::<usize>() <= 5);
        }
        for (x, y) in a.layers().iter().zip(b.layers()) {
            assert_eq!(x.u(), y.u());
            assert_eq!(x.s(), y.s());
        }
    }

    #[test]
    fn one_layer_stack_equals_single_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (a, p) = identity_state(9, 9, &mut rng, 2);
        let policy = TruncationPolicy::local(1e-4);
        let (x, _) = geolora_iteration(&a, &p, &OptimizerOpts::sgd(0.1), &policy).unwrap();
        let (st, _) = stack_iteration(
            &LayerStack::new(vec![a], policy).unwrap(),
            &p,
            &OptimizerOpts::sgd(0.1),
        )
        .unwrap();
        assert_eq!(x.u(), st.layers[0].u());
        assert_eq!(x.s(), st.layers[0].s());
    }

    #[test]
    fn momentum_discarded_when_frame_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (a, p) = identity_state(8, 8, &mut rng, 1);
        let opts = OptimizerOpts {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let stack = LayerStack::new(vec![a], TruncationPolicy::local(1e-6)).unwrap();
        let mut g = GeoLora::new(stack, opts).unwrap();
        g.step(&p).unwrap();
        assert!(g.buffers()[0].is_empty());
    }

    #[test]
    fn momentum_kept_at_fixed_frame() {
        // 1x1 problem: the frame never changes, so buffers persist
        let one = Matrix::from_diag(&[1.0]);
        let a = LowRankAdapter::new(one.clone(), vec![1.0], one).unwrap();
        let p = MatrixRegression::new(Matrix::from_diag(&[2.0])).unwrap();
        let opts = OptimizerOpts {
            learning_rate: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        let mut g = GeoLora::new(
            LayerStack::new(vec![a], TruncationPolicy::local(0.0)).unwrap(),
            opts,
        )
        .unwrap();
        g.step(&p).unwrap();
        assert!(!g.buffers()[0].is_empty());
        g.step(&p).unwrap();
        // s1 = 1 + 0.1, s2 = s1 + 0.1 * (0.5 * 1 + (2 - s1))
        let s1 = 1.1f64;
        let s2 = s1 + 0.1 * (0.5 + (2.0 - s1));
        assert!((g.layers()[0].s()[0] - s2).abs() < 1e-14);
    }

    #[test]
    fn nuclear_policy_on_stiffness_first_step() {
        let case = build_stiffness_case::<f64>();
        let (a, rep) = geolora_iteration(
            &case.adapter,
            &case.problem,
            &OptimizerOpts::sgd(case.geolora_rate),
            &case.policy,
        )
        .unwrap();
        assert_eq!(case.policy.norm, ThresholdNorm::Nuclear);
        assert!(rep.truncation_drops[0] * rep.truncation_drops[0] <= rep.thresholds[0]);
        assert!(a.orthonormality_error() < 1e-12);
    }
}
