use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{ExperimentConfig, Method};
use super::run::{run_comparison, run_on, RunSummary};
use crate::error::{Error, Result};
use crate::geolora::{global_allocation, GeoLora, LayerStack};
use crate::linalg::{svd, Matrix};
use crate::lowrank::{
    random_orthonormal, tangent_project, LowRankAdapter, TruncationMode, TruncationPolicy,
};
use crate::optim::OptimizerOpts;
use crate::problems::{
    build_stiffness_case, gradient_trick_residual, Activation, CountingProblem, LayerParam,
    MatrixRegression, OwnedFactors, Problem, TinyNet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Invariants,
    Theorem1,
    Identity,
    Gradtrick,
    Theorem3,
    Recovery,
    Global,
    Stiffness,
    Toy,
}

impl Suite {
    pub const ALL: [Suite; 9] = [
        Suite::Invariants,
        Suite::Theorem1,
        Suite::Identity,
        Suite::Gradtrick,
        Suite::Theorem3,
        Suite::Recovery,
        Suite::Global,
        Suite::Stiffness,
        Suite::Toy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Invariants => "invariants",
            Suite::Theorem1 => "theorem1",
            Suite::Identity => "identity",
            Suite::Gradtrick => "gradtrick",
            Suite::Theorem3 => "theorem3",
            Suite::Recovery => "recovery",
            Suite::Global => "global",
            Suite::Stiffness => "stiffness",
            Suite::Toy => "toy",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
                Error::invalid(format!(
                    "unknown suite `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One asserted quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub measured: f64,
    /// Human-readable condition the measurement must meet, e.g. `< 1e-10`.
    pub bound: String,
    pub passed: bool,
}

impl CheckItem {
    fn new(name: impl Into<String>, measured: f64, bound: String, passed: bool) -> Self {
        Self {
            name: name.into(),
            measured,
            bound,
            passed,
        }
    }

    pub fn below(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, format!("< {bound:e}"), measured < bound)
    }

    pub fn at_most(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, format!("<= {bound}"), measured <= bound)
    }

    pub fn above(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, format!("> {bound}"), measured > bound)
    }

    pub fn at_least(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, format!(">= {bound}"), measured >= bound)
    }

    pub fn within(name: impl Into<String>, measured: f64, lo: f64, hi: f64) -> Self {
        Self::new(
            name,
            measured,
            format!("in [{lo}, {hi}]"),
            (lo..=hi).contains(&measured),
        )
    }

    pub fn equals(name: impl Into<String>, measured: f64, expected: f64) -> Self {
        Self::new(
            name,
            measured,
            format!("== {expected}"),
            measured == expected,
        )
    }
}

impl fmt::Display for CheckItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{tag} {}: measured {:e}, required {}",
            self.name, self.measured, self.bound
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub suite: Suite,
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}]", self.suite)?;
        for item in &self.items {
            writeln!(f, "  {item}")?;
        }
        Ok(())
    }
}

pub fn run_checks(suite: Suite, seed: u64) -> Result<CheckReport> {
    let items = match suite {
        Suite::Invariants => invariants(seed)?,
        Suite::Theorem1 => theorem1(seed)?,
        Suite::Identity => identity(seed)?,
        Suite::Gradtrick => gradtrick(seed)?,
        Suite::Theorem3 => theorem3(seed)?,
        Suite::Recovery => recovery(seed)?,
        Suite::Global => global(seed)?,
        Suite::Stiffness => stiffness()?,
        Suite::Toy => toy(200)?,
    };
    Ok(CheckReport { suite, items })
}

fn rng_for(seed: u64, run: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(run))
}

/// Random orthonormal factors with `S` drawn uniformly from `[lo, hi)`.
pub fn random_adapter<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rank: usize,
    (lo, hi): (f64, f64),
    rng: &mut R,
) -> Result<LowRankAdapter<f64>> {
    let u = random_orthonormal(rows, rank, rng)?;
    let v = random_orthonormal(cols, rank, rng)?;
    let mut s: Vec<f64> = (0..rank).map(|_| rng.random_range(lo..hi)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    LowRankAdapter::new(u, s, v)
}

fn dense_of(a: &LowRankAdapter<f64>) -> Matrix<f64> {
    a.u().scale_columns(a.s()).matmul_t(a.v())
}

fn loss_of(problem: &dyn Problem<f64>, layers: &[LowRankAdapter<f64>]) -> Result<f64> {
    let f: Vec<OwnedFactors<f64>> = layers.iter().map(OwnedFactors::from_adapter).collect();
    problem.loss(&crate::problems::params_of(&f))
}

/// `∇_W L` for a single-layer problem at a low-rank point.
fn dense_gradient(problem: &dyn Problem<f64>, a: &LowRankAdapter<f64>) -> Result<Matrix<f64>> {
    let f = OwnedFactors::from_adapter(a);
    let b = problem.gradients(&[f.param()], true)?;
    b.dense_gradient
        .and_then(|mut g| g.pop())
        .ok_or_else(|| Error::invalid("problem gave no dense gradient"))
}

fn random_regression(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    rank: usize,
) -> Result<MatrixRegression<f64>> {
    let mut sigma: Vec<f64> = (0..rank).map(|_| rng.random_range(0.5..3.0)).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    MatrixRegression::random(rows, cols, &sigma, rng)
}

/// Orthonormality over 50 seeded runs plus evaluation accounting.
fn invariants(seed: u64) -> Result<Vec<CheckItem>> {
    let mut worst = 0.0f64;
    let mut per_iter_geo = 0.0f64;
    for run in 0..50 {
        let mut rng = rng_for(seed, run);
        let rows = rng.random_range(10..40);
        let cols = rng.random_range(8..30);
        let rank = rng.random_range(1..6);
        let problem = random_regression(&mut rng, rows, cols, rank)?;
        let r0 = rng.random_range(1..5);
        let start = random_adapter(rows, cols, r0, (0.1, 1.0), &mut rng)?;
        let tau = [0.0, 1e-6, 1e-3, 1e-2][run as usize % 4];
        let counting = CountingProblem::new(&problem);
        let mut geo = GeoLora::new(
            LayerStack::new(vec![start], TruncationPolicy::local(tau))?,
            OptimizerOpts::sgd(0.2),
        )?;
        for _ in 0..50 {
            geo.step(&counting)?;
            worst = worst.max(geo.layers()[0].orthonormality_error());
        }
        per_iter_geo = per_iter_geo.max(counting.evaluations() as f64 / 50.0);
    }

    let mut rng = rng_for(seed, 99);
    let problem = random_regression(&mut rng, 20, 15, 3)?;
    let counting = CountingProblem::new(&problem);
    let mut layers = vec![random_adapter(20, 15, 2, (0.5, 1.0), &mut rng)?];
    for _ in 0..10 {
        layers = crate::baselines::dlrt_sequential_step(
            &layers,
            &counting,
            0.1,
            &TruncationPolicy::local(1e-6),
        )?
        .0;
    }
    Ok(vec![
        CheckItem::below(
            "max orthonormality error over 50 runs x 50 iterations",
            worst,
            1e-10,
        ),
        CheckItem::equals(
            "geolora gradient evaluations per iteration",
            per_iter_geo,
            1.0,
        ),
        CheckItem::equals(
            "dlrt gradient evaluations per iteration",
            counting.evaluations() as f64 / 10.0,
            3.0,
        ),
    ])
}

/// One seeded descent trajectory: violations of the full and the
/// pre-truncation inequality, and the worst excess of the full one.
#[derive(Debug, Clone, Copy, Default)]
pub struct DescentTally {
    pub iterations: usize,
    pub violations: usize,
    pub worst_excess: f64,
    pub pre_truncation_violations: usize,
}

/// Descent runs over 20 seeds × three truncation tolerances, `L̂ = 1`.
pub fn descent_tally(seed: u64) -> Result<DescentTally> {
    let lr = 0.1;
    let mut tally = DescentTally::default();
    for run in 0..20 {
        for (k, &tau) in [1e-4, 1e-2, 0.05].iter().enumerate() {
            let mut rng = rng_for(seed, 100 * run + k as u64);
            let r = rng.random_range(2..7);
            let problem = random_regression(&mut rng, 30, 25, r)?;
            let r0 = rng.random_range(1..5);
            let start = random_adapter(30, 25, r0, (0.1, 1.0), &mut rng)?;
            let mut geo = GeoLora::new(
                LayerStack::new(vec![start], TruncationPolicy::local(tau))?,
                OptimizerOpts::sgd(lr),
            )?
            .keep_augmented(true);
            for _ in 0..60 {
                let w = geo.layers()[0].clone();
                let before = loss_of(&problem, std::slice::from_ref(&w))?;
                let pg = tangent_project(&w, &dense_gradient(&problem, &w)?)?.frobenius_norm_sq();
                let report = geo.step(&problem)?;
                let after = loss_of(&problem, geo.layers())?;
                let hat = report.augmented.as_ref().expect("kept")[0].dense();
                let pre = problem.loss(&[LayerParam::Dense(&hat)])?;
                let bound = before - lr * (1.0 - lr / 2.0) * pg;
                let slack = 1e-12 * before.max(1.0);
                let excess = after - (bound + report.truncation_drops[0]);
                tally.iterations += 1;
                if excess > slack {
                    tally.violations += 1;
                    tally.worst_excess = tally.worst_excess.max(excess);
                }
                if pre > bound + slack {
                    tally.pre_truncation_violations += 1;
                }
            }
        }
    }
    Ok(tally)
}

fn theorem1(seed: u64) -> Result<Vec<CheckItem>> {
    let t = descent_tally(seed)?;
    Ok(vec![
        CheckItem::equals(
            format!(
                "descent inequality violations over {} iterations",
                t.iterations
            ),
            t.violations as f64,
            0.0,
        ),
        CheckItem::at_most("worst excess over the bound", t.worst_excess, 0.0),
        CheckItem::equals(
            "pre-truncation descent violations",
            t.pre_truncation_violations as f64,
            0.0,
        ),
    ])
}

/// Worst relative gap between the pre-truncation iterate and
/// `W + λ P(W)(−∇L)` over 20 seeded iterations.
pub fn identity_gap(seed: u64) -> Result<f64> {
    let lr = 0.1;
    let mut worst = 0.0f64;
    for run in 0..20 {
        let mut rng = rng_for(seed, 200 + run);
        let rows = rng.random_range(8..25);
        let cols = rng.random_range(6..20);
        let problem = random_regression(&mut rng, rows, cols, 4.min(rows.min(cols)))?;
        let r0 = rng.random_range(1..4);
        let w = random_adapter(rows, cols, r0, (0.2, 2.0), &mut rng)?;
        let mut geo = GeoLora::new(
            LayerStack::new(vec![w.clone()], TruncationPolicy::local(1e-3))?,
            OptimizerOpts::sgd(lr),
        )?
        .keep_augmented(true);
        let report = geo.step(&problem)?;
        let hat = report.augmented.expect("kept")[0].dense();
        let g = dense_gradient(&problem, &w)?;
        let mut expected = dense_of(&w);
        expected.axpy(-lr, &tangent_project(&w, &g)?);
        worst = worst.max((&hat - &expected).frobenius_norm() / expected.frobenius_norm());
    }
    Ok(worst)
}

fn identity(seed: u64) -> Result<Vec<CheckItem>> {
    Ok(vec![CheckItem::below(
        "max relative gap, pre-truncation iterate vs W + λP(W)(-∇L)",
        identity_gap(seed)?,
        1e-9,
    )])
}

/// Worst gradient-trick residual on matrix regression and a 2-layer tanh net,
/// and the largest condition number of the `S` factors used.
pub fn gradtrick_residuals(seed: u64) -> Result<(f64, f64)> {
    let mut rng = rng_for(seed, 300);
    let reg = random_regression(&mut rng, 12, 10, 3)?;
    let a = random_adapter(12, 10, 3, (0.5, 2.0), &mut rng)?;
    let net = TinyNet::<f64>::teacher(&[6, 5, 4], Activation::Tanh, 16, 2, 1.0, &mut rng)?;
    let layers: Vec<LowRankAdapter<f64>> = net
        .layer_shapes()
        .into_iter()
        .map(|(n, m)| random_adapter(n, m, 2, (0.5, 2.0), &mut rng))
        .collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    let mut cond = 0.0f64;
    for (p, ls) in [
        (&reg as &dyn Problem<f64>, vec![a]),
        (&net as &dyn Problem<f64>, layers),
    ] {
        for (k, l) in gradient_trick_residual(p, &ls)? {
            worst = worst.max(k.max(l));
        }
        for a in &ls {
            cond = cond.max(a.s()[0] / a.s()[a.rank() - 1]);
        }
    }
    Ok((worst, cond))
}

fn gradtrick(seed: u64) -> Result<Vec<CheckItem>> {
    let (worst, cond) = gradtrick_residuals(seed)?;
    Ok(vec![
        CheckItem::below("max gradient-trick residual", worst, 1e-8),
        CheckItem::below("largest condition number of S", cond, 1e6),
    ])
}

/// Terminal errors against the exact gradient flow at `T = 1` for step sizes
/// `λ` and `λ/2`, with `ϑ = 0` and the start inside the target's singular spaces.
pub fn flow_errors(seed: u64, lr: f64) -> Result<(f64, f64)> {
    let (n, m, r) = (20, 16, 3);
    let mut rng = rng_for(seed, 400);
    let problem = random_regression(&mut rng, n, m, r)?;
    let target = problem.target().clone();
    let dec = svd(&target)?;
    let rot_u: Matrix<f64> = random_orthonormal(r, r, &mut rng)?;
    let rot_v: Matrix<f64> = random_orthonormal(r, r, &mut rng)?;
    let u0 = dec.left.columns(0, r).matmul(&rot_u);
    let v0 = dec.right.columns(0, r).matmul(&rot_v);
    let mut s0: Vec<f64> = (0..r).map(|_| rng.random_range(0.5..1.5)).collect();
    s0.sort_by(|a, b| b.total_cmp(a));
    let start = LowRankAdapter::new(u0, s0, v0)?;
    let w0 = dense_of(&start);
    let decay = (-1.0f64).exp();
    let mut exact = target.clone();
    exact.axpy(decay, &(&w0 - &target));

    let err = |lr: f64| -> Result<f64> {
        let steps = (1.0 / lr).round() as usize;
        let mut geo = GeoLora::new(
            LayerStack::new(vec![start.clone()], TruncationPolicy::local(0.0))?,
            OptimizerOpts::sgd(lr),
        )?;
        for _ in 0..steps {
            geo.step(&problem)?;
        }
        Ok((&dense_of(&geo.layers()[0]) - &exact).frobenius_norm())
    };
    Ok((err(lr)?, err(lr / 2.0)?))
}

fn theorem3(seed: u64) -> Result<Vec<CheckItem>> {
    let (a, b) = flow_errors(seed, 0.1)?;
    Ok(vec![CheckItem::within(
        "error ratio at λ = 0.1 vs λ = 0.05",
        a / b,
        1.6,
        2.4,
    )])
}

/// Rank trajectory from a rank-1 start on a rank-8 target (`n = 100`).
pub fn recovery_ranks(seed: u64, iterations: usize) -> Result<Vec<usize>> {
    let mut rng = rng_for(seed, 500);
    let sigma: Vec<f64> = (0..8).map(|i| 2.0 - i as f64 / 7.0).collect();
    let problem = MatrixRegression::random(100, 100, &sigma, &mut rng)?;
    let start = random_adapter(100, 100, 1, (1.0, 1.0 + f64::EPSILON), &mut rng)?;
    let mut geo = GeoLora::new(
        LayerStack::new(vec![start], TruncationPolicy::local(1e-8))?,
        OptimizerOpts::sgd(0.1),
    )?;
    let mut ranks = vec![1];
    for _ in 0..iterations {
        ranks.push(geo.step(&problem)?.ranks[0]);
    }
    Ok(ranks)
}

fn recovery(seed: u64) -> Result<Vec<CheckItem>> {
    let ranks = recovery_ranks(seed, 300)?;
    let first = ranks
        .iter()
        .position(|&r| r >= 8)
        .map_or(f64::INFINITY, |i| i as f64);
    Ok(vec![
        CheckItem::at_most("first iteration with rank 8", first, 6.0),
        CheckItem::equals("final rank", *ranks.last().expect("nonempty") as f64, 8.0),
    ])
}

/// Exhaustive allocation maximizing kept `Σ s²` with `floor ≤ kₗ ≤ len` and
/// `Σ kₗ ≤ budget`; ties go to the smaller total rank.
pub fn brute_force_allocation(
    spectra: &[Vec<f64>],
    budget: usize,
    floor: usize,
) -> Option<Vec<usize>> {
    fn go(
        spectra: &[Vec<f64>],
        budget: usize,
        floor: usize,
        cur: &mut Vec<usize>,
        best: &mut Option<(f64, usize, Vec<usize>)>,
    ) {
        let l = cur.len();
        if l == spectra.len() {
            let total: usize = cur.iter().sum();
            if total > budget {
                return;
            }
            let kept: f64 = spectra
                .iter()
                .zip(cur.iter())
                .map(|(s, &k)| s[..k].iter().map(|x| x * x).sum::<f64>())
                .sum();
            let better = match best {
                None => true,
                Some((e, t, _)) => kept > *e || (kept == *e && total < *t),
            };
            if better {
                *best = Some((kept, total, cur.clone()));
            }
            return;
        }
        for k in floor.min(spectra[l].len())..=spectra[l].len() {
            cur.push(k);
            go(spectra, budget, floor, cur, best);
            cur.pop();
        }
    }
    let mut best = None;
    go(spectra, budget, floor, &mut Vec::new(), &mut best);
    best.map(|b| b.2)
}

/// Budget allocations along 3-layer linear-stack trajectories compared with
/// brute force: `(comparisons, mismatches, worst total rank)`.
pub fn global_budget_agreement(seed: u64, budget: usize) -> Result<(usize, usize, usize)> {
    let policy = TruncationPolicy::local(0.0).with_mode(TruncationMode::GlobalBudget { budget });
    let (mut compared, mut mismatched, mut worst_total) = (0, 0, 0);
    for run in 0..10 {
        let mut rng = rng_for(seed, 600 + run);
        let net =
            TinyNet::<f64>::teacher(&[10, 9, 8, 7], Activation::Identity, 40, 3, 2.0, &mut rng)?;
        let layers: Vec<LowRankAdapter<f64>> = net
            .layer_shapes()
            .into_iter()
            .map(|(n, m)| random_adapter(n, m, 2, (0.05, 0.5), &mut rng))
            .collect::<Result<_>>()?;
        let mut geo = GeoLora::new(LayerStack::new(layers, policy)?, OptimizerOpts::sgd(0.02))?
            .keep_augmented(true);
        for _ in 0..15 {
            let report = geo.step(&net)?;
            let spectra: Vec<Vec<f64>> = report
                .augmented
                .as_ref()
                .expect("kept")
                .iter()
                .map(|a| a.svd().map(|d| d.singular_values))
                .collect::<Result<_>>()?;
            let alloc = global_allocation(&spectra, &policy)?;
            let brute = brute_force_allocation(&spectra, budget, policy.min_rank);
            compared += 1;
            if brute.as_ref() != Some(&alloc) || report.ranks != alloc {
                mismatched += 1;
            }
            worst_total = worst_total.max(report.ranks.iter().sum());
        }
    }
    Ok((compared, mismatched, worst_total))
}

fn global(seed: u64) -> Result<Vec<CheckItem>> {
    let budget = 7;
    let (n, bad, worst) = global_budget_agreement(seed, budget)?;
    Ok(vec![
        CheckItem::equals(
            format!("allocation mismatches vs brute force ({n} steps)"),
            bad as f64,
            0.0,
        ),
        CheckItem::at_most(
            "largest total rank along trajectories",
            worst as f64,
            budget as f64,
        ),
    ])
}

fn stiffness_json(method: &str, extra: &str) -> String {
    format!(
        r#"{{"name": "stiffness_{method}", "problem": {{"kind": "stiffness"}}, "method": "{method}",
            "max_iters": 1000, {extra}}}"#
    )
}

/// The three Appendix-style stiffness runs: GeoLoRA, AdaLoRA-lite, SVD-LoRA.
pub fn stiffness_configs() -> Vec<ExperimentConfig> {
    let case = build_stiffness_case::<f64>();
    [
        stiffness_json(
            "geolora",
            &format!(r#""learning_rate": {}, "tau": 0.15, "threshold_norm": "nuclear""#, case.geolora_rate),
        ),
        stiffness_json(
            "adalora_lite",
            &format!(
                r#""learning_rate": {}, "tau": 0.15, "threshold_norm": "nuclear", "gamma": 5e-4, "optimizer": "adam""#,
                case.adalora_rate
            ),
        ),
        stiffness_json("svd_lora", &format!(r#""learning_rate": {}"#, case.svd_lora_rate)),
    ]
    .iter()
    .map(|s| ExperimentConfig::from_json(s).expect("built-in config"))
    .collect()
}

fn stiffness() -> Result<Vec<CheckItem>> {
    let case = build_stiffness_case::<f64>();
    let cfgs = stiffness_configs();
    let timed = |c: &ExperimentConfig| -> Result<(RunSummary, f64)> {
        let t = Instant::now();
        let out = run_on(c, &case.problem)?;
        Ok((out.summary, t.elapsed().as_secs_f64()))
    };
    let (geo, t_geo) = timed(&cfgs[0])?;
    let (ada, t_ada) = timed(&cfgs[1])?;
    let (svd_lora, t_svd) = timed(&cfgs[2])?;
    let sv = |i: usize| geo.final_singular_values[0].get(i).copied().unwrap_or(0.0);
    Ok(vec![
        CheckItem::at_most(
            "geolora iterations to loss 1e-6",
            geo.iterations_to_threshold
                .map_or(f64::INFINITY, |x| x as f64),
            1000.0,
        ),
        CheckItem::equals("geolora final rank", geo.final_ranks[0] as f64, 2.0),
        CheckItem::below("geolora |s1 - 15|", (sv(0) - 15.0).abs(), 1e-3),
        CheckItem::below("geolora |s2 - 2|", (sv(1) - 2.0).abs(), 1e-3),
        CheckItem::below("geolora runtime [s]", t_geo, 1.0),
        CheckItem::above("adalora_lite final loss", ada.final_loss, 1.0),
        CheckItem::at_least("adalora_lite final rank", ada.final_ranks[0] as f64, 4.0),
        CheckItem::above("svd_lora final loss", svd_lora.final_loss, 1.0),
        CheckItem::below("baseline runtime [s]", t_ada + t_svd, 5.0),
    ])
}

/// The five-method rank-5 regression comparison at size `n`.
pub fn toy_configs(n: usize) -> Vec<ExperimentConfig> {
    let problem = format!(
        r#"{{"kind": "matrix_regression", "rows": {n}, "cols": {n},
             "spectrum": {{"linspace": {{"max": 2.0, "min": 1.0, "rank": 5}}}}, "seed": 7}}"#
    );
    let body = |method: &str, extra: &str| {
        format!(
            r#"{{"name": "toy_{method}", "problem": {problem}, "method": "{method}", "learning_rate": 0.1,
                 "max_iters": 300, "seed": 7{extra}}}"#
        )
    };
    [
        body("geolora", r#", "tau": 1e-4, "init_rank": 5"#),
        body("full_gd", ""),
        body("dlrt", r#", "tau": 1e-4, "init_rank": 5"#),
        body(
            "adalora_lite",
            r#", "tau": 1e-4, "init_rank": 50, "gamma": 5e-4, "optimizer": "sgd""#,
        ),
        body("lora_ab", r#", "init_rank": 50"#),
    ]
    .iter()
    .map(|s| ExperimentConfig::from_json(s).expect("built-in config"))
    .collect()
}

fn toy(n: usize) -> Result<Vec<CheckItem>> {
    let t = Instant::now();
    let cmp = run_comparison(&toy_configs(n))?;
    let elapsed = t.elapsed().as_secs_f64();
    let by = |m: Method| -> &RunSummary {
        &cmp.runs
            .iter()
            .find(|r| r.summary.method == m)
            .expect("configured")
            .summary
    };
    let its = |s: &RunSummary| s.iterations_to_threshold.map_or(f64::NAN, |x| x as f64);
    let evals = |s: &RunSummary| s.evaluations_to_threshold.map_or(f64::NAN, |x| x as f64);
    let geo = by(Method::Geolora);
    let lora_ratio = if geo.final_loss > 0.0 {
        by(Method::LoraAb).final_loss / geo.final_loss
    } else {
        f64::INFINITY
    };
    Ok(vec![
        CheckItem::at_most(
            "geolora / full_gd iterations to loss 1e-6",
            its(geo) / its(by(Method::FullGd)),
            1.2,
        ),
        CheckItem::at_least(
            "dlrt / geolora gradient evaluations to loss 1e-6",
            evals(by(Method::Dlrt)) / evals(geo),
            1.8,
        ),
        CheckItem::within(
            "adalora_lite terminal loss",
            by(Method::AdaloraLite).final_loss,
            1e-4,
            1e-2,
        ),
        CheckItem::at_least("lora_ab / geolora terminal loss", lora_ratio, 10.0),
        CheckItem::below("runtime [s]", elapsed, 30.0),
    ])
}
