use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use crate::baselines::{
    adalora_lite_step, dlrt_sequential_step, full_gd_step, lora_ab_step, svd_lora_step, AbAdapter,
    AdaLoraOpts, AdaLoraState, DenseFactorAdapter,
};
use crate::error::{Error, Result};
use crate::geolora::{GeoLora, LayerStack};
use crate::linalg::{qr_orthonormalize, svd, Matrix};
use crate::lowrank::{random_orthonormal, tangent_project, LowRankAdapter, TruncationPolicy};
use crate::optim::OptimizerOpts;
use crate::problems::{
    build_stiffness_case, params_of, CountingProblem, LayerParam, OwnedFactors, Problem,
};

/// One logged iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    /// Gradient evaluations spent before reaching this iterate.
    pub evaluations: usize,
    /// Objective the method minimizes (task loss plus any regularizer).
    pub loss: f64,
    pub task_loss: f64,
    /// `‖∇_W L‖_F` over all layers.
    pub grad_norm: f64,
    /// `‖P(W)∇_W L‖_F` with `P` the tangent projection at the current factor
    /// column spaces.
    pub proj_grad_norm: f64,
    pub ranks: Vec<usize>,
    pub singular_values: Vec<Vec<f64>>,
    pub ortho_error: Option<f64>,
    /// Truncation drop of the step that produced this iterate, summed over layers.
    pub truncation_drop: f64,
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: Method,
    pub iterations: usize,
    pub gradient_evaluations: usize,
    pub final_loss: f64,
    pub final_task_loss: f64,
    pub final_ranks: Vec<usize>,
    pub final_singular_values: Vec<Vec<f64>>,
    pub loss_threshold: f64,
    pub iterations_to_threshold: Option<usize>,
    pub evaluations_to_threshold: Option<usize>,
    pub max_ortho_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub logs: Vec<IterationLog>,
    pub summary: RunSummary,
}

enum State {
    Geo(GeoLora<f64>),
    Dlrt(Vec<LowRankAdapter<f64>>, TruncationPolicy<f64>),
    Full(Vec<Matrix<f64>>),
    Ab(Vec<AbAdapter<f64>>),
    Svd(Vec<DenseFactorAdapter<f64>>),
    Ada(
        Vec<DenseFactorAdapter<f64>>,
        AdaLoraOpts<f64>,
        AdaLoraState<f64>,
    ),
}

fn init_state(cfg: &ExperimentConfig, problem: &dyn Problem<f64>) -> Result<State> {
    let shapes = problem.layer_shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let stiff = cfg.is_stiffness().then(build_stiffness_case::<f64>);
    let rank = cfg.init_rank.unwrap_or(1);
    for (l, &(n, m)) in shapes.iter().enumerate() {
        if cfg.method != Method::FullGd && stiff.is_none() && rank > n.min(m) {
            return Err(Error::Config(vec![crate::error::FieldError {
                field: "init_rank".into(),
                message: format!("exceeds min dimension {} of layer {l}", n.min(m)),
            }]));
        }
    }
    let policy = cfg.policy();
    Ok(match cfg.method {
        Method::Geolora | Method::Dlrt => {
            let layers = match &stiff {
                Some(case) => vec![case.adapter.clone()],
                None => shapes
                    .iter()
                    .map(|&(n, m)| {
                        LowRankAdapter::new(
                            random_orthonormal(n, rank, &mut rng)?,
                            vec![cfg.init_scale.unwrap_or(0.0); rank],
                            random_orthonormal(m, rank, &mut rng)?,
                        )
                    })
                    .collect::<Result<_>>()?,
            };
            if cfg.method == Method::Dlrt {
                State::Dlrt(layers, policy)
            } else {
                let opts = OptimizerOpts {
                    learning_rate: cfg.learning_rate,
                    momentum: cfg.momentum.unwrap_or(0.0),
                    weight_decay: cfg.weight_decay.unwrap_or(0.0),
                };
                let stack = LayerStack::new(layers, policy)?;
                State::Geo(
                    GeoLora::new(stack, opts)?
                        .with_schedule(cfg.schedule)
                        .with_parallel(cfg.parallel),
                )
            }
        }
        Method::FullGd => State::Full(match &stiff {
            Some(case) => vec![case.dense.dense()],
            None => shapes.iter().map(|&(n, m)| Matrix::zeros(n, m)).collect(),
        }),
        Method::LoraAb => State::Ab(match &stiff {
            Some(case) => {
                let a = &case.adapter;
                vec![AbAdapter::new(
                    a.u().scale_columns(a.s()),
                    a.v().clone(),
                    cfg.lora_scale.unwrap_or(1.0),
                )?]
            }
            None => shapes
                .iter()
                .map(|&(n, m)| {
                    let std = cfg.init_std.unwrap_or(1.0 / (n as f64).sqrt());
                    AbAdapter::gaussian(n, m, rank, std, cfg.lora_scale.unwrap_or(1.0), &mut rng)
                })
                .collect::<Result<_>>()?,
        }),
        Method::SvdLora | Method::AdaloraLite => {
            let layers = match &stiff {
                Some(case) => vec![case.dense.clone()],
                None => shapes
                    .iter()
                    .map(|&(n, m)| {
                        DenseFactorAdapter::gaussian(
                            n,
                            m,
                            rank,
                            cfg.init_std.unwrap_or(0.02),
                            &mut rng,
                        )
                    })
                    .collect::<Result<_>>()?,
            };
            if cfg.method == Method::SvdLora {
                State::Svd(layers)
            } else {
                let mut opts =
                    AdaLoraOpts::new(cfg.learning_rate, cfg.gamma.unwrap_or(0.0), policy);
                opts.optimizer = cfg.optimizer.unwrap_or_default();
                opts.truncate_every = cfg.truncate_every.unwrap_or(1);
                State::Ada(layers, opts, AdaLoraState::default())
            }
        }
    })
}

/// Orthonormal column bases `(U, V)` of a factored layer; `None` when dense.
type Frame = Option<(Matrix<f64>, Matrix<f64>)>;

/// Per-layer factor storage used to evaluate the problem.
enum Params<'a> {
    Owned(Vec<OwnedFactors<f64>>),
    Dense(&'a [Matrix<f64>]),
    Ab(&'a [AbAdapter<f64>]),
    Factors(&'a [DenseFactorAdapter<f64>]),
}

impl Params<'_> {
    fn list(&self) -> Vec<LayerParam<'_, f64>> {
        match self {
            Params::Owned(f) => params_of(f),
            Params::Dense(w) => w.iter().map(LayerParam::Dense).collect(),
            Params::Ab(a) => a.iter().map(AbAdapter::param).collect(),
            Params::Factors(d) => d.iter().map(DenseFactorAdapter::param).collect(),
        }
    }
}

impl State {
    fn params(&self) -> Params<'_> {
        match self {
            State::Geo(g) => {
                Params::Owned(g.layers().iter().map(OwnedFactors::from_adapter).collect())
            }
            State::Dlrt(a, _) => Params::Owned(a.iter().map(OwnedFactors::from_adapter).collect()),
            State::Full(w) => Params::Dense(w),
            State::Ab(a) => Params::Ab(a),
            State::Svd(d) | State::Ada(d, _, _) => Params::Factors(d),
        }
    }

    fn regularizer(&self) -> f64 {
        match self {
            State::Ada(d, opts, _) => {
                opts.gamma
                    * d.iter()
                        .map(DenseFactorAdapter::orthogonality_penalty)
                        .sum::<f64>()
            }
            _ => 0.0,
        }
    }

    /// Advances one iteration; returns the summed truncation drop.
    fn step(&mut self, problem: &dyn Problem<f64>, lr: f64) -> Result<f64> {
        Ok(match self {
            State::Geo(g) => g.step(problem)?.truncation_drops.iter().sum(),
            State::Dlrt(a, policy) => {
                let (next, rep) = dlrt_sequential_step(a, problem, lr, policy)?;
                *a = next;
                rep.layers.iter().map(|t| t.drop).sum()
            }
            State::Full(w) => {
                *w = full_gd_step(w, problem, lr)?;
                0.0
            }
            State::Ab(a) => {
                *a = lora_ab_step(a, problem, lr)?;
                0.0
            }
            State::Svd(d) => {
                *d = svd_lora_step(d, problem, lr)?;
                0.0
            }
            State::Ada(d, opts, st) => {
                *d = adalora_lite_step(d, problem, opts, st)?;
                0.0
            }
        })
    }

    /// Orthonormal column bases of each layer's factors (`None` for dense layers).
    fn frames(&self) -> Result<Vec<Frame>> {
        let q = |u: &Matrix<f64>, v: &Matrix<f64>| -> Result<Frame> {
            Ok(Some((qr_orthonormalize(u)?, qr_orthonormalize(v)?)))
        };
        match self {
            State::Geo(g) => Ok(g
                .layers()
                .iter()
                .map(|a| Some((a.u().clone(), a.v().clone())))
                .collect()),
            State::Dlrt(a, _) => Ok(a
                .iter()
                .map(|a| Some((a.u().clone(), a.v().clone())))
                .collect()),
            State::Full(w) => Ok(vec![None; w.len()]),
            State::Ab(a) => a.iter().map(|x| q(x.a(), x.b())).collect(),
            State::Svd(d) | State::Ada(d, _, _) => d.iter().map(|x| q(x.u(), x.v())).collect(),
        }
    }

    fn ranks(&self) -> Vec<usize> {
        match self {
            State::Geo(g) => g.stack().ranks(),
            State::Dlrt(a, _) => a.iter().map(LowRankAdapter::rank).collect(),
            State::Full(w) => w.iter().map(|m| m.rows().min(m.cols())).collect(),
            State::Ab(a) => a.iter().map(AbAdapter::rank).collect(),
            State::Svd(d) | State::Ada(d, _, _) => d.iter().map(DenseFactorAdapter::rank).collect(),
        }
    }

    /// Singular values of every layer increment. Dense layers are decomposed
    /// only when `dense_too` is set.
    fn singular_values(&self, frames: &[Frame], dense_too: bool) -> Result<Vec<Vec<f64>>> {
        let core = |qu: &Matrix<f64>,
                    u: &Matrix<f64>,
                    s: &Matrix<f64>,
                    qv: &Matrix<f64>,
                    v: &Matrix<f64>|
         -> Result<Vec<f64>> {
            let m = qu.t_matmul(u).matmul(s).matmul(&v.t_matmul(qv));
            Ok(svd(&m)?.singular_values)
        };
        match self {
            State::Geo(g) => Ok(g.layers().iter().map(|a| a.s().to_vec()).collect()),
            State::Dlrt(a, _) => Ok(a.iter().map(|a| a.s().to_vec()).collect()),
            State::Full(w) => {
                if dense_too {
                    w.iter().map(|m| Ok(svd(m)?.singular_values)).collect()
                } else {
                    Ok(vec![Vec::new(); w.len()])
                }
            }
            State::Ab(a) => a
                .iter()
                .zip(frames)
                .map(|(x, f)| {
                    let (qu, qv) = f.as_ref().expect("factored layer");
                    let s = Matrix::identity(x.rank()).scale(x.scale());
                    core(qu, x.a(), &s, qv, x.b())
                })
                .collect(),
            State::Svd(d) | State::Ada(d, _, _) => d
                .iter()
                .zip(frames)
                .map(|(x, f)| {
                    let (qu, qv) = f.as_ref().expect("factored layer");
                    core(qu, x.u(), x.s(), qv, x.v())
                })
                .collect(),
        }
    }

    fn ortho_error(&self) -> Option<f64> {
        let max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, f64::max);
        match self {
            State::Geo(g) => Some(max(&mut g
                .layers()
                .iter()
                .map(LowRankAdapter::orthonormality_error))),
            State::Dlrt(a, _) => Some(max(&mut a.iter().map(LowRankAdapter::orthonormality_error))),
            State::Svd(d) | State::Ada(d, _, _) => Some(max(&mut d
                .iter()
                .map(DenseFactorAdapter::orthonormality_error))),
            State::Full(_) | State::Ab(_) => None,
        }
    }
}

fn objective(state: &State, problem: &dyn Problem<f64>) -> Result<(f64, f64)> {
    let task = problem.loss(&state.params().list())?;
    if !task.is_finite() {
        return Err(Error::numeric("loss", "loss is not finite"));
    }
    Ok((task + state.regularizer(), task))
}

fn record(
    state: &State,
    problem: &dyn Problem<f64>,
    iter: usize,
    evaluations: usize,
    drop: f64,
    final_record: bool,
) -> Result<IterationLog> {
    let params = state.params();
    let bundle = problem.gradients(&params.list(), true)?;
    if !bundle.loss.is_finite() {
        return Err(Error::numeric("loss", "loss is not finite"));
    }
    let dense = bundle.dense_gradient.unwrap_or_default();
    let frames = state.frames()?;
    let mut g2 = 0.0;
    let mut p2 = 0.0;
    for (g, f) in dense.iter().zip(&frames) {
        g2 += g.frobenius_norm_sq();
        p2 += match f {
            Some((qu, qv)) => {
                let frame =
                    LowRankAdapter::from_parts(qu.clone(), vec![1.0; qu.cols()], qv.clone());
                tangent_project(&frame, g)?.frobenius_norm_sq()
            }
            None => g.frobenius_norm_sq(),
        };
    }
    Ok(IterationLog {
        iter,
        evaluations,
        loss: bundle.loss + state.regularizer(),
        task_loss: bundle.loss,
        grad_norm: g2.sqrt(),
        proj_grad_norm: p2.sqrt(),
        ranks: state.ranks(),
        singular_values: state.singular_values(&frames, final_record)?,
        ortho_error: state.ortho_error(),
        truncation_drop: drop,
        wall_time_ms: None,
    })
}

/// Runs one configured experiment. Deterministic for a given config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let problem = cfg.problem.build(cfg.seed)?;
    run_on(cfg, problem.as_ref())
}

/// Like [`run_experiment`] on an already built problem.
pub fn run_on(cfg: &ExperimentConfig, problem: &dyn Problem<f64>) -> Result<RunOutput> {
    let start = Instant::now();
    let mut state = init_state(cfg, problem)?;
    let counting = CountingProblem::new(problem);
    let elapsed = |timing: bool| timing.then(|| start.elapsed().as_secs_f64() * 1e3);

    let mut logs = Vec::new();
    let mut first = record(&state, problem, 0, 0, 0.0, cfg.max_iters == 0)?;
    first.wall_time_ms = elapsed(cfg.timing);
    let mut hit = (first.loss < cfg.loss_threshold).then_some((0, 0));
    logs.push(first);

    for t in 0..cfg.max_iters {
        let lr = cfg.schedule.rate(cfg.learning_rate, t);
        let drop = state.step(&counting, lr).map_err(|e| e.at_iteration(t))?;
        let it = t + 1;
        let evals = counting.evaluations();
        let last = it == cfg.max_iters;
        if it % cfg.log_every == 0 || last {
            let mut rec =
                record(&state, problem, it, evals, drop, last).map_err(|e| e.at_iteration(it))?;
            rec.wall_time_ms = elapsed(cfg.timing);
            if hit.is_none() && rec.loss < cfg.loss_threshold {
                hit = Some((it, evals));
            }
            logs.push(rec);
        } else if hit.is_none() {
            let (loss, _) = objective(&state, problem).map_err(|e| e.at_iteration(it))?;
            if loss < cfg.loss_threshold {
                hit = Some((it, evals));
            }
        }
    }

    let last = logs.last().expect("initial record").clone();
    let max_ortho = logs
        .iter()
        .filter_map(|l| l.ortho_error)
        .fold(None, |acc: Option<f64>, x| {
            Some(acc.map_or(x, |a| a.max(x)))
        });
    let summary = RunSummary {
        name: cfg.label(),
        method: cfg.method,
        iterations: cfg.max_iters,
        gradient_evaluations: counting.evaluations(),
        final_loss: last.loss,
        final_task_loss: last.task_loss,
        final_ranks: last.ranks,
        final_singular_values: last.singular_values,
        loss_threshold: cfg.loss_threshold,
        iterations_to_threshold: hit.map(|h| h.0),
        evaluations_to_threshold: hit.map(|h| h.1),
        max_ortho_error: max_ortho,
        elapsed_ms: elapsed(cfg.timing),
    };
    Ok(RunOutput { logs, summary })
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(sep)
}

/// Shortest round-trip scientific form.
fn num(x: f64) -> String {
    format!("{x:e}")
}

/// Column names of `trajectory.csv`.
pub fn trajectory_header(timing: bool) -> Vec<&'static str> {
    let mut h = vec![
        "iter",
        "evaluations",
        "loss",
        "task_loss",
        "grad_norm",
        "proj_grad_norm",
        "ranks",
        "singular_values",
        "ortho_error",
        "truncation_drop",
    ];
    if timing {
        h.push("wall_time_ms");
    }
    h
}

/// Writes `trajectory.csv` and `summary.json` into `dir`.
pub fn write_run(out: &RunOutput, dir: &Path, timing: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("trajectory.csv"))?;
    w.write_record(trajectory_header(timing))?;
    for l in &out.logs {
        let sv: Vec<String> = l
            .singular_values
            .iter()
            .map(|s| s.iter().map(|&x| num(x)).collect::<Vec<_>>().join(";"))
            .collect();
        let mut row = vec![
            l.iter.to_string(),
            l.evaluations.to_string(),
            num(l.loss),
            num(l.task_loss),
            num(l.grad_norm),
            num(l.proj_grad_norm),
            join(&l.ranks, ";"),
            sv.join("|"),
            l.ortho_error.map(num).unwrap_or_default(),
            num(l.truncation_drop),
        ];
        if timing {
            row.push(l.wall_time_ms.map(num).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    let mut summary = out.summary.clone();
    if !timing {
        summary.elapsed_ms = None;
    }
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(())
}

/// Loss against gradient evaluations for several methods on one problem.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub runs: Vec<RunOutput>,
}

/// Runs every config (in parallel) after checking they share one problem.
pub fn run_comparison(configs: &[ExperimentConfig]) -> Result<Comparison> {
    let first = configs
        .first()
        .ok_or_else(|| Error::invalid("no configs to compare"))?;
    let key = |c: &ExperimentConfig| (c.problem.clone(), c.problem.seed_or(c.seed));
    for c in configs {
        c.validate()?;
        if key(c) != key(first) {
            return Err(Error::invalid(format!(
                "config `{}` uses a different problem than `{}`",
                c.label(),
                first.label()
            )));
        }
    }
    let runs = configs
        .par_iter()
        .map(run_experiment)
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { runs })
}

impl Comparison {
    /// Writes `comparison.csv` (`name,method,iter,evaluations,loss`) and one
    /// subdirectory per run.
    pub fn write(&self, dir: &Path, timing: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
        w.write_record(["name", "method", "iter", "evaluations", "loss"])?;
        for (i, run) in self.runs.iter().enumerate() {
            for l in &run.logs {
                w.write_record([
                    run.summary.name.clone(),
                    run.summary.method.name().to_string(),
                    l.iter.to_string(),
                    l.evaluations.to_string(),
                    num(l.loss),
                ])?;
            }
            write_run(
                run,
                &dir.join(format!("{i:02}_{}", run.summary.name)),
                timing,
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{ProblemDescriptor, SingularSpectrum};

    fn cfg(method: Method) -> ExperimentConfig {
        let mut c = ExperimentConfig::from_json(
            r#"{"problem": {"kind": "matrix_regression", "rows": 12, "cols": 10,
                 "spectrum": {"values": [2.0, 1.5, 1.0]}, "seed": 3},
                "method": "geolora", "learning_rate": 0.2, "tau": 1e-3,
                "init_rank": 2, "max_iters": 20}"#,
        )
        .unwrap();
        c.method = method;
        match method {
            Method::FullGd => {
                c.init_rank = None;
                c.tau = None;
            }
            Method::LoraAb | Method::SvdLora => c.tau = None,
            _ => {}
        }
        c
    }

    #[test]
    fn zero_iterations_give_initial_record() {
        let mut c = cfg(Method::Geolora);
        c.max_iters = 0;
        let out = run_experiment(&c).unwrap();
        assert_eq!(out.logs.len(), 1);
        assert_eq!(out.summary.gradient_evaluations, 0);
        // S = 0 start: loss is half the squared target norm
        assert!((out.logs[0].loss - 0.5 * (4.0 + 2.25 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn every_method_runs_and_counts_evaluations() {
        for m in [
            Method::Geolora,
            Method::FullGd,
            Method::LoraAb,
            Method::SvdLora,
            Method::AdaloraLite,
            Method::Dlrt,
        ] {
            let out = run_experiment(&cfg(m)).unwrap();
            let per = if m == Method::Dlrt { 3 } else { 1 };
            assert_eq!(out.summary.gradient_evaluations, 20 * per, "{m:?}");
            assert_eq!(out.logs.len(), 21);
            assert!(out.summary.final_loss.is_finite());
        }
    }

    #[test]
    fn log_every_thins_records_but_keeps_last() {
        let mut c = cfg(Method::Geolora);
        c.log_every = 6;
        let out = run_experiment(&c).unwrap();
        let iters: Vec<usize> = out.logs.iter().map(|l| l.iter).collect();
        assert_eq!(iters, vec![0, 6, 12, 18, 20]);
    }

    #[test]
    fn output_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(Method::Geolora);
        for sub in ["a", "b"] {
            write_run(&run_experiment(&c).unwrap(), &dir.path().join(sub), false).unwrap();
        }
        let a = fs::read(dir.path().join("a/trajectory.csv")).unwrap();
        let b = fs::read(dir.path().join("b/trajectory.csv")).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("iter,evaluations,loss,task_loss,grad_norm,proj_grad_norm,ranks,"));
    }

    #[test]
    fn comparison_rejects_mixed_problems() {
        let a = cfg(Method::Geolora);
        let mut b = cfg(Method::FullGd);
        b.problem = ProblemDescriptor::MatrixRegression {
            rows: 12,
            cols: 10,
            spectrum: SingularSpectrum::Values(vec![1.0]),
            seed: Some(3),
        };
        assert!(matches!(
            run_comparison(&[a, b]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_config_comparison_matches_run() {
        let c = cfg(Method::Dlrt);
        let cmp = run_comparison(std::slice::from_ref(&c)).unwrap();
        assert_eq!(cmp.runs[0].logs, run_experiment(&c).unwrap().logs);
    }

    #[test]
    fn geolora_projected_gradient_is_not_larger_than_gradient() {
        let out = run_experiment(&cfg(Method::Geolora)).unwrap();
        for l in &out.logs {
            assert!(l.proj_grad_norm <= l.grad_norm * (1.0 + 1e-12));
        }
    }
}
