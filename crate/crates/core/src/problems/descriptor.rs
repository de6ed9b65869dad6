use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_stiffness_case, Activation, MatrixRegression, Problem, TinyNet};
use crate::error::{Error, Result};

/// Singular values of a generated regression target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SingularSpectrum {
    /// `rank` values evenly spaced from `max` down to `min`.
    Linspace {
        max: f64,
        min: f64,
        rank: usize,
    },
    Values(Vec<f64>),
}

impl SingularSpectrum {
    pub fn values(&self) -> Vec<f64> {
        match self {
            SingularSpectrum::Values(v) => v.clone(),
            SingularSpectrum::Linspace { max, min, rank } => match rank {
                0 => Vec::new(),
                1 => vec![*max],
                _ => (0..*rank)
                    .map(|i| max + (min - max) * i as f64 / (*rank - 1) as f64)
                    .collect(),
            },
        }
    }
}

/// Serializable recipe for a problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemDescriptor {
    MatrixRegression {
        rows: usize,
        cols: usize,
        spectrum: SingularSpectrum,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// The fixed 20×20 instance with a fast-decaying initial spectrum.
    Stiffness {},
    TinyNet {
        widths: Vec<usize>,
        #[serde(default)]
        activation: Activation,
        batch: usize,
        #[serde(default = "default_teacher_rank")]
        teacher_rank: usize,
        #[serde(default = "default_teacher_scale")]
        teacher_scale: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

fn default_teacher_rank() -> usize {
    2
}

fn default_teacher_scale() -> f64 {
    1.0
}

impl ProblemDescriptor {
    /// Problem-level seed if present, otherwise `fallback`.
    pub fn seed_or(&self, fallback: u64) -> u64 {
        match self {
            ProblemDescriptor::MatrixRegression { seed, .. }
            | ProblemDescriptor::TinyNet { seed, .. } => seed.unwrap_or(fallback),
            ProblemDescriptor::Stiffness {} => fallback,
        }
    }

    /// Field-level sanity checks, as `(field, message)` pairs.
    pub fn check(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |f: &str, m: String| out.push((format!("problem.{f}"), m));
        match self {
            ProblemDescriptor::MatrixRegression {
                rows,
                cols,
                spectrum,
                ..
            } => {
                if *rows == 0 || *cols == 0 {
                    bad("rows", "dimensions must be positive".into());
                }
                let s = spectrum.values();
                if s.is_empty() || s.len() > (*rows).min(*cols) {
                    bad(
                        "spectrum",
                        format!("rank must lie in [1, {}]", rows.min(cols)),
                    );
                }
                if s.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    bad(
                        "spectrum",
                        "singular values must be finite and non-negative".into(),
                    );
                }
            }
            ProblemDescriptor::Stiffness {} => {}
            ProblemDescriptor::TinyNet {
                widths,
                batch,
                teacher_scale,
                ..
            } => {
                if widths.len() < 2 || widths.contains(&0) {
                    bad("widths", "need at least two positive widths".into());
                }
                if *batch == 0 {
                    bad("batch", "must be positive".into());
                }
                if !teacher_scale.is_finite() {
                    bad("teacher_scale", "must be finite".into());
                }
            }
        }
        out
    }

    pub fn build(&self, fallback_seed: u64) -> Result<Box<dyn Problem<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed_or(fallback_seed));
        Ok(match self {
            ProblemDescriptor::MatrixRegression {
                rows,
                cols,
                spectrum,
                ..
            } => Box::new(MatrixRegression::random(
                *rows,
                *cols,
                &spectrum.values(),
                &mut rng,
            )?),
            ProblemDescriptor::Stiffness {} => Box::new(build_stiffness_case::<f64>().problem),
            ProblemDescriptor::TinyNet {
                widths,
                activation,
                batch,
                teacher_rank,
                teacher_scale,
                ..
            } => Box::new(TinyNet::teacher(
                widths,
                *activation,
                *batch,
                *teacher_rank,
                *teacher_scale,
                &mut rng,
            )?),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text)?;
        let issues = d.check();
        if let Some((field, msg)) = issues.into_iter().next() {
            return Err(Error::invalid(format!("{field}: {msg}")));
        }
        Ok(d)
    }
}
