use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineOptimizer;
use crate::error::{Error, FieldError, Result};
use crate::lowrank::{ThresholdNorm, TruncationMode, TruncationPolicy};
use crate::optim::Schedule;
use crate::problems::ProblemDescriptor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Geolora,
    FullGd,
    LoraAb,
    SvdLora,
    AdaloraLite,
    Dlrt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Geolora => "geolora",
            Method::FullGd => "full_gd",
            Method::LoraAb => "lora_ab",
            Method::SvdLora => "svd_lora",
            Method::AdaloraLite => "adalora_lite",
            Method::Dlrt => "dlrt",
        }
    }

    /// Methods that truncate an augmented factorization with a policy.
    pub fn is_rank_adaptive(self) -> bool {
        matches!(self, Method::Geolora | Method::Dlrt)
    }

    fn uses_tau(self) -> bool {
        matches!(self, Method::Geolora | Method::Dlrt | Method::AdaloraLite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    #[default]
    Local,
    Global,
    Budget,
}

fn default_log_every() -> usize {
    1
}

fn default_loss_threshold() -> f64 {
    1e-6
}

/// One method on one problem. Unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub problem: ProblemDescriptor,
    pub method: Method,
    pub learning_rate: f64,
    /// Relative truncation threshold; required for `geolora` and `dlrt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_norm: Option<ThresholdNorm>,
    /// Orthogonality regularization weight, `adalora_lite` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_rank: Option<usize>,
    /// Initial diagonal of `S` for `geolora`/`dlrt` (default 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
    /// Gaussian factor initialization for `lora_ab`, `svd_lora`, `adalora_lite`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_scale: Option<f64>,
    pub max_iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub policy_mode: PolicyMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<BaselineOptimizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncate_every: Option<usize>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Loss level for the iterations-to-threshold summary entries.
    #[serde(default = "default_loss_threshold")]
    pub loss_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Run per-layer work on the rayon pool.
    #[serde(default)]
    pub parallel: bool,
    /// Add a `wall_time_ms` column to the trajectory.
    #[serde(default)]
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            Error::Config(vec![FieldError {
                field: "<json>".into(),
                message: e.to_string(),
            }])
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(mut fields) => {
                for f in &mut fields {
                    f.message = format!("{} ({})", f.message, path.display());
                }
                Error::Config(fields)
            }
            other => other,
        })
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn is_stiffness(&self) -> bool {
        matches!(self.problem, ProblemDescriptor::Stiffness {})
    }

    /// Every rejected field at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<FieldError> = Vec::new();
        let mut bad = |field: &str, message: &str| {
            errs.push(FieldError {
                field: field.to_string(),
                message: message.to_string(),
            })
        };
        let m = self.method;
        let only = |field: &str, allowed: bool, who: &str, bad: &mut dyn FnMut(&str, &str)| {
            if !allowed {
                bad(field, &format!("only valid for {who}"));
            }
        };

        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad("learning_rate", "must be positive and finite");
        }
        match self.tau {
            Some(t) => {
                only(
                    "tau",
                    m.uses_tau(),
                    "geolora, dlrt and adalora_lite",
                    &mut bad,
                );
                if !(0.0..1.0).contains(&t) {
                    bad("tau", "must lie in [0, 1)");
                }
            }
            None if m.is_rank_adaptive() => bad("tau", "required for this method"),
            None => {}
        }
        if self.threshold_norm.is_some() {
            only(
                "threshold_norm",
                m.uses_tau(),
                "geolora, dlrt and adalora_lite",
                &mut bad,
            );
        }
        if let Some(g) = self.gamma {
            only("gamma", m == Method::AdaloraLite, "adalora_lite", &mut bad);
            if !(g >= 0.0 && g.is_finite()) {
                bad("gamma", "must be non-negative and finite");
            }
        }
        if self.optimizer.is_some() {
            only(
                "optimizer",
                m == Method::AdaloraLite,
                "adalora_lite",
                &mut bad,
            );
        }
        if self.truncate_every.is_some() {
            only(
                "truncate_every",
                m == Method::AdaloraLite,
                "adalora_lite",
                &mut bad,
            );
        }
        if let Some(mo) = self.momentum {
            only("momentum", m == Method::Geolora, "geolora", &mut bad);
            if !(0.0..1.0).contains(&mo) {
                bad("momentum", "must lie in [0, 1)");
            }
        }
        if let Some(wd) = self.weight_decay {
            only("weight_decay", m == Method::Geolora, "geolora", &mut bad);
            if !(wd >= 0.0 && wd.is_finite()) {
                bad("weight_decay", "must be non-negative and finite");
            }
        }
        if let Some(s) = self.init_scale {
            only(
                "init_scale",
                m.is_rank_adaptive(),
                "geolora and dlrt",
                &mut bad,
            );
            if !(s >= 0.0 && s.is_finite()) {
                bad("init_scale", "must be non-negative and finite");
            }
        }
        if let Some(s) = self.init_std {
            only(
                "init_std",
                matches!(m, Method::LoraAb | Method::SvdLora | Method::AdaloraLite),
                "lora_ab, svd_lora and adalora_lite",
                &mut bad,
            );
            if !(s > 0.0 && s.is_finite()) {
                bad("init_std", "must be positive and finite");
            }
        }
        if let Some(s) = self.lora_scale {
            only("lora_scale", m == Method::LoraAb, "lora_ab", &mut bad);
            if !s.is_finite() {
                bad("lora_scale", "must be finite");
            }
        }
        if let Some(r) = self.min_rank {
            only(
                "min_rank",
                m.uses_tau(),
                "geolora, dlrt and adalora_lite",
                &mut bad,
            );
            if r == 0 {
                bad("min_rank", "must be at least 1");
            }
        }
        match (self.policy_mode, self.budget) {
            (PolicyMode::Budget, None) => bad("budget", "required when policy_mode is budget"),
            (PolicyMode::Budget, Some(0)) => bad("budget", "must be positive"),
            (PolicyMode::Local | PolicyMode::Global, Some(_)) => {
                bad("budget", "only valid when policy_mode is budget")
            }
            _ => {}
        }
        if self.policy_mode != PolicyMode::Local {
            only(
                "policy_mode",
                m.is_rank_adaptive(),
                "geolora and dlrt",
                &mut bad,
            );
        }
        match self.init_rank {
            Some(r) => {
                if m == Method::FullGd {
                    bad("init_rank", "not used by full_gd");
                } else if self.is_stiffness() {
                    bad(
                        "init_rank",
                        "the stiffness case fixes its own initialization",
                    );
                } else if r == 0 {
                    bad("init_rank", "must be at least 1");
                }
            }
            None if m != Method::FullGd && !self.is_stiffness() => {
                bad("init_rank", "required for low-rank methods")
            }
            None => {}
        }
        if self.log_every == 0 {
            bad("log_every", "must be at least 1");
        }
        if self.loss_threshold.is_nan() || self.loss_threshold <= 0.0 {
            bad("loss_threshold", "must be positive");
        }
        if let Schedule::InverseTime { t0 } = self.schedule {
            if !(t0 > 0.0 && t0.is_finite()) {
                bad("schedule.t0", "must be positive");
            }
        }
        for (field, message) in self.problem.check() {
            bad(&field, &message);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Truncation policy with method defaults filled in.
    pub fn policy(&self) -> TruncationPolicy<f64> {
        let default_min = if self.method == Method::AdaloraLite {
            5
        } else {
            1
        };
        let mode = match self.policy_mode {
            PolicyMode::Local => TruncationMode::LocalRelative,
            PolicyMode::Global => TruncationMode::GlobalRelative,
            PolicyMode::Budget => TruncationMode::GlobalBudget {
                budget: self.budget.unwrap_or(0),
            },
        };
        TruncationPolicy::local(self.tau.unwrap_or(0.0))
            .with_min_rank(self.min_rank.unwrap_or(default_min))
            .with_norm(self.threshold_norm.unwrap_or_default())
            .with_mode(mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "problem": {"kind": "matrix_regression", "rows": 10, "cols": 8,
                    "spectrum": {"values": [2.0, 1.0]}},
        "method": "geolora", "learning_rate": 0.1, "tau": 0.01,
        "init_rank": 2, "max_iters": 5
    }"#;

    fn with(extra: &str) -> String {
        BASE.trim_end().trim_end_matches('}').to_string() + "," + extra + "}"
    }

    fn fields(e: Error) -> Vec<String> {
        match e {
            Error::Config(f) => f.into_iter().map(|f| f.field).collect(),
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::from_json(BASE).unwrap();
        assert_eq!(c.method, Method::Geolora);
        assert_eq!(c.log_every, 1);
        assert_eq!(c.policy().min_rank, 1);
        assert_eq!(c.policy().mode, TruncationMode::LocalRelative);
    }

    #[test]
    fn unknown_field_is_rejected() {
        let e = ExperimentConfig::from_json(&with(r#""colour": 1"#)).unwrap_err();
        assert_eq!(fields(e), vec!["<json>"]);
    }

    #[test]
    fn lists_every_bad_field() {
        let text = with(r#""gamma": 0.1, "budget": 3, "log_every": 0"#).replace("0.1,", "-1.0,");
        let f = fields(ExperimentConfig::from_json(&text).unwrap_err());
        for want in ["learning_rate", "gamma", "budget", "log_every"] {
            assert!(f.iter().any(|x| x == want), "{want} missing from {f:?}");
        }
    }

    #[test]
    fn budget_mode_needs_budget() {
        let f =
            fields(ExperimentConfig::from_json(&with(r#""policy_mode": "budget""#)).unwrap_err());
        assert_eq!(f, vec!["budget"]);
        let c =
            ExperimentConfig::from_json(&with(r#""policy_mode": "budget", "budget": 4"#)).unwrap();
        assert_eq!(c.policy().mode, TruncationMode::GlobalBudget { budget: 4 });
    }

    #[test]
    fn adalora_defaults_to_rank_floor_five() {
        let text = BASE.replace("\"geolora\"", "\"adalora_lite\"");
        let c = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(c.policy().min_rank, 5);
    }

    #[test]
    fn geolora_requires_tau() {
        let text = BASE.replace("\"tau\": 0.01,", "");
        assert_eq!(
            fields(ExperimentConfig::from_json(&text).unwrap_err()),
            vec!["tau"]
        );
    }
}
