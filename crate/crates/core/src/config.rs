//! JSON experiment documents.
//!
//! A single document describes the problem (inline MRP/features/weights, the
//! builtin counterexample, or a control problem), the objective family, the
//! solver configuration, optional sweep axes, and the RNG seed. Field names
//! are part of the wire format.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linear::FeatureMap;
use crate::mrp::{Mrp, UpdateDistribution};
use crate::objective::Greedify;
use crate::solver::SolverConfig;
use crate::{Error, Result};

/// Top-level experiment document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentDoc {
    pub problem: ProblemDoc,
    #[serde(default)]
    pub objective: ObjectiveDoc,
    #[serde(default)]
    pub solver: SolverDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepDoc>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

impl ExperimentDoc {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ExperimentDoc =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        doc.problem.validate()?;
        Ok(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("documents always serialize")
    }
}

/// Problem source: exactly one of builtin, inline, or control.
///
/// - builtin: `{"builtin": "counterexample", "epsilon": .., "gamma": .., "d1": ..}`
/// - inline: `{"n": .., "P": [[..]], "R": [..], "gamma": .., "terminal": [..],
///   "Phi": [[..]], "d": [..]}` with an optional `"restart"` distribution
/// - control: `{"control": {..}, "gamma": ..}`
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ProblemDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<Vec<bool>>,
    #[serde(rename = "Phi", default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restart: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Builtin,
    Inline,
    Control,
}

impl ProblemDoc {
    pub fn kind(&self) -> Result<ProblemKind> {
        let sources = [
            self.builtin.is_some(),
            self.n.is_some() || self.p.is_some() || self.phi.is_some(),
            self.control.is_some(),
        ];
        match sources {
            [true, false, false] => Ok(ProblemKind::Builtin),
            [false, true, false] => Ok(ProblemKind::Inline),
            [false, false, true] => Ok(ProblemKind::Control),
            [false, false, false] => Err(Error::Config(
                "problem: provide one of \"builtin\", an inline MRP, or \"control\"".to_string(),
            )),
            _ => Err(Error::Config(
                "problem: exactly one source allowed (builtin, inline, or control)".to_string(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kind().map(|_| ())
    }

    fn require<T: Copy>(field: Option<T>, name: &str) -> Result<T> {
        field.ok_or_else(|| Error::Config(format!("problem: missing field \"{name}\"")))
    }

    /// Counterexample parameters for a builtin problem, with overrides
    /// applied (used by sweeps).
    pub fn counterexample_params(&self) -> Result<crate::analysis::CounterExampleParams> {
        match self.builtin.as_deref() {
            Some("counterexample") => {}
            Some(other) => {
                return Err(Error::Config(format!(
                    "problem: unknown builtin \"{other}\""
                )))
            }
            None => {
                return Err(Error::Config("problem: not a builtin problem".to_string()));
            }
        }
        let epsilon = Self::require(self.epsilon, "epsilon")?;
        let gamma = Self::require(self.gamma, "gamma")?;
        let d1 = self.d1.unwrap_or(0.5);
        crate::analysis::CounterExampleParams::new(epsilon, gamma, d1)
            .map_err(|e| Error::Config(format!("problem: {e}")))
    }

    /// Builds the MRP, features, and weights for builtin or inline problems.
    pub fn build_prediction(&self) -> Result<(Mrp, FeatureMap, UpdateDistribution)> {
        match self.kind()? {
            ProblemKind::Builtin => {
                crate::analysis::counterexample_build(&self.counterexample_params()?)
            }
            ProblemKind::Control => Err(Error::Config(
                "problem: control problems have no MRP form; use loss = \"control\"".to_string(),
            )),
            ProblemKind::Inline => {
                let n = Self::require(self.n, "n")?;
                let p = self
                    .p
                    .as_ref()
                    .ok_or_else(|| Error::Config("problem: missing field \"P\"".to_string()))?;
                let r = self
                    .r
                    .as_ref()
                    .ok_or_else(|| Error::Config("problem: missing field \"R\"".to_string()))?;
                let gamma = Self::require(self.gamma, "gamma")?;
                let terminal = self.terminal.clone().unwrap_or_else(|| vec![false; n]);
                let phi_rows = self
                    .phi
                    .as_ref()
                    .ok_or_else(|| Error::Config("problem: missing field \"Phi\"".to_string()))?;
                let d = self
                    .d
                    .as_ref()
                    .ok_or_else(|| Error::Config("problem: missing field \"d\"".to_string()))?;

                if p.len() != n || p.iter().any(|row| row.len() != n) {
                    return Err(Error::Config(format!("problem: \"P\" must be {n}x{n}")));
                }
                let transition = DMatrix::from_fn(n, n, |i, j| p[i][j]);
                let reward = DVector::from_vec(r.clone());
                let mrp = Mrp::new(transition, reward, gamma, terminal)
                    .map_err(|e| Error::Config(format!("problem: {e}")))?;
                let phi = FeatureMap::from_rows(phi_rows)
                    .map_err(|e| Error::Config(format!("problem: {e}")))?;
                let d = UpdateDistribution::from_slice(d)
                    .map_err(|e| Error::Config(format!("problem: {e}")))?;
                Ok((mrp, phi, d))
            }
        }
    }

    /// Restart distribution for stationary computations, when given.
    pub fn restart_distribution(&self) -> Result<Option<UpdateDistribution>> {
        match &self.restart {
            None => Ok(None),
            Some(r) => UpdateDistribution::from_slice(r)
                .map(Some)
                .map_err(|e| Error::Config(format!("problem: bad restart: {e}"))),
        }
    }
}

/// Inline control problem. `phi`, `reward`, and `next` are indexed by the
/// flat state-action pair `s * n_actions + a`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ControlDoc {
    pub n_states: usize,
    pub n_actions: usize,
    pub d: Vec<f64>,
    pub policy: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
    pub next: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl ControlDoc {
    pub fn build(&self, greedify: Greedify) -> Result<crate::objective::ControlProblem> {
        let pairs = self.n_states * self.n_actions;
        if self.policy.len() != self.n_states || self.phi.len() != pairs || self.next.len() != pairs
        {
            return Err(Error::Config(
                "control: policy/phi/next row counts do not match n_states and n_actions"
                    .to_string(),
            ));
        }
        let m = self.phi.first().map(|r| r.len()).unwrap_or(0);
        let policy = DMatrix::from_fn(self.n_states, self.n_actions, |i, j| self.policy[i][j]);
        let phi = DMatrix::from_fn(pairs, m, |i, j| self.phi[i][j]);
        let next = DMatrix::from_fn(pairs, self.n_states, |i, j| self.next[i][j]);
        crate::objective::ControlProblem::new(
            self.n_states,
            self.n_actions,
            DVector::from_vec(self.d.clone()),
            policy,
            phi,
            DVector::from_vec(self.reward.clone()),
            next,
            self.gamma,
            greedify,
        )
        .map_err(|e| Error::Config(format!("control: {e}")))
    }
}

/// Objective family selection:
/// `{"loss": "quadratic"|"huber"|"logcosh"|"control", "delta": .., "scale": ..,
///   "ridge": .., "greedify": "max"|"softmax", "tau": ..}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectiveDoc {
    #[serde(default = "default_loss")]
    pub loss: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greedify: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

fn default_loss() -> String {
    "quadratic".to_string()
}

impl Default for ObjectiveDoc {
    fn default() -> Self {
        Self {
            loss: default_loss(),
            delta: None,
            scale: None,
            ridge: None,
            greedify: None,
            tau: None,
        }
    }
}

impl ObjectiveDoc {
    pub fn greedify(&self) -> Result<Greedify> {
        match self.greedify.as_deref() {
            None | Some("max") => Ok(Greedify::Max),
            Some("softmax") => {
                let tau = self.tau.ok_or_else(|| {
                    Error::Config("objective: softmax greedification needs \"tau\"".to_string())
                })?;
                Ok(Greedify::Softmax { tau })
            }
            Some(other) => Err(Error::Config(format!(
                "objective: unknown greedify \"{other}\""
            ))),
        }
    }
}

/// Solver configuration:
/// `{"mode": "exact"|"gradient", "T": .., "K": .., "alpha": .., "theta0": [..], ..}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolverDoc {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(rename = "T", default = "default_outer")]
    pub outer_steps: usize,
    #[serde(rename = "K", default = "default_inner")]
    pub inner_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_guard")]
    pub divergence_guard: f64,
    #[serde(default = "default_step_tol")]
    pub step_tol: f64,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    /// Starting iterate; defaults to the all-ones vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
}

fn default_mode() -> String {
    "exact".to_string()
}
fn default_outer() -> usize {
    1000
}
fn default_inner() -> usize {
    1
}
fn default_inner_tol() -> f64 {
    1e-12
}
fn default_guard() -> f64 {
    1e12
}
fn default_step_tol() -> f64 {
    1e-10
}
fn default_grad_tol() -> f64 {
    1e-10
}

impl Default for SolverDoc {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            outer_steps: default_outer(),
            inner_steps: default_inner(),
            alpha: None,
            inner_tol: default_inner_tol(),
            divergence_guard: default_guard(),
            step_tol: default_step_tol(),
            grad_tol: default_grad_tol(),
            theta0: None,
        }
    }
}

impl SolverDoc {
    pub fn to_config(&self) -> Result<SolverConfig> {
        if self.mode != "exact" && self.mode != "gradient" {
            return Err(Error::Config(format!(
                "solver: mode must be \"exact\" or \"gradient\", got \"{}\"",
                self.mode
            )));
        }
        let cfg = SolverConfig {
            outer_steps: self.outer_steps,
            inner_steps: self.inner_steps,
            alpha: self.alpha,
            inner_tol: self.inner_tol,
            divergence_guard: self.divergence_guard,
            step_tol: self.step_tol,
            grad_tol: self.grad_tol,
        };
        cfg.validate()
            .map_err(|e| Error::Config(format!("solver: {e}")))?;
        Ok(cfg)
    }
}

/// Sweep axes. Present axes form the grid; absent axes take the base
/// problem's value. Epsilon/gamma/d1 axes require the builtin counterexample.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct SweepDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<Vec<f64>>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<Vec<usize>>,
}

impl SweepDoc {
    pub fn is_empty(&self) -> bool {
        self.epsilon.as_ref().is_none_or(Vec::is_empty)
            && self.gamma.as_ref().is_none_or(Vec::is_empty)
            && self.d1.as_ref().is_none_or(Vec::is_empty)
            && self.inner_steps.as_ref().is_none_or(Vec::is_empty)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_round_trip() {
        let text = r#"{
            "problem": {"builtin": "counterexample", "epsilon": 0.1, "gamma": 0.5, "d1": 0.5},
            "solver": {"mode": "exact", "T": 100, "K": 1},
            "seed": 7
        }"#;
        let doc = ExperimentDoc::from_json(text).unwrap();
        assert_eq!(doc.seed, 7);
        let echoed = doc.to_json();
        let again = ExperimentDoc::from_json(&echoed).unwrap();
        assert_eq!(doc, again);
    }

    #[test]
    fn missing_gamma_is_named() {
        let text = r#"{"problem": {"builtin": "counterexample", "epsilon": 0.1}}"#;
        let doc = ExperimentDoc::from_json(text).unwrap();
        let err = doc.problem.counterexample_params().unwrap_err();
        assert!(
            err.to_string().contains("gamma"),
            "error should name gamma: {err}"
        );
    }

    #[test]
    fn inline_problem_builds() {
        let text = r#"{
            "problem": {
                "n": 2,
                "P": [[0.5, 0.5], [0.5, 0.5]],
                "R": [1.0, 0.0],
                "gamma": 0.9,
                "terminal": [false, false],
                "Phi": [[1.0], [2.0]],
                "d": [0.5, 0.5]
            }
        }"#;
        let doc = ExperimentDoc::from_json(text).unwrap();
        let (mrp, phi, d) = doc.problem.build_prediction().unwrap();
        assert_eq!(mrp.n(), 2);
        assert_eq!(phi.n_features(), 1);
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn two_problem_sources_rejected() {
        let text = r#"{
            "problem": {"builtin": "counterexample", "epsilon": 0.1, "gamma": 0.5, "n": 2}
        }"#;
        assert!(ExperimentDoc::from_json(text).is_err());
    }

    #[test]
    fn no_problem_source_rejected() {
        let text = r#"{"problem": {}}"#;
        assert!(ExperimentDoc::from_json(text).is_err());
    }

    #[test]
    fn unknown_builtin_rejected() {
        let text = r#"{"problem": {"builtin": "mystery", "epsilon": 0.1, "gamma": 0.5}}"#;
        let doc = ExperimentDoc::from_json(text).unwrap();
        assert!(doc.problem.counterexample_params().is_err());
    }

    #[test]
    fn softmax_requires_tau() {
        let doc = ObjectiveDoc {
            greedify: Some("softmax".to_string()),
            ..Default::default()
        };
        assert!(doc.greedify().is_err());
        let doc = ObjectiveDoc {
            greedify: Some("softmax".to_string()),
            tau: Some(0.5),
            ..Default::default()
        };
        assert_eq!(doc.greedify().unwrap(), Greedify::Softmax { tau: 0.5 });
    }
}
