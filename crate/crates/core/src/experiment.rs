//! Batch experiment driver: builds objectives from documents, runs solves and
//! sweeps, and renders plot-ready CSV plus JSON with the full config echoed
//! for reproducibility.
//!
//! Divergence is a successful experimental outcome here, reported in the
//! result rather than as an error.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{verify_contraction, ContractionReport, SafeDistributionResult};
use crate::config::{ExperimentDoc, ProblemKind, SweepDoc};
use crate::linear::LinearTdSystem;
use crate::objective::{
    control_quadratic, estimate_constants, huber_linear, logistic_linear, quadratic_linear,
    ridge_regularized, ForceConstants, ForceEstimate, Objective, ProbeBox,
};
use crate::solver::{solve_exact, solve_gradient, SolverConfig, Trajectory};
use crate::{Error, Result};

/// An objective assembled from a document, with the linear system and fixed
/// point attached when the problem admits them.
pub struct BuiltObjective {
    pub objective: Box<dyn Objective>,
    pub theta_star: Option<DVector<f64>>,
    pub system: Option<LinearTdSystem>,
    /// Largest eigenvalue modulus of Mtheta, recorded alongside the operator
    /// norm used as F_theta (quadratic problems only).
    pub mtheta_spectral_radius: Option<f64>,
}

/// Builds the configured objective. For the quadratic loss the fixed point
/// and iteration matrix come along; ridge regularization wraps any of the
/// prediction losses.
pub fn build_objective(doc: &ExperimentDoc) -> Result<BuiltObjective> {
    let obj_doc = &doc.objective;
    if obj_doc.loss == "control" {
        let control =
            doc.problem.control.as_ref().ok_or_else(|| {
                Error::Config("loss \"control\" needs a control problem".to_string())
            })?;
        let problem = control.build(obj_doc.greedify()?)?;
        let objective = control_quadratic(problem)?;
        return finish(doc, Box::new(objective), None, None, None);
    }
    if doc.problem.kind()? == ProblemKind::Control {
        return Err(Error::Config(
            "control problems require loss = \"control\"".to_string(),
        ));
    }

    let (mrp, phi, d) = doc.problem.build_prediction()?;
    match obj_doc.loss.as_str() {
        "quadratic" => {
            let quadratic = quadratic_linear(&mrp, &phi, &d)?;
            let system = quadratic.system().clone();
            let theta_star = system.theta_star().clone();
            let rho_mtheta = quadratic.mtheta_spectral_radius();
            finish(
                doc,
                Box::new(quadratic),
                Some(theta_star),
                Some(system),
                Some(rho_mtheta),
            )
        }
        "huber" => {
            let delta = obj_doc.delta.ok_or_else(|| {
                Error::Config("objective: huber loss needs \"delta\"".to_string())
            })?;
            finish(
                doc,
                Box::new(huber_linear(&mrp, &phi, &d, delta)?),
                None,
                None,
                None,
            )
        }
        "logcosh" => {
            let scale = obj_doc.scale.ok_or_else(|| {
                Error::Config("objective: logcosh loss needs \"scale\"".to_string())
            })?;
            finish(
                doc,
                Box::new(logistic_linear(&mrp, &phi, &d, scale)?),
                None,
                None,
                None,
            )
        }
        other => Err(Error::Config(format!(
            "objective: unknown loss \"{other}\""
        ))),
    }
}

fn finish(
    doc: &ExperimentDoc,
    objective: Box<dyn Objective>,
    theta_star: Option<DVector<f64>>,
    system: Option<LinearTdSystem>,
    mtheta_spectral_radius: Option<f64>,
) -> Result<BuiltObjective> {
    let (objective, theta_star) = match doc.objective.ridge {
        None => (objective, theta_star),
        Some(lambda) => {
            // Ridge moves the fixed point; drop the unregularized one.
            let ridged = ridge_regularized(objective, lambda)
                .map_err(|e| Error::Config(format!("objective: {e}")))?;
            (Box::new(ridged) as Box<dyn Objective>, None)
        }
    };
    Ok(BuiltObjective {
        objective,
        theta_star,
        system,
        mtheta_spectral_radius,
    })
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

/// Result of a single configured solve.
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub contraction: Option<ContractionReport>,
    pub rho: Option<f64>,
    /// Plot-ready trajectory table.
    pub csv: String,
    /// Trajectory plus contraction report with the config echoed.
    pub json: String,
}

#[derive(Serialize)]
struct RunDoc<'a> {
    config: &'a ExperimentDoc,
    mode: &'a str,
    diverged: bool,
    converged: bool,
    rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_used: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_is_one_over_l: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    contraction: Option<ContractionDoc>,
    thetas: Vec<Vec<f64>>,
    distances: Option<Vec<f64>>,
    ratios: Vec<Option<f64>>,
    grad_residuals: Vec<f64>,
}

#[derive(Serialize)]
struct ContractionDoc {
    predicted_sigma: f64,
    max_observed_ratio: f64,
    bound_satisfied: bool,
    margin: f64,
    certified: bool,
}

impl From<&ContractionReport> for ContractionDoc {
    fn from(r: &ContractionReport) -> Self {
        Self {
            predicted_sigma: r.predicted_sigma,
            max_observed_ratio: r.max_observed_ratio,
            bound_satisfied: r.bound_satisfied,
            margin: r.margin,
            certified: r.certified,
        }
    }
}

fn initial_theta(doc: &ExperimentDoc, dim: usize) -> Result<DVector<f64>> {
    match &doc.solver.theta0 {
        None => Ok(DVector::from_element(dim, 1.0)),
        Some(v) => {
            if v.len() != dim {
                return Err(Error::Config(format!(
                    "solver: theta0 has length {}, objective dimension is {dim}",
                    v.len()
                )));
            }
            Ok(DVector::from_vec(v.clone()))
        }
    }
}

fn run_solver(
    built: &BuiltObjective,
    cfg: &SolverConfig,
    mode: &str,
    theta0: &DVector<f64>,
) -> Result<Trajectory> {
    let star = built.theta_star.as_ref();
    match mode {
        "exact" => solve_exact(built.objective.as_ref(), theta0, cfg, star),
        "gradient" => solve_gradient(built.objective.as_ref(), theta0, cfg, star),
        other => Err(Error::Config(format!("solver: unknown mode \"{other}\""))),
    }
}

/// Executes the configured solve and renders the trajectory as CSV and JSON.
pub fn run(doc: &ExperimentDoc) -> Result<RunOutput> {
    let built = build_objective(doc)?;
    let cfg = doc.solver.to_config()?;
    let theta0 = initial_theta(doc, built.objective.dim())?;
    let trajectory = run_solver(&built, &cfg, &doc.solver.mode, &theta0)?;

    let contraction = match built.objective.analytic_constants() {
        Some(constants) if trajectory.distances.is_some() => {
            let inner = match doc.solver.mode.as_str() {
                "gradient" => Some(cfg.inner_steps as u32),
                _ => None,
            };
            Some(verify_contraction(&trajectory, &constants, inner)?)
        }
        _ => None,
    };
    let rho = match &built.system {
        Some(sys) => Some(sys.predict_convergence()?.rho),
        None => None,
    };

    let csv = trajectory_csv(&trajectory);
    let json_doc = RunDoc {
        config: doc,
        mode: &doc.solver.mode,
        diverged: trajectory.diverged,
        converged: trajectory.converged,
        rho,
        alpha_used: trajectory.alpha_used,
        alpha_is_one_over_l: trajectory.alpha_is_one_over_l,
        contraction: contraction.as_ref().map(ContractionDoc::from),
        thetas: trajectory
            .thetas
            .iter()
            .map(|t| t.iter().cloned().collect())
            .collect(),
        distances: trajectory.distances.clone(),
        ratios: (0..trajectory.len().saturating_sub(1))
            .map(|t| trajectory.ratio_at(t))
            .collect(),
        grad_residuals: trajectory.grad_residuals.clone(),
    };
    let json = serde_json::to_string_pretty(&json_doc).expect("run docs always serialize");
    Ok(RunOutput {
        trajectory,
        contraction,
        rho,
        csv,
        json,
    })
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// Trajectory CSV: `t, theta components, distance, ratio, grad_residual`,
/// with empty cells where a quantity is undefined.
pub fn trajectory_csv(trajectory: &Trajectory) -> String {
    let dim = trajectory.thetas.first().map(|t| t.len()).unwrap_or(0);
    let mut out = String::from("t");
    for j in 0..dim {
        out.push_str(&format!(",theta_{j}"));
    }
    out.push_str(",distance,ratio,grad_residual\n");
    for (t, theta) in trajectory.thetas.iter().enumerate() {
        out.push_str(&t.to_string());
        for x in theta.iter() {
            out.push(',');
            out.push_str(&fmt(*x));
        }
        out.push(',');
        if let Some(d) = &trajectory.distances {
            out.push_str(&fmt(d[t]));
        }
        out.push(',');
        if t > 0 {
            if let Some(r) = trajectory.ratio_at(t - 1) {
                out.push_str(&fmt(r));
            }
        }
        out.push(',');
        out.push_str(&fmt(trajectory.grad_residuals[t]));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// One sweep cell: the grid coordinates, the spectral-radius prediction, and
/// the observed behavior of the configured solver.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub gamma: f64,
    pub d1: f64,
    #[serde(rename = "K")]
    pub inner_steps: usize,
    pub rho: f64,
    pub converged: bool,
    pub predicted: &'static str,
    pub observed: &'static str,
    pub max_ratio: Option<f64>,
}

pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub csv: String,
    pub json: String,
}

#[derive(Serialize)]
struct SweepJsonDoc<'a> {
    config: &'a ExperimentDoc,
    rows: &'a [SweepRow],
}

fn sweep_grid(doc: &ExperimentDoc, sweep: &SweepDoc) -> Result<Vec<(f64, f64, f64, usize)>> {
    let base = doc.problem.counterexample_params()?;
    let epsilons = sweep.epsilon.clone().unwrap_or_else(|| vec![base.epsilon]);
    let gammas = sweep.gamma.clone().unwrap_or_else(|| vec![base.gamma]);
    let d1s = sweep.d1.clone().unwrap_or_else(|| vec![base.d1]);
    let ks = sweep
        .inner_steps
        .clone()
        .unwrap_or_else(|| vec![doc.solver.inner_steps]);
    let mut grid = Vec::with_capacity(epsilons.len() * gammas.len() * d1s.len() * ks.len());
    for &epsilon in &epsilons {
        for &gamma in &gammas {
            for &d1 in &d1s {
                for &k in &ks {
                    grid.push((epsilon, gamma, d1, k));
                }
            }
        }
    }
    Ok(grid)
}

fn sweep_cell(doc: &ExperimentDoc, cell: (f64, f64, f64, usize)) -> Result<SweepRow> {
    let (epsilon, gamma, d1, k) = cell;
    let mut cell_doc = doc.clone();
    cell_doc.problem.epsilon = Some(epsilon);
    cell_doc.problem.gamma = Some(gamma);
    cell_doc.problem.d1 = Some(d1);
    cell_doc.solver.inner_steps = k;
    cell_doc.sweep = None;

    let built = build_objective(&cell_doc)?;
    let cfg = cell_doc.solver.to_config()?;
    let theta0 = initial_theta(&cell_doc, built.objective.dim())?;
    let trajectory = run_solver(&built, &cfg, &cell_doc.solver.mode, &theta0)?;

    let rho = built
        .system
        .as_ref()
        .ok_or_else(|| Error::Config("sweep requires the quadratic loss".to_string()))?
        .predict_convergence()?
        .rho;
    let observed = if trajectory.diverged {
        "diverge"
    } else if trajectory.converged {
        "converge"
    } else {
        "indeterminate"
    };
    let ratios = trajectory.ratios();
    Ok(SweepRow {
        epsilon,
        gamma,
        d1,
        inner_steps: k,
        rho,
        converged: trajectory.converged,
        predicted: if rho < 1.0 { "converge" } else { "diverge" },
        observed,
        max_ratio: ratios.into_iter().fold(None, |acc: Option<f64>, r| {
            Some(acc.map_or(r, |a| a.max(r)))
        }),
    })
}

/// Runs the sweep grid, optionally on a bounded worker pool. Rows come back
/// in deterministic grid order regardless of worker count.
pub fn sweep(doc: &ExperimentDoc, workers: Option<usize>) -> Result<SweepOutput> {
    let sweep_doc = doc
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep: no sweep axes configured".to_string()))?;
    if sweep_doc.is_empty() {
        return Err(Error::Config(
            "sweep: sweep axes must be nonempty".to_string(),
        ));
    }
    let grid = sweep_grid(doc, sweep_doc)?;

    let compute = || -> Result<Vec<SweepRow>> {
        grid.par_iter().map(|&cell| sweep_cell(doc, cell)).collect()
    };
    let rows = match workers {
        None => compute()?,
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Internal(format!("worker pool: {e}")))?
            .install(compute)?,
    };

    let mut csv = String::from("epsilon,gamma,d1,K,rho,converged,predicted,observed,max_ratio\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            fmt(row.epsilon),
            fmt(row.gamma),
            fmt(row.d1),
            row.inner_steps,
            fmt(row.rho),
            row.converged,
            row.predicted,
            row.observed,
            row.max_ratio.map(fmt).unwrap_or_default(),
        ));
    }
    let json = serde_json::to_string_pretty(&SweepJsonDoc {
        config: doc,
        rows: &rows,
    })
    .expect("sweep docs always serialize");
    Ok(SweepOutput { rows, csv, json })
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

/// Force constants and the contraction-theorem hypothesis for the configured
/// objective.
pub struct CheckOutput {
    pub analytic: Option<ForceConstants>,
    pub estimated: ForceEstimate,
    pub mtheta_spectral_radius: Option<f64>,
    pub rho: Option<f64>,
    pub sigma: Vec<(usize, f64)>,
    pub hypothesis_holds: Option<bool>,
    pub json: String,
    pub table: String,
}

#[derive(Serialize)]
struct CheckJsonDoc<'a> {
    config: &'a ExperimentDoc,
    analytic: Option<ConstantsDoc>,
    estimated: ConstantsDoc,
    estimated_note: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    mtheta_spectral_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    sigma: Vec<SigmaDoc>,
    hypothesis_holds: Option<bool>,
}

#[derive(Serialize)]
struct ConstantsDoc {
    f_theta: f64,
    f_w: f64,
    l: f64,
    eta: Option<f64>,
    kappa: Option<f64>,
}

#[derive(Serialize)]
struct SigmaDoc {
    #[serde(rename = "K")]
    inner_steps: usize,
    sigma: f64,
}

/// Computes analytic constants where available, estimates them by sampling
/// either way, and reports eta, kappa, and sigma_K for the configured K
/// values together with the hypothesis check `F_theta < F_w`.
pub fn check(doc: &ExperimentDoc) -> Result<CheckOutput> {
    let built = build_objective(doc)?;
    let analytic = built.objective.analytic_constants();
    let estimated = estimate_constants(
        built.objective.as_ref(),
        ProbeBox::default(),
        1000,
        doc.seed,
    )?;
    let rho = match &built.system {
        Some(sys) => Some(sys.predict_convergence()?.rho),
        None => None,
    };

    let ks: Vec<usize> = doc
        .sweep
        .as_ref()
        .and_then(|s| s.inner_steps.clone())
        .unwrap_or_else(|| vec![doc.solver.inner_steps]);
    let reference = analytic.or_else(|| estimated.to_constants().ok());
    let sigma: Vec<(usize, f64)> = match &reference {
        Some(c) => ks.iter().map(|&k| (k, c.sigma_k(k as u32))).collect(),
        None => Vec::new(),
    };
    let hypothesis_holds = reference.map(|c| c.f_theta < c.f_w);

    let mut table = String::new();
    let push_row = |table: &mut String, label: &str, c: &ConstantsDoc| {
        table.push_str(&format!(
            "{label:<11} F_theta = {:<12.6} F_w = {:<12.6} L = {:<12.6}",
            c.f_theta, c.f_w, c.l
        ));
        if let (Some(eta), Some(kappa)) = (c.eta, c.kappa) {
            table.push_str(&format!(" eta = {eta:<10.6} kappa = {kappa:<10.6}"));
        }
        table.push('\n');
    };
    let analytic_doc = analytic.map(|c| ConstantsDoc {
        f_theta: c.f_theta,
        f_w: c.f_w,
        l: c.l,
        eta: Some(c.eta),
        kappa: Some(c.kappa),
    });
    let estimated_doc = ConstantsDoc {
        f_theta: estimated.f_theta,
        f_w: estimated.f_w,
        l: estimated.l,
        eta: estimated.to_constants().ok().map(|c| c.eta),
        kappa: estimated.to_constants().ok().map(|c| c.kappa),
    };
    if let Some(c) = &analytic_doc {
        push_row(&mut table, "analytic", c);
    }
    push_row(&mut table, "estimated", &estimated_doc);
    table.push_str("estimated values are sampled bounds, not certificates\n");
    if let Some(r) = built.mtheta_spectral_radius {
        table.push_str(&format!(
            "lambda_max |Mtheta| = {r:.6} (operator norm above is the Lipschitz constant)\n"
        ));
    }
    if let Some(r) = rho {
        table.push_str(&format!("rho(Mw^-1 Mtheta) = {r:.6}\n"));
    }
    for (k, s) in &sigma {
        table.push_str(&format!("sigma_K (K = {k:>4}) = {s:.6}\n"));
    }
    match hypothesis_holds {
        Some(true) => table.push_str("contraction hypothesis (F_theta < F_w): holds\n"),
        Some(false) => table.push_str("contraction hypothesis (F_theta < F_w): fails\n"),
        None => table.push_str("contraction hypothesis: constants unavailable\n"),
    }

    let json = serde_json::to_string_pretty(&CheckJsonDoc {
        config: doc,
        analytic: analytic_doc,
        estimated: estimated_doc,
        estimated_note: "sampled bounds, not certificates",
        mtheta_spectral_radius: built.mtheta_spectral_radius,
        rho,
        sigma: sigma
            .iter()
            .map(|&(k, s)| SigmaDoc {
                inner_steps: k,
                sigma: s,
            })
            .collect(),
        hypothesis_holds,
    })
    .expect("check docs always serialize");

    Ok(CheckOutput {
        analytic,
        estimated,
        mtheta_spectral_radius: built.mtheta_spectral_radius,
        rho,
        sigma,
        hypothesis_holds,
        json,
        table,
    })
}

// ---------------------------------------------------------------------------
// safedist
// ---------------------------------------------------------------------------

pub struct SafeDistOutput {
    pub result: SafeDistributionResult,
    pub json: String,
    pub table: String,
}

#[derive(Serialize)]
struct SafeDistJsonDoc<'a> {
    config: &'a ExperimentDoc,
    trials: usize,
    best_d: Vec<f64>,
    rho: f64,
    contractive: bool,
    skipped: usize,
}

/// Randomized search for a contractive update distribution on the configured
/// prediction problem.
pub fn safedist(doc: &ExperimentDoc, trials: usize) -> Result<SafeDistOutput> {
    let (mrp, phi, _) = doc.problem.build_prediction()?;
    let result = crate::analysis::safe_distribution_search(&mrp, &phi, trials, doc.seed)?;
    let best_d: Vec<f64> = result.best.weights().iter().cloned().collect();
    let mut table = String::new();
    table.push_str(&format!(
        "best rho = {:.6} ({})\n",
        result.rho,
        if result.contractive {
            "contractive"
        } else {
            "no contractive distribution found"
        }
    ));
    table.push_str(&format!(
        "best d   = [{}]\n",
        best_d
            .iter()
            .map(|x| format!("{x:.6}"))
            .collect::<Vec<_>>()
            .join(", ")
    ));
    if result.skipped > 0 {
        table.push_str(&format!("skipped {} singular candidates\n", result.skipped));
    }
    let json = serde_json::to_string_pretty(&SafeDistJsonDoc {
        config: doc,
        trials,
        best_d,
        rho: result.rho,
        contractive: result.contractive,
        skipped: result.skipped,
    })
    .expect("safedist docs always serialize");
    Ok(SafeDistOutput {
        result,
        json,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn counterexample_doc(gamma: f64, mode: &str) -> ExperimentDoc {
        ExperimentDoc::from_json(&format!(
            r#"{{
                "problem": {{"builtin": "counterexample", "epsilon": 0.1, "gamma": {gamma}, "d1": 0.5}},
                "solver": {{"mode": "{mode}", "T": 2000, "K": 1}},
                "seed": 3
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn run_counterexample_constant_ratio() {
        let out = run(&counterexample_doc(0.5, "exact")).unwrap();
        assert!(out.trajectory.converged);
        for r in out.trajectory.ratios() {
            assert_relative_eq!(r, 0.56, epsilon = 1e-12);
        }
        assert!(out.contraction.unwrap().bound_satisfied);
        assert_relative_eq!(out.rho.unwrap(), 0.56, epsilon = 1e-12);
    }

    #[test]
    fn run_output_is_deterministic() {
        let doc = counterexample_doc(0.8, "gradient");
        let a = run(&doc).unwrap();
        let b = run(&doc).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.json, b.json);
    }

    #[test]
    fn run_json_echoes_config_and_reruns_identically() {
        let doc = counterexample_doc(0.6, "exact");
        let first = run(&doc).unwrap();
        let echoed: serde_json::Value = serde_json::from_str(&first.json).unwrap();
        let config_text = serde_json::to_string(&echoed["config"]).unwrap();
        let doc_again = ExperimentDoc::from_json(&config_text).unwrap();
        let second = run(&doc_again).unwrap();
        assert_eq!(
            first.csv, second.csv,
            "rerun from the echoed config must be bitwise equal"
        );
        assert_eq!(first.json, second.json);
    }

    #[test]
    fn run_started_at_fixed_point_is_single_row() {
        let mut doc = counterexample_doc(0.5, "exact");
        doc.solver.theta0 = Some(vec![0.0]);
        let out = run(&doc).unwrap();
        assert_eq!(out.trajectory.len(), 1);
        assert!(out.trajectory.converged);
        let lines: Vec<&str> = out.csv.lines().collect();
        assert_eq!(lines.len(), 2, "header plus one row: {:?}", lines);
    }

    #[test]
    fn csv_layout_matches_header() {
        let out = run(&counterexample_doc(0.5, "exact")).unwrap();
        let mut lines = out.csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,theta_0,distance,ratio,grad_residual"
        );
        let first = lines.next().unwrap();
        let cells: Vec<&str> = first.split(',').collect();
        assert_eq!(cells.len(), 5);
        assert_eq!(cells[0], "0");
        assert_eq!(cells[3], "", "ratio undefined at t = 0");
    }

    #[test]
    fn sweep_gamma_axis_brackets_threshold() {
        let mut doc = counterexample_doc(0.5, "exact");
        // gamma = 0.90 sits 0.007 above the threshold: the run needs a few
        // thousand steps to clear the divergence guard.
        doc.solver.outer_steps = 8000;
        doc.sweep = Some(SweepDoc {
            gamma: Some(vec![0.88, 0.90]),
            ..Default::default()
        });
        let out = sweep(&doc, Some(2)).unwrap();
        assert_eq!(out.rows.len(), 2);
        // Threshold at epsilon = 0.1 is 5/5.6 = 0.8928...
        assert_eq!(out.rows[0].predicted, "converge");
        assert_eq!(out.rows[1].predicted, "diverge");
        assert_eq!(out.rows[0].observed, "converge");
        assert_eq!(out.rows[1].observed, "diverge");
    }

    #[test]
    fn sweep_singleton_axes_single_row() {
        let mut doc = counterexample_doc(0.5, "exact");
        doc.sweep = Some(SweepDoc {
            epsilon: Some(vec![0.1]),
            ..Default::default()
        });
        let out = sweep(&doc, None).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.csv.lines().count(), 2);
    }

    #[test]
    fn sweep_is_deterministic_across_worker_counts() {
        let mut doc = counterexample_doc(0.5, "exact");
        doc.sweep = Some(SweepDoc {
            epsilon: Some(vec![0.1, 0.3, 0.5]),
            gamma: Some(vec![0.5, 0.7, 0.9]),
            ..Default::default()
        });
        let one = sweep(&doc, Some(1)).unwrap();
        let four = sweep(&doc, Some(4)).unwrap();
        assert_eq!(one.csv, four.csv);
    }

    #[test]
    fn sweep_without_axes_is_rejected() {
        let doc = counterexample_doc(0.5, "exact");
        assert!(sweep(&doc, None).is_err());
        let mut doc2 = counterexample_doc(0.5, "exact");
        doc2.sweep = Some(SweepDoc::default());
        assert!(sweep(&doc2, None).is_err());
    }

    #[test]
    fn check_reports_hypothesis() {
        // gamma = 0.5: eta = 0.56 < 1, hypothesis holds.
        let out = check(&counterexample_doc(0.5, "exact")).unwrap();
        assert_eq!(out.hypothesis_holds, Some(true));
        let c = out.analytic.unwrap();
        assert_relative_eq!(c.eta, 0.56, epsilon = 1e-12);
        assert!(out.table.contains("holds"));

        // gamma = 0.95: eta = 1.064 > 1, hypothesis fails.
        let out = check(&counterexample_doc(0.95, "exact")).unwrap();
        assert_eq!(out.hypothesis_holds, Some(false));
        assert!(out.table.contains("fails"));
    }

    #[test]
    fn check_flags_theta_free_objective() {
        // Regression instance: F_theta = 0, hypothesis trivially holds.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        let (mrp, phi, d) = crate::instances::random_regression_instance(&mut rng, 5, 2);
        let doc = ExperimentDoc {
            problem: crate::config::ProblemDoc {
                n: Some(mrp.n()),
                p: Some(
                    (0..mrp.n())
                        .map(|i| (0..mrp.n()).map(|j| mrp.transition()[(i, j)]).collect())
                        .collect(),
                ),
                r: Some(mrp.reward().iter().cloned().collect()),
                gamma: Some(mrp.gamma()),
                terminal: Some(mrp.terminal().to_vec()),
                phi: Some(
                    (0..mrp.n())
                        .map(|i| {
                            (0..phi.n_features())
                                .map(|j| phi.matrix()[(i, j)])
                                .collect()
                        })
                        .collect(),
                ),
                d: Some(d.weights().iter().cloned().collect()),
                ..Default::default()
            },
            ..ExperimentDoc::from_json(
                r#"{"problem": {"builtin": "counterexample", "epsilon": 0.1, "gamma": 0.5}}"#,
            )
            .unwrap()
        };
        let out = check(&doc).unwrap();
        assert_eq!(out.hypothesis_holds, Some(true));
        assert!(out.analytic.unwrap().eta < 1e-10);
    }

    #[test]
    fn safedist_finds_contractive_distribution() {
        let out = safedist(&counterexample_doc(0.95, "exact"), 100).unwrap();
        assert!(out.result.contractive);
        assert!(out.table.contains("contractive"));
    }

    #[test]
    fn huber_and_logcosh_runs_work() {
        let mut doc = counterexample_doc(0.5, "exact");
        doc.objective.loss = "huber".into();
        doc.objective.delta = Some(1.0);
        let out = run(&doc).unwrap();
        assert!(out.trajectory.converged);
        assert!(out.contraction.is_none(), "no analytic constants for huber");

        let mut doc = counterexample_doc(0.5, "gradient");
        doc.objective.loss = "logcosh".into();
        doc.objective.scale = Some(1.0);
        let out = run(&doc).unwrap();
        assert!(out.trajectory.converged);
    }

    #[test]
    fn ridge_run_works() {
        let mut doc = counterexample_doc(0.5, "exact");
        doc.objective.ridge = Some(0.5);
        let out = run(&doc).unwrap();
        // Ridge on the zero-reward example still has fixed point 0 and the
        // run converges there.
        assert!(out.trajectory.converged);
        assert!(out.trajectory.final_theta().amax() < 1e-6);
    }

    #[test]
    fn unknown_loss_is_a_config_error() {
        let mut doc = counterexample_doc(0.5, "exact");
        doc.objective.loss = "hinge".into();
        assert!(matches!(run(&doc), Err(Error::Config(_))));
    }
}
