//! The six commands: shared context loading, pipeline execution, and
//! structured emission.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctrans::control::{full_report, ControllabilityMethod};
use ctrans::cost::{DualityExponents, OptimalControl, PointSolver, SolverOptions};
use ctrans::dynamic::{
    default_battery, dynamic_action, plan_to_ensemble, verify_equivalence, PathEnsemble,
};
use ctrans::linsys::{build_flow, FlowMap};
use ctrans::transport::{cost_matrix, solve_plan, solve_plan_sinkhorn, TransportPlan};

use crate::config::{OutputFormat, RunConfig};
use crate::emit::{fmt_f64, write_atomic, Json};
use crate::measures::read_measure;
use crate::sysfile::{parse_system, SystemDescription};
use crate::CliError;

/// Plan method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlanMethod {
    Simplex,
    Sinkhorn,
}

/// System + flow shared by every command.
pub struct Context {
    pub cfg: RunConfig,
    pub sys: SystemDescription,
    pub flow: FlowMap,
}

pub fn load_context(cfg: RunConfig) -> Result<Context, CliError> {
    let sys = parse_system(cfg.system_path()?)?;
    let flow = build_flow(&sys.m, cfg.grid_steps, cfg.flow_tol)?;
    Ok(Context { cfg, sys, flow })
}

impl Context {
    fn meta(&self, command: &str, with_p: bool) -> Json {
        let mut fields = vec![
            ("command", Json::str(command)),
            (
                "system",
                Json::str(self.cfg.system_path().map_or_else(
                    |_| String::new(),
                    |p| p.display().to_string(),
                )),
            ),
            ("gridSteps", Json::int(self.cfg.grid_steps)),
            ("seed", Json::Int(self.cfg.seed as i64)),
            (
                "tolerances",
                Json::Obj(vec![
                    ("flowTol", Json::num(self.cfg.flow_tol)),
                    ("solveTol", Json::num(self.cfg.solve_tol)),
                    ("residTol", Json::num(self.cfg.resid_tol)),
                    ("rankTol", Json::num(self.cfg.rank_tol)),
                ]),
            ),
        ];
        if with_p {
            fields.insert(2, ("p", Json::num(self.cfg.p)));
        }
        Json::Obj(fields)
    }

    fn exponents(&self) -> Result<DualityExponents, CliError> {
        DualityExponents::new(self.cfg.p).map_err(CliError::from)
    }

    fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            solve_tol: self.cfg.solve_tol,
            ..SolverOptions::default()
        }
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn write_output(&self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.out_path(name);
        write_atomic(&path, content)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn point_cost(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<OptimalControl, CliError> {
        let solver = PointSolver::new(&self.flow, &self.sys.n)?;
        let opts = self.solver_options();
        let solved = if self.cfg.p == 2.0 {
            solver.solve_p2(x, y, &opts)?
        } else {
            solver.solve(x, y, self.exponents()?, &opts)?
        };
        Ok(solved)
    }
}

/// `flow`: build the state-transition flow, report diagnostics, and
/// optionally evaluate Φ(s,t) at one query pair.
pub fn cmd_flow(ctx: &Context, s: Option<f64>, t: Option<f64>) -> Result<(), CliError> {
    let flow = &ctx.flow;
    let mut composition: f64 = 0.0;
    for k in 0..=flow.steps() {
        let residual = (flow.backward_at(k) * flow.forward_at(k) - flow.end()).norm();
        composition = composition.max(residual);
    }

    let mut fields = vec![
        ("meta", ctx.meta("flow", false)),
        ("d", Json::int(flow.dim())),
        ("horizon", Json::num(ctx.sys.horizon)),
        ("end", Json::from_matrix(flow.end())),
        ("compositionResidual", Json::num(composition)),
        ("flowTol", Json::num(ctx.cfg.flow_tol)),
        ("driftNormBound", Json::num(flow.op_norm_bound_m1())),
        ("supFlowNorm", Json::num(flow.sup_flow_norm(40)?)),
    ];
    if let (Some(s), Some(t)) = (s, t) {
        fields.push((
            "phi",
            Json::Obj(vec![
                ("s", Json::num(s)),
                ("t", Json::num(t)),
                ("matrix", Json::from_matrix(&flow.flow_at(s, t)?)),
            ]),
        ));
    }
    ctx.write_output("flow.json", &Json::Obj(fields).render())
}

/// `controllability`: generalized rank condition plus Gramian certificate.
pub fn cmd_controllability(ctx: &Context) -> Result<(), CliError> {
    let report = full_report(&ctx.sys.m, &ctx.sys.n, &ctx.flow, ctx.cfg.rank_tol)?;
    let gramian = report
        .gramian
        .as_ref()
        .expect("full report always carries the Gramian");
    let mut spectrum: Vec<f64> = gramian
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    spectrum.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));

    let json = Json::Obj(vec![
        ("meta", ctx.meta("controllability", false)),
        ("d", Json::int(ctx.sys.d)),
        ("n", Json::int(ctx.sys.n_inputs)),
        ("beta", Json::int(report.beta)),
        (
            "blocks",
            Json::Arr(report.blocks.iter().map(Json::from_matrix).collect()),
        ),
        ("singularValues", Json::from_slice(&report.singular_values)),
        ("numericalRank", Json::int(report.numerical_rank)),
        ("rankTol", Json::num(report.rank_tol)),
        ("gramian", Json::from_matrix(gramian)),
        ("gramianSpectrum", Json::from_slice(&spectrum)),
        (
            "gramianMinEig",
            report.gramian_min_eig.map_or(Json::Null, Json::num),
        ),
        (
            "gramianTol",
            report.gramian_tol.map_or(Json::Null, Json::num),
        ),
        ("controllable", Json::Bool(report.controllable)),
        (
            "method",
            Json::str(match report.method {
                ControllabilityMethod::Rank => "rank",
                ControllabilityMethod::Gramian => "gramian",
                ControllabilityMethod::Both => "both",
            }),
        ),
    ]);
    ctx.write_output("controllability.json", &json.render())
}

/// `cost`: point-to-point optimal cost with optional control-sample CSV.
pub fn cmd_cost(ctx: &Context, x: &str, y: &str, controls: bool) -> Result<(), CliError> {
    let x = parse_vector(x, ctx.sys.d, "--x")?;
    let y = parse_vector(y, ctx.sys.d, "--y")?;
    let solved = ctx.point_cost(&x, &y)?;

    let mut fields = vec![
        ("meta", ctx.meta("cost", true)),
        ("x", Json::from_vector(&x)),
        ("y", Json::from_vector(&y)),
        ("cost", Json::num(solved.cost)),
        ("xi", Json::from_vector(&solved.xi)),
        ("residual", Json::num(solved.endpoint_residual)),
        ("iterations", Json::int(solved.solver_iterations)),
    ];
    if controls {
        let name = "cost_controls.csv";
        let mut csv = String::from("t");
        for i in 0..ctx.sys.n_inputs {
            csv.push_str(&format!(",a{}", i + 1));
        }
        csv.push('\n');
        for (time, alpha) in ctx.flow.grid().iter().zip(&solved.alpha_samples) {
            csv.push_str(&fmt_f64(*time));
            for v in alpha.iter() {
                csv.push(',');
                csv.push_str(&fmt_f64(*v));
            }
            csv.push('\n');
        }
        ctx.write_output(name, &csv)?;
        fields.push(("controlsCsv", Json::str(name)));
    }
    ctx.write_output("cost.json", &Json::Obj(fields).render())
}

fn plan_entries_json(plan: &TransportPlan) -> Json {
    Json::Arr(
        plan.entries
            .iter()
            .map(|e| {
                Json::Obj(vec![
                    ("i", Json::int(e.i)),
                    ("j", Json::int(e.j)),
                    ("mass", Json::num(e.mass)),
                ])
            })
            .collect(),
    )
}

fn plan_csv(plan: &TransportPlan) -> String {
    let mut out = String::from("i,j,mass\n");
    for e in &plan.entries {
        out.push_str(&format!("{},{},{}\n", e.i, e.j, fmt_f64(e.mass)));
    }
    out
}

/// `plan`: static optimal transport between two measure files.
pub fn cmd_plan(
    ctx: &Context,
    mu_path: &Path,
    nu_path: &Path,
    method: PlanMethod,
    eps: Option<f64>,
    marginal_tol: f64,
    max_sweeps: usize,
) -> Result<(), CliError> {
    match (method, eps) {
        (PlanMethod::Sinkhorn, None) => {
            return Err(CliError::usage("--eps is required with --method sinkhorn".into()))
        }
        (PlanMethod::Simplex, Some(_)) => {
            return Err(CliError::usage("--eps only applies to --method sinkhorn".into()))
        }
        _ => {}
    }
    let mu = read_measure(mu_path, Some(ctx.sys.d))?;
    let nu = read_measure(nu_path, Some(ctx.sys.d))?;
    let exps = ctx.exponents()?;
    let opts = ctx.solver_options();
    let costs = cost_matrix(&ctx.flow, &ctx.sys.n, &mu, &nu, exps, &opts)?;
    let plan = match method {
        PlanMethod::Simplex => solve_plan(&costs, &mu, &nu)?,
        PlanMethod::Sinkhorn => solve_plan_sinkhorn(
            &costs,
            &mu,
            &nu,
            eps.expect("checked above"),
            marginal_tol,
            max_sweeps,
        )?,
    };

    let mut fields = vec![
        ("meta", ctx.meta("plan", true)),
        (
            "method",
            Json::str(match method {
                PlanMethod::Simplex => "simplex",
                PlanMethod::Sinkhorn => "sinkhorn",
            }),
        ),
        ("cost", Json::num(plan.cost)),
        ("iterations", Json::int(plan.iterations)),
        ("sourceAtoms", Json::int(mu.len())),
        ("targetAtoms", Json::int(nu.len())),
        ("marginalError", Json::num(plan.max_marginal_error(&mu, &nu))),
    ];
    if method == PlanMethod::Simplex {
        fields.push((
            "certificate",
            Json::Obj(vec![
                ("dualObjective", Json::num(plan.dual_objective(&mu, &nu))),
                ("maxDualViolation", Json::num(plan.max_dual_violation(&costs))),
                ("maxBasicSlack", Json::num(plan.max_basic_slack(&costs))),
            ]),
        ));
    }
    match ctx.cfg.format {
        OutputFormat::Csv => {
            ctx.write_output("plan.csv", &plan_csv(&plan))?;
            fields.push(("entriesCsv", Json::str("plan.csv")));
        }
        OutputFormat::Json => fields.push(("entries", plan_entries_json(&plan))),
    }
    ctx.write_output("plan.json", &Json::Obj(fields).render())
}

fn trajectory_csv(ensemble: &PathEnsemble) -> String {
    let mut out = String::from("path_id,weight,t");
    for i in 0..ensemble.dim() {
        out.push_str(&format!(",x{}", i + 1));
    }
    for i in 0..ensemble.n_inputs() {
        out.push_str(&format!(",a{}", i + 1));
    }
    out.push('\n');
    for (id, path) in ensemble.paths().iter().enumerate() {
        for (k, time) in ensemble.grid().iter().enumerate() {
            out.push_str(&format!("{id},{},{}", fmt_f64(path.weight), fmt_f64(*time)));
            for v in path.trajectory[k].iter() {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            for v in path.controls[k].iter() {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
    }
    out
}

fn coincidences_json(events: &[ctrans::dynamic::CoincidenceEvent]) -> Json {
    Json::Arr(
        events
            .iter()
            .map(|e| {
                Json::Obj(vec![
                    ("time", Json::num(e.time)),
                    ("timeIndex", Json::int(e.time_index)),
                    ("pathA", Json::int(e.path_a)),
                    ("pathB", Json::int(e.path_b)),
                ])
            })
            .collect(),
    )
}

/// `paths`: realize the optimal plan as a path ensemble and export it.
pub fn cmd_paths(ctx: &Context, mu_path: &Path, nu_path: &Path) -> Result<(), CliError> {
    let mu = read_measure(mu_path, Some(ctx.sys.d))?;
    let nu = read_measure(nu_path, Some(ctx.sys.d))?;
    let exps = ctx.exponents()?;
    let opts = ctx.solver_options();
    let costs = cost_matrix(&ctx.flow, &ctx.sys.n, &mu, &nu, exps, &opts)?;
    let plan = solve_plan(&costs, &mu, &nu)?;
    let ensemble = plan_to_ensemble(&plan, &mu, &nu, &ctx.flow, &ctx.sys.n, exps, &opts)?;
    let action = dynamic_action(&ensemble, exps)?;
    let step_residual = ensemble.max_step_residual(&ctx.flow, &ctx.sys.n)?;

    ctx.write_output("paths.csv", &trajectory_csv(&ensemble))?;
    let json = Json::Obj(vec![
        ("meta", ctx.meta("paths", true)),
        ("pathCount", Json::int(ensemble.paths().len())),
        ("planCost", Json::num(plan.cost)),
        ("pathAction", Json::num(action.path_action)),
        (
            "fieldAction",
            action.field_action.map_or(Json::Null, Json::num),
        ),
        ("coincidences", coincidences_json(&action.coincidences)),
        ("stepResidual", Json::num(step_residual)),
        ("trajectoriesCsv", Json::str("paths.csv")),
    ]);
    ctx.write_output("paths.json", &json.render())
}

/// `bb-verify`: end-to-end static/dynamic equivalence check.
pub fn cmd_bb_verify(
    ctx: &Context,
    mu_path: &Path,
    nu_path: &Path,
    perturbations: usize,
    trajectories: bool,
) -> Result<(), CliError> {
    let mu = read_measure(mu_path, Some(ctx.sys.d))?;
    let nu = read_measure(nu_path, Some(ctx.sys.d))?;
    let exps = ctx.exponents()?;
    let opts = ctx.solver_options();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let report = verify_equivalence(
        &ctx.flow,
        &ctx.sys.n,
        &mu,
        &nu,
        exps,
        &opts,
        perturbations,
        &mut rng,
    )?;

    // The residual verdict honours the configured tolerance; labels are
    // regenerated (they depend only on the dimension, not the data radius).
    let labels: Vec<String> = default_battery(ctx.sys.d, ctx.flow.horizon(), 1.0)
        .iter()
        .map(|tf| tf.label.clone())
        .collect();
    let residuals_ok = report
        .residuals
        .iter()
        .zip(&report.residual_norms)
        .all(|(r, norm)| r.abs() <= ctx.cfg.resid_tol * norm);
    let residuals = Json::Arr(
        report
            .residuals
            .iter()
            .zip(&report.residual_norms)
            .enumerate()
            .map(|(i, (r, norm))| {
                Json::Obj(vec![
                    (
                        "label",
                        Json::str(labels.get(i).cloned().unwrap_or_default()),
                    ),
                    ("residual", Json::num(*r)),
                    ("c1Norm", Json::num(*norm)),
                    ("ok", Json::Bool(r.abs() <= ctx.cfg.resid_tol * norm)),
                ])
            })
            .collect(),
    );
    let perturbation_list = Json::Arr(
        report
            .perturbations
            .iter()
            .map(|s| {
                Json::Obj(vec![
                    ("pathIndex", Json::int(s.path_index)),
                    ("amplitude", Json::num(s.amplitude)),
                    ("endpointShift", Json::num(s.endpoint_shift)),
                    ("action", Json::num(s.action)),
                ])
            })
            .collect(),
    );

    let mut fields = vec![
        ("meta", ctx.meta("bb-verify", true)),
        ("staticCost", Json::num(report.static_cost)),
        ("dynamicAction", Json::num(report.dynamic_action)),
        ("gap", Json::num(report.gap)),
        ("gapTol", Json::num(report.gap_tol)),
        ("equivalent", Json::Bool(report.equivalent)),
        ("residuals", residuals),
        ("residualTol", Json::num(ctx.cfg.resid_tol)),
        ("residualsOk", Json::Bool(residuals_ok)),
        (
            "coincidences",
            coincidences_json(&report.coincidences),
        ),
        (
            "fieldAction",
            report.field_action.map_or(Json::Null, Json::num),
        ),
        ("perturbations", perturbation_list),
        ("perturbationsOk", Json::Bool(report.perturbations_ok)),
        (
            "moment",
            Json::Obj(vec![
                ("supMoment", Json::num(report.moment.sup_moment)),
                ("constant", Json::num(report.moment.constant)),
                ("muMoment", Json::num(report.moment.mu_moment)),
                ("nuMoment", Json::num(report.moment.nu_moment)),
                ("bound", Json::num(report.moment.bound)),
                ("ok", Json::Bool(report.moment.ok)),
            ]),
        ),
        (
            "plan",
            Json::Obj(vec![
                ("cost", Json::num(report.plan.cost)),
                ("iterations", Json::int(report.plan.iterations)),
                ("entries", plan_entries_json(&report.plan)),
            ]),
        ),
        ("costMatrix", Json::from_matrix(&report.costs)),
        ("pathActions", Json::from_slice(&report.path_actions)),
    ];
    if trajectories {
        let name = "bb_verify_paths.csv";
        ctx.write_output(name, &trajectory_csv(&report.ensemble))?;
        fields.push(("trajectoriesCsv", Json::str(name)));
    }
    ctx.write_output("bb_verify.json", &Json::Obj(fields).render())
}

fn parse_vector(text: &str, d: usize, flag: &str) -> Result<DVector<f64>, CliError> {
    let values: Vec<f64> = text
        .split(',')
        .map(|tok| {
            tok.trim().parse::<f64>().map_err(|_| {
                CliError::usage(format!("{flag}: '{tok}' is not a number"))
            })
        })
        .collect::<Result<_, _>>()?;
    if values.len() != d {
        return Err(CliError::usage(format!(
            "{flag} has {} coordinates, the system dimension is {d}",
            values.len()
        )));
    }
    Ok(DVector::from_row_slice(&values))
}
