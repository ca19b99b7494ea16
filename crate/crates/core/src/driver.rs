//! Run orchestration: builds a problem from a [`ProblemConfig`], executes
//! forward solves or the full optimization loop, and writes every artifact
//! (config echo, VTK states, history CSV, design snapshots, rasters) under
//! the resolved output directory.

use std::path::{Path, PathBuf};

use crate::adjoint::{
    design_gradient, fd_check, fd_report_csv, realize_design, AdjointWorkspace, DesignContext,
    RealizedDesign,
};
use crate::config::{
    BuiltObjective, BuiltProblem, LayoutFields, ProblemConfig, RunMode, TargetSpec,
};
use crate::error::{Error, Result};
use crate::fem::{
    load_stepping_solve_with_retry, DesignFields, FemModel, ForwardSolution, LoadSchedule,
    NewtonSettings,
};
use crate::field::DesignNetwork;
use crate::io::{atomic_write, write_history_csv, write_pgm, write_vtk, CellScalar};
use crate::material::{interpolate, MaterialTable};
use crate::mesh::{shape4, QuadMesh};
use crate::opt::{
    bind_shape_target, blocked_force, force_selector, optimize, IterationRecord, LoadCase,
    Objective, OptProblem, ShapeTarget, StopReason,
};

/// What a completed run produced.
#[derive(Debug)]
pub enum RunOutcome {
    Forward {
        cases: Vec<ForwardCaseReport>,
    },
    Optimize {
        iterations: usize,
        stop: StopReason,
        /// Raw objective at the last iterate.
        objective: f64,
        grayness: f64,
        /// Grayness and volume constraints satisfied at the last iterate.
        feasible: bool,
    },
}

#[derive(Debug)]
pub struct ForwardCaseReport {
    pub name: String,
    /// Newton iterations summed over all load steps.
    pub newton_iterations: usize,
    pub max_displacement_m: f64,
}

#[derive(Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub outcome: RunOutcome,
}

/// The config's output directory, optionally re-rooted (the CLI passes an
/// environment override here).
pub fn resolve_output_dir(config: &ProblemConfig, out_root: Option<&Path>) -> PathBuf {
    match out_root {
        Some(root) => root.join(&config.output.directory),
        None => PathBuf::from(&config.output.directory),
    }
}

/// Runs a validated config end to end. `base_dir` anchors relative paths
/// inside the config (currently only shape-target files); the CLI passes the
/// config file's directory.
///
/// Every run first echoes the fully defaulted config next to its outputs, so
/// an archived output directory documents exactly what produced it.
pub fn run(
    config: &ProblemConfig,
    base_dir: &Path,
    out_root: Option<&Path>,
) -> Result<RunSummary> {
    run_with_progress(config, base_dir, out_root, |_| {})
}

/// Same as [`run`], with a callback invoked on every optimizer iteration
/// (forward mode never calls it). Lets an interactive caller report progress
/// without touching any written artifact.
pub fn run_with_progress(
    config: &ProblemConfig,
    base_dir: &Path,
    out_root: Option<&Path>,
    progress: impl FnMut(&IterationRecord),
) -> Result<RunSummary> {
    let out_dir = resolve_output_dir(config, out_root);
    std::fs::create_dir_all(&out_dir)?;
    atomic_write(&out_dir.join("config_echo.cfg"), &config.to_text())?;
    let built = config.build()?;
    let outcome = match config.mode {
        RunMode::Forward => RunOutcome::Forward {
            cases: run_forward(&built, &out_dir)?,
        },
        RunMode::Optimize => run_optimize(config, built, base_dir, &out_dir, progress)?,
    };
    Ok(RunSummary {
        output_dir: out_dir,
        outcome,
    })
}

/// Effective fields for a fixed one-hot layout (no penalization, `p = 1`).
pub fn layout_fields(
    table: &MaterialTable,
    layout: &LayoutFields,
    solvent: usize,
) -> Result<DesignFields> {
    let props = layout
        .rho
        .iter()
        .map(|rho| interpolate(table, rho, solvent, 1.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(DesignFields {
        props,
        theta: layout.theta.clone(),
    })
}

fn run_forward(built: &BuiltProblem, out_dir: &Path) -> Result<Vec<ForwardCaseReport>> {
    let layout = built.layout.as_ref().ok_or_else(|| {
        Error::Config(vec!["forward mode requires [region] sections".to_string()])
    })?;
    let mut reports = Vec::new();
    for case in &built.cases {
        let fields = layout_fields(&built.table, layout, case.solvent)?;
        let sv = &built.table.solvents[case.solvent];
        let (sol, _) = load_stepping_solve_with_retry(
            &built.model,
            &fields,
            sv.mu_dry,
            sv.mu_wet,
            &sv.environment,
            &built.schedule,
            &built.newton,
        )?;
        let scalars = state_scalars(&built.table, &layout.rho, Some(&sol.phi), &fields.theta);
        write_state_vtk(
            &out_dir.join(format!("state_{}.vtk", case.name)),
            &format!("converged state for load case {}", case.name),
            &built.model.mesh,
            Some(&sol.u),
            &scalars,
        )?;
        reports.push(ForwardCaseReport {
            name: case.name.clone(),
            newton_iterations: sol.steps.iter().map(|s| s.newton_iterations).sum(),
            max_displacement_m: max_displacement(&sol.u),
        });
    }
    Ok(reports)
}

fn run_optimize(
    config: &ProblemConfig,
    built: BuiltProblem,
    base_dir: &Path,
    out_dir: &Path,
    mut progress: impl FnMut(&IterationRecord),
) -> Result<RunOutcome> {
    let BuiltProblem {
        model,
        table,
        net,
        cases,
        objective,
        constraints,
        schedule,
        newton,
        settings,
        layout,
    } = built;
    let Some(obj) = objective else {
        return Err(Error::Config(vec![
            "optimize mode requires an [objective] section".to_string(),
        ]));
    };
    let objective = match obj {
        BuiltObjective::BlockedForce { case, spec } => Objective::BlockedForce { case, spec },
        BuiltObjective::Shape { case, target } => Objective::Shape {
            case,
            target: resolve_shape_target(
                &model,
                &table,
                &cases,
                case,
                &target,
                layout.as_ref(),
                &schedule,
                &newton,
                base_dir,
            )?,
        },
    };
    let problem = OptProblem {
        model: &model,
        table: &table,
        cases,
        objective,
        constraints,
        schedule,
        newton,
    };

    let snap_dir = out_dir.join("snapshots");
    std::fs::create_dir_all(&snap_dir)?;
    let every = config.output.snapshot_every;
    let mut observer_err: Option<Error> = None;
    let mut outcome = optimize(&problem, net, &settings, |k, net, record| {
        progress(record);
        if observer_err.is_none() && k % every == 0 {
            if let Err(e) = net.save_snapshot(&snap_dir.join(format!("iter_{k:05}.snapshot"))) {
                observer_err = Some(e);
            }
        }
    })?;

    let labels: Vec<String> = problem
        .constraints
        .iter()
        .map(|c| c.label(&table))
        .collect();
    let case_names: Vec<String> = problem.cases.iter().map(|c| c.name.clone()).collect();
    write_history_csv(&out_dir.join("history.csv"), &outcome.history, &labels, &case_names)?;
    outcome
        .net
        .save_snapshot(&out_dir.join("design_final.snapshot"))?;
    if let Some(final_design) = &outcome.final_design {
        let scalars = state_scalars(&table, &final_design.rho, None, &final_design.fields.theta);
        write_state_vtk(
            &out_dir.join("design_final.vtk"),
            "final design densities",
            &model.mesh,
            None,
            &scalars,
        )?;
    }
    if let Some(e) = observer_err {
        return Err(e);
    }
    if let Some(e) = outcome.failure.take() {
        return Err(e);
    }

    // Deformed final states, one per load case. The optimizer converged this
    // exact design on the last recorded iteration, so resolve at the same
    // penalization exponent.
    if let Some(final_design) = &outcome.final_design {
        let k_last = outcome.history.len().saturating_sub(1);
        let p_final = settings.continuation.p(k_last);
        for case in &problem.cases {
            let props = final_design
                .rho
                .iter()
                .map(|rho| interpolate(&table, rho, case.solvent, p_final))
                .collect::<Result<Vec<_>>>()?;
            let fields = DesignFields {
                props,
                theta: final_design.fields.theta.clone(),
            };
            let sv = &table.solvents[case.solvent];
            let (sol, _) = load_stepping_solve_with_retry(
                &model,
                &fields,
                sv.mu_dry,
                sv.mu_wet,
                &sv.environment,
                &problem.schedule,
                &problem.newton,
            )?;
            let scalars = state_scalars(&table, &final_design.rho, Some(&sol.phi), &fields.theta);
            write_state_vtk(
                &out_dir.join(format!("state_{}.vtk", case.name)),
                &format!("converged state of the final design, load case {}", case.name),
                &model.mesh,
                Some(&sol.u),
                &scalars,
            )?;
        }
    }

    let last = outcome.history.last();
    Ok(RunOutcome::Optimize {
        iterations: outcome.history.len(),
        stop: outcome.stop,
        objective: last.map(|r| r.objective_raw).unwrap_or(f64::NAN),
        grayness: last.map(|r| r.grayness).unwrap_or(f64::NAN),
        feasible: outcome.feasible(&problem),
    })
}

/// Turns a target spec into concrete sample points and displacements.
#[allow(clippy::too_many_arguments)]
fn resolve_shape_target(
    model: &FemModel,
    table: &MaterialTable,
    cases: &[LoadCase],
    case: usize,
    spec: &TargetSpec,
    layout: Option<&LayoutFields>,
    schedule: &LoadSchedule,
    newton: &NewtonSettings,
    base_dir: &Path,
) -> Result<ShapeTarget> {
    match spec {
        TargetSpec::Points(rows) => Ok(ShapeTarget {
            points: rows.iter().map(|r| [r[0], r[1]]).collect(),
            targets: rows.iter().map(|r| [r[2], r[3]]).collect(),
        }),
        TargetSpec::File(name) => {
            let path = if Path::new(name).is_absolute() {
                PathBuf::from(name)
            } else {
                base_dir.join(name)
            };
            let text = std::fs::read_to_string(&path)?;
            parse_target_csv(&text, &path.display().to_string())
        }
        TargetSpec::SamplesFromRegions(samples) => {
            let layout = layout.ok_or_else(|| {
                Error::Config(vec![
                    "shape targets sampled from regions need [region] sections".to_string(),
                ])
            })?;
            let fields = layout_fields(table, layout, cases[case].solvent)?;
            let sv = &table.solvents[cases[case].solvent];
            let (sol, _) = load_stepping_solve_with_retry(
                model,
                &fields,
                sv.mu_dry,
                sv.mu_wet,
                &sv.environment,
                schedule,
                newton,
            )?;
            let mut targets = Vec::with_capacity(samples.len());
            let mut violations = Vec::new();
            for p in samples {
                let Some((e, xi, eta)) = model.mesh.locate_point(*p) else {
                    violations.push(format!(
                        "shape sample point ({}, {}) lies outside the mesh",
                        p[0], p[1]
                    ));
                    continue;
                };
                let n = shape4(xi, eta);
                let conn = &model.mesh.elements[e];
                let mut u = [0.0; 2];
                for (a, &node) in conn.iter().enumerate() {
                    for (c, slot) in u.iter_mut().enumerate() {
                        *slot += n[a] * sol.u[2 * node + c];
                    }
                }
                targets.push(u);
            }
            if !violations.is_empty() {
                return Err(Error::Config(violations));
            }
            Ok(ShapeTarget {
                points: samples.clone(),
                targets,
            })
        }
    }
}

/// Rows `x_m,y_m,ux_m,uy_m`; `#` comments, blank lines, and a header on the
/// first line are skipped.
fn parse_target_csv(text: &str, origin: &str) -> Result<ShapeTarget> {
    let bad = |line: usize, detail: String| Error::Parse {
        what: "shape target file".to_string(),
        detail: format!("{origin}:{line}: {detail}"),
    };
    let mut points = Vec::new();
    let mut targets = Vec::new();
    let mut first_content = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let is_first = std::mem::take(&mut first_content);
        // A leading non-numeric first column marks a header row.
        if is_first && cells.first().is_some_and(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        if cells.len() != 4 {
            return Err(bad(i + 1, "expected 4 columns: x_m,y_m,ux_m,uy_m".to_string()));
        }
        let mut row = [0.0; 4];
        for (k, c) in cells.iter().enumerate() {
            row[k] = c
                .parse()
                .map_err(|_| bad(i + 1, format!("cannot parse '{c}'")))?;
        }
        points.push([row[0], row[1]]);
        targets.push([row[2], row[3]]);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            what: "shape target file".to_string(),
            detail: format!("{origin}: no target rows"),
        });
    }
    Ok(ShapeTarget { points, targets })
}

fn max_displacement(u: &[f64]) -> f64 {
    u.chunks_exact(2)
        .map(|c| c[0].hypot(c[1]))
        .fold(0.0, f64::max)
}

/// Per-element cell data: one density per phase, optional mean polymer
/// fraction, and the mean fiber angle.
fn state_scalars(
    table: &MaterialTable,
    rho: &[Vec<f64>],
    phi: Option<&[[f64; 4]]>,
    theta: &[[f64; 4]],
) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for (m, phase) in table.phases.iter().enumerate() {
        out.push((
            format!("rho_{}", phase.name),
            rho.iter().map(|r| r[m]).collect(),
        ));
    }
    if let Some(phi) = phi {
        out.push((
            "phi".to_string(),
            phi.iter().map(|g| g.iter().sum::<f64>() / 4.0).collect(),
        ));
    }
    out.push((
        "theta".to_string(),
        theta.iter().map(|g| g.iter().sum::<f64>() / 4.0).collect(),
    ));
    out
}

fn write_state_vtk(
    path: &Path,
    title: &str,
    mesh: &QuadMesh,
    u: Option<&[f64]>,
    scalars: &[(String, Vec<f64>)],
) -> Result<()> {
    let refs: Vec<CellScalar> = scalars
        .iter()
        .map(|(name, values)| CellScalar { name, values })
        .collect();
    write_vtk(path, title, mesh, u, &refs)
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ResampleReport {
    pub width: usize,
    pub height: usize,
    pub n_phases: usize,
    pub has_theta: bool,
    pub files: Vec<PathBuf>,
}

/// Rasterizes a saved design snapshot on a `width x height` grid of cell
/// centers over the network's domain: one graymap per phase (plus the fiber
/// angle, scaled by pi, when present) and a full-precision CSV. Row 0 of
/// each raster is the top of the domain.
pub fn resample_design(
    snapshot: &Path,
    width: usize,
    height: usize,
    out_dir: &Path,
) -> Result<ResampleReport> {
    if width == 0 || height == 0 {
        return Err(Error::Config(vec![format!(
            "resample resolution must be positive, got {width} x {height}"
        )]));
    }
    let net = DesignNetwork::load_snapshot(snapshot)?;
    let [lo, hi] = net.domain();
    let dx = (hi[0] - lo[0]) / width as f64;
    let dy = (hi[1] - lo[1]) / height as f64;
    let mut coords = Vec::with_capacity(width * height);
    for row in 0..height {
        let y = hi[1] - (row as f64 + 0.5) * dy;
        for col in 0..width {
            coords.push([lo[0] + (col as f64 + 0.5) * dx, y]);
        }
    }
    let samples = net.eval_batch(&coords);
    let n_phases = net.spec().n_phases;
    let has_theta = net.spec().theta_head;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for m in 0..n_phases {
        let values: Vec<f64> = samples.iter().map(|s| s.rho[m]).collect();
        let path = out_dir.join(format!("phase_{m}.pgm"));
        write_pgm(&path, &values, width, height)?;
        files.push(path);
    }
    if has_theta {
        let values: Vec<f64> = samples
            .iter()
            .map(|s| s.theta.unwrap_or(0.0) / std::f64::consts::PI)
            .collect();
        let path = out_dir.join("theta.pgm");
        write_pgm(&path, &values, width, height)?;
        files.push(path);
    }

    let mut csv = String::from("x_m,y_m");
    for m in 0..n_phases {
        csv.push_str(&format!(",rho_{m}"));
    }
    if has_theta {
        csv.push_str(",theta_rad");
    }
    csv.push('\n');
    for (c, s) in coords.iter().zip(&samples) {
        csv.push_str(&format!("{},{}", c[0], c[1]));
        for m in 0..n_phases {
            csv.push_str(&format!(",{}", s.rho[m]));
        }
        if let Some(t) = s.theta {
            csv.push_str(&format!(",{t}"));
        }
        csv.push('\n');
    }
    let path = out_dir.join("resample.csv");
    atomic_write(&path, &csv)?;
    files.push(path);

    Ok(ResampleReport {
        width,
        height,
        n_phases,
        has_theta,
        files,
    })
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct FdSummary {
    pub components: usize,
    /// Components whose gradient sits above the finite-difference noise
    /// floor; only these feed the headline error.
    pub checked_components: usize,
    pub rows: usize,
    /// Worst best-over-h relative error across the checked components.
    pub max_best_rel_error: f64,
    pub report_path: PathBuf,
}

/// Verifies the adjoint design gradient of the configured objective at the
/// initial design against central finite differences over an evenly spread
/// sample of network weights and a sweep of step sizes, then writes the full
/// report CSV into the output directory.
pub fn fd_check_run(
    config: &ProblemConfig,
    base_dir: &Path,
    out_root: Option<&Path>,
    n_components: usize,
) -> Result<FdSummary> {
    if n_components == 0 {
        return Err(Error::Config(vec![
            "fdcheck needs at least one weight component".to_string(),
        ]));
    }
    let out_dir = resolve_output_dir(config, out_root);
    let built = config.build()?;
    let BuiltProblem {
        model,
        table,
        net,
        cases,
        objective,
        schedule,
        newton,
        settings,
        layout,
        ..
    } = built;
    let Some(obj) = objective else {
        return Err(Error::Config(vec![
            "fdcheck needs an [objective] section".to_string(),
        ]));
    };
    let objective = match obj {
        BuiltObjective::BlockedForce { case, spec } => Objective::BlockedForce { case, spec },
        BuiltObjective::Shape { case, target } => Objective::Shape {
            case,
            target: resolve_shape_target(
                &model,
                &table,
                &cases,
                case,
                &target,
                layout.as_ref(),
                &schedule,
                &newton,
                base_dir,
            )?,
        },
    };

    // Iteration-0 realization context on the objective's load case.
    let (obj_case, bound, selector) = match &objective {
        Objective::Shape { case, target } => (
            *case,
            Some(bind_shape_target(&model.mesh, target)?),
            None,
        ),
        Objective::BlockedForce { case, spec } => {
            (*case, None, Some(force_selector(&model, spec)?))
        }
    };
    let sv_idx = cases[obj_case].solvent;
    let sv = &table.solvents[sv_idx];
    let projection = settings.projection.as_ref().map(|ps| ps.at(0));
    let ctx = DesignContext {
        table: &table,
        solvent: sv_idx,
        simp_p: settings.continuation.p(0),
    };

    let evaluate = |net: &DesignNetwork| -> Result<(RealizedDesign, ForwardSolution)> {
        let realized = realize_design(net, &model, &ctx, projection.clone())?;
        let (sol, _) = load_stepping_solve_with_retry(
            &model,
            &realized.fields,
            sv.mu_dry,
            sv.mu_wet,
            &sv.environment,
            &schedule,
            &newton,
        )?;
        Ok((realized, sol))
    };
    let objective_of = |realized: &RealizedDesign, u: &[f64]| -> Result<f64> {
        match &objective {
            Objective::Shape { .. } => {
                Ok(crate::opt::shape_objective(&model, u, bound.as_ref().unwrap()).0)
            }
            Objective::BlockedForce { .. } => {
                let f = model.internal_force(u, &realized.fields, sv.mu_wet, &sv.environment)?;
                Ok(blocked_force(selector.as_ref().unwrap(), &f))
            }
        }
    };

    // Adjoint gradient at the base point.
    let (realized, sol) = evaluate(&net)?;
    let ws = AdjointWorkspace::new(&model, &realized.fields, &sol.u, sv.mu_wet, &sv.environment)?;
    let dj_du = match &objective {
        Objective::Shape { .. } => {
            crate::opt::shape_objective(&model, &sol.u, bound.as_ref().unwrap()).1
        }
        Objective::BlockedForce { .. } => ws.force_objective_dj_du(selector.as_ref().unwrap()),
    };
    let mut lambda = ws.adjoint_solve(&dj_du)?;
    if let Objective::BlockedForce { .. } = &objective {
        // The selector acts on fixed dofs where lambda is zero; subtracting it
        // folds the explicit l^T d(f_int)/d(rho) term of J = l^T f_int into
        // the same design contraction.
        for (a, b) in lambda.iter_mut().zip(selector.as_ref().unwrap()) {
            *a -= b;
        }
    }
    let grad = design_gradient(&ws, &lambda, &net, &ctx, &realized, None)?;
    drop(ws);

    // Even spread of distinct weight components across the parameter vector.
    let n = net.num_params();
    let m = n_components.min(n);
    let mut components: Vec<usize> = (0..m)
        .map(|i| if m == 1 { 0 } else { i * (n - 1) / (m - 1) })
        .collect();
    components.dedup();

    let h_values = [1e-4, 1e-5, 1e-6, 1e-7];
    let mut probe = net.clone();
    let rows = fd_check(net.params(), &grad, &components, &h_values, |p| {
        probe.params_mut().copy_from_slice(p);
        let (realized, sol) = evaluate(&probe)?;
        objective_of(&realized, &sol.u)
    })?;

    std::fs::create_dir_all(&out_dir)?;
    let report_path = out_dir.join("fd_report.csv");
    atomic_write(&report_path, &fd_report_csv(&rows))?;

    // A component whose gradient and differences both sit at the noise floor
    // carries no signal; its relative error is meaningless.
    let g_scale = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = 1e-8 * g_scale;
    let mut max_best = 0.0f64;
    let mut checked = 0usize;
    for &c in &components {
        let comp_rows: Vec<_> = rows.iter().filter(|r| r.component == c).collect();
        let live = comp_rows
            .iter()
            .any(|r| r.adjoint.abs().max(r.fd.abs()) > floor);
        if !live {
            continue;
        }
        checked += 1;
        let best = comp_rows
            .iter()
            .map(|r| r.rel_error)
            .fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            max_best = max_best.max(best);
        }
    }
    Ok(FdSummary {
        components: components.len(),
        checked_components: checked,
        rows: rows.len(),
        max_best_rel_error: max_best,
        report_path,
    })
}
