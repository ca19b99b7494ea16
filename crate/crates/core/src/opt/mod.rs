//! Objectives, constraints, log-barrier aggregation, continuation schedules,
//! Adam, and the outer optimization loop.
//!
//! The loop minimizes
//!
//! ```text
//! L = J / J0 + sum_i psi_tau(g_i)
//! ```
//!
//! where `J` is the (possibly sign-flipped) objective normalized by its
//! iteration-0 magnitude, each `g_i <= 0` is a feasibility constraint, and
//! `psi_tau` is a C^1 log-barrier whose stiffness `tau` grows geometrically.
//! Material penalization `p`, the grayness slack `xi`, and the optional
//! projection sharpness follow their own continuation schedules. Weights
//! update with norm-clipped Adam; every gradient comes from the discrete
//! adjoint of the converged forward states, so one linear solve per load case
//! covers all weights.

use std::time::Instant;

use crate::adjoint::{
    design_gradient, realize_design, AdjointWorkspace, DesignContext, RealizedDesign,
};
use crate::error::{Error, Result};
use crate::fem::{
    load_stepping_solve_with_retry, norm2, DofComp, FemModel, LoadSchedule, NewtonSettings,
};
use crate::field::{DesignNetwork, ThresholdProjection};
use crate::material::MaterialTable;
use crate::mesh::{shape4, QuadMesh};

/// Target displacements for shape-morphing objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTarget {
    /// Sample points, inside the mesh.
    pub points: Vec<[f64; 2]>,
    /// Target displacement at each sample point (same length as `points`).
    pub targets: Vec<[f64; 2]>,
}

/// A [`ShapeTarget`] resolved against a mesh: each sample point located in
/// its element with reference coordinates, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct BoundShapeTarget {
    targets: Vec<[f64; 2]>,
    /// (element, xi, eta) per sample point.
    locations: Vec<(usize, f64, f64)>,
}

/// Locates every sample point; collects all out-of-mesh or shape violations
/// into one configuration error.
pub fn bind_shape_target(mesh: &QuadMesh, target: &ShapeTarget) -> Result<BoundShapeTarget> {
    let mut violations = Vec::new();
    if target.points.is_empty() {
        violations.push("shape target has no sample points".to_string());
    }
    if target.points.len() != target.targets.len() {
        violations.push(format!(
            "shape target has {} points but {} target displacements",
            target.points.len(),
            target.targets.len()
        ));
    }
    let mut locations = Vec::with_capacity(target.points.len());
    for (k, p) in target.points.iter().enumerate() {
        match mesh.locate_point(*p) {
            Some(loc) => locations.push(loc),
            None => violations.push(format!(
                "shape target point {k} at ({}, {}) lies outside the mesh",
                p[0], p[1]
            )),
        }
    }
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    Ok(BoundShapeTarget {
        targets: target.targets.clone(),
        locations,
    })
}

/// Mean squared displacement error over the sample points,
/// `J = (1/n_s) sum_k ||u(x_k) - u_tgt(x_k)||^2`, together with `dJ/du` over
/// all dofs. Displacements at interior points come from the element shape
/// functions.
pub fn shape_objective(
    model: &FemModel,
    u: &[f64],
    bound: &BoundShapeTarget,
) -> (f64, Vec<f64>) {
    let n_s = bound.targets.len() as f64;
    let mut j = 0.0;
    let mut dj = vec![0.0; model.num_dofs()];
    for (k, &(e, xi, eta)) in bound.locations.iter().enumerate() {
        let n = shape4(xi, eta);
        let conn = &model.mesh.elements[e];
        for c in 0..2 {
            let mut u_c = 0.0;
            for a in 0..4 {
                u_c += n[a] * u[2 * conn[a] + c];
            }
            let diff = u_c - bound.targets[k][c];
            j += diff * diff / n_s;
            for a in 0..4 {
                dj[2 * conn[a] + c] += 2.0 * diff * n[a] / n_s;
            }
        }
    }
    (j, dj)
}

/// Reaction-force selector: which fixed dofs to sum and with what sign.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedForceSpec {
    /// Node set carrying the output dofs.
    pub node_set: String,
    pub comp: DofComp,
    /// Direction convention: `+1` or `-1` entry placed on each selected dof.
    pub sign: f64,
}

/// Builds the selector vector `l` (entries in {0, +-sign}) and verifies the
/// blocked-force contract: every selected dof must be Dirichlet-fixed, since
/// the reaction of a free dof is identically zero at equilibrium.
pub fn force_selector(model: &FemModel, spec: &BlockedForceSpec) -> Result<Vec<f64>> {
    let set = model
        .mesh
        .node_set(&spec.node_set)
        .ok_or_else(|| {
            Error::Config(vec![format!(
                "blocked-force output set '{}' does not exist",
                spec.node_set
            )])
        })?;
    let mut l = vec![0.0; model.num_dofs()];
    for &node in set {
        let d = 2 * node + spec.comp.index();
        if !model.dofmap.fixed[d] {
            return Err(Error::Domain(format!(
                "blocked-force output dof (node {node}, {:?}) is not Dirichlet-fixed; \
                 a free dof carries no reaction",
                spec.comp
            )));
        }
        l[d] = spec.sign;
    }
    Ok(l)
}

/// The blocked-force objective `J_BF = l^T f_int(u*)` in newtons.
pub fn blocked_force(selector: &[f64], f_int: &[f64]) -> f64 {
    selector.iter().zip(f_int).map(|(a, b)| a * b).sum()
}

/// One stimulus scenario: which solvent loads the structure. Multiple cases
/// share the mesh, boundary conditions, and design, but not state.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadCase {
    pub name: String,
    /// Index into the material table's solvent list.
    pub solvent: usize,
}

/// What the optimizer minimizes (or maximizes, for forces).
#[derive(Debug, Clone)]
pub enum Objective {
    /// Minimize the mean squared error against target displacements,
    /// evaluated on the given load case.
    Shape { case: usize, target: ShapeTarget },
    /// Maximize the selected reaction force on the given load case
    /// (internally minimized as `-J_BF / |J_BF at iteration 0|`).
    BlockedForce { case: usize, spec: BlockedForceSpec },
}

/// Inequality constraints `g <= 0` aggregated through the barrier.
#[derive(Debug, Clone)]
pub enum Constraint {
    /// Volume fraction of a phase set bounded above:
    /// `g = sum_e rho_P(x_e) v_e / sum_e v_e - bound`.
    Volume { phases: Vec<usize>, bound: f64 },
    /// Intermediate-density penalty with scheduled slack `xi`:
    /// `g = (1/n_e) sum_e sum_m rho_m (1 - rho_m) - xi`.
    Grayness,
    /// Reaction force on a load case must exceed a floor (newtons):
    /// `g = floor - l^T f_int`.
    ReactionFloor {
        case: usize,
        spec: BlockedForceSpec,
        floor_n: f64,
    },
}

impl Constraint {
    /// Short label for history columns.
    pub fn label(&self, table: &MaterialTable) -> String {
        match self {
            Constraint::Volume { phases, .. } => {
                let names: Vec<&str> = phases
                    .iter()
                    .map(|&m| table.phases[m].name.as_str())
                    .collect();
                format!("g_vol_{}", names.join("+"))
            }
            Constraint::Grayness => "g_gray".to_string(),
            Constraint::ReactionFloor { case, .. } => format!("g_rfloor_case{case}"),
        }
    }
}

/// Volume fraction of a phase set: `sum_e rho_P(x_e) v_e / sum_e v_e`.
pub fn volume_fraction(rho: &[Vec<f64>], volumes: &[f64], phases: &[usize]) -> Result<f64> {
    if phases.is_empty() {
        return Err(Error::Config(vec![
            "volume constraint has an empty phase set".to_string(),
        ]));
    }
    if rho.len() != volumes.len() {
        return Err(Error::Domain(format!(
            "{} density samples vs {} element volumes",
            rho.len(),
            volumes.len()
        )));
    }
    let total: f64 = volumes.iter().sum();
    let mut acc = 0.0;
    for (r, &v) in rho.iter().zip(volumes) {
        for &m in phases {
            acc += r[m] * v;
        }
    }
    Ok(acc / total)
}

/// Raw grayness of a sampled density field:
/// `(1/n_e) sum_e sum_m rho_m (1 - rho_m)`; zero exactly when every sample is
/// one-hot, maximal (`(n-1)/n` for `n` phases) at the simplex center.
pub fn raw_grayness(rho: &[Vec<f64>]) -> f64 {
    let n_e = rho.len() as f64;
    rho.iter()
        .map(|r| r.iter().map(|&x| x * (1.0 - x)).sum::<f64>())
        .sum::<f64>()
        / n_e
}

/// C^1 log-barrier:
///
/// ```text
/// psi_tau(g) = -ln(-g)/tau                      for g <= -1/tau^2
///            = tau g - ln(1/tau^2)/tau + 1/tau  otherwise
/// ```
///
/// Interior points feel the log branch; near-boundary and infeasible points
/// fall on the linear extension, so the merit stays finite everywhere.
pub fn barrier(g: f64, tau: f64) -> f64 {
    let junction = -1.0 / (tau * tau);
    if g <= junction {
        -(-g).ln() / tau
    } else {
        tau * g - (1.0 / (tau * tau)).ln() / tau + 1.0 / tau
    }
}

/// `d psi_tau / d g`; equals `tau` on the linear branch and at the junction
/// from both sides.
pub fn barrier_slope(g: f64, tau: f64) -> f64 {
    let junction = -1.0 / (tau * tau);
    if g <= junction {
        -1.0 / (tau * g)
    } else {
        tau
    }
}

/// Geometric barrier-stiffness schedule `tau_k = tau0 * growth^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierSchedule {
    pub tau0: f64,
    pub growth: f64,
}

impl Default for BarrierSchedule {
    fn default() -> Self {
        BarrierSchedule {
            tau0: 3.0,
            growth: 1.03,
        }
    }
}

impl BarrierSchedule {
    pub fn tau(&self, k: usize) -> f64 {
        self.tau0 * self.growth.powi(k as i32)
    }
}

/// Linear continuation of the penalization exponent (up to a cap) and the
/// grayness slack (down to a floor).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationSchedules {
    pub p_start: f64,
    pub p_step: f64,
    pub p_cap: f64,
    pub xi_start: f64,
    pub xi_step: f64,
    pub xi_floor: f64,
}

impl Default for ContinuationSchedules {
    fn default() -> Self {
        ContinuationSchedules {
            p_start: 1.0,
            p_step: 0.05,
            p_cap: 3.0,
            xi_start: 2.0,
            xi_step: 0.05,
            xi_floor: 0.05,
        }
    }
}

impl ContinuationSchedules {
    pub fn p(&self, k: usize) -> f64 {
        (self.p_start + self.p_step * k as f64).min(self.p_cap)
    }

    pub fn xi(&self, k: usize) -> f64 {
        (self.xi_start - self.xi_step * k as f64).max(self.xi_floor)
    }
}

/// Continuation of the optional threshold projection: sharpness ramps
/// linearly to a cap around a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionSchedule {
    pub eta: f64,
    pub beta_start: f64,
    pub beta_step: f64,
    pub beta_cap: f64,
}

impl ProjectionSchedule {
    pub fn at(&self, k: usize) -> ThresholdProjection {
        ThresholdProjection {
            beta: (self.beta_start + self.beta_step * k as f64).min(self.beta_cap),
            eta: self.eta,
        }
    }
}

/// Norm-clipped Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    /// Global gradient-norm ceiling applied before the moment update.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(n: usize, learning_rate: f64, clip_norm: f64) -> Self {
        AdamState {
            learning_rate,
            clip_norm,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update in place. The gradient is first clipped to
    /// `||g|| <= clip_norm`, then fed to the moment estimates.
    pub fn step(&mut self, weights: &mut [f64], gradient: &[f64]) -> Result<()> {
        assert_eq!(weights.len(), self.m.len(), "weight count mismatch");
        assert_eq!(gradient.len(), self.m.len(), "gradient count mismatch");
        if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite gradient component {i}: {}",
                gradient[i]
            )));
        }
        let norm = norm2(gradient);
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..weights.len() {
            let g = scale * gradient[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            weights[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// The barrier-aggregated loss split into its logged parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub j_over_j0: f64,
    /// One barrier value per constraint, in constraint order.
    pub barriers: Vec<f64>,
    pub total: f64,
}

/// `L = J/J0 + sum_i psi_tau(g_i)`.
pub fn total_loss(j: f64, j0: f64, gs: &[f64], tau: f64) -> LossParts {
    let j_over_j0 = j / j0;
    let barriers: Vec<f64> = gs.iter().map(|&g| barrier(g, tau)).collect();
    let total = j_over_j0 + barriers.iter().sum::<f64>();
    LossParts {
        j_over_j0,
        barriers,
        total,
    }
}

/// A full optimization problem over one mesh and material table.
pub struct OptProblem<'a> {
    pub model: &'a FemModel,
    pub table: &'a MaterialTable,
    pub cases: Vec<LoadCase>,
    pub objective: Objective,
    pub constraints: Vec<Constraint>,
    pub schedule: LoadSchedule,
    pub newton: NewtonSettings,
}

/// Loop controls and schedules.
#[derive(Debug, Clone)]
pub struct OptSettings {
    pub max_iterations: usize,
    /// Plateau stopping is suppressed before this many iterations.
    pub min_iterations: usize,
    /// Moving-average window for the loss-residual stop (1 recovers the bare
    /// per-iteration criterion).
    pub loss_window: usize,
    /// Stop when the windowed average of `|L_k - L_{k-1}|` drops below this.
    pub loss_tol: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub barrier: BarrierSchedule,
    pub continuation: ContinuationSchedules,
    pub projection: Option<ProjectionSchedule>,
}

impl Default for OptSettings {
    fn default() -> Self {
        OptSettings {
            max_iterations: 250,
            min_iterations: 0,
            loss_window: 5,
            loss_tol: 1e-3,
            learning_rate: 5e-3,
            clip_norm: 1.0,
            barrier: BarrierSchedule::default(),
            continuation: ContinuationSchedules::default(),
            projection: None,
        }
    }
}

/// One history row, recorded before the weight update it informs.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Objective in its physical convention (MSE in m^2, or blocked force in
    /// newtons — not sign-flipped).
    pub objective_raw: f64,
    /// Normalized objective as minimized.
    pub j_over_j0: f64,
    /// Constraint values `g_i`, in problem order.
    pub constraint_values: Vec<f64>,
    /// Raw grayness of the physical densities.
    pub grayness: f64,
    pub tau: f64,
    pub simp_p: f64,
    pub xi: f64,
    pub loss: f64,
    /// Total Newton iterations per load case (summed over load steps).
    pub newton_iterations: Vec<usize>,
    /// Whether any load case needed the doubled-schedule retry.
    pub retried: bool,
    /// Wall-clock seconds for this iteration (kept out of reproducible
    /// artifacts; see the history writer).
    pub wall_time_s: f64,
}

/// Why the loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    LossPlateau,
    /// A forward solve, adjoint solve, or update failed; the error and the
    /// partial history are preserved in the outcome.
    Failure,
}

/// Final state of an optimization run.
pub struct OptOutcome {
    /// Network at the last *evaluated* iterate: the weights that produced the
    /// final history row (no trailing un-evaluated update is applied).
    pub net: DesignNetwork,
    pub history: Vec<IterationRecord>,
    pub stop: StopReason,
    /// The error that ended the run, when `stop == Failure`.
    pub failure: Option<Error>,
    /// The design realized at the last evaluated iterate (case-0 context).
    pub final_design: Option<RealizedDesign>,
}

impl OptOutcome {
    /// Feasibility of the final iterate per the acceptance convention:
    /// raw grayness at most 0.05 and every volume constraint within 1e-3.
    pub fn feasible(&self, problem: &OptProblem) -> bool {
        let Some(last) = self.history.last() else {
            return false;
        };
        if last.grayness > 0.05 {
            return false;
        }
        for (c, &g) in problem.constraints.iter().zip(&last.constraint_values) {
            if matches!(c, Constraint::Volume { .. }) && g > 1e-3 {
                return false;
            }
        }
        true
    }
}

/// Runs the outer optimization loop.
///
/// Per iteration: sample the network, interpolate materials, run one forward
/// solve per load case (retrying once from zero with a doubled schedule on
/// nonconvergence), evaluate the barrier loss, assemble the adjoint gradient,
/// update the weights with Adam, and advance every continuation schedule.
/// Stops at the iteration cap or when the moving average of `|delta L|`
/// drops below `loss_tol`.
///
/// `observer` fires after each history row is assembled (and before the
/// weight update), receiving the iterate's network; drivers use it for
/// snapshot cadence. Solver breakdowns mid-run do not lose the history: they
/// come back in [`OptOutcome::failure`] with `stop == Failure`.
pub fn optimize(
    problem: &OptProblem,
    mut net: DesignNetwork,
    settings: &OptSettings,
    mut observer: impl FnMut(usize, &DesignNetwork, &IterationRecord),
) -> Result<OptOutcome> {
    let model = problem.model;
    let table = problem.table;
    let n_el = model.mesh.num_elements();
    let n_phases = table.num_phases();
    let n_dofs = model.num_dofs();

    // ---- Structural validation (hard errors, before any solve). ----
    if problem.cases.is_empty() {
        return Err(Error::Config(vec!["no load cases defined".to_string()]));
    }
    for case in &problem.cases {
        if case.solvent >= table.num_solvents() {
            return Err(Error::Config(vec![format!(
                "load case '{}' references solvent {} but the table has {}",
                case.name,
                case.solvent,
                table.num_solvents()
            )]));
        }
    }
    let check_case = |case: usize, what: &str| -> Result<()> {
        if case >= problem.cases.len() {
            return Err(Error::Config(vec![format!(
                "{what} references load case {case} but only {} are defined",
                problem.cases.len()
            )]));
        }
        Ok(())
    };
    let bound_target = match &problem.objective {
        Objective::Shape { case, target } => {
            check_case(*case, "shape objective")?;
            Some(bind_shape_target(&model.mesh, target)?)
        }
        Objective::BlockedForce { case, .. } => {
            check_case(*case, "blocked-force objective")?;
            None
        }
    };
    let obj_selector = match &problem.objective {
        Objective::BlockedForce { spec, .. } => Some(force_selector(model, spec)?),
        Objective::Shape { .. } => None,
    };
    let mut rf_selectors = vec![None; problem.constraints.len()];
    for (i, c) in problem.constraints.iter().enumerate() {
        match c {
            Constraint::ReactionFloor { case, spec, .. } => {
                check_case(*case, "reaction-floor constraint")?;
                rf_selectors[i] = Some(force_selector(model, spec)?);
            }
            Constraint::Volume { phases, bound } => {
                if phases.iter().any(|&m| m >= n_phases) {
                    return Err(Error::Config(vec![format!(
                        "volume constraint names phase index >= {n_phases}"
                    )]));
                }
                if !(*bound > 0.0 && *bound <= 1.0) {
                    return Err(Error::Config(vec![format!(
                        "volume bound must lie in (0, 1], got {bound}"
                    )]));
                }
                // Reject empty phase sets eagerly.
                volume_fraction(&vec![vec![0.0; n_phases]; 1], &[1.0], phases)?;
            }
            Constraint::Grayness => {}
        }
    }

    let volumes: Vec<f64> = model.geoms.iter().map(|g| g.volume).collect();
    let mut adam = AdamState::new(net.num_params(), settings.learning_rate, settings.clip_norm);
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut final_design: Option<RealizedDesign> = None;
    let mut j0 = f64::NAN;

    // Failure capture: wrap up the outcome without losing history.
    macro_rules! fail {
        ($err:expr) => {
            return Ok(OptOutcome {
                net,
                history,
                stop: StopReason::Failure,
                failure: Some($err),
                final_design,
            })
        };
    }

    for k in 0..settings.max_iterations {
        let started = Instant::now();
        let tau = settings.barrier.tau(k);
        let simp_p = settings.continuation.p(k);
        let xi = settings.continuation.xi(k);
        let projection = settings.projection.map(|ps| ps.at(k));

        // ---- Forward pass: realize + solve every load case. ----
        let contexts: Vec<DesignContext> = problem
            .cases
            .iter()
            .map(|case| DesignContext {
                table,
                solvent: case.solvent,
                simp_p,
            })
            .collect();
        let mut realized_cases = Vec::with_capacity(problem.cases.len());
        let mut sols = Vec::with_capacity(problem.cases.len());
        let mut newton_iterations = Vec::with_capacity(problem.cases.len());
        let mut retried_any = false;
        let mut forward_error = None;
        for (case, ctx) in problem.cases.iter().zip(&contexts) {
            let realized = match realize_design(&net, model, ctx, projection) {
                Ok(r) => r,
                Err(e) => {
                    forward_error = Some(e);
                    break;
                }
            };
            let solvent = &table.solvents[case.solvent];
            match load_stepping_solve_with_retry(
                model,
                &realized.fields,
                solvent.mu_dry,
                solvent.mu_wet,
                &solvent.environment,
                &problem.schedule,
                &problem.newton,
            ) {
                Ok((sol, retried)) => {
                    newton_iterations
                        .push(sol.steps.iter().map(|s| s.newton_iterations).sum::<usize>());
                    retried_any |= retried;
                    sols.push(sol);
                    realized_cases.push(realized);
                }
                Err(e) => {
                    forward_error = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = forward_error {
            fail!(e);
        }

        // ---- Workspaces at the converged states. ----
        let mut workspaces = Vec::with_capacity(problem.cases.len());
        let mut ws_error = None;
        for (c, case) in problem.cases.iter().enumerate() {
            let solvent = &table.solvents[case.solvent];
            match AdjointWorkspace::new(
                model,
                &realized_cases[c].fields,
                &sols[c].u,
                solvent.mu_wet,
                &solvent.environment,
            ) {
                Ok(ws) => workspaces.push(ws),
                Err(e) => {
                    ws_error = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = ws_error {
            drop(workspaces);
            fail!(e);
        }

        // ---- Loss pieces. ----
        // Densities are case-independent (same network, same projection).
        let rho = &realized_cases[0].rho;
        let grayness = raw_grayness(rho);

        let (objective_raw, j_min) = match &problem.objective {
            Objective::Shape { case, .. } => {
                let (j, _) = shape_objective(model, &sols[*case].u, bound_target.as_ref().unwrap());
                (j, j)
            }
            Objective::BlockedForce { case, .. } => {
                let j_bf = blocked_force(obj_selector.as_ref().unwrap(), &workspaces[*case].f_int);
                (j_bf, -j_bf)
            }
        };
        if k == 0 {
            let floor = match &problem.objective {
                Objective::Shape { .. } => 1e-12,
                Objective::BlockedForce { case, .. } => 1e-8 * sols[*case].force_scale,
            };
            j0 = j_min.abs().max(floor);
        }

        let mut gs = Vec::with_capacity(problem.constraints.len());
        for (i, c) in problem.constraints.iter().enumerate() {
            let g = match c {
                Constraint::Volume { phases, bound } => {
                    match volume_fraction(rho, &volumes, phases) {
                        Ok(frac) => frac - bound,
                        Err(e) => {
                            drop(workspaces);
                            fail!(e);
                        }
                    }
                }
                Constraint::Grayness => grayness - xi,
                Constraint::ReactionFloor { case, floor_n, .. } => {
                    let f = blocked_force(rf_selectors[i].as_ref().unwrap(), &workspaces[*case].f_int);
                    floor_n - f
                }
            };
            gs.push(g);
        }
        let parts = total_loss(j_min, j0, &gs, tau);

        // ---- Gradient: explicit density terms + per-case adjoint terms. ----
        let total_volume: f64 = volumes.iter().sum();
        let mut explicit = vec![vec![0.0; n_phases]; n_el];
        let mut dl_du = vec![vec![0.0; n_dofs]; problem.cases.len()];
        // Force terms read f_int at fixed dofs, where the state is prescribed
        // but the material still depends on the design.  The adjoint solve
        // returns zeros there, so each force term's selector (scaled by the
        // loss coefficient on l^T f_int) is folded into lambda below to pick
        // up the explicit l^T d(f_int)/d(rho) contribution.
        let mut lam_fix = vec![vec![0.0; n_dofs]; problem.cases.len()];
        for (i, c) in problem.constraints.iter().enumerate() {
            let w = barrier_slope(gs[i], tau);
            match c {
                Constraint::Volume { phases, .. } => {
                    for e in 0..n_el {
                        let dv = w * volumes[e] / total_volume;
                        for &m in phases {
                            explicit[e][m] += dv;
                        }
                    }
                }
                Constraint::Grayness => {
                    let scale = w / n_el as f64;
                    for e in 0..n_el {
                        for m in 0..n_phases {
                            explicit[e][m] += scale * (1.0 - 2.0 * rho[e][m]);
                        }
                    }
                }
                Constraint::ReactionFloor { case, .. } => {
                    // g = floor - l^T f_int, so dg/du = -K_full^T l.
                    let l = rf_selectors[i].as_ref().unwrap();
                    let ktl = workspaces[*case].force_objective_dj_du(l);
                    for (slot, v) in dl_du[*case].iter_mut().zip(&ktl) {
                        *slot -= w * v;
                    }
                    for (slot, v) in lam_fix[*case].iter_mut().zip(l) {
                        *slot += w * v;
                    }
                }
            }
        }
        match &problem.objective {
            Objective::Shape { case, .. } => {
                let (_, dj) = shape_objective(model, &sols[*case].u, bound_target.as_ref().unwrap());
                for (slot, v) in dl_du[*case].iter_mut().zip(&dj) {
                    *slot += v / j0;
                }
            }
            Objective::BlockedForce { case, .. } => {
                // Minimized J = -J_BF, so dJ/du = -(K_full^T l) / J0.
                let l = obj_selector.as_ref().unwrap();
                let ktl = workspaces[*case].force_objective_dj_du(l);
                for (slot, v) in dl_du[*case].iter_mut().zip(&ktl) {
                    *slot -= v / j0;
                }
                for (slot, v) in lam_fix[*case].iter_mut().zip(l) {
                    *slot += v / j0;
                }
            }
        }

        // The explicit density cotangent enters exactly once, attached to
        // the objective's load case; each case's gradient term is then
        // independent of case ordering, so a two-case sum commutes bitwise.
        let obj_case = match &problem.objective {
            Objective::Shape { case, .. } => *case,
            Objective::BlockedForce { case, .. } => *case,
        };
        let mut grad = vec![0.0; net.num_params()];
        let mut grad_error = None;
        for (c, ws) in workspaces.iter().enumerate() {
            let mut lambda = match ws.adjoint_solve(&dl_du[c]) {
                Ok(l) => l,
                Err(e) => {
                    grad_error = Some(e);
                    break;
                }
            };
            if lam_fix[c].iter().any(|&v| v != 0.0) {
                for (a, b) in lambda.iter_mut().zip(&lam_fix[c]) {
                    *a += b;
                }
            }
            let ex = if c == obj_case { Some(&explicit[..]) } else { None };
            match design_gradient(ws, &lambda, &net, &contexts[c], &realized_cases[c], ex) {
                Ok(g) => {
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Err(e) => {
                    grad_error = Some(e);
                    break;
                }
            }
        }
        drop(workspaces);
        if let Some(e) = grad_error {
            fail!(e);
        }

        // ---- Record the iterate. ----
        let record = IterationRecord {
            iteration: k,
            objective_raw,
            j_over_j0: parts.j_over_j0,
            constraint_values: gs,
            grayness,
            tau,
            simp_p,
            xi,
            loss: parts.total,
            newton_iterations,
            retried: retried_any,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        observer(k, &net, &record);
        history.push(record);
        final_design = Some(realized_cases.swap_remove(0));

        // ---- Stopping. ----
        if history.len() > settings.loss_window && history.len() >= settings.min_iterations {
            let tail = &history[history.len() - settings.loss_window - 1..];
            let avg_delta = tail
                .windows(2)
                .map(|w| (w[1].loss - w[0].loss).abs())
                .sum::<f64>()
                / settings.loss_window as f64;
            if avg_delta <= settings.loss_tol {
                return Ok(OptOutcome {
                    net,
                    history,
                    stop: StopReason::LossPlateau,
                    failure: None,
                    final_design,
                });
            }
        }
        if k + 1 == settings.max_iterations {
            break;
        }

        // ---- Update (skipped on the final iteration so the returned
        // weights match the last history row). ----
        if let Err(e) = adam.step(net.params_mut(), &grad) {
            fail!(e);
        }
    }

    Ok(OptOutcome {
        net,
        history,
        stop: StopReason::MaxIterations,
        failure: None,
        final_design,
    })
}
