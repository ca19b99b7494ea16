//! Damped Newton solve and chemical-potential load stepping.
//!
//! The stimulus is ramped through a graded schedule
//!
//! ```text
//! alpha_k = (k / N_s)^beta,   k = 1..N_s
//! mu_k    = (1 - alpha_k) mu_dry + alpha_k mu_wet
//! ```
//!
//! A small `beta` front-loads the ramp: the first step already covers most of
//! the chemical-potential range (which the equilibrium `phi` takes up almost
//! logarithmically), and later steps refine toward the fully swollen state.
//! Tractions and inhomogeneous Dirichlet values scale with the same
//! `alpha_k`. Each step warm-starts from the previous converged state; the
//! inner Newton iteration is damped by an Armijo backtracking line search on
//! the merit `0.5 ||R||^2`, with an element inversion treated as infinite
//! merit so the search simply shortens the step.

use crate::error::{Error, Result};
use crate::material::SolventEnvironment;

use super::assemble::{norm2, AssembledSystem, DesignFields, FemModel};
use super::linalg::SparseLu;

/// Newton iteration controls.
#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    /// Convergence tolerance relative to the first load step's force scale.
    pub tol_rel: f64,
    /// Absolute floor on the convergence tolerance in N.
    pub tol_abs_floor: f64,
    pub max_iterations: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Step-shrink factor per backtrack.
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Recursion limit for bisecting a load increment whose Newton solve
    /// fails. Zero disables sub-stepping.
    pub max_subdivisions: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            tol_rel: 1e-6,
            tol_abs_floor: 1e-10,
            max_iterations: 30,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 20,
            max_subdivisions: 10,
        }
    }
}

/// Stimulus ramp controls.
#[derive(Debug, Clone, Copy)]
pub struct LoadSchedule {
    pub n_steps: usize,
    pub beta: f64,
}

impl Default for LoadSchedule {
    fn default() -> Self {
        LoadSchedule {
            n_steps: 20,
            beta: 0.05,
        }
    }
}

impl LoadSchedule {
    /// The load factors `alpha_1 .. alpha_N`, ending exactly at 1.
    pub fn alphas(&self) -> Vec<f64> {
        let n = self.n_steps as f64;
        (1..=self.n_steps)
            .map(|k| (k as f64 / n).powf(self.beta))
            .collect()
    }
}

/// Per-step convergence report.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub alpha: f64,
    pub mu: f64,
    /// Iterations of the solve that reached this step's target load factor.
    pub newton_iterations: usize,
    /// Residual norms per iteration, starting with the pre-iteration value.
    pub residual_norms: Vec<f64>,
    /// Intermediate converged solves inserted by load-increment bisection.
    pub sub_steps: usize,
}

/// Converged forward state.
pub struct ForwardSolution {
    pub u: Vec<f64>,
    /// Polymer fraction per element per Gauss point at the final state.
    pub phi: Vec<[f64; 4]>,
    pub steps: Vec<StepReport>,
    /// Force scale used for the convergence tolerance.
    pub force_scale: f64,
    /// Absolute residual tolerance derived from the force scale.
    pub tolerance: f64,
}

fn merit_of(model: &FemModel, u: &[f64], fields: &DesignFields, mu: f64, alpha: f64, env: &SolventEnvironment) -> f64 {
    // An inverted element during the line search means "too far": infinite
    // merit, not an error.
    match model.internal_force(u, fields, mu, env) {
        Ok(f_int) => {
            let r = model.residual_free(&f_int, alpha);
            0.5 * norm2(&r).powi(2)
        }
        Err(_) => f64::INFINITY,
    }
}

/// One damped Newton solve at fixed stimulus `mu` and load factor `alpha`.
/// `u` enters as the warm start (with constraints already applied) and leaves
/// converged. Returns the residual-norm history.
pub fn newton_solve(
    model: &FemModel,
    fields: &DesignFields,
    u: &mut Vec<f64>,
    mu: f64,
    alpha: f64,
    env: &SolventEnvironment,
    tol_abs: f64,
    settings: &NewtonSettings,
    step: usize,
) -> Result<Vec<f64>> {
    let mut norms = Vec::new();
    let mut sys: AssembledSystem = model.assemble(u, fields, mu, env, false)?;
    let mut r = model.residual_free(&sys.f_int, alpha);
    let mut rn = norm2(&r);
    norms.push(rn);

    for _ in 0..settings.max_iterations {
        if rn <= tol_abs {
            return Ok(norms);
        }
        let lu = SparseLu::factorize(model.dofmap.num_free(), &sys.k_free)?;
        let neg = r.iter().map(|x| -x).collect::<Vec<f64>>();
        let delta = lu.solve(&neg);

        // Armijo on 0.5||R||^2; the exact Newton direction gives initial
        // slope -||R||^2.
        let merit0 = 0.5 * rn * rn;
        let slope = -rn * rn;
        let mut t = 1.0;
        let mut accepted = false;
        let mut best: Option<(f64, f64)> = None; // (merit, t)
        for _ in 0..=settings.max_backtracks {
            let mut u_try = u.clone();
            for (slot, &d) in model.dofmap.free_dofs.iter().enumerate() {
                u_try[d] += t * delta[slot];
            }
            let m = merit_of(model, &u_try, fields, mu, alpha, env);
            if m <= merit0 + settings.armijo_c * t * slope {
                *u = u_try;
                accepted = true;
                break;
            }
            if m.is_finite() && best.map_or(true, |(bm, _)| m < bm) {
                best = Some((m, t));
            }
            t *= settings.backtrack_factor;
        }
        if !accepted {
            // The Armijo condition never held. Fall back to the best finite
            // candidate if it at least reduces the merit; otherwise give up.
            match best {
                Some((m, bt)) if m < merit0 => {
                    for (slot, &d) in model.dofmap.free_dofs.iter().enumerate() {
                        u[d] += bt * delta[slot];
                    }
                }
                _ => {
                    return Err(Error::NonConvergence {
                        step,
                        iters: norms.len() - 1,
                        residual: rn,
                        tol: tol_abs,
                    });
                }
            }
        }

        sys = model.assemble(u, fields, mu, env, false)?;
        r = model.residual_free(&sys.f_int, alpha);
        rn = norm2(&r);
        norms.push(rn);
    }

    if rn <= tol_abs {
        Ok(norms)
    } else {
        Err(Error::NonConvergence {
            step,
            iters: settings.max_iterations,
            residual: rn,
            tol: tol_abs,
        })
    }
}

/// Whether a failure mode is plausibly cured by a smaller load increment.
fn subdividable(e: &Error) -> bool {
    matches!(
        e,
        Error::NonConvergence { .. } | Error::InvertedElement { .. } | Error::LinearSolver(_)
    )
}

/// Advances the state from `alpha_from` (converged in `u`) to `alpha_to`. On
/// a Newton failure the increment is bisected recursively, warm-starting each
/// half; this only changes behavior for steps that would otherwise abort.
/// Returns the residual history of the solve that reached `alpha_to`.
#[allow(clippy::too_many_arguments)]
fn advance(
    model: &FemModel,
    fields: &DesignFields,
    u: &mut Vec<f64>,
    mu_dry: f64,
    mu_wet: f64,
    env: &SolventEnvironment,
    tol: f64,
    settings: &NewtonSettings,
    step: usize,
    alpha_from: f64,
    alpha_to: f64,
    depth: usize,
    sub_steps: &mut usize,
) -> Result<Vec<f64>> {
    let mu = (1.0 - alpha_to) * mu_dry + alpha_to * mu_wet;
    let snapshot = u.clone();
    model.dofmap.apply(u, alpha_to);
    match newton_solve(model, fields, u, mu, alpha_to, env, tol, settings, step) {
        Ok(norms) => Ok(norms),
        Err(e) if depth < settings.max_subdivisions && subdividable(&e) => {
            *u = snapshot;
            let mid = 0.5 * (alpha_from + alpha_to);
            advance(
                model, fields, u, mu_dry, mu_wet, env, tol, settings, step, alpha_from, mid,
                depth + 1, sub_steps,
            )?;
            *sub_steps += 1;
            advance(
                model, fields, u, mu_dry, mu_wet, env, tol, settings, step, mid, alpha_to,
                depth + 1, sub_steps,
            )
        }
        Err(e) => {
            *u = snapshot;
            Err(e)
        }
    }
}

/// Full load-stepping solve from the dry state to `mu_wet`.
pub fn load_stepping_solve(
    model: &FemModel,
    fields: &DesignFields,
    mu_dry: f64,
    mu_wet: f64,
    env: &SolventEnvironment,
    schedule: &LoadSchedule,
    settings: &NewtonSettings,
) -> Result<ForwardSolution> {
    let mut u = vec![0.0; model.num_dofs()];
    let mut steps = Vec::with_capacity(schedule.n_steps);
    let mut force_scale = 0.0;
    let mut tol = settings.tol_abs_floor;
    let mut alpha_prev = 0.0;

    for (k, alpha) in schedule.alphas().into_iter().enumerate() {
        let mu = (1.0 - alpha) * mu_dry + alpha * mu_wet;

        if k == 0 {
            // Force scale: external load plus the out-of-balance force of the
            // warm-start state at the first step.
            model.dofmap.apply(&mut u, alpha);
            let f_ext: f64 = norm2(
                &model
                    .dofmap
                    .free_dofs
                    .iter()
                    .map(|&d| alpha * model.f_ext_unit[d])
                    .collect::<Vec<f64>>(),
            );
            let r0 = model
                .internal_force(&u, fields, mu, env)
                .map(|f| norm2(&model.residual_free(&f, alpha)))
                .unwrap_or(f64::INFINITY);
            force_scale = f_ext.max(r0);
            if !force_scale.is_finite() {
                force_scale = 1.0;
            }
            tol = (settings.tol_rel * force_scale).max(settings.tol_abs_floor);
        }

        let mut sub_steps = 0;
        let norms = advance(
            model,
            fields,
            &mut u,
            mu_dry,
            mu_wet,
            env,
            tol,
            settings,
            k,
            alpha_prev,
            alpha,
            0,
            &mut sub_steps,
        )?;
        alpha_prev = alpha;
        steps.push(StepReport {
            alpha,
            mu,
            newton_iterations: norms.len() - 1,
            residual_norms: norms,
            sub_steps,
        });
    }

    // Final-state bookkeeping for the adjoint and post-processing.
    let sys = model.assemble(&u, fields, mu_wet, env, false)?;
    Ok(ForwardSolution {
        u,
        phi: sys.phi,
        steps,
        force_scale,
        tolerance: tol,
    })
}

/// [`load_stepping_solve`] with the standard robustness fallback: on
/// non-convergence, retry once from scratch with twice the number of load
/// steps.
pub fn load_stepping_solve_with_retry(
    model: &FemModel,
    fields: &DesignFields,
    mu_dry: f64,
    mu_wet: f64,
    env: &SolventEnvironment,
    schedule: &LoadSchedule,
    settings: &NewtonSettings,
) -> Result<(ForwardSolution, bool)> {
    match load_stepping_solve(model, fields, mu_dry, mu_wet, env, schedule, settings) {
        Ok(sol) => Ok((sol, false)),
        Err(Error::NonConvergence { .. }) => {
            let denser = LoadSchedule {
                n_steps: schedule.n_steps * 2,
                beta: schedule.beta,
            };
            let sol =
                load_stepping_solve(model, fields, mu_dry, mu_wet, env, &denser, settings)?;
            Ok((sol, true))
        }
        Err(e) => Err(e),
    }
}

/// Reaction forces `f_int - alpha f_ext` over all dofs; physically meaningful
/// on the Dirichlet-fixed dofs (elsewhere it is the converged residual).
pub fn reaction_force(
    model: &FemModel,
    u: &[f64],
    fields: &DesignFields,
    mu: f64,
    alpha: f64,
    env: &SolventEnvironment,
) -> Result<Vec<f64>> {
    let f_int = model.internal_force(u, fields, mu, env)?;
    Ok(f_int
        .iter()
        .zip(&model.f_ext_unit)
        .map(|(fi, fe)| fi - alpha * fe)
        .collect())
}

/// Sums a reaction component over a node set.
pub fn set_reaction(model: &FemModel, reactions: &[f64], set: &str, comp: usize) -> Result<f64> {
    let nodes = model
        .mesh
        .node_set(set)
        .ok_or_else(|| Error::Domain(format!("unknown node set '{set}'")))?;
    Ok(nodes.iter().map(|&n| reactions[2 * n + comp]).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::bc::{BoundaryConditions, DirichletSpec, DofComp, TractionSpec};
    use crate::material::EffectiveProps;
    use crate::mesh::build_rect_mesh;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn water() -> SolventEnvironment {
        SolventEnvironment {
            molar_volume: 1.8e-5,
            temperature: 298.0,
            mu0: 0.0,
        }
    }

    fn gel() -> EffectiveProps {
        EffectiveProps {
            g: 1.0e6,
            chi: 0.2,
            eta: 0.0,
        }
    }

    const MU_DRY: f64 = -1.0e5;
    const MU_WET: f64 = -100.0;

    fn symmetric_bc() -> BoundaryConditions {
        BoundaryConditions {
            dirichlet: vec![
                DirichletSpec {
                    node_set: "left".into(),
                    comp: DofComp::X,
                    value: 0.0,
                },
                DirichletSpec {
                    node_set: "bottom".into(),
                    comp: DofComp::Y,
                    value: 0.0,
                },
            ],
            tractions: vec![],
        }
    }

    #[test]
    fn graded_schedule_front_loads_the_ramp() {
        let s = LoadSchedule::default();
        let a = s.alphas();
        assert_eq!(a.len(), 20);
        // (1/20)^0.05 ~ 0.8609
        assert_relative_eq!(a[0], (0.05f64).powf(0.05), max_relative = 1e-12);
        assert!(a[0] > 0.86 && a[0] < 0.87);
        assert_abs_diff_eq!(*a.last().unwrap(), 1.0, epsilon = 0.0);
        for w in a.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn no_stimulus_no_load_stays_put() {
        let mesh = build_rect_mesh(3, 2, 1.0, 0.6, 0.01).unwrap();
        let model = FemModel::new(mesh, &symmetric_bc()).unwrap();
        let fields = DesignFields::uniform(gel(), model.mesh.num_elements());
        let sol = load_stepping_solve(
            &model,
            &fields,
            MU_DRY,
            MU_DRY,
            &water(),
            &LoadSchedule::default(),
            &NewtonSettings::default(),
        )
        .unwrap();
        // The dry clamp at phi = 1 - 1e-9 leaves a residual stress of order
        // 1e-9 G, so the equilibrium displacement is ~1e-9 rather than an
        // exact zero.
        assert!(norm2(&sol.u) < 1e-7, "u should stay zero, |u| = {}", norm2(&sol.u));
    }

    #[test]
    fn converged_start_converges_in_zero_iterations() {
        let mesh = build_rect_mesh(2, 2, 1.0, 1.0, 0.01).unwrap();
        let model = FemModel::new(mesh, &symmetric_bc()).unwrap();
        let fields = DesignFields::uniform(gel(), model.mesh.num_elements());
        let mut u = vec![0.0; model.num_dofs()];
        // Tolerance set at the dry-state residual floor 1e-8 G t left by the
        // phi clamp; the undeformed dry state sits within it.
        let norms = newton_solve(
            &model,
            &fields,
            &mut u,
            MU_DRY,
            0.0,
            &water(),
            1e-8 * 1.0e6 * 0.01,
            &NewtonSettings::default(),
            0,
        )
        .unwrap();
        assert_eq!(norms.len(), 1, "already-converged start should exit immediately");
    }

    #[test]
    fn free_swelling_block_matches_plane_stress_scalar_solution() {
        // The homogeneous free-swelling state satisfies P(lambda I) = 0; the
        // scalar reference value comes from a golden-section minimization of
        // psi(lambda I) over lambda, independent of any stress formula.
        let mesh = build_rect_mesh(4, 4, 1.0, 1.0, 0.01).unwrap();
        let model = FemModel::new(mesh, &symmetric_bc()).unwrap();
        let fields = DesignFields::uniform(gel(), model.mesh.num_elements());
        let sol = load_stepping_solve(
            &model,
            &fields,
            MU_DRY,
            MU_WET,
            &water(),
            &LoadSchedule::default(),
            &NewtonSettings::default(),
        )
        .unwrap();

        // Oracle: minimize psi(lambda I) by golden-section search.
        let psi_of = |lam: f64| {
            crate::material::strain_energy(
                &nalgebra::Matrix2::new(lam, 0.0, 0.0, lam),
                &gel(),
                0.0,
                MU_WET,
                &water(),
            )
            .unwrap()
        };
        let (mut a, mut b) = (1.0, 2.5);
        let gr = (5.0f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - gr * (b - a);
            let d = a + gr * (b - a);
            if psi_of(c) < psi_of(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let lam_star = 0.5 * (a + b);

        // Measured stretch: mean right-edge x displacement over the length.
        let right = model.mesh.node_set("right").unwrap();
        let mean_ux: f64 =
            right.iter().map(|&n| sol.u[2 * n]).sum::<f64>() / right.len() as f64;
        let lam_fem = 1.0 + mean_ux / 1.0;
        assert_relative_eq!(lam_fem, lam_star, max_relative = 1e-6);
        assert!(lam_star > 1.3, "gel should swell strongly, lambda* = {lam_star}");
    }

    #[test]
    fn single_load_step_matches_twenty_steps() {
        // The converged state is path independent; the schedule only helps
        // robustness.
        let mesh = build_rect_mesh(3, 3, 1.0, 1.0, 0.01).unwrap();
        let model = FemModel::new(mesh, &symmetric_bc()).unwrap();
        let fields = DesignFields::uniform(gel(), model.mesh.num_elements());
        let tight = NewtonSettings {
            tol_rel: 1e-10,
            ..NewtonSettings::default()
        };
        let sol20 = load_stepping_solve(
            &model,
            &fields,
            MU_DRY,
            MU_WET,
            &water(),
            &LoadSchedule::default(),
            &tight,
        )
        .unwrap();
        let sol1 = load_stepping_solve(
            &model,
            &fields,
            MU_DRY,
            MU_WET,
            &water(),
            &LoadSchedule {
                n_steps: 1,
                beta: 0.05,
            },
            &tight,
        )
        .unwrap();
        let diff: f64 = sol20
            .u
            .iter()
            .zip(&sol1.u)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = norm2(&sol20.u);
        assert!(diff / scale < 1e-8, "path dependence {diff} vs scale {scale}");
    }

    #[test]
    fn newton_converges_superlinearly_near_solution() {
        let mesh = build_rect_mesh(3, 2, 1.0, 0.7, 0.01).unwrap();
        let model = FemModel::new(mesh, &symmetric_bc()).unwrap();
        let fields = DesignFields::uniform(gel(), model.mesh.num_elements());
        let tight = NewtonSettings {
            tol_rel: 1e-12,
            ..NewtonSettings::default()
        };
        let sol = load_stepping_solve(
            &model,
            &fields,
            MU_DRY,
            MU_WET,
            &water(),
            &LoadSchedule::default(),
            &tight,
        )
        .unwrap();
        // Inspect the final step's tail: each iteration should square-ish the
        // residual (ratio r_{k+1} / r_k^2 bounded) once inside the basin.
        let norms = &sol.steps.last().unwrap().residual_norms;
        assert!(norms.len() >= 2, "expected at least one iteration in final step");
        let pairs = norms.windows(2);
        let mut saw_fast_drop = false;
        for w in pairs {
            if w[0] < 1e-2 * sol.force_scale && w[1] < 1e-3 * w[0] {
                saw_fast_drop = true;
            }
        }
        assert!(
            saw_fast_drop,
            "no superlinear contraction observed in {norms:?}"
        );
    }

    #[test]
    fn swelling_against_support_produces_compressive_reaction() {
        // Clamp both vertical edges of a swelling block: the left support
        // must push back in -x on the right side of... equivalently the net
        // x reaction on the right clamp is negative (the block pushes +x).
        let mesh = build_rect_mesh(4, 2, 1.0, 0.5, 0.01).unwrap();
        let bc = BoundaryConditions {
            dirichlet: vec![
                DirichletSpec {
                    node_set: "left".into(),
                    comp: DofComp::X,
                    value: 0.0,
                },
                DirichletSpec {
                    node_set: "right".into(),
                    comp: DofComp::X,
                    value: 0.0,
                },
                DirichletSpec {
                    node_set: "bottom".into(),
                    comp: DofComp::Y,
                    value: 0.0,
                },
            ],
            tractions: vec![],
        };
        let model = FemModel::new(mesh, &bc).unwrap();
        let fields = DesignFields::uniform(gel(), model.mesh.num_elements());
        let sol = load_stepping_solve(
            &model,
            &fields,
            MU_DRY,
            MU_WET,
            &water(),
            &LoadSchedule::default(),
            &NewtonSettings::default(),
        )
        .unwrap();
        let reactions =
            reaction_force(&model, &sol.u, &fields, MU_WET, 1.0, &water()).unwrap();
        let rx_right = set_reaction(&model, &reactions, "right", 0).unwrap();
        assert!(
            rx_right < -1.0,
            "swelling block should push outward on the right clamp, reaction = {rx_right}"
        );
        // Global balance: reactions on the two clamps cancel.
        let rx_left = set_reaction(&model, &reactions, "left", 0).unwrap();
        assert_relative_eq!(rx_left, -rx_right, max_relative = 1e-6);
    }

    #[test]
    fn reactions_balance_applied_tractions() {
        let mesh = build_rect_mesh(4, 2, 1.0, 0.5, 0.01).unwrap();
        let bc = BoundaryConditions {
            dirichlet: vec![
                DirichletSpec {
                    node_set: "left".into(),
                    comp: DofComp::X,
                    value: 0.0,
                },
                DirichletSpec {
                    node_set: "left".into(),
                    comp: DofComp::Y,
                    value: 0.0,
                },
            ],
            tractions: vec![TractionSpec {
                edge_set: "right".into(),
                traction: [2.0e4, 5.0e3],
            }],
        };
        let model = FemModel::new(mesh, &bc).unwrap();
        // Stiff dry material so the traction dominates.
        let fields = DesignFields::uniform(
            EffectiveProps {
                g: 5.0e7,
                chi: 5.0,
                eta: 0.0,
            },
            model.mesh.num_elements(),
        );
        let sol = load_stepping_solve(
            &model,
            &fields,
            MU_DRY,
            MU_DRY,
            &water(),
            &LoadSchedule::default(),
            &NewtonSettings::default(),
        )
        .unwrap();
        let reactions =
            reaction_force(&model, &sol.u, &fields, MU_DRY, 1.0, &water()).unwrap();
        // Internal forces sum to zero by translation invariance, so the total
        // of f_int - f_ext over all dofs is minus the applied resultant:
        // traction [2e4, 5e3] Pa on a 0.5 m x 0.01 m edge.
        let rx: f64 = reactions.iter().step_by(2).sum();
        let ry: f64 = reactions.iter().skip(1).step_by(2).sum();
        assert_relative_eq!(rx, -2.0e4 * 0.5 * 0.01, max_relative = 1e-8);
        assert_relative_eq!(ry, -5.0e3 * 0.5 * 0.01, max_relative = 1e-8);
        // The clamped left edge carries all of it; elsewhere the reaction is
        // the converged residual, which is below tolerance.
        let rx_left = set_reaction(&model, &reactions, "left", 0).unwrap();
        let ry_left = set_reaction(&model, &reactions, "left", 1).unwrap();
        assert_relative_eq!(rx_left, -2.0e4 * 0.5 * 0.01, max_relative = 1e-6);
        assert_relative_eq!(ry_left, -5.0e3 * 0.5 * 0.01, max_relative = 1e-6);
    }

    #[test]
    fn bilayer_beam_curls_toward_the_stiff_side() {
        // Gel on top, elastomer on bottom, cantilevered at the left edge:
        // top expansion bends the tip downward (toward the elastomer).
        // Kept at a moderate slenderness — very thin beams reach compressive
        // strains in the gel layer where the equilibrium path becomes
        // unstable (surface-creasing regime) before full swelling.
        let mesh = build_rect_mesh(12, 4, 1.0, 0.3, 0.01).unwrap();
        let bc = BoundaryConditions {
            dirichlet: vec![
                DirichletSpec {
                    node_set: "left".into(),
                    comp: DofComp::X,
                    value: 0.0,
                },
                DirichletSpec {
                    node_set: "left".into(),
                    comp: DofComp::Y,
                    value: 0.0,
                },
            ],
            tractions: vec![],
        };
        let model = FemModel::new(mesh, &bc).unwrap();
        let mut fields = DesignFields::uniform(gel(), model.mesh.num_elements());
        for e in 0..model.mesh.num_elements() {
            let c = model.mesh.element_centroid(e);
            if c[1] < 0.15 {
                fields.props[e] = EffectiveProps {
                    g: 5.0e7,
                    chi: 5.0,
                    eta: 0.0,
                };
            }
        }
        let sol = load_stepping_solve(
            &model,
            &fields,
            MU_DRY,
            MU_WET,
            &water(),
            &LoadSchedule::default(),
            &NewtonSettings::default(),
        )
        .unwrap();
        // Bottom-right corner node: last node of the bottom set.
        let tip = *model.mesh.node_set("bottom").unwrap().last().unwrap();
        let tip_uy = sol.u[2 * tip + 1];
        assert!(
            tip_uy < -0.05,
            "gel-top bilayer should bend downward, tip uy = {tip_uy}"
        );
    }

    #[test]
    fn mirrored_bilayer_flips_the_curl() {
        // Swapping the two layers mirrors the problem about the beam axis, so
        // the solved deflections must mirror too — a discrete symmetry the
        // assembly and solver have to respect exactly.
        let mesh = build_rect_mesh(12, 4, 1.0, 0.3, 0.01).unwrap();
        let bc = BoundaryConditions {
            dirichlet: vec![
                DirichletSpec {
                    node_set: "left".into(),
                    comp: DofComp::X,
                    value: 0.0,
                },
                DirichletSpec {
                    node_set: "left".into(),
                    comp: DofComp::Y,
                    value: 0.0,
                },
            ],
            tractions: vec![],
        };
        let model = FemModel::new(mesh, &bc).unwrap();
        let elastomer = EffectiveProps {
            g: 5.0e7,
            chi: 5.0,
            eta: 0.0,
        };
        let mut top_gel = DesignFields::uniform(gel(), model.mesh.num_elements());
        let mut bottom_gel = DesignFields::uniform(gel(), model.mesh.num_elements());
        for e in 0..model.mesh.num_elements() {
            let c = model.mesh.element_centroid(e);
            if c[1] < 0.15 {
                top_gel.props[e] = elastomer;
            } else {
                bottom_gel.props[e] = elastomer;
            }
        }
        let schedule = LoadSchedule::default();
        let settings = NewtonSettings::default();
        let sol_a =
            load_stepping_solve(&model, &top_gel, MU_DRY, MU_WET, &water(), &schedule, &settings)
                .unwrap();
        let sol_b = load_stepping_solve(
            &model,
            &bottom_gel,
            MU_DRY,
            MU_WET,
            &water(),
            &schedule,
            &settings,
        )
        .unwrap();
        let tip_bottom = *model.mesh.node_set("bottom").unwrap().last().unwrap();
        let tip_top = *model.mesh.node_set("top").unwrap().last().unwrap();
        // Mirror symmetry: uy of one solution at the bottom tip matches -uy
        // of the other at the top tip.
        assert_relative_eq!(
            sol_a.u[2 * tip_bottom + 1],
            -sol_b.u[2 * tip_top + 1],
            max_relative = 1e-6
        );
    }

    /// Bilayer cantilever whose coarse schedules are hard: some load jumps
    /// land the warm-started Newton in a spurious local minimum of
    /// `0.5||R||^2` where the line search stalls.
    fn hard_bilayer() -> (FemModel, DesignFields) {
        let mesh = build_rect_mesh(12, 4, 1.0, 0.3, 0.01).unwrap();
        let bc = BoundaryConditions {
            dirichlet: vec![
                DirichletSpec {
                    node_set: "left".into(),
                    comp: DofComp::X,
                    value: 0.0,
                },
                DirichletSpec {
                    node_set: "left".into(),
                    comp: DofComp::Y,
                    value: 0.0,
                },
            ],
            tractions: vec![],
        };
        let model = FemModel::new(mesh, &bc).unwrap();
        let mut fields = DesignFields::uniform(gel(), model.mesh.num_elements());
        for e in 0..model.mesh.num_elements() {
            if model.mesh.element_centroid(e)[1] < 0.15 {
                fields.props[e] = EffectiveProps {
                    g: 5.0e7,
                    chi: 5.0,
                    eta: 0.0,
                };
            }
        }
        (model, fields)
    }

    #[test]
    fn substepping_rescues_a_failing_coarse_schedule() {
        let (model, fields) = hard_bilayer();
        let coarse = LoadSchedule {
            n_steps: 4,
            beta: 0.05,
        };
        let no_subdiv = NewtonSettings {
            max_subdivisions: 0,
            ..NewtonSettings::default()
        };
        assert!(
            load_stepping_solve(&model, &fields, MU_DRY, MU_WET, &water(), &coarse, &no_subdiv)
                .is_err(),
            "the coarse schedule should fail without sub-stepping"
        );

        let sol = load_stepping_solve(
            &model,
            &fields,
            MU_DRY,
            MU_WET,
            &water(),
            &coarse,
            &NewtonSettings::default(),
        )
        .unwrap();
        assert!(
            sol.steps.iter().any(|s| s.sub_steps > 0),
            "the rescue must come from inserted sub-steps"
        );

        // Path independence: the rescued coarse run lands on the same state
        // as a plain fine schedule.
        let fine = load_stepping_solve(
            &model,
            &fields,
            MU_DRY,
            MU_WET,
            &water(),
            &LoadSchedule::default(),
            &NewtonSettings::default(),
        )
        .unwrap();
        let tip = *model.mesh.node_set("bottom").unwrap().last().unwrap();
        assert_relative_eq!(
            sol.u[2 * tip + 1],
            fine.u[2 * tip + 1],
            max_relative = 1e-3
        );
    }

    #[test]
    fn retry_wrapper_doubles_the_schedule() {
        let (model, fields) = hard_bilayer();
        // With sub-stepping disabled, a 4-step schedule fails while the
        // doubled 8-step one converges: exactly the retry wrapper's case.
        let no_subdiv = NewtonSettings {
            max_subdivisions: 0,
            ..NewtonSettings::default()
        };
        let coarse = LoadSchedule {
            n_steps: 4,
            beta: 0.05,
        };
        let (sol, retried) = load_stepping_solve_with_retry(
            &model,
            &fields,
            MU_DRY,
            MU_WET,
            &water(),
            &coarse,
            &no_subdiv,
        )
        .unwrap();
        assert!(retried, "the first attempt should have failed");
        assert_eq!(sol.steps.len(), 8);

        // A workable schedule must not trigger the retry.
        let (_, retried) = load_stepping_solve_with_retry(
            &model,
            &fields,
            MU_DRY,
            MU_WET,
            &water(),
            &LoadSchedule::default(),
            &NewtonSettings::default(),
        )
        .unwrap();
        assert!(!retried);
    }
}
