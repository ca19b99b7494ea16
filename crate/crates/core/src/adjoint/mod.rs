//! Discrete adjoint sensitivities of scalar losses with respect to network
//! weights.
//!
//! The chain runs in two implicit layers. The scalar swelling equilibrium
//! contributes `dphi/d(J2D, G, chi)` through the implicit-function theorem
//! (hosted in [`crate::material::phi_derivatives`] and consumed inside the
//! element-level contraction). The vector equilibrium `R(u*, w) = 0`
//! contributes through one adjoint solve with the transposed tangent:
//!
//! ```text
//! K^T lambda = dJ/du          (free dofs; lambda = 0 on Dirichlet dofs)
//! dL/dw = pullback( dJ/drho|explicit - lambda^T dR/drho )
//!       + pullback over theta samples of ( -lambda^T dR/dtheta )
//! ```
//!
//! Because the converged state of a hyperelastic static problem is
//! path-independent, the adjoint is evaluated at the final load step only; no
//! differentiation through the Newton history or the load schedule is needed,
//! and the finite-difference harness ([`fd_check`]) validates the whole
//! load-stepped pipeline against this final-state gradient.

use crate::error::{Error, Result};
use crate::fem::element::element_design_contraction;
use crate::fem::linalg::triplet_matvec_transpose;
use crate::fem::{norm2, DesignFields, FemModel, SparseLu};
use crate::field::{DesignNetwork, SampleCotangent, ThresholdProjection};
use crate::material::{interpolate, interpolate_with_grad, MaterialTable, SolventEnvironment};

/// Relative-residual certificate enforced on every adjoint solve:
/// `||K^T lambda - b|| / ||b||` must stay below this bound.
pub const ADJOINT_CERT_TOL: f64 = 1e-10;

/// Maximum iterative-refinement passes applied when the certificate is not
/// met by the raw factorized solve.
const MAX_REFINEMENTS: usize = 3;

/// How design densities and fiber angles map to element-level material data.
///
/// Shared by the forward realization ([`realize_design`]) and its reverse-mode
/// counterpart ([`design_gradient`]); the optimizer carries one of these per
/// load case.
#[derive(Debug, Clone, Copy)]
pub struct DesignContext<'a> {
    pub table: &'a MaterialTable,
    /// Index into `table.solvents` for the active load case.
    pub solvent: usize,
    /// Current stiffness penalization exponent (>= 1).
    pub simp_p: f64,
}

/// A design field sampled onto a mesh: phase densities per element plus the
/// interpolated effective properties ready for assembly.
#[derive(Debug, Clone)]
pub struct RealizedDesign {
    /// Physical phase densities at element centroids (post-projection when a
    /// projection was applied), one simplex vector per element.
    pub rho: Vec<Vec<f64>>,
    /// Network output densities before projection; `None` when no projection
    /// was applied (then [`RealizedDesign::rho`] is the network output).
    pub raw_rho: Option<Vec<Vec<f64>>>,
    /// The projection the densities went through, recorded so the gradient
    /// path chains through the same map.
    pub projection: Option<ThresholdProjection>,
    pub fields: DesignFields,
}

/// Samples the network at element centroids (densities) and Gauss points
/// (fiber angles, when the network has a theta head), optionally sharpens the
/// densities through a threshold projection, and interpolates the
/// candidate-phase table.
pub fn realize_design(
    net: &DesignNetwork,
    model: &FemModel,
    ctx: &DesignContext,
    projection: Option<ThresholdProjection>,
) -> Result<RealizedDesign> {
    if net.spec().n_phases != ctx.table.num_phases() {
        return Err(Error::InvalidDesign(format!(
            "network emits {} phases but the material table has {}",
            net.spec().n_phases,
            ctx.table.num_phases()
        )));
    }
    if ctx.solvent >= ctx.table.num_solvents() {
        return Err(Error::Domain(format!(
            "solvent index {} out of range ({} defined)",
            ctx.solvent,
            ctx.table.num_solvents()
        )));
    }
    let n_el = model.mesh.num_elements();
    let samples = net.eval_batch(&model.centroids());
    let mut raw_rho = Vec::with_capacity(n_el);
    let mut rho = Vec::with_capacity(n_el);
    let mut props = Vec::with_capacity(n_el);
    for s in samples {
        let physical = match &projection {
            Some(p) => p.apply(&s.rho),
            None => s.rho.clone(),
        };
        props.push(interpolate(ctx.table, &physical, ctx.solvent, ctx.simp_p)?);
        rho.push(physical);
        raw_rho.push(s.rho);
    }
    let theta = if net.spec().theta_head {
        let gauss = net.eval_batch(&model.gauss_coords());
        (0..n_el)
            .map(|e| {
                let mut t = [0.0; 4];
                for (gp, slot) in t.iter_mut().enumerate() {
                    *slot = gauss[4 * e + gp].theta.expect("theta head present");
                }
                t
            })
            .collect()
    } else {
        vec![[0.0; 4]; n_el]
    };
    Ok(RealizedDesign {
        rho,
        raw_rho: projection.is_some().then_some(raw_rho),
        projection,
        fields: DesignFields { props, theta },
    })
}

/// The converged forward state with its tangent factorization, ready for
/// adjoint solves and design-gradient assembly.
///
/// All cached pieces (tangent triplets, factorization, Gauss-point `phi`)
/// come from one assembly at the exact state used to evaluate the loss.
pub struct AdjointWorkspace<'a> {
    pub model: &'a FemModel,
    pub fields: &'a DesignFields,
    /// Converged displacements over all dofs.
    pub u: &'a [f64],
    /// Chemical potential of the state being differentiated (J/mol).
    pub mu: f64,
    pub env: &'a SolventEnvironment,
    /// Polymer volume fraction per element per Gauss point at `u`.
    pub phi: Vec<[f64; 4]>,
    /// Internal force over all dofs at `u` (used by force objectives and
    /// reaction constraints).
    pub f_int: Vec<f64>,
    lu: SparseLu,
    k_free: Vec<(usize, usize, f64)>,
    k_full: Vec<(usize, usize, f64)>,
}

impl<'a> AdjointWorkspace<'a> {
    /// Assembles and factorizes the tangent at a converged state.
    pub fn new(
        model: &'a FemModel,
        fields: &'a DesignFields,
        u: &'a [f64],
        mu: f64,
        env: &'a SolventEnvironment,
    ) -> Result<Self> {
        let sys = model.assemble(u, fields, mu, env, true)?;
        let lu = SparseLu::factorize(model.dofmap.num_free(), &sys.k_free)?;
        Ok(AdjointWorkspace {
            model,
            fields,
            u,
            mu,
            env,
            phi: sys.phi,
            f_int: sys.f_int,
            lu,
            k_free: sys.k_free,
            k_full: sys.k_full.expect("full tangent requested"),
        })
    }

    /// Solves `K^T lambda = dJ/du` on the free dofs and scatters the result
    /// to a full-length vector with zeros on Dirichlet dofs.
    ///
    /// Every solve is certified by direct substitution: the relative residual
    /// must be below [`ADJOINT_CERT_TOL`], with iterative refinement applied
    /// first if the raw solve falls short. A certificate violation is a hard
    /// [`Error::AdjointFailure`], never a silently degraded gradient.
    pub fn adjoint_solve(&self, dj_du: &[f64]) -> Result<Vec<f64>> {
        let n = self.model.num_dofs();
        if dj_du.len() != n {
            return Err(Error::Domain(format!(
                "dJ/du has {} entries, expected {n}",
                dj_du.len()
            )));
        }
        let b = self.model.dofmap.restrict(dj_du);
        let b_norm = norm2(&b);
        if b_norm == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let m = self.lu.dim();
        let mut lam = self.lu.solve_transpose(&b);
        let mut rel = f64::INFINITY;
        for refinement in 0..=MAX_REFINEMENTS {
            let kt_lam = triplet_matvec_transpose(m, &self.k_free, &lam);
            let mut r = vec![0.0; m];
            for i in 0..m {
                r[i] = b[i] - kt_lam[i];
            }
            rel = norm2(&r) / b_norm;
            if rel < ADJOINT_CERT_TOL {
                return Ok(self.model.dofmap.scatter(&lam));
            }
            if refinement < MAX_REFINEMENTS {
                let delta = self.lu.solve_transpose(&r);
                for i in 0..m {
                    lam[i] += delta[i];
                }
            }
        }
        Err(Error::AdjointFailure(format!(
            "residual certificate violated: ||K^T lambda - b||/||b|| = {rel:.3e} \
             (tolerance {ADJOINT_CERT_TOL:e}) after {MAX_REFINEMENTS} refinement passes"
        )))
    }

    /// `dJ/du` for a force objective `J = l^T f_int(u)`: the transposed
    /// internal-force Jacobian applied to the selector, `K_full^T l`, over all
    /// dofs.
    ///
    /// `l` typically selects Dirichlet-fixed reaction dofs; the dependence on
    /// the free displacements enters through the off-diagonal tangent blocks,
    /// which is why the full (unconstrained) tangent is used.
    pub fn force_objective_dj_du(&self, l: &[f64]) -> Vec<f64> {
        assert_eq!(l.len(), self.model.num_dofs(), "selector length mismatch");
        triplet_matvec_transpose(self.model.num_dofs(), &self.k_full, l)
    }
}

/// Assembles `dL/dw`: the explicit design dependence of the loss combined
/// with the adjoint term `-lambda^T dR/d(rho, theta)`, pulled back through
/// the projection (when one was applied), the interpolation rule, and the
/// network.
///
/// `realized` must be the design the workspace state was solved on;
/// `explicit_rho` carries `dJ/drho` (with respect to the *physical*
/// densities `realized.rho`) for loss terms that read the densities directly
/// — volume or grayness constraints — or `None` when the loss depends on the
/// design only through the state.
pub fn design_gradient(
    ws: &AdjointWorkspace,
    lambda: &[f64],
    net: &DesignNetwork,
    ctx: &DesignContext,
    realized: &RealizedDesign,
    explicit_rho: Option<&[Vec<f64>]>,
) -> Result<Vec<f64>> {
    let n_el = ws.model.mesh.num_elements();
    let n_phases = ctx.table.num_phases();
    let rho = &realized.rho;
    if lambda.len() != ws.model.num_dofs() {
        return Err(Error::Domain(format!(
            "lambda has {} entries, expected {}",
            lambda.len(),
            ws.model.num_dofs()
        )));
    }
    if rho.len() != n_el {
        return Err(Error::InvalidDesign(format!(
            "density field has {} elements, mesh has {n_el}",
            rho.len()
        )));
    }
    if let Some(ex) = explicit_rho {
        if ex.len() != n_el {
            return Err(Error::InvalidDesign(format!(
                "explicit cotangent has {} elements, mesh has {n_el}",
                ex.len()
            )));
        }
    }

    let mut rho_cots = Vec::with_capacity(n_el);
    let mut theta_cots = vec![0.0; 4 * n_el];
    for e in 0..n_el {
        let mut c = match explicit_rho {
            Some(ex) => {
                if ex[e].len() != n_phases {
                    return Err(Error::InvalidDesign(format!(
                        "explicit cotangent for element {e} has {} phases, expected {n_phases}",
                        ex[e].len()
                    )));
                }
                ex[e].clone()
            }
            None => vec![0.0; n_phases],
        };
        let lam_e = ws.model.element_disp(lambda, e);
        // The contraction is linear in lambda, so elements the adjoint does
        // not touch contribute exactly nothing; skipping them keeps the
        // state-independent loss path bit-identical to a direct pullback.
        if lam_e.iter().any(|&v| v != 0.0) {
            let d_e = ws.model.element_disp(ws.u, e);
            let con = element_design_contraction(
                &ws.model.geoms[e],
                &d_e,
                &lam_e,
                &ws.fields.props[e],
                &ws.fields.theta[e],
                ws.mu,
                ws.env,
                e,
            )?;
            let grads = interpolate_with_grad(ctx.table, &rho[e], ctx.solvent, ctx.simp_p)?;
            for m in 0..n_phases {
                c[m] -= con.dg * grads.dg[m] + con.dchi * grads.dchi[m] + con.deta * grads.deta[m];
            }
            for gp in 0..4 {
                theta_cots[4 * e + gp] = -con.dtheta[gp];
            }
        }
        // A projection sits between the network output and the physical
        // densities; chain the cotangent through its Jacobian.
        if let Some(proj) = &realized.projection {
            let raw = realized
                .raw_rho
                .as_ref()
                .expect("projected designs record their raw densities");
            c = proj.pullback(&raw[e], &c);
        }
        rho_cots.push(SampleCotangent {
            d_rho: Some(c),
            d_theta: None,
        });
    }

    let mut grad = net.pullback(&ws.model.centroids(), &rho_cots)?;
    // Without a theta head the fiber angles are fixed data, not a function of
    // the weights, and their sensitivities simply do not propagate.
    if net.spec().theta_head {
        let cots: Vec<SampleCotangent> = theta_cots
            .into_iter()
            .map(|v| SampleCotangent {
                d_rho: None,
                d_theta: Some(v),
            })
            .collect();
        let theta_grad = net.pullback(&ws.model.gauss_coords(), &cots)?;
        for (g, t) in grad.iter_mut().zip(&theta_grad) {
            *g += t;
        }
    }
    Ok(grad)
}

/// One adjoint-vs-finite-difference comparison in an [`fd_check`] report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdCheckRow {
    /// Central-difference step used.
    pub h: f64,
    /// Index of the perturbed weight.
    pub component: usize,
    /// Adjoint gradient entry.
    pub adjoint: f64,
    /// Central finite difference of the loss.
    pub fd: f64,
    /// `|adjoint - fd| / max(|adjoint|, |fd|)` (zero when both vanish).
    pub rel_error: f64,
}

/// Compares an adjoint gradient against central finite differences of the
/// full loss pipeline over selected components and step sizes.
///
/// `loss` must evaluate the complete chain (realize, forward solve, objective)
/// at arbitrary nearby weights; `grad` is the adjoint gradient at `params`.
/// Sweeping `h_values` across several decades exposes the characteristic
/// V-shaped error curve: truncation error shrinks with `h` until roundoff in
/// the loss takes over.
pub fn fd_check<F>(
    params: &[f64],
    grad: &[f64],
    components: &[usize],
    h_values: &[f64],
    mut loss: F,
) -> Result<Vec<FdCheckRow>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if grad.len() != params.len() {
        return Err(Error::Domain(format!(
            "gradient has {} entries, params have {}",
            grad.len(),
            params.len()
        )));
    }
    let mut rows = Vec::with_capacity(components.len() * h_values.len());
    let mut work = params.to_vec();
    for &k in components {
        if k >= params.len() {
            return Err(Error::Domain(format!(
                "component {k} out of range ({} weights)",
                params.len()
            )));
        }
        for &h in h_values {
            work[k] = params[k] + h;
            let j_plus = loss(&work)?;
            work[k] = params[k] - h;
            let j_minus = loss(&work)?;
            work[k] = params[k];
            let fd = (j_plus - j_minus) / (2.0 * h);
            let denom = grad[k].abs().max(fd.abs());
            let rel_error = if denom == 0.0 {
                0.0
            } else {
                (grad[k] - fd).abs() / denom
            };
            rows.push(FdCheckRow {
                h,
                component: k,
                adjoint: grad[k],
                fd,
                rel_error,
            });
        }
    }
    Ok(rows)
}

/// Renders an [`fd_check`] report as CSV (`h, component, adjoint, fd,
/// rel_error`), with enough digits to round-trip the values.
pub fn fd_report_csv(rows: &[FdCheckRow]) -> String {
    let mut out = String::from("h,component,adjoint,fd,rel_error\n");
    for r in rows {
        out.push_str(&format!(
            "{:e},{},{:e},{:e},{:e}\n",
            r.h, r.component, r.adjoint, r.fd, r.rel_error
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::bc::{BoundaryConditions, DirichletSpec, DofComp};
    use crate::fem::{load_stepping_solve, LoadSchedule, NewtonSettings};
    use crate::field::NetworkSpec;
    use crate::material::{phi_derivatives, MaterialTable, Phase, Solvent, SwellingState};
    use crate::mesh::build_rect_mesh;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn water() -> SolventEnvironment {
        SolventEnvironment {
            molar_volume: 1.8e-5,
            temperature: 298.0,
            mu0: 0.0,
        }
    }

    const MU_DRY: f64 = -1.0e5;
    const MU_WET: f64 = -2000.0;

    fn table() -> MaterialTable {
        MaterialTable {
            phases: vec![
                Phase {
                    name: "gel".into(),
                    shear_modulus: 1.0e6,
                    fiber_stiffness: 0.0,
                    chi: vec![0.2],
                },
                Phase {
                    name: "elastomer".into(),
                    shear_modulus: 2.0e7,
                    fiber_stiffness: 0.0,
                    chi: vec![5.0],
                },
                Phase {
                    name: "void".into(),
                    shear_modulus: 1.0e4,
                    fiber_stiffness: 0.0,
                    chi: vec![5.0],
                },
            ],
            solvents: vec![Solvent {
                name: "water".into(),
                environment: water(),
                mu_dry: MU_DRY,
                mu_wet: MU_WET,
            }],
        }
    }

    fn left_clamped() -> BoundaryConditions {
        BoundaryConditions {
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
        }
    }

    fn small_model() -> FemModel {
        let mesh = build_rect_mesh(4, 2, 0.4, 0.2, 0.01).unwrap();
        FemModel::new(mesh, &left_clamped()).unwrap()
    }

    fn small_net(theta_head: bool, seed: u64) -> DesignNetwork {
        let spec = NetworkSpec {
            seed,
            num_fourier: 4,
            hidden: 8,
            n_phases: 3,
            theta_head,
            bandwidth: 1.0,
        };
        DesignNetwork::init(spec, [[0.0, 0.0], [0.4, 0.2]]).unwrap()
    }

    fn tight_newton() -> NewtonSettings {
        NewtonSettings {
            tol_rel: 1e-12,
            ..NewtonSettings::default()
        }
    }

    fn short_schedule() -> LoadSchedule {
        LoadSchedule {
            n_steps: 6,
            beta: 0.05,
        }
    }

    /// Mean squared displacement over the right-edge nodes (target zero), and
    /// its dJ/du over all dofs.
    fn edge_mse(model: &FemModel, u: &[f64]) -> (f64, Vec<f64>) {
        let nodes = model.mesh.node_set("right").unwrap();
        let n_s = nodes.len() as f64;
        let mut j = 0.0;
        let mut dj = vec![0.0; model.num_dofs()];
        for &n in nodes {
            for d in [2 * n, 2 * n + 1] {
                j += u[d] * u[d] / n_s;
                dj[d] = 2.0 * u[d] / n_s;
            }
        }
        (j, dj)
    }

    /// Full pipeline at given weights: realize the design, run the
    /// load-stepped forward solve, evaluate the edge loss.
    fn pipeline_loss(
        model: &FemModel,
        proto: &DesignNetwork,
        ctx: &DesignContext,
        params: &[f64],
    ) -> Result<f64> {
        let mut net = proto.clone();
        net.params_mut().copy_from_slice(params);
        let realized = realize_design(&net, model, ctx, None)?;
        let sol = load_stepping_solve(
            model,
            &realized.fields,
            MU_DRY,
            MU_WET,
            &water(),
            &short_schedule(),
            &tight_newton(),
        )?;
        Ok(edge_mse(model, &sol.u).0)
    }

    /// Adjoint gradient of the same pipeline at the network's current weights.
    fn pipeline_gradient(
        model: &FemModel,
        net: &DesignNetwork,
        ctx: &DesignContext,
    ) -> Result<Vec<f64>> {
        let realized = realize_design(net, model, ctx, None)?;
        let sol = load_stepping_solve(
            model,
            &realized.fields,
            MU_DRY,
            MU_WET,
            &water(),
            &short_schedule(),
            &tight_newton(),
        )?;
        let env = water();
        let ws = AdjointWorkspace::new(model, &realized.fields, &sol.u, MU_WET, &env)?;
        let (_, dj_du) = edge_mse(model, &sol.u);
        let lambda = ws.adjoint_solve(&dj_du)?;
        design_gradient(&ws, &lambda, net, ctx, &realized, None)
    }

    #[test]
    fn g_zero_removes_the_stretch_dependence() {
        // With G = 0 the residual loses its J2D term entirely, so the root
        // cannot move with the stretch. phi = 0.4 solves the G = 0 residual
        // at mu = RT (ln 0.6 + 0.4 + 0.2 * 0.16).
        let env = water();
        let mu = env.rt() * ((0.6f64).ln() + 0.4 + 0.2 * 0.16);
        let state = SwellingState {
            phi: 0.4,
            clamped: false,
        };
        let d = phi_derivatives(&state, 1.5, 0.0, 0.2, mu, &env).unwrap();
        assert_eq!(d.dphi_dj, 0.0);
        assert_eq!(d.d2phi_dj2, 0.0);
        // The chi sensitivity survives and keeps its sign.
        assert!(d.dphi_dchi > 0.0);
    }

    #[test]
    fn singular_fold_is_a_hard_error() {
        // At G = 0, chi = 1, phi = 1/2 the phi-derivative of the residual is
        // exactly -1/(1-phi) + 1 + 2 chi phi = 0: a swelling fold, where the
        // implicit derivative does not exist.
        let state = SwellingState {
            phi: 0.5,
            clamped: false,
        };
        let err = phi_derivatives(&state, 1.0, 0.0, 1.0, -500.0, &water()).unwrap_err();
        assert!(matches!(err, Error::SingularEquilibrium { .. }), "{err}");
    }

    #[test]
    fn zero_rhs_gives_zero_adjoint() {
        let model = small_model();
        let net = small_net(false, 11);
        let ctx = DesignContext {
            table: &table(),
            solvent: 0,
            simp_p: 2.0,
        };
        let realized = realize_design(&net, &model, &ctx, None).unwrap();
        let sol = load_stepping_solve(
            &model,
            &realized.fields,
            MU_DRY,
            MU_WET,
            &water(),
            &short_schedule(),
            &NewtonSettings::default(),
        )
        .unwrap();
        let env = water();
        let ws = AdjointWorkspace::new(&model, &realized.fields, &sol.u, MU_WET, &env).unwrap();
        let lam = ws.adjoint_solve(&vec![0.0; model.num_dofs()]).unwrap();
        assert!(lam.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_tangent_makes_adjoint_equal_forward_solve() {
        let model = small_model();
        let net = small_net(false, 11);
        let ctx = DesignContext {
            table: &table(),
            solvent: 0,
            simp_p: 2.0,
        };
        let realized = realize_design(&net, &model, &ctx, None).unwrap();
        let sol = load_stepping_solve(
            &model,
            &realized.fields,
            MU_DRY,
            MU_WET,
            &water(),
            &short_schedule(),
            &NewtonSettings::default(),
        )
        .unwrap();
        let env = water();
        let ws = AdjointWorkspace::new(&model, &realized.fields, &sol.u, MU_WET, &env).unwrap();

        // An arbitrary smooth right-hand side over all dofs.
        let dj: Vec<f64> = (0..model.num_dofs())
            .map(|d| ((d as f64) * 0.37).sin())
            .collect();
        let lam = ws.adjoint_solve(&dj).unwrap();

        // The energy-based tangent is symmetric, so K^T x = b and K x = b
        // have the same solution.
        let fwd = ws.lu.solve(&model.dofmap.restrict(&dj));
        let fwd_full = model.dofmap.scatter(&fwd);
        for d in 0..model.num_dofs() {
            assert_relative_eq!(lam[d], fwd_full[d], max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn certificate_holds_and_fixed_dofs_stay_zero() {
        let model = small_model();
        let net = small_net(false, 11);
        let ctx = DesignContext {
            table: &table(),
            solvent: 0,
            simp_p: 2.0,
        };
        let realized = realize_design(&net, &model, &ctx, None).unwrap();
        let sol = load_stepping_solve(
            &model,
            &realized.fields,
            MU_DRY,
            MU_WET,
            &water(),
            &short_schedule(),
            &NewtonSettings::default(),
        )
        .unwrap();
        let env = water();
        let ws = AdjointWorkspace::new(&model, &realized.fields, &sol.u, MU_WET, &env).unwrap();
        let (_, dj) = edge_mse(&model, &sol.u);
        let lam = ws.adjoint_solve(&dj).unwrap();

        // Re-check the certificate from outside.
        let b = model.dofmap.restrict(&dj);
        let lam_free = model.dofmap.restrict(&lam);
        let kt_lam = triplet_matvec_transpose(ws.lu.dim(), &ws.k_free, &lam_free);
        let r: Vec<f64> = kt_lam.iter().zip(&b).map(|(a, b)| a - b).collect();
        assert!(norm2(&r) / norm2(&b) < ADJOINT_CERT_TOL);

        for (d, &fx) in model.dofmap.fixed.iter().enumerate() {
            if fx {
                assert_eq!(lam[d], 0.0, "dof {d} is constrained");
            }
        }
    }

    #[test]
    fn force_objective_dj_du_matches_finite_differences() {
        let model = small_model();
        let net = small_net(false, 11);
        let ctx = DesignContext {
            table: &table(),
            solvent: 0,
            simp_p: 2.0,
        };
        let realized = realize_design(&net, &model, &ctx, None).unwrap();
        let sol = load_stepping_solve(
            &model,
            &realized.fields,
            MU_DRY,
            MU_WET,
            &water(),
            &short_schedule(),
            &NewtonSettings::default(),
        )
        .unwrap();
        let env = water();
        let ws = AdjointWorkspace::new(&model, &realized.fields, &sol.u, MU_WET, &env).unwrap();

        // Select the x-reactions on the clamped left edge.
        let mut l = vec![0.0; model.num_dofs()];
        for &n in model.mesh.node_set("left").unwrap() {
            l[2 * n] = 1.0;
        }
        let dj = ws.force_objective_dj_du(&l);

        let j_of = |u: &[f64]| -> f64 {
            let f = model.internal_force(u, &realized.fields, MU_WET, &water()).unwrap();
            l.iter().zip(&f).map(|(a, b)| a * b).sum()
        };
        // Only dofs in elements touching the clamped edge couple to the
        // selector (K is sparse), so sweep everything and count the live ones.
        let h = 1e-7;
        let mut checked = 0;
        for d in 0..model.num_dofs() {
            let mut up = sol.u.clone();
            up[d] += h;
            let mut um = sol.u.clone();
            um[d] -= h;
            let fd = (j_of(&up) - j_of(&um)) / (2.0 * h);
            if fd.abs() > 1e-3 {
                assert_relative_eq!(dj[d], fd, max_relative = 2e-5);
                checked += 1;
            }
        }
        assert!(checked >= 8, "only {checked} dofs carried a useful signal");
    }

    /// End-to-end weight gradient of a reaction objective `J = l^T f_int`.
    /// Unlike a displacement loss, J depends on the design twice: through the
    /// state and directly through f_int. The adjoint carries the first part;
    /// the second is the same element contraction evaluated with the selector
    /// weights, which sit exactly on the fixed dofs where lambda is zero, so
    /// passing `lambda - l` to [`design_gradient`] captures both at once.
    #[test]
    fn force_pipeline_gradient_matches_finite_differences() {
        let model = small_model();
        let net = small_net(false, 11);
        let tbl = table();
        let ctx = DesignContext {
            table: &tbl,
            solvent: 0,
            simp_p: 2.0,
        };
        let env = water();
        // Summing the whole clamped edge would return zero for every design
        // (the only support of a free body carries no net force), so select a
        // single mid-edge node whose reaction share is genuinely nonzero.
        let mid = model.mesh.node_set("left").unwrap()[1];
        let mut l = vec![0.0; model.num_dofs()];
        l[2 * mid] = 1.0;

        let solve = |params: &[f64]| -> Result<(RealizedDesign, Vec<f64>)> {
            let mut n = net.clone();
            n.params_mut().copy_from_slice(params);
            let realized = realize_design(&n, &model, &ctx, None)?;
            let sol = load_stepping_solve(
                &model,
                &realized.fields,
                MU_DRY,
                MU_WET,
                &env,
                &short_schedule(),
                &tight_newton(),
            )?;
            Ok((realized, sol.u))
        };
        let loss = |params: &[f64]| -> Result<f64> {
            let (realized, u) = solve(params)?;
            let f = model.internal_force(&u, &realized.fields, MU_WET, &env)?;
            Ok(l.iter().zip(&f).map(|(a, b)| a * b).sum())
        };

        let (realized, u) = solve(net.params()).unwrap();
        let ws = AdjointWorkspace::new(&model, &realized.fields, &u, MU_WET, &env).unwrap();
        let dj_du = ws.force_objective_dj_du(&l);
        let mut lam = ws.adjoint_solve(&dj_du).unwrap();
        for (a, b) in lam.iter_mut().zip(&l) {
            *a -= b;
        }
        let grad = design_gradient(&ws, &lam, &net, &ctx, &realized, None).unwrap();
        assert!(norm2(&grad) > 0.0);

        let n = net.num_params();
        let components: Vec<usize> = (0..10).map(|i| i * (n - 1) / 9).collect();
        let rows = fd_check(net.params(), &grad, &components, &[1e-4, 1e-5, 1e-6], loss).unwrap();
        let g_scale = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for &c in &components {
            // Each step size trades truncation against roundoff differently;
            // a component passes if its best step agrees.
            let best = rows
                .iter()
                .filter(|r| r.component == c)
                .min_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
                .unwrap();
            if best.adjoint.abs().max(best.fd.abs()) > 1e-8 * g_scale {
                assert!(
                    best.rel_error < 1e-5,
                    "weight {}: adjoint {} vs FD {} (rel {})",
                    best.component,
                    best.adjoint,
                    best.fd,
                    best.rel_error
                );
            } else {
                assert_abs_diff_eq!(best.adjoint, best.fd, epsilon = 1e-8 * g_scale);
            }
        }
    }

    #[test]
    fn pure_design_loss_equals_direct_pullback() {
        let model = small_model();
        let net = small_net(false, 11);
        let ctx = DesignContext {
            table: &table(),
            solvent: 0,
            simp_p: 2.0,
        };
        let realized = realize_design(&net, &model, &ctx, None).unwrap();
        let sol = load_stepping_solve(
            &model,
            &realized.fields,
            MU_DRY,
            MU_WET,
            &water(),
            &short_schedule(),
            &NewtonSettings::default(),
        )
        .unwrap();
        let env = water();
        let ws = AdjointWorkspace::new(&model, &realized.fields, &sol.u, MU_WET, &env).unwrap();

        // A grayness-style cotangent: d/drho of rho (1 - rho), per phase.
        let explicit: Vec<Vec<f64>> = realized
            .rho
            .iter()
            .map(|r| r.iter().map(|&x| 1.0 - 2.0 * x).collect())
            .collect();
        let lambda = vec![0.0; model.num_dofs()];
        let grad =
            design_gradient(&ws, &lambda, &net, &ctx, &realized, Some(&explicit)).unwrap();

        let cots: Vec<SampleCotangent> = explicit
            .iter()
            .map(|c| SampleCotangent {
                d_rho: Some(c.clone()),
                d_theta: None,
            })
            .collect();
        let direct = net.pullback(&model.centroids(), &cots).unwrap();
        assert_eq!(grad, direct, "state-independent path must be bit-identical");
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let model = small_model();
        let net = small_net(false, 11);
        let ctx = DesignContext {
            table: &table(),
            solvent: 0,
            simp_p: 2.0,
        };
        let realized = realize_design(&net, &model, &ctx, None).unwrap();
        let sol = load_stepping_solve(
            &model,
            &realized.fields,
            MU_DRY,
            MU_WET,
            &water(),
            &short_schedule(),
            &NewtonSettings::default(),
        )
        .unwrap();
        let env = water();
        let ws = AdjointWorkspace::new(&model, &realized.fields, &sol.u, MU_WET, &env).unwrap();
        let (_, dj) = edge_mse(&model, &sol.u);
        let lam = ws.adjoint_solve(&dj).unwrap();
        let explicit: Vec<Vec<f64>> = realized
            .rho
            .iter()
            .map(|r| r.iter().map(|&x| 1.0 - 2.0 * x).collect())
            .collect();

        let g1 = design_gradient(&ws, &lam, &net, &ctx, &realized, Some(&explicit)).unwrap();

        let c = 3.5;
        let lam_c: Vec<f64> = lam.iter().map(|v| c * v).collect();
        let explicit_c: Vec<Vec<f64>> = explicit
            .iter()
            .map(|r| r.iter().map(|v| c * v).collect())
            .collect();
        let g2 =
            design_gradient(&ws, &lam_c, &net, &ctx, &realized, Some(&explicit_c)).unwrap();

        let scale = g1.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(scale > 0.0);
        for (a, b) in g1.iter().zip(&g2) {
            assert_abs_diff_eq!(c * a, *b, epsilon = 1e-14 * c * scale);
        }
    }

    #[test]
    fn full_chain_gradient_matches_finite_differences() {
        let model = small_model();
        // Hidden width 8 keeps every ReLU comfortably away from its kink for
        // this seed (a fully dead layer, the hazard at tiny widths, is not
        // realistically reachable at width 8).
        let net = small_net(false, 11);
        let tbl = table();
        let ctx = DesignContext {
            table: &tbl,
            solvent: 0,
            simp_p: 2.0,
        };
        let grad = pipeline_gradient(&model, &net, &ctx).unwrap();
        assert!(norm2(&grad) > 0.0);

        let n = net.num_params();
        let components: Vec<usize> = (0..10).map(|i| i * (n - 1) / 9).collect();
        let rows = fd_check(net.params(), &grad, &components, &[1e-5], |p| {
            pipeline_loss(&model, &net, &ctx, p)
        })
        .unwrap();
        let g_scale = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for r in &rows {
            // Components at the noise floor of the finite difference are
            // checked absolutely instead of relatively.
            if r.adjoint.abs().max(r.fd.abs()) > 1e-8 * g_scale {
                assert!(
                    r.rel_error < 1e-5,
                    "weight {}: adjoint {} vs FD {} (rel {})",
                    r.component,
                    r.adjoint,
                    r.fd,
                    r.rel_error
                );
            } else {
                assert_abs_diff_eq!(r.adjoint, r.fd, epsilon = 1e-8 * g_scale);
            }
        }
    }

    #[test]
    fn projected_gradient_matches_finite_differences() {
        let model = small_model();
        let net = small_net(false, 11);
        let tbl = table();
        let ctx = DesignContext {
            table: &tbl,
            solvent: 0,
            simp_p: 2.0,
        };
        let proj = Some(crate::field::ThresholdProjection {
            beta: 4.0,
            eta: 0.5,
        });
        let env = water();

        let loss = |p: &[f64]| -> Result<f64> {
            let mut n = net.clone();
            n.params_mut().copy_from_slice(p);
            let realized = realize_design(&n, &model, &ctx, proj)?;
            let sol = load_stepping_solve(
                &model,
                &realized.fields,
                MU_DRY,
                MU_WET,
                &env,
                &short_schedule(),
                &tight_newton(),
            )?;
            Ok(edge_mse(&model, &sol.u).0)
        };

        let realized = realize_design(&net, &model, &ctx, proj).unwrap();
        let sol = load_stepping_solve(
            &model,
            &realized.fields,
            MU_DRY,
            MU_WET,
            &env,
            &short_schedule(),
            &tight_newton(),
        )
        .unwrap();
        let ws = AdjointWorkspace::new(&model, &realized.fields, &sol.u, MU_WET, &env).unwrap();
        let (_, dj) = edge_mse(&model, &sol.u);
        let lam = ws.adjoint_solve(&dj).unwrap();
        let grad = design_gradient(&ws, &lam, &net, &ctx, &realized, None).unwrap();
        assert!(norm2(&grad) > 0.0);

        let n = net.num_params();
        let components: Vec<usize> = (0..8).map(|i| i * (n - 1) / 7).collect();
        let rows = fd_check(net.params(), &grad, &components, &[1e-5], loss).unwrap();
        let g_scale = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for r in &rows {
            if r.adjoint.abs().max(r.fd.abs()) > 1e-8 * g_scale {
                assert!(
                    r.rel_error < 1e-5,
                    "weight {}: adjoint {} vs FD {} (rel {})",
                    r.component,
                    r.adjoint,
                    r.fd,
                    r.rel_error
                );
            } else {
                assert_abs_diff_eq!(r.adjoint, r.fd, epsilon = 1e-8 * g_scale);
            }
        }
    }

    #[test]
    fn theta_head_gradient_matches_finite_differences() {
        let model = small_model();
        let net = small_net(true, 5);
        // Strong fibers in the gel phase so the angle field carries a healthy
        // share of the loss.
        let mut tbl = table();
        tbl.phases[0].fiber_stiffness = 5.0e6;
        let ctx = DesignContext {
            table: &tbl,
            solvent: 0,
            simp_p: 2.0,
        };
        let grad = pipeline_gradient(&model, &net, &ctx).unwrap();

        // The theta head occupies the trailing weights; make sure it actually
        // contributes before checking it against FD.
        let n = net.num_params();
        let head_start = n - (net.spec().hidden + 1);
        let head_norm = norm2(&grad[head_start..]);
        assert!(head_norm > 0.0, "theta head gradient is identically zero");

        let mut components: Vec<usize> = (0..6).map(|i| i * (head_start - 1) / 5).collect();
        components.extend([head_start, head_start + 3, n - 1]);
        let rows = fd_check(net.params(), &grad, &components, &[1e-5], |p| {
            pipeline_loss(&model, &net, &ctx, p)
        })
        .unwrap();
        let g_scale = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for r in &rows {
            if r.adjoint.abs().max(r.fd.abs()) > 1e-7 * g_scale {
                assert!(
                    r.rel_error < 1e-4,
                    "weight {}: adjoint {} vs FD {} (rel {})",
                    r.component,
                    r.adjoint,
                    r.fd,
                    r.rel_error
                );
            } else {
                assert_abs_diff_eq!(r.adjoint, r.fd, epsilon = 1e-7 * g_scale);
            }
        }
    }

    #[test]
    fn fd_check_reports_v_curve_and_is_reproducible() {
        let model = small_model();
        let net = small_net(false, 11);
        let tbl = table();
        let ctx = DesignContext {
            table: &tbl,
            solvent: 0,
            simp_p: 2.0,
        };
        let grad = pipeline_gradient(&model, &net, &ctx).unwrap();

        // One well-populated component, swept over four decades of h.
        let k = grad
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        let hs = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7];
        let run = || {
            fd_check(net.params(), &grad, &[k], &hs, |p| {
                pipeline_loss(&model, &net, &ctx, p)
            })
            .unwrap()
        };
        let rows = run();
        let best = rows
            .iter()
            .map(|r| r.rel_error)
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-5, "best rel error over the sweep: {best}");
        // The sweep's minimum sits strictly inside: coarse h suffers
        // truncation, tiny h suffers roundoff.
        assert!(rows.first().unwrap().rel_error > best);
        assert!(rows.last().unwrap().rel_error > best);

        // Determinism: the identical sweep reproduces bitwise.
        assert_eq!(rows, run());

        let csv = fd_report_csv(&rows);
        assert!(csv.starts_with("h,component,adjoint,fd,rel_error\n"));
        assert_eq!(csv.lines().count(), 1 + rows.len());
    }

    #[test]
    fn fd_check_constant_loss_gives_zero_everywhere() {
        let params = vec![0.3, -0.7, 1.1];
        let grad = vec![0.0; 3];
        let rows = fd_check(&params, &grad, &[0, 1, 2], &[1e-4, 1e-6], |_| Ok(2.25)).unwrap();
        for r in &rows {
            assert_eq!(r.adjoint, 0.0);
            assert_eq!(r.fd, 0.0);
            assert_eq!(r.rel_error, 0.0);
        }
    }

    #[test]
    fn realize_design_matches_pointwise_evaluation() {
        let model = small_model();
        let net = small_net(true, 3);
        let tbl = table();
        let ctx = DesignContext {
            table: &tbl,
            solvent: 0,
            simp_p: 1.7,
        };
        let realized = realize_design(&net, &model, &ctx, None).unwrap();
        let centroids = model.centroids();
        let gauss = model.gauss_coords();
        for e in 0..model.mesh.num_elements() {
            let s = net.eval(&centroids[e]);
            assert_eq!(realized.rho[e], s.rho);
            let props = interpolate(&tbl, &s.rho, 0, 1.7).unwrap();
            assert_eq!(realized.fields.props[e], props);
            for gp in 0..4 {
                let t = net.eval(&gauss[4 * e + gp]).theta.unwrap();
                assert_eq!(realized.fields.theta[e][gp], t);
            }
        }

        // Without a theta head the angles are zero.
        let plain = small_net(false, 3);
        let r2 = realize_design(&plain, &model, &ctx, None).unwrap();
        assert!(r2.fields.theta.iter().all(|t| *t == [0.0; 4]));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let model = small_model();
        let net = small_net(false, 11);
        let tbl = table();
        let ctx = DesignContext {
            table: &tbl,
            solvent: 0,
            simp_p: 2.0,
        };

        // Wrong phase count.
        let wrong = DesignNetwork::init(
            NetworkSpec {
                n_phases: 2,
                ..*net.spec()
            },
            [[0.0, 0.0], [0.4, 0.2]],
        )
        .unwrap();
        assert!(matches!(
            realize_design(&wrong, &model, &ctx, None),
            Err(Error::InvalidDesign(_))
        ));

        // Solvent index out of range.
        let bad_ctx = DesignContext {
            table: &tbl,
            solvent: 3,
            simp_p: 2.0,
        };
        assert!(matches!(
            realize_design(&net, &model, &bad_ctx, None),
            Err(Error::Domain(_))
        ));

        // Mismatched lambda length.
        let realized = realize_design(&net, &model, &ctx, None).unwrap();
        let sol = load_stepping_solve(
            &model,
            &realized.fields,
            MU_DRY,
            MU_WET,
            &water(),
            &short_schedule(),
            &NewtonSettings::default(),
        )
        .unwrap();
        let env = water();
        let ws = AdjointWorkspace::new(&model, &realized.fields, &sol.u, MU_WET, &env).unwrap();
        assert!(ws.adjoint_solve(&vec![0.0; 3]).is_err());
        assert!(design_gradient(&ws, &vec![0.0; 3], &net, &ctx, &realized, None).is_err());
    }
}
