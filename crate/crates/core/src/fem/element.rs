//! Bilinear quadrilateral element with F-bar volumetric averaging.
//!
//! Swelling is nearly isochoric in the solvent-rich limit, so plain bilinear
//! quads lock. The remedy used here replaces the deformation gradient at each
//! Gauss point by
//!
//! ```text
//! Fbar = r F,    r = (det Fc / det F)^(1/2)
//! ```
//!
//! with `Fc` evaluated at the element centroid, so every Gauss point carries
//! the centroid's area change (`det Fbar = det Fc`). The element *energy* is
//! defined as the quadrature sum of `psi(Fbar)`; internal force and stiffness
//! are its exact first and second derivatives, which keeps the global tangent
//! symmetric and makes adjoint sensitivities consistent by construction. The
//! `r`-derivative chain terms are closed-form below and finite-difference
//! checked in the tests.

use nalgebra::Matrix2;

use crate::error::{Error, Result};
use crate::material::{
    pk1_param_sensitivities, pk1_stress_and_tangent, strain_energy, EffectiveProps,
    SolventEnvironment,
};
use crate::mesh::{dshape4, shape4, QuadMesh};

/// 2x2 Gauss abscissa on [-1, 1].
pub const GAUSS_1D: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)

/// Gauss points in element-local order (counter-clockwise, matching nodes).
pub const GAUSS_POINTS: [(f64, f64); 4] = [
    (-GAUSS_1D, -GAUSS_1D),
    (GAUSS_1D, -GAUSS_1D),
    (GAUSS_1D, GAUSS_1D),
    (-GAUSS_1D, GAUSS_1D),
];

/// Reference-configuration geometry of one quadrature point.
#[derive(Debug, Clone, Copy)]
pub struct GpGeom {
    /// Shape-function gradients with respect to reference coordinates.
    pub grad: [[f64; 2]; 4],
    /// Quadrature weight including mapping Jacobian and thickness (m^3 per
    /// unit of integrand).
    pub weight: f64,
    /// Physical coordinates of the point in the reference configuration.
    pub coord: [f64; 2],
}

/// Precomputed element geometry: Gauss points plus the centroid data used by
/// the F-bar average.
#[derive(Debug, Clone)]
pub struct ElementGeom {
    pub gp: [GpGeom; 4],
    pub centroid_grad: [[f64; 2]; 4],
    pub centroid: [f64; 2],
    /// Element volume (area times thickness).
    pub volume: f64,
}

fn point_geometry(mesh: &QuadMesh, element: usize, xi: f64, eta: f64) -> Result<([[f64; 2]; 4], f64)> {
    let conn = &mesh.elements[element];
    let dn = dshape4(xi, eta);
    let mut jac = [[0.0f64; 2]; 2];
    for a in 0..4 {
        let x = mesh.nodes[conn[a]];
        for r in 0..2 {
            for c in 0..2 {
                jac[r][c] += x[r] * dn[a][c];
            }
        }
    }
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    if det <= 0.0 {
        return Err(Error::InvertedElement { element, det });
    }
    let inv = [
        [jac[1][1] / det, -jac[0][1] / det],
        [-jac[1][0] / det, jac[0][0] / det],
    ];
    // grad_a = J^-T dn_a
    let mut grad = [[0.0f64; 2]; 4];
    for a in 0..4 {
        for r in 0..2 {
            grad[a][r] = inv[0][r] * dn[a][0] + inv[1][r] * dn[a][1];
        }
    }
    Ok((grad, det))
}

impl ElementGeom {
    pub fn new(mesh: &QuadMesh, element: usize) -> Result<Self> {
        let conn = &mesh.elements[element];
        let mut gp = [GpGeom {
            grad: [[0.0; 2]; 4],
            weight: 0.0,
            coord: [0.0; 2],
        }; 4];
        let mut volume = 0.0;
        for (q, &(xi, eta)) in GAUSS_POINTS.iter().enumerate() {
            let (grad, det) = point_geometry(mesh, element, xi, eta)?;
            let n = shape4(xi, eta);
            let mut coord = [0.0; 2];
            for a in 0..4 {
                coord[0] += n[a] * mesh.nodes[conn[a]][0];
                coord[1] += n[a] * mesh.nodes[conn[a]][1];
            }
            let weight = det * mesh.thickness;
            volume += weight;
            gp[q] = GpGeom { grad, weight, coord };
        }
        let (centroid_grad, _) = point_geometry(mesh, element, 0.0, 0.0)?;
        Ok(ElementGeom {
            gp,
            centroid_grad,
            centroid: mesh.element_centroid(element),
            volume,
        })
    }
}

/// Deformation gradient `F = I + sum_a u_a (x) grad_a` from an element
/// displacement vector ordered `[u0x, u0y, u1x, u1y, ...]`.
pub fn def_grad(grad: &[[f64; 2]; 4], d: &[f64; 8]) -> Matrix2<f64> {
    let mut f = Matrix2::identity();
    for a in 0..4 {
        for i in 0..2 {
            for j in 0..2 {
                f[(i, j)] += d[2 * a + i] * grad[a][j];
            }
        }
    }
    f
}

fn det2(f: &Matrix2<f64>) -> f64 {
    f[(0, 0)] * f[(1, 1)] - f[(0, 1)] * f[(1, 0)]
}

fn inv2(f: &Matrix2<f64>, det: f64) -> Matrix2<f64> {
    Matrix2::new(f[(1, 1)], -f[(0, 1)], -f[(1, 0)], f[(0, 0)]) / det
}

/// Kinematic state of one Gauss point under the F-bar map.
struct FbarPoint {
    fbar: Matrix2<f64>,
    fg: Matrix2<f64>,
    fg_inv_t: Matrix2<f64>,
    r: f64,
}

/// Centroid state shared by the element's Gauss points.
struct CentroidState {
    fc: Matrix2<f64>,
    fc_inv_t: Matrix2<f64>,
}

fn centroid_state(geom: &ElementGeom, d: &[f64; 8], element: usize) -> Result<CentroidState> {
    let fc = def_grad(&geom.centroid_grad, d);
    let jc = det2(&fc);
    if jc <= 0.0 {
        return Err(Error::InvertedElement { element, det: jc });
    }
    Ok(CentroidState {
        fc,
        fc_inv_t: inv2(&fc, jc).transpose(),
    })
}

fn fbar_point(geom: &GpGeom, d: &[f64; 8], cs: &CentroidState, element: usize) -> Result<FbarPoint> {
    let fg = def_grad(&geom.grad, d);
    let jg = det2(&fg);
    if jg <= 0.0 {
        return Err(Error::InvertedElement { element, det: jg });
    }
    let jc = det2(&cs.fc);
    let r = (jc / jg).sqrt();
    Ok(FbarPoint {
        fbar: r * fg,
        fg,
        fg_inv_t: inv2(&fg, jg).transpose(),
        r,
    })
}

/// Modified deformation gradient at one Gauss point of an element, exposed
/// for tests and post-processing.
pub fn fbar_deformation_gradient(
    geom: &ElementGeom,
    d: &[f64; 8],
    q: usize,
    element: usize,
) -> Result<Matrix2<f64>> {
    let cs = centroid_state(geom, d, element)?;
    Ok(fbar_point(&geom.gp[q], d, &cs, element)?.fbar)
}

/// Element strain energy (quadrature sum of `psi(Fbar)` times weights).
pub fn element_energy(
    geom: &ElementGeom,
    d: &[f64; 8],
    props: &EffectiveProps,
    theta: &[f64; 4],
    mu: f64,
    env: &SolventEnvironment,
    element: usize,
) -> Result<f64> {
    let cs = centroid_state(geom, d, element)?;
    let mut e = 0.0;
    for (q, gp) in geom.gp.iter().enumerate() {
        let pt = fbar_point(gp, d, &cs, element)?;
        e += gp.weight * strain_energy(&pt.fbar, props, theta[q], mu, env)?;
    }
    Ok(e)
}

/// Element internal force (exact gradient of [`element_energy`]) and the
/// polymer fraction at each Gauss point.
pub fn element_force(
    geom: &ElementGeom,
    d: &[f64; 8],
    props: &EffectiveProps,
    theta: &[f64; 4],
    mu: f64,
    env: &SolventEnvironment,
    element: usize,
) -> Result<([f64; 8], [f64; 4])> {
    let cs = centroid_state(geom, d, element)?;
    let mut f = [0.0f64; 8];
    let mut phi = [0.0f64; 4];
    for (q, gp) in geom.gp.iter().enumerate() {
        let pt = fbar_point(gp, d, &cs, element)?;
        let st = pk1_stress_and_tangent(&pt.fbar, props, theta[q], mu, env)?;
        phi[q] = st.phi;
        accumulate_force(&mut f, gp, &geom.centroid_grad, &pt, cs.fc_inv_t, &st.p);
    }
    Ok((f, phi))
}

fn accumulate_force(
    f: &mut [f64; 8],
    gp: &GpGeom,
    cgrad: &[[f64; 2]; 4],
    pt: &FbarPoint,
    fc_inv_t: Matrix2<f64>,
    p: &Matrix2<f64>,
) {
    // P : dFbar/dd splits into a Gauss-gradient part and a centroid part:
    //   T = r P - (r/2) (P : F) F^-T      (at the Gauss point)
    //   S = (r/2) (P : F) Fc^-T           (at the centroid)
    let s_pf = p.dot(&pt.fg);
    let t = pt.r * p - 0.5 * pt.r * s_pf * pt.fg_inv_t;
    let s = 0.5 * pt.r * s_pf * fc_inv_t;
    for a in 0..4 {
        for k in 0..2 {
            f[2 * a + k] += gp.weight
                * (t[(k, 0)] * gp.grad[a][0]
                    + t[(k, 1)] * gp.grad[a][1]
                    + s[(k, 0)] * cgrad[a][0]
                    + s[(k, 1)] * cgrad[a][1]);
        }
    }
}

/// Element force plus consistent stiffness (exact Hessian of the element
/// energy, hence symmetric).
pub fn element_force_stiffness(
    geom: &ElementGeom,
    d: &[f64; 8],
    props: &EffectiveProps,
    theta: &[f64; 4],
    mu: f64,
    env: &SolventEnvironment,
    element: usize,
) -> Result<([f64; 8], [[f64; 8]; 8], [f64; 4])> {
    let cs = centroid_state(geom, d, element)?;
    let mut f = [0.0f64; 8];
    let mut k = [[0.0f64; 8]; 8];
    let mut phi = [0.0f64; 4];

    for (q, gp) in geom.gp.iter().enumerate() {
        let pt = fbar_point(gp, d, &cs, element)?;
        let st = pk1_stress_and_tangent(&pt.fbar, props, theta[q], mu, env)?;
        phi[q] = st.phi;
        accumulate_force(&mut f, gp, &geom.centroid_grad, &pt, cs.fc_inv_t, &st.p);

        // Per-dof contractions: for dof (a, kc) let
        //   gvec[a][kc] = (Fg^-T grad_a)_kc        (Gauss point)
        //   cvec[a][kc] = (Fc^-T cgrad_a)_kc       (centroid)
        //   rho[a][kc]  = dr/dd = (r/2)(cvec - gvec)
        //   dmat[a][kc] = dFbar/dd = r e_kc (x) grad_a + Fg rho
        let mut gvec = [[0.0f64; 2]; 4];
        let mut cvec = [[0.0f64; 2]; 4];
        for a in 0..4 {
            for kc in 0..2 {
                gvec[a][kc] =
                    pt.fg_inv_t[(kc, 0)] * gp.grad[a][0] + pt.fg_inv_t[(kc, 1)] * gp.grad[a][1];
                cvec[a][kc] = cs.fc_inv_t[(kc, 0)] * geom.centroid_grad[a][0]
                    + cs.fc_inv_t[(kc, 1)] * geom.centroid_grad[a][1];
            }
        }
        let mut rho = [0.0f64; 8];
        let mut dmat = [Matrix2::<f64>::zeros(); 8];
        let mut qvec = [0.0f64; 8];
        for a in 0..4 {
            for kc in 0..2 {
                let idx = 2 * a + kc;
                rho[idx] = 0.5 * pt.r * (cvec[a][kc] - gvec[a][kc]);
                let mut dm = rho[idx] * pt.fg;
                for j in 0..2 {
                    dm[(kc, j)] += pt.r * gp.grad[a][j];
                }
                dmat[idx] = dm;
                // qvec = (P grad_a)_kc, used by the geometric term.
                qvec[idx] = st.p[(kc, 0)] * gp.grad[a][0] + st.p[(kc, 1)] * gp.grad[a][1];
            }
        }

        // Material part: dmat_i : A : dmat_j.
        let mut adm = [Matrix2::<f64>::zeros(); 8];
        for i in 0..8 {
            adm[i] = st.a.contract(&dmat[i]);
        }
        let s_pf = st.p.dot(&pt.fg);
        for i in 0..8 {
            for j in i..8 {
                let mut v = dmat[i].dot(&adm[j]);
                // Geometric part: P : d2Fbar/dd_i dd_j.
                let (a_i, k_i) = (i / 2, i % 2);
                let (a_j, k_j) = (j / 2, j % 2);
                v += rho[j] * qvec[i] + rho[i] * qvec[j];
                v += s_pf
                    * (rho[i] * rho[j] / pt.r
                        + 0.5 * pt.r * (gvec[a_i][k_j] * gvec[a_j][k_i] - cvec[a_i][k_j] * cvec[a_j][k_i]));
                k[i][j] += gp.weight * v;
                if i != j {
                    k[j][i] += gp.weight * v;
                }
            }
        }
    }
    Ok((f, k, phi))
}

/// Design-sensitivity contractions for one element: given a cotangent vector
/// `v` on the element dofs (the restriction of the adjoint solution), returns
/// `v . d f_int / d pi` for each effective parameter `pi`, with the fiber
/// angle resolved per Gauss point.
#[derive(Debug, Clone, Copy, Default)]
pub struct ElementDesignContraction {
    pub dg: f64,
    pub dchi: f64,
    pub deta: f64,
    pub dtheta: [f64; 4],
}

pub fn element_design_contraction(
    geom: &ElementGeom,
    d: &[f64; 8],
    v: &[f64; 8],
    props: &EffectiveProps,
    theta: &[f64; 4],
    mu: f64,
    env: &SolventEnvironment,
    element: usize,
) -> Result<ElementDesignContraction> {
    let cs = centroid_state(geom, d, element)?;
    let mut out = ElementDesignContraction::default();

    // Directional derivative of Fbar along v, assembled from the same chain
    // as the force: Vbar = r Vg + (r/2) ((Fc^-T : Vc) - (Fg^-T : Vg)) Fg,
    // where Vg/Vc are the displacement-gradient perturbations at the Gauss
    // point and centroid.
    let mut vc = Matrix2::<f64>::zeros();
    for a in 0..4 {
        for i in 0..2 {
            for j in 0..2 {
                vc[(i, j)] += v[2 * a + i] * geom.centroid_grad[a][j];
            }
        }
    }
    for (q, gp) in geom.gp.iter().enumerate() {
        let pt = fbar_point(gp, d, &cs, element)?;
        let mut vg = Matrix2::<f64>::zeros();
        for a in 0..4 {
            for i in 0..2 {
                for j in 0..2 {
                    vg[(i, j)] += v[2 * a + i] * gp.grad[a][j];
                }
            }
        }
        let dr_dir = 0.5 * pt.r * (cs.fc_inv_t.dot(&vc) - pt.fg_inv_t.dot(&vg));
        let vbar = pt.r * vg + dr_dir * pt.fg;

        let sens = pk1_param_sensitivities(&pt.fbar, props, theta[q], mu, env)?;
        out.dg += gp.weight * sens.dp_dg.dot(&vbar);
        out.dchi += gp.weight * sens.dp_dchi.dot(&vbar);
        out.deta += gp.weight * sens.dp_deta.dot(&vbar);
        out.dtheta[q] = gp.weight * sens.dp_dtheta.dot(&vbar);
    }
    Ok(out)
}
