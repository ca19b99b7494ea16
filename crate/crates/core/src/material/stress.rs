//! Plane-stress chemo-mechanical constitutive law.
//!
//! Strain energy per unit dry volume for a swollen neo-Hookean network with
//! optional unidirectional fiber reinforcement:
//!
//! ```text
//! psi(F) = G/2 (I1 - 3 - 2 ln J) + eta/2 <I4 - 1>+^2
//! I1 = tr(C) + lam3^2,   lam3 = 1 / (phi J2D),   J = J2D lam3 = 1/phi
//! I4 = a0 . C a0,        a0 = (cos theta, sin theta)
//! ```
//!
//! with `phi = phi(J2D)` the Flory–Rehner equilibrium root, which makes the
//! energy a function of the in-plane `F` alone:
//!
//! ```text
//! psi(F) = G/2 (F:F - 3) + h(J2D),   h(j) = G/2 phi^-2 j^-2 + G ln phi
//! ```
//!
//! The first Piola stress and tangent follow by differentiating through the
//! root via the implicit function theorem (`phi' = -F_j / F_phi` etc.); all
//! chain terms below are closed-form and are finite-difference-checked in the
//! test suite. For a *clamped* (dry) equilibrium the root is locally constant
//! so every `phi` derivative vanishes, and the same formulas apply.

use nalgebra::{Matrix2, Vector2};

use super::flory_rehner::{phi_derivatives, solve_phi, PhiDerivatives, SolventEnvironment, SwellingState};
use super::EffectiveProps;
use crate::error::{Error, Result};

/// Fourth-order in-plane tangent `A[i][j][k][l] = d P_ij / d F_kl`.
#[derive(Debug, Clone, Copy)]
pub struct Tangent4(pub [[[[f64; 2]; 2]; 2]; 2]);

impl Tangent4 {
    pub fn zero() -> Self {
        Tangent4([[[[0.0; 2]; 2]; 2]; 2])
    }

    /// Contraction over the last two indices: `(A : M)_ij = A_ijkl M_kl`.
    pub fn contract(&self, m: &Matrix2<f64>) -> Matrix2<f64> {
        let mut out = Matrix2::zeros();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        s += self.0[i][j][k][l] * m[(k, l)];
                    }
                }
                out[(i, j)] = s;
            }
        }
        out
    }
}

/// Stress evaluation output.
#[derive(Debug, Clone)]
pub struct StressTangent {
    pub phi: f64,
    pub clamped: bool,
    /// First Piola–Kirchhoff stress (per unit dry area).
    pub p: Matrix2<f64>,
    /// Material tangent dP/dF.
    pub a: Tangent4,
}

/// Total derivatives of the stress with respect to the effective material
/// parameters at fixed `F` (the swelling root moves with each parameter).
#[derive(Debug, Clone)]
pub struct PointSensitivities {
    pub phi: f64,
    pub clamped: bool,
    pub p: Matrix2<f64>,
    /// dP/dG (includes the dphi/dG path).
    pub dp_dg: Matrix2<f64>,
    /// dP/dchi.
    pub dp_dchi: Matrix2<f64>,
    /// dP/deta.
    pub dp_deta: Matrix2<f64>,
    /// dP/dtheta.
    pub dp_dtheta: Matrix2<f64>,
    pub dphi_dj: f64,
    pub dphi_dg: f64,
    pub dphi_dchi: f64,
}

fn det2(f: &Matrix2<f64>) -> f64 {
    f[(0, 0)] * f[(1, 1)] - f[(0, 1)] * f[(1, 0)]
}

fn inv2(f: &Matrix2<f64>, j: f64) -> Matrix2<f64> {
    Matrix2::new(f[(1, 1)], -f[(0, 1)], -f[(1, 0)], f[(0, 0)]) / j
}

struct SwollenPoint {
    j: f64,
    phi: f64,
    state: SwellingState,
    derivs: PhiDerivatives,
}

fn solve_point(
    f: &Matrix2<f64>,
    props: &EffectiveProps,
    mu: f64,
    env: &SolventEnvironment,
) -> Result<SwollenPoint> {
    let j = det2(f);
    if j <= 0.0 {
        return Err(Error::Domain(format!(
            "deformation gradient has non-positive determinant {j}"
        )));
    }
    let state = solve_phi(j, props.g, props.chi, mu, env)?;
    let derivs = phi_derivatives(&state, j, props.g, props.chi, mu, env)?;
    Ok(SwollenPoint {
        j,
        phi: state.phi,
        state,
        derivs,
    })
}

/// Swelling part of the energy density at a solved point.
fn swelling_energy(g: f64, phi: f64, j: f64, trc: f64) -> f64 {
    0.5 * g * (trc + 1.0 / (phi * phi * j * j) - 3.0) + g * phi.ln()
}

/// Strain energy density `psi(F)` (per unit dry volume), solving the swelling
/// equilibrium internally.
pub fn strain_energy(
    f: &Matrix2<f64>,
    props: &EffectiveProps,
    theta: f64,
    mu: f64,
    env: &SolventEnvironment,
) -> Result<f64> {
    let pt = solve_point(f, props, mu, env)?;
    let trc = (f.transpose() * f).trace();
    let mut psi = swelling_energy(props.g, pt.phi, pt.j, trc);
    if props.eta != 0.0 {
        let a0 = Vector2::new(theta.cos(), theta.sin());
        let fa = f * a0;
        let i4 = fa.dot(&fa);
        let ex = (i4 - 1.0).max(0.0);
        psi += 0.5 * props.eta * ex * ex;
    }
    Ok(psi)
}

/// First and second derivatives of `h(j)` along the equilibrium path.
struct HDerivs {
    /// h'(j)
    h1: f64,
    /// h''(j)
    h2: f64,
    /// coefficient of phi' in h': e = G (1/phi - 1/(phi^3 j^2))
    e: f64,
}

fn h_derivs(g: f64, phi: f64, j: f64, d: &PhiDerivatives) -> HDerivs {
    let p2 = phi * phi;
    let p3 = p2 * phi;
    let p4 = p3 * phi;
    let j2 = j * j;
    let j3 = j2 * j;
    let j4 = j3 * j;
    let e = g * (1.0 / phi - 1.0 / (p3 * j2));
    let h1 = -g / (p2 * j3) + e * d.dphi_dj;
    let h2 = 3.0 * g / (p2 * j4) + 4.0 * g * d.dphi_dj / (p3 * j3)
        + g * (3.0 / (p4 * j2) - 1.0 / p2) * d.dphi_dj * d.dphi_dj
        + e * d.d2phi_dj2;
    HDerivs { h1, h2, e }
}

/// First Piola stress and material tangent at one quadrature point.
///
/// `P = G F + j h'(j) F^-T + 2 eta <I4-1>+ (F a0) ⊗ a0` and `A = dP/dF`.
pub fn pk1_stress_and_tangent(
    f: &Matrix2<f64>,
    props: &EffectiveProps,
    theta: f64,
    mu: f64,
    env: &SolventEnvironment,
) -> Result<StressTangent> {
    let pt = solve_point(f, props, mu, env)?;
    let (g, phi, j) = (props.g, pt.phi, pt.j);
    let hd = h_derivs(g, phi, j, &pt.derivs);
    let finv = inv2(f, j);
    let m = j * hd.h1;

    let mut p = g * f + m * finv.transpose();

    // A_ijkl = G d_ik d_jl + (h' j + h'' j^2) Finv_ji Finv_lk - m Finv_jk Finv_li
    let c1 = hd.h1 * j + hd.h2 * j * j;
    let mut a = Tangent4::zero();
    for i in 0..2 {
        for jj in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    let mut v = c1 * finv[(jj, i)] * finv[(l, k)] - m * finv[(jj, k)] * finv[(l, i)];
                    if i == k && jj == l {
                        v += g;
                    }
                    a.0[i][jj][k][l] = v;
                }
            }
        }
    }

    if props.eta != 0.0 {
        let a0 = Vector2::new(theta.cos(), theta.sin());
        let fa = f * a0;
        let i4 = fa.dot(&fa);
        if i4 > 1.0 {
            let ex = i4 - 1.0;
            for i in 0..2 {
                for jj in 0..2 {
                    p[(i, jj)] += 2.0 * props.eta * ex * fa[i] * a0[jj];
                    for k in 0..2 {
                        for l in 0..2 {
                            let mut v = 4.0 * props.eta * fa[i] * a0[jj] * fa[k] * a0[l];
                            if i == k {
                                v += 2.0 * props.eta * ex * a0[jj] * a0[l];
                            }
                            a.0[i][jj][k][l] += v;
                        }
                    }
                }
            }
        }
    }

    Ok(StressTangent {
        phi,
        clamped: pt.state.clamped,
        p,
        a,
    })
}

/// Stress and its total parameter derivatives, used by the adjoint assembly.
pub fn pk1_param_sensitivities(
    f: &Matrix2<f64>,
    props: &EffectiveProps,
    theta: f64,
    mu: f64,
    env: &SolventEnvironment,
) -> Result<PointSensitivities> {
    let pt = solve_point(f, props, mu, env)?;
    let (g, phi, j) = (props.g, pt.phi, pt.j);
    let d = &pt.derivs;
    let hd = h_derivs(g, phi, j, d);
    let finv_t = inv2(f, j).transpose();

    let mut p = g * f + j * hd.h1 * finv_t;

    // h' = G k(phi, phi', j) is linear in G at frozen (phi, phi'), so the
    // explicit part of dh'/dG is h'/G; the rest flows through dphi/dG and
    // d(phi')/dG. Same structure for chi without the explicit part.
    let p2 = phi * phi;
    let p3 = p2 * phi;
    let p4 = p3 * phi;
    let j2 = j * j;
    let j3 = j2 * j;
    let dh1_dphi = 2.0 * g / (p3 * j3) + g * (3.0 / (p4 * j2) - 1.0 / p2) * d.dphi_dj;
    let dh1_dg = hd.h1 / g + dh1_dphi * d.dphi_dg + hd.e * d.dphiprime_dg;
    let dh1_dchi = dh1_dphi * d.dphi_dchi + hd.e * d.dphiprime_dchi;

    let dp_dg = f + j * dh1_dg * finv_t;
    let dp_dchi = j * dh1_dchi * finv_t;

    let mut dp_deta = Matrix2::zeros();
    let mut dp_dtheta = Matrix2::zeros();
    let a0 = Vector2::new(theta.cos(), theta.sin());
    let fa = f * a0;
    let i4 = fa.dot(&fa);
    if i4 > 1.0 {
        let ex = i4 - 1.0;
        let outer = fa * a0.transpose();
        dp_deta = 2.0 * ex * outer;
        if props.eta != 0.0 {
            p += 2.0 * props.eta * ex * outer;
            // a0' = d a0/d theta; dI4/dtheta = 2 a0' . C a0.
            let a0p = Vector2::new(-theta.sin(), theta.cos());
            let fap = f * a0p;
            let di4 = 2.0 * fap.dot(&fa);
            dp_dtheta = 2.0
                * props.eta
                * (di4 * outer + ex * (fap * a0.transpose() + fa * a0p.transpose()));
        }
    }

    Ok(PointSensitivities {
        phi,
        clamped: pt.state.clamped,
        p,
        dp_dg,
        dp_dchi,
        dp_deta,
        dp_dtheta,
        dphi_dj: d.dphi_dj,
        dphi_dg: d.dphi_dg,
        dphi_dchi: d.dphi_dchi,
    })
}
