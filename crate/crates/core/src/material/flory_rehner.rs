//! Flory–Rehner swelling equilibrium.
//!
//! At every material point the polymer volume fraction `phi` adjusts so that
//! the solvent chemical potential inside the network equals the prescribed
//! environmental potential `mu`. With the plane-stress kinematic closure
//! (out-of-plane stretch `lam3 = 1 / (phi * J2D)`), the nondimensional
//! residual in terms of `phi` and the in-plane area stretch `J2D = det F` is
//!
//! ```text
//! F(phi, J2D) = (mu0 - mu)/(R T) + ln(1 - phi) + phi + chi phi^2
//!             + (Omega G / R T) * (1 / (phi J2D^2) - phi)
//! ```
//!
//! `F` is monotone decreasing towards `-inf` as `phi -> 1`, so a sign change
//! on the search bracket certifies a root. The residual and all partial
//! derivatives used by the implicit-function sensitivities are closed-form.

use crate::error::{Error, Result};
use crate::GAS_CONSTANT;

/// Solvent environment entering the swelling residual.
///
/// `mu` itself is a *loading* variable (ramped by the solver), so it is not
/// stored here; this struct carries the quantities that are fixed per solvent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolventEnvironment {
    /// Solvent molar volume `Omega` in m^3/mol.
    pub molar_volume: f64,
    /// Absolute temperature in K.
    pub temperature: f64,
    /// Reference chemical potential `mu0` of the pure solvent in J/mol.
    pub mu0: f64,
}

impl SolventEnvironment {
    /// `R T` in J/mol.
    pub fn rt(&self) -> f64 {
        GAS_CONSTANT * self.temperature
    }
}

/// Lower end of the root bracket for `phi`.
pub const PHI_LO: f64 = 1e-6;
/// Upper end of the root bracket for `phi`.
pub const PHI_HI: f64 = 1.0 - 1e-9;
/// Guaranteed bound on the bisection interval at exit (the solver actually
/// bisects to f64 exhaustion, far below this).
pub const PHI_TOL: f64 = 1e-12;
/// Guaranteed bound on the residual magnitude at an interior root.
pub const RESIDUAL_TOL: f64 = 1e-10;
/// Bisection iteration cap.
pub const MAX_BISECTIONS: usize = 200;
/// Floor on `|dF/dphi|` below which implicit-function derivatives error out.
pub const F_PHI_FLOOR: f64 = 1e-12;

/// Swelling residual `F(phi, J2D)`.
///
/// Valid for `phi` in (0, 1), `J2D > 0`; `g` (shear modulus) may be zero,
/// in which case the elastic back-pressure term drops out.
pub fn residual(phi: f64, j2d: f64, g: f64, chi: f64, mu: f64, env: &SolventEnvironment) -> f64 {
    let rt = env.rt();
    let gamma = env.molar_volume * g / rt;
    (env.mu0 - mu) / rt
        + (1.0 - phi).ln()
        + phi
        + chi * phi * phi
        + gamma * (1.0 / (phi * j2d * j2d) - phi)
}

/// All partial derivatives of the residual used by the stress tangent and the
/// parameter sensitivities. Everything is evaluated at one `(phi, J2D)` point.
#[derive(Debug, Clone, Copy)]
pub struct ResidualPartials {
    pub f: f64,
    /// dF/dphi
    pub f_phi: f64,
    /// dF/dJ2D
    pub f_j: f64,
    /// d2F/dphi2
    pub f_phiphi: f64,
    /// d2F/dJ2D dphi
    pub f_jphi: f64,
    /// d2F/dJ2D2
    pub f_jj: f64,
    /// dF/dG
    pub f_g: f64,
    /// dF/dchi
    pub f_chi: f64,
    /// d2F/dphi dG
    pub f_phig: f64,
    /// d2F/dJ2D dG
    pub f_jg: f64,
    /// d2F/dphi dchi
    pub f_phichi: f64,
}

/// Evaluates [`ResidualPartials`] at `(phi, J2D)`.
pub fn residual_partials(
    phi: f64,
    j2d: f64,
    g: f64,
    chi: f64,
    mu: f64,
    env: &SolventEnvironment,
) -> ResidualPartials {
    let rt = env.rt();
    // gamma / G, finite even for G = 0.
    let gamma_g = env.molar_volume / rt;
    let gamma = gamma_g * g;
    let j2 = j2d * j2d;
    let j3 = j2 * j2d;
    let p2 = phi * phi;
    let p3 = p2 * phi;

    ResidualPartials {
        f: residual(phi, j2d, g, chi, mu, env),
        f_phi: -1.0 / (1.0 - phi) + 1.0 + 2.0 * chi * phi - gamma * (1.0 / (p2 * j2) + 1.0),
        f_j: -2.0 * gamma / (phi * j3),
        f_phiphi: -1.0 / ((1.0 - phi) * (1.0 - phi)) + 2.0 * chi + 2.0 * gamma / (p3 * j2),
        f_jphi: 2.0 * gamma / (p2 * j3),
        f_jj: 6.0 * gamma / (phi * j2 * j2),
        f_g: gamma_g * (1.0 / (phi * j2) - phi),
        f_chi: p2,
        f_phig: -gamma_g * (1.0 / (p2 * j2) + 1.0),
        f_jg: -2.0 * gamma_g / (phi * j3),
        f_phichi: 2.0 * phi,
    }
}

/// Result of a swelling-equilibrium solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwellingState {
    /// Polymer volume fraction at equilibrium (or at the bracket end if
    /// clamped).
    pub phi: f64,
    /// True when the residual stayed positive over the whole bracket, i.e.
    /// the network is effectively dry (`phi -> 1` beyond f64 resolution next
    /// to 1). In that regime the solution map is locally constant, so all
    /// sensitivities of `phi` are zero.
    pub clamped: bool,
}

/// Solves `F(phi, J2D) = 0` for `phi` by bisection on `[PHI_LO, PHI_HI]`.
///
/// The residual is `+inf`-like at the lower end (for `G > 0`) and `-inf`-like
/// at the upper end *unless* the chemical-potential deficit `(mu0 - mu)/(R T)`
/// exceeds `-ln(1 - PHI_HI) ~ 20.7`. In that dry regime the true root sits
/// closer to 1 than f64 can resolve and the solver returns `PHI_HI` with the
/// `clamped` flag set. A negative residual at the *lower* end means the root
/// would need `phi < 1e-6` (a network more dilute than one part per million
/// polymer), which is outside the model's validity: that is reported as a
/// bracket failure.
pub fn solve_phi(j2d: f64, g: f64, chi: f64, mu: f64, env: &SolventEnvironment) -> Result<SwellingState> {
    if !(j2d > 0.0) {
        return Err(Error::Domain(format!("solve_phi needs J2D > 0, got {j2d}")));
    }
    if !(g > 0.0) {
        return Err(Error::Domain(format!("solve_phi needs G > 0, got {g}")));
    }
    if !(env.temperature > 0.0) || !(env.molar_volume > 0.0) {
        return Err(Error::Domain(format!(
            "solve_phi needs T > 0 and Omega > 0, got T = {}, Omega = {}",
            env.temperature, env.molar_volume
        )));
    }

    let mut lo = PHI_LO;
    let mut hi = PHI_HI;
    let f_lo = residual(lo, j2d, g, chi, mu, env);
    if f_lo <= 0.0 {
        return Err(Error::BracketFailure {
            j2d,
            g,
            chi,
            mu,
            phi_lo: lo,
            f_lo,
        });
    }
    let f_hi = residual(hi, j2d, g, chi, mu, env);
    if f_hi >= 0.0 {
        return Ok(SwellingState {
            phi: hi,
            clamped: true,
        });
    }

    // f_lo > 0 > f_hi: bisect until the midpoint is no longer representable
    // strictly between the bracket ends. That runs ~55 iterations and leaves
    // the root map smooth at f64 resolution, which matters downstream: any
    // looser exit makes phi(J2D) a staircase whose jumps put a floor under
    // the Newton residual of the outer FE solve and pollute every
    // finite-difference check. The documented tolerances (PHI_TOL,
    // RESIDUAL_TOL) are guaranteed a fortiori.
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid, j2d, g, chi, mu, env) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SwellingState {
        phi: hi,
        clamped: false,
    })
}

/// Implicit-function derivatives of the equilibrium `phi`.
///
/// All derivatives are *total*: they account for the root moving with the
/// perturbed quantity. For a clamped (dry) state they are identically zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhiDerivatives {
    /// dphi/dJ2D
    pub dphi_dj: f64,
    /// d^2 phi / dJ2D^2
    pub d2phi_dj2: f64,
    /// dphi/dG
    pub dphi_dg: f64,
    /// dphi/dchi
    pub dphi_dchi: f64,
    /// d(dphi/dJ2D)/dG
    pub dphiprime_dg: f64,
    /// d(dphi/dJ2D)/dchi
    pub dphiprime_dchi: f64,
}

/// Computes [`PhiDerivatives`] at a solved state.
///
/// Errors with [`Error::SingularEquilibrium`] when `|dF/dphi|` is below
/// [`F_PHI_FLOOR`]; at a transversal root `dF/dphi < 0`, so the floor only
/// trips at genuinely degenerate parameter sets.
pub fn phi_derivatives(
    state: &SwellingState,
    j2d: f64,
    g: f64,
    chi: f64,
    mu: f64,
    env: &SolventEnvironment,
) -> Result<PhiDerivatives> {
    if state.clamped {
        return Ok(PhiDerivatives::default());
    }
    let p = residual_partials(state.phi, j2d, g, chi, mu, env);
    if p.f_phi.abs() < F_PHI_FLOOR {
        return Err(Error::SingularEquilibrium {
            phi: state.phi,
            j2d,
            f_phi_abs: p.f_phi.abs(),
        });
    }

    let phi_j = -p.f_j / p.f_phi;
    // Second derivative in J2D: differentiate -F_j/F_phi along the root path.
    let d_fj = p.f_jj + p.f_jphi * phi_j;
    let d_fphi = p.f_jphi + p.f_phiphi * phi_j;
    let phi_jj = -(d_fj * p.f_phi - p.f_j * d_fphi) / (p.f_phi * p.f_phi);

    let phi_g = -p.f_g / p.f_phi;
    let phi_chi = -p.f_chi / p.f_phi;

    // Mixed derivatives of phi' = -F_j/F_phi with respect to a parameter s
    // (s = G or chi), with phi itself moving as phi_s:
    //   d(phi')/ds = -[(F_js + F_jphi phi_s) F_phi - F_j (F_phis + F_phiphi phi_s)] / F_phi^2
    let mixed = |f_js: f64, f_phis: f64, phi_s: f64| -> f64 {
        -((f_js + p.f_jphi * phi_s) * p.f_phi - p.f_j * (f_phis + p.f_phiphi * phi_s))
            / (p.f_phi * p.f_phi)
    };
    let phiprime_g = mixed(p.f_jg, p.f_phig, phi_g);
    let phiprime_chi = mixed(0.0, p.f_phichi, phi_chi);

    Ok(PhiDerivatives {
        dphi_dj: phi_j,
        d2phi_dj2: phi_jj,
        dphi_dg: phi_g,
        dphi_dchi: phi_chi,
        dphiprime_dg: phiprime_g,
        dphiprime_dchi: phiprime_chi,
    })
}
