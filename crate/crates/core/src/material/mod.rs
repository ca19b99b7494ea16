//! Material models: candidate phases, multi-material interpolation, and the
//! chemo-mechanical plane-stress constitutive law.

pub mod flory_rehner;
pub mod stress;

pub use flory_rehner::{
    phi_derivatives, residual, residual_partials, solve_phi, PhiDerivatives, ResidualPartials,
    SolventEnvironment, SwellingState,
};
pub use stress::{
    pk1_param_sensitivities, pk1_stress_and_tangent, strain_energy, PointSensitivities,
    StressTangent, Tangent4,
};

use crate::error::{Error, Result};

/// Tolerance on the partition-of-unity defect of a density vector.
pub const PARTITION_TOL: f64 = 1e-8;

/// One candidate material phase.
///
/// `chi` holds one Flory interaction parameter per solvent (indexed like
/// [`MaterialTable::solvents`]): a phase that swells in one solvent can be
/// inert in another.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub name: String,
    /// Dry shear modulus in Pa.
    pub shear_modulus: f64,
    /// Fiber reinforcement stiffness in Pa; zero for unreinforced phases.
    pub fiber_stiffness: f64,
    /// Flory interaction parameter per solvent.
    pub chi: Vec<f64>,
}

/// One solvent species with its environment and loading endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Solvent {
    pub name: String,
    pub environment: SolventEnvironment,
    /// Chemical potential of the unloaded (dry) state in J/mol.
    pub mu_dry: f64,
    /// Chemical potential of the fully swollen state in J/mol.
    pub mu_wet: f64,
}

/// The candidate-phase table shared by a whole optimization problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialTable {
    pub phases: Vec<Phase>,
    pub solvents: Vec<Solvent>,
}

impl MaterialTable {
    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn num_solvents(&self) -> usize {
        self.solvents.len()
    }

    pub fn phase_index(&self, name: &str) -> Option<usize> {
        self.phases.iter().position(|p| p.name == name)
    }

    pub fn solvent_index(&self, name: &str) -> Option<usize> {
        self.solvents.iter().position(|s| s.name == name)
    }
}

/// Effective point properties after interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EffectiveProps {
    /// Effective shear modulus in Pa.
    pub g: f64,
    /// Effective Flory parameter for the active solvent.
    pub chi: f64,
    /// Effective fiber stiffness in Pa.
    pub eta: f64,
}

/// Effective properties together with their derivatives with respect to each
/// phase density.
#[derive(Debug, Clone)]
pub struct EffectivePropsGrad {
    pub props: EffectiveProps,
    /// dG/drho_m for each phase m.
    pub dg: Vec<f64>,
    /// dchi/drho_m.
    pub dchi: Vec<f64>,
    /// deta/drho_m.
    pub deta: Vec<f64>,
}

fn check_densities(rho: &[f64], n_phases: usize) -> Result<()> {
    if rho.len() != n_phases {
        return Err(Error::InvalidDesign(format!(
            "expected {n_phases} densities, got {}",
            rho.len()
        )));
    }
    for (m, &r) in rho.iter().enumerate() {
        if r < 0.0 {
            return Err(Error::InvalidDesign(format!(
                "density {m} is negative: {r}"
            )));
        }
    }
    let sum: f64 = rho.iter().sum();
    if (sum - 1.0).abs() > PARTITION_TOL {
        return Err(Error::InvalidDesign(format!(
            "densities sum to {sum}, expected 1 within {PARTITION_TOL:e}"
        )));
    }
    Ok(())
}

/// Power-law interpolation of stiffness-like properties and linear mixing of
/// the Flory parameter:
///
/// ```text
/// G_eff   = sum_m rho_m^p G_m
/// eta_eff = sum_m rho_m^p eta_m
/// chi_eff = sum_m rho_m   chi_m(solvent)
/// ```
///
/// The penalization exponent `p >= 1` comes from the optimizer's continuation
/// schedule. Densities must lie on the probability simplex.
pub fn interpolate(
    table: &MaterialTable,
    rho: &[f64],
    solvent: usize,
    p: f64,
) -> Result<EffectiveProps> {
    check_densities(rho, table.num_phases())?;
    if p < 1.0 {
        return Err(Error::Domain(format!("penalization exponent must be >= 1, got {p}")));
    }
    let mut props = EffectiveProps::default();
    for (phase, &r) in table.phases.iter().zip(rho) {
        let rp = r.powf(p);
        props.g += rp * phase.shear_modulus;
        props.eta += rp * phase.fiber_stiffness;
        props.chi += r * phase.chi[solvent];
    }
    Ok(props)
}

/// [`interpolate`] plus derivatives with respect to each density.
pub fn interpolate_with_grad(
    table: &MaterialTable,
    rho: &[f64],
    solvent: usize,
    p: f64,
) -> Result<EffectivePropsGrad> {
    let props = interpolate(table, rho, solvent, p)?;
    let n = table.num_phases();
    let mut out = EffectivePropsGrad {
        props,
        dg: vec![0.0; n],
        dchi: vec![0.0; n],
        deta: vec![0.0; n],
    };
    for (m, (phase, &r)) in table.phases.iter().zip(rho).enumerate() {
        // d(rho^p)/drho = p rho^(p-1); with p = 1 this is 1 even at rho = 0.
        let d_rp = p * r.powf(p - 1.0);
        out.dg[m] = d_rp * phase.shear_modulus;
        out.deta[m] = d_rp * phase.fiber_stiffness;
        out.dchi[m] = phase.chi[solvent];
    }
    Ok(out)
}
