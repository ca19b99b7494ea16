//! Global model: mesh + precomputed element geometry + dof partition, with
//! residual/tangent assembly over a per-element design field.

use crate::error::Result;
use crate::material::{EffectiveProps, SolventEnvironment};
use crate::mesh::QuadMesh;

use super::bc::{external_force, BoundaryConditions, DofMap};
use super::element::{
    element_energy, element_force, element_force_stiffness, ElementGeom,
};

/// Effective material properties per element (densities are sampled at
/// element centroids) and fiber angles per Gauss point.
#[derive(Debug, Clone)]
pub struct DesignFields {
    pub props: Vec<EffectiveProps>,
    pub theta: Vec<[f64; 4]>,
}

impl DesignFields {
    /// A uniform field, mostly for tests and fixed-layout forward runs.
    pub fn uniform(props: EffectiveProps, n_elements: usize) -> Self {
        DesignFields {
            props: vec![props; n_elements],
            theta: vec![[0.0; 4]; n_elements],
        }
    }
}

/// Assembled state at one displacement vector.
pub struct AssembledSystem {
    /// Internal force over all dofs.
    pub f_int: Vec<f64>,
    /// Tangent triplets over free dofs.
    pub k_free: Vec<(usize, usize, f64)>,
    /// Tangent triplets over all dofs (requested only when needed, e.g. for
    /// force objectives).
    pub k_full: Option<Vec<(usize, usize, f64)>>,
    /// Polymer volume fraction per element per Gauss point.
    pub phi: Vec<[f64; 4]>,
}

/// A mesh with boundary conditions, ready for repeated assembly under
/// different design fields and load levels.
pub struct FemModel {
    pub mesh: QuadMesh,
    pub geoms: Vec<ElementGeom>,
    pub dofmap: DofMap,
    /// External force from tractions at full load.
    pub f_ext_unit: Vec<f64>,
}

impl FemModel {
    pub fn new(mesh: QuadMesh, bc: &BoundaryConditions) -> Result<Self> {
        let dofmap = DofMap::build(&mesh, bc)?;
        let f_ext_unit = external_force(&mesh, bc)?;
        let geoms = (0..mesh.num_elements())
            .map(|e| ElementGeom::new(&mesh, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(FemModel {
            mesh,
            geoms,
            dofmap,
            f_ext_unit,
        })
    }

    pub fn num_dofs(&self) -> usize {
        self.mesh.num_dofs()
    }

    /// Centroid coordinates of every element, in element order.
    pub fn centroids(&self) -> Vec<[f64; 2]> {
        self.geoms.iter().map(|g| g.centroid).collect()
    }

    /// Gauss-point coordinates of every element, flattened in element-major
    /// order (4 per element).
    pub fn gauss_coords(&self) -> Vec<[f64; 2]> {
        self.geoms
            .iter()
            .flat_map(|g| g.gp.iter().map(|p| p.coord))
            .collect()
    }

    /// Total reference volume (area times thickness).
    pub fn total_volume(&self) -> f64 {
        self.geoms.iter().map(|g| g.volume).sum()
    }

    pub fn element_disp(&self, u: &[f64], e: usize) -> [f64; 8] {
        let conn = &self.mesh.elements[e];
        let mut d = [0.0; 8];
        for a in 0..4 {
            d[2 * a] = u[2 * conn[a]];
            d[2 * a + 1] = u[2 * conn[a] + 1];
        }
        d
    }

    /// Total strain energy at `u`.
    pub fn energy(&self, u: &[f64], fields: &DesignFields, mu: f64, env: &SolventEnvironment) -> Result<f64> {
        let mut total = 0.0;
        for e in 0..self.mesh.num_elements() {
            let d = self.element_disp(u, e);
            total += element_energy(
                &self.geoms[e],
                &d,
                &fields.props[e],
                &fields.theta[e],
                mu,
                env,
                e,
            )?;
        }
        Ok(total)
    }

    /// Internal force over all dofs at `u`.
    pub fn internal_force(
        &self,
        u: &[f64],
        fields: &DesignFields,
        mu: f64,
        env: &SolventEnvironment,
    ) -> Result<Vec<f64>> {
        let mut f = vec![0.0; self.num_dofs()];
        for e in 0..self.mesh.num_elements() {
            let d = self.element_disp(u, e);
            let (fe, _) = element_force(
                &self.geoms[e],
                &d,
                &fields.props[e],
                &fields.theta[e],
                mu,
                env,
                e,
            )?;
            let conn = &self.mesh.elements[e];
            for a in 0..4 {
                f[2 * conn[a]] += fe[2 * a];
                f[2 * conn[a] + 1] += fe[2 * a + 1];
            }
        }
        Ok(f)
    }

    /// Internal force, tangent triplets, and per-point polymer fractions.
    pub fn assemble(
        &self,
        u: &[f64],
        fields: &DesignFields,
        mu: f64,
        env: &SolventEnvironment,
        want_full_tangent: bool,
    ) -> Result<AssembledSystem> {
        let n_el = self.mesh.num_elements();
        let mut f_int = vec![0.0; self.num_dofs()];
        let mut k_free = Vec::with_capacity(64 * n_el);
        let mut k_full = if want_full_tangent {
            Some(Vec::with_capacity(64 * n_el))
        } else {
            None
        };
        let mut phi = vec![[0.0; 4]; n_el];

        for e in 0..n_el {
            let d = self.element_disp(u, e);
            let (fe, ke, phie) = element_force_stiffness(
                &self.geoms[e],
                &d,
                &fields.props[e],
                &fields.theta[e],
                mu,
                env,
                e,
            )?;
            phi[e] = phie;
            let conn = &self.mesh.elements[e];
            let mut dofs = [0usize; 8];
            for a in 0..4 {
                dofs[2 * a] = 2 * conn[a];
                dofs[2 * a + 1] = 2 * conn[a] + 1;
            }
            for i in 0..8 {
                f_int[dofs[i]] += fe[i];
                for j in 0..8 {
                    let v = ke[i][j];
                    if v == 0.0 {
                        continue;
                    }
                    if let Some(full) = k_full.as_mut() {
                        full.push((dofs[i], dofs[j], v));
                    }
                    if let (Some(fi), Some(fj)) =
                        (self.dofmap.free_index[dofs[i]], self.dofmap.free_index[dofs[j]])
                    {
                        k_free.push((fi, fj, v));
                    }
                }
            }
        }
        Ok(AssembledSystem {
            f_int,
            k_free,
            k_full,
            phi,
        })
    }

    /// Residual on the free dofs: `R = f_int - alpha * f_ext`.
    pub fn residual_free(&self, f_int: &[f64], alpha: f64) -> Vec<f64> {
        self.dofmap
            .free_dofs
            .iter()
            .map(|&d| f_int[d] - alpha * self.f_ext_unit[d])
            .collect()
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
