//! Boundary conditions and the free/fixed dof partition.

use crate::error::{Error, Result};
use crate::mesh::QuadMesh;

/// Displacement component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofComp {
    X = 0,
    Y = 1,
}

impl DofComp {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Prescribed displacement component on a named node set. The value is the
/// fully applied magnitude; load stepping scales it.
#[derive(Debug, Clone)]
pub struct DirichletSpec {
    pub node_set: String,
    pub comp: DofComp,
    /// Displacement in m at full load.
    pub value: f64,
}

/// Dead-load traction on a named boundary edge set, per unit reference area.
#[derive(Debug, Clone)]
pub struct TractionSpec {
    pub edge_set: String,
    /// Traction vector in Pa at full load.
    pub traction: [f64; 2],
}

#[derive(Debug, Clone, Default)]
pub struct BoundaryConditions {
    pub dirichlet: Vec<DirichletSpec>,
    pub tractions: Vec<TractionSpec>,
}

/// Free/fixed partition of the global dofs with prescribed values.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub fixed: Vec<bool>,
    /// Prescribed displacement at full load; zero on free dofs.
    pub value: Vec<f64>,
    /// Global dof -> position among free dofs.
    pub free_index: Vec<Option<usize>>,
    /// Position among free dofs -> global dof.
    pub free_dofs: Vec<usize>,
}

impl DofMap {
    pub fn num_free(&self) -> usize {
        self.free_dofs.len()
    }

    /// Restricts a full-length vector to the free dofs.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free_dofs.iter().map(|&d| full[d]).collect()
    }

    /// Scatters a free-dof vector into a zeroed full-length vector.
    pub fn scatter(&self, free: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.fixed.len()];
        for (slot, &d) in self.free_dofs.iter().enumerate() {
            full[d] = free[slot];
        }
        full
    }

    /// Overwrites the fixed entries of `u` with `alpha`-scaled prescribed
    /// values.
    pub fn apply(&self, u: &mut [f64], alpha: f64) {
        for (d, &fx) in self.fixed.iter().enumerate() {
            if fx {
                u[d] = alpha * self.value[d];
            }
        }
    }

    /// Builds the partition, validating set names, conflicting prescriptions,
    /// and a necessary condition for rigid-body-mode removal.
    pub fn build(mesh: &QuadMesh, bc: &BoundaryConditions) -> Result<Self> {
        let n = mesh.num_dofs();
        let mut fixed = vec![false; n];
        let mut value = vec![0.0; n];

        for spec in &bc.dirichlet {
            let set = mesh.node_set(&spec.node_set).ok_or_else(|| {
                Error::Domain(format!("unknown node set '{}' in Dirichlet spec", spec.node_set))
            })?;
            for &node in set {
                let d = 2 * node + spec.comp.index();
                if fixed[d] && (value[d] - spec.value).abs() > 1e-12 {
                    return Err(Error::Domain(format!(
                        "conflicting Dirichlet values at node {node} component {:?}: {} vs {}",
                        spec.comp, value[d], spec.value
                    )));
                }
                fixed[d] = true;
                value[d] = spec.value;
            }
        }

        // A traction that can do no work because all its target dofs are
        // prescribed indicates overlapping Dirichlet/Neumann supports.
        for spec in &bc.tractions {
            let edges = mesh.edge_set(&spec.edge_set).ok_or_else(|| {
                Error::Domain(format!("unknown edge set '{}' in traction spec", spec.edge_set))
            })?;
            for comp in 0..2 {
                if spec.traction[comp] == 0.0 {
                    continue;
                }
                let all_fixed = edges
                    .iter()
                    .flat_map(|e| e.iter())
                    .all(|&node| fixed[2 * node + comp]);
                if all_fixed {
                    return Err(Error::Domain(format!(
                        "traction on edge set '{}' acts only on Dirichlet-fixed dofs (component {comp})",
                        spec.edge_set
                    )));
                }
            }
        }

        let n_x = (0..n).step_by(2).filter(|&d| fixed[d]).count();
        let n_y = (1..n).step_by(2).filter(|&d| fixed[d]).count();
        if n_x == 0 || n_y == 0 || n_x + n_y < 3 {
            return Err(Error::Domain(format!(
                "insufficient constraints to remove rigid-body modes: {n_x} in x, {n_y} in y \
                 (need at least one per direction and three in total)"
            )));
        }

        let mut free_index = vec![None; n];
        let mut free_dofs = Vec::with_capacity(n);
        for d in 0..n {
            if !fixed[d] {
                free_index[d] = Some(free_dofs.len());
                free_dofs.push(d);
            }
        }
        Ok(DofMap {
            fixed,
            value,
            free_index,
            free_dofs,
        })
    }
}

/// Assembles the full-dof external force from tractions at full load
/// (`alpha = 1`). Tractions are dead loads on reference edges: each straight
/// edge contributes half its scaled force to each end node.
pub fn external_force(mesh: &QuadMesh, bc: &BoundaryConditions) -> Result<Vec<f64>> {
    let mut f = vec![0.0; mesh.num_dofs()];
    for spec in &bc.tractions {
        let edges = mesh.edge_set(&spec.edge_set).ok_or_else(|| {
            Error::Domain(format!("unknown edge set '{}' in traction spec", spec.edge_set))
        })?;
        for &[a, b] in edges {
            let pa = mesh.nodes[a];
            let pb = mesh.nodes[b];
            let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
            let scale = 0.5 * len * mesh.thickness;
            for comp in 0..2 {
                f[2 * a + comp] += scale * spec.traction[comp];
                f[2 * b + comp] += scale * spec.traction[comp];
            }
        }
    }
    Ok(f)
}
