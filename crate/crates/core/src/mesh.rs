//! Structured bilinear quadrilateral meshes.
//!
//! Nodes are numbered column-major (y fastest): node `(i, j)` of an
//! `nx x ny`-element grid has index `i * (ny + 1) + j`. For the wide, flat
//! domains typical here this keeps the stiffness bandwidth small. Element
//! connectivity is counter-clockwise starting at the bottom-left corner.
//!
//! Named node sets (`left`, `right`, `bottom`, `top`) and matching boundary
//! edge sets are generated for the rectangle; additional sets can be added
//! from axis-aligned boxes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Bilinear shape functions on the reference square `[-1, 1]^2`.
pub fn shape4(xi: f64, eta: f64) -> [f64; 4] {
    [
        0.25 * (1.0 - xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 + eta),
        0.25 * (1.0 - xi) * (1.0 + eta),
    ]
}

/// Shape-function gradients in reference coordinates, `[dN/dxi, dN/deta]`.
pub fn dshape4(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    [
        [-0.25 * (1.0 - eta), -0.25 * (1.0 - xi)],
        [0.25 * (1.0 - eta), -0.25 * (1.0 + xi)],
        [0.25 * (1.0 + eta), 0.25 * (1.0 + xi)],
        [-0.25 * (1.0 + eta), 0.25 * (1.0 - xi)],
    ]
}

/// A structured quadrilateral mesh with named sets.
#[derive(Debug, Clone)]
pub struct QuadMesh {
    pub nodes: Vec<[f64; 2]>,
    /// Counter-clockwise node quadruples.
    pub elements: Vec<[usize; 4]>,
    /// Out-of-plane thickness in m.
    pub thickness: f64,
    node_sets: BTreeMap<String, Vec<usize>>,
    /// Boundary edges as node pairs, ordered along the boundary.
    edge_sets: BTreeMap<String, Vec<[usize; 2]>>,
}

/// Builds an axis-aligned `nx x ny` rectangle of size `lx x ly` (meters) with
/// its lower-left corner at the origin.
pub fn build_rect_mesh(nx: usize, ny: usize, lx: f64, ly: f64, thickness: f64) -> Result<QuadMesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::Domain(format!(
            "mesh needs at least one element per direction, got {nx} x {ny}"
        )));
    }
    if !(lx > 0.0) || !(ly > 0.0) || !(thickness > 0.0) {
        return Err(Error::Domain(format!(
            "mesh dimensions must be positive, got lx = {lx}, ly = {ly}, thickness = {thickness}"
        )));
    }

    let dx = lx / nx as f64;
    let dy = ly / ny as f64;
    let node_id = |i: usize, j: usize| i * (ny + 1) + j;

    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for i in 0..=nx {
        for j in 0..=ny {
            nodes.push([i as f64 * dx, j as f64 * dy]);
        }
    }

    let mut elements = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            elements.push([
                node_id(i, j),
                node_id(i + 1, j),
                node_id(i + 1, j + 1),
                node_id(i, j + 1),
            ]);
        }
    }

    let mut node_sets = BTreeMap::new();
    node_sets.insert("left".to_string(), (0..=ny).map(|j| node_id(0, j)).collect());
    node_sets.insert("right".to_string(), (0..=ny).map(|j| node_id(nx, j)).collect());
    node_sets.insert("bottom".to_string(), (0..=nx).map(|i| node_id(i, 0)).collect());
    node_sets.insert("top".to_string(), (0..=nx).map(|i| node_id(i, ny)).collect());

    let mut edge_sets = BTreeMap::new();
    edge_sets.insert(
        "left".to_string(),
        (0..ny).map(|j| [node_id(0, j), node_id(0, j + 1)]).collect(),
    );
    edge_sets.insert(
        "right".to_string(),
        (0..ny).map(|j| [node_id(nx, j), node_id(nx, j + 1)]).collect(),
    );
    edge_sets.insert(
        "bottom".to_string(),
        (0..nx).map(|i| [node_id(i, 0), node_id(i + 1, 0)]).collect(),
    );
    edge_sets.insert(
        "top".to_string(),
        (0..nx).map(|i| [node_id(i, ny), node_id(i + 1, ny)]).collect(),
    );

    let mesh = QuadMesh {
        nodes,
        elements,
        thickness,
        node_sets,
        edge_sets,
    };
    mesh.validate()?;
    Ok(mesh)
}

impl QuadMesh {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn num_dofs(&self) -> usize {
        2 * self.nodes.len()
    }

    /// Checks connectivity bounds and that every element has a positive
    /// mapping Jacobian at its Gauss points and corners.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let g = 1.0 / 3.0f64.sqrt();
        let probes = [
            (-g, -g),
            (g, -g),
            (g, g),
            (-g, g),
            (-1.0, -1.0),
            (1.0, -1.0),
            (1.0, 1.0),
            (-1.0, 1.0),
        ];
        for (e, conn) in self.elements.iter().enumerate() {
            for &a in conn {
                if a >= n {
                    return Err(Error::Domain(format!(
                        "element {e} references node {a}, mesh has {n} nodes"
                    )));
                }
            }
            for (xi, eta) in probes {
                let det = self.mapping_jacobian(e, xi, eta);
                if det <= 0.0 {
                    return Err(Error::InvertedElement { element: e, det });
                }
            }
        }
        for (name, set) in &self.node_sets {
            for &a in set {
                if a >= n {
                    return Err(Error::Domain(format!(
                        "node set '{name}' references node {a}, mesh has {n} nodes"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Determinant of the reference-to-physical mapping Jacobian.
    pub fn mapping_jacobian(&self, element: usize, xi: f64, eta: f64) -> f64 {
        let conn = &self.elements[element];
        let dn = dshape4(xi, eta);
        let mut j = [[0.0; 2]; 2];
        for a in 0..4 {
            let x = self.nodes[conn[a]];
            for r in 0..2 {
                for c in 0..2 {
                    j[r][c] += x[r] * dn[a][c];
                }
            }
        }
        j[0][0] * j[1][1] - j[0][1] * j[1][0]
    }

    pub fn node_set(&self, name: &str) -> Option<&[usize]> {
        self.node_sets.get(name).map(|v| v.as_slice())
    }

    pub fn edge_set(&self, name: &str) -> Option<&[[usize; 2]]> {
        self.edge_sets.get(name).map(|v| v.as_slice())
    }

    pub fn node_set_names(&self) -> impl Iterator<Item = &str> {
        self.node_sets.keys().map(|s| s.as_str())
    }

    /// Registers a node set; indices are sorted and deduplicated.
    pub fn add_node_set(&mut self, name: &str, mut indices: Vec<usize>) -> Result<()> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&a| a >= self.nodes.len()) {
            return Err(Error::Domain(format!(
                "node set '{name}' references node {bad}, mesh has {} nodes",
                self.nodes.len()
            )));
        }
        if indices.is_empty() {
            return Err(Error::Domain(format!("node set '{name}' is empty")));
        }
        self.node_sets.insert(name.to_string(), indices);
        Ok(())
    }

    /// Node indices inside a closed axis-aligned box, with a small snap
    /// tolerance relative to the mesh diagonal.
    pub fn nodes_in_box(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<usize> {
        let (lo, hi) = self.bounding_box();
        let tol = 1e-9 * ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt();
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                p[0] >= x0 - tol && p[0] <= x1 + tol && p[1] >= y0 - tol && p[1] <= y1 + tol
            })
            .map(|(a, _)| a)
            .collect()
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.nodes {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    pub fn element_centroid(&self, element: usize) -> [f64; 2] {
        let conn = &self.elements[element];
        let mut c = [0.0; 2];
        for &a in conn {
            c[0] += self.nodes[a][0];
            c[1] += self.nodes[a][1];
        }
        [0.25 * c[0], 0.25 * c[1]]
    }

    /// Reference area of an element (by 2x2 Gauss quadrature).
    pub fn element_area(&self, element: usize) -> f64 {
        let g = 1.0 / 3.0f64.sqrt();
        [(-g, -g), (g, -g), (g, g), (-g, g)]
            .iter()
            .map(|&(xi, eta)| self.mapping_jacobian(element, xi, eta))
            .sum()
    }

    /// Physical coordinates of a reference point in an element.
    pub fn map_point(&self, element: usize, xi: f64, eta: f64) -> [f64; 2] {
        let conn = &self.elements[element];
        let n = shape4(xi, eta);
        let mut x = [0.0; 2];
        for a in 0..4 {
            x[0] += n[a] * self.nodes[conn[a]][0];
            x[1] += n[a] * self.nodes[conn[a]][1];
        }
        x
    }

    /// Finds the element containing a physical point and its reference
    /// coordinates, by bounding-box prefilter plus an inverse-bilinear Newton
    /// iteration. Points on shared edges resolve to the first matching
    /// element (deterministic given the element ordering).
    pub fn locate_point(&self, p: [f64; 2]) -> Option<(usize, f64, f64)> {
        let (lo, hi) = self.bounding_box();
        let tol = 1e-9 * ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt();
        for (e, conn) in self.elements.iter().enumerate() {
            let (mut bx0, mut by0) = (f64::INFINITY, f64::INFINITY);
            let (mut bx1, mut by1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &a in conn {
                bx0 = bx0.min(self.nodes[a][0]);
                by0 = by0.min(self.nodes[a][1]);
                bx1 = bx1.max(self.nodes[a][0]);
                by1 = by1.max(self.nodes[a][1]);
            }
            if p[0] < bx0 - tol || p[0] > bx1 + tol || p[1] < by0 - tol || p[1] > by1 + tol {
                continue;
            }
            // Newton on N(xi, eta) . X - p = 0.
            let (mut xi, mut eta) = (0.0f64, 0.0f64);
            let mut ok = false;
            for _ in 0..20 {
                let x = self.map_point(e, xi, eta);
                let rx = x[0] - p[0];
                let ry = x[1] - p[1];
                if rx.abs() + ry.abs() < tol {
                    ok = true;
                    break;
                }
                let dn = dshape4(xi, eta);
                let mut j = [[0.0; 2]; 2];
                for a in 0..4 {
                    let xn = self.nodes[conn[a]];
                    for r in 0..2 {
                        for c in 0..2 {
                            j[r][c] += xn[r] * dn[a][c];
                        }
                    }
                }
                let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
                if det.abs() < 1e-30 {
                    break;
                }
                xi -= (j[1][1] * rx - j[0][1] * ry) / det;
                eta -= (-j[1][0] * rx + j[0][0] * ry) / det;
            }
            if ok && xi.abs() <= 1.0 + 1e-8 && eta.abs() <= 1.0 + 1e-8 {
                return Some((e, xi.clamp(-1.0, 1.0), eta.clamp(-1.0, 1.0)));
            }
        }
        None
    }
}
