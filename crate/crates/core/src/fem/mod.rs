//! Plane-stress finite element machinery: F-bar quadrilateral elements,
//! boundary conditions, sparse assembly, and the load-stepped Newton solver.

pub mod assemble;
pub mod bc;
pub mod element;
pub mod linalg;
pub mod solver;

pub use assemble::{norm2, AssembledSystem, DesignFields, FemModel};
pub use bc::{BoundaryConditions, DirichletSpec, DofComp, DofMap, TractionSpec};
pub use element::{ElementDesignContraction, ElementGeom};
pub use linalg::SparseLu;
pub use solver::{
    load_stepping_solve, load_stepping_solve_with_retry, newton_solve, reaction_force,
    set_reaction, ForwardSolution, LoadSchedule, NewtonSettings, StepReport,
};
