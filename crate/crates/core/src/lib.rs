//! Chemo-mechanical finite elements and gradient-based topology optimization
//! for composites of stimulus-swelling gels and passive elastomers.
//!
//! The crate is organized bottom-up:
//!
//! * [`material`] — Flory–Rehner swelling equilibrium, multi-material
//!   interpolation, and the plane-stress constitutive law (stress, tangent,
//!   and closed-form parameter sensitivities).
//! * [`mesh`] — structured bilinear quadrilateral meshes with named node and
//!   edge sets.
//! * [`fem`] — element kinematics (F-bar), assembly, boundary conditions, and
//!   the damped-Newton / load-stepping forward solver.
//! * [`field`] — the coordinate network that maps positions to phase
//!   densities and fiber angles, with a hand-written reverse-mode pullback.
//! * [`adjoint`] — discrete adjoint sensitivities of forward solutions with
//!   respect to network weights, plus a finite-difference checker.
//! * [`opt`] — objectives, constraints, the log-barrier merit, continuation
//!   schedules, Adam, and the optimization loop.
//! * [`config`] / [`driver`] — plain-text run configuration and the
//!   end-to-end run modes used by the CLI.
//! * [`io`] — VTK / PGM / CSV artifact writers.

pub mod error;
pub mod material;
pub mod mesh;
pub mod fem;
pub mod field;
pub mod adjoint;
pub mod opt;
pub mod io;
pub mod config;
pub mod driver;

pub use error::Error;

/// Universal gas constant in J/(mol K).
///
/// Fixed by convention for this crate (not configurable): every quantity that
/// enters the swelling residual is normalized by `R * T`, so consistency
/// matters more than the last CODATA digits.
pub const GAS_CONSTANT: f64 = 8.314;
