//! Numerical laboratory for pseudo-orbits, shadowing, linear Poincaré flows,
//! dominated splittings and chain recurrence of smooth flows.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain_graph;
pub mod flow;
pub mod linalg;
pub mod poincare;
pub mod pseudo_orbit;
pub mod scenarios;
pub mod shadowing;
pub mod splitting;

pub use flow::{
    flow_at, flow_with_tangent, integrate, integrate_until_escape, tangent_flow, ConservedQuantity,
    CoordKind, FlowError, IntegratorOptions, Trajectory, VectorFieldSpec,
};
pub use poincare::{CriticalElementReport, Eigenvalue, PoincareOptions};
pub use pseudo_orbit::{OrbitEntry, PseudoOrbit};
pub use scenarios::{builtin, builtin_names, builtin_params, Scenario};
pub use shadowing::{ShadowOptions, ShadowingReport, Verdict};

/// Version of this crate.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
