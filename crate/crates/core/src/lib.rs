//! Hamiltonian flows on the probability simplex of a finite graph, the jump
//! processes they induce, and discrete Schrödinger bridges.
//!
//! The crate is organised bottom up:
//!
//! - [`graph`]: weighted graphs, densities, discrete gradient and divergence,
//!   weighted Hodge decomposition.
//! - [`theta`]: upwind, average and logarithmic edge weights.
//! - [`rates`]: time-dependent generators and reference rates.
//! - [`hamiltonian`]: Hamiltonian variants and their exact vector fields.
//! - [`dynamics`]: RK4 and implicit midpoint integration, chart changes,
//!   symplecticity checks, Floquet multipliers.
//! - [`markov`]: rate matrices induced by a flow, propagators, path sampling.
//! - [`sbp`]: bridge solver, path entropy, periodic constructions and
//!   stationarity conditions.
//! - [`io`]: CSV and JSON exports.
//!
//! Batch work (path sampling, enumeration, grad checks over many states) runs
//! through [`par`], which uses rayon when the `parallel` feature is enabled.

pub mod catalog;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod hamiltonian;
pub mod io;
pub mod markov;
pub mod par;
pub mod rates;
pub mod sbp;
pub mod theta;

pub use error::{Error, Result};
pub use graph::{Graph, GraphSpec, SkewField};
pub use hamiltonian::{Chart, ConvexDual, Coupling, HamiltonianSpec, NodePotential, PhasePoint, Variant};
pub use par::ExecMode;
pub use rates::{ConstantRates, FnRates, Generator, ReferenceRates};
pub use theta::ThetaKind;
