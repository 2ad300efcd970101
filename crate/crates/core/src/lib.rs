//! Chebyshev-Taylor parameterizations of stable and unstable manifolds of
//! hyperbolic periodic orbits, with connecting-orbit solvers built on them.

pub mod bundle;
pub mod bvp;
pub mod cheb;
pub mod connections;
mod dop853_tableau;
pub mod error;
pub mod flow;
pub mod io;
pub mod manifold;
pub mod models;
pub mod orbit;

pub use bundle::{FloquetBundle, Stability};
pub use bvp::{NewtonOptions, NewtonReport, ResidualSystem};
pub use cheb::{ChebSeries, ConvKernel, Mesh, PeriodicPiecewise, Side};
pub use connections::ConnectionResult;
pub use error::{Error, Result};
pub use flow::FlowOptions;
pub use manifold::ManifoldParam;
pub use models::{LiftMap, Model, ModelKind, PolyField};
pub use orbit::{Formulation, Orbit, OrbitProblem};
