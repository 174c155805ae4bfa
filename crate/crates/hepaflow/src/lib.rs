//! Composable reaction-diffusion-chemotaxis engine for liver inflammation
//! models.
//!
//! The engine builds members of a model family on the unit square
//! `Ω = (0,1)²`: each model declares a set of components (virus `q1`,
//! T cells `q2` or the subtypes `Th`/`Tc`, cytokines `q3`), a list of
//! reaction terms drawn from a fixed mechanism catalog, and a list of
//! transport terms (diffusion, anisotropic diffusion, chemotaxis).
//! Space is discretized by second-order finite differences with zero-flux
//! boundaries ([`grid`]), the semi-discrete system is integrated by
//! adaptive explicit or implicit steppers ([`solver`]), and trajectories
//! are classified as healing or chronic infection courses ([`analysis`]).
//!
//! Every assembled model can be screened against the feasibility rules
//! R.1.1-R.3.6 ([`requirements`]) before it is integrated; the three
//! reference models ship as presets ([`model::preset`]).
//!
//! All floating point reductions are sequential and node loops are pure
//! maps, so results are bit-reproducible with and without the `parallel`
//! feature.

pub mod analysis;
pub mod grid;
pub mod mechanisms;
pub mod model;
pub mod requirements;
pub mod sampling;
pub mod solver;

pub use grid::{AnisotropyMap, Field, Grid, Region};
pub use mechanisms::{MechanismTerm, TermKind};
pub use model::{ModelDefinition, SystemState, TaxisTerm};
pub use requirements::{RequirementReport, SampleSpec, Verdict};
pub use solver::{SolverConfig, SolverMode, Trajectory};
