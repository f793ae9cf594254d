//! Numerical laboratory for the D-condition on smooth time-dependent
//! (optionally weighted) model flows.
//!
//! The crate evaluates Buzano's D-tensor in closed form on a small family of
//! model flows (round spheres, flat tori, conformal circles, weighted
//! circles, static manifolds) and then verifies, at desk scale, the
//! functional characterizations tied to `D >= 0`: Bochner identities for
//! heat flows, gradient estimates, Wasserstein contractions for
//! Lagrangian-action costs, entropy convexity, evolution variational
//! inequalities, monotonicity of the F and W functionals, and the space-time
//! Ricci identity.
//!
//! Layering: `expr` (exact closed-form parameters) -> `geometry` (snapshots
//! and the D-tensor) -> `pde` (heat and conjugate heat propagators) ->
//! `lagrangian` (action costs, Hopf-Lax) -> `transport` (Kantorovich
//! problems, geodesics, entropy) -> `functionals` / `harness` / `spacetime`
//! (the actual checks) -> `scenario` (batch runner behind the `dflow` CLI).

pub mod error;
pub mod expr;
pub mod geometry;
pub mod pde;
pub mod transport;
pub mod lagrangian;
pub mod functionals;
pub mod harness;
pub mod spacetime;
pub mod scenario;

pub use error::{DflowError, Result};
