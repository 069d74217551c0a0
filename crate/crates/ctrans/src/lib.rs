//! Optimal transport under controlled linear dynamics.
//!
//! The library computes the point-to-point cost
//!
//! ```text
//! c_p(x, y) = min { ∫₀ᵀ |α(t)|ᵖ dt  :  γ' = M(t)γ + N(t)α,  γ(0) = x,  γ(T) = y }
//! ```
//!
//! for a non-autonomous linear control system, solves the static optimal
//! transport problem between discrete measures with `c_p` as ground cost, and
//! realizes the matching dynamic (path-ensemble) formulation so the two
//! optimal values can be compared numerically.
//!
//! Module layout:
//! - [`linsys`] — time-dependent system matrices and the state-transition flow Φ(s,t)
//! - [`control`] — controllability tests (generalized rank condition, Gramian)
//! - [`cost`] — point costs c_p, optimal controls, the induced metric d_p
//! - [`transport`] — discrete measures, cost matrices, transportation simplex
//! - [`dynamic`] — path ensembles, dynamic action, continuity-equation residuals

pub mod control;
pub mod cost;
pub mod dynamic;
pub mod error;
pub mod linsys;
pub mod quad;
pub mod systems;
pub mod transport;

pub use error::{Error, Result};
