//! Multiscale stochastic-volatility portfolio asymptotics.
//!
//! Leading-order value and strategy from the constant-Sharpe Merton problem,
//! explicit first-order corrections in the fast and slow scales, and a Monte
//! Carlo harness that checks the residual order and asymptotic optimality.

pub mod asymptotics;
pub mod error;
pub mod experiments;
pub mod factors;
pub mod merton;
pub mod quadrature;
pub mod simulate;
pub mod utility;

pub use error::{Error, Result};
pub use merton::{MertonMethod, MertonPoint, MertonSolution};
pub use utility::{UtilityKind, UtilitySpec};
