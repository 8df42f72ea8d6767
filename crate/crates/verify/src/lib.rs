//! Reference implementations that check the production code from the
//! outside: exhaustive enumeration where the space is small, Monte Carlo
//! where it is not.

pub mod brute;
pub mod montecarlo;
