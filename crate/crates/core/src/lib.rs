//! Small portfolios of MDP policies that are approximately optimal for every generalized
//! p-mean welfare objective with `p ≤ 1`.

pub mod envs;
pub mod error;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod portfolio;
pub mod seeding;
pub mod welfare;

pub use error::{Error, Result};
pub use welfare::PValue;
