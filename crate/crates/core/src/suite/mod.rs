//! Self-check harnesses behind the `gradcheck` and `oracle` commands.

pub mod grad;
pub mod oracle;
pub mod reference;

pub use grad::{run_grad_suite, GradReport, GradRow};
pub use oracle::{run_oracles, OracleReport, OracleRow};
