//! Input-state construction: the simulated qRAM query, amplitude encodings
//! of returns (`|χ⟩`, `|R⟩`, `|χ̃⟩`), the covariance density matrix, and the
//! subnorm-tree deterministic preparation.

mod encoding;
mod kp_tree;
mod oracle;

pub use encoding::{
    chi_tilde_probability, covariance_density, estimate_trace_sigma, prepare_chi,
    prepare_chi_from_returns, prepare_chi_tilde, prepare_r_state, PrepOutcome,
};
pub use kp_tree::KPTree;
pub use oracle::{oracle_query, oracle_uncompute, Precision, QramOracle, SparsityOracle};
