//! Exact desk-scale simulation of quantum mean-variance portfolio
//! optimization: market data encoding, HHL pseudo-inversion of the Markowitz
//! KKT system, and quantum readout, each checked against a classical solver.

pub mod error;
pub mod hamiltonian_sim;
pub mod hhl;
pub mod linalg;
pub mod market_data;
pub mod portfolio_qp;
pub mod qsim;
pub mod readout;
pub mod state_prep;
pub mod verify;

pub use error::{Error, Result};
