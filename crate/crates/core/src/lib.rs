//! Simulation and analysis of three sharded resilient transaction-processing
//! protocols over a UTXO-like object model.

pub mod consensus;
pub mod ids;
pub mod object_model;
pub mod sim;
pub mod ccb;
pub mod ocb;
pub mod pbft_host;
pub mod pcb;
pub mod protocol;
pub mod harness;
pub mod analysis;
