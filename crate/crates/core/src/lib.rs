//! Molecular property prediction with hierarchical inter-message passing
//! between a molecule's atom graph and its junction tree.

pub mod chem;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod junction;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
