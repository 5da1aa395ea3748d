pub mod cayley_menger;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod reconstruction;
pub mod simulator;
pub mod symmetry;
