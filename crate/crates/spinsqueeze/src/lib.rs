pub mod spin_core;
pub mod mode_model;
pub mod dynamics_noise;
mod tridiag;
pub mod metrology;
pub mod tomography;
pub mod wigner;
pub mod cli;
