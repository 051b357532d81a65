//! Ground-state refinement of annealed quantum states with MERA tensor networks.
//!
//! A Trotterized annealing circuit prepares an approximate ground state of the
//! transverse-field Ising chain. A periodic, untruncated MERA is then applied on
//! top of it and optimized with Riemannian ADAM, with energies evaluated either
//! exactly or through local-Pauli classical shadows of the annealed state.

pub mod annealing;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mera;
pub mod oracle;
pub mod pauli;
pub mod riemannian;
pub mod shadows;
pub mod state;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
