//! Jacobi fields, conjugate points and Green bundles along orbits of
//! sequences of symplectic twist maps on `T*T^d`.

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod generating;
pub mod green;
pub mod jacobi;
pub mod linalg;
pub mod parallel;
pub mod rigidity;

pub use error::{Error, Result};
