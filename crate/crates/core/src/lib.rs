//! Non-Markovian dynamics of a driven two-level system.
//!
//! The crate converts between dynamical maps `U_N`, discrete transfer-tensor
//! kernels `K_N` and continuous Nakajima–Zwanzig memory kernels `K(t)`, and
//! ships reference simulators for the spin-boson model to validate them.
//!
//! * [`superop`]: Liouville-space algebra and the core data types.
//! * [`discrete`]: the discrete recursion (extraction and propagation).
//! * [`bridge`]: discrete/continuous kernel conversions (FDIO, TTM(1), TTM(2), MPD/I).
//! * [`volterra`]: fine-grid continuous-kernel extraction and propagation.
//! * [`spin_boson`]: bath, fitting, HEOM and exact reference dynamics.
//! * [`io`], [`cli`], [`study`]: file formats, commands and convergence studies.

pub mod bridge;
pub mod cli;
pub mod discrete;
pub mod error;
pub mod io;
pub mod quadrature;
pub mod spin_boson;
pub mod study;
pub mod superop;
pub mod volterra;

pub use error::{Error, Result};
