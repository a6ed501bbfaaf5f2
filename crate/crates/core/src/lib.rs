//! Zero-shot self-supervised reconstruction of time-resolved 2D fast-spin-echo MRI
//! on a linear temporal latent space, with joint coil-sensitivity estimation and a
//! full synthetic-data simulator.
//!
//! The library is organized around the forward model `A = M F S Phi` mapping latent
//! coefficient maps to undersampled multi-coil, multi-echo k-space:
//!
//! - [`signal_model`]: extended phase graph simulation of FSE echo trains, signal
//!   dictionaries, and the SVD latent basis.
//! - [`linops`]: the forward/adjoint operators and their building blocks.
//! - [`solvers`]: conjugate gradients, regularized data-consistency solves, wavelets,
//!   and the FISTA baseline solver.
//! - [`net`]: a small residual CNN with from-scratch forward/backward and Adam.
//! - [`masking`]: shuffling acquisition masks, self-supervision partitions, and loss.
//! - [`phantom`]: synthetic phantoms, coil maps, and k-space simulation.
//! - [`recon`]: the reconstruction pipelines (baselines and the zero-shot stages).
//! - [`metrics`]: NMSE, SSIM, and dictionary-matching T2 maps.
//! - [`io`]: the raw complex-array file format, checkpoints, and PNG export.

pub mod error;
pub mod io;
pub mod linops;
pub mod masking;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod recon;
pub mod signal_model;
pub mod solvers;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type Cplx = num_complex::Complex64;
