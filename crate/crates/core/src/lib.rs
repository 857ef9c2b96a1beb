//! Finite-range multiscale decompositions of lattice Green's functions.
//!
//! The resolvent `G^a = (a - Δ_ε)^{-1}` on `(εZ)^d` is split into positive
//! semi-definite covariances `Γ_j` of finite range by averaging Poisson kernels
//! of cubes over scales. [`levy`] extends the construction to
//! `(-Δ)^{-α/2}`, and [`sampling`] draws Gaussian fields from the pieces.
//!
//! ```
//! use finite_range::cache::KernelCache;
//! use finite_range::decomposition::decompose;
//!
//! let cache = KernelCache::new();
//! let levels = decompose(&cache, 2, 1, 1.0, 2).unwrap();
//! assert!(levels.iter().all(|l| l.diagnostics.range_ok() && l.diagnostics.psd_ok()));
//! ```

pub mod averaging;
pub mod cache;
pub mod decomposition;
pub mod dirichlet;
pub mod error;
pub mod lattice;
pub mod levy;
pub mod sampling;
pub mod torus;
pub mod verify;

pub use error::{Error, Result};

// The book's snippets run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/lattices.md")]
    mod lattices {}
    #[doc = include_str!("../../../book/src/poisson.md")]
    mod poisson {}
    #[doc = include_str!("../../../book/src/averaging.md")]
    mod averaging {}
    #[doc = include_str!("../../../book/src/decomposition.md")]
    mod decomposition {}
    #[doc = include_str!("../../../book/src/levy.md")]
    mod levy {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/caching.md")]
    mod caching {}
}
