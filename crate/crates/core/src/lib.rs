//! Training and certified verification of dense ReLU classifiers with
//! multiple abstain (detection) classes.
//!
//! A network with `K` regular and `M` abstain outputs is considered robust at
//! an input when, over the whole ℓ∞ ball, either the true class or some
//! abstain class outscores every other regular class. Two incomplete
//! verifiers certify this condition — interval bound propagation with an
//! exponentiated-gradient search over the class-mixing simplex
//! ([`verify_ibp`]), and an optimized linear relaxation ([`verify_crown`]) —
//! and [`trainer`] optimizes the matching robust surrogate losses, including
//! the anti-degeneracy penalty that keeps all abstain classes in use.
//! [`oracle`] supplies the independent ground truth (grids, attacks, and the
//! closed-form one-dimensional detection example) the test suites audit
//! everything against.

pub mod bounds;
pub mod data;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod report;
pub mod simplex;
pub mod trainer;
pub mod verify_crown;
pub mod verify_ibp;

pub use error::{Error, Result};
pub use nn::{DenseLayer, Gradient, Network};
