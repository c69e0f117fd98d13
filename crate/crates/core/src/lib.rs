//! Parsimonious Gaussian mixtures with likelihood-ratio testing of the
//! covariance structure.
//!
//! Component covariances are factored as `λ_j Γ_j Δ_j Γ_j'` (volume,
//! orientation, shape). Tying any subset of the three factors across
//! components gives eight nested models, from EEE to VVV. The crate fits
//! them by EM ([`em`]) with exact or iterative M-steps ([`mstep`]), tests
//! each constrained model against VVV by chi-square or parametric-bootstrap
//! LR tests ([`lrt`]) and combines the tests by closed testing ([`closed`]).
//!
//! ```
//! use gpcm::em::{fit_hierarchy, FitConfig};
//! use gpcm::model::ModelId;
//! use gpcm::simulation::{generate_dataset, ScenarioSpec};
//!
//! let (data, _) = generate_dataset(&ScenarioSpec { model: ModelId::VVE, n: 200, overlap: 0.05 }, 0).unwrap();
//! let fits = fit_hierarchy(&data, 2, &FitConfig::default(), 1).unwrap();
//! assert!(fits[&ModelId::VVV].loglik() >= fits[&ModelId::VVE].loglik());
//! ```

pub mod closed;
pub mod criteria;
pub mod em;
pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod lrt;
pub mod model;
pub mod mstep;
pub mod rng;
pub mod simulation;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/mstep.md")]
    mod mstep {}
    #[doc = include_str!("../../../book/src/em.md")]
    mod em {}
    #[doc = include_str!("../../../book/src/lr-testing.md")]
    mod lr_testing {}
    #[doc = include_str!("../../../book/src/closed-testing.md")]
    mod closed_testing {}
    #[doc = include_str!("../../../book/src/criteria.md")]
    mod criteria {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
