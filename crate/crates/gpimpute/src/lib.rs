//! Numerical laboratory for diffusion-based imputation of Gaussian-process
//! sequences.
//!
//! The pipeline: a GP data law `N(mu, Gamma (x) Lambda)` over `H` frames of
//! dimension `d` ([`gp`]), block-missing masks ([`mask`]), the closed-form
//! conditional score of the forward-noised missing block ([`score`]), a
//! nested-gradient-descent representation of that score and its unrolling
//! into a ReLU-attention network ([`unroll`], [`transformer`]), a backward
//! SDE sampler ([`sampler`]), denoising score-matching over a linear-in-
//! features family ([`train`]), confidence-region imputation ([`impute`]),
//! and diagnostics linking masks to condition numbers ([`analysis`]).

pub mod analysis;
pub mod error;
pub mod gp;
pub mod impute;
pub mod mask;
pub mod sampler;
pub mod score;
pub mod train;
pub mod transformer;
pub mod unroll;

pub use error::{Error, Result};
pub use gp::{ConditionalGaussian, EmbeddingSpec, GpSpec, KernelSpec};
pub use mask::{BlockStrategy, Mask, MixedStrategy, Placement};
pub use sampler::SamplerConfig;
pub use score::{DiffusionSchedule, ExactScore, ScoreFn, ScoreQuery};
