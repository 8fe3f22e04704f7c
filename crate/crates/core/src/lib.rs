//! Core algorithms for repurposing pretrained few-shot checkpoints at test
//! time: uncertainty-based stepsize adaptation and uncertainty-scaled
//! adversarial data augmentation on top of a minimal reverse-mode autodiff
//! engine.
//!
//! The crate is `no_std`-compatible (requires `alloc`); file formats, the
//! benchmark harness, and the CLI live in the companion `restep` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod adapt;
pub mod adversarial;
pub mod autodiff;
pub mod error;
pub mod model;
pub mod rng;
pub mod taskgen;
pub mod tensor;
pub mod uncertainty;

pub use adapt::{
    adapt, optimizer_step, AdaptConfig, AdaptResult, OptimizerKind, OptimizerState, Preset,
    StepLosses,
};
pub use adversarial::{
    at_loss, fgsm, min_max_normalize, perturb, ufgsm, AugExample, AugSet, Provenance,
};
pub use autodiff::{
    classification_accuracy, forward_logits, forward_loss, grad_input, grad_params, Tape,
};
pub use error::CoreError;
pub use model::{LayerKind, LayerSpec, ModelSpec, Padding, ParamSet};
pub use taskgen::{sample_episode, shifted_domain, DomainParams, Episode};
pub use tensor::Tensor;
pub use uncertainty::{ensemble_step, param_std, perturb_init, usa, Ensemble, StepsizeMap};
