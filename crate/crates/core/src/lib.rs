//! Adversarial image generation and evaluation.
//!
//! Two families of attacks share one evaluation pipeline:
//!
//! * gradient-sign attacks ([`attacks`]) that query a classifier's input
//!   gradient at attack time, and
//! * learned generators ([`node`], [`generator`]) trained once against a
//!   classifier ([`training`]) and then applied in a single forward pass.
//!
//! The neural-ODE generator integrates a dilated-convolution vector field
//! from the clean image; its training budget may differ from the budget used
//! at test time.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod node;
pub mod training;
pub mod types;

pub use attacks::{GradAttack, GradAttackConfig};
pub use error::{Error, Result};
pub use generator::{
    generate_adversarial, generate_raw, AdvGanConfig, AdvGanGenerator, AdversarialGenerator, Generator,
};
pub use losses::LossWeights;
pub use metrics::{EvalReport, EvalRow};
pub use models::{Arch, Classifier, ClassifierSpec, TargetModel};
pub use node::{NodeConfig, NodeGenerator, VectorFieldConfig};
pub use odeadv_autograd as autograd;
pub use odeadv_autograd::Tensor;
pub use training::{Discriminator, TrainConfig, TrainLogRow};
pub use types::{apply_perturbation, clip_elementwise, per255, AttackBudget, ImageBatch, LabelSpec, Perturbation};
