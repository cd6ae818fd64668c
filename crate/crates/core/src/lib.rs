//! Gradient surgery for two-task learning.
//!
//! The auxiliary task's gradient is projected onto a cone at a dynamic acute
//! angle around the dominant task's gradient whenever the two conflict, and
//! the pair is rescaled when the auxiliary gradient is wrongly dominant. The
//! crate also ships the baselines (plain sum, PCGrad, fixed-angle
//! projection), a small two-headed network with manual backprop, a seeded
//! synthetic dataset, and a training harness that records how often each
//! strategy leaves conflicting or wrongly dominant gradients behind.

// `!(x > y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod experiment;
pub mod gradvec;
pub mod net;
pub mod surgery;
pub mod synthdata;
pub mod trainer;

pub use gradvec::{angle_between, flatten, reshape, AngleReport, GradError, GradientVector};
pub use net::{LossBundle, Network, NetworkShape};
pub use surgery::{
    dynamic_theta, project, remedy_layer, rescale, theta_prime, GradientCombiner, RatioRule,
    RemedyConfig, RemedyOutcome, Strategy, TaskGradients,
};
pub use synthdata::{generate, SampleBatch, SyntheticTask};
pub use trainer::{evaluate, train, EpochStats, StepStats, TrainConfig};
