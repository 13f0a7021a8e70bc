//! Shared latent action space for dexterous robot hands.
//!
//! Each hand gets its own encoder/decoder head over one Gaussian latent
//! space. Heads are trained jointly from randomly sampled joint
//! configurations with a reconstruction loss, a fingertip pinch retargeting
//! loss computed through differentiable forward kinematics, and a KL prior
//! term. Cross-hand retargeting is encode on one head, decode on another.

pub mod evalmetrics;
pub mod gradcore;
pub mod handmodel;
pub mod io;
pub mod latentspace;
pub mod objective;
pub mod trainer;

pub use evalmetrics::{full_report, Codec, Embodiment, EvalConfig, MetricError, MetricsReport, PinchConfig, PoseSet};
pub use gradcore::{GradError, Gradients, Tape, Tensor, Var};
pub use handmodel::{Digit, HandError, HandSpec, JointPose};
pub use latentspace::{LatentCode, LatentError, LatentModel, CHECKPOINT_VERSION};
pub use objective::{HandBatch, LossBreakdown, LossWeights, Objective, ObjectiveError, PairSet};
pub use trainer::{train, train_with, Ablation, AdamConfig, TrainConfig, TrainError, TrainLog};
