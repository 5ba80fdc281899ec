//! Objective, optimizer, gradient verification and the training loop.

pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use gradcheck::{grad_check, GradCheckOptions, GradReport};
pub use loss::{contrastive_loss, contrastive_loss_value, cosine_similarity, cross_entropy, similarity_matrix};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use trainer::{evaluate, loss_and_grads, model_grad_check, train, EvalMetrics, RunConfig, TrainConfig};
