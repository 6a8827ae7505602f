//! Quantization-aware training and weight-sharing compression for small
//! neural networks.
//!
//! The crate has five parts:
//!
//! - [`nn`]: a deterministic feed-forward engine (dense, conv2d, max-pool,
//!   ReLU, softmax cross-entropy) with exact analytic backpropagation;
//! - [`regularizer`]: four penalties that pull weights toward a small set of
//!   representative values during training — two static periodic ones and
//!   two whose representatives are themselves trained by backpropagation;
//! - [`quantizer`]: weight-sharing quantization (cluster, snap to centroids,
//!   recompute) plus a 1-D k-means baseline and codebook statistics;
//! - [`training`]: momentum-SGD training of weights and representatives,
//!   centroid-only cumulative fine-tuning, evaluation, checkpoints;
//! - [`experiment`]: the paired baseline-vs-regularized protocol with CSV
//!   metrics and bar-chart output.

pub mod cifar;
pub mod error;
pub mod experiment;
pub mod fdcheck;
pub mod nn;
pub mod quantizer;
pub mod regularizer;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use nn::{forward, loss_and_grad, ArchSpec, LayerKind, LayerParams, LayerSpec, Model};
pub use quantizer::{
    assign_to_codebook, codebook_stats, kmeans_1d, quantize_model, recompute_centroids,
    ClusterAssignment, QuantizedModel,
};
pub use regularizer::{
    init_codebook, reg_value, reg_value_and_grads, rho_cosine, rho_exp, rho_minl2, rho_sine,
    static_minima, Codebook, CodebookMode, LayerGroup, RegConfig, RegKind,
};
pub use tensor::Tensor;
pub use training::{
    cumulative_finetune, evaluate, train, EpochRecord, OptimizerState, TrainReport, TuneOptions,
};
