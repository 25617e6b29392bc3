//! Hybrid CNN/Transformer vision backbone.
//!
//! Every numeric routine is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the default `f64` precision used by
//! training, gradient checks and checkpoints.

pub mod attention;
pub mod backbone;
pub mod dual_switching;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod hnb;
pub mod io;
pub mod layers;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use attention::{gmsa, patch_partition, re_view, flatten, AttentionParams, FeatureMap, PatchEmbed, TokenGrid};
pub use backbone::{build_variant, count_config_params, ForwardOutput, Model, ModelConfig, Variant};
pub use dual_switching::{ds_block, ds_permute, DsPermutation};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use hnb::{hnb_stage, multi_granularity_conv, ConvTriple, HnbStageParams};
pub use scalar::{DType, Scalar};
pub use harness::{evaluate, gen_synthetic, pearson, run_sweep, train, Factor, SweepRecord, TaskConfig, TrainConfig};
pub use io::{emit_csv, load_checkpoint, load_config, parse_config, save_checkpoint};
pub use tensor::{ParamStore, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Hyneter = Model<f64>;
pub type Hyneter32 = Model<f32>;
