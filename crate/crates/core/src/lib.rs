//! Ternary-weight, matmul-free recurrent language models and their
//! reservoir-computing variants.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] / [`autodiff`]: dense tensors and a small reverse-mode tape
//!   covering exactly the operations the model needs.
//! * [`ternary`]: absmean quantization, 2-bit trit packing, the add/sub-only
//!   ternary matmul and the straight-through estimator.
//! * [`reservoir`]: fixed shared ternary matrices, spectral radius
//!   estimation and a leaky-integrator echo state cell.
//! * [`fused_kernel`]: fused and two-pass recurrent traversals with exact
//!   buffer-traffic counters.
//! * [`layers`]: cumax lower bounds, MLGRU (base / rc / grc), GLU, RMSNorm,
//!   block wiring and the full model.
//! * [`accounting`]: closed-form parameter and memory accounting.
//! * [`train`]: byte tokenizer, config files, Adam + cosine schedule,
//!   evaluation, generation and checkpoints.

pub mod accounting;
pub mod autodiff;
pub mod error;
pub mod fused_kernel;
pub mod layers;
pub mod real;
pub mod reservoir;
pub mod tensor;
pub mod ternary;
pub mod train;

pub use autodiff::{LinearKernel, ParamId, ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use layers::{Model, ModelConfig, Variant};
pub use real::Real;
pub use tensor::Tensor;
pub use ternary::{QuantMode, QuantizedLinear, TernaryMatrix};
