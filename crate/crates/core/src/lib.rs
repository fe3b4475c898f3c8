//! LoRA merging and skill composition at desk scale.
//!
//! - [`tensor`], [`autodiff`], [`rng`]: float64 tensors, a reverse-mode tape
//!   over a fixed op set, and a seedable xoshiro256** generator.
//! - [`container`], [`adapter`]: tensor-container checkpoints and LoRA
//!   adapters with the ecosystem key and config conventions.
//! - [`merge`]: concatenation (CAT), linear, TIES, DARE and SLERP merging,
//!   plus the hyperparameter grid sweep.
//! - [`model`]: a small decoder-only transformer with adapter injection.
//! - [`train`]: skill fine-tuning, DATA-MIX, learned CAT coefficients, MoE
//!   routers and gradient-free LoRA Hub weighting.
//! - [`bench`]: deterministic synthetic skill datasets.
//! - [`eval`]: exec-accuracy, Elo with bootstrap, super-linearity report.
//! - [`experiment`]: end-to-end composition harnesses.

pub mod adapter;
pub mod autodiff;
pub mod bench;
pub mod container;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod merge;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use adapter::{delta, read_checkpoint, write_checkpoint, LoraAdapter, LoraConfig, LoraPair};
pub use autodiff::{Graph, Var};
pub use error::{Error, FormatError, Result};
pub use merge::{MergeMethod, MergeSpec, MergedDelta};
pub use rng::Rng;
pub use tensor::{DType, Tensor};
