//! Lowering-based multi-channel 2-D convolution.
//!
//! A stride-1 convolution of an `n×n×d` tensor with `o` kernels of shape
//! `k×k×d` is computed by *lowering* the operands into two dense matrices,
//! multiplying them, and *lifting* the product back into `o` planes of
//! `m×m` outputs (`m = n - k + 1`). Three lowerings are provided which move
//! the `k²` replication between the lowering and the lifting phase; see
//! [`lowering::LoweringStrategy`].
//!
//! Around the core pipeline sit:
//!
//! * [`gemm`]: a blocked, column-partitioned parallel matrix multiply;
//! * [`cost`]: exact per-phase work counts and automatic strategy choice;
//! * [`batching`]: partitioned execution of a mini-batch with a bounded
//!   worker budget and memory accounting;
//! * [`scheduler`]: proportional device splitting and a makespan simulator;
//! * [`cli`]: the `convbench` harness that drives everything and emits
//!   CSV/JSON result records.
//!
//! [`tensor::direct_convolve`] is the naive triple-sum reference that every
//! other path is checked against.

pub mod batching;
pub mod cli;
pub mod cost;
pub mod error;
pub mod gemm;
pub mod layers;
pub mod lowering;
pub mod scheduler;
pub mod tensor;
pub mod timing;

pub use error::{Error, Result};
pub use gemm::{GemmConfig, Mat};
pub use lowering::{convolve_lowered, lift, lower, LoweredMatrices, LoweringStrategy};
pub use tensor::{DataBatch, KernelBank, LayerConfig, OutputBatch, Tensor3};
