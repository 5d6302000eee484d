//! Sparsity-inducing proximal AdamW and block-sparse inference kernels.
//!
//! * [`prox`]: elementwise and block shrinkage, reweighting, penalties.
//! * [`optimizer`]: the proximal AdamW state machine.
//! * [`toy`]: lasso and a small tanh network with analytic gradients.
//! * [`bsr`]: Block Sparse Row storage and SpMM/SpMV kernels.
//! * [`sched`]: task buffer with structure-keyed plan reuse.
//! * [`container`]: the `PSBR` binary tensor container.
//! * [`bench`]: block-shape sweep harness and timing statistics.

pub mod bench;
pub mod block;
pub mod bsr;
pub mod container;
pub mod error;
pub mod optimizer;
pub mod prox;
pub mod sched;
pub mod tensor;
pub mod toy;

pub use block::{BlockGrid, BlockShape};
pub use bsr::{BsrMatrix, DenseMatrix, KernelConfig, KernelPath};
pub use error::{Error, Result};
pub use optimizer::{OptimizerConfig, OptimizerState, Schedule, SparseOptimizer};
pub use prox::{GammaState, ProxConfig, ProxLambda, ThresholdConvention};
pub use tensor::WeightTensor;
pub use bench::{Mode, SweepConfig, SweepReport};
pub use container::{Checkpoint, Container, Section};
pub use sched::{ExecutionPlan, HardwareProfile, OpKind, Structure, TaskBuffer, TaskDescriptor};
