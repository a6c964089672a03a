//! Multi-headed networks trained with ensembling and co-distillation losses,
//! on a small eager reverse-mode autodiff engine.
//!
//! ```
//! use codistill::verify_equivalence;
//! let gap = verify_equivalence(2, 100, 7).unwrap();
//! assert!(gap < 1e-9);
//! ```

// Comparisons like `!(x >= 0.0)` are written that way on purpose: they
// reject NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{GradientMap, Graph, NodeId, Op};
pub use data::{Dataset, Features, SplitSpec, Task};
pub use ensemble::{
    fork_network, total_loss, verify_equivalence, Batch, BranchInit, Discrepancy, HeadKind, HeadSpec, LayerSpec,
    LossKind, LossOptions, LossStructure, MultiHeadNet, NetworkSpec, PredictionBundle, PredictionKind, Section,
    SingleNetwork,
};
pub use error::{Error, Result};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use layers::{Activation, Mode};
pub use metrics::{HeadId, HeadMetrics, MetricReport, RunAggregate};
pub use tensor::Tensor;
pub use training::{EpochRecord, OptimizerKind, OptimizerState, Schedule, Session, Split, TrainConfig};
