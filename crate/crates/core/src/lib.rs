//! N:M semi-structured sparsification toolkit.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] dense weight / activation containers and statistics, plus the
//!   `DWT1` dense tensor file format.
//! * [`patterns`] N:M block masks and the colexicographic combinadic codec
//!   used for pattern metadata.
//! * [`importance`] magnitude and RIA scores, and activation-aware weight
//!   equalization applied to scores only.
//! * [`pipeline`] salient K:256 extraction, residual N:M pruning, variance
//!   correction and the end-to-end driver.
//! * [`reconstruct`] masked layer-wise least-squares reconstruction.
//! * [`codec`] the packed `NMS1` on-disk format and a reference sparse
//!   matrix-vector product.

pub mod codec;
pub mod error;
pub mod importance;
pub mod patterns;
pub mod pipeline;
pub mod reconstruct;
pub mod tensor;

pub use codec::SparseEncodedTensor;
pub use error::{Error, FormatError, Result};
pub use importance::{EqualizationScales, ScoreMatrix};
pub use patterns::{NMMask, PatternCodec, PatternShape};
pub use pipeline::{PipelineConfig, PipelineOutput, PrunedLayer, SalientStore, Scorer, StorageReport};
pub use reconstruct::{ReconstructionResult, ReconstructionSettings};
pub use tensor::{CalibrationSet, ChannelStats, DType, WeightMatrix};
