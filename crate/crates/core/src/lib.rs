//! Neural feature selection for multivariate time series.
//!
//! Each input stream gets its own temporal convolution bank; the banks'
//! outputs are batch-normalized, and the magnitude of each stream's BN scale
//! factors, trained under an L1 penalty, ranks the streams. The top-ranked
//! streams are kept and a compact model is retrained on them.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod heads;
pub mod nfs;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use data::{MtsDataset, SyntheticSpec, TaskKind, Targets};
pub use error::{Error, Result};
pub use heads::{compose, ComposedModel, HeadConfig, HeadKind};
pub use nfs::{select_top_k, stream_scores, CompactMode, FeatureMask, ImportanceScores, NfsConfig, NfsModule};
pub use pipeline::{PipelineConfig, SelectionReport};
pub use tensor::Tensor;
pub use training::{Metric, MetricKind, TrainConfig};
