//! Bag-level classifier built on Nystrom-approximated self-attention with
//! feature-aware (K-means) landmarks, together with the numerics, training
//! machinery and benchmark harness needed to exercise it end to end on
//! precomputed-embedding bags and synthetic data.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod clustering;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod training;

pub use attention::{AttentionMode, Pinv};
pub use data::{Dataset, FeatureBag, Split, SynthSpec};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use numerics::Matrix;
pub use training::{MetricsReport, TrainOptions};
