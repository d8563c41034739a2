//! Voxel-wise anatomical positional embeddings: synthetic phantoms, patch-pair sampling,
//! a small 3D UNet with its training loop, and the retrieval and few-shot localization
//! built on the embedding maps.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod localization;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod retrieval;
pub mod sampler;
pub mod seed;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use localization::Shot;
pub use model::{ApeModel, ModelConfig, SlidingWindowConfig};
pub use phantom::{PhantomSample, PhantomSpec};
pub use sampler::{Patch, PatchPair, SamplerConfig};
pub use train::{TrainConfig, TrainSetup, Variant};
pub use volume::{Box3, EmbeddingMap, Point3, Volume};
