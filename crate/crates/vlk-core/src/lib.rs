//! Non-neural core of a cerebral vessel labeling pipeline: volume grids and
//! their on-disk format, synthetic Circle-of-Willis phantoms, centerline to
//! voxel label generation, rigid test-time-augmentation with voting
//! uncertainty, segmentation metrics, the hybrid loss schedule, and the
//! downstream agreement statistics.
//!
//! Everything here is deterministic: randomness flows through a counter-based
//! generator keyed by explicit seeds, and parallel loops only ever write
//! disjoint outputs, so repeated runs are bit-identical across machines.

pub mod classes;
pub mod error;
pub mod labeling;
pub mod metrics;
pub mod phantom;
pub mod predictor;
pub mod preprocess;
pub mod rng;
pub mod stats;
pub mod transforms;
pub mod uncertainty;
pub mod volume;

pub use classes::{ClassMap, BACKGROUND, NON_ANNOTATED, NUM_CLASSES};
pub use error::{Error, Result};
pub use volume::{read_volume, write_volume, Dtype, Volume, VoxelData};
