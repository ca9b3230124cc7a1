//! Face synthesis from label masks: component-wise local embeddings placed on a
//! target label mask, decoded and fused with a background.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod io;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod schema;
pub mod toy;
pub mod training;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use dataset::{Dataset, Manifest};
pub use error::{Error, Result};
pub use image::{Image, LabelMask, OneHotMask, RegionMap};
pub use nn::NetSpec;
pub use pipeline::{EditRequest, Generator, Sample, SampleStore};
pub use schema::{ComponentId, LabelSchema};
pub use training::StepMode;
