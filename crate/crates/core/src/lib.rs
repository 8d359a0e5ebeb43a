//! Camera-radar bird's-eye-view fusion for 3D object detection in low
//! visibility, with a synthetic scene simulator and a detection metrics engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod hungarian;
pub mod metrics;
pub mod model;
pub mod params;
pub mod radar;
pub mod synth;
pub mod train;
pub mod types;
pub mod viz;

pub use error::{Error, Result};
pub use geometry::{BevGridSpec, CameraSpec, Pose, SensorRig};
pub use model::{Model, ModelConfig, Toggles};
pub use types::{Annotation, Attribute, Box3D, Detection, ObjectClass};
