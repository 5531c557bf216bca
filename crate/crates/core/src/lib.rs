//! Deformable R-FCN building blocks, training loop and evaluation for
//! screening-mammography style detection on synthetic phantoms.

pub mod backbone;
pub mod config;
pub mod data_io;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod ops;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use detection::{BBox, Detection, FindingClass};
pub use error::{Error, Result};
pub use inference::{DihedralTransform, Exam, ImageId, Laterality, ScoreTable, View};
pub use model::{ModelConfig, Network};
pub use params::{ModelParams, ParamKind};
pub use tensor::{Point2, Tensor};
