//! Two-stage building damage segmentation with edge-aware input augmentation
//! and supervised domain adaptation.

pub mod adapt;
pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod pipeline;
pub mod raster;

pub use error::{Error, Result};

pub use adapt::AdaptationMode;
pub use augment::{AugMode, AugmentationConfig, Component};
pub use data::{DatasetManifest, DomainShiftSpec, SceneSpec, Split};
pub use eval::F1Report;
pub use harness::{AblationCell, AblationReport, ExperimentConfig, Matrix, MatrixPreset};
pub use model::{DomainTag, EnsembleSpec, ModelCheckpoint, ModelConfig, TrainHyper};
pub use pipeline::PipelineSpec;
pub use raster::{BinaryMask, DamageClass, DamageMask, ImagePair, RasterImage};
