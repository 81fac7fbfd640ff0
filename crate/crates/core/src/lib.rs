//! Core library for novel-class discovery and detection over serialized
//! box-feature datasets.
//!
//! The pipeline, end to end:
//!
//! 1. [`prototypes`] builds per-class prototypes from labeled ground-truth
//!    features and discovers novel prototypes by clustering unlabeled
//!    proposal features ([`clustering`]).
//! 2. [`classifier`] scores proposal features against the prototype set and
//!    emits labeled detections.
//! 3. [`postprocess`] filters and deduplicates detections per image.
//! 4. [`assignment`] maps discovered clusters to held-out class ids, either
//!    by confusion-matrix matching ([`assignment::hungarian`]) or by text
//!    embeddings.
//! 5. [`evaluation`] scores the final detections with interpolated average
//!    precision.
//!
//! [`datamodel`] defines the shared types and the on-disk formats;
//! [`synthgen`] builds self-labeling synthetic worlds for end-to-end tests.

pub mod assignment;
pub mod classifier;
pub mod clustering;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod postprocess;
pub mod prototypes;
pub mod synthgen;
pub mod vecmath;

pub use datamodel::{
    BasePrediction, BasePrototype, BoxGeometry, ClassAgnosticReport, ClassApRow, ClassGroup, ClassId,
    ClassName, Detection, DetectionLabel, EvalReport, FeatureRecord, FeatureSource, FrequencyBand,
    ImageId, LabelMapping, MappingMethod, PrototypeMetadata, PrototypeSet, TextEmbedding,
};
pub use error::{Error, Result};
