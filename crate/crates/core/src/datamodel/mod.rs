//! Shared domain types and their on-disk formats.
//!
//! Feature and embedding datasets are stored in a binary container (see
//! [`binary`]); prototypes, detections, label mappings, evaluation reports and
//! class-name tables are stored as line-delimited JSON (see [`jsonl`]).
//! Semantic class ids are dense integers; names live in a sidecar table and
//! appear only in rendered reports.

pub mod binary;
pub mod jsonl;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::KMeansConfig;
use crate::error::{Error, Result};

pub type ImageId = u64;
pub type ClassId = u32;

/// Axis-aligned box in pixels, stored as (top-left x, top-left y, width, height).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BoxGeometry {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        BoxGeometry { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        f64::from(self.w) * f64::from(self.h)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Geometry is valid when all fields are finite and both sides are positive.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.is_finite() {
            return Err("non-finite box coordinates".to_string());
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!("non-positive box size w={} h={}", self.w, self.h));
        }
        Ok(())
    }
}

/// Where a box feature came from: an annotated ground-truth box or a region
/// proposal produced by the detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Gt,
    Rpn,
}

/// Output of the frozen base classifier head for a proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasePrediction {
    Background,
    BaseClass { class_id: ClassId },
}

/// One box feature row of a dataset file. Optional fields model data that a
/// given extraction stage may not produce; they are absent, not sentinel-valued.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub image_id: ImageId,
    pub bbox: BoxGeometry,
    pub source: FeatureSource,
    pub base_pred: Option<BasePrediction>,
    pub objectness: Option<f32>,
    pub gt_class: Option<ClassId>,
    pub feature: Vec<f32>,
}

impl FeatureRecord {
    /// Structural validation used by both readers and writers. `index` is the
    /// record's position in its dataset, for error reporting.
    pub fn validate(&self, index: usize) -> Result<()> {
        if let Err(detail) = self.bbox.validate() {
            return Err(Error::invalid_record(index, detail));
        }
        if self.feature.is_empty() {
            return Err(Error::invalid_record(index, "empty feature vector"));
        }
        if self.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("feature vector of record {index}")));
        }
        if let Some(obj) = self.objectness {
            if !obj.is_finite() || !(0.0..=1.0).contains(&obj) {
                return Err(Error::invalid_record(index, format!("objectness {obj} outside [0, 1]")));
            }
        }
        if self.source == FeatureSource::Gt && self.gt_class.is_none() {
            return Err(Error::invalid_record(index, "ground-truth record without gt_class"));
        }
        Ok(())
    }

    /// Feature widened to the working precision used by all numeric kernels.
    pub fn feature_f64(&self) -> Vec<f64> {
        self.feature.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Label carried by a detection as it moves through the pipeline.
///
/// `Base` and `Cluster` are produced at inference time, `Mapped` and
/// `UnmappedNovel` after cluster-to-class mapping. `Background` only occurs
/// between classification and postprocessing; postprocessed outputs never
/// contain it when background dropping is enabled.
///
/// The derived order (variant order, then payload) gives the deterministic
/// label ordering used for grouping and tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectionLabel {
    Background,
    Base { class_id: ClassId },
    Cluster { index: usize },
    Mapped { class_id: ClassId },
    UnmappedNovel { index: usize },
}

/// A scored, labeled box for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    #[serde(rename = "box")]
    pub bbox: BoxGeometry,
    pub label: DetectionLabel,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self, index: usize) -> Result<()> {
        if let Err(detail) = self.bbox.validate() {
            return Err(Error::invalid_record(index, detail));
        }
        if !self.score.is_finite() {
            return Err(Error::non_finite(format!("score of detection {index}")));
        }
        Ok(())
    }
}

/// Prototype for one base class: the mean of its L2-normalized ground-truth
/// features. The mean itself is not re-normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasePrototype {
    pub class_id: ClassId,
    pub vector: Vec<f64>,
}

/// Provenance recorded alongside a prototype set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMetadata {
    pub seed: Option<u64>,
    pub clustering: Option<KMeansConfig>,
}

/// The full classifier geometry: K base prototypes (sorted by class id) plus
/// Q discovered novel prototypes (indexed by cluster id).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub dim: usize,
    pub base: Vec<BasePrototype>,
    pub novel: Vec<Vec<f64>>,
    pub metadata: PrototypeMetadata,
}

impl PrototypeSet {
    pub fn k(&self) -> usize {
        self.base.len()
    }

    pub fn q(&self) -> usize {
        self.novel.len()
    }

    pub fn base_class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.base.iter().map(|p| p.class_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid_config("prototype dimension must be positive"));
        }
        if self.k() + self.q() == 0 {
            return Err(Error::empty_input("prototype set holds no prototypes"));
        }
        for (i, proto) in self.base.iter().enumerate() {
            if proto.vector.len() != self.dim {
                return Err(Error::dim_mismatch(
                    format!("base prototype for class {}", proto.class_id),
                    self.dim,
                    proto.vector.len(),
                ));
            }
            if proto.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("base prototype for class {}", proto.class_id)));
            }
            if i > 0 && self.base[i - 1].class_id >= proto.class_id {
                return Err(Error::invalid_config(format!(
                    "base class ids must be strictly increasing, saw {} then {}",
                    self.base[i - 1].class_id,
                    proto.class_id
                )));
            }
        }
        for (j, vector) in self.novel.iter().enumerate() {
            if vector.len() != self.dim {
                return Err(Error::dim_mismatch(format!("novel prototype {j}"), self.dim, vector.len()));
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("novel prototype {j}")));
            }
        }
        Ok(())
    }
}

/// How a cluster-to-class mapping was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MappingMethod {
    Hungarian,
    /// Majority vote over each cluster's `kappa` closest proposals.
    Embedding { kappa: usize },
}

/// Partial map from cluster index to semantic class id. Clusters that earned
/// no assignment are simply absent. Hungarian mappings are injective;
/// embedding mappings may send several clusters to one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub method: MappingMethod,
    pub entries: BTreeMap<usize, ClassId>,
}

impl LabelMapping {
    pub fn validate(&self) -> Result<()> {
        if self.method == MappingMethod::Hungarian {
            let mut seen = std::collections::BTreeSet::new();
            for (&cluster, &class_id) in &self.entries {
                if !seen.insert(class_id) {
                    return Err(Error::invalid_config(format!(
                        "hungarian mapping assigns class {class_id} to more than one cluster (cluster {cluster})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Base/novel membership of a semantic class in a report row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassGroup {
    Base,
    Novel,
}

/// Image-frequency band of a class in the evaluation ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyBand {
    Frequent,
    Common,
    Rare,
}

/// Per-class row of an evaluation report. `ap` is averaged over the report's
/// IoU thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassApRow {
    pub class_id: ClassId,
    pub group: ClassGroup,
    pub band: FrequencyBand,
    pub ap: f64,
    pub instances: u64,
    pub image_frequency: u64,
}

/// Class-agnostic box quality metrics. Each is a pooled single-class AP with a
/// label predicate instead of class equality; a metric whose ground-truth side
/// is empty reports 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAgnosticReport {
    pub any_label: f64,
    pub novel_predicted_novel: f64,
    pub base_predicted_novel: f64,
    pub novel_predicted_base: f64,
}

/// Aggregate evaluation output. Split means are unweighted over classes with
/// at least one ground-truth instance; an empty split reports `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub map_base: Option<f64>,
    pub map_novel: Option<f64>,
    pub map_all: Option<f64>,
    pub map_frequent: Option<f64>,
    pub map_common: Option<f64>,
    pub map_rare: Option<f64>,
    pub per_class: Vec<ClassApRow>,
    pub class_agnostic: Option<ClassAgnosticReport>,
}

/// One row of the sidecar class-name table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassName {
    pub class_id: ClassId,
    pub name: String,
}

/// One labeled text embedding used by embedding-based cluster mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub class_id: ClassId,
    pub embedding: Vec<f64>,
}
