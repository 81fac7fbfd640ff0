//! Per-image detection cleanup: score gating, degenerate-box removal,
//! per-label greedy non-maximum suppression, and a deterministic global
//! ordering with a final size cap.
//!
//! The stages run in a fixed order and every comparison is strict, so the
//! survivor set at a higher score threshold is exactly the survivor set at a
//! lower one with the low-scoring tail cut off; nothing can be resurrected
//! by raising the threshold.

use serde::{Deserialize, Serialize};

use crate::datamodel::{BoxGeometry, Detection, DetectionLabel};
use crate::error::{Error, Result};

/// Boxes with a side at or below this are treated as empty and dropped.
pub const EMPTY_BOX_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    /// Detections survive only with score strictly above this.
    pub score_threshold: f64,
    /// A candidate is suppressed when its overlap with an already kept
    /// same-label box strictly exceeds this.
    pub nms_iou: f64,
    /// Hard cap on detections per image, applied after the global sort.
    pub top_m: usize,
    /// Whether explicit background detections are removed up front. Leave on
    /// unless downstream consumers want to inspect background calls.
    pub drop_background: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.5, top_m: 100, drop_background: true }
    }
}

impl PostprocessConfig {
    /// Large-vocabulary preset: no score gate and a deeper per-image cap.
    pub fn lvis() -> Self {
        Self { score_threshold: 0.0, nms_iou: 0.5, top_m: 300, drop_background: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.score_threshold.is_finite() || self.score_threshold < 0.0 {
            return Err(Error::invalid_config(format!(
                "score_threshold must be finite and non-negative, got {}",
                self.score_threshold
            )));
        }
        if !self.nms_iou.is_finite() || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid_config(format!("nms_iou must lie in [0, 1], got {}", self.nms_iou)));
        }
        if self.top_m == 0 {
            return Err(Error::invalid_config("top_m must be at least 1"));
        }
        Ok(())
    }
}

/// Intersection over union of two boxes; degenerate unions count as zero.
pub fn iou(a: &BoxGeometry, b: &BoxGeometry) -> f64 {
    let (ax, ay, aw, ah) = (a.x as f64, a.y as f64, a.w as f64, a.h as f64);
    let (bx, by, bw, bh) = (b.x as f64, b.y as f64, b.w as f64, b.h as f64);
    let ix = (ax + aw).min(bx + bw) - ax.max(bx);
    let iy = (ay + ah).min(by + bh) - ay.max(by);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = aw * ah + bw * bh - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Cleans up one image's detections. Ties are broken by input position, so
/// the output is a pure function of the input order.
pub fn postprocess_image(detections: &[Detection], config: &PostprocessConfig) -> Result<Vec<Detection>> {
    config.validate()?;
    if detections.is_empty() {
        return Ok(Vec::new());
    }
    let image_id = detections[0].image_id;
    for (index, det) in detections.iter().enumerate() {
        det.validate(index)?;
        if det.image_id != image_id {
            return Err(Error::invalid_record(
                index,
                format!("image id {} differs from the batch's image id {image_id}", det.image_id),
            ));
        }
    }

    let candidates: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .filter(|(_, d)| !(config.drop_background && d.label == DetectionLabel::Background))
        .filter(|(_, d)| d.score > config.score_threshold)
        .filter(|(_, d)| d.bbox.w as f64 > EMPTY_BOX_EPS && d.bbox.h as f64 > EMPTY_BOX_EPS)
        .collect();

    let mut groups: std::collections::BTreeMap<&DetectionLabel, Vec<(usize, &Detection)>> =
        std::collections::BTreeMap::new();
    for (idx, det) in candidates {
        groups.entry(&det.label).or_default().push((idx, det));
    }

    let mut survivors: Vec<(usize, &Detection)> = Vec::new();
    for group in groups.values_mut() {
        group.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let mut kept: Vec<(usize, &Detection)> = Vec::new();
        for &(idx, det) in group.iter() {
            if kept.iter().all(|&(_, k)| iou(&det.bbox, &k.bbox) <= config.nms_iou) {
                kept.push((idx, det));
            }
        }
        survivors.extend(kept);
    }

    survivors.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then_with(|| a.1.label.cmp(&b.1.label))
            .then(a.0.cmp(&b.0))
    });
    survivors.truncate(config.top_m);
    Ok(survivors.into_iter().map(|(_, d)| d.clone()).collect())
}
