//! Detection scoring with 101-point interpolated average precision.
//!
//! Detections are pooled per class (base and mapped labels share a pool via
//! their class id), ranked by score with input position breaking ties, and
//! greedily matched to the best-overlapping unclaimed ground-truth box of
//! the same image. Classes without ground truth contribute nothing: they
//! are excluded from every mean rather than scored zero.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    BoxGeometry, ClassAgnosticReport, ClassApRow, ClassGroup, ClassId, Detection, DetectionLabel,
    EvalReport, FeatureRecord, FeatureSource, FrequencyBand, ImageId,
};
use crate::error::{Error, Result};
use crate::postprocess::iou;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Matching thresholds; the per-class score is the mean over these.
    pub iou_thresholds: Vec<f64>,
    /// Class ids scored as the base group; everything else is novel.
    pub base_classes: Vec<ClassId>,
    /// Also compute the pooled, label-ignoring report.
    pub class_agnostic: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { iou_thresholds: vec![0.5], base_classes: Vec::new(), class_agnostic: true }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::invalid_config("at least one IoU threshold is required"));
        }
        for &t in &self.iou_thresholds {
            if !t.is_finite() || !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid_config(format!("IoU threshold {t} outside [0, 1]")));
            }
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid_config("IoU thresholds must be strictly increasing"));
        }
        Ok(())
    }
}

/// Picks the frequency band a class is reported under. Base classes are by
/// construction well represented, so they band as frequent regardless of
/// this split's counts.
pub fn band_for(group: ClassGroup, image_frequency: u64) -> FrequencyBand {
    match group {
        ClassGroup::Base => FrequencyBand::Frequent,
        ClassGroup::Novel => {
            if image_frequency >= 100 {
                FrequencyBand::Frequent
            } else if image_frequency <= 10 {
                FrequencyBand::Rare
            } else {
                FrequencyBand::Common
            }
        }
    }
}

/// 101-point interpolated average precision from ranked hit flags.
///
/// `None` when there is no ground truth to recall. Trailing false positives
/// beyond the last hit never lower the score, because interpolation takes
/// the running maximum precision from the right.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    if tp_flags.is_empty() {
        return Some(0.0);
    }
    let mut tps = 0u64;
    let mut points = Vec::with_capacity(tp_flags.len());
    for (rank, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tps += 1;
        }
        points.push((tps as f64 / num_gt as f64, tps as f64 / (rank as f64 + 1.0)));
    }
    // Right-to-left precision envelope, then one monotone sweep over the
    // recall grid.
    for i in (0..points.len() - 1).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut idx = 0;
    let mut total = 0.0;
    for level in 0..=100u32 {
        let r = level as f64 / 100.0;
        while idx < points.len() && points[idx].0 < r {
            idx += 1;
        }
        if idx == points.len() {
            break;
        }
        total += points[idx].1;
    }
    Some(total / 101.0)
}

/// Ground truth grouped for matching: per image, boxes in stream order.
struct GtPool {
    by_image: BTreeMap<ImageId, Vec<BoxGeometry>>,
    total: usize,
}

impl GtPool {
    fn new() -> Self {
        Self { by_image: BTreeMap::new(), total: 0 }
    }

    fn push(&mut self, image_id: ImageId, bbox: BoxGeometry) {
        self.by_image.entry(image_id).or_default().push(bbox);
        self.total += 1;
    }
}

/// Greedy matching at one threshold; returns hit flags in `dets` order.
/// Each ground-truth box is claimed at most once; a detection takes the
/// unclaimed box it overlaps most, earliest box on exact ties.
fn match_at_threshold(dets: &[&Detection], pool: &GtPool, threshold: f64) -> Vec<bool> {
    let mut claimed: BTreeMap<ImageId, Vec<bool>> = pool
        .by_image
        .iter()
        .map(|(&image, boxes)| (image, vec![false; boxes.len()]))
        .collect();
    let mut flags = Vec::with_capacity(dets.len());
    for det in dets {
        let mut hit = false;
        if let Some(boxes) = pool.by_image.get(&det.image_id) {
            let taken = claimed.get_mut(&det.image_id).expect("claimed mirrors pool");
            let mut best: Option<(f64, usize)> = None;
            for (gt_index, gt_box) in boxes.iter().enumerate() {
                if taken[gt_index] {
                    continue;
                }
                let overlap = iou(&det.bbox, gt_box);
                if overlap < threshold {
                    continue;
                }
                if best.map_or(true, |(best_overlap, _)| overlap > best_overlap) {
                    best = Some((overlap, gt_index));
                }
            }
            if let Some((_, gt_index)) = best {
                taken[gt_index] = true;
                hit = true;
            }
        }
        flags.push(hit);
    }
    flags
}

/// Sorts references by score descending, then input position ascending.
fn rank<'a>(dets: &mut Vec<(usize, &'a Detection)>) -> Vec<&'a Detection> {
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    dets.iter().map(|&(_, d)| d).collect()
}

/// AP over a detection pool and ground-truth pool, averaged across
/// thresholds; zero ground truth yields 0 here because the pooled report
/// always prints all four quadrants.
fn pooled_ap(mut dets: Vec<(usize, &Detection)>, pool: &GtPool, thresholds: &[f64]) -> f64 {
    if pool.total == 0 {
        return 0.0;
    }
    let ranked = rank(&mut dets);
    let mut total = 0.0;
    for &t in thresholds {
        let flags = match_at_threshold(&ranked, pool, t);
        total += average_precision(&flags, pool.total).expect("pool.total > 0");
    }
    total / thresholds.len() as f64
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v;
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

/// Class id a detection is scored under, if any. Cluster and unmapped-novel
/// labels carry no class id and are ignored by per-class scoring.
fn detection_class(label: &DetectionLabel) -> Option<ClassId> {
    match label {
        DetectionLabel::Base { class_id } | DetectionLabel::Mapped { class_id } => Some(*class_id),
        DetectionLabel::Background | DetectionLabel::Cluster { .. } | DetectionLabel::UnmappedNovel { .. } => {
            None
        }
    }
}

/// Whether a detection claims a novel object, mapped or not.
fn predicts_novel(label: &DetectionLabel, base_classes: &BTreeSet<ClassId>) -> bool {
    match label {
        DetectionLabel::Cluster { .. } | DetectionLabel::UnmappedNovel { .. } => true,
        DetectionLabel::Mapped { class_id } => !base_classes.contains(class_id),
        DetectionLabel::Base { class_id } => !base_classes.contains(class_id),
        DetectionLabel::Background => false,
    }
}

/// Scores detections against ground truth.
pub fn evaluate(
    detections: &[Detection],
    gt_records: &[FeatureRecord],
    options: &EvalOptions,
) -> Result<EvalReport> {
    options.validate()?;
    let base_set: BTreeSet<ClassId> = options.base_classes.iter().copied().collect();

    let mut class_pools: BTreeMap<ClassId, GtPool> = BTreeMap::new();
    let mut class_images: BTreeMap<ClassId, BTreeSet<ImageId>> = BTreeMap::new();
    let mut all_pool = GtPool::new();
    let mut base_pool = GtPool::new();
    let mut novel_pool = GtPool::new();
    for (index, record) in gt_records.iter().enumerate() {
        record.validate(index)?;
        if record.source != FeatureSource::Gt {
            return Err(Error::invalid_record(index, "evaluation requires ground-truth records"));
        }
        let class = record.gt_class.expect("validate: GT records carry gt_class");
        class_pools.entry(class).or_insert_with(GtPool::new).push(record.image_id, record.bbox);
        class_images.entry(class).or_default().insert(record.image_id);
        all_pool.push(record.image_id, record.bbox);
        if base_set.contains(&class) {
            base_pool.push(record.image_id, record.bbox);
        } else {
            novel_pool.push(record.image_id, record.bbox);
        }
    }

    let mut class_dets: BTreeMap<ClassId, Vec<(usize, &Detection)>> = BTreeMap::new();
    let mut any_dets: Vec<(usize, &Detection)> = Vec::new();
    let mut novel_dets: Vec<(usize, &Detection)> = Vec::new();
    let mut base_dets: Vec<(usize, &Detection)> = Vec::new();
    for (index, det) in detections.iter().enumerate() {
        det.validate(index)?;
        if let Some(class) = detection_class(&det.label) {
            class_dets.entry(class).or_default().push((index, det));
        }
        if det.label == DetectionLabel::Background {
            continue;
        }
        any_dets.push((index, det));
        if predicts_novel(&det.label, &base_set) {
            novel_dets.push((index, det));
        } else {
            base_dets.push((index, det));
        }
    }

    let mut per_class = Vec::with_capacity(class_pools.len());
    for (&class_id, pool) in &class_pools {
        let mut dets = class_dets.remove(&class_id).unwrap_or_default();
        let ranked = rank(&mut dets);
        let mut total = 0.0;
        for &t in &options.iou_thresholds {
            let flags = match_at_threshold(&ranked, pool, t);
            total += average_precision(&flags, pool.total).expect("every row has ground truth");
        }
        let group = if base_set.contains(&class_id) { ClassGroup::Base } else { ClassGroup::Novel };
        let image_frequency = class_images[&class_id].len() as u64;
        per_class.push(ClassApRow {
            class_id,
            group,
            band: band_for(group, image_frequency),
            ap: total / options.iou_thresholds.len() as f64,
            instances: pool.total as u64,
            image_frequency,
        });
    }

    let class_agnostic = if options.class_agnostic {
        Some(ClassAgnosticReport {
            any_label: pooled_ap(any_dets, &all_pool, &options.iou_thresholds),
            novel_predicted_novel: pooled_ap(novel_dets.clone(), &novel_pool, &options.iou_thresholds),
            base_predicted_novel: pooled_ap(base_dets, &novel_pool, &options.iou_thresholds),
            novel_predicted_base: pooled_ap(novel_dets, &base_pool, &options.iou_thresholds),
        })
    } else {
        None
    };

    let rows = |pred: &dyn Fn(&ClassApRow) -> bool| {
        per_class.iter().filter(|row| pred(row)).map(|row| row.ap).collect::<Vec<_>>()
    };
    Ok(EvalReport {
        iou_thresholds: options.iou_thresholds.clone(),
        map_base: mean(rows(&|r| r.group == ClassGroup::Base)),
        map_novel: mean(rows(&|r| r.group == ClassGroup::Novel)),
        map_all: mean(per_class.iter().map(|r| r.ap)),
        map_frequent: mean(rows(&|r| r.band == FrequencyBand::Frequent)),
        map_common: mean(rows(&|r| r.band == FrequencyBand::Common)),
        map_rare: mean(rows(&|r| r.band == FrequencyBand::Rare)),
        per_class,
        class_agnostic,
    })
}

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

/// Fixed-width text rendering of a report, stable across runs.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let thresholds: Vec<String> = report.iou_thresholds.iter().map(|t| format!("{t:.2}")).collect();
    out.push_str(&format!("iou thresholds: {}\n\n", thresholds.join(", ")));
    out.push_str(&format!(
        "{:>8}  {:<5}  {:<8}  {:>8}  {:>9}  {:>7}\n",
        "class", "group", "band", "ap", "instances", "images"
    ));
    for row in &report.per_class {
        let group = match row.group {
            ClassGroup::Base => "base",
            ClassGroup::Novel => "novel",
        };
        let band = match row.band {
            FrequencyBand::Frequent => "frequent",
            FrequencyBand::Common => "common",
            FrequencyBand::Rare => "rare",
        };
        out.push_str(&format!(
            "{:>8}  {:<5}  {:<8}  {:>8.4}  {:>9}  {:>7}\n",
            row.class_id, group, band, row.ap, row.instances, row.image_frequency
        ));
    }
    out.push('\n');
    out.push_str(&format!(
        "map_base {}  map_novel {}  map_all {}\n",
        fmt_opt(report.map_base),
        fmt_opt(report.map_novel),
        fmt_opt(report.map_all)
    ));
    out.push_str(&format!(
        "map_frequent {}  map_common {}  map_rare {}\n",
        fmt_opt(report.map_frequent),
        fmt_opt(report.map_common),
        fmt_opt(report.map_rare)
    ));
    if let Some(ca) = &report.class_agnostic {
        out.push_str(&format!(
            "class-agnostic: any {:.4}  novel-on-novel {:.4}  base-on-novel {:.4}  novel-on-base {:.4}\n",
            ca.any_label, ca.novel_predicted_novel, ca.base_predicted_novel, ca.novel_predicted_base
        ));
    }
    out
}
