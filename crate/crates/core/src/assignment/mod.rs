//! Cluster-to-class label assignment.
//!
//! Discovered clusters carry opaque indices; this module grounds them in
//! semantic class ids. The count-based route assigns every annotated novel
//! feature to its most similar cluster center, then solves the resulting
//! label/cluster confusion matrix exactly for the count-maximizing injective
//! mapping. The embedding route labels each proposal by its nearest text
//! embedding and gives every cluster the majority label of its kappa closest
//! proposals.

pub mod hungarian;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::datamodel::{
    ClassId, Detection, DetectionLabel, FeatureRecord, FeatureSource, LabelMapping, MappingMethod,
    PrototypeSet, TextEmbedding,
};
use crate::error::{Error, Result};
use crate::vecmath::{self, SimilarityMetric};

/// How many annotated features of each held-out class landed in each cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    /// Held-out class ids, ascending; one row per id.
    pub labels: Vec<ClassId>,
    /// `counts[row][cluster]`; sums to the number of features processed.
    pub counts: Vec<Vec<u64>>,
    pub q: usize,
}

/// Index of the most similar cluster center, ties to the lowest index.
fn nearest_cluster(feature: &[f64], protos: &PrototypeSet, metric: SimilarityMetric) -> Result<usize> {
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for (cluster, center) in protos.novel.iter().enumerate() {
        let sim = vecmath::similarity(feature, center, metric)?;
        if sim > best_sim {
            best_sim = sim;
            best = cluster;
        }
    }
    Ok(best)
}

/// Assigns every annotated feature to its most similar cluster center and
/// accumulates per-class counts. Rows are the distinct `gt_class` values seen
/// in the input, ascending; callers restrict the records to the classes they
/// want mapped.
pub fn build_confusion(
    gt_novel: &[FeatureRecord],
    protos: &PrototypeSet,
    metric: SimilarityMetric,
) -> Result<ConfusionCounts> {
    if gt_novel.is_empty() {
        return Err(Error::empty_input("no annotated features to build a confusion matrix from"));
    }
    if protos.q() == 0 {
        return Err(Error::empty_input("prototype set holds no clusters to map"));
    }
    let mut labels: Vec<ClassId> = Vec::new();
    for (index, record) in gt_novel.iter().enumerate() {
        record.validate(index)?;
        if record.source != FeatureSource::Gt {
            return Err(Error::invalid_record(index, "confusion counting requires ground-truth records"));
        }
        if record.feature.len() != protos.dim {
            return Err(Error::dim_mismatch(format!("record {index}"), protos.dim, record.feature.len()));
        }
        labels.push(record.gt_class.expect("validate: GT records carry gt_class"));
    }
    labels.sort_unstable();
    labels.dedup();
    let row_of: BTreeMap<ClassId, usize> =
        labels.iter().enumerate().map(|(row, &id)| (id, row)).collect();

    let votes: Vec<(usize, usize)> = gt_novel
        .par_iter()
        .enumerate()
        .map(|(index, record)| {
            let feature =
                vecmath::l2_normalize_f32(&record.feature, &format!("feature of record {index}"))?;
            let cluster = nearest_cluster(&feature, protos, metric)?;
            Ok((row_of[&record.gt_class.unwrap()], cluster))
        })
        .collect::<Result<_>>()?;

    let mut counts = vec![vec![0u64; protos.q()]; labels.len()];
    for (row, cluster) in votes {
        counts[row][cluster] += 1;
    }
    Ok(ConfusionCounts { labels, counts, q: protos.q() })
}

/// Finds the count-maximizing injective cluster-to-class mapping.
///
/// Raw counts are scaled by a constant larger than any achievable index sum
/// and biased by `-(row * q + column)`, so equal-count optima resolve to the
/// lexicographically smallest (class row, cluster) pairs. Pairs whose count
/// is zero are left out of the mapping: an agreement that never happened is
/// no evidence, and emitting it would label a cluster by matrix padding.
pub fn hungarian_assign(confusion: &ConfusionCounts) -> Result<LabelMapping> {
    let l = confusion.labels.len();
    let q = confusion.q;
    if l == 0 || q == 0 {
        return Ok(LabelMapping { method: MappingMethod::Hungarian, entries: BTreeMap::new() });
    }
    if confusion.counts.len() != l || confusion.counts.iter().any(|row| row.len() != q) {
        return Err(Error::invalid_config("confusion matrix shape disagrees with its labels"));
    }
    let n = l.max(q);
    let scale = (n as i128) * (l as i128) * (q as i128) + 1;
    let mut cost = vec![vec![0i128; n]; n];
    for (row, counts) in confusion.counts.iter().enumerate() {
        for (col, &count) in counts.iter().enumerate() {
            if count > 0 {
                let weight = count as i128 * scale - (row * q + col) as i128;
                cost[row][col] = -weight;
            }
        }
    }
    let (assignment, _) = hungarian::solve_min_cost(&cost);
    let mut entries = BTreeMap::new();
    for (row, &col) in assignment.iter().enumerate().take(l) {
        if col < q && confusion.counts[row][col] > 0 {
            entries.insert(col, confusion.labels[row]);
        }
    }
    let mapping = LabelMapping { method: MappingMethod::Hungarian, entries };
    mapping.validate()?;
    Ok(mapping)
}

/// Label of the cosine-nearest text embedding; ties go to the lowest class
/// id. Callers pass embeddings sorted by strictly increasing class id.
pub fn nearest_text_label(embedding: &[f64], texts: &[TextEmbedding]) -> Result<ClassId> {
    if texts.is_empty() {
        return Err(Error::empty_input("no text embeddings to label against"));
    }
    let query = vecmath::l2_normalize(embedding, "box embedding")?;
    let mut best: Option<(f64, ClassId)> = None;
    for text in texts {
        if text.embedding.len() != embedding.len() {
            return Err(Error::dim_mismatch(
                format!("text embedding for class {}", text.class_id),
                embedding.len(),
                text.embedding.len(),
            ));
        }
        let reference =
            vecmath::l2_normalize(&text.embedding, &format!("text embedding for class {}", text.class_id))?;
        let sim = vecmath::dot(&query, &reference);
        // Strict > keeps the first (lowest-id) class on exact ties.
        if best.map_or(true, |(best_sim, _)| sim > best_sim) {
            best = Some((sim, text.class_id));
        }
    }
    Ok(best.expect("texts is non-empty").1)
}

/// Per-box nearest text labels, in input order.
pub fn nearest_text_labels(boxes: &[Vec<f64>], texts: &[TextEmbedding]) -> Result<Vec<ClassId>> {
    if texts.windows(2).any(|w| w[0].class_id >= w[1].class_id) {
        return Err(Error::invalid_config("text embeddings must be sorted by strictly increasing class id"));
    }
    boxes.par_iter().map(|embedding| nearest_text_label(embedding, texts)).collect()
}

/// Labels each cluster with the majority vote of the `kappa` proposals
/// closest to its center, each proposal voting with its own nearest-text
/// label. Clusters that attract no proposals stay unmapped; several clusters
/// may share a label, so unlike the count-based route this is not injective.
pub fn embedding_assign(
    protos: &PrototypeSet,
    boxes: &[(Vec<f32>, ClassId)],
    kappa: usize,
) -> Result<LabelMapping> {
    if kappa == 0 {
        return Err(Error::invalid_config("kappa must be a positive number of proposals"));
    }
    let method = MappingMethod::Embedding { kappa };
    if protos.q() == 0 {
        return Ok(LabelMapping { method, entries: BTreeMap::new() });
    }

    // Each proposal joins its nearest cluster, ties to the lowest index.
    let assigned: Vec<(usize, f64)> = boxes
        .par_iter()
        .enumerate()
        .map(|(index, (feature, _))| {
            if feature.len() != protos.dim {
                return Err(Error::dim_mismatch(format!("box {index}"), protos.dim, feature.len()));
            }
            let feature = vecmath::l2_normalize_f32(feature, &format!("feature of box {index}"))?;
            let mut best = 0usize;
            let mut best_d2 = f64::INFINITY;
            for (cluster, center) in protos.novel.iter().enumerate() {
                let d2 = vecmath::squared_euclidean(&feature, center);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = cluster;
                }
            }
            Ok((best, best_d2))
        })
        .collect::<Result<_>>()?;

    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); protos.q()];
    for (index, &(cluster, d2)) in assigned.iter().enumerate() {
        members[cluster].push((d2, index));
    }

    let mut entries = BTreeMap::new();
    for (cluster, mut votes) in members.into_iter().enumerate() {
        if votes.is_empty() {
            continue;
        }
        votes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        votes.truncate(kappa);
        let mut tally: BTreeMap<ClassId, usize> = BTreeMap::new();
        for &(_, index) in &votes {
            *tally.entry(boxes[index].1).or_insert(0) += 1;
        }
        // Ascending iteration plus strict > resolves vote ties to the lowest id.
        let mut mode = None;
        let mut mode_count = 0usize;
        for (&label, &count) in &tally {
            if count > mode_count {
                mode = Some(label);
                mode_count = count;
            }
        }
        entries.insert(cluster, mode.expect("votes is non-empty"));
    }
    Ok(LabelMapping { method, entries })
}

/// Rewrites cluster labels through the mapping; clusters without an entry
/// become explicit unmapped-novel detections so downstream scoring can still
/// see them.
pub fn apply_mapping(detections: &[Detection], mapping: &LabelMapping) -> Vec<Detection> {
    detections
        .iter()
        .map(|det| {
            let label = match det.label {
                DetectionLabel::Cluster { index } => match mapping.entries.get(&index) {
                    Some(&class_id) => DetectionLabel::Mapped { class_id },
                    None => DetectionLabel::UnmappedNovel { index },
                },
                ref other => other.clone(),
            };
            Detection { label, ..det.clone() }
        })
        .collect()
}
