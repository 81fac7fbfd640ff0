//! Prototype construction.
//!
//! A base-class prototype is the arithmetic mean of the class's L2-normalized
//! ground-truth box features; the mean itself is deliberately left
//! un-normalized, so its norm is at most 1 and shrinks with within-class
//! spread. Novel prototypes are k-means centers fitted to the L2-normalized
//! proposal features of an unlabeled discovery set.

use std::collections::BTreeMap;

use crate::clustering::{kmeans, KMeansConfig, KMeansResult};
use crate::datamodel::{BasePrototype, FeatureRecord, FeatureSource, PrototypeMetadata, PrototypeSet};
use crate::error::{Error, Result};
use crate::vecmath::l2_normalize_f32;

/// Computes one prototype per class present in `records`, sorted by class id.
///
/// Every record must be a ground-truth box with a class label; a zero-norm
/// feature is a domain error naming the offending record.
pub fn compute_base_prototypes(records: &[FeatureRecord]) -> Result<Vec<BasePrototype>> {
    if records.is_empty() {
        return Err(Error::empty_input("prototype construction needs at least one record"));
    }
    let dim = records[0].feature.len();
    let mut sums: BTreeMap<u32, (Vec<f64>, u64)> = BTreeMap::new();
    for (index, record) in records.iter().enumerate() {
        record.validate(index)?;
        if record.source != FeatureSource::Gt {
            return Err(Error::invalid_record(index, "prototype construction requires ground-truth records"));
        }
        let class_id = record.gt_class.expect("validate: GT records carry gt_class");
        if record.feature.len() != dim {
            return Err(Error::dim_mismatch(format!("record {index}"), dim, record.feature.len()));
        }
        let unit = l2_normalize_f32(&record.feature, &format!("feature of record {index}"))?;
        let entry = sums.entry(class_id).or_insert_with(|| (vec![0.0; dim], 0));
        for (acc, v) in entry.0.iter_mut().zip(&unit) {
            *acc += v;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(class_id, (sum, count))| BasePrototype {
            class_id,
            vector: sum.into_iter().map(|v| v / count as f64).collect(),
        })
        .collect())
}

/// Clusters the L2-normalized features of an unlabeled proposal set; the
/// resulting centers are the novel prototypes.
pub fn discover_novel_prototypes(records: &[FeatureRecord], config: &KMeansConfig) -> Result<KMeansResult> {
    if records.is_empty() {
        return Err(Error::empty_input("novel-prototype discovery needs at least one record"));
    }
    let mut points = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        record.validate(index)?;
        if record.source != FeatureSource::Rpn {
            return Err(Error::invalid_record(index, "discovery runs on proposal records only"));
        }
        points.push(l2_normalize_f32(&record.feature, &format!("feature of record {index}"))?);
    }
    kmeans(&points, config)
}

/// Joins base and novel prototypes into one validated set.
pub fn assemble(
    base: Vec<BasePrototype>,
    novel: Vec<Vec<f64>>,
    metadata: PrototypeMetadata,
) -> Result<PrototypeSet> {
    let dim = base
        .first()
        .map(|p| p.vector.len())
        .or_else(|| novel.first().map(Vec::len))
        .ok_or_else(|| Error::empty_input("prototype set holds no prototypes"))?;
    let mut sorted = base;
    sorted.sort_by_key(|p| p.class_id);
    for pair in sorted.windows(2) {
        if pair[0].class_id == pair[1].class_id {
            return Err(Error::invalid_config(format!("duplicate base class id {}", pair[0].class_id)));
        }
    }
    let set = PrototypeSet { dim, base: sorted, novel, metadata };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::BoxGeometry;
    use approx::assert_relative_eq;

    fn gt_record(class_id: u32, feature: Vec<f32>) -> FeatureRecord {
        FeatureRecord {
            image_id: 0,
            bbox: BoxGeometry::new(0.0, 0.0, 10.0, 10.0),
            source: FeatureSource::Gt,
            base_pred: None,
            objectness: None,
            gt_class: Some(class_id),
            feature,
        }
    }

    #[test]
    fn single_record_prototype_is_its_normalized_feature() {
        let protos = compute_base_prototypes(&[gt_record(2, vec![3.0, 4.0])]).unwrap();
        assert_eq!(protos.len(), 1);
        assert_eq!(protos[0].class_id, 2);
        assert_relative_eq!(protos[0].vector[0], 0.6, max_relative = 1e-12);
        assert_relative_eq!(protos[0].vector[1], 0.8, max_relative = 1e-12);
    }

    #[test]
    fn mean_is_not_renormalized() {
        // Two orthogonal unit features: mean has norm 1/sqrt(2), not 1.
        let protos =
            compute_base_prototypes(&[gt_record(0, vec![1.0, 0.0]), gt_record(0, vec![0.0, 1.0])]).unwrap();
        let v = &protos[0].vector;
        assert_relative_eq!(v[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(v[1], 0.5, max_relative = 1e-12);
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!(norm < 1.0 - 1e-6, "mean of distinct unit vectors must shrink, norm = {norm}");
    }

    #[test]
    fn classes_are_sorted_and_distinct() {
        let protos = compute_base_prototypes(&[
            gt_record(7, vec![1.0, 0.0]),
            gt_record(1, vec![0.0, 1.0]),
            gt_record(7, vec![1.0, 0.0]),
        ])
        .unwrap();
        let ids: Vec<u32> = protos.iter().map(|p| p.class_id).collect();
        assert_eq!(ids, vec![1, 7]);
    }

    #[test]
    fn zero_feature_error_names_the_record() {
        let err = compute_base_prototypes(&[gt_record(0, vec![1.0, 1.0]), gt_record(0, vec![0.0, 0.0])])
            .unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
    }

    #[test]
    fn proposal_records_are_rejected() {
        let mut record = gt_record(0, vec![1.0, 0.0]);
        record.source = FeatureSource::Rpn;
        record.gt_class = None;
        assert!(compute_base_prototypes(&[record]).is_err());
    }

    #[test]
    fn discovery_rejects_ground_truth_records() {
        let record = gt_record(0, vec![1.0, 0.0]);
        let config = KMeansConfig { q: 1, max_iter: 5, retries: 1, ..Default::default() };
        assert!(discover_novel_prototypes(&[record], &config).is_err());
    }

    #[test]
    fn assemble_validates_and_sorts() {
        let base = vec![
            BasePrototype { class_id: 5, vector: vec![0.0, 1.0] },
            BasePrototype { class_id: 1, vector: vec![1.0, 0.0] },
        ];
        let set = assemble(base, vec![vec![0.5, 0.5]], PrototypeMetadata::default()).unwrap();
        assert_eq!(set.dim, 2);
        assert_eq!(set.base[0].class_id, 1);
        assert_eq!(set.base[1].class_id, 5);
        assert_eq!(set.q(), 1);

        let dup = vec![
            BasePrototype { class_id: 1, vector: vec![1.0, 0.0] },
            BasePrototype { class_id: 1, vector: vec![0.0, 1.0] },
        ];
        assert!(assemble(dup, vec![], PrototypeMetadata::default()).is_err());
        assert!(assemble(vec![], vec![], PrototypeMetadata::default()).is_err());
        let ragged = vec![BasePrototype { class_id: 0, vector: vec![1.0, 0.0] }];
        assert!(assemble(ragged, vec![vec![1.0]], PrototypeMetadata::default()).is_err());
    }
}
