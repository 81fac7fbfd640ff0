//! Prototype-based classification of proposal features.
//!
//! Each proposal is scored against every prototype; the resulting logit
//! vector is laid out as `[background, base classes ascending, clusters
//! ascending]`. The background logit is not produced by a prototype: it is
//! set to the maximum over all prototype logits when the detector's own base
//! head called the box background (and the background classifier is
//! enabled), and floored otherwise. The floor is `0.0` for the inverse
//! squared-distance metric, whose logits are strictly positive, and
//! `f64::MIN` for the signed metrics; [`normalize_probs`] treats `f64::MIN`
//! as "no mass" so a shift cannot resurrect it.

use serde::{Deserialize, Serialize};

use crate::datamodel::{BasePrediction, Detection, DetectionLabel, FeatureRecord, FeatureSource, PrototypeSet};
use crate::error::{Error, Result};
use crate::vecmath::{l2_normalize_f32, similarity, SimilarityMetric};

/// How a logit vector becomes a probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbNorm {
    /// Shift to non-negative if needed, then divide by the sum.
    #[default]
    L1,
    /// Max-subtracted exponential.
    Softmax,
}

/// What the classifier emits per proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmissionMode {
    /// One detection per non-background class per proposal, scored by that
    /// class's probability. Background competes only through the shared
    /// normalizer, as in a standard two-stage detector head.
    #[default]
    PerClass,
    /// One detection per proposal, labeled by the probability argmax
    /// (background included, ties to the lowest index).
    ArgMax,
}

/// Inference-time knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub metric: SimilarityMetric,
    pub prob_norm: ProbNorm,
    /// When false the background logit is always floored, so the base head's
    /// background calls are ignored.
    pub background_classifier: bool,
    pub emission: EmissionMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            metric: SimilarityMetric::default(),
            prob_norm: ProbNorm::L1,
            background_classifier: true,
            emission: EmissionMode::PerClass,
        }
    }
}

/// Logits for one proposal, in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    pub background: f64,
    pub base: Vec<f64>,
    pub clusters: Vec<f64>,
}

impl LogitVector {
    /// `[background, base.., clusters..]`, the order every downstream index
    /// refers to.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(1 + self.base.len() + self.clusters.len());
        out.push(self.background);
        out.extend_from_slice(&self.base);
        out.extend_from_slice(&self.clusters);
        out
    }
}

fn background_floor(metric: &SimilarityMetric) -> f64 {
    match metric {
        SimilarityMetric::InvSqEuclidean { .. } => 0.0,
        SimilarityMetric::Cosine | SimilarityMetric::DotProduct => f64::MIN,
    }
}

/// Scores one unit-normalized feature against every prototype and applies
/// the background rule.
pub fn compute_logits(
    feature_unit: &[f64],
    base_pred: Option<&BasePrediction>,
    protos: &PrototypeSet,
    config: &InferenceConfig,
) -> Result<LogitVector> {
    if feature_unit.len() != protos.dim {
        return Err(Error::dim_mismatch("classifier input", protos.dim, feature_unit.len()));
    }
    config.metric.validate()?;
    let base: Vec<f64> = protos
        .base
        .iter()
        .map(|p| similarity(feature_unit, &p.vector, config.metric))
        .collect::<Result<_>>()?;
    let clusters: Vec<f64> = protos
        .novel
        .iter()
        .map(|p| similarity(feature_unit, p, config.metric))
        .collect::<Result<_>>()?;
    let head_says_background = matches!(base_pred, Some(BasePrediction::Background));
    let background = if config.background_classifier && head_says_background {
        base.iter()
            .chain(clusters.iter())
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        background_floor(&config.metric)
    };
    Ok(LogitVector { background, base, clusters })
}

/// Normalizes a logit vector to probabilities, preserving the argmax.
///
/// Entries equal to `f64::MIN` are floored-out logits: they get probability
/// zero and are excluded from the shift, so one floored entry cannot drag
/// every other probability toward zero.
pub fn normalize_probs(logits: &[f64], mode: ProbNorm) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::empty_input("probability normalization"));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::non_finite("probability normalization input"));
    }
    match mode {
        ProbNorm::L1 => {
            let active: Vec<usize> = (0..logits.len()).filter(|&i| logits[i] != f64::MIN).collect();
            if active.is_empty() {
                // Every class was floored out: nothing to rank.
                return Err(Error::zero_vector("probability normalization saw only floored logits"));
            }
            let min = active.iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
            let shift = if min < 0.0 { -min } else { 0.0 };
            let sum: f64 = active.iter().map(|&i| logits[i] + shift).sum();
            let mut probs = vec![0.0; logits.len()];
            if sum == 0.0 {
                if shift == 0.0 {
                    return Err(Error::zero_vector("probability normalization saw an all-zero logit vector"));
                }
                // All active logits are equal and negative: flat posterior.
                let uniform = 1.0 / active.len() as f64;
                for &i in &active {
                    probs[i] = uniform;
                }
            } else {
                for &i in &active {
                    probs[i] = (logits[i] + shift) / sum;
                }
            }
            Ok(probs)
        }
        ProbNorm::Softmax => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            Ok(exps.into_iter().map(|e| e / sum).collect())
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Maps a flattened logit/probability index back to a label.
fn index_to_label(index: usize, protos: &PrototypeSet) -> DetectionLabel {
    let k = protos.k();
    if index == 0 {
        DetectionLabel::Background
    } else if index <= k {
        DetectionLabel::Base { class_id: protos.base[index - 1].class_id }
    } else {
        DetectionLabel::Cluster { index: index - 1 - k }
    }
}

fn validate_image_records(records: &[FeatureRecord], protos: &PrototypeSet) -> Result<()> {
    if records.is_empty() {
        return Err(Error::empty_input("classification needs at least one proposal"));
    }
    let image_id = records[0].image_id;
    for (index, record) in records.iter().enumerate() {
        record.validate(index)?;
        if record.source != FeatureSource::Rpn {
            return Err(Error::invalid_record(index, "classification runs on proposal records only"));
        }
        if record.image_id != image_id {
            return Err(Error::invalid_record(
                index,
                format!("image id {} differs from the batch's image id {image_id}", record.image_id),
            ));
        }
        if record.feature.len() != protos.dim {
            return Err(Error::dim_mismatch(format!("record {index}"), protos.dim, record.feature.len()));
        }
    }
    Ok(())
}

/// Classifies every proposal of one image to its single most probable label,
/// background included.
pub fn classify_image(
    records: &[FeatureRecord],
    protos: &PrototypeSet,
    config: &InferenceConfig,
) -> Result<Vec<Detection>> {
    validate_image_records(records, protos)?;
    let mut detections = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        let unit = l2_normalize_f32(&record.feature, &format!("feature of record {index}"))?;
        let logits = compute_logits(&unit, record.base_pred.as_ref(), protos, config)?;
        let probs = normalize_probs(&logits.flatten(), config.prob_norm)?;
        let winner = argmax(&probs);
        detections.push(Detection {
            image_id: record.image_id,
            bbox: record.bbox,
            label: index_to_label(winner, protos),
            score: probs[winner],
        });
    }
    Ok(detections)
}

/// Emits one detection per non-background class per proposal, as a detector
/// head does. The background column is dropped after normalization, so a
/// confident background call shows up as uniformly diluted class scores
/// rather than as a detection.
pub fn emit_class_detections(
    records: &[FeatureRecord],
    protos: &PrototypeSet,
    config: &InferenceConfig,
) -> Result<Vec<Detection>> {
    validate_image_records(records, protos)?;
    let per_record = protos.k() + protos.q();
    let mut detections = Vec::with_capacity(records.len() * per_record);
    for (index, record) in records.iter().enumerate() {
        let unit = l2_normalize_f32(&record.feature, &format!("feature of record {index}"))?;
        let logits = compute_logits(&unit, record.base_pred.as_ref(), protos, config)?;
        let probs = normalize_probs(&logits.flatten(), config.prob_norm)?;
        for (offset, &score) in probs.iter().enumerate().skip(1) {
            detections.push(Detection {
                image_id: record.image_id,
                bbox: record.bbox,
                label: index_to_label(offset, protos),
                score,
            });
        }
    }
    Ok(detections)
}

/// Runs the emission mode selected by `config`.
pub fn infer_image(
    records: &[FeatureRecord],
    protos: &PrototypeSet,
    config: &InferenceConfig,
) -> Result<Vec<Detection>> {
    match config.emission {
        EmissionMode::PerClass => emit_class_detections(records, protos, config),
        EmissionMode::ArgMax => classify_image(records, protos, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{BasePrototype, BoxGeometry, PrototypeMetadata};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn proto_set() -> PrototypeSet {
        PrototypeSet {
            dim: 2,
            base: vec![
                BasePrototype { class_id: 0, vector: vec![1.0, 0.0] },
                BasePrototype { class_id: 1, vector: vec![0.0, 1.0] },
            ],
            novel: vec![vec![0.6, 0.8]],
            metadata: PrototypeMetadata::default(),
        }
    }

    fn rpn_record(feature: Vec<f32>, base_pred: BasePrediction) -> FeatureRecord {
        FeatureRecord {
            image_id: 7,
            bbox: BoxGeometry::new(0.0, 0.0, 10.0, 10.0),
            source: FeatureSource::Rpn,
            base_pred: Some(base_pred),
            objectness: Some(0.9),
            gt_class: None,
            feature,
        }
    }

    #[test]
    fn background_logit_copies_the_max_when_head_says_background() {
        let protos = proto_set();
        let config = InferenceConfig::default();
        let logits =
            compute_logits(&[1.0, 0.0], Some(&BasePrediction::Background), &protos, &config).unwrap();
        let max = logits.base.iter().chain(&logits.clusters).copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(logits.background, max);
        assert_eq!(logits.background, logits.base[0]);
    }

    #[test]
    fn background_logit_is_floored_when_head_names_a_class() {
        let protos = proto_set();
        let config = InferenceConfig::default();
        let logits = compute_logits(
            &[1.0, 0.0],
            Some(&BasePrediction::BaseClass { class_id: 0 }),
            &protos,
            &config,
        )
        .unwrap();
        assert_eq!(logits.background, 0.0);
    }

    #[test]
    fn disabling_the_background_classifier_floors_unconditionally() {
        let protos = proto_set();
        let config = InferenceConfig { background_classifier: false, ..Default::default() };
        let logits =
            compute_logits(&[1.0, 0.0], Some(&BasePrediction::Background), &protos, &config).unwrap();
        assert_eq!(logits.background, 0.0);
    }

    #[test]
    fn signed_metrics_floor_to_f64_min() {
        let protos = proto_set();
        let config = InferenceConfig { metric: SimilarityMetric::Cosine, ..Default::default() };
        let logits = compute_logits(
            &[1.0, 0.0],
            Some(&BasePrediction::BaseClass { class_id: 1 }),
            &protos,
            &config,
        )
        .unwrap();
        assert_eq!(logits.background, f64::MIN);
        let probs = normalize_probs(&logits.flatten(), ProbNorm::L1).unwrap();
        assert_eq!(probs[0], 0.0);
    }

    #[test]
    fn l1_normalization_divides_by_the_sum() {
        let probs = normalize_probs(&[2.0, 1.0, 1.0], ProbNorm::L1).unwrap();
        assert_relative_eq!(probs[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(probs[1], 0.25, max_relative = 1e-12);
        assert_relative_eq!(probs[2], 0.25, max_relative = 1e-12);
    }

    #[test]
    fn l1_normalization_shifts_negative_vectors() {
        let probs = normalize_probs(&[-1.0, 0.0, 1.0], ProbNorm::L1).unwrap();
        assert_relative_eq!(probs[0], 0.0, max_relative = 1e-12);
        assert_relative_eq!(probs[1], 1.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(probs[2], 2.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn l1_normalization_skips_floored_entries() {
        let probs = normalize_probs(&[f64::MIN, 3.0, 1.0], ProbNorm::L1).unwrap();
        assert_eq!(probs[0], 0.0);
        assert_relative_eq!(probs[1], 0.75, max_relative = 1e-12);
        assert_relative_eq!(probs[2], 0.25, max_relative = 1e-12);
    }

    #[test]
    fn l1_normalization_degenerate_cases() {
        // All active entries equal and negative: flat posterior.
        let probs = normalize_probs(&[-2.0, -2.0], ProbNorm::L1).unwrap();
        assert_eq!(probs, vec![0.5, 0.5]);
        // All-zero vector carries no ranking signal.
        assert!(normalize_probs(&[0.0, 0.0], ProbNorm::L1).is_err());
        assert!(normalize_probs(&[f64::MIN, f64::MIN], ProbNorm::L1).is_err());
        assert!(normalize_probs(&[], ProbNorm::L1).is_err());
        assert!(normalize_probs(&[f64::NAN, 1.0], ProbNorm::L1).is_err());
    }

    #[test]
    fn softmax_handles_equal_large_and_floored_logits() {
        let probs = normalize_probs(&[0.0, 0.0], ProbNorm::Softmax).unwrap();
        assert_relative_eq!(probs[0], 0.5, max_relative = 1e-12);
        let probs = normalize_probs(&[1e9, 1e9 + 1.0], ProbNorm::Softmax).unwrap();
        assert!(probs.iter().all(|p| p.is_finite()));
        assert!(probs[1] > probs[0]);
        let probs = normalize_probs(&[f64::MIN, 2.0, 2.0], ProbNorm::Softmax).unwrap();
        assert_eq!(probs[0], 0.0);
        assert_relative_eq!(probs[1], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn argmax_ties_resolve_to_the_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
        assert_eq!(argmax(&[2.0, 2.0, 2.0]), 0);
    }

    #[test]
    fn classify_image_picks_background_on_ties_with_it() {
        // The head says background, so the background logit equals the best
        // class logit exactly; index 0 must win the tie.
        let protos = proto_set();
        let config = InferenceConfig::default();
        let dets =
            classify_image(&[rpn_record(vec![1.0, 0.0], BasePrediction::Background)], &protos, &config)
                .unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].label, DetectionLabel::Background);
    }

    #[test]
    fn classify_image_equidistant_prototypes_pick_the_lower_class() {
        let protos = PrototypeSet {
            dim: 2,
            base: vec![
                BasePrototype { class_id: 3, vector: vec![1.0, 0.0] },
                BasePrototype { class_id: 9, vector: vec![1.0, 0.0] },
            ],
            novel: vec![],
            metadata: PrototypeMetadata::default(),
        };
        let config = InferenceConfig::default();
        let dets = classify_image(
            &[rpn_record(vec![1.0, 0.0], BasePrediction::BaseClass { class_id: 3 })],
            &protos,
            &config,
        )
        .unwrap();
        assert_eq!(dets[0].label, DetectionLabel::Base { class_id: 3 });
    }

    #[test]
    fn per_class_emission_order_and_labels() {
        let protos = proto_set();
        let config = InferenceConfig::default();
        let records = vec![
            rpn_record(vec![1.0, 0.0], BasePrediction::BaseClass { class_id: 0 }),
            rpn_record(vec![0.0, 1.0], BasePrediction::Background),
        ];
        let dets = emit_class_detections(&records, &protos, &config).unwrap();
        assert_eq!(dets.len(), 6);
        let labels: Vec<&DetectionLabel> = dets.iter().map(|d| &d.label).collect();
        assert_eq!(
            labels,
            vec![
                &DetectionLabel::Base { class_id: 0 },
                &DetectionLabel::Base { class_id: 1 },
                &DetectionLabel::Cluster { index: 0 },
                &DetectionLabel::Base { class_id: 0 },
                &DetectionLabel::Base { class_id: 1 },
                &DetectionLabel::Cluster { index: 0 },
            ]
        );
        // First record: background floored to 0, so class scores sum to 1.
        let first: f64 = dets[..3].iter().map(|d| d.score).sum();
        assert_relative_eq!(first, 1.0, max_relative = 1e-12);
        // Second record: the background column absorbed real mass.
        let second: f64 = dets[3..].iter().map(|d| d.score).sum();
        assert!(second < 1.0 - 1e-6, "background mass should dilute class scores, sum = {second}");
    }

    #[test]
    fn batches_must_share_an_image_and_be_proposals() {
        let protos = proto_set();
        let config = InferenceConfig::default();
        let mut other = rpn_record(vec![1.0, 0.0], BasePrediction::Background);
        other.image_id = 8;
        let records = vec![rpn_record(vec![1.0, 0.0], BasePrediction::Background), other];
        assert!(classify_image(&records, &protos, &config).is_err());

        let mut gt = rpn_record(vec![1.0, 0.0], BasePrediction::Background);
        gt.source = FeatureSource::Gt;
        gt.gt_class = Some(0);
        assert!(classify_image(&[gt], &protos, &config).is_err());
        assert!(classify_image(&[], &protos, &config).is_err());
    }

    #[test]
    fn argmax_label_is_gamma_invariant() {
        let protos = proto_set();
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            // Small xorshift keeps this test free of RNG crate details.
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let feature = vec![next() as f32 * 2.0 - 1.0 + 1.5, next() as f32 * 2.0 - 1.0];
            let record = rpn_record(feature, BasePrediction::BaseClass { class_id: 0 });
            let mut labels = Vec::new();
            for gamma in [1u32, 2, 4, 8] {
                let config = InferenceConfig {
                    metric: SimilarityMetric::InvSqEuclidean { gamma },
                    ..Default::default()
                };
                let dets = classify_image(std::slice::from_ref(&record), &protos, &config).unwrap();
                labels.push(dets[0].label.clone());
            }
            assert!(labels.windows(2).all(|w| w[0] == w[1]), "gamma changed the argmax: {labels:?}");
        }
    }

    proptest! {
        #[test]
        fn l1_normalization_preserves_the_argmax(
            logits in proptest::collection::vec(-1e6f64..1e6, 1..12),
        ) {
            let probs = normalize_probs(&logits, ProbNorm::L1);
            prop_assume!(probs.is_ok());
            let probs = probs.unwrap();
            prop_assert_eq!(argmax(&probs), argmax(&logits));
            let sum: f64 = probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(probs.iter().all(|&p| (0.0..=1.0 + 1e-12).contains(&p)));
        }

        #[test]
        fn softmax_preserves_the_argmax(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
        ) {
            let probs = normalize_probs(&logits, ProbNorm::Softmax).unwrap();
            prop_assert_eq!(argmax(&probs), argmax(&logits));
            let sum: f64 = probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
