//! Self-labeling synthetic worlds for end-to-end tests.
//!
//! A world is a set of unit mean directions with a guaranteed pairwise
//! angle, one per class; every object feature is its class mean plus
//! isotropic Gaussian noise. Clutter boxes are confusers around a random
//! class mean, separable from real objects only through the simulated
//! head's background calls, optionally mixed with draws from dedicated
//! junk modes: background directions of their own that give the proposal
//! stream the structured junk real detectors see.
//!
//! Generation is deterministic for a fixed config: one master stream seeds
//! a fixed list of section streams (means, labeled boxes, discovery
//! proposals, test layout, test features, head calls, held-out features),
//! so equal configs produce bit-identical worlds.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    BasePrediction, BoxGeometry, ClassId, ClassName, FeatureRecord, FeatureSource,
};
use crate::error::{Error, Result};
use crate::postprocess::iou;

/// Side length of the square canvas boxes are placed on.
pub const CANVAS: f32 = 1000.0;
/// Box side lengths are drawn uniformly from this range.
pub const BOX_SIDE_MIN: f32 = 24.0;
pub const BOX_SIDE_MAX: f32 = 96.0;
/// Boxes within one image are re-drawn until their pairwise overlap stays
/// at or below this, which keeps every proposal matchable to exactly one
/// ground-truth box at the usual evaluation thresholds.
pub const MAX_INTRA_IMAGE_IOU: f64 = 0.3;

/// How object classes are drawn per test box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LabelDistribution {
    /// Deterministic round robin over all classes: every class gets an
    /// equal share of boxes.
    #[default]
    Uniform,
    /// Rank-weighted Zipf draw with weight 1 / rank^s over the class list,
    /// so late (novel) classes become rare.
    LongTailed { s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub dim: usize,
    pub n_base: usize,
    pub n_novel: usize,
    /// Minimum pairwise angle between class mean directions, degrees.
    pub min_angle_deg: f64,
    /// Noise scale around the class mean for real objects.
    pub feature_sigma: f64,
    /// Labeled boxes per base class, and discovery proposals per class.
    pub samples_per_class: usize,
    /// Fraction of proposal boxes that are clutter, in the test images and
    /// in the discovery stream alike.
    pub clutter_fraction: f64,
    /// Noise scale for confuser clutter around its borrowed class mean.
    pub clutter_sigma: f64,
    /// Distinct background directions of their own. When positive, each
    /// clutter box flips a fair coin between a confuser near a class mean
    /// and a draw from one of these junk modes; tight junk modes soak up
    /// cluster budget the way structured background does in real proposal
    /// streams.
    pub junk_modes: usize,
    pub images: usize,
    pub boxes_per_image: usize,
    /// Chance the simulated head miscalls a box: objects of base classes
    /// flip to background, everything else flips to a random base class.
    pub flip_prob: f64,
    pub label_distribution: LabelDistribution,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            n_base: 10,
            n_novel: 10,
            min_angle_deg: 60.0,
            feature_sigma: 0.05,
            samples_per_class: 100,
            clutter_fraction: 0.0,
            clutter_sigma: 0.05,
            junk_modes: 0,
            images: 100,
            boxes_per_image: 10,
            flip_prob: 0.0,
            label_distribution: LabelDistribution::Uniform,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid_config("dim must be at least 2"));
        }
        if self.n_base == 0 || self.n_novel == 0 {
            return Err(Error::invalid_config("worlds need at least one base and one novel class"));
        }
        if self.samples_per_class == 0 || self.images == 0 || self.boxes_per_image == 0 {
            return Err(Error::invalid_config(
                "samples_per_class, images, and boxes_per_image must be positive",
            ));
        }
        if !(0.0..=90.0).contains(&self.min_angle_deg) {
            return Err(Error::invalid_config("min_angle_deg must lie in [0, 90]"));
        }
        for (name, v) in [("feature_sigma", self.feature_sigma), ("clutter_sigma", self.clutter_sigma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid_config(format!("{name} must be finite and non-negative")));
            }
        }
        for (name, v) in [("clutter_fraction", self.clutter_fraction), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid_config(format!("{name} must lie in [0, 1]")));
            }
        }
        if let LabelDistribution::LongTailed { s } = self.label_distribution {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::invalid_config("zipf exponent must be positive"));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_base + self.n_novel
    }

    /// Clutter boxes per image; the rest are real objects.
    pub fn clutter_per_image(&self) -> usize {
        ((self.boxes_per_image as f64 * self.clutter_fraction).round() as usize).min(self.boxes_per_image)
    }

    /// Clutter proposals in the discovery stream, sized so clutter makes up
    /// `clutter_fraction` of the stream (capped at one per real proposal).
    pub fn discovery_clutter(&self) -> usize {
        let objects = (self.n_classes() * self.samples_per_class) as f64;
        if self.clutter_fraction >= 0.5 {
            return objects as usize;
        }
        (objects * self.clutter_fraction / (1.0 - self.clutter_fraction)).round() as usize
    }
}

/// Everything a test can ask the generator about the world it built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTables {
    pub dim: usize,
    pub seed: u64,
    pub base_class_ids: Vec<ClassId>,
    pub novel_class_ids: Vec<ClassId>,
    /// Ground-truth box count per class over the test split.
    pub test_instances: BTreeMap<ClassId, u64>,
    /// Distinct test images containing each class.
    pub test_image_frequency: BTreeMap<ClassId, u64>,
    pub config: WorldConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    /// Labeled base-class boxes for prototype construction.
    pub base_gt: Vec<FeatureRecord>,
    /// Unlabeled(ish) proposals over every class for discovery, plus
    /// clutter; the true class rides along in `gt_class` for oracle
    /// variants and tests, and clutter carries none.
    pub discovery_rpn: Vec<FeatureRecord>,
    /// Test-split proposals, objects and clutter, with simulated head calls.
    pub test_rpn: Vec<FeatureRecord>,
    /// Test-split ground truth: the object boxes with fresh feature draws.
    pub test_gt: Vec<FeatureRecord>,
    pub truth: TruthTables,
    pub class_names: Vec<ClassName>,
    /// Unit mean directions, one per class id.
    pub means: Vec<Vec<f64>>,
    /// Unit directions of the background junk modes, if any.
    pub junk_means: Vec<Vec<f64>>,
}

fn unit_direction(dim: usize, normal: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Class means and junk modes share one angle-constrained draw, so junk
/// directions keep the same distance guarantees as real classes.
fn draw_means(config: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let total = config.n_classes() + config.junk_modes;
    let max_dot = (config.min_angle_deg.to_radians()).cos();
    let standard = Normal::new(0.0, 1.0).expect("unit sigma is valid");
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(total);
    for _ in 0..total {
        let mut placed = false;
        for _ in 0..10_000 {
            let candidate = unit_direction(config.dim, &standard, rng);
            let ok = means
                .iter()
                .all(|m| m.iter().zip(&candidate).map(|(a, b)| a * b).sum::<f64>() <= max_dot + 1e-12);
            if ok {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid_config(format!(
                "could not place {total} directions at pairwise angle {} degrees in dimension {}",
                config.min_angle_deg, config.dim
            )));
        }
    }
    Ok(means)
}

fn noisy_feature(mean: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return mean.iter().map(|&m| m as f32).collect();
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    mean.iter().map(|&m| (m + normal.sample(rng)) as f32).collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> BoxGeometry {
    let w = rng.random_range(BOX_SIDE_MIN..=BOX_SIDE_MAX);
    let h = rng.random_range(BOX_SIDE_MIN..=BOX_SIDE_MAX);
    let x = rng.random_range(0.0..=(CANVAS - w));
    let y = rng.random_range(0.0..=(CANVAS - h));
    BoxGeometry::new(x, y, w, h)
}

fn place_box(placed: &[BoxGeometry], rng: &mut ChaCha8Rng) -> Result<BoxGeometry> {
    for _ in 0..1000 {
        let candidate = random_box(rng);
        if placed.iter().all(|b| iou(b, &candidate) <= MAX_INTRA_IMAGE_IOU) {
            return Ok(candidate);
        }
    }
    Err(Error::invalid_config(
        "could not place a test box under the overlap limit; lower boxes_per_image",
    ))
}

/// Per-box class picker over the combined class list.
enum ClassPicker {
    RoundRobin { next: usize, n: usize },
    LongTailed { cumulative: Vec<f64> },
}

impl ClassPicker {
    fn new(config: &WorldConfig) -> Self {
        match config.label_distribution {
            LabelDistribution::Uniform => ClassPicker::RoundRobin { next: 0, n: config.n_classes() },
            LabelDistribution::LongTailed { s } => {
                let weights: Vec<f64> =
                    (1..=config.n_classes()).map(|rank| 1.0 / (rank as f64).powf(s)).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                let cumulative = weights
                    .iter()
                    .map(|w| {
                        acc += w / total;
                        acc
                    })
                    .collect();
                ClassPicker::LongTailed { cumulative }
            }
        }
    }

    fn pick(&mut self, rng: &mut ChaCha8Rng) -> usize {
        match self {
            ClassPicker::RoundRobin { next, n } => {
                let class = *next;
                *next = (*next + 1) % *n;
                class
            }
            ClassPicker::LongTailed { cumulative } => {
                let u: f64 = rng.random();
                cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
            }
        }
    }
}

/// Direction and noise scale for one clutter box: a confuser around a
/// borrowed class mean at `clutter_sigma`, or, when junk modes exist and
/// the coin lands that way, a junk mode at the tight object scale.
fn clutter_choice<'a>(
    config: &WorldConfig,
    means: &'a [Vec<f64>],
    junk_means: &'a [Vec<f64>],
    pick_rng: &mut ChaCha8Rng,
) -> (&'a [f64], f64) {
    if !junk_means.is_empty() && pick_rng.random::<bool>() {
        let mode = pick_rng.random_range(0..junk_means.len());
        return (&junk_means[mode], config.feature_sigma);
    }
    let borrowed = pick_rng.random_range(0..config.n_classes());
    (&means[borrowed], config.clutter_sigma)
}

/// Simulated head call for one box; `true_base_class` is `Some` only for
/// base-class objects.
fn head_call(
    true_base_class: Option<ClassId>,
    n_base: usize,
    flip_prob: f64,
    rng: &mut ChaCha8Rng,
) -> BasePrediction {
    let flip = rng.random::<f64>() < flip_prob;
    match (true_base_class, flip) {
        (Some(class_id), false) => BasePrediction::BaseClass { class_id },
        (Some(_), true) => BasePrediction::Background,
        (None, false) => BasePrediction::Background,
        (None, true) => BasePrediction::BaseClass { class_id: rng.random_range(0..n_base as u32) },
    }
}

/// Builds a complete world from a config.
pub fn generate(config: &WorldConfig) -> Result<SynthWorld> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    // Section seeds drawn once, in this order, so every section's stream is
    // independent of how much randomness the others consume.
    let mut means_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
    let mut base_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
    let mut discovery_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
    let mut layout_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
    let mut feature_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
    let mut head_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
    let mut gt_feature_rng = ChaCha8Rng::seed_from_u64(master.next_u64());

    let mut means = draw_means(config, &mut means_rng)?;
    let junk_means = means.split_off(config.n_classes());
    let base_ids: Vec<ClassId> = (0..config.n_base as u32).collect();
    let novel_ids: Vec<ClassId> = (config.n_base as u32..config.n_classes() as u32).collect();

    // Labeled base boxes, one synthetic image each.
    let mut base_gt = Vec::with_capacity(config.n_base * config.samples_per_class);
    for &class_id in &base_ids {
        for _ in 0..config.samples_per_class {
            let bbox = random_box(&mut base_rng);
            base_gt.push(FeatureRecord {
                image_id: 1_000_000 + base_gt.len() as u64,
                bbox,
                source: FeatureSource::Gt,
                base_pred: None,
                objectness: None,
                gt_class: Some(class_id),
                feature: noisy_feature(&means[class_id as usize], config.feature_sigma, &mut base_rng),
            });
        }
    }

    // Discovery proposals cover every class, base and novel, because the
    // discovery split is unlabeled: nothing upstream can filter it.
    let mut discovery_rpn =
        Vec::with_capacity(config.n_classes() * config.samples_per_class + config.discovery_clutter());
    for class in 0..config.n_classes() as u32 {
        for _ in 0..config.samples_per_class {
            let bbox = random_box(&mut discovery_rng);
            let true_base = base_ids.contains(&class).then_some(class);
            let base_pred = head_call(true_base, config.n_base, config.flip_prob, &mut discovery_rng);
            let objectness = 0.7 + 0.3 * discovery_rng.random::<f64>();
            discovery_rpn.push(FeatureRecord {
                image_id: 2_000_000 + discovery_rpn.len() as u64,
                bbox,
                source: FeatureSource::Rpn,
                base_pred: Some(base_pred),
                objectness: Some(objectness as f32),
                gt_class: Some(class),
                feature: noisy_feature(&means[class as usize], config.feature_sigma, &mut discovery_rng),
            });
        }
    }
    // Clutter rides along with the discovery proposals too: a proposal
    // stream nothing can filter also contains junk, and a small cluster
    // budget has to spend centers on it.
    for _ in 0..config.discovery_clutter() {
        let bbox = random_box(&mut discovery_rng);
        let base_pred = head_call(None, config.n_base, config.flip_prob, &mut discovery_rng);
        let objectness = 0.3 + 0.6 * discovery_rng.random::<f64>();
        let (direction, sigma) = clutter_choice(config, &means, &junk_means, &mut discovery_rng);
        discovery_rpn.push(FeatureRecord {
            image_id: 2_000_000 + discovery_rpn.len() as u64,
            bbox,
            source: FeatureSource::Rpn,
            base_pred: Some(base_pred),
            objectness: Some(objectness as f32),
            gt_class: None,
            feature: noisy_feature(direction, sigma, &mut discovery_rng),
        });
    }

    // Test split: real objects first, then clutter, per image.
    let clutter_per_image = config.clutter_per_image();
    let objects_per_image = config.boxes_per_image - clutter_per_image;
    let mut picker = ClassPicker::new(config);
    let mut test_rpn = Vec::with_capacity(config.images * config.boxes_per_image);
    let mut test_gt = Vec::with_capacity(config.images * objects_per_image);
    let mut test_instances: BTreeMap<ClassId, u64> = BTreeMap::new();
    let mut test_images: BTreeMap<ClassId, std::collections::BTreeSet<u64>> = BTreeMap::new();
    for image_id in 0..config.images as u64 {
        let mut placed = Vec::with_capacity(config.boxes_per_image);
        for slot in 0..config.boxes_per_image {
            let bbox = place_box(&placed, &mut layout_rng)?;
            placed.push(bbox);
            let is_clutter = slot >= objects_per_image;
            if is_clutter {
                let (direction, sigma) = clutter_choice(config, &means, &junk_means, &mut layout_rng);
                let feature = noisy_feature(direction, sigma, &mut feature_rng);
                let base_pred = head_call(None, config.n_base, config.flip_prob, &mut head_rng);
                let objectness = 0.3 + 0.6 * head_rng.random::<f64>();
                test_rpn.push(FeatureRecord {
                    image_id,
                    bbox,
                    source: FeatureSource::Rpn,
                    base_pred: Some(base_pred),
                    objectness: Some(objectness as f32),
                    gt_class: None,
                    feature,
                });
            } else {
                let class = picker.pick(&mut layout_rng) as u32;
                let feature = noisy_feature(&means[class as usize], config.feature_sigma, &mut feature_rng);
                let true_base = (class < config.n_base as u32).then_some(class);
                let base_pred = head_call(true_base, config.n_base, config.flip_prob, &mut head_rng);
                let objectness = 0.7 + 0.3 * head_rng.random::<f64>();
                test_rpn.push(FeatureRecord {
                    image_id,
                    bbox,
                    source: FeatureSource::Rpn,
                    base_pred: Some(base_pred),
                    objectness: Some(objectness as f32),
                    gt_class: None,
                    feature,
                });
                test_gt.push(FeatureRecord {
                    image_id,
                    bbox,
                    source: FeatureSource::Gt,
                    base_pred: None,
                    objectness: None,
                    gt_class: Some(class),
                    feature: noisy_feature(&means[class as usize], config.feature_sigma, &mut gt_feature_rng),
                });
                *test_instances.entry(class).or_insert(0) += 1;
                test_images.entry(class).or_default().insert(image_id);
            }
        }
    }

    let class_names = (0..config.n_classes() as u32)
        .map(|class_id| ClassName {
            class_id,
            name: if class_id < config.n_base as u32 {
                format!("base_{class_id:02}")
            } else {
                format!("novel_{:02}", class_id - config.n_base as u32)
            },
        })
        .collect();

    let truth = TruthTables {
        dim: config.dim,
        seed: config.seed,
        base_class_ids: base_ids,
        novel_class_ids: novel_ids,
        test_instances,
        test_image_frequency: test_images.into_iter().map(|(c, set)| (c, set.len() as u64)).collect(),
        config: config.clone(),
    };

    Ok(SynthWorld { base_gt, discovery_rpn, test_rpn, test_gt, truth, class_names, means, junk_means })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmath;

    fn small_config() -> WorldConfig {
        WorldConfig {
            dim: 16,
            n_base: 3,
            n_novel: 2,
            min_angle_deg: 50.0,
            feature_sigma: 0.05,
            samples_per_class: 20,
            clutter_fraction: 0.3,
            clutter_sigma: 0.05,
            junk_modes: 0,
            images: 20,
            boxes_per_image: 6,
            flip_prob: 0.0,
            label_distribution: LabelDistribution::Uniform,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small_config();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn record_counts_match_the_config() {
        let config = small_config();
        let world = generate(&config).unwrap();
        assert_eq!(world.base_gt.len(), 3 * 20);
        // 100 labeled proposals plus round(0.3 / 0.7 * 100) = 43 clutter.
        assert_eq!(config.discovery_clutter(), 43);
        assert_eq!(world.discovery_rpn.len(), 5 * 20 + 43);
        let unlabeled = world.discovery_rpn.iter().filter(|r| r.gt_class.is_none()).count();
        assert_eq!(unlabeled, 43);
        assert_eq!(world.test_rpn.len(), 20 * 6);
        // clutter_per_image = round(6 * 0.3) = 2, so 4 objects per image.
        assert_eq!(config.clutter_per_image(), 2);
        assert_eq!(world.test_gt.len(), 20 * 4);
        let total: u64 = world.truth.test_instances.values().sum();
        assert_eq!(total, 20 * 4);
        assert_eq!(world.truth.base_class_ids, vec![0, 1, 2]);
        assert_eq!(world.truth.novel_class_ids, vec![3, 4]);
        assert_eq!(world.class_names[0].name, "base_00");
        assert_eq!(world.class_names[3].name, "novel_00");
    }

    #[test]
    fn mean_directions_respect_the_angle_floor() {
        let config = small_config();
        let world = generate(&config).unwrap();
        let max_dot = config.min_angle_deg.to_radians().cos();
        for i in 0..world.means.len() {
            let norm: f64 = world.means[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            for j in (i + 1)..world.means.len() {
                let dot: f64 = world.means[i].iter().zip(&world.means[j]).map(|(a, b)| a * b).sum();
                assert!(dot <= max_dot + 1e-9, "classes {i} and {j} too close, dot = {dot}");
            }
        }
    }

    #[test]
    fn boxes_stay_on_canvas_and_apart() {
        let world = generate(&small_config()).unwrap();
        let mut by_image: BTreeMap<u64, Vec<BoxGeometry>> = BTreeMap::new();
        for record in &world.test_rpn {
            let b = record.bbox;
            assert!(b.x >= 0.0 && b.y >= 0.0);
            assert!(b.x + b.w <= CANVAS && b.y + b.h <= CANVAS);
            assert!((BOX_SIDE_MIN..=BOX_SIDE_MAX).contains(&b.w));
            assert!((BOX_SIDE_MIN..=BOX_SIDE_MAX).contains(&b.h));
            by_image.entry(record.image_id).or_default().push(b);
        }
        for boxes in by_image.values() {
            for i in 0..boxes.len() {
                for j in (i + 1)..boxes.len() {
                    assert!(iou(&boxes[i], &boxes[j]) <= MAX_INTRA_IMAGE_IOU + 1e-12);
                }
            }
        }
    }

    #[test]
    fn features_cluster_around_their_class_mean() {
        let world = generate(&small_config()).unwrap();
        for class in 0..3u32 {
            let mut sum = vec![0.0f64; 16];
            let mut count = 0;
            for record in world.base_gt.iter().filter(|r| r.gt_class == Some(class)) {
                let unit = vecmath::l2_normalize_f32(&record.feature, "test").unwrap();
                for (acc, v) in sum.iter_mut().zip(&unit) {
                    *acc += v;
                }
                count += 1;
            }
            let mean_dir = &world.means[class as usize];
            let dot: f64 =
                sum.iter().zip(mean_dir).map(|(a, b)| a / count as f64 * b).sum();
            assert!(dot > 0.95, "class {class} drifted, alignment = {dot}");
        }
    }

    #[test]
    fn head_calls_follow_the_flip_probability() {
        let clean = generate(&small_config()).unwrap();
        for record in &clean.test_rpn {
            match record.base_pred.as_ref().unwrap() {
                BasePrediction::BaseClass { class_id } => assert!(*class_id < 3),
                BasePrediction::Background => {}
            }
        }
        // flip_prob 0: objects of base classes are always called correctly.
        let objects = clean.test_gt.len();
        let base_calls = clean
            .test_rpn
            .iter()
            .filter(|r| matches!(r.base_pred, Some(BasePrediction::BaseClass { .. })))
            .count();
        // Uniform round robin over 5 classes: 3/5 of objects are base.
        assert_eq!(base_calls, objects * 3 / 5);

        let flipped = generate(&WorldConfig { flip_prob: 1.0, ..small_config() }).unwrap();
        // Every base object flips to background, everything else to a class.
        let base_calls = flipped
            .test_rpn
            .iter()
            .filter(|r| matches!(r.base_pred, Some(BasePrediction::BaseClass { .. })))
            .count();
        let clutter = 20 * 2;
        let novel_objects = flipped.test_gt.len() * 2 / 5;
        assert_eq!(base_calls, clutter + novel_objects);
    }

    #[test]
    fn truth_tables_match_the_ground_truth_stream() {
        let world = generate(&small_config()).unwrap();
        let mut instances: BTreeMap<ClassId, u64> = BTreeMap::new();
        for record in &world.test_gt {
            *instances.entry(record.gt_class.unwrap()).or_insert(0) += 1;
        }
        assert_eq!(instances, world.truth.test_instances);
        for (&class, &freq) in &world.truth.test_image_frequency {
            let distinct: std::collections::BTreeSet<u64> = world
                .test_gt
                .iter()
                .filter(|r| r.gt_class == Some(class))
                .map(|r| r.image_id)
                .collect();
            assert_eq!(distinct.len() as u64, freq);
        }
    }

    #[test]
    fn every_ground_truth_box_has_a_matching_proposal() {
        let world = generate(&small_config()).unwrap();
        for gt in &world.test_gt {
            assert!(
                world
                    .test_rpn
                    .iter()
                    .any(|r| r.image_id == gt.image_id && r.bbox == gt.bbox),
                "ground-truth box without a proposal: {gt:?}"
            );
        }
    }

    #[test]
    fn zipf_worlds_skew_class_counts() {
        let config = WorldConfig {
            label_distribution: LabelDistribution::LongTailed { s: 1.5 },
            images: 60,
            ..small_config()
        };
        let world = generate(&config).unwrap();
        let first = world.truth.test_instances.get(&0).copied().unwrap_or(0);
        let last = world.truth.test_instances.get(&4).copied().unwrap_or(0);
        assert!(first > last, "zipf should favor early classes: {first} vs {last}");
    }

    #[test]
    fn zero_sigma_collapses_features_onto_the_means() {
        let config = WorldConfig {
            feature_sigma: 0.0,
            clutter_fraction: 0.0,
            ..small_config()
        };
        let world = generate(&config).unwrap();
        for record in world.base_gt.iter().chain(&world.discovery_rpn) {
            let class = record.gt_class.unwrap() as usize;
            for (f, m) in record.feature.iter().zip(&world.means[class]) {
                assert_eq!(*f, *m as f32);
            }
        }
        // Proposals carry no labels; they must still sit exactly on a mean.
        for record in &world.test_rpn {
            let on_a_mean = world.means.iter().any(|mean| {
                record.feature.iter().zip(mean).all(|(f, m)| *f == *m as f32)
            });
            assert!(on_a_mean, "proposal feature off every mean: {record:?}");
        }
    }

    #[test]
    fn wider_noise_spreads_classes_more() {
        let spread = |sigma: f64| {
            let world = generate(&WorldConfig { feature_sigma: sigma, ..small_config() }).unwrap();
            let mut total = 0.0;
            let mut count = 0usize;
            for record in &world.base_gt {
                let class = record.gt_class.unwrap() as usize;
                total += record
                    .feature
                    .iter()
                    .zip(&world.means[class])
                    .map(|(f, m)| (*f as f64 - m).powi(2))
                    .sum::<f64>();
                count += 1;
            }
            total / count as f64
        };
        let narrow = spread(0.02);
        let wide = spread(0.1);
        assert!(wide > narrow * 4.0, "sigma 0.1 vs 0.02 spreads: {wide} vs {narrow}");
    }

    #[test]
    fn long_tailed_counts_track_the_zipf_pmf() {
        // s = 1 over 5 classes: weights 1/rank, normalized. With 9600 draws
        // the multinomial standard deviation per class is about 45-65, so a
        // 3-sigma band is roughly 200 counts wide.
        let config = WorldConfig {
            label_distribution: LabelDistribution::LongTailed { s: 1.0 },
            images: 2400,
            boxes_per_image: 5,
            clutter_fraction: 0.2,
            ..small_config()
        };
        let world = generate(&config).unwrap();
        let n_draws: u64 = world.truth.test_instances.values().sum();
        let harmonic: f64 = (1..=5).map(|r| 1.0 / r as f64).sum();
        for class in 0..5u32 {
            let expected = n_draws as f64 / ((class as f64 + 1.0) * harmonic);
            let sigma = (expected * (1.0 - 1.0 / ((class as f64 + 1.0) * harmonic))).sqrt();
            let got = world.truth.test_instances.get(&class).copied().unwrap_or(0) as f64;
            assert!(
                (got - expected).abs() <= 3.0 * sigma,
                "class {class}: got {got}, expected {expected} within 3 sigma = {sigma}"
            );
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate(&WorldConfig { dim: 1, ..small_config() }).is_err());
        assert!(generate(&WorldConfig { n_novel: 0, ..small_config() }).is_err());
        assert!(generate(&WorldConfig { min_angle_deg: 91.0, ..small_config() }).is_err());
        assert!(generate(&WorldConfig { flip_prob: 1.1, ..small_config() }).is_err());
        assert!(generate(&WorldConfig { feature_sigma: -0.1, ..small_config() }).is_err());
        // 40 classes at 85 degrees pairwise cannot fit in 3 dimensions.
        let packed = WorldConfig { dim: 3, n_base: 20, n_novel: 20, min_angle_deg: 85.0, ..small_config() };
        assert!(generate(&packed).is_err());
    }
}
