//! Run configuration: one TOML file, preset defaults, flag overrides.
//!
//! Precedence is flags > file > preset defaults. The file is merged onto
//! the preset's full default tree key by key, so a config only needs the
//! keys it changes; unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use ncd_core::classifier::InferenceConfig;
use ncd_core::clustering::{InitMethod, KMeansConfig};
use ncd_core::error::{Error, Result};
use ncd_core::postprocess::PostprocessConfig;
use ncd_core::synthgen::{LabelDistribution, WorldConfig};
use serde::{Deserialize, Serialize};

/// Dataset/schedule preset selecting default knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small-vocabulary schedule: long clustering budget, score-gated output.
    #[default]
    Voc,
    /// Large-vocabulary schedule: shorter clustering budget, no score gate,
    /// deeper per-image cap.
    Lvis,
}

/// Which prototype route the pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Labeled base prototypes plus discovered novel clusters.
    #[default]
    Default,
    /// No labeled prototypes: every class must come out of clustering.
    AllClusters,
    /// Oracle novel prototypes averaged from labeled discovery features;
    /// an upper bound on what discovery could achieve.
    AllGt,
}

/// Input locations. Unset paths resolve to the generator's fixed file names
/// inside `out_dir`, so synthetic runs need no path plumbing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_gt: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discovery_rpn: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_rpn: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_gt: Option<PathBuf>,
    /// Per-proposal embedding vectors aligned record-for-record with the
    /// discovery proposals; only the embedding mapping route reads them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Labeled text embeddings the proposals are matched against.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_embeddings: Option<PathBuf>,
}

/// Mirrors the clustering config, with the seed optional so the run seed
/// can flow in when the file does not pin one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansSection {
    pub q: usize,
    pub max_iter: usize,
    pub retries: usize,
    pub tol: f64,
    pub init: InitMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for KMeansSection {
    fn default() -> Self {
        let d = KMeansConfig::default();
        Self { q: d.q, max_iter: d.max_iter, retries: d.retries, tol: d.tol, init: d.init, seed: None }
    }
}

impl KMeansSection {
    pub fn resolve(&self, run_seed: u64) -> KMeansConfig {
        KMeansConfig {
            q: self.q,
            max_iter: self.max_iter,
            retries: self.retries,
            seed: self.seed.unwrap_or(run_seed),
            tol: self.tol,
            init: self.init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub iou_thresholds: Vec<f64>,
    /// Explicit base-class ids; when unset the run falls back to the
    /// generator's truth tables, then to the prototype file's base ids.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_classes: Option<Vec<u32>>,
    pub class_agnostic: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { iou_thresholds: vec![0.5], base_classes: None, class_agnostic: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MappingMethodName {
    #[default]
    Hungarian,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingSection {
    pub method: MappingMethodName,
    /// Embedding route: each cluster takes the majority label of its kappa
    /// closest proposals.
    pub kappa: usize,
}

impl Default for MappingSection {
    fn default() -> Self {
        Self { method: MappingMethodName::Hungarian, kappa: 5 }
    }
}

/// Mirrors the world config, again with an optional seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub dim: usize,
    pub n_base: usize,
    pub n_novel: usize,
    pub min_angle_deg: f64,
    pub feature_sigma: f64,
    pub samples_per_class: usize,
    pub clutter_fraction: f64,
    pub clutter_sigma: f64,
    pub junk_modes: usize,
    pub images: usize,
    pub boxes_per_image: usize,
    pub flip_prob: f64,
    pub label_distribution: LabelDistribution,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = WorldConfig::default();
        Self {
            dim: d.dim,
            n_base: d.n_base,
            n_novel: d.n_novel,
            min_angle_deg: d.min_angle_deg,
            feature_sigma: d.feature_sigma,
            samples_per_class: d.samples_per_class,
            clutter_fraction: d.clutter_fraction,
            clutter_sigma: d.clutter_sigma,
            junk_modes: d.junk_modes,
            images: d.images,
            boxes_per_image: d.boxes_per_image,
            flip_prob: d.flip_prob,
            label_distribution: d.label_distribution,
            seed: None,
        }
    }
}

impl SynthSection {
    pub fn resolve(&self, run_seed: u64) -> WorldConfig {
        WorldConfig {
            dim: self.dim,
            n_base: self.n_base,
            n_novel: self.n_novel,
            min_angle_deg: self.min_angle_deg,
            feature_sigma: self.feature_sigma,
            samples_per_class: self.samples_per_class,
            clutter_fraction: self.clutter_fraction,
            clutter_sigma: self.clutter_sigma,
            junk_modes: self.junk_modes,
            images: self.images,
            boxes_per_image: self.boxes_per_image,
            flip_prob: self.flip_prob,
            label_distribution: self.label_distribution.clone(),
            seed: self.seed.unwrap_or(run_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub variant: Variant,
    pub paths: PathsSection,
    pub kmeans: KMeansSection,
    pub inference: InferenceConfig,
    pub postprocess: PostprocessConfig,
    pub eval: EvalSection,
    pub mapping: MappingSection,
    pub synth: SynthSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(Preset::Voc)
    }
}

/// Fixed artifact names inside `out_dir`.
pub mod artifacts {
    pub const BASE_GT: &str = "base_gt.ncdf";
    pub const DISCOVERY_RPN: &str = "discovery_rpn.ncdf";
    pub const TEST_RPN: &str = "test_rpn.ncdf";
    pub const TEST_GT: &str = "test_gt.ncdf";
    pub const TRUTH: &str = "truth.json";
    pub const CLASSES: &str = "classes.jsonl";
    pub const BASE_PROTOTYPES: &str = "base_prototypes.jsonl";
    pub const PROTOTYPES: &str = "prototypes.jsonl";
    pub const DETECTIONS: &str = "detections.jsonl";
    pub const MAPPING: &str = "mapping.jsonl";
    pub const REPORT_JSONL: &str = "report.jsonl";
    pub const REPORT_TXT: &str = "report.txt";
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let kmeans = match preset {
            Preset::Voc => {
                let d = KMeansConfig::voc(KMeansConfig::default().q, 0);
                KMeansSection {
                    q: d.q,
                    max_iter: d.max_iter,
                    retries: d.retries,
                    tol: d.tol,
                    init: d.init,
                    seed: None,
                }
            }
            Preset::Lvis => {
                let d = KMeansConfig::lvis(KMeansConfig::default().q, 0);
                KMeansSection {
                    q: d.q,
                    max_iter: d.max_iter,
                    retries: d.retries,
                    tol: d.tol,
                    init: d.init,
                    seed: None,
                }
            }
        };
        let postprocess = match preset {
            Preset::Voc => PostprocessConfig::default(),
            Preset::Lvis => PostprocessConfig::lvis(),
        };
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            variant: Variant::Default,
            paths: PathsSection::default(),
            kmeans,
            inference: InferenceConfig::default(),
            postprocess,
            eval: EvalSection::default(),
            mapping: MappingSection::default(),
            synth: SynthSection::default(),
        }
    }

    /// Loads a config: preset defaults, then the file's keys, then flag
    /// overrides, applied in that order.
    pub fn load(
        file: Option<&Path>,
        preset: Preset,
        seed: Option<u64>,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        let defaults = toml::Value::try_from(Self::preset(preset))
            .map_err(|e| Error::invalid_config(format!("internal default serialization failed: {e}")))?;
        let merged = match file {
            None => defaults,
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let overlay: toml::Value = toml::from_str(&text)
                    .map_err(|e| Error::invalid_config(format!("{}: {e}", path.display())))?;
                merge(defaults, overlay)
            }
        };
        let mut config: Self = merged
            .try_into()
            .map_err(|e| Error::invalid_config(format!("config: {e}")))?;
        if let Some(seed) = seed {
            config.seed = seed;
        }
        if let Some(dir) = out_dir {
            config.out_dir = dir.to_path_buf();
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.inference.metric.validate()?;
        self.postprocess.validate()?;
        if self.eval.iou_thresholds.is_empty() {
            return Err(Error::invalid_config("eval.iou_thresholds must not be empty"));
        }
        if self.mapping.kappa == 0 {
            return Err(Error::invalid_config("mapping.kappa must be a positive number of proposals"));
        }
        Ok(())
    }

    /// Canonical serialized form; the manifest hashes this.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid_config(format!("config serialization: {e}")))
    }

    fn path_or(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn base_gt_path(&self) -> PathBuf {
        self.path_or(&self.paths.base_gt, artifacts::BASE_GT)
    }
    pub fn discovery_rpn_path(&self) -> PathBuf {
        self.path_or(&self.paths.discovery_rpn, artifacts::DISCOVERY_RPN)
    }
    pub fn test_rpn_path(&self) -> PathBuf {
        self.path_or(&self.paths.test_rpn, artifacts::TEST_RPN)
    }
    pub fn test_gt_path(&self) -> PathBuf {
        self.path_or(&self.paths.test_gt, artifacts::TEST_GT)
    }
    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// The pipeline generates a world exactly when no input path is pinned;
    /// mixing generated and external inputs is almost certainly a mistake.
    pub fn wants_synth(&self) -> Result<bool> {
        let set = [
            self.paths.base_gt.is_some(),
            self.paths.discovery_rpn.is_some(),
            self.paths.test_rpn.is_some(),
            self.paths.test_gt.is_some(),
        ];
        let count = set.iter().filter(|&&s| s).count();
        match count {
            0 => Ok(true),
            4 => Ok(false),
            _ => Err(Error::invalid_config(
                "either set all four input paths or none; a partial set mixes generated and external data",
            )),
        }
    }
}

/// Recursive right-biased merge: tables merge key by key, everything else
/// (including arrays) is replaced wholesale.
fn merge(base: toml::Value, overlay: toml::Value) -> toml::Value {
    match (base, overlay) {
        (toml::Value::Table(mut base), toml::Value::Table(overlay)) => {
            for (key, value) in overlay {
                let merged = match base.remove(&key) {
                    Some(existing) => merge(existing, value),
                    None => value,
                };
                base.insert(key, merged);
            }
            toml::Value::Table(base)
        }
        (_, overlay) => overlay,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn presets_differ_in_schedule_and_postprocess() {
        let voc = PipelineConfig::preset(Preset::Voc);
        assert_eq!(voc.kmeans.max_iter, 1000);
        assert_eq!(voc.kmeans.retries, 10);
        assert_eq!(voc.postprocess.score_threshold, 0.05);
        assert_eq!(voc.postprocess.top_m, 100);
        let lvis = PipelineConfig::preset(Preset::Lvis);
        assert_eq!(lvis.kmeans.max_iter, 250);
        assert_eq!(lvis.kmeans.retries, 5);
        assert_eq!(lvis.postprocess.score_threshold, 0.0);
        assert_eq!(lvis.postprocess.top_m, 300);
    }

    #[test]
    fn file_overrides_preset_and_flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "seed = 7\n[kmeans]\nq = 40\n[postprocess]\nscore_threshold = 0.2\n",
        );
        let config = PipelineConfig::load(Some(&path), Preset::Voc, None, None).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.kmeans.q, 40);
        // Unset keys keep preset values.
        assert_eq!(config.kmeans.max_iter, 1000);
        assert_eq!(config.postprocess.score_threshold, 0.2);
        assert_eq!(config.postprocess.nms_iou, 0.5);

        let flagged =
            PipelineConfig::load(Some(&path), Preset::Voc, Some(99), Some(Path::new("/tmp/x"))).unwrap();
        assert_eq!(flagged.seed, 99);
        assert_eq!(flagged.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[kmeans]\nclusters = 40\n");
        let err = PipelineConfig::load(Some(&path), Preset::Voc, None, None).unwrap_err();
        assert!(err.to_string().contains("clusters"), "{err}");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut config = PipelineConfig::preset(Preset::Lvis);
        config.seed = 12345;
        config.kmeans.q = 77;
        config.synth.seed = Some(5);
        config.eval.base_classes = Some(vec![0, 1, 2]);
        let text = config.canonical_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn seed_flows_into_sections_unless_pinned() {
        let mut config = PipelineConfig::preset(Preset::Voc);
        config.seed = 11;
        assert_eq!(config.kmeans.resolve(config.seed).seed, 11);
        assert_eq!(config.synth.resolve(config.seed).seed, 11);
        config.kmeans.seed = Some(3);
        assert_eq!(config.kmeans.resolve(config.seed).seed, 3);
    }

    #[test]
    fn partial_paths_are_rejected() {
        let mut config = PipelineConfig::preset(Preset::Voc);
        assert!(config.wants_synth().unwrap());
        config.paths.base_gt = Some(PathBuf::from("a.ncdf"));
        assert!(config.wants_synth().is_err());
        config.paths.discovery_rpn = Some(PathBuf::from("b.ncdf"));
        config.paths.test_rpn = Some(PathBuf::from("c.ncdf"));
        config.paths.test_gt = Some(PathBuf::from("d.ncdf"));
        assert!(!config.wants_synth().unwrap());
    }

    #[test]
    fn unset_paths_resolve_into_out_dir() {
        let mut config = PipelineConfig::preset(Preset::Voc);
        config.out_dir = PathBuf::from("/work/run1");
        assert_eq!(config.base_gt_path(), PathBuf::from("/work/run1/base_gt.ncdf"));
        config.paths.base_gt = Some(PathBuf::from("/data/real.ncdf"));
        assert_eq!(config.base_gt_path(), PathBuf::from("/data/real.ncdf"));
    }
}
