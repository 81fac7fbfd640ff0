//! Pipeline stages behind the subcommands.
//!
//! Every stage reads its inputs, computes, writes its artifact, and drops a
//! run manifest next to it. Artifacts are byte-reproducible for a fixed
//! config and seed; re-running a stage overwrites its outputs with identical
//! bytes. The pipeline command is literally the stages called in order, so
//! its outputs match running the subcommands one by one.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use ncd_core::assignment::{
    apply_mapping, build_confusion, embedding_assign, hungarian_assign, nearest_text_labels,
};
use ncd_core::classifier::infer_image;
use ncd_core::datamodel::binary::{read_embedding_file, read_feature_file, write_feature_file};
use ncd_core::datamodel::jsonl;
use ncd_core::datamodel::{
    ClassId, Detection, FeatureRecord, LabelMapping, PrototypeMetadata, PrototypeSet,
};
use ncd_core::error::{Error, Result};
use ncd_core::evaluation::{evaluate, render_table, EvalOptions};
use ncd_core::postprocess::postprocess_image;
use ncd_core::prototypes::{assemble, compute_base_prototypes, discover_novel_prototypes};
use ncd_core::synthgen::{generate, TruthTables};
use ncd_core::vecmath::l2_normalize_f32;
use rayon::prelude::*;

use crate::config::{artifacts, MappingMethodName, PipelineConfig, Variant};
use crate::manifest::{hash_file, sha256_hex, StageManifest};

/// Result with the failing stage's name attached, for exit diagnostics.
pub type Tagged<T> = std::result::Result<T, (&'static str, Error)>;

fn tag<T>(stage: &'static str, result: Result<T>) -> Tagged<T> {
    result.map_err(|e| (stage, e))
}

/// Book-keeping for one stage run: input/output hashes and wall time.
struct StageRun {
    stage: &'static str,
    seed: u64,
    config_sha256: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: Instant,
}

impl StageRun {
    fn begin(stage: &'static str, config: &PipelineConfig) -> Result<Self> {
        std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
        Ok(Self {
            stage,
            seed: config.seed,
            config_sha256: sha256_hex(config.canonical_toml()?.as_bytes()),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    fn finish(self, out_dir: &Path) -> Result<StageManifest> {
        let manifest = StageManifest {
            stage: self.stage.to_string(),
            seed: self.seed,
            config_sha256: self.config_sha256,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_ms: self.started.elapsed().as_millis() as u64,
        };
        manifest.write(out_dir)?;
        Ok(manifest)
    }
}

fn write_truth(path: &Path, truth: &TruthTables) -> Result<()> {
    // Plain data with string keys serializes infallibly.
    let mut body = serde_json::to_string_pretty(truth).expect("truth tables always serialize");
    body.push('\n');
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_truth(path: &Path) -> Result<TruthTables> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), line: 1, source: e })
}

/// Generates a synthetic world and writes its four datasets plus the truth
/// tables and class-name sidecar.
pub fn run_synth(config: &PipelineConfig) -> Result<StageManifest> {
    let mut run = StageRun::begin("synth", config)?;
    let world_config = config.synth.resolve(config.seed);
    let world = generate(&world_config)?;
    for (name, records) in [
        (artifacts::BASE_GT, &world.base_gt),
        (artifacts::DISCOVERY_RPN, &world.discovery_rpn),
        (artifacts::TEST_RPN, &world.test_rpn),
        (artifacts::TEST_GT, &world.test_gt),
    ] {
        let path = config.out(name);
        write_feature_file(&path, world_config.dim, records)?;
        run.record_output(&path)?;
    }
    let truth_path = config.out(artifacts::TRUTH);
    write_truth(&truth_path, &world.truth)?;
    run.record_output(&truth_path)?;
    let classes_path = config.out(artifacts::CLASSES);
    jsonl::write_class_names(&classes_path, &world.class_names)?;
    run.record_output(&classes_path)?;
    run.finish(&config.out_dir)
}

/// Averages labeled base features into per-class prototypes.
pub fn run_prototypes(config: &PipelineConfig) -> Result<StageManifest> {
    let mut run = StageRun::begin("prototypes", config)?;
    let input = config.base_gt_path();
    run.record_input(&input)?;
    let (_, records) = read_feature_file(&input)?;
    let base = compute_base_prototypes(&records)?;
    let set = assemble(base, Vec::new(), PrototypeMetadata::default())?;
    let out = config.out(artifacts::BASE_PROTOTYPES);
    jsonl::write_prototypes(&out, &set)?;
    run.record_output(&out)?;
    run.finish(&config.out_dir)
}

/// Upper-bound prototype route: novel prototypes are the labeled means of
/// the discovery features for every class without a base prototype, ordered
/// by ascending class id.
fn oracle_novel_prototypes(records: &[FeatureRecord], base: &PrototypeSet) -> Result<Vec<Vec<f64>>> {
    let base_ids: BTreeSet<ClassId> = base.base_class_ids().collect();
    let mut sums: BTreeMap<ClassId, (Vec<f64>, u64)> = BTreeMap::new();
    for (index, record) in records.iter().enumerate() {
        record.validate(index)?;
        // Clutter proposals carry no annotation; the oracle averages over
        // the records that do.
        let Some(class) = record.gt_class else { continue };
        if base_ids.contains(&class) {
            continue;
        }
        let feature = l2_normalize_f32(&record.feature, &format!("feature of record {index}"))?;
        let entry = sums.entry(class).or_insert_with(|| (vec![0.0; feature.len()], 0));
        if entry.0.len() != feature.len() {
            return Err(Error::dim_mismatch(format!("record {index}"), entry.0.len(), feature.len()));
        }
        for (acc, v) in entry.0.iter_mut().zip(&feature) {
            *acc += v;
        }
        entry.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::empty_input("no annotated novel classes in the discovery records"));
    }
    Ok(sums.into_values().map(|(sum, n)| sum.into_iter().map(|s| s / n as f64).collect()).collect())
}

/// Builds the prototype set the classifier will score against: discovered
/// clusters joined with base prototypes, all clusters alone, or the labeled
/// upper-bound means, depending on the variant.
pub fn run_discover(config: &PipelineConfig) -> Result<StageManifest> {
    let mut run = StageRun::begin("discover", config)?;
    let discovery_path = config.discovery_rpn_path();
    run.record_input(&discovery_path)?;
    let (_, records) = read_feature_file(&discovery_path)?;

    let set = match config.variant {
        Variant::Default => {
            let base_path = config.out(artifacts::BASE_PROTOTYPES);
            run.record_input(&base_path)?;
            let base_set = jsonl::read_prototypes(&base_path)?;
            let kconfig = config.kmeans.resolve(config.seed);
            let km = discover_novel_prototypes(&records, &kconfig)?;
            let metadata = PrototypeMetadata { seed: Some(kconfig.seed), clustering: Some(kconfig) };
            assemble(base_set.base, km.centers, metadata)?
        }
        Variant::AllClusters => {
            let kconfig = config.kmeans.resolve(config.seed);
            let km = discover_novel_prototypes(&records, &kconfig)?;
            let metadata = PrototypeMetadata { seed: Some(kconfig.seed), clustering: Some(kconfig) };
            assemble(Vec::new(), km.centers, metadata)?
        }
        Variant::AllGt => {
            let base_path = config.out(artifacts::BASE_PROTOTYPES);
            run.record_input(&base_path)?;
            let base_set = jsonl::read_prototypes(&base_path)?;
            let novel = oracle_novel_prototypes(&records, &base_set)?;
            assemble(base_set.base, novel, PrototypeMetadata::default())?
        }
    };
    let out = config.out(artifacts::PROTOTYPES);
    jsonl::write_prototypes(&out, &set)?;
    run.record_output(&out)?;
    run.finish(&config.out_dir)
}

/// Scores every test proposal against the prototype set and post-processes
/// each image's detections.
pub fn run_infer(config: &PipelineConfig) -> Result<StageManifest> {
    let mut run = StageRun::begin("infer", config)?;
    let protos_path = config.out(artifacts::PROTOTYPES);
    run.record_input(&protos_path)?;
    let protos = jsonl::read_prototypes(&protos_path)?;
    let rpn_path = config.test_rpn_path();
    run.record_input(&rpn_path)?;
    let (dim, records) = read_feature_file(&rpn_path)?;
    if dim != protos.dim {
        return Err(Error::dim_mismatch("test proposals against prototypes", protos.dim, dim));
    }

    let mut by_image: BTreeMap<u64, Vec<FeatureRecord>> = BTreeMap::new();
    for record in records {
        by_image.entry(record.image_id).or_default().push(record);
    }
    let images: Vec<Vec<FeatureRecord>> = by_image.into_values().collect();
    let per_image: Vec<Vec<Detection>> = images
        .par_iter()
        .map(|image| {
            let raw = infer_image(image, &protos, &config.inference)?;
            postprocess_image(&raw, &config.postprocess)
        })
        .collect::<Result<_>>()?;
    let detections: Vec<Detection> = per_image.into_iter().flatten().collect();

    let out = config.out(artifacts::DETECTIONS);
    jsonl::write_detections(&out, &detections)?;
    run.record_output(&out)?;
    run.finish(&config.out_dir)
}

fn hungarian_mapping(config: &PipelineConfig, run: &mut StageRun, protos: &PrototypeSet) -> Result<LabelMapping> {
    let gt_path = config.test_gt_path();
    run.record_input(&gt_path)?;
    let (_, gt_records) = read_feature_file(&gt_path)?;
    // Clusters should explain exactly the classes that have no labeled
    // prototype; with no base prototypes at all, that is every class.
    let base_ids: BTreeSet<ClassId> = protos.base_class_ids().collect();
    let novel_gt: Vec<FeatureRecord> = gt_records
        .into_iter()
        .filter(|r| r.gt_class.is_some_and(|c| !base_ids.contains(&c)))
        .collect();
    let confusion = build_confusion(&novel_gt, protos, config.inference.metric)?;
    hungarian_assign(&confusion)
}

fn embedding_mapping(config: &PipelineConfig, run: &mut StageRun, protos: &PrototypeSet) -> Result<LabelMapping> {
    let Some(embeddings_path) = &config.paths.embeddings else {
        return Err(Error::invalid_config("embedding mapping requires paths.embeddings"));
    };
    let Some(texts_path) = &config.paths.text_embeddings else {
        return Err(Error::invalid_config("embedding mapping requires paths.text_embeddings"));
    };
    let discovery_path = config.discovery_rpn_path();
    run.record_input(&discovery_path)?;
    run.record_input(embeddings_path)?;
    run.record_input(texts_path)?;
    let (_, records) = read_feature_file(&discovery_path)?;
    let (_, embedding_records) = read_embedding_file(embeddings_path)?;
    let texts = jsonl::read_text_embeddings(texts_path)?;
    if embedding_records.len() != records.len() {
        return Err(Error::invalid_config(format!(
            "{} embeddings for {} discovery proposals; the files must align record for record",
            embedding_records.len(),
            records.len(),
        )));
    }
    let box_embeddings: Vec<Vec<f64>> = embedding_records.iter().map(|r| r.feature_f64()).collect();
    let labels = nearest_text_labels(&box_embeddings, &texts)?;
    let boxes: Vec<(Vec<f32>, ClassId)> =
        records.into_iter().map(|r| r.feature).zip(labels).collect();
    embedding_assign(protos, &boxes, config.mapping.kappa)
}

/// Grounds cluster indices in semantic class ids, either by exact matching
/// against annotated features or by majority text-embedding vote.
pub fn run_map(config: &PipelineConfig) -> Result<StageManifest> {
    let mut run = StageRun::begin("map", config)?;
    let protos_path = config.out(artifacts::PROTOTYPES);
    run.record_input(&protos_path)?;
    let protos = jsonl::read_prototypes(&protos_path)?;

    let mapping = match config.mapping.method {
        MappingMethodName::Hungarian => hungarian_mapping(config, &mut run, &protos)?,
        MappingMethodName::Embedding => embedding_mapping(config, &mut run, &protos)?,
    };
    let out = config.out(artifacts::MAPPING);
    jsonl::write_mapping(&out, &mapping)?;
    run.record_output(&out)?;
    run.finish(&config.out_dir)
}

/// Base-class ids for the report's splits: an explicit config list wins,
/// then the generator's truth tables, then the prototype file's base ids.
fn resolve_base_classes(config: &PipelineConfig, run: &mut StageRun) -> Result<Vec<ClassId>> {
    if let Some(explicit) = &config.eval.base_classes {
        return Ok(explicit.clone());
    }
    let truth_path = config.out(artifacts::TRUTH);
    if truth_path.exists() {
        run.record_input(&truth_path)?;
        return Ok(read_truth(&truth_path)?.base_class_ids);
    }
    let protos_path = config.out(artifacts::PROTOTYPES);
    if protos_path.exists() {
        run.record_input(&protos_path)?;
        return Ok(jsonl::read_prototypes(&protos_path)?.base_class_ids().collect());
    }
    Ok(Vec::new())
}

/// Scores the detections against ground truth and writes the report, both
/// as records and as a rendered table.
pub fn run_eval(config: &PipelineConfig) -> Result<StageManifest> {
    let mut run = StageRun::begin("eval", config)?;
    let det_path = config.out(artifacts::DETECTIONS);
    run.record_input(&det_path)?;
    let mut detections = jsonl::read_detections(&det_path)?;

    let mapping_path = config.out(artifacts::MAPPING);
    if mapping_path.exists() {
        run.record_input(&mapping_path)?;
        let mapping = jsonl::read_mapping(&mapping_path)?;
        detections = apply_mapping(&detections, &mapping);
    }

    let gt_path = config.test_gt_path();
    run.record_input(&gt_path)?;
    let (_, gt_records) = read_feature_file(&gt_path)?;

    let options = EvalOptions {
        iou_thresholds: config.eval.iou_thresholds.clone(),
        base_classes: resolve_base_classes(config, &mut run)?,
        class_agnostic: config.eval.class_agnostic,
    };
    let report = evaluate(&detections, &gt_records, &options)?;

    let out_jsonl = config.out(artifacts::REPORT_JSONL);
    jsonl::write_report(&out_jsonl, &report)?;
    run.record_output(&out_jsonl)?;
    let out_txt = config.out(artifacts::REPORT_TXT);
    std::fs::write(&out_txt, render_table(&report)).map_err(|e| Error::io(&out_txt, e))?;
    run.record_output(&out_txt)?;
    run.finish(&config.out_dir)
}

/// All stages in order; generation runs only when no input paths are pinned.
pub fn run_pipeline(config: &PipelineConfig) -> Tagged<Vec<StageManifest>> {
    let mut manifests = Vec::new();
    if tag("config", config.wants_synth())? {
        manifests.push(tag("synth", run_synth(config))?);
    }
    manifests.push(tag("prototypes", run_prototypes(config))?);
    manifests.push(tag("discover", run_discover(config))?);
    manifests.push(tag("infer", run_infer(config))?);
    manifests.push(tag("map", run_map(config))?);
    manifests.push(tag("eval", run_eval(config))?);
    Ok(manifests)
}
