//! Line-delimited JSON artifacts: prototypes, detections, label mappings,
//! evaluation reports, class-name tables and text embeddings.
//!
//! Every artifact is a sequence of JSON objects, one per line, ending with a
//! newline. Multi-part artifacts (prototypes, mappings, reports) start with a
//! header line whose `record` field names the line kind; flat artifacts
//! (detections, class names, text embeddings) are one record per line with no
//! header. Writers emit keys in a fixed order and rows in a deterministic
//! order, so re-running a stage reproduces files byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    BasePrototype, ClassAgnosticReport, ClassApRow, ClassId, ClassName, Detection, EvalReport, LabelMapping,
    MappingMethod, PrototypeMetadata, PrototypeSet, TextEmbedding,
};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum PrototypeLine {
    Header { dim: usize, k: usize, q: usize, metadata: PrototypeMetadata },
    Base { class_id: ClassId, vector: Vec<f64> },
    Novel { index: usize, vector: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum MappingLine {
    Header { method: MappingMethod },
    Entry { cluster: usize, class_id: ClassId },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine {
    Summary {
        iou_thresholds: Vec<f64>,
        map_base: Option<f64>,
        map_novel: Option<f64>,
        map_all: Option<f64>,
        map_frequent: Option<f64>,
        map_common: Option<f64>,
        map_rare: Option<f64>,
    },
    Class(ClassApRow),
    ClassAgnostic(ClassAgnosticReport),
}

fn write_lines<T: Serialize>(path: &Path, lines: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for line in lines {
        let json = serde_json::to_string(&line)
            .map_err(|e| Error::Json { path: path.to_path_buf(), line: 0, source: e })?;
        out.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let input = BufReader::new(file);
    let mut items = Vec::new();
    for (number, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Json { path: path.to_path_buf(), line: number + 1, source: e })?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_prototypes(path: &Path, protos: &PrototypeSet) -> Result<()> {
    protos.validate()?;
    let mut lines = Vec::with_capacity(1 + protos.k() + protos.q());
    lines.push(PrototypeLine::Header {
        dim: protos.dim,
        k: protos.k(),
        q: protos.q(),
        metadata: protos.metadata.clone(),
    });
    for proto in &protos.base {
        lines.push(PrototypeLine::Base { class_id: proto.class_id, vector: proto.vector.clone() });
    }
    for (index, vector) in protos.novel.iter().enumerate() {
        lines.push(PrototypeLine::Novel { index, vector: vector.clone() });
    }
    write_lines(path, lines)
}

pub fn read_prototypes(path: &Path) -> Result<PrototypeSet> {
    let lines: Vec<PrototypeLine> = read_lines(path)?;
    let mut iter = lines.into_iter();
    let (dim, k, q, metadata) = match iter.next() {
        Some(PrototypeLine::Header { dim, k, q, metadata }) => (dim, k, q, metadata),
        _ => return Err(Error::invalid_record(0, format!("{}: expected prototype header line", path.display()))),
    };
    let mut base = Vec::with_capacity(k);
    let mut novel = Vec::with_capacity(q);
    for line in iter {
        match line {
            PrototypeLine::Header { .. } => {
                return Err(Error::invalid_record(base.len() + novel.len() + 1, "duplicate prototype header"))
            }
            PrototypeLine::Base { class_id, vector } => base.push(BasePrototype { class_id, vector }),
            PrototypeLine::Novel { index, vector } => {
                if index != novel.len() {
                    return Err(Error::invalid_record(
                        index,
                        format!("novel prototype lines out of order: expected index {}", novel.len()),
                    ));
                }
                novel.push(vector);
            }
        }
    }
    if base.len() != k || novel.len() != q {
        return Err(Error::invalid_record(
            0,
            format!("header declares k={k} q={q} but file holds {} base and {} novel lines", base.len(), novel.len()),
        ));
    }
    let protos = PrototypeSet { dim, base, novel, metadata };
    protos.validate()?;
    Ok(protos)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    for (index, det) in detections.iter().enumerate() {
        det.validate(index)?;
    }
    write_lines(path, detections.iter())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let detections: Vec<Detection> = read_lines(path)?;
    for (index, det) in detections.iter().enumerate() {
        det.validate(index)?;
    }
    Ok(detections)
}

pub fn write_mapping(path: &Path, mapping: &LabelMapping) -> Result<()> {
    mapping.validate()?;
    let mut lines = Vec::with_capacity(1 + mapping.entries.len());
    lines.push(MappingLine::Header { method: mapping.method });
    for (&cluster, &class_id) in &mapping.entries {
        lines.push(MappingLine::Entry { cluster, class_id });
    }
    write_lines(path, lines)
}

pub fn read_mapping(path: &Path) -> Result<LabelMapping> {
    let lines: Vec<MappingLine> = read_lines(path)?;
    let mut iter = lines.into_iter();
    let method = match iter.next() {
        Some(MappingLine::Header { method }) => method,
        _ => return Err(Error::invalid_record(0, format!("{}: expected mapping header line", path.display()))),
    };
    let mut entries = std::collections::BTreeMap::new();
    for (offset, line) in iter.enumerate() {
        match line {
            MappingLine::Header { .. } => return Err(Error::invalid_record(offset + 1, "duplicate mapping header")),
            MappingLine::Entry { cluster, class_id } => {
                if entries.insert(cluster, class_id).is_some() {
                    return Err(Error::invalid_record(offset + 1, format!("cluster {cluster} mapped twice")));
                }
            }
        }
    }
    let mapping = LabelMapping { method, entries };
    mapping.validate()?;
    Ok(mapping)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut lines = Vec::with_capacity(2 + report.per_class.len());
    lines.push(ReportLine::Summary {
        iou_thresholds: report.iou_thresholds.clone(),
        map_base: report.map_base,
        map_novel: report.map_novel,
        map_all: report.map_all,
        map_frequent: report.map_frequent,
        map_common: report.map_common,
        map_rare: report.map_rare,
    });
    for row in &report.per_class {
        lines.push(ReportLine::Class(row.clone()));
    }
    if let Some(agnostic) = &report.class_agnostic {
        lines.push(ReportLine::ClassAgnostic(agnostic.clone()));
    }
    write_lines(path, lines)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let lines: Vec<ReportLine> = read_lines(path)?;
    let mut iter = lines.into_iter();
    let mut report = match iter.next() {
        Some(ReportLine::Summary {
            iou_thresholds,
            map_base,
            map_novel,
            map_all,
            map_frequent,
            map_common,
            map_rare,
        }) => EvalReport {
            iou_thresholds,
            map_base,
            map_novel,
            map_all,
            map_frequent,
            map_common,
            map_rare,
            per_class: Vec::new(),
            class_agnostic: None,
        },
        _ => return Err(Error::invalid_record(0, format!("{}: expected report summary line", path.display()))),
    };
    for line in iter {
        match line {
            ReportLine::Summary { .. } => return Err(Error::invalid_record(0, "duplicate report summary")),
            ReportLine::Class(row) => report.per_class.push(row),
            ReportLine::ClassAgnostic(agnostic) => report.class_agnostic = Some(agnostic),
        }
    }
    Ok(report)
}

pub fn write_class_names(path: &Path, names: &[ClassName]) -> Result<()> {
    write_lines(path, names.iter())
}

pub fn read_class_names(path: &Path) -> Result<Vec<ClassName>> {
    read_lines(path)
}

pub fn write_text_embeddings(path: &Path, embeddings: &[TextEmbedding]) -> Result<()> {
    write_lines(path, embeddings.iter())
}

pub fn read_text_embeddings(path: &Path) -> Result<Vec<TextEmbedding>> {
    let embeddings: Vec<TextEmbedding> = read_lines(path)?;
    for (index, item) in embeddings.iter().enumerate() {
        if item.embedding.is_empty() {
            return Err(Error::invalid_record(index, "empty text embedding"));
        }
        if item.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("text embedding for class {}", item.class_id)));
        }
    }
    Ok(embeddings)
}
