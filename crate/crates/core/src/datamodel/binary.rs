//! Binary container for box-feature and box-embedding datasets.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! header (17 bytes):
//!   magic      4 bytes   "NCDF" for features, "NCDE" for embeddings
//!   version    u8        currently 1
//!   dim        u32       vector length D, constant for the whole file
//!   count      u64       number of records
//! record (40 + 4*D bytes):
//!   image_id         u64
//!   box x, y, w, h   4 x f32
//!   source           u8    0 = ground truth, 1 = proposal
//!   base_pred_flag   u8    0 = absent, 1 = background, 2 = base class
//!   base_pred_class  u32   class id, 0 unless flag = 2
//!   objectness_flag  u8    0 = absent, 1 = present
//!   objectness       f32   0.0 when absent
//!   gt_flag          u8    0 = absent, 1 = present
//!   gt_class         u32   0 when absent
//!   feature          D x f32
//! ```
//!
//! Optional fields keep their slot in every record so that the record size is
//! constant; presence is carried by the flag bytes, never by sentinel values.
//! Floats are 32-bit on disk and widened to f64 inside the numeric kernels.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::datamodel::{BasePrediction, BoxGeometry, FeatureRecord, FeatureSource};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"NCDF";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"NCDE";
pub const FORMAT_VERSION: u8 = 1;

const HEADER_LEN: usize = 17;
const FIXED_RECORD_LEN: usize = 40;

fn record_len(dim: usize) -> usize {
    FIXED_RECORD_LEN + 4 * dim
}

/// Writes a feature dataset ("NCDF").
pub fn write_feature_file(path: &Path, dim: usize, records: &[FeatureRecord]) -> Result<()> {
    write_file(path, FEATURE_MAGIC, dim, records)
}

/// Writes an embedding dataset ("NCDE"); records carry embedding vectors in
/// the feature slot.
pub fn write_embedding_file(path: &Path, dim: usize, records: &[FeatureRecord]) -> Result<()> {
    write_file(path, EMBEDDING_MAGIC, dim, records)
}

/// Reads a feature dataset ("NCDF"), returning the vector length and records.
pub fn read_feature_file(path: &Path) -> Result<(usize, Vec<FeatureRecord>)> {
    read_file(path, FEATURE_MAGIC)
}

/// Reads an embedding dataset ("NCDE").
pub fn read_embedding_file(path: &Path) -> Result<(usize, Vec<FeatureRecord>)> {
    read_file(path, EMBEDDING_MAGIC)
}

fn write_file(path: &Path, magic: [u8; 4], dim: usize, records: &[FeatureRecord]) -> Result<()> {
    if dim == 0 {
        return Err(Error::invalid_config("dataset dimension must be positive"));
    }
    let dim_u32 =
        u32::try_from(dim).map_err(|_| Error::invalid_config(format!("dimension {dim} exceeds u32::MAX")))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut buf = Vec::with_capacity(record_len(dim));

    out.write_all(&magic).map_err(|e| Error::io(path, e))?;
    out.write_all(&[FORMAT_VERSION]).map_err(|e| Error::io(path, e))?;
    out.write_all(&dim_u32.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    out.write_all(&(records.len() as u64).to_le_bytes()).map_err(|e| Error::io(path, e))?;

    for (index, record) in records.iter().enumerate() {
        record.validate(index)?;
        if record.feature.len() != dim {
            return Err(Error::dim_mismatch(format!("record {index}"), dim, record.feature.len()));
        }
        buf.clear();
        encode_record(record, &mut buf);
        debug_assert_eq!(buf.len(), record_len(dim));
        out.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn encode_record(record: &FeatureRecord, buf: &mut Vec<u8>) {
    buf.extend_from_slice(&record.image_id.to_le_bytes());
    for v in [record.bbox.x, record.bbox.y, record.bbox.w, record.bbox.h] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(match record.source {
        FeatureSource::Gt => 0,
        FeatureSource::Rpn => 1,
    });
    let (flag, class_id) = match record.base_pred {
        None => (0u8, 0u32),
        Some(BasePrediction::Background) => (1, 0),
        Some(BasePrediction::BaseClass { class_id }) => (2, class_id),
    };
    buf.push(flag);
    buf.extend_from_slice(&class_id.to_le_bytes());
    buf.push(u8::from(record.objectness.is_some()));
    buf.extend_from_slice(&record.objectness.unwrap_or(0.0).to_le_bytes());
    buf.push(u8::from(record.gt_class.is_some()));
    buf.extend_from_slice(&record.gt_class.unwrap_or(0).to_le_bytes());
    for v in &record.feature {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_file(path: &Path, magic: [u8; 4]) -> Result<(usize, Vec<FeatureRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);

    let mut header = [0u8; HEADER_LEN];
    read_exact_or(&mut input, &mut header, path, "header")?;
    let found_magic: [u8; 4] = header[0..4].try_into().unwrap();
    if found_magic != magic {
        return Err(Error::BadMagic { path: path.to_path_buf(), found: found_magic, expected: magic });
    }
    let version = header[4];
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion { path: path.to_path_buf(), found: version, expected: FORMAT_VERSION });
    }
    let dim = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[9..17].try_into().unwrap());
    if dim == 0 {
        return Err(Error::Truncated { path: path.to_path_buf(), detail: "header declares dimension 0".into() });
    }
    let count = usize::try_from(count).map_err(|_| Error::Truncated {
        path: path.to_path_buf(),
        detail: format!("record count {count} exceeds addressable memory"),
    })?;

    let mut records = Vec::with_capacity(count.min(1 << 20));
    let mut buf = vec![0u8; record_len(dim)];
    for index in 0..count {
        read_exact_or(&mut input, &mut buf, path, &format!("record {index} of {count}"))?;
        let record = decode_record(&buf, dim, index)?;
        record.validate(index)?;
        records.push(record);
    }

    let mut probe = [0u8; 1];
    match input.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            let extra = 1 + count_remaining(&mut input);
            return Err(Error::TrailingData { path: path.to_path_buf(), extra });
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok((dim, records))
}

fn decode_record(buf: &[u8], dim: usize, index: usize) -> Result<FeatureRecord> {
    let take_f32 = |offset: usize| f32::from_le_bytes(buf[offset..offset + 4].try_into().unwrap());
    let take_u32 = |offset: usize| u32::from_le_bytes(buf[offset..offset + 4].try_into().unwrap());

    let image_id = u64::from_le_bytes(buf[0..8].try_into().unwrap());
    let bbox = BoxGeometry::new(take_f32(8), take_f32(12), take_f32(16), take_f32(20));
    let source = match buf[24] {
        0 => FeatureSource::Gt,
        1 => FeatureSource::Rpn,
        other => return Err(Error::invalid_record(index, format!("unknown source byte {other}"))),
    };
    let base_pred = match buf[25] {
        0 => None,
        1 => Some(BasePrediction::Background),
        2 => Some(BasePrediction::BaseClass { class_id: take_u32(26) }),
        other => return Err(Error::invalid_record(index, format!("unknown base_pred flag {other}"))),
    };
    let objectness = match buf[30] {
        0 => None,
        1 => Some(take_f32(31)),
        other => return Err(Error::invalid_record(index, format!("unknown objectness flag {other}"))),
    };
    let gt_class = match buf[35] {
        0 => None,
        1 => Some(take_u32(36)),
        other => return Err(Error::invalid_record(index, format!("unknown gt_class flag {other}"))),
    };
    let mut feature = Vec::with_capacity(dim);
    for i in 0..dim {
        feature.push(take_f32(FIXED_RECORD_LEN + 4 * i));
    }
    Ok(FeatureRecord { image_id, bbox, source, base_pred, objectness, gt_class, feature })
}

fn read_exact_or<R: Read>(input: &mut R, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    path: path.to_path_buf(),
                    detail: format!("{what}: expected {} bytes, got {filled}", buf.len()),
                })
            }
            Ok(n) => filled += n,
            Err(ref e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    Ok(())
}

fn count_remaining<R: Read>(input: &mut R) -> u64 {
    let mut sink = [0u8; 4096];
    let mut total = 0u64;
    while let Ok(n) = input.read(&mut sink) {
        if n == 0 {
            break;
        }
        total += n as u64;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record(dim: usize, image_id: u64) -> FeatureRecord {
        FeatureRecord {
            image_id,
            bbox: BoxGeometry::new(1.5, 2.5, 10.0, 20.0),
            source: FeatureSource::Rpn,
            base_pred: Some(BasePrediction::BaseClass { class_id: 3 }),
            objectness: Some(0.75),
            gt_class: None,
            feature: (0..dim).map(|i| i as f32 * 0.5 - 1.0).collect(),
        }
    }

    #[test]
    fn round_trip_preserves_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.ncdf");
        let records = vec![
            sample_record(6, 1),
            FeatureRecord {
                image_id: 2,
                bbox: BoxGeometry::new(0.0, 0.0, 1.0, 1.0),
                source: FeatureSource::Gt,
                base_pred: None,
                objectness: None,
                gt_class: Some(7),
                feature: vec![0.1, -0.2, 0.3, -0.4, 0.5, -0.6],
            },
            FeatureRecord {
                image_id: u64::MAX,
                bbox: BoxGeometry::new(-5.0, -6.0, 0.5, 0.25),
                source: FeatureSource::Rpn,
                base_pred: Some(BasePrediction::Background),
                objectness: Some(0.0),
                gt_class: Some(0),
                feature: vec![f32::MIN_POSITIVE, 1.0e30, -1.0e-30, 0.0, 42.0, -42.0],
            },
        ];
        write_feature_file(&path, 6, &records).unwrap();
        let (dim, back) = read_feature_file(&path).unwrap();
        assert_eq!(dim, 6);
        assert_eq!(back, records);
    }

    #[test]
    fn file_size_is_header_plus_count_times_record_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.ncdf");
        let dim = 256;
        let records: Vec<_> = (0..100).map(|i| sample_record(dim, i)).collect();
        write_feature_file(&path, dim, &records).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 17 + 100 * (40 + 4 * dim as u64));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.ncdf");
        write_feature_file(&path, 4, &[sample_record(4, 1)]).unwrap();
        let err = read_embedding_file(&path).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }), "{err}");
    }

    #[test]
    fn bad_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.ncdf");
        write_feature_file(&path, 4, &[sample_record(4, 1)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_feature_file(&path).unwrap_err();
        assert!(matches!(err, Error::BadVersion { found: 9, .. }), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.ncdf");
        write_feature_file(&path, 4, &[sample_record(4, 1), sample_record(4, 2)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = read_feature_file(&path).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.ncdf");
        write_feature_file(&path, 4, &[sample_record(4, 1)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_feature_file(&path).unwrap_err();
        assert!(matches!(err, Error::TrailingData { extra: 3, .. }), "{err}");
    }

    #[test]
    fn non_finite_feature_is_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.ncdf");
        write_feature_file(&path, 4, &[sample_record(4, 1)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let feature_offset = 17 + 40;
        bytes[feature_offset..feature_offset + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_feature_file(&path).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn gt_record_without_class_is_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.ncdf");
        let mut record = sample_record(4, 1);
        record.source = FeatureSource::Gt;
        record.gt_class = None;
        let err = write_feature_file(&path, 4, &[record]).unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { .. }), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.ncdf");
        let err = write_feature_file(&path, 8, &[sample_record(4, 1)]).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { .. }), "{err}");
    }
}
