//! JSONL dataset ingestion and atomic file output.
//!
//! Loaders stream line by line, validate type invariants as they go, and
//! anchor every error to a 1-based line number. Writers go through a
//! temp-file-plus-rename so partially written outputs are never observable
//! at the destination path.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{
    CameraIntrinsics, Frame, IntrinsicsError, Prediction, Skeleton, JOINT_COUNT,
};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: expected {JOINT_COUNT} joints, found {found}")]
    JointCount { line: usize, found: usize },
    #[error("line {line}: non-finite joint coordinate")]
    NonFinite { line: usize },
    #[error("line {line}: duplicate frame_id {frame_id:?}")]
    DuplicateFrameId { line: usize, frame_id: String },
    #[error("line {line}: invalid intrinsics: {source}")]
    InvalidIntrinsics {
        line: usize,
        #[source]
        source: IntrinsicsError,
    },
    #[error("line {line}: frame {frame_id:?} must carry sequence_id and time_index together")]
    SequenceMeta { line: usize, frame_id: String },
    #[error("line {line}: time_index not strictly increasing within sequence {sequence_id:?}")]
    NonMonotonicTime { line: usize, sequence_id: String },
}

fn io_err(path: &Path, source: std::io::Error) -> LoadError {
    LoadError::Io { path: path.display().to_string(), source }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    frame_id: String,
    joints: Vec<[f64; 3]>,
    subject_id: String,
    #[serde(default)]
    object_id: Option<String>,
    #[serde(default)]
    intrinsics: Option<CameraIntrinsics>,
    #[serde(default)]
    sequence_id: Option<String>,
    #[serde(default)]
    time_index: Option<i64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrediction {
    frame_id: String,
    joints: Vec<[f64; 3]>,
}

fn skeleton_from_raw(joints: Vec<[f64; 3]>, line: usize) -> Result<Skeleton, LoadError> {
    if joints.len() != JOINT_COUNT {
        return Err(LoadError::JointCount { line, found: joints.len() });
    }
    let mut arr = [[0.0; 3]; JOINT_COUNT];
    arr.copy_from_slice(&joints);
    Skeleton::try_new(arr).map_err(|_| LoadError::NonFinite { line })
}

/// Iterates non-empty lines of a file with 1-based line numbers.
fn for_each_line<T: DeserializeOwned>(
    path: &Path,
    mut visit: impl FnMut(usize, T) -> Result<(), LoadError>,
) -> Result<(), LoadError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| io_err(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&text)
            .map_err(|e| LoadError::Malformed { line: line_no, message: e.to_string() })?;
        visit(line_no, record)?;
    }
    Ok(())
}

/// Loads a frames JSONL file, enforcing per-line and dataset-level
/// invariants: unique frame ids, valid intrinsics, sequence metadata
/// carried as a pair, and time_index strictly increasing per sequence.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Frame>, LoadError> {
    let path = path.as_ref();
    let mut frames = Vec::new();
    let mut seen_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut last_time: BTreeMap<String, i64> = BTreeMap::new();
    for_each_line(path, |line, raw: RawFrame| {
        if seen_ids.insert(raw.frame_id.clone(), line).is_some() {
            return Err(LoadError::DuplicateFrameId { line, frame_id: raw.frame_id });
        }
        let skeleton = skeleton_from_raw(raw.joints, line)?;
        if let Some(intr) = &raw.intrinsics {
            intr.validate().map_err(|source| LoadError::InvalidIntrinsics { line, source })?;
        }
        match (&raw.sequence_id, raw.time_index) {
            (Some(seq), Some(t)) => {
                if let Some(prev) = last_time.insert(seq.clone(), t) {
                    if t <= prev {
                        return Err(LoadError::NonMonotonicTime { line, sequence_id: seq.clone() });
                    }
                }
            }
            (None, None) => {}
            _ => return Err(LoadError::SequenceMeta { line, frame_id: raw.frame_id }),
        }
        frames.push(Frame {
            frame_id: raw.frame_id,
            skeleton,
            subject_id: raw.subject_id,
            object_id: raw.object_id,
            intrinsics: raw.intrinsics,
            sequence_id: raw.sequence_id,
            time_index: raw.time_index,
        });
        Ok(())
    })?;
    Ok(frames)
}

/// Loads a predictions JSONL file. Frame ids need not match any dataset;
/// alignment is checked by the operations that consume predictions.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>, LoadError> {
    let path = path.as_ref();
    let mut preds = Vec::new();
    let mut seen_ids: BTreeMap<String, usize> = BTreeMap::new();
    for_each_line(path, |line, raw: RawPrediction| {
        if seen_ids.insert(raw.frame_id.clone(), line).is_some() {
            return Err(LoadError::DuplicateFrameId { line, frame_id: raw.frame_id });
        }
        let skeleton = skeleton_from_raw(raw.joints, line)?;
        preds.push(Prediction { frame_id: raw.frame_id, skeleton });
        Ok(())
    })?;
    Ok(preds)
}

/// Writes bytes to `path` atomically: the content lands under a temporary
/// name in the destination directory and is renamed into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> std::io::Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Serializes items as one JSON object per line and writes them atomically.
pub fn write_jsonl<T: Serialize>(
    path: impl AsRef<Path>,
    items: impl IntoIterator<Item = T>,
) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Serializes one value as pretty JSON with a trailing newline, atomically.
pub fn write_json_pretty<T: Serialize>(path: impl AsRef<Path>, value: &T) -> std::io::Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}

/// Reads a whole-file JSON value.
pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, LoadError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| LoadError::Malformed { line: e.line().max(1), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joints_json(n: usize) -> String {
        let joint = "[1.0,2.0,400.0]";
        format!("[{}]", vec![joint; n].join(","))
    }

    fn frame_line(id: &str) -> String {
        format!(
            "{{\"frame_id\":\"{id}\",\"joints\":{},\"subject_id\":\"s1\",\"object_id\":null,\"intrinsics\":null,\"sequence_id\":null,\"time_index\":null}}",
            joints_json(JOINT_COUNT)
        )
    }

    fn write_tmp(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn round_trip_save_load() {
        let frames = vec![
            serde_json::from_str::<Frame>(&frame_line("a")).unwrap(),
            serde_json::from_str::<Frame>(&frame_line("b")).unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        write_jsonl(&path, &frames).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, frames);
    }

    #[test]
    fn duplicate_frame_id_rejected_with_line() {
        let f = write_tmp(&[frame_line("a"), frame_line("a")]);
        match load_dataset(f.path()) {
            Err(LoadError::DuplicateFrameId { line, frame_id }) => {
                assert_eq!(line, 2);
                assert_eq!(frame_id, "a");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_joint_count_rejected() {
        let line = format!(
            "{{\"frame_id\":\"a\",\"joints\":{},\"subject_id\":\"s1\"}}",
            joints_json(20)
        );
        let f = write_tmp(&[line]);
        match load_dataset(f.path()) {
            Err(LoadError::JointCount { line, found }) => {
                assert_eq!(line, 1);
                assert_eq!(found, 20);
            }
            other => panic!("expected joint count error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_carries_line_number() {
        let f = write_tmp(&[frame_line("a"), "{not json".to_string()]);
        match load_dataset(f.path()) {
            Err(LoadError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn sequence_meta_must_come_paired_and_increase() {
        let mut good = serde_json::from_str::<Frame>(&frame_line("a")).unwrap();
        good.sequence_id = Some("q".into());
        good.time_index = Some(3);
        let mut later = good.clone();
        later.frame_id = "b".into();
        later.time_index = Some(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        write_jsonl(&path, [&good, &later]).unwrap();
        match load_dataset(&path) {
            Err(LoadError::NonMonotonicTime { line, sequence_id }) => {
                assert_eq!(line, 2);
                assert_eq!(sequence_id, "q");
            }
            other => panic!("expected monotonicity error, got {other:?}"),
        }

        let mut unpaired = good.clone();
        unpaired.time_index = None;
        write_jsonl(&path, [&unpaired]).unwrap();
        assert!(matches!(load_dataset(&path), Err(LoadError::SequenceMeta { line: 1, .. })));
    }

    #[test]
    fn predictions_load_without_dataset_alignment() {
        let line = format!("{{\"frame_id\":\"zzz\",\"joints\":{}}}", joints_json(JOINT_COUNT));
        let f = write_tmp(&[line]);
        let preds = load_predictions(f.path()).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].frame_id, "zzz");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        // No stray temp files left behind.
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("out.txt")]);
    }

    #[test]
    fn task_scale_file_loads_linearly() {
        // Mirrors the largest single-task training split this is meant to
        // ingest: 175951 lines should stream through without issue.
        let mut f = tempfile::NamedTempFile::new().unwrap();
        {
            let mut w = std::io::BufWriter::new(&mut f);
            let joints = joints_json(JOINT_COUNT);
            for i in 0..175951usize {
                writeln!(
                    w,
                    "{{\"frame_id\":\"t{i}\",\"joints\":{joints},\"subject_id\":\"s1\"}}"
                )
                .unwrap();
            }
        }
        f.flush().unwrap();
        let frames = load_dataset(f.path()).unwrap();
        assert_eq!(frames.len(), 175951);
    }
}
