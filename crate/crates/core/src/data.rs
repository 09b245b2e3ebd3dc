//! File formats: binary frame-feature files, detection manifests, dataset
//! manifests, and the JSON-lines records exchanged between pipeline stages.

use crate::error::{Error, Result};
use crate::proposal::{FrameFeatures, MomentSpan};
use crate::pseudoquery::Detection;
use crate::tensor::Tensor;
use crate::util::atomic_write;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

pub const FEATURE_MAGIC: &[u8; 4] = b"CRNF";

/// Writes a frame-feature file: magic, u32 frame count, u32 feature dim,
/// then f32 little-endian row-major payload.
pub fn write_features(path: &Path, frames: &FrameFeatures) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + frames.frames() * frames.dim() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(frames.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.dim() as u32).to_le_bytes());
    for &x in frames.matrix().data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    atomic_write(path, &buf)
}

/// Reads a frame-feature file back, widening to f64.
pub fn read_features(path: &Path, video_id: &str) -> Result<FrameFeatures> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::config(format!("{display}: not a frame-feature file")));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expect = 12 + t * d * 4;
    if bytes.len() != expect {
        return Err(Error::config(format!(
            "{display}: payload is {} bytes, expected {expect} for {t}x{d}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FrameFeatures::new(video_id, Tensor::matrix(t, d, data)?)
}

/// A proposed span for one video (JSON-lines payload).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpanRecord {
    pub video_id: String,
    #[serde(flatten)]
    pub span: MomentSpan,
}

/// A generated pseudo-query with its source span (JSON-lines payload).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoQueryRecord {
    pub video_id: String,
    #[serde(flatten)]
    pub span: MomentSpan,
    pub tokens: Vec<String>,
}

/// A held-out evaluation annotation: natural-language query plus target span.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalAnnotation {
    pub query_text: String,
    #[serde(flatten)]
    pub span: MomentSpan,
}

/// One video's files and annotations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub features_path: String,
    pub detections_path: String,
    #[serde(default)]
    pub eval_annotations: Vec<EvalAnnotation>,
}

/// Dataset manifest: provenance config plus the video list. Paths are
/// relative to the manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: serde_json::Value,
    pub videos: Vec<VideoEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let display = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::json(&display, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok((manifest, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        atomic_write(path, &json)
    }
}

/// Serializes records as JSON lines under a leading config-header line.
pub fn write_jsonl<T: Serialize>(
    path: &Path,
    config: &serde_json::Value,
    records: &[T],
) -> Result<()> {
    let display = path.display().to_string();
    let mut out = String::new();
    let header = serde_json::json!({ "config": config });
    out.push_str(&serde_json::to_string(&header).map_err(|e| Error::json(&display, e))?);
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::json(&display, e))?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Reads JSON-lines records, skipping config-header lines and blanks.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
            if v.get("config").is_some() && v.get("video_id").is_none() {
                continue;
            }
        }
        let record: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: format!("{display}: {e}"),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    write_jsonl(path, &serde_json::Value::Null, detections)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    read_jsonl(path)
}
