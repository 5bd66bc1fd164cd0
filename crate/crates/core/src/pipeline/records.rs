//! JSON-lines persistence of per-frame results. The first line carries the
//! run configuration, every following line one frame.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DetectConfig, PipelineError};

pub const RECORDS_FORMAT: &str = "vigil-records/1";

/// Run configuration echoed at the top of every records file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub format: String,
    /// Sequence (video) name the frames came from.
    pub sequence: String,
    pub netdef: String,
    pub weights: String,
    pub names: String,
    /// SHA-256 of the weights file.
    pub weights_digest: String,
    pub config: DetectConfig,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    run: RunHeader,
}

/// One persisted detection: box corners in source-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDetection {
    pub class_id: usize,
    pub class_name: String,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// Everything produced for one frame. Detections are sorted by confidence,
/// highest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub source: String,
    pub input_hash: String,
    pub detections: Vec<RecordDetection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Wall time; kept out of the records file so reruns are byte-identical.
    #[serde(skip)]
    pub latency_ms: f64,
}

#[derive(Debug)]
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RecordWriter {
    pub fn create(path: &Path, header: &RunHeader) -> Result<Self, PipelineError> {
        let file = File::create(path).map_err(|e| PipelineError::io(path, e))?;
        let mut writer = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        writer.line(&HeaderLine { run: header.clone() })?;
        Ok(writer)
    }

    pub fn write(&mut self, record: &FrameRecord) -> Result<(), PipelineError> {
        self.line(record)
    }

    fn line(&mut self, value: &impl Serialize) -> Result<(), PipelineError> {
        let text = serde_json::to_string(value).map_err(|e| PipelineError::Output {
            path: self.path.clone(),
            detail: e.to_string(),
        })?;
        writeln!(self.out, "{text}").map_err(|e| PipelineError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<(), PipelineError> {
        self.out.flush().map_err(|e| PipelineError::io(&self.path, e))
    }
}

/// Contents of a records file. Lines that fail to parse are counted in
/// `malformed` and otherwise ignored.
#[derive(Debug, Clone, Default)]
pub struct RecordFile {
    pub header: Option<RunHeader>,
    pub records: Vec<FrameRecord>,
    pub malformed: usize,
    pub lines: usize,
}

pub fn read_records(path: &Path) -> Result<RecordFile, PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = RecordFile::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.lines += 1;
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(&line) {
                out.header = Some(h.run);
                continue;
            }
        }
        match serde_json::from_str::<FrameRecord>(&line) {
            Ok(r) => out.records.push(r),
            Err(e) => {
                log::warn!("{}:{}: skipping malformed record: {e}", path.display(), i + 1);
                out.malformed += 1;
            }
        }
    }
    Ok(out)
}
