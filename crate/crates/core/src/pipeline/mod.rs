//! Frame-sequence processing. Frames are ingested from a directory of
//! lossless images and normalized to the network input (the analysis stage),
//! then run through the detector with results persisted per frame (the
//! detection stage).

mod annotate;
mod records;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use image::RgbImage;
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decode::{self, clamp_to_image, convert_box, BoxFormat, ClassNames, DecodeError};
use crate::engine::{self, CachePlan, EngineError};
use crate::netdef::{NetDefError, NetworkGraph};
use crate::tensor::Tensor;

pub use annotate::{annotate, class_color};
pub use records::{read_records, FrameRecord, RecordDetection, RecordFile, RecordWriter, RunHeader, RECORDS_FORMAT};

/// Extensions treated as frame images.
pub const FRAME_EXTENSIONS: &[&str] = &["png", "ppm", "pgm", "pnm", "pbm", "bmp"];

const LETTERBOX_FILL: f32 = 0.5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("network input {width}x{height} must be a positive multiple of 32")]
    InputSize { width: usize, height: usize },
    #[error("unknown preprocess mode {0:?}")]
    Mode(String),
    #[error("record line {line}: {detail}")]
    Record { line: usize, detail: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Decoding(#[from] DecodeError),
    #[error(transparent)]
    Network(#[from] NetDefError),
    #[error("writing {path}: {detail}")]
    Output { path: PathBuf, detail: String },
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One decoded RGB image from a sequence.
#[derive(Debug, Clone)]
pub struct Frame {
    pub frame_id: u64,
    /// File name relative to the sequence directory.
    pub source: String,
    pub image: RgbImage,
    /// SHA-256 of the file bytes (of the raw RGB buffer for in-memory frames).
    pub input_hash: String,
}

impl Frame {
    pub fn from_image(frame_id: u64, source: impl Into<String>, image: RgbImage) -> Self {
        let input_hash = hex::encode(Sha256::digest(image.as_raw()));
        Self {
            frame_id,
            source: source.into(),
            image,
            input_hash,
        }
    }

    /// `(width, height)` of the source image.
    pub fn original_size(&self) -> (u32, u32) {
        self.image.dimensions()
    }

    /// `(3, H, W)` tensor with values scaled to `[0, 1]`.
    pub fn pixels(&self) -> Tensor {
        let (w, h) = self.image.dimensions();
        let raw = self.image.as_raw();
        Tensor::from_fn3(3, h as usize, w as usize, |c, y, x| {
            raw[(y * w as usize + x) * 3 + c] as f32 / 255.0
        })
        .expect("image dimensions are non-zero")
    }
}

/// Reads and decodes one image file; grayscale inputs are replicated to RGB.
pub fn load_frame(path: &Path, frame_id: u64) -> Result<Frame, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let image = image::load_from_memory(&bytes).map_err(|e| PipelineError::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let source = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(Frame {
        frame_id,
        source,
        image: image.to_rgb8(),
        input_hash: hex::encode(Sha256::digest(&bytes)),
    })
}

/// A file that could not be turned into a frame.
#[derive(Debug, Clone)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Lazily decodes frame files in order, assigning consecutive ids to the
/// ones that decode.
#[derive(Debug)]
pub struct FrameStream {
    files: std::vec::IntoIter<PathBuf>,
    next_id: u64,
    skipped: Vec<SkippedFile>,
}

impl FrameStream {
    pub fn from_files(files: Vec<PathBuf>) -> Self {
        Self {
            files: files.into_iter(),
            next_id: 0,
            skipped: Vec::new(),
        }
    }

    pub fn skipped(&self) -> &[SkippedFile] {
        &self.skipped
    }
}

impl Iterator for FrameStream {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        for path in self.files.by_ref() {
            match load_frame(&path, self.next_id) {
                Ok(frame) => {
                    self.next_id += 1;
                    return Some(frame);
                }
                Err(e) => {
                    warn!("skipping {}: {e}", path.display());
                    self.skipped.push(SkippedFile {
                        path,
                        reason: e.to_string(),
                    });
                }
            }
        }
        None
    }
}

/// Frame files of `dir` (by [`FRAME_EXTENSIONS`]) in lexicographic order.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        let is_frame = path.is_file()
            && path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_frame {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Streams the frames of a directory. An empty directory yields no frames.
pub fn ingest_frames(dir: &Path) -> Result<FrameStream, PipelineError> {
    Ok(FrameStream::from_files(list_frame_files(dir)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessMode {
    /// Bilinear resize to the target, ignoring aspect ratio.
    #[default]
    Stretch,
    /// Aspect-preserving resize centered on a gray canvas.
    Letterbox,
}

impl fmt::Display for PreprocessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stretch => "stretch",
            Self::Letterbox => "letterbox",
        })
    }
}

impl FromStr for PreprocessMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stretch" => Ok(Self::Stretch),
            "letterbox" => Ok(Self::Letterbox),
            other => Err(PipelineError::Mode(other.to_string())),
        }
    }
}

/// Placement of the source image inside the network input, used to map
/// boxes back to source pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleInfo {
    pub mode: PreprocessMode,
    /// `(width, height)` of the source image.
    pub original: (u32, u32),
    /// `(width, height)` of the network input.
    pub target: (usize, usize),
    /// `(width, height)` of the resized content inside the target.
    pub content: (usize, usize),
    /// Top-left of the content inside the target.
    pub offset: (usize, usize),
}

impl ScaleInfo {
    /// Maps a box in network-input pixels to source-image pixels (corner form).
    pub fn to_original(&self, bbox: &decode::BBox) -> decode::BBox {
        let target = (self.target.0 as f64, self.target.1 as f64);
        let [x0, y0, x1, y1] = convert_box(bbox, BoxFormat::CornerPx, target).coords;
        let sx = self.original.0 as f64 / self.content.0 as f64;
        let sy = self.original.1 as f64 / self.content.1 as f64;
        let (ox, oy) = (self.offset.0 as f64, self.offset.1 as f64);
        decode::BBox {
            format: BoxFormat::CornerPx,
            coords: [(x0 - ox) * sx, (y0 - oy) * sy, (x1 - ox) * sx, (y1 - oy) * sy],
        }
    }
}

fn check_target((w, h): (usize, usize)) -> Result<(), PipelineError> {
    if w == 0 || h == 0 || !w.is_multiple_of(32) || !h.is_multiple_of(32) {
        return Err(PipelineError::InputSize { width: w, height: h });
    }
    Ok(())
}

/// Resizes `frame` to `target = (width, height)` with values in `[0, 1]`.
pub fn preprocess(frame: &Frame, target: (usize, usize), mode: PreprocessMode) -> Result<(Tensor, ScaleInfo), PipelineError> {
    check_target(target)?;
    let (sw, sh) = frame.original_size();
    let (sw, sh) = (sw as usize, sh as usize);
    let (tw, th) = target;
    let (content, offset) = match mode {
        PreprocessMode::Stretch => ((tw, th), (0, 0)),
        PreprocessMode::Letterbox => {
            let scale = (tw as f64 / sw as f64).min(th as f64 / sh as f64);
            let cw = ((sw as f64 * scale).round() as usize).clamp(1, tw);
            let ch = ((sh as f64 * scale).round() as usize).clamp(1, th);
            ((cw, ch), ((tw - cw) / 2, (th - ch) / 2))
        }
    };
    let pixels = frame.pixels();
    let mut out = vec![LETTERBOX_FILL; 3 * tw * th];
    for (c, plane) in pixels.data().chunks_exact(sw * sh).enumerate() {
        let resized = resize_bilinear(plane, (sw, sh), content);
        let dst = &mut out[c * tw * th..(c + 1) * tw * th];
        for (y, row) in resized.chunks_exact(content.0).enumerate() {
            let start = (y + offset.1) * tw + offset.0;
            dst[start..start + content.0].copy_from_slice(row);
        }
    }
    let info = ScaleInfo {
        mode,
        original: frame.original_size(),
        target,
        content,
        offset,
    };
    Ok((Tensor::new(vec![3, th, tw], out).expect("sized above"), info))
}

/// Half-pixel-centered bilinear resampling of one plane.
fn resize_bilinear(src: &[f32], (sw, sh): (usize, usize), (dw, dh): (usize, usize)) -> Vec<f32> {
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    let taps = |dst_len: usize, src_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = src_len as f64 / dst_len as f64;
        (0..dst_len)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(src_len - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let xs = taps(dw, sw);
    let ys = taps(dh, sh);
    let mut out = Vec::with_capacity(dw * dh);
    for &(y0, y1, fy) in &ys {
        let (r0, r1) = (&src[y0 * sw..(y0 + 1) * sw], &src[y1 * sw..(y1 + 1) * sw]);
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
        }
    }
    out
}

/// Detection settings; defaults follow the reference configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Square network input side, a multiple of 32.
    pub input_size: usize,
    pub mode: PreprocessMode,
    /// Scale normalized boxes to a fixed 0..256 range instead of the source image.
    pub compat_256_scale: bool,
    pub workers: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: decode::DEFAULT_SCORE_THRESHOLD,
            nms_threshold: decode::DEFAULT_NMS_THRESHOLD,
            input_size: 416,
            mode: PreprocessMode::Stretch,
            compat_256_scale: false,
            workers: 1,
        }
    }
}

/// A graph prepared for repeated per-frame detection.
#[derive(Debug, Clone)]
pub struct Detector {
    graph: NetworkGraph,
    plan: CachePlan,
    names: ClassNames,
    config: DetectConfig,
}

impl Detector {
    /// Resizes `graph` to the configured input and precomputes its cache plan.
    pub fn new(graph: &NetworkGraph, names: ClassNames, config: DetectConfig) -> Result<Self, PipelineError> {
        let size = config.input_size;
        check_target((size, size))?;
        for t in [config.score_threshold, config.nms_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return Err(DecodeError::Threshold(t).into());
            }
        }
        let input = graph.input_shape();
        let graph = if (input.height, input.width) == (size, size) {
            graph.clone()
        } else {
            graph.with_input_size(size, size)?
        };
        let plan = engine::activation_cache_plan(&graph);
        Ok(Self {
            graph,
            plan,
            names,
            config,
        })
    }

    pub fn config(&self) -> &DetectConfig {
        &self.config
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    /// Runs preprocess, forward, decode, threshold and suppression on one
    /// frame, returning boxes in source-image corner pixels.
    pub fn detect(&self, frame: &Frame) -> Result<Vec<RecordDetection>, PipelineError> {
        let size = self.config.input_size;
        let (input, info) = preprocess(frame, (size, size), self.config.mode)?;
        let outputs = engine::forward_with_plan(&self.graph, &input, Some(&self.plan))?;
        let mut candidates = Vec::new();
        let mut dropped = 0;
        for out in &outputs {
            let head = decode::decode_head(out, &out.scale.anchors)?;
            candidates.extend(head.candidates);
            dropped += head.dropped_nonfinite;
        }
        if dropped > 0 {
            warn!("frame {}: dropped {dropped} non-finite predictions", frame.frame_id);
        }
        let dets = decode::confidence_filter(&candidates, self.config.score_threshold, &self.names, Some(frame.frame_id))?;
        let kept = decode::nms(dets, self.config.nms_threshold)?;
        Ok(kept
            .into_iter()
            .map(|d| {
                let bbox = if self.config.compat_256_scale {
                    clamp_to_image(&d.bbox, (256.0, 256.0))
                } else {
                    let net_px = convert_box(&d.bbox, BoxFormat::CornerPx, (size as f64, size as f64));
                    let (w, h) = info.original;
                    clamp_to_image(&info.to_original(&net_px), (w as f64, h as f64))
                };
                RecordDetection {
                    class_id: d.class_id,
                    class_name: d.class_name,
                    confidence: d.confidence,
                    bbox: bbox.coords,
                }
            })
            .collect())
    }

    /// [`Detector::detect`] wrapped into a record with timing; failures are
    /// captured in the record's `error` field.
    pub fn process(&self, frame: &Frame) -> FrameRecord {
        let start = Instant::now();
        let result = self.detect(frame);
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let (detections, error) = match result {
            Ok(d) => (d, None),
            Err(e) => {
                warn!("frame {} ({}): {e}", frame.frame_id, frame.source);
                (Vec::new(), Some(e.to_string()))
            }
        };
        FrameRecord {
            frame_id: frame.frame_id,
            source: frame.source.clone(),
            input_hash: frame.input_hash.clone(),
            detections,
            error,
            latency_ms,
        }
    }
}

/// Per-frame wall time summary.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LatencyStats {
    pub frames: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Self {
            frames: n,
            mean_ms: mean,
            median_ms: median,
            max_ms: sorted[n - 1],
            fps: if mean > 0.0 { 1e3 / mean } else { f64::INFINITY },
        }
    }
}

impl fmt::Display for LatencyStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} frames, latency mean {:.2} ms, median {:.2} ms, max {:.2} ms, {:.2} FPS",
            self.frames, self.mean_ms, self.median_ms, self.max_ms, self.fps
        )
    }
}

/// Outcome of [`run_sequence`].
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub records: Vec<FrameRecord>,
    pub failed: usize,
    pub latency: LatencyStats,
}

impl RunSummary {
    pub fn succeeded(&self) -> usize {
        self.records.len() - self.failed
    }
}

/// Where [`run_sequence`] puts its artifacts.
#[derive(Debug, Default)]
pub struct RunOutputs<'a> {
    pub records: Option<&'a mut RecordWriter>,
    /// Directory for annotated copies of each frame, named like the input.
    pub annotated_dir: Option<&'a Path>,
}

/// Output name for an annotated frame. Formats that cannot hold RGB get a
/// `.png` suffix.
pub fn annotated_name(source: &str) -> String {
    let ext = Path::new(source).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png" | "bmp" | "ppm") => source.to_string(),
        _ => format!("{source}.png"),
    }
}

/// Processes `frames` in order. With `workers > 1` frames are handled in
/// parallel batches; records are still emitted in frame order.
pub fn run_sequence(
    detector: &Detector,
    frames: impl Iterator<Item = Frame>,
    mut outputs: RunOutputs<'_>,
) -> Result<RunSummary, PipelineError> {
    let workers = detector.config.workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Output {
            path: PathBuf::new(),
            detail: format!("worker pool: {e}"),
        })?;
    if let Some(dir) = outputs.annotated_dir {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }

    let mut summary = RunSummary::default();
    let mut frames = frames.peekable();
    let batch_len = if workers == 1 { 1 } else { workers * 2 };
    while frames.peek().is_some() {
        let batch: Vec<Frame> = frames.by_ref().take(batch_len).collect();
        let records: Vec<FrameRecord> = if workers == 1 {
            batch.iter().map(|f| detector.process(f)).collect()
        } else {
            pool.install(|| batch.par_iter().map(|f| detector.process(f)).collect())
        };
        for (frame, record) in batch.iter().zip(records) {
            if let Some(writer) = outputs.records.as_deref_mut() {
                writer.write(&record)?;
            }
            if let Some(dir) = outputs.annotated_dir {
                let path = dir.join(annotated_name(&frame.source));
                annotate(&frame.image, &record.detections)
                    .save(&path)
                    .map_err(|e| PipelineError::Output {
                        path: path.clone(),
                        detail: e.to_string(),
                    })?;
            }
            if record.error.is_some() {
                summary.failed += 1;
            }
            summary.records.push(record);
        }
    }
    let samples: Vec<f64> = summary
        .records
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| r.latency_ms)
        .collect();
    summary.latency = LatencyStats::from_samples(&samples);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn frame(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Frame {
        Frame::from_image(0, "f.png", RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y))))
    }

    #[test]
    fn stretch_at_native_size_is_scaling_only() {
        let fr = frame(416, 416, |x, y| [(x % 256) as u8, (y % 256) as u8, 7]);
        let (t, info) = preprocess(&fr, (416, 416), PreprocessMode::Stretch).unwrap();
        assert_eq!(t, fr.pixels());
        assert_eq!(info.offset, (0, 0));
    }

    #[test]
    fn letterbox_centers_wide_input() {
        let fr = frame(832, 416, |_, _| [255, 255, 255]);
        let (t, info) = preprocess(&fr, (416, 416), PreprocessMode::Letterbox).unwrap();
        assert_eq!(info.content, (416, 208));
        assert_eq!(info.offset, (0, 104));
        for y in 0..416 {
            let expected = if (104..312).contains(&y) { 1.0 } else { 0.5 };
            for c in 0..3 {
                assert_eq!(t.at3(c, y, 0), expected, "row {y}");
                assert_eq!(t.at3(c, y, 415), expected, "row {y}");
            }
        }
    }

    #[test]
    fn letterbox_boxes_map_back() {
        let fr = frame(832, 416, |_, _| [0, 0, 0]);
        let (_, info) = preprocess(&fr, (416, 416), PreprocessMode::Letterbox).unwrap();
        let net = decode::BBox::corner(0.0, 104.0, 416.0, 312.0);
        assert_eq!(info.to_original(&net), decode::BBox::corner(0.0, 0.0, 832.0, 416.0));
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let fr = frame(37, 91, |x, y| [(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8]);
        for mode in [PreprocessMode::Stretch, PreprocessMode::Letterbox] {
            let (t, _) = preprocess(&fr, (64, 96), mode).unwrap();
            assert_eq!(t.shape(), &[3, 96, 64]);
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_unaligned_target() {
        let fr = frame(8, 8, |_, _| [0, 0, 0]);
        assert!(matches!(
            preprocess(&fr, (100, 100), PreprocessMode::Stretch),
            Err(PipelineError::InputSize { .. })
        ));
    }

    #[test]
    fn latency_stats() {
        let s = LatencyStats::from_samples(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((s.mean_ms, s.median_ms, s.max_ms), (2.5, 2.5, 4.0));
        assert_eq!(s.fps, 400.0);
        assert_eq!(LatencyStats::from_samples(&[]).frames, 0);
    }

    #[test]
    fn annotated_names() {
        assert_eq!(annotated_name("f01.png"), "f01.png");
        assert_eq!(annotated_name("f01.PPM"), "f01.PPM");
        assert_eq!(annotated_name("f01.pgm"), "f01.pgm.png");
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("letterbox".parse::<PreprocessMode>().unwrap(), PreprocessMode::Letterbox);
        assert!("crop".parse::<PreprocessMode>().is_err());
    }
}
