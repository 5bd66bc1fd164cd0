//! CPU implementation of a three-scale YOLOv3 detector together with the
//! tooling around it: Darknet model loading, box decoding and suppression,
//! a frame-sequence pipeline, and detection-quality metrics.

pub mod decode;
pub mod engine;
pub mod evalkit;
pub mod netdef;
pub mod pipeline;
pub mod tensor;

pub use decode::{BBox, BoxFormat, ClassNames, Detection};
pub use engine::{forward, ForwardOutput};
pub use netdef::{parse_netdef, NetworkGraph, ScaleSpec};
pub use tensor::{ConvParams, Tensor};
pub use pipeline::{Detector, DetectConfig, Frame, FrameRecord, PreprocessMode};
pub use evalkit::{ConfusionCounts, EvalReport, GroundTruth};
