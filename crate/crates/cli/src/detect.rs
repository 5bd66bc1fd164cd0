use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde_json::json;
use sha2::{Digest, Sha256};
use vigil_core::decode::ClassNames;
use vigil_core::netdef::load_weights;
use vigil_core::pipeline::{
    ingest_frames, run_sequence, DetectConfig, Detector, FrameStream, RecordWriter, RunHeader, RunOutputs,
    RECORDS_FORMAT,
};
use vigil_core::parse_netdef;

use crate::{DetectArgs, EXIT_PARTIAL};

pub fn run(args: &DetectArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&args.netdef).with_context(|| format!("reading {}", args.netdef.display()))?;
    let def = parse_netdef(&text).with_context(|| format!("parsing {}", args.netdef.display()))?;
    let bytes = fs::read(&args.weights).with_context(|| format!("reading {}", args.weights.display()))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let (_, graph) = load_weights(&bytes, def).with_context(|| format!("loading {}", args.weights.display()))?;
    drop(bytes);
    let names = match &args.names {
        Some(p) => ClassNames::from_file(p)?,
        None => ClassNames::default(),
    };
    if args.workers == 0 {
        bail!("--workers must be at least 1");
    }

    let config = DetectConfig {
        score_threshold: args.score_thresh,
        nms_threshold: args.nms_thresh,
        input_size: args.size,
        mode: args.mode.into(),
        compat_256_scale: args.compat_256_scale,
        workers: args.workers,
    };
    let detector = Detector::new(&graph, names, config.clone())?;

    let mut frames = if args.input.is_dir() {
        ingest_frames(&args.input)?
    } else if args.input.is_file() {
        FrameStream::from_files(vec![args.input.clone()])
    } else {
        bail!("{}: no such file or directory", args.input.display());
    };

    let sequence = args.sequence.clone().unwrap_or_else(|| default_sequence(&args.input));
    let header = RunHeader {
        format: RECORDS_FORMAT.into(),
        sequence,
        netdef: args.netdef.display().to_string(),
        weights: args.weights.display().to_string(),
        names: args.names.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        weights_digest: digest,
        config,
    };

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut writer = RecordWriter::create(&args.out.join("records.jsonl"), &header)?;
    let annotated = args.out.join("annotated");
    let summary = run_sequence(
        &detector,
        frames.by_ref(),
        RunOutputs {
            records: Some(&mut writer),
            annotated_dir: Some(&annotated),
        },
    )?;
    writer.finish()?;
    let skipped = frames.skipped().len();

    let timings_path = args.out.join("timings.jsonl");
    let mut timings = BufWriter::new(File::create(&timings_path).with_context(|| timings_path.display().to_string())?);
    writeln!(timings, "{}", json!({ "run": header }))?;
    for r in &summary.records {
        writeln!(
            timings,
            "{}",
            json!({ "frame_id": r.frame_id, "source": r.source, "latency_ms": r.latency_ms, "ok": r.error.is_none() })
        )?;
    }
    timings.flush()?;
    let summary_json = json!({
        "run": header,
        "frames": summary.records.len(),
        "failed": summary.failed,
        "skipped_files": skipped,
        "latency": summary.latency,
    });
    fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary_json)? + "\n")?;

    let detections: usize = summary.records.iter().map(|r| r.detections.len()).sum();
    println!(
        "Processed {} frames ({} failed, {} unreadable files skipped), {} detections",
        summary.records.len(),
        summary.failed,
        skipped,
        detections
    );
    println!("Latency: {}", summary.latency);
    println!("Records: {}", args.out.join("records.jsonl").display());

    if summary.succeeded() == 0 || summary.failed > 0 || skipped > 0 {
        return Ok(ExitCode::from(EXIT_PARTIAL));
    }
    Ok(ExitCode::SUCCESS)
}

fn default_sequence(input: &Path) -> String {
    let named = if input.is_dir() { input.file_name() } else { input.file_stem() };
    named.map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "sequence".into())
}
