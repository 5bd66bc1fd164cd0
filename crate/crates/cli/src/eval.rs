use std::fmt::Write as _;
use std::fs;
use std::process::ExitCode;

use anyhow::{Context, Result};
use vigil_core::decode::ClassNames;
use vigil_core::evalkit::{evaluate, read_ground_truth, VideoInput};
use vigil_core::pipeline::read_records;

use crate::{EvalArgs, EXIT_CONFIG};

/// Largest tolerated share of unparseable input lines.
const MALFORMED_LIMIT: f64 = 0.01;

pub fn run(args: &EvalArgs) -> Result<ExitCode> {
    let gt = read_ground_truth(&args.ground_truth)?;
    let names = match &args.names {
        Some(p) => ClassNames::from_file(p)?,
        None => ClassNames::default(),
    };

    let mut out = String::new();
    let (mut lines, mut malformed) = (gt.lines, gt.malformed);
    let mut videos = Vec::with_capacity(args.records.len());
    writeln!(out, "Ground truth: {} ({} objects)", args.ground_truth.display(), gt.entries.len())?;
    for path in &args.records {
        let file = read_records(path).with_context(|| format!("reading {}", path.display()))?;
        lines += file.lines;
        malformed += file.malformed;
        let name = match &file.header {
            Some(h) => h.sequence.clone(),
            None => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        match &file.header {
            Some(h) => writeln!(
                out,
                "Records: {} (sequence {}, netdef {}, weights {} sha256 {}, config {})",
                path.display(),
                h.sequence,
                h.netdef,
                h.weights,
                h.weights_digest,
                serde_json::to_string(&h.config)?
            )?,
            None => writeln!(out, "Records: {} (no run header)", path.display())?,
        }
        videos.push(VideoInput {
            name,
            records: file.records,
        });
    }

    let report = evaluate(&videos, &gt.entries, &names, args.iou, args.accuracy.into())?;
    writeln!(out)?;
    write!(out, "{report}")?;
    if malformed > 0 {
        writeln!(out, "Malformed lines skipped: {malformed} of {lines}")?;
    }

    print!("{out}");
    if let Some(path) = &args.out {
        fs::write(path, &out).with_context(|| format!("writing {}", path.display()))?;
    }

    if lines > 0 && malformed as f64 / lines as f64 > MALFORMED_LIMIT {
        eprintln!("error: {malformed} of {lines} input lines are malformed");
        return Ok(ExitCode::from(EXIT_CONFIG));
    }
    Ok(ExitCode::SUCCESS)
}
