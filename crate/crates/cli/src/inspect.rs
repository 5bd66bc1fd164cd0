use std::fs;
use std::process::ExitCode;

use anyhow::{Context, Result};
use vigil_core::netdef::{expected_float_count, load_weights};
use vigil_core::parse_netdef;

use crate::InspectArgs;

pub fn run(args: &InspectArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&args.netdef).with_context(|| format!("reading {}", args.netdef.display()))?;
    let mut def = parse_netdef(&text).with_context(|| format!("parsing {}", args.netdef.display()))?;
    if let Some(size) = args.size {
        def = def.with_input_size(size, size);
    }
    let shapes = def.output_shapes().context("checking layer shapes")?;
    let params = def.param_counts().context("counting parameters")?;
    let input = def.input_shape;

    println!("Network: {}", args.netdef.display());
    println!("Input: {}x{}x{}", input.channels, input.height, input.width);
    println!("{:>5}  {:<14} {:<16} {:>10}", "layer", "kind", "output", "params");
    for ((spec, shape), p) in def.layers.iter().zip(&shapes).zip(&params) {
        let [c, h, w] = shape;
        println!("{:>5}  {:<14} {:<16} {:>10}", spec.index, spec.kind().to_string(), format!("{c}x{h}x{w}"), p);
    }
    let convs = def.layers.iter().filter(|l| matches!(l.layer, vigil_core::netdef::Layer::Convolutional(_))).count();
    println!("{} layers, {convs} convolutional", def.layers.len());
    println!("Total parameters: {}", params.iter().sum::<usize>());
    let floats = expected_float_count(&def)?;
    println!("Expected weights floats: {floats}");

    let heads: Vec<_> = def.yolo_layers().collect();
    if !heads.is_empty() {
        println!("Heads:");
    }
    for (index, yolo) in heads {
        let [c, h, w] = shapes[index];
        let anchors: Vec<String> = yolo
            .head_anchors()
            .iter()
            .map(|a| format!("({},{})", a.pw, a.ph))
            .collect();
        println!(
            "  layer {index:>3}  stride {:>2}  grid {h}x{w}  channels {c}  classes {}  anchors {}",
            input.height / h.max(1),
            yolo.classes,
            anchors.join(" ")
        );
    }

    if let Some(path) = &args.weights {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let (header, _) = load_weights(&bytes, def).with_context(|| format!("loading {}", path.display()))?;
        println!(
            "Weights: {} (format {}.{}.{}, {} images seen): consumed {floats} floats exactly",
            path.display(),
            header.major,
            header.minor,
            header.revision,
            header.images_seen
        );
    }
    Ok(ExitCode::SUCCESS)
}
