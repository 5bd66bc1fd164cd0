#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use vigil_core::netdef::{Layer, NetDefinition};
use vigil_core::tensor::{BatchNorm, ConvParams};
use vigil_core::Tensor;

pub const CANONICAL_CFG: &str = include_str!("../../../../assets/yolov3.cfg");

/// The canonical topology with every trunk width divided by 16 and a single
/// class, so a forward pass takes milliseconds.
pub fn slim_cfg() -> String {
    let mut out = String::new();
    for line in CANONICAL_CFG.lines() {
        let trimmed = line.trim();
        if let Some(v) = trimmed.strip_prefix("filters=") {
            let f: usize = v.parse().unwrap();
            let slim = if f == 255 { 18 } else { (f / 16).max(2) };
            out.push_str(&format!("filters={slim}\n"));
        } else if trimmed.starts_with("classes=") {
            out.push_str("classes=1\n");
        } else {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Deterministic random parameters matching `def`.
pub fn random_params(def: &NetDefinition, seed: u64) -> Vec<ConvParams> {
    let mut rng = StdRng::seed_from_u64(seed);
    let shapes = def.output_shapes().unwrap();
    let mut params = Vec::new();
    for spec in &def.layers {
        let Layer::Convolutional(c) = &spec.layer else { continue };
        let in_c = if spec.index == 0 { def.input_shape.channels } else { shapes[spec.index - 1][0] };
        let fan_in = (in_c * c.size * c.size) as f32;
        let bound = 1.5 / fan_in.sqrt();
        let n = c.filters * in_c * c.size * c.size;
        let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let weights = Tensor::new(vec![c.filters, in_c, c.size, c.size], w).unwrap();
        let bias: Vec<f32> = (0..c.filters).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let bn = c.batch_normalize.then(|| BatchNorm {
            gamma: (0..c.filters).map(|_| rng.gen_range(0.5..1.5)).collect(),
            beta: (0..c.filters).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            rolling_mean: (0..c.filters).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            rolling_var: (0..c.filters).map(|_| rng.gen_range(0.5..1.5)).collect(),
            epsilon: vigil_core::tensor::BN_EPSILON,
        });
        params.push(ConvParams::new(weights, bias, bn, c.stride, c.padding).unwrap());
    }
    params
}

pub fn random_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    Tensor::from_fn3(c, h, w, |_, _, _| rng.gen_range(0.0..1.0)).unwrap()
}
