//! Developer diagnostic: print output stats of a freshly built transporter.

use dodkit_core::transporter::build_transporter;
use dodkit_core::models::UnetConfig;
use ndarray::Array4;
use rand::Rng;

fn main() {
    let mut t = build_transporter::<f32>(32, UnetConfig::default(), 7).unwrap();
    let mut rng = dodkit_core::rng_for(7, "probe");
    let xo = Array4::from_shape_fn((4, 3, 32, 32), |_| rng.gen::<f32>());
    let xh = Array4::from_shape_fn((4, 3, 32, 32), |_| rng.gen::<f32>());
    let out = t.transport_batch(&xo, &xh);
    let n = out.len() as f64;
    let mean: f64 = out.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (out.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = out.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = out.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    println!("fresh unet out: mean {mean:.4} sd {sd:.4} min {min:.4} max {max:.4}");
}
