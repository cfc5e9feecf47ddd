//! Procedural digit corpus.
//!
//! A deterministic stand-in for handwritten-digit data when no external
//! corpus is on disk: seven-segment glyphs with per-sample affine jitter,
//! stroke jitter, intensity variation, and background noise. Classes are the
//! digits 0-9, so disjoint original/hijack subsets are easy to carve out.

use crate::scalar::Scalar;
use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

// 7-segment layout in unit coordinates: (x0, y0, x1, y1)
const SEGMENTS: [(f64, f64, f64, f64); 7] = [
    (0.25, 0.15, 0.75, 0.15), // A top
    (0.75, 0.15, 0.75, 0.50), // B top-right
    (0.75, 0.50, 0.75, 0.85), // C bottom-right
    (0.25, 0.85, 0.75, 0.85), // D bottom
    (0.25, 0.50, 0.25, 0.85), // E bottom-left
    (0.25, 0.15, 0.25, 0.50), // F top-left
    (0.25, 0.50, 0.75, 0.50), // G middle
];

const DIGIT_SEGMENTS: [u8; 10] = [
    0b0111111, // 0: ABCDEF
    0b0000110, // 1: BC
    0b1011011, // 2: ABDEG
    0b1001111, // 3: ABCDG
    0b1100110, // 4: BCFG
    0b1101101, // 5: ACDFG
    0b1111101, // 6: ACDEFG
    0b0000111, // 7: ABC
    0b1111111, // 8
    0b1101111, // 9: ABCDFG
];

fn dist_to_segment(px: f64, py: f64, seg: (f64, f64, f64, f64)) -> f64 {
    let (x0, y0, x1, y1) = seg;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Render one jittered digit glyph as a (3, res, res) image in [0,1].
pub fn render_digit<F: Scalar, R: Rng>(digit: usize, res: usize, rng: &mut R) -> Array3<F> {
    assert!(digit < 10, "digit out of range");
    let u = |lo: f64, hi: f64, rng: &mut R| Uniform::new(lo, hi).unwrap().sample(rng);
    let scale = u(0.80, 1.10, rng);
    let angle = u(-0.18, 0.18, rng);
    let tx = u(-0.08, 0.08, rng);
    let ty = u(-0.08, 0.08, rng);
    let thickness = u(0.045, 0.085, rng);
    let intensity = u(0.65, 1.0, rng);
    // Mid-gray background with a mild per-image tint. Keeping every pixel
    // strictly inside (0, 1) matters: a sigmoid output head can only approach
    // the interval ends asymptotically, so exact-0 backgrounds would leave a
    // never-vanishing L1 gradient that drags the head into saturation.
    let background = u(0.10, 0.30, rng);
    let tint = [u(0.85, 1.0, rng), u(0.85, 1.0, rng), u(0.85, 1.0, rng)];
    let noise = Normal::new(0.0, 0.03).unwrap();

    // jitter each segment's endpoints
    let mask = DIGIT_SEGMENTS[digit];
    let mut segs = Vec::new();
    for (i, seg) in SEGMENTS.iter().enumerate() {
        if mask & (1 << i) != 0 {
            let j = 0.025;
            segs.push((
                seg.0 + u(-j, j, rng),
                seg.1 + u(-j, j, rng),
                seg.2 + u(-j, j, rng),
                seg.3 + u(-j, j, rng),
            ));
        }
    }

    let (sin, cos) = angle.sin_cos();
    let mut img = Array3::<F>::zeros((3, res, res));
    for y in 0..res {
        for x in 0..res {
            // map pixel into glyph space (inverse affine about the center)
            let nx = (x as f64 + 0.5) / res as f64 - 0.5 - tx;
            let ny = (y as f64 + 0.5) / res as f64 - 0.5 - ty;
            let gx = (cos * nx + sin * ny) / scale + 0.5;
            let gy = (-sin * nx + cos * ny) / scale + 0.5;
            let d = segs
                .iter()
                .map(|&s| dist_to_segment(gx, gy, s))
                .fold(f64::INFINITY, f64::min);
            // soft-edged stroke blended over the background
            let edge = thickness * 0.5;
            let alpha = if d < thickness {
                1.0
            } else if d < thickness + edge {
                1.0 - (d - thickness) / edge
            } else {
                0.0
            };
            let v = background + (intensity - background) * alpha + noise.sample(rng);
            for (c, t) in tint.iter().enumerate() {
                img[[c, y, x]] = F::from_f64_((v * t).clamp(0.02, 0.98));
            }
        }
    }
    img
}
