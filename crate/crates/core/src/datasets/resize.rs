//! Bilinear image resizing (corner alignment disabled).

use crate::scalar::Scalar;
use ndarray::Array3;

/// Resize a (C, H, W) image to (C, out_h, out_w) with bilinear interpolation.
/// Source coordinates follow the half-pixel convention.
pub fn resize_bilinear<F: Scalar>(img: &Array3<F>, out_h: usize, out_w: usize) -> Array3<F> {
    let (c, h, w) = img.dim();
    if h == out_h && w == out_w {
        return img.clone();
    }
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let mut out = Array3::<F>::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ci in 0..c {
                let v00 = img[[ci, y0, x0]].to_f64_();
                let v01 = img[[ci, y0, x1]].to_f64_();
                let v10 = img[[ci, y1, x0]].to_f64_();
                let v11 = img[[ci, y1, x1]].to_f64_();
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out[[ci, oy, ox]] = F::from_f64_(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}
