//! Bilinear resampling and separable Gaussian smoothing on row-major 2-D maps.

use crate::error::{Error, Result};

/// Source coordinate and blend weight for one output index under the
/// half-pixel (align-corners = false) convention.
fn source_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
    let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

/// Bilinear resize of an `in_h x in_w` map to `out_h x out_w`.
pub fn bilinear_resize(
    data: &[f64],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::validation(format!(
            "bilinear resize needs nonzero dims, got {in_h}x{in_w} -> {out_h}x{out_w}"
        )));
    }
    if data.len() != in_h * in_w {
        return Err(Error::validation(format!(
            "map has {} values, expected {}",
            data.len(),
            in_h * in_w
        )));
    }
    let cols: Vec<_> = (0..out_w).map(|x| source_taps(x, in_w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = source_taps(y, in_h, out_h);
        let r0 = &data[y0 * in_w..(y0 + 1) * in_w];
        let r1 = &data[y1 * in_w..(y1 + 1) * in_w];
        for &(x0, x1, fx) in &cols {
            let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
            let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian kernel truncated at 4 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflect padding. `sigma == 0` returns the input.
pub fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::validation(format!(
            "blur sigma must be >= 0, got {sigma}"
        )));
    }
    if data.len() != h * w {
        return Err(Error::validation(format!(
            "map has {} values, expected {}",
            data.len(),
            h * w
        )));
    }
    if sigma == 0.0 {
        return Ok(data.to_vec());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;

    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wk) in kernel.iter().enumerate() {
                acc += wk * row[reflect(x as isize + k as isize - radius, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wk) in kernel.iter().enumerate() {
                acc += wk * tmp[reflect(y as isize + k as isize - radius, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Ok(out)
}
