//! Per-region overlap: mean recall over connected ground-truth regions,
//! integrated against the false-positive rate up to a limit.

use crate::error::{Error, Result};
use crate::feature_store::AnnotationMask;

/// 8-connected component labels of the 1-pixels; 0 is background and
/// components are numbered from 1 in raster order of their first pixel.
pub fn label_components(mask: &AnnotationMask) -> (Vec<u32>, u32) {
    let (h, w) = (mask.h, mask.w);
    let mut labels = vec![0u32; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] != 1 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] == 1 && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, next)
}

/// The (false-positive rate, mean region overlap) curve over every distinct
/// threshold, starting at (0, 0).
pub fn pro_curve(maps: &[&[f64]], masks: &[AnnotationMask]) -> Result<Vec<(f64, f64)>> {
    if maps.len() != masks.len() {
        return Err(Error::validation(format!(
            "{} score maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    // (score, region id or u32::MAX for normal pixels)
    let mut pixels: Vec<(f64, u32)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.len() != mask.h * mask.w {
            return Err(Error::validation(format!(
                "score map has {} pixels, mask is {}x{}",
                map.len(),
                mask.h,
                mask.w
            )));
        }
        let (labels, count) = label_components(mask);
        let base = region_sizes.len() as u32;
        region_sizes.extend(std::iter::repeat_n(0, count as usize));
        for (&s, &l) in map.iter().zip(&labels) {
            if !s.is_finite() {
                return Err(Error::validation("non-finite pixel score"));
            }
            if l == 0 {
                pixels.push((s, u32::MAX));
            } else {
                let id = base + l - 1;
                region_sizes[id as usize] += 1;
                pixels.push((s, id));
            }
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::validation("PRO needs at least one anomalous region"));
    }
    let normal_total = pixels.iter().filter(|p| p.1 == u32::MAX).count();
    if normal_total == 0 {
        return Err(Error::validation("PRO needs at least one normal pixel"));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let regions = region_sizes.len() as f64;
    let mut curve = vec![(0.0, 0.0)];
    let (mut fp, mut overlap_sum) = (0usize, 0.0);
    let mut i = 0;
    while i < pixels.len() {
        let s = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == s {
            match pixels[i].1 {
                u32::MAX => fp += 1,
                id => overlap_sum += 1.0 / region_sizes[id as usize] as f64,
            }
            i += 1;
        }
        curve.push((fp as f64 / normal_total as f64, overlap_sum / regions));
    }
    Ok(curve)
}

/// Trapezoidal area under a monotone curve up to `limit`, interpolating at the limit.
pub fn area_up_to(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_lim) / 2.0;
            break;
        }
    }
    area
}

/// Normalised PRO area in [0, 1].
pub fn pro(maps: &[&[f64]], masks: &[AnnotationMask], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::validation(format!(
            "fpr limit must be in (0, 1], got {fpr_limit}"
        )));
    }
    let curve = pro_curve(maps, masks)?;
    Ok(area_up_to(&curve, fpr_limit) / fpr_limit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pixels_are_one_component() {
        let m = AnnotationMask::new(3, 3, vec![1, 0, 0, 0, 1, 0, 0, 0, 1]).unwrap();
        assert_eq!(label_components(&m).1, 1);
        let m = AnnotationMask::new(3, 3, vec![1, 0, 1, 0, 0, 0, 1, 0, 1]).unwrap();
        let (labels, n) = label_components(&m);
        assert_eq!(n, 4);
        assert_eq!(labels[8], 4);
    }

    #[test]
    fn separable_region_scores_one() {
        let mut mask = AnnotationMask::zeros(8, 8);
        let mut map = vec![0.0; 64];
        for y in 2..4 {
            for x in 3..6 {
                mask.data[y * 8 + x] = 1;
                map[y * 8 + x] = 1.0 + x as f64;
            }
        }
        for (i, v) in map.iter_mut().enumerate() {
            if mask.data[i] == 0 {
                *v = (i % 7) as f64 * 0.1;
            }
        }
        assert!((pro(&[&map], &[mask], 0.3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_scores_follow_the_diagonal_step() {
        // a single tie block jumps from (0,0) to (1,1); the area to 0.3 is a
        // triangle 0.3 * 0.3 / 2, normalised by 0.3
        let mut mask = AnnotationMask::zeros(4, 4);
        mask.data[5] = 1;
        let map = vec![0.7; 16];
        assert!((pro(&[&map], &[mask], 0.3).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn no_regions_is_an_error() {
        let map = vec![0.0; 4];
        assert!(pro(&[&map], &[AnnotationMask::zeros(2, 2)], 0.3).is_err());
    }
}
