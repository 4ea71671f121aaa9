//! Image-level and pixel-level scores from patch scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{bilinear_resize, gaussian_blur};

pub const TOP_K: usize = 5;
pub const DEFAULT_BLUR_SIGMA: f64 = 4.0;

/// Mean of the five largest patch scores (all of them when fewer).
pub fn image_score(patch_scores: &[f64]) -> Result<f64> {
    if patch_scores.is_empty() {
        return Err(Error::validation("image score of an empty patch set"));
    }
    let mut sorted = patch_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = TOP_K.min(sorted.len());
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Bilinear upsampling of the patch grid to `h x w`, then Gaussian smoothing.
pub fn pixel_map(
    patch_scores: &[f64],
    h0: usize,
    w0: usize,
    h: usize,
    w: usize,
    blur_sigma: f64,
) -> Result<Vec<f64>> {
    if h0 == 0 || w0 == 0 || h < h0 || w < w0 {
        return Err(Error::validation(format!(
            "cannot map a {h0}x{w0} patch grid to {h}x{w} pixels"
        )));
    }
    let up = bilinear_resize(patch_scores, h0, w0, h, w)?;
    gaussian_blur(&up, h, w, blur_sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub h0: usize,
    pub w0: usize,
    pub patch_scores: Vec<f64>,
    pub image_score: f64,
    pub h: usize,
    pub w: usize,
    #[serde(skip)]
    pub pixel_map: Option<Vec<f64>>,
}

impl ScoreMap {
    pub fn new(patch_scores: Vec<f64>, h0: usize, w0: usize) -> Result<Self> {
        if patch_scores.len() != h0 * w0 {
            return Err(Error::validation(
                "patch score count does not match the grid",
            ));
        }
        let image_score = image_score(&patch_scores)?;
        Ok(Self {
            h0,
            w0,
            patch_scores,
            image_score,
            h: 0,
            w: 0,
            pixel_map: None,
        })
    }

    pub fn with_pixels(mut self, h: usize, w: usize, blur_sigma: f64) -> Result<Self> {
        self.pixel_map = Some(pixel_map(
            &self.patch_scores,
            self.h0,
            self.w0,
            h,
            w,
            blur_sigma,
        )?);
        self.h = h;
        self.w = w;
        Ok(self)
    }
}
