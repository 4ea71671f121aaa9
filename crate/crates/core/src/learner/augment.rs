use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::EnhancedRepresentation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.015,
            seed: 0,
        }
    }
}

pub(crate) fn gaussian_noise(
    shape: (usize, usize),
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::validation(format!(
            "noise std must be >= 0, got {std}"
        )));
    }
    if std == 0.0 {
        return Ok(Array2::zeros(shape));
    }
    let normal = Normal::new(0.0, std).expect("checked std");
    Ok(Array2::from_shape_fn(shape, |_| normal.sample(rng)))
}

/// Pseudo negatives: the enhanced representation plus i.i.d. Gaussian noise.
pub fn gaussian_augment(
    o_n: &EnhancedRepresentation,
    cfg: &AugmentConfig,
) -> Result<EnhancedRepresentation> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = gaussian_noise(o_n.data.dim(), cfg.noise_std, &mut rng)?;
    Ok(EnhancedRepresentation {
        c: o_n.c,
        data: &o_n.data + &noise,
    })
}
