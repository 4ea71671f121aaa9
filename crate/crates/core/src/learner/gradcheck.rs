//! Central finite-difference verification of the analytic gradients.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::model::{ModelParams, ParamGroup, PatchSet};
use crate::error::Result;
use crate::knowledge::KnowledgeMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSpec {
    pub c: usize,
    /// Patches per normal image.
    pub n: usize,
    /// Filtered anomalous patches.
    pub n_anomalous: usize,
    pub blocks: usize,
    pub use_attention: bool,
    pub shared_kv: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub step: f64,
    /// Test hook: scale the analytic gradient before comparing.
    pub corrupt_scale: Option<f64>,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            c: 4,
            n: 3,
            n_anomalous: 2,
            blocks: 1,
            use_attention: true,
            shared_kv: false,
            lambda1: 1.0,
            lambda2: 15.0,
            step: 1e-3,
            corrupt_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Largest relative error per parameter group.
    pub max_rel_error: BTreeMap<ParamGroup, f64>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }
}

/// Relative error of one parameter tensor, `|a - n| / max(|a|, |n|)` in the
/// Euclidean norm, with a floor on the denominator so that tensors whose true
/// gradient is zero are compared absolutely.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-6)
}

/// Required distance to the nearest kink, in multiples of the step.
const KINK_CLEARANCE: f64 = 20.0;
const MAX_DRAWS: usize = 8192;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

pub fn grad_check(spec: &GradCheckSpec, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.c;
    let mode = KnowledgeMode {
        use_attention: spec.use_attention,
        use_distance: true,
    };
    let params = ModelParams::init(c, mode, spec.blocks, spec.shared_kv, seed);
    let loss_cfg = LossConfig {
        lambda1: spec.lambda1,
        lambda2: spec.lambda2,
        ..LossConfig::default()
    };
    let set = |rng: &mut ChaCha8Rng, n: usize| PatchSet {
        q: random_matrix(n, c, rng),
        nn: random_matrix(n, c, rng),
        na: Some(random_matrix(n, c, rng)),
    };
    // Redraw inputs until no kink lies within reach of the finite-difference step.
    let mut attempt = 0;
    let (normal, anomalous, noise, out) = loop {
        let normal = vec![set(&mut rng, spec.n)];
        let anomalous = if spec.lambda2 > 0.0 {
            vec![set(&mut rng, spec.n_anomalous)]
        } else {
            vec![]
        };
        let noise = random_matrix(spec.n, 3 * c, &mut rng) * 0.1;
        let out = params.forward_backward(&normal, &anomalous, noise.view(), &loss_cfg)?;
        attempt += 1;
        let clear = out.mlp_cache.kink_distance(&params.mlp) > KINK_CLEARANCE * spec.step
            && out.hinge_distance > KINK_CLEARANCE * spec.step;
        if clear || attempt >= MAX_DRAWS {
            break (normal, anomalous, noise, out);
        }
    };
    let analytic: Vec<(ParamGroup, Vec<f64>)> = out
        .grads
        .slices()
        .into_iter()
        .map(|(g, s)| {
            (
                g,
                s.iter()
                    .map(|v| v * spec.corrupt_scale.unwrap_or(1.0))
                    .collect(),
            )
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: ParamGroup::ALL.iter().map(|&g| (g, 0.0)).collect(),
        checked: 0,
    };
    let h = spec.step;
    for (t, (group, grads)) in analytic.iter().enumerate() {
        if spec.shared_kv && *group == ParamGroup::Attention && (t == 4 || t == 5) {
            continue; // value map aliases the key map
        }
        let mut numeric = Vec::with_capacity(grads.len());
        for i in 0..grads.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p.trainable_mut()[t].2[i] += delta;
                Ok(
                    p.forward_backward(&normal, &anomalous, noise.view(), &loss_cfg)?
                        .loss
                        .total,
                )
            };
            numeric.push((eval(h)? - eval(-h)?) / (2.0 * h));
        }
        let err = relative_error(grads, &numeric);
        let slot = report
            .max_rel_error
            .get_mut(group)
            .expect("all groups present");
        *slot = slot.max(err);
        report.checked += grads.len();
    }
    Ok(report)
}
