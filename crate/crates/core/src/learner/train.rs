use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{gaussian_noise, AugmentConfig};
use super::checkpoint::Checkpoint;
use super::loss::LossConfig;
use super::mlp::DEFAULT_BLOCKS;
use super::model::{ModelParams, PatchSet};
use super::optim::{OptimizerConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeMode;
use crate::memory_bank::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub mlp_blocks: usize,
    pub shared_kv: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 48,
            batch_size: 32,
            seed: 0,
            mode: Mode::Unsupervised,
            mlp_blocks: DEFAULT_BLOCKS,
            shared_kv: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Everything the training loop consumes besides the model itself.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub knowledge: KnowledgeMode,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
}

/// Normal images and (semi-supervised) filtered anomalous patch sets.
#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub normal: Vec<PatchSet>,
    pub anomalous: Vec<PatchSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub term_n: f64,
    pub term_p: f64,
    pub term_a: f64,
}

pub fn write_loss_log(rows: &[LossLogRow], path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::format(format!("loss log: {e}")))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::format(format!("loss log: {e}")))?;
    }
    w.flush().map_err(|e| Error::storage(path, e))
}

/// Mean loss per epoch from a step log.
pub fn epoch_means(rows: &[LossLogRow]) -> Vec<f64> {
    let epochs = rows.iter().map(|r| r.epoch).max().unwrap_or(0);
    (1..=epochs)
        .map(|e| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.epoch == e)
                .map(|r| r.loss)
                .collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

fn round_to_f32(params: &mut ModelParams) {
    for (_, _, s) in params.trainable_mut() {
        s.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    for (_, s) in params.buffers_mut() {
        s.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Runs the full optimisation. Each step takes a shuffled batch of normal
/// images plus the next `batch_size` anomalous patch sets (cycled) when
/// `lambda2 > 0`.
pub fn train(
    data: &TrainingData,
    c: usize,
    setup: &TrainSetup,
) -> Result<(Checkpoint, Vec<LossLogRow>)> {
    setup.train.validate()?;
    setup.loss.validate()?;
    if data.normal.is_empty() {
        return Err(Error::validation("training set has no normal images"));
    }
    let use_anomalies = setup.loss.lambda2 > 0.0;
    if setup.train.mode == Mode::SemiSupervised && data.anomalous.iter().all(PatchSet::is_empty) {
        return Err(Error::validation(
            "semi-supervised training needs annotated anomalies with flagged patches",
        ));
    }
    if use_anomalies && data.anomalous.iter().all(PatchSet::is_empty) {
        return Err(Error::validation(
            "lambda2 > 0 but there are no anomalous patches",
        ));
    }

    let tc = &setup.train;
    let mut params = ModelParams::init(c, setup.knowledge, tc.mlp_blocks, tc.shared_kv, tc.seed);
    round_to_f32(&mut params);
    let mut optimizer = OptimizerState::new(setup.optimizer, &mut params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x5eed));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(setup.augment.seed);

    let anomalous: Vec<&PatchSet> = data.anomalous.iter().filter(|s| !s.is_empty()).collect();
    let mut anomaly_order: Vec<usize> = (0..anomalous.len()).collect();
    let mut anomaly_cursor = anomaly_order.len();

    let mut log = Vec::new();
    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..data.normal.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(tc.batch_size) {
            let normal: Vec<PatchSet> = chunk.iter().map(|&i| data.normal[i].clone()).collect();
            let mut batch_anomalies = Vec::new();
            if use_anomalies {
                let take = tc.batch_size.min(anomalous.len());
                while batch_anomalies.len() < take {
                    if anomaly_cursor >= anomaly_order.len() {
                        anomaly_order.shuffle(&mut shuffle_rng);
                        anomaly_cursor = 0;
                    }
                    batch_anomalies.push(anomalous[anomaly_order[anomaly_cursor]].clone());
                    anomaly_cursor += 1;
                }
            }
            let rows: usize = normal.iter().map(PatchSet::len).sum();
            let noise = gaussian_noise((rows, 3 * c), setup.augment.noise_std, &mut noise_rng)?;
            let out =
                params.forward_backward(&normal, &batch_anomalies, noise.view(), &setup.loss)?;
            if !out.loss.total.is_finite() {
                return Err(Error::Numeric {
                    row: 0,
                    what: format!("non-finite loss at epoch {epoch}"),
                });
            }
            params.mlp.apply_batch_stats(&out.mlp_cache);
            optimizer.step(&mut params, &out.grads)?;
            round_to_f32(&mut params);
            log.push(LossLogRow {
                epoch,
                step: optimizer.step,
                loss: out.loss.total,
                term_n: out.loss.term_n,
                term_p: out.loss.term_p,
                term_a: out.loss.term_a,
            });
        }
        let means = epoch_means(&log);
        log::info!(
            "epoch {epoch}/{}: mean loss {:.6}",
            tc.epochs,
            means[epoch - 1]
        );
    }
    Ok((Checkpoint { params, optimizer }, log))
}
