//! Adam with decoupled weight decay, per-group learning rates.

use serde::{Deserialize, Serialize};

use super::model::{ModelGrads, ModelParams, ParamGroup};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_attention_projection: f64,
    pub lr_mlp: f64,
    pub weight_decay_mlp: f64,
    pub weight_decay_other: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_attention_projection: 1e-4,
            lr_mlp: 2e-4,
            weight_decay_mlp: 1e-5,
            weight_decay_other: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Mlp => self.lr_mlp,
            ParamGroup::Projection | ParamGroup::Attention => self.lr_attention_projection,
        }
    }

    pub fn weight_decay(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Mlp => self.weight_decay_mlp,
            ParamGroup::Projection | ParamGroup::Attention => self.weight_decay_other,
        }
    }
}

/// First and second moments per trainable tensor, in
/// [`ModelParams::trainable_mut`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &mut ModelParams) -> Self {
        let shapes: Vec<usize> = params
            .trainable_mut()
            .iter()
            .map(|(_, _, s)| s.len())
            .collect();
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. Parameters and moments are rounded to f32 afterwards,
    /// which is the precision they are persisted at.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelGrads) -> Result<()> {
        let cfg = self.config;
        let mut slots = params.trainable_mut();
        let gslices = grads.slices();
        if slots.len() != gslices.len() || slots.len() != self.m.len() {
            return Err(Error::validation(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                slots.len(),
                gslices.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((name, group, p), (_, g)), (m, v)) in slots
            .iter_mut()
            .zip(&gslices)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::validation(format!("shape mismatch for {name}")));
            }
            let lr = cfg.lr(*group);
            let wd = cfg.weight_decay(*group);
            for i in 0..p.len() {
                let mut w = p[i];
                w -= lr * wd * w;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                p[i] = w as f32 as f64;
                m[i] = m[i] as f32 as f64;
                v[i] = v[i] as f32 as f64;
            }
        }
        Ok(())
    }
}
