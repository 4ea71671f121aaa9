//! Residual MLP scorer: blocks of `x + LeakyReLU(BN(W x + b))` and an affine head.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::knowledge::linear_init;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub bn_running_mean: Array1<f64>,
    pub bn_running_var: Array1<f64>,
}

impl MlpBlock {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let (w, b) = linear_init(d, d, rng);
        Self {
            w,
            b,
            bn_gamma: Array1::ones(d),
            bn_beta: Array1::zeros(d),
            bn_running_mean: Array1::zeros(d),
            bn_running_var: Array1::ones(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub blocks: Vec<MlpBlock>,
    pub w_h: Array1<f64>,
    pub b_h: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

pub const DEFAULT_BLOCKS: usize = 4;

impl MlpParams {
    pub fn init(d: usize, num_blocks: usize, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..num_blocks).map(|_| MlpBlock::init(d, rng)).collect();
        let (w_h, b_h) = linear_init(1, d, rng);
        Self {
            blocks,
            w_h: w_h.row(0).to_owned(),
            b_h: b_h[0],
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn width(&self) -> usize {
        self.w_h.len()
    }

    fn leaky(&self, v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            self.leaky_slope * v
        }
    }

    /// Scores every row. In the train phase batch statistics are used and
    /// returned alongside the cache; running statistics are left untouched
    /// (see [`MlpParams::apply_batch_stats`]).
    pub fn forward(&self, x: ArrayView2<'_, f64>, phase: Phase) -> Result<(Array1<f64>, MlpCache)> {
        let (m, d) = x.dim();
        if m == 0 {
            return Err(Error::validation("MLP forward on an empty batch"));
        }
        if phase == Phase::Train && m < 2 {
            return Err(Error::validation(
                "train-phase batch norm needs at least 2 rows",
            ));
        }
        if d != self.width() {
            return Err(Error::validation(format!(
                "MLP input has {d} columns, network width is {}",
                self.width()
            )));
        }
        let mut h = x.to_owned();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let mut z = h.dot(&blk.w.t());
            z += &blk.b;
            let (mean, var) = match phase {
                Phase::Train => column_stats(&z),
                Phase::Eval => (blk.bn_running_mean.clone(), blk.bn_running_var.clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + self.bn_eps).sqrt());
            let xhat = (&z - &mean) * &inv_std;
            let y = &xhat * &blk.bn_gamma + &blk.bn_beta;
            let act = y.mapv(|v| self.leaky(v));
            let out = &h + &act;
            blocks.push(BlockCache {
                input: std::mem::replace(&mut h, out),
                xhat,
                y,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let scores = h.dot(&self.w_h) + self.b_h;
        if let Some(row) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                row,
                what: "non-finite MLP score".into(),
            });
        }
        Ok((
            scores,
            MlpCache {
                phase,
                blocks,
                last_hidden: h,
            },
        ))
    }

    pub fn scores(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.forward(x, Phase::Eval).map(|(s, _)| s)
    }

    /// Folds a train-phase pass's batch statistics into the running averages.
    /// The running variance uses the unbiased batch estimate.
    pub fn apply_batch_stats(&mut self, cache: &MlpCache) {
        if cache.phase != Phase::Train {
            return;
        }
        let m = cache.last_hidden.nrows() as f64;
        let mom = self.bn_momentum;
        for (blk, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            blk.bn_running_mean = &blk.bn_running_mean * (1.0 - mom) + &bc.batch_mean * mom;
            let unbiased = &bc.batch_var * (m / (m - 1.0));
            blk.bn_running_var = &blk.bn_running_var * (1.0 - mom) + unbiased * mom;
        }
    }

    /// Parameter gradients and input gradient for `d_scores` (dLoss/dScore).
    pub fn backward(
        &self,
        cache: &MlpCache,
        d_scores: &Array1<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        if d_scores.len() != cache.last_hidden.nrows() {
            return Err(Error::State(format!(
                "gradient for {} scores but cache holds {} rows",
                d_scores.len(),
                cache.last_hidden.nrows()
            )));
        }
        let d = self.width();
        let m = d_scores.len() as f64;
        let mut grads = MlpGrads::zeros(d, self.blocks.len());
        grads.w_h = cache.last_hidden.t().dot(d_scores);
        grads.b_h = d_scores.sum();
        let mut dh = d_scores
            .view()
            .insert_axis(Axis(1))
            .dot(&self.w_h.view().insert_axis(Axis(0)));

        for (i, (blk, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let slope = self.leaky_slope;
            let dy = &dh * &bc.y.mapv(|v| if v > 0.0 { 1.0 } else { slope });
            let g = &mut grads.blocks[i];
            g.bn_gamma = (&dy * &bc.xhat).sum_axis(Axis(0));
            g.bn_beta = dy.sum_axis(Axis(0));
            let dxhat = &dy * &blk.bn_gamma;
            let dz = match cache.phase {
                Phase::Train => {
                    let sum_dxhat = dxhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&dxhat * &bc.xhat).sum_axis(Axis(0));
                    let centered = &dxhat * m - &sum_dxhat - &bc.xhat * &sum_dxhat_xhat;
                    centered * &(&bc.inv_std / m)
                }
                Phase::Eval => &dxhat * &bc.inv_std,
            };
            g.w = dz.t().dot(&bc.input);
            g.b = dz.sum_axis(Axis(0));
            dh = dh + dz.dot(&blk.w);
        }
        Ok((grads, dh))
    }
}

fn column_stats(z: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let m = z.nrows() as f64;
    let mean = z.sum_axis(Axis(0)) / m;
    let var = (z - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / m;
    (mean, var)
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    y: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    /// Biased batch variance (the one used for normalisation).
    batch_var: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    phase: Phase,
    blocks: Vec<BlockCache>,
    last_hidden: Array2<f64>,
}

impl MlpCache {
    /// Smallest distance of any pre-activation from the activation kink,
    /// measured in units of a perturbation of that unit's own weights.
    pub fn kink_distance(&self, params: &MlpParams) -> f64 {
        let mut best = f64::INFINITY;
        for (bc, blk) in self.blocks.iter().zip(&params.blocks) {
            for (y_row, in_row) in bc.y.rows().into_iter().zip(bc.input.rows()) {
                let reach = in_row.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
                for (j, y) in y_row.iter().enumerate() {
                    let gain = blk.bn_gamma[j].abs() * bc.inv_std[j] * reach;
                    best = best.min(y.abs() / gain.max(f64::MIN_POSITIVE));
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub blocks: Vec<BlockGrads>,
    pub w_h: Array1<f64>,
    pub b_h: f64,
}

impl MlpGrads {
    pub fn zeros(d: usize, num_blocks: usize) -> Self {
        Self {
            blocks: (0..num_blocks)
                .map(|_| BlockGrads {
                    w: Array2::zeros((d, d)),
                    b: Array1::zeros(d),
                    bn_gamma: Array1::zeros(d),
                    bn_beta: Array1::zeros(d),
                })
                .collect(),
            w_h: Array1::zeros(d),
            b_h: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::init_rng;
    use ndarray::array;

    #[test]
    fn zero_network_outputs_head_bias() {
        let mut p = MlpParams::init(3, 2, &mut init_rng(1));
        for blk in &mut p.blocks {
            blk.w.fill(0.0);
            blk.b.fill(0.0);
            blk.bn_beta.fill(0.0);
        }
        p.w_h.fill(0.0);
        p.b_h = 0.25;
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, 9.0]];
        assert_eq!(p.scores(x.view()).unwrap(), array![0.25, 0.25]);
        let (s, _) = p.forward(x.view(), Phase::Train).unwrap();
        assert_eq!(s, array![0.25, 0.25]);
    }

    #[test]
    fn single_unit_eval_hand_arithmetic() {
        let mut p = MlpParams::init(1, 1, &mut init_rng(0));
        let blk = &mut p.blocks[0];
        blk.w = array![[2.0]];
        blk.b = array![-1.0];
        blk.bn_gamma = array![0.5];
        blk.bn_beta = array![0.25];
        blk.bn_running_mean = array![0.0];
        blk.bn_running_var = array![1.0];
        p.w_h = array![3.0];
        p.b_h = 0.1;
        let eps = p.bn_eps;
        let score = |x: f64| {
            let z = 2.0 * x - 1.0;
            let y = 0.5 * z / (1.0 + eps).sqrt() + 0.25;
            let a = if y > 0.0 { y } else { 0.01 * y };
            3.0 * (x + a) + 0.1
        };
        let s = p.scores(array![[2.0], [-1.0]].view()).unwrap();
        assert!((s[0] - score(2.0)).abs() < 1e-12);
        assert!((s[1] - score(-1.0)).abs() < 1e-12);
        // negative branch of the leaky unit is exercised by x = -1
        assert!(0.5 * (-3.0) / (1.0 + eps).sqrt() + 0.25 < 0.0);
    }

    #[test]
    fn eval_duplicate_rows_score_identically() {
        let p = MlpParams::init(4, 4, &mut init_rng(9));
        let x = array![
            [0.1, 0.2, 0.3, 0.4],
            [0.1, 0.2, 0.3, 0.4],
            [1.0, 0.0, -1.0, 2.0]
        ];
        let s = p.scores(x.view()).unwrap();
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn train_phase_needs_two_rows() {
        let p = MlpParams::init(2, 1, &mut init_rng(0));
        let x = array![[1.0, 2.0]];
        assert!(matches!(
            p.forward(x.view(), Phase::Train),
            Err(Error::Validation(_))
        ));
        assert!(p.forward(x.view(), Phase::Eval).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = MlpParams::init(1, 1, &mut init_rng(0));
        p.blocks[0].w = array![[1.0]];
        p.blocks[0].b = array![0.0];
        let x = array![[1.0], [3.0]];
        let (_, cache) = p.forward(x.view(), Phase::Train).unwrap();
        p.apply_batch_stats(&cache);
        // batch mean 2, unbiased var 2
        assert!((p.blocks[0].bn_running_mean[0] - 0.2).abs() < 1e-12);
        assert!((p.blocks[0].bn_running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
