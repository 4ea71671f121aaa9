//! The trainable scorer as a whole: shared projection, attention embeddings
//! and the residual MLP, with a batched forward/backward over patch sets.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::loss::{hinge_loss, hinge_loss_grad, LossConfig, LossTerms};
use super::mlp::{MlpCache, MlpGrads, MlpParams, Phase};
use crate::error::{Error, Result};
use crate::knowledge::{
    bank_neighbours, cross_attention_backward, enhance, knowledge_term, AttentionCache,
    AttentionGrads, AttentionParams, EnhancedRepresentation, KnowledgeMode, ProjectionParams,
};
use crate::memory_bank::DualMemoryBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Projection,
    Attention,
    Mlp,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Projection,
        ParamGroup::Attention,
        ParamGroup::Mlp,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub c: usize,
    pub mode: KnowledgeMode,
    pub proj: ProjectionParams,
    pub attn: AttentionParams,
    pub mlp: MlpParams,
}

/// One image's patches (or its filtered anomalous patches) with their
/// nearest bank rows. Neighbours are constants for differentiation.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub q: Array2<f64>,
    pub nn: Array2<f64>,
    pub na: Option<Array2<f64>>,
}

impl PatchSet {
    pub fn new(q: Array2<f64>, dual: &DualMemoryBank) -> Result<Self> {
        let (nn, na) = bank_neighbours(q.view(), dual)?;
        Ok(Self { q, nn, na })
    }

    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.nrows() == 0
    }
}

struct SetCache {
    k_n: Array2<f64>,
    k_a: Array2<f64>,
    attn_n: Option<AttentionCache>,
    attn_a: Option<AttentionCache>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub w_p: Array2<f64>,
    pub b_p: Array1<f64>,
    pub attn: AttentionGrads,
    pub mlp: MlpGrads,
}

/// Result of a train-phase pass over one batch.
pub struct StepOutput {
    pub loss: LossTerms,
    pub grads: ModelGrads,
    pub mlp_cache: MlpCache,
    /// Smallest distance of any hinge argument from its kink.
    pub hinge_distance: f64,
}

impl ModelParams {
    pub fn init(
        c: usize,
        mode: KnowledgeMode,
        num_blocks: usize,
        shared_kv: bool,
        seed: u64,
    ) -> Self {
        let mut rng = crate::knowledge::init_rng(seed);
        let proj = ProjectionParams::init(c, &mut rng);
        let attn = AttentionParams::init(c, shared_kv, &mut rng);
        let mlp = MlpParams::init(3 * c, num_blocks, &mut rng);
        Self {
            c,
            mode,
            proj,
            attn,
            mlp,
        }
    }

    fn enhance_set(&self, set: &PatchSet) -> Result<(EnhancedRepresentation, SetCache)> {
        let (k_n, attn_n) = knowledge_term(set.q.view(), set.nn.view(), &self.attn, self.mode)?;
        let (k_a, attn_a) = match &set.na {
            Some(na) => knowledge_term(set.q.view(), na.view(), &self.attn, self.mode)?,
            None => (Array2::zeros(set.q.dim()), None),
        };
        let rep = enhance(set.q.view(), k_n.view(), k_a.view(), &self.proj)?;
        Ok((
            rep,
            SetCache {
                k_n,
                k_a,
                attn_n,
                attn_a,
            },
        ))
    }

    /// Enhanced representation of a patch set (inference path, no caches kept).
    pub fn represent(&self, set: &PatchSet) -> Result<EnhancedRepresentation> {
        self.enhance_set(set).map(|(r, _)| r)
    }

    /// Per-patch anomaly scores `s = -psi(o)` in eval phase.
    pub fn anomaly_scores(&self, set: &PatchSet) -> Result<Array1<f64>> {
        let rep = self.represent(set)?;
        Ok(-self.mlp.scores(rep.data.view())?)
    }

    /// Train-phase loss and exact gradients for one batch.
    ///
    /// Rows fed to the MLP are stacked as normal, pseudo-negative
    /// (`normal + noise`, only when `lambda1 > 0`), then anomalous; batch
    /// norm statistics span the whole stack.
    pub fn forward_backward(
        &self,
        normal: &[PatchSet],
        anomalous: &[PatchSet],
        noise: ArrayView2<'_, f64>,
        loss_cfg: &LossConfig,
    ) -> Result<StepOutput> {
        let with_p = loss_cfg.lambda1 > 0.0;
        let with_a = loss_cfg.lambda2 > 0.0;
        if normal.is_empty() {
            return Err(Error::validation("batch has no normal patch sets"));
        }
        if with_a && anomalous.iter().all(PatchSet::is_empty) {
            return Err(Error::validation(
                "lambda2 > 0 but the batch has no anomalous patches",
            ));
        }

        let mut reps_n = Vec::with_capacity(normal.len());
        let mut caches_n = Vec::with_capacity(normal.len());
        for set in normal {
            let (r, c) = self.enhance_set(set)?;
            reps_n.push(r.data);
            caches_n.push(c);
        }
        let mut reps_a = Vec::new();
        let mut caches_a = Vec::new();
        if with_a {
            for set in anomalous.iter().filter(|s| !s.is_empty()) {
                let (r, c) = self.enhance_set(set)?;
                reps_a.push(r.data);
                caches_a.push(c);
            }
        }
        let o_n = stack(&reps_n);
        let n_rows = o_n.nrows();
        let o_p = if with_p {
            if noise.dim() != o_n.dim() {
                return Err(Error::validation(format!(
                    "noise is {:?}, normal representation is {:?}",
                    noise.dim(),
                    o_n.dim()
                )));
            }
            Some(&o_n + &noise)
        } else {
            None
        };
        let mut parts = vec![o_n.view()];
        if let Some(p) = &o_p {
            parts.push(p.view());
        }
        let o_a = if with_a { Some(stack(&reps_a)) } else { None };
        if let Some(a) = &o_a {
            parts.push(a.view());
        }
        let x = concatenate(Axis(0), &parts).expect("column counts agree");
        let (psi, mlp_cache) = self.mlp.forward(x.view(), Phase::Train)?;

        let p_rows = if with_p { n_rows } else { 0 };
        let psi_n = psi.slice(s![..n_rows]).to_vec();
        let psi_p = psi.slice(s![n_rows..n_rows + p_rows]).to_vec();
        let psi_a = with_a.then(|| psi.slice(s![n_rows + p_rows..]).to_vec());
        let loss = hinge_loss(&psi_n, &psi_p, psi_a.as_deref(), loss_cfg)?;
        let (g_n, g_p, g_a) = hinge_loss_grad(&psi_n, &psi_p, psi_a.as_deref(), loss_cfg)?;
        let d_psi = concatenate(Axis(0), &[g_n.view(), g_p.view(), g_a.view()]).expect("1-d");

        let (mlp_grads, d_x) = self.mlp.backward(&mlp_cache, &d_psi)?;
        let mut d_on = d_x.slice(s![..n_rows, ..]).to_owned();
        if with_p {
            d_on += &d_x.slice(s![n_rows..2 * n_rows, ..]);
        }
        let d_oa = d_x.slice(s![n_rows + p_rows.., ..]);

        let mut grads = ModelGrads {
            w_p: Array2::zeros((self.c, self.c)),
            b_p: Array1::zeros(self.c),
            attn: AttentionGrads::zeros(self.c),
            mlp: mlp_grads,
        };
        let mut offset = 0;
        for (set, cache) in normal.iter().zip(&caches_n) {
            let rows = d_on.slice(s![offset..offset + set.len(), ..]);
            self.backprop_set(set, cache, rows, &mut grads);
            offset += set.len();
        }
        offset = 0;
        for (set, cache) in anomalous.iter().filter(|s| !s.is_empty()).zip(&caches_a) {
            let rows = d_oa.slice(s![offset..offset + set.len(), ..]);
            self.backprop_set(set, cache, rows, &mut grads);
            offset += set.len();
        }
        let m = loss_cfg.margin;
        let hinge_distance = psi_n
            .iter()
            .map(|v| m - v)
            .chain(psi_p.iter().chain(psi_a.iter().flatten()).map(|v| m + v))
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
        Ok(StepOutput {
            loss,
            grads,
            mlp_cache,
            hinge_distance,
        })
    }

    fn backprop_set(
        &self,
        set: &PatchSet,
        cache: &SetCache,
        d_o: ArrayView2<'_, f64>,
        grads: &mut ModelGrads,
    ) {
        let c = self.c;
        let inputs = [&set.q, &cache.k_n, &cache.k_a];
        for (i, input) in inputs.iter().enumerate() {
            let d_block = d_o.slice(s![.., i * c..(i + 1) * c]);
            grads.w_p += &d_block.t().dot(*input);
            grads.b_p += &d_block.sum_axis(Axis(0));
            let attn_cache = match i {
                1 => cache.attn_n.as_ref(),
                2 => cache.attn_a.as_ref(),
                _ => None,
            };
            if let Some(ac) = attn_cache {
                let d_k = d_block.dot(&self.proj.w_p);
                cross_attention_backward(ac, d_k.view(), self.attn.shared, &mut grads.attn);
            }
        }
    }

    /// Trainable tensors in a fixed order, with their optimizer group.
    pub fn trainable_mut(&mut self) -> Vec<(String, ParamGroup, &mut [f64])> {
        let mut out: Vec<(String, ParamGroup, &mut [f64])> = vec![
            (
                "proj.w".into(),
                ParamGroup::Projection,
                self.proj.w_p.as_slice_mut().unwrap(),
            ),
            (
                "proj.b".into(),
                ParamGroup::Projection,
                self.proj.b_p.as_slice_mut().unwrap(),
            ),
            (
                "attn.w_k".into(),
                ParamGroup::Attention,
                self.attn.w_k.as_slice_mut().unwrap(),
            ),
            (
                "attn.b_k".into(),
                ParamGroup::Attention,
                self.attn.b_k.as_slice_mut().unwrap(),
            ),
            (
                "attn.w_v".into(),
                ParamGroup::Attention,
                self.attn.w_v.as_slice_mut().unwrap(),
            ),
            (
                "attn.b_v".into(),
                ParamGroup::Attention,
                self.attn.b_v.as_slice_mut().unwrap(),
            ),
        ];
        for (i, blk) in self.mlp.blocks.iter_mut().enumerate() {
            out.push((
                format!("mlp.block{i}.w"),
                ParamGroup::Mlp,
                blk.w.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("mlp.block{i}.b"),
                ParamGroup::Mlp,
                blk.b.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("mlp.block{i}.bn_gamma"),
                ParamGroup::Mlp,
                blk.bn_gamma.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("mlp.block{i}.bn_beta"),
                ParamGroup::Mlp,
                blk.bn_beta.as_slice_mut().unwrap(),
            ));
        }
        out.push((
            "mlp.head.w".into(),
            ParamGroup::Mlp,
            self.mlp.w_h.as_slice_mut().unwrap(),
        ));
        out.push((
            "mlp.head.b".into(),
            ParamGroup::Mlp,
            std::slice::from_mut(&mut self.mlp.b_h),
        ));
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, blk) in self.mlp.blocks.iter_mut().enumerate() {
            out.push((
                format!("mlp.block{i}.running_mean"),
                blk.bn_running_mean.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("mlp.block{i}.running_var"),
                blk.bn_running_var.as_slice_mut().unwrap(),
            ));
        }
        out
    }

    pub fn num_blocks(&self) -> usize {
        self.mlp.blocks.len()
    }
}

impl ModelGrads {
    /// Gradient tensors in the same order as [`ModelParams::trainable_mut`].
    pub fn slices(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out: Vec<(ParamGroup, &[f64])> = vec![
            (ParamGroup::Projection, self.w_p.as_slice().unwrap()),
            (ParamGroup::Projection, self.b_p.as_slice().unwrap()),
            (ParamGroup::Attention, self.attn.w_k.as_slice().unwrap()),
            (ParamGroup::Attention, self.attn.b_k.as_slice().unwrap()),
            (ParamGroup::Attention, self.attn.w_v.as_slice().unwrap()),
            (ParamGroup::Attention, self.attn.b_v.as_slice().unwrap()),
        ];
        for blk in &self.mlp.blocks {
            out.push((ParamGroup::Mlp, blk.w.as_slice().unwrap()));
            out.push((ParamGroup::Mlp, blk.b.as_slice().unwrap()));
            out.push((ParamGroup::Mlp, blk.bn_gamma.as_slice().unwrap()));
            out.push((ParamGroup::Mlp, blk.bn_beta.as_slice().unwrap()));
        }
        out.push((ParamGroup::Mlp, self.mlp.w_h.as_slice().unwrap()));
        out.push((ParamGroup::Mlp, std::slice::from_ref(&self.mlp.b_h)));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.w_p.as_slice_mut().unwrap(),
            self.b_p.as_slice_mut().unwrap(),
            self.attn.w_k.as_slice_mut().unwrap(),
            self.attn.b_k.as_slice_mut().unwrap(),
            self.attn.w_v.as_slice_mut().unwrap(),
            self.attn.b_v.as_slice_mut().unwrap(),
        ];
        for blk in &mut self.mlp.blocks {
            out.push(blk.w.as_slice_mut().unwrap());
            out.push(blk.b.as_slice_mut().unwrap());
            out.push(blk.bn_gamma.as_slice_mut().unwrap());
            out.push(blk.bn_beta.as_slice_mut().unwrap());
        }
        out.push(self.mlp.w_h.as_slice_mut().unwrap());
        out.push(std::slice::from_mut(&mut self.mlp.b_h));
        out
    }

    pub fn all_zero(&self) -> bool {
        self.slices()
            .iter()
            .all(|(_, s)| s.iter().all(|&v| v == 0.0))
    }
}

fn stack(mats: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
    concatenate(Axis(0), &views).expect("representations share width")
}
