//! Knowledge enhancement: residuals to the nearest normal and abnormal bank
//! rows, optional cross-attention against the image's own patches, and the
//! shared projection that forms the `3C`-wide enhanced representation.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory_bank::DualMemoryBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnowledgeMode {
    pub use_attention: bool,
    pub use_distance: bool,
}

impl Default for KnowledgeMode {
    fn default() -> Self {
        Self {
            use_attention: true,
            use_distance: true,
        }
    }
}

/// Key and value embeddings of the patch features. With `shared` set the
/// value map reuses the key weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub shared: bool,
}

impl AttentionParams {
    pub fn init(c: usize, shared: bool, rng: &mut ChaCha8Rng) -> Self {
        let (w_k, b_k) = linear_init(c, c, rng);
        let (w_v, b_v) = linear_init(c, c, rng);
        Self {
            w_k,
            b_k,
            w_v,
            b_v,
            shared,
        }
    }

    pub fn identity(c: usize) -> Self {
        Self {
            w_k: Array2::eye(c),
            b_k: Array1::zeros(c),
            w_v: Array2::eye(c),
            b_v: Array1::zeros(c),
            shared: false,
        }
    }

    fn value_map(&self) -> (&Array2<f64>, &Array1<f64>) {
        if self.shared {
            (&self.w_k, &self.b_k)
        } else {
            (&self.w_v, &self.b_v)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub w_p: Array2<f64>,
    pub b_p: Array1<f64>,
}

impl ProjectionParams {
    pub fn init(c: usize, rng: &mut ChaCha8Rng) -> Self {
        let (w_p, b_p) = linear_init(c, c, rng);
        Self { w_p, b_p }
    }

    pub fn identity(c: usize) -> Self {
        Self {
            w_p: Array2::eye(c),
            b_p: Array1::zeros(c),
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        affine(x, &self.w_p, &self.b_p)
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
pub(crate) fn linear_init(
    out: usize,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array1<f64>) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let w = Array2::from_shape_fn((out, fan_in), |_| dist.sample(rng));
    let b = Array1::from_shape_fn(out, |_| dist.sample(rng));
    (w, b)
}

/// `x W^T + b`.
pub(crate) fn affine(x: ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

/// Per-patch `N x 3C` representation; column blocks are (feature,
/// normal knowledge, abnormal knowledge).
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedRepresentation {
    pub c: usize,
    pub data: Array2<f64>,
}

impl EnhancedRepresentation {
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn block(&self, i: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![.., i * self.c..(i + 1) * self.c])
    }
}

fn same_shape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Signed residual `q - q_star`.
pub fn knowledge_distance(
    q: ArrayView2<'_, f64>,
    q_star: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    same_shape(q, q_star, "knowledge distance")?;
    Ok(&q - &q_star)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Intermediates of one cross-attention evaluation, kept for backprop.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q_star: Array2<f64>,
    pub q: Array2<f64>,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    pub weights: Array2<f64>,
}

/// Scaled dot-product attention with the nearest-neighbour rows as queries
/// and keys/values embedded from the patch features themselves.
pub fn cross_attention(
    q_star: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    params: &AttentionParams,
) -> Result<Array2<f64>> {
    cross_attention_cached(q_star, q, params).map(|(out, _)| out)
}

pub fn cross_attention_cached(
    q_star: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    params: &AttentionParams,
) -> Result<(Array2<f64>, AttentionCache)> {
    same_shape(q_star, q, "cross attention")?;
    let (n, c) = q.dim();
    if n == 0 {
        return Err(Error::validation(
            "cross attention needs at least one patch",
        ));
    }
    if params.w_k.dim() != (c, c) {
        return Err(Error::validation(format!(
            "attention weights are {:?}, features have {c} channels",
            params.w_k.dim()
        )));
    }
    let keys = affine(q, &params.w_k, &params.b_k);
    let (w_v, b_v) = params.value_map();
    let values = affine(q, w_v, b_v);
    let logits = q_star.dot(&keys.t()) / (c as f64).sqrt();
    let weights = softmax_rows(&logits);
    let out = weights.dot(&values);
    if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            row: pos / c,
            what: "non-finite cross-attention output".into(),
        });
    }
    Ok((
        out,
        AttentionCache {
            q_star: q_star.to_owned(),
            q: q.to_owned(),
            keys,
            values,
            weights,
        },
    ))
}

/// Gradients of the attention embeddings.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
}

impl AttentionGrads {
    pub fn zeros(c: usize) -> Self {
        Self {
            w_k: Array2::zeros((c, c)),
            b_k: Array1::zeros(c),
            w_v: Array2::zeros((c, c)),
            b_v: Array1::zeros(c),
        }
    }
}

/// Accumulates parameter gradients of one attention output given `d_out`.
/// Queries and patch features are bank/input constants.
pub fn cross_attention_backward(
    cache: &AttentionCache,
    d_out: ArrayView2<'_, f64>,
    shared: bool,
    grads: &mut AttentionGrads,
) {
    let c = cache.q.ncols() as f64;
    let d_weights = d_out.dot(&cache.values.t());
    let d_values = cache.weights.t().dot(&d_out);
    let row_dot = (&d_weights * &cache.weights)
        .sum_axis(Axis(1))
        .insert_axis(Axis(1));
    let d_logits = &cache.weights * &(&d_weights - &row_dot);
    let d_keys = d_logits.t().dot(&cache.q_star) / c.sqrt();

    grads.w_k += &d_keys.t().dot(&cache.q);
    grads.b_k += &d_keys.sum_axis(Axis(0));
    let (gw, gb) = if shared {
        (&mut grads.w_k, &mut grads.b_k)
    } else {
        (&mut grads.w_v, &mut grads.b_v)
    };
    *gw += &d_values.t().dot(&cache.q);
    *gb += &d_values.sum_axis(Axis(0));
}

/// Residual plus attention when attention is enabled, residual alone otherwise.
pub fn knowledge(
    d: ArrayView2<'_, f64>,
    a: Option<ArrayView2<'_, f64>>,
    mode: KnowledgeMode,
) -> Result<Array2<f64>> {
    match (mode.use_attention, a) {
        (true, Some(a)) => {
            same_shape(d, a, "knowledge")?;
            Ok(&d + &a)
        }
        (false, None) => Ok(d.to_owned()),
        (true, None) => Err(Error::validation(
            "attention enabled but no attention term given",
        )),
        (false, Some(_)) => Err(Error::validation(
            "attention disabled but an attention term was given",
        )),
    }
}

/// Projects the feature and both knowledge matrices with the shared layer
/// and concatenates them along channels.
pub fn enhance(
    q: ArrayView2<'_, f64>,
    k_n: ArrayView2<'_, f64>,
    k_a: ArrayView2<'_, f64>,
    proj: &ProjectionParams,
) -> Result<EnhancedRepresentation> {
    same_shape(q, k_n, "enhance")?;
    same_shape(q, k_a, "enhance")?;
    if proj.w_p.dim() != (q.ncols(), q.ncols()) {
        return Err(Error::validation(format!(
            "projection is {:?}, features have {} channels",
            proj.w_p.dim(),
            q.ncols()
        )));
    }
    let blocks = [proj.apply(q), proj.apply(k_n), proj.apply(k_a)];
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(EnhancedRepresentation {
        c: q.ncols(),
        data: concatenate(Axis(1), &views).expect("blocks share row count"),
    })
}

/// Nearest rows of `q` in both banks. A missing abnormal bank yields `None`.
pub fn bank_neighbours(
    q: ArrayView2<'_, f64>,
    dual: &DualMemoryBank,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    if q.ncols() != dual.c() {
        return Err(Error::validation(format!(
            "features have {} channels, banks have {}",
            q.ncols(),
            dual.c()
        )));
    }
    let nn = dual.normal.nearest_rows(q)?;
    let na = dual
        .abnormal
        .as_ref()
        .map(|b| b.nearest_rows(q))
        .transpose()?;
    Ok((nn, na))
}

/// Knowledge for one neighbour set: residual (if enabled) plus attention (if enabled).
pub(crate) fn knowledge_term(
    q: ArrayView2<'_, f64>,
    q_star: ArrayView2<'_, f64>,
    attn: &AttentionParams,
    mode: KnowledgeMode,
) -> Result<(Array2<f64>, Option<AttentionCache>)> {
    let d = if mode.use_distance {
        knowledge_distance(q, q_star)?
    } else {
        Array2::zeros(q.dim())
    };
    if mode.use_attention {
        let (a, cache) = cross_attention_cached(q_star, q, attn)?;
        Ok((knowledge(d.view(), Some(a.view()), mode)?, Some(cache)))
    } else {
        Ok((knowledge(d.view(), None, mode)?, None))
    }
}

/// Full enhancement of a set of patches against the dual bank.
pub fn enhance_pipeline(
    q: ArrayView2<'_, f64>,
    dual: &DualMemoryBank,
    attn: &AttentionParams,
    proj: &ProjectionParams,
    mode: KnowledgeMode,
) -> Result<EnhancedRepresentation> {
    let (nn, na) = bank_neighbours(q, dual)?;
    let (k_n, _) = knowledge_term(q, nn.view(), attn, mode)?;
    let k_a = match na {
        Some(na) => knowledge_term(q, na.view(), attn, mode)?.0,
        None => Array2::zeros(q.dim()),
    };
    enhance(q, k_n.view(), k_a.view(), proj)
}

/// Fresh generator for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
