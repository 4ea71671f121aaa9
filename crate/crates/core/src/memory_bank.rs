//! Normal and abnormal memory banks: construction, persistence and exact
//! nearest-neighbour lookup.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureGrid, PatchMask};

pub const BANK_MAGIC: &[u8; 4] = b"DMBK";
pub const BANK_VERSION: u16 = 1;

/// Training setting: normal data only, or normal data plus a few annotated anomalies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unsupervised,
    SemiSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    Normal = 0,
    PseudoOutlier = 1,
    SeenAnomaly = 2,
    CenterSampled = 3,
    ComposedAbnormal = 4,
}

impl BankKind {
    pub const ALL: [BankKind; 5] = [
        BankKind::Normal,
        BankKind::PseudoOutlier,
        BankKind::SeenAnomaly,
        BankKind::CenterSampled,
        BankKind::ComposedAbnormal,
    ];

    fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BankKind::Normal => "normal",
            BankKind::PseudoOutlier => "pseudo_outlier",
            BankKind::SeenAnomaly => "seen_anomaly",
            BankKind::CenterSampled => "center_sampled",
            BankKind::ComposedAbnormal => "composed_abnormal",
        }
    }
}

impl fmt::Display for BankKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Row counts contributed per kind, indexed by `BankKind as usize`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Provenance(pub [u64; 5]);

impl Provenance {
    pub fn single(kind: BankKind, rows: usize) -> Self {
        let mut p = [0; 5];
        p[kind as usize] = rows as u64;
        Self(p)
    }

    pub fn get(&self, kind: BankKind) -> u64 {
        self.0[kind as usize]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().fold(0u64, |a, &b| a.saturating_add(b))
    }

    /// Non-zero entries in kind order.
    pub fn entries(&self) -> Vec<(BankKind, u64)> {
        BankKind::ALL
            .iter()
            .filter(|&&k| self.get(k) > 0)
            .map(|&k| (k, self.get(k)))
            .collect()
    }
}

/// An immutable set of reference feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    kind: BankKind,
    rows: Array2<f32>,
    provenance: Provenance,
}

impl MemoryBank {
    pub fn new(kind: BankKind, rows: Array2<f32>) -> Result<Self> {
        let provenance = Provenance::single(kind, rows.nrows());
        Self::with_provenance(kind, rows, provenance)
    }

    pub fn with_provenance(
        kind: BankKind,
        rows: Array2<f32>,
        provenance: Provenance,
    ) -> Result<Self> {
        if rows.ncols() == 0 {
            return Err(Error::validation(
                "bank rows must have at least one channel",
            ));
        }
        if rows.nrows() == 0 && kind != BankKind::CenterSampled {
            return Err(Error::EmptyBank(format!(
                "{kind} bank must have at least one row"
            )));
        }
        if provenance.total() != rows.nrows() as u64 {
            return Err(Error::validation(format!(
                "provenance sums to {} but bank has {} rows",
                provenance.total(),
                rows.nrows()
            )));
        }
        if let Some(i) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite bank value in row {}",
                i / rows.ncols()
            )));
        }
        Ok(Self {
            kind,
            rows,
            provenance,
        })
    }

    fn from_vectors(kind: BankKind, c: usize, vectors: &[Vec<f32>]) -> Result<Self> {
        let flat: Vec<f32> = vectors.iter().flatten().copied().collect();
        let rows = Array2::from_shape_vec((vectors.len(), c), flat)
            .map_err(|e| Error::validation(format!("bank rows: {e}")))?;
        Self::new(kind, rows)
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn c(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn rows(&self) -> ArrayView2<'_, f32> {
        self.rows.view()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.c();
        &self.rows.as_slice().expect("bank rows are contiguous")[i * c..(i + 1) * c]
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Index of the row closest to `q` in Euclidean distance, lowest index on ties.
    pub fn nearest(&self, q: &[f64]) -> Result<(usize, &[f32])> {
        if self.is_empty() {
            return Err(Error::EmptyBank(format!(
                "nearest query on empty {} bank",
                self.kind
            )));
        }
        if q.len() != self.c() {
            return Err(Error::validation(format!(
                "query has {} channels, bank has {}",
                q.len(),
                self.c()
            )));
        }
        let idx = self.nearest_unchecked(q);
        Ok((idx, self.row(idx)))
    }

    fn nearest_unchecked(&self, q: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, row) in self.rows.outer_iter().enumerate() {
            let mut d = 0.0;
            for (a, &b) in q.iter().zip(row.iter()) {
                let t = a - b as f64;
                d += t * t;
            }
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Nearest row index for every query row. Queries are independent, so
    /// they are split across the rayon pool; output order follows input order.
    pub fn nearest_batch(&self, queries: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::EmptyBank(format!(
                "nearest query on empty {} bank",
                self.kind
            )));
        }
        if queries.ncols() != self.c() {
            return Err(Error::validation(format!(
                "queries have {} channels, bank has {}",
                queries.ncols(),
                self.c()
            )));
        }
        let rows: Vec<Vec<f64>> = queries.outer_iter().map(|r| r.to_vec()).collect();
        Ok(rows.par_iter().map(|q| self.nearest_unchecked(q)).collect())
    }

    /// Gathers the nearest bank row for every query as an `n x c` f64 matrix.
    pub fn nearest_rows(&self, queries: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let idx = self.nearest_batch(queries)?;
        Ok(self.rows.select(Axis(0), &idx).mapv(f64::from))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(BANK_MAGIC);
        w.u16(BANK_VERSION);
        w.u8(self.kind as u8);
        w.u32(self.c() as u32);
        w.u64(self.len() as u64);
        for p in self.provenance.0 {
            w.u64(p);
        }
        w.f32s(self.rows.as_slice().expect("bank rows are contiguous"));
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "bank file");
        r.magic(BANK_MAGIC)?;
        let version = r.u16()?;
        if version != BANK_VERSION {
            return Err(Error::format(format!(
                "bank file: unsupported version {version}"
            )));
        }
        let kind_byte = r.u8()?;
        let kind = BankKind::from_u8(kind_byte)
            .ok_or_else(|| Error::format(format!("bank file: unknown kind {kind_byte}")))?;
        let c = r.u32()? as usize;
        let k = usize::try_from(r.u64()?)
            .map_err(|_| Error::format("bank file: row count overflows"))?;
        let mut prov = [0u64; 5];
        for p in &mut prov {
            *p = r.u64()?;
        }
        let count = k
            .checked_mul(c)
            .ok_or_else(|| Error::format("bank file: declared size overflows"))?;
        let data = r.finite_f32s(count)?;
        r.finish()?;
        let rows = Array2::from_shape_vec((k, c), data)
            .map_err(|e| Error::format(format!("bank file: {e}")))?;
        Self::with_provenance(kind, rows, Provenance(prov))
            .map_err(|e| Error::format(format!("bank file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Normal bank plus the composed abnormal bank. `abnormal` is `None` only
/// for ablations that exclude every abnormal source.
#[derive(Debug, Clone, PartialEq)]
pub struct DualMemoryBank {
    pub normal: MemoryBank,
    pub abnormal: Option<MemoryBank>,
    pub mode: Mode,
}

impl DualMemoryBank {
    pub fn new(normal: MemoryBank, abnormal: Option<MemoryBank>, mode: Mode) -> Result<Self> {
        if normal.kind() != BankKind::Normal {
            return Err(Error::validation(format!(
                "normal slot holds a {} bank",
                normal.kind()
            )));
        }
        if let Some(ab) = &abnormal {
            if ab.kind() != BankKind::ComposedAbnormal {
                return Err(Error::validation(format!(
                    "abnormal slot holds a {} bank",
                    ab.kind()
                )));
            }
            if ab.c() != normal.c() {
                return Err(Error::validation(format!(
                    "channel mismatch: normal bank {} vs abnormal bank {}",
                    normal.c(),
                    ab.c()
                )));
            }
            if mode == Mode::Unsupervised
                && ab
                    .provenance()
                    .entries()
                    .iter()
                    .any(|(k, _)| *k != BankKind::PseudoOutlier)
            {
                return Err(Error::validation(
                    "unsupervised abnormal bank may only contain pseudo-outlier rows",
                ));
            }
        }
        Ok(Self {
            normal,
            abnormal,
            mode,
        })
    }

    pub fn c(&self) -> usize {
        self.normal.c()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoresetConfig {
    pub retention: f64,
    pub seed: u64,
    /// When set, distances are computed on a seeded Gaussian random
    /// projection to this many dimensions. Off by default.
    pub projection_dim: Option<usize>,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        Self {
            retention: 0.02,
            seed: 0,
            projection_dim: None,
        }
    }
}

impl CoresetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.retention > 0.0 && self.retention <= 1.0) {
            return Err(Error::validation(format!(
                "coreset retention must be in (0, 1], got {}",
                self.retention
            )));
        }
        if self.projection_dim == Some(0) {
            return Err(Error::validation("coreset projection_dim must be positive"));
        }
        Ok(())
    }

    pub fn target_size(&self, k: usize) -> usize {
        ((self.retention * k as f64).round() as usize).clamp(1, k.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub beta: f64,
    pub pair_seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            beta: 0.6,
            pair_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CenterSamplingConfig {
    pub count: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CenterSamplingConfig {
    fn default() -> Self {
        Self {
            count: 1024,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

/// k-center greedy (farthest point) subsampling.
///
/// The first index is drawn uniformly from the seed; each later pick is the
/// row with the largest distance to its closest selected row, lowest index
/// on ties.
pub fn greedy_coreset(points: ArrayView2<'_, f32>, config: &CoresetConfig) -> Result<Vec<usize>> {
    config.validate()?;
    let k = points.nrows();
    if k == 0 {
        return Err(Error::validation("coreset input is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let first = rng.random_range(0..k);
    let m = config.target_size(k);
    match config.projection_dim {
        None => Ok(greedy_coreset_from(points.mapv(f64::from).view(), m, first)),
        Some(dim) => {
            let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
            let proj = Array2::from_shape_fn((points.ncols(), dim), |_| normal.sample(&mut rng));
            let projected = points.mapv(f64::from).dot(&proj);
            Ok(greedy_coreset_from(projected.view(), m, first))
        }
    }
}

/// Farthest-point iteration from a fixed first pick, selecting `m` rows.
pub fn greedy_coreset_from(points: ArrayView2<'_, f64>, m: usize, first: usize) -> Vec<usize> {
    let k = points.nrows();
    let m = m.min(k);
    let mut selected = Vec::with_capacity(m);
    if m == 0 {
        return selected;
    }
    let mut min_dist = vec![f64::INFINITY; k];
    let mut next = first;
    while selected.len() < m {
        selected.push(next);
        let center = points.row(next);
        min_dist.par_iter_mut().enumerate().for_each(|(i, md)| {
            let mut d = 0.0;
            for (a, b) in points.row(i).iter().zip(center.iter()) {
                let t = a - b;
                d += t * t;
            }
            if d < *md {
                *md = d;
            }
        });
        min_dist[next] = f64::NEG_INFINITY;
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        next = best;
    }
    selected
}

fn pool_grids<'a>(grids: impl IntoIterator<Item = &'a FeatureGrid>) -> Result<(usize, Vec<f32>)> {
    let mut c = None;
    let mut flat = Vec::new();
    for g in grids {
        match c {
            None => c = Some(g.c),
            Some(c0) if c0 != g.c => {
                return Err(Error::validation(format!(
                    "mixed channel counts: {c0} vs {} in {}",
                    g.c, g.image_id
                )))
            }
            _ => {}
        }
        flat.extend_from_slice(&g.data);
    }
    let c = c.ok_or_else(|| Error::validation("no feature grids to pool"))?;
    Ok((c, flat))
}

fn coreset_bank(
    kind: BankKind,
    c: usize,
    flat: Vec<f32>,
    coreset: &CoresetConfig,
) -> Result<MemoryBank> {
    let k = flat.len() / c;
    let pool =
        Array2::from_shape_vec((k, c), flat).map_err(|e| Error::validation(e.to_string()))?;
    let idx = greedy_coreset(pool.view(), coreset)?;
    log::debug!("{kind} coreset kept {} of {k} rows", idx.len());
    MemoryBank::new(kind, pool.select(Axis(0), &idx))
}

/// Coreset of every patch of every normal grid, pooled across objects.
pub fn build_normal_bank(
    normal_grids: &[FeatureGrid],
    coreset: &CoresetConfig,
) -> Result<MemoryBank> {
    if normal_grids.is_empty() {
        return Err(Error::validation("no normal training images"));
    }
    let (c, flat) = pool_grids(normal_grids)?;
    coreset_bank(BankKind::Normal, c, flat, coreset)
}

pub fn fuse_outlier(q_o: &[f32], q_n: &[f32], beta: f64) -> Result<Vec<f32>> {
    if q_o.len() != q_n.len() {
        return Err(Error::validation(format!(
            "fusion length mismatch: {} vs {}",
            q_o.len(),
            q_n.len()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::validation(format!(
            "beta must be in [0, 1], got {beta}"
        )));
    }
    Ok(q_o
        .iter()
        .zip(q_n)
        .map(|(&o, &n)| (beta * o as f64 + (1.0 - beta) * n as f64) as f32)
        .collect())
}

/// Index of the normal grid paired with each outlier grid, drawn uniformly
/// with replacement.
pub fn outlier_pairing(num_outliers: usize, num_normals: usize, pair_seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
    (0..num_outliers)
        .map(|_| rng.random_range(0..num_normals))
        .collect()
}

/// Fuses each outlier grid patchwise with a randomly paired normal grid and
/// coresets the fused pool.
pub fn build_pseudo_outlier_bank(
    outlier_grids: &[FeatureGrid],
    normal_grids: &[FeatureGrid],
    fusion: &FusionConfig,
    coreset: &CoresetConfig,
) -> Result<MemoryBank> {
    if outlier_grids.is_empty() {
        return Err(Error::validation(
            "no outlier grids for the pseudo-outlier bank",
        ));
    }
    if normal_grids.is_empty() {
        return Err(Error::validation("no normal grids to pair outliers with"));
    }
    let pairing = outlier_pairing(outlier_grids.len(), normal_grids.len(), fusion.pair_seed);
    let c = normal_grids[0].c;
    let mut flat = Vec::new();
    for (outlier, &ni) in outlier_grids.iter().zip(&pairing) {
        let normal = &normal_grids[ni];
        if outlier.c != c || normal.c != c {
            return Err(Error::validation(format!(
                "channel mismatch fusing {} with {}",
                outlier.image_id, normal.image_id
            )));
        }
        if outlier.num_patches() != normal.num_patches() {
            return Err(Error::validation(format!(
                "patch grid mismatch fusing {} ({}x{}) with {} ({}x{})",
                outlier.image_id, outlier.h0, outlier.w0, normal.image_id, normal.h0, normal.w0
            )));
        }
        for (po, pn) in outlier.patches().zip(normal.patches()) {
            flat.extend(fuse_outlier(po, pn, fusion.beta)?);
        }
    }
    coreset_bank(BankKind::PseudoOutlier, c, flat, coreset)
}

/// Union of the flagged patches of every annotated anomaly, without coreset.
pub fn build_seen_bank(anomalies: &[(FeatureGrid, PatchMask)]) -> Result<MemoryBank> {
    let mut rows = Vec::new();
    let mut c = None;
    for (grid, pmask) in anomalies {
        if *c.get_or_insert(grid.c) != grid.c {
            return Err(Error::validation(
                "mixed channel counts among seen anomalies",
            ));
        }
        rows.extend(crate::feature_store::filter_anomalous(grid, pmask)?);
    }
    match c {
        Some(c) if !rows.is_empty() => MemoryBank::from_vectors(BankKind::SeenAnomaly, c, &rows),
        _ => Err(Error::EmptyBank(
            "no anomalous patches among seen anomalies".into(),
        )),
    }
}

/// Mean of the seen anomalous rows, accumulated in f64.
pub fn anomaly_center(seen: &MemoryBank) -> Result<Vec<f64>> {
    if seen.is_empty() {
        return Err(Error::validation("anomaly center of an empty bank"));
    }
    let mut mean = vec![0.0; seen.c()];
    for row in seen.rows().outer_iter() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v as f64;
        }
    }
    let n = seen.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Gaussian perturbations of the mean seen-anomaly feature.
pub fn anomaly_center_sampling(
    seen: &MemoryBank,
    config: &CenterSamplingConfig,
) -> Result<MemoryBank> {
    if seen.kind() != BankKind::SeenAnomaly {
        return Err(Error::validation(format!(
            "center sampling needs a seen_anomaly bank, got {}",
            seen.kind()
        )));
    }
    if !(config.noise_std >= 0.0) {
        return Err(Error::validation("center sampling noise_std must be >= 0"));
    }
    let center = anomaly_center(seen)?;
    let c = center.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::validation(e.to_string()))?;
    let rows = Array2::from_shape_fn((config.count, c), |(_, j)| {
        (center[j] + noise.sample(&mut rng)) as f32
    });
    MemoryBank::new(BankKind::CenterSampled, rows)
}

/// Concatenates abnormal sources in the fixed order outlier, seen, sampled.
pub fn compose_abnormal_bank(
    mode: Mode,
    m_o: Option<&MemoryBank>,
    m_as: Option<&MemoryBank>,
    m_p: Option<&MemoryBank>,
) -> Result<MemoryBank> {
    match mode {
        Mode::Unsupervised => {
            if m_as.is_some() || m_p.is_some() {
                return Err(Error::validation(
                    "unsupervised abnormal bank takes only pseudo-outlier rows",
                ));
            }
            if m_o.is_none() {
                return Err(Error::validation(
                    "unsupervised abnormal bank needs the pseudo-outlier bank",
                ));
            }
        }
        Mode::SemiSupervised => {
            if m_as.is_none_or(MemoryBank::is_empty) {
                return Err(Error::validation(
                    "semi-supervised abnormal bank needs a nonempty seen-anomaly bank",
                ));
            }
        }
    }
    let parts: Vec<(&MemoryBank, BankKind)> = [
        (m_o, BankKind::PseudoOutlier),
        (m_as, BankKind::SeenAnomaly),
        (m_p, BankKind::CenterSampled),
    ]
    .into_iter()
    .filter_map(|(b, k)| b.map(|b| (b, k)))
    .collect();
    let c = parts[0].0.c();
    let mut prov = Provenance::default();
    let mut views = Vec::with_capacity(parts.len());
    for (bank, expected) in &parts {
        if bank.kind() != *expected {
            return Err(Error::validation(format!(
                "expected a {expected} bank, got {}",
                bank.kind()
            )));
        }
        if bank.c() != c {
            return Err(Error::validation(format!(
                "channel mismatch composing abnormal bank: {c} vs {}",
                bank.c()
            )));
        }
        prov.0[*expected as usize] += bank.len() as u64;
        views.push(bank.rows());
    }
    let rows =
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::validation(e.to_string()))?;
    MemoryBank::with_provenance(BankKind::ComposedAbnormal, rows, prov)
}
