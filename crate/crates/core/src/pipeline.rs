//! End-to-end stages: bank construction, training, evaluation, single-file
//! scoring, bank inspection and the component ablation grid.
//!
//! Every stage takes one [`RunConfig`]. Defaults depend on the mode: the
//! unsupervised setting uses attention and `lambda = (1, 0)`, the
//! semi-supervised setting drops attention and uses `lambda = (0.5, 15)`.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file};
use crate::error::{Error, Result};
use crate::eval::report::ScoredImage;
use crate::eval::scoring::DEFAULT_BLUR_SIGMA;
use crate::eval::{EvalReport, ScoreMap};
use crate::feature_store::{
    downscale_mask, filter_anomalous, read_feature_file, write_feature_file, DatasetManifest,
    FeatureGrid, Label, PatchMask, Role,
};
use crate::knowledge::KnowledgeMode;
use crate::learner::{
    train, write_loss_log, AugmentConfig, Checkpoint, LossConfig, LossLogRow, ModelParams,
    OptimizerConfig, PatchSet, TrainConfig, TrainSetup, TrainingData,
};
use crate::memory_bank::{
    anomaly_center_sampling, build_normal_bank, build_pseudo_outlier_bank, build_seen_bank,
    compose_abnormal_bank, BankKind, CenterSamplingConfig, CoresetConfig, DualMemoryBank,
    FusionConfig, MemoryBank, Mode, Provenance,
};

pub const NORMAL_BANK_FILE: &str = "normal.dmbk";
pub const ABNORMAL_BANK_FILE: &str = "abnormal.dmbk";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Directory of `.dmft` outlier grids for the pseudo-outlier bank.
    pub outlier_dir: Option<PathBuf>,
    pub bank_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    /// JSON report; the CSV table goes next to it with a `.csv` extension.
    pub report: PathBuf,
    /// When set, evaluation dumps every pixel map here as a one-channel grid.
    pub pixel_map_dir: Option<PathBuf>,
}

impl Default for RunPaths {
    fn default() -> Self {
        Self {
            train_manifest: "train.json".into(),
            test_manifest: "test.json".into(),
            outlier_dir: Some("outliers".into()),
            bank_dir: "banks".into(),
            checkpoint: "model.dmckpt".into(),
            loss_log: "loss.csv".into(),
            report: "report.json".into(),
            pixel_map_dir: None,
        }
    }
}

impl RunPaths {
    pub fn report_csv(&self) -> PathBuf {
        self.report.with_extension("csv")
    }

    /// Joins every relative path onto `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_manifest);
        fix(&mut self.test_manifest);
        fix(&mut self.bank_dir);
        fix(&mut self.checkpoint);
        fix(&mut self.loss_log);
        fix(&mut self.report);
        if let Some(p) = self.outlier_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.pixel_map_dir.as_mut() {
            fix(p);
        }
    }
}

/// Which abnormal sources and which anomaly handling a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Keep only annotated patches of seen anomalies; off feeds whole images.
    pub filter: bool,
    pub include_m_o: bool,
    pub include_m_as: bool,
    pub include_m_p: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            filter: true,
            include_m_o: true,
            include_m_as: true,
            include_m_p: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub blur_sigma: f64,
    pub pro_fpr_limit: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            blur_sigma: DEFAULT_BLUR_SIGMA,
            pro_fpr_limit: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub paths: RunPaths,
    pub coreset: CoresetConfig,
    pub fusion: FusionConfig,
    pub center_sampling: CenterSamplingConfig,
    pub knowledge: KnowledgeMode,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub ablation: Ablation,
    pub eval: EvalConfig,
    pub deterministic: bool,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_mode(Mode::Unsupervised)
    }
}

fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn for_mode(mode: Mode) -> Self {
        let (loss, use_attention) = match mode {
            Mode::Unsupervised => (LossConfig::unsupervised(), true),
            Mode::SemiSupervised => (LossConfig::semi_supervised(), false),
        };
        Self {
            mode,
            paths: RunPaths::default(),
            coreset: CoresetConfig::default(),
            fusion: FusionConfig::default(),
            center_sampling: CenterSamplingConfig::default(),
            knowledge: KnowledgeMode {
                use_attention,
                use_distance: true,
            },
            loss,
            augment: AugmentConfig::default(),
            train: TrainConfig {
                mode,
                ..TrainConfig::default()
            },
            optimizer: OptimizerConfig::default(),
            ablation: Ablation::default(),
            eval: EvalConfig::default(),
            deterministic: false,
            threads: 0,
        }
    }

    /// Overlays a (possibly partial) JSON document on the defaults of the
    /// mode it names.
    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        if !value.is_object() {
            return Err(Error::format("run config must be a JSON object"));
        }
        let mode = match value.get("mode") {
            Some(m) => serde_json::from_value(m.clone())
                .map_err(|e| Error::format(format!("config mode: {e}")))?,
            None => Mode::Unsupervised,
        };
        let mut base = serde_json::to_value(Self::for_mode(mode)).expect("config serializes");
        merge_json(&mut base, value);
        let cfg: Self =
            serde_json::from_value(base).map_err(|e| Error::format(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json_value(value)?;
        if let Some(dir) = path.parent() {
            cfg.paths.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    /// Derives every component seed from one value.
    pub fn apply_seed(&mut self, seed: u64) {
        self.coreset.seed = seed;
        self.fusion.pair_seed = seed.wrapping_add(1);
        self.center_sampling.seed = seed.wrapping_add(2);
        self.augment.seed = seed.wrapping_add(3);
        self.train.seed = seed.wrapping_add(4);
    }

    pub fn validate(&self) -> Result<()> {
        self.coreset.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.train.mode != self.mode {
            return Err(Error::validation(format!(
                "train.mode ({:?}) disagrees with mode ({:?})",
                self.train.mode, self.mode
            )));
        }
        if !(0.0..=1.0).contains(&self.fusion.beta) {
            return Err(Error::validation(format!(
                "fusion beta must be in [0, 1], got {}",
                self.fusion.beta
            )));
        }
        if !(self.eval.pro_fpr_limit > 0.0 && self.eval.pro_fpr_limit <= 1.0) {
            return Err(Error::validation("pro_fpr_limit must be in (0, 1]"));
        }
        if !(self.eval.blur_sigma >= 0.0) {
            return Err(Error::validation("blur_sigma must be >= 0"));
        }
        if self.mode == Mode::SemiSupervised {
            if !self.ablation.include_m_as {
                return Err(Error::validation(
                    "semi-supervised runs need the seen-anomaly bank (include_m_as)",
                ));
            }
            if self.loss.lambda2 <= 0.0 {
                return Err(Error::validation("semi-supervised runs need lambda2 > 0"));
            }
        } else if self.loss.lambda2 > 0.0 {
            return Err(Error::validation(
                "unsupervised runs have no anomalies; lambda2 must be 0",
            ));
        }
        Ok(())
    }

    /// Whether this configuration produces an abnormal bank at all.
    pub fn has_abnormal_bank(&self) -> bool {
        match self.mode {
            Mode::Unsupervised => self.ablation.include_m_o,
            Mode::SemiSupervised => true,
        }
    }

    fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            knowledge: self.knowledge,
            loss: self.loss,
            augment: self.augment,
            train: self.train,
            optimizer: self.optimizer,
        }
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.save(&dir.join(EFFECTIVE_CONFIG_FILE))
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Outlier grids of a directory, in file-name order.
pub fn load_outlier_grids(dir: &Path) -> Result<Vec<FeatureGrid>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::storage(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::storage(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "dmft") {
            paths.push(p);
        }
    }
    paths.sort();
    paths.iter().map(|p| read_feature_file(p)).collect()
}

fn patch_mask_for(
    grid: &FeatureGrid,
    manifest: &DatasetManifest,
    entry_mask: Option<crate::feature_store::AnnotationMask>,
    filter: bool,
) -> Result<PatchMask> {
    if !filter {
        return Ok(PatchMask::all(grid.h0, grid.w0, true));
    }
    let mask = entry_mask.ok_or_else(|| {
        Error::validation(format!(
            "seen anomaly {} has no mask (manifest {})",
            grid.image_id,
            manifest.base_dir.display()
        ))
    })?;
    downscale_mask(&mask, grid.h0, grid.w0)
}

/// Seen anomalies of the training split with the patches that count as
/// anomalous (all of them when the filter is off).
fn seen_anomalies(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
) -> Result<Vec<(FeatureGrid, PatchMask)>> {
    manifest
        .with_label(Label::Anomalous)
        .map(|e| {
            let grid = manifest.load_grid(e)?;
            let pmask =
                patch_mask_for(&grid, manifest, manifest.load_mask(e)?, cfg.ablation.filter)?;
            Ok((grid, pmask))
        })
        .collect()
}

fn normal_grids(manifest: &DatasetManifest) -> Result<Vec<FeatureGrid>> {
    manifest
        .with_label(Label::Normal)
        .map(|e| manifest.load_grid(e))
        .collect()
}

/// What a bank build produced.
#[derive(Debug, Clone)]
pub struct BankBuild {
    pub normal: MemoryBank,
    pub abnormal: Option<MemoryBank>,
    /// Component banks written alongside the composed one (semi mode).
    pub components: Vec<MemoryBank>,
}

impl fmt::Display for BankBuild {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "normal bank: {} rows x {} channels",
            self.normal.len(),
            self.normal.c()
        )?;
        match &self.abnormal {
            Some(a) => {
                writeln!(f, "abnormal bank: {} rows", a.len())?;
                for (kind, n) in a.provenance().entries() {
                    let pct = 100.0 * n as f64 / a.len().max(1) as f64;
                    writeln!(f, "  {kind}: {n} ({pct:.1}%)")?;
                }
            }
            None => writeln!(f, "abnormal bank: none")?,
        }
        Ok(())
    }
}

pub fn build_banks(cfg: &RunConfig) -> Result<BankBuild> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(&cfg.paths.train_manifest, Role::Train)?;
    let normals = normal_grids(&manifest)?;
    log::info!("building normal bank from {} images", normals.len());
    let normal = build_normal_bank(&normals, &cfg.coreset)?;

    let m_o = if cfg.ablation.include_m_o {
        let dir = cfg.paths.outlier_dir.as_ref().ok_or_else(|| {
            Error::validation("the pseudo-outlier bank needs paths.outlier_dir (or set ablation.include_m_o = false)")
        })?;
        let outliers = load_outlier_grids(dir)?;
        log::info!("fusing {} outlier grids", outliers.len());
        Some(build_pseudo_outlier_bank(
            &outliers,
            &normals,
            &cfg.fusion,
            &cfg.coreset,
        )?)
    } else {
        None
    };

    let mut components = Vec::new();
    let abnormal = match cfg.mode {
        Mode::Unsupervised => m_o
            .as_ref()
            .map(|o| compose_abnormal_bank(Mode::Unsupervised, Some(o), None, None))
            .transpose()?,
        Mode::SemiSupervised => {
            let seen = seen_anomalies(cfg, &manifest)?;
            if seen.is_empty() {
                return Err(Error::validation(format!(
                    "semi-supervised mode needs annotated anomalies in {}",
                    cfg.paths.train_manifest.display()
                )));
            }
            match build_seen_bank(&seen) {
                Ok(m_as) => {
                    let m_p = if cfg.ablation.include_m_p {
                        Some(anomaly_center_sampling(&m_as, &cfg.center_sampling)?)
                    } else {
                        None
                    };
                    let composed = compose_abnormal_bank(
                        Mode::SemiSupervised,
                        m_o.as_ref(),
                        Some(&m_as),
                        m_p.as_ref(),
                    )?;
                    components.extend(m_o.clone());
                    components.push(m_as);
                    components.extend(m_p);
                    Some(composed)
                }
                Err(Error::EmptyBank(msg)) => {
                    log::warn!("{msg}; falling back to the pseudo-outlier bank alone");
                    m_o.as_ref()
                        .map(|o| compose_abnormal_bank(Mode::Unsupervised, Some(o), None, None))
                        .transpose()?
                }
                Err(e) => return Err(e),
            }
        }
    };

    let dir = &cfg.paths.bank_dir;
    normal.save(&dir.join(NORMAL_BANK_FILE))?;
    if let Some(a) = &abnormal {
        a.save(&dir.join(ABNORMAL_BANK_FILE))?;
    }
    for bank in &components {
        bank.save(&dir.join(format!("{}.dmbk", bank.kind())))?;
    }
    echo_config(cfg, dir)?;
    Ok(BankBuild {
        normal,
        abnormal,
        components,
    })
}

fn load_bank_file(path: &Path, what: &str) -> Result<MemoryBank> {
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            what: format!("{what} (run build-banks first)"),
        });
    }
    MemoryBank::load(path)
}

pub fn load_banks(cfg: &RunConfig) -> Result<DualMemoryBank> {
    let dir = &cfg.paths.bank_dir;
    let normal = load_bank_file(&dir.join(NORMAL_BANK_FILE), "normal bank")?;
    let abnormal = if cfg.has_abnormal_bank() {
        Some(load_bank_file(
            &dir.join(ABNORMAL_BANK_FILE),
            "abnormal bank",
        )?)
    } else {
        None
    };
    DualMemoryBank::new(normal, abnormal, cfg.mode)
}

pub fn grid_matrix(grid: &FeatureGrid) -> Array2<f64> {
    Array2::from_shape_fn((grid.num_patches(), grid.c), |(i, j)| {
        grid.data[i * grid.c + j] as f64
    })
}

fn rows_matrix(rows: &[Vec<f32>], c: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), c), |(i, j)| rows[i][j] as f64)
}

/// Patch sets for every normal training image and, in semi mode, for the
/// anomalous patches of every seen anomaly.
pub fn training_data(cfg: &RunConfig, dual: &DualMemoryBank) -> Result<TrainingData> {
    let manifest = DatasetManifest::load(&cfg.paths.train_manifest, Role::Train)?;
    let normals = normal_grids(&manifest)?;
    let normal = normals
        .par_iter()
        .map(|g| PatchSet::new(grid_matrix(g), dual))
        .collect::<Result<Vec<_>>>()?;
    let anomalous = match cfg.mode {
        Mode::Unsupervised => Vec::new(),
        Mode::SemiSupervised => seen_anomalies(cfg, &manifest)?
            .iter()
            .map(|(g, pm)| {
                let rows = filter_anomalous(g, pm)?;
                PatchSet::new(rows_matrix(&rows, g.c), dual)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(TrainingData { normal, anomalous })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossLogRow>,
}

pub fn train_stage(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dual = load_banks(cfg)?;
    let data = training_data(cfg, &dual)?;
    log::info!(
        "training on {} normal images and {} anomalous patch sets",
        data.normal.len(),
        data.anomalous.len()
    );
    let (checkpoint, log) = train(&data, dual.c(), &cfg.train_setup())?;
    checkpoint.save(&cfg.paths.checkpoint)?;
    write_loss_log(&log, &cfg.paths.loss_log)?;
    echo_config(cfg, &parent_dir(&cfg.paths.checkpoint))?;
    Ok(TrainOutcome { checkpoint, log })
}

fn load_model(cfg: &RunConfig, dual: &DualMemoryBank) -> Result<ModelParams> {
    let ckpt = Checkpoint::load(&cfg.paths.checkpoint)?;
    if ckpt.params.c != dual.c() {
        return Err(Error::validation(format!(
            "checkpoint has C = {}, banks have C = {}",
            ckpt.params.c,
            dual.c()
        )));
    }
    Ok(ckpt.params)
}

/// Patch scores, image score and full-resolution map of one grid.
pub fn score_grid(
    model: &ModelParams,
    dual: &DualMemoryBank,
    grid: &FeatureGrid,
    blur_sigma: f64,
) -> Result<ScoreMap> {
    grid.validate()?;
    let set = PatchSet::new(grid_matrix(grid), dual)?;
    let scores = model.anomaly_scores(&set)?;
    ScoreMap::new(scores.to_vec(), grid.h0, grid.w0)?.with_pixels(
        grid.source_h,
        grid.source_w,
        blur_sigma,
    )
}

/// Writes a pixel map as a one-channel feature grid.
pub fn write_pixel_map(map: &ScoreMap, object_id: &str, image_id: &str, path: &Path) -> Result<()> {
    let pixels = map
        .pixel_map
        .as_ref()
        .ok_or_else(|| Error::State("score map has no pixel map".into()))?;
    let data = pixels.iter().map(|&v| v as f32).collect();
    let grid = FeatureGrid::new(object_id, image_id, (map.h, map.w, 1), (map.h, map.w), data)?;
    write_feature_file(&grid, path)
}

pub fn evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let dual = load_banks(cfg)?;
    let model = load_model(cfg, &dual)?;
    let manifest = DatasetManifest::load(&cfg.paths.test_manifest, Role::Test)?;
    let images = manifest
        .entries
        .par_iter()
        .map(|e| {
            let grid = manifest.load_grid(e)?;
            let scores = score_grid(&model, &dual, &grid, cfg.eval.blur_sigma)?;
            if let Some(dir) = &cfg.paths.pixel_map_dir {
                write_pixel_map(
                    &scores,
                    &grid.object_id,
                    &grid.image_id,
                    &dir.join(format!("{}.dmft", grid.image_id)),
                )?;
            }
            Ok(ScoredImage {
                object_id: e.object_id.clone(),
                image_id: grid.image_id,
                anomalous: e.label == Label::Anomalous,
                scores,
                mask: manifest.load_mask(e)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_images(&images, cfg.eval.pro_fpr_limit);
    report.save(&cfg.paths.report, &cfg.paths.report_csv())?;
    echo_config(cfg, &parent_dir(&cfg.paths.report))?;
    Ok(report)
}

/// Scores one feature file with the trained model and banks.
pub fn score_file(cfg: &RunConfig, feature_path: &Path) -> Result<(FeatureGrid, ScoreMap)> {
    let dual = load_banks(cfg)?;
    let model = load_model(cfg, &dual)?;
    let grid = read_feature_file(feature_path)?;
    let map = score_grid(&model, &dual, &grid, cfg.eval.blur_sigma)?;
    Ok((grid, map))
}

/// Human-readable description of a bank file.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSummary {
    pub kind: BankKind,
    pub rows: usize,
    pub c: usize,
    pub provenance: Provenance,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BankSummary {
    pub fn of(bank: &MemoryBank) -> Self {
        let (k, c) = (bank.len(), bank.c());
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for row in bank.rows().outer_iter() {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v as f64;
            }
        }
        if k > 0 {
            mean.iter_mut().for_each(|m| *m /= k as f64);
        }
        for row in bank.rows().outer_iter() {
            for (j, &v) in row.iter().enumerate() {
                sq[j] += (v as f64 - mean[j]).powi(2);
            }
        }
        let std = sq
            .iter()
            .map(|s| if k > 0 { (s / k as f64).sqrt() } else { 0.0 })
            .collect();
        Self {
            kind: bank.kind(),
            rows: k,
            c,
            provenance: bank.provenance(),
            mean,
            std,
        }
    }
}

impl fmt::Display for BankSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kind: {}", self.kind)?;
        writeln!(f, "rows (K): {}", self.rows)?;
        writeln!(f, "channels (C): {}", self.c)?;
        writeln!(f, "provenance:")?;
        for (kind, n) in self.provenance.entries() {
            writeln!(f, "  {kind}: {n}")?;
        }
        writeln!(f, "{:>6} {:>14} {:>14}", "dim", "mean", "std")?;
        for (j, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            writeln!(f, "{j:>6} {m:>14.6} {s:>14.6}")?;
        }
        Ok(())
    }
}

pub fn inspect_bank(path: &Path) -> Result<BankSummary> {
    Ok(BankSummary::of(&MemoryBank::load(path)?))
}

/// One row of the component ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub mode: Mode,
    pub ablation: Ablation,
    pub knowledge: KnowledgeMode,
}

/// The seven component combinations compared for the two settings.
pub fn ablation_grid() -> Vec<AblationVariant> {
    let row = |name: &str, mode, filter, m_o, m_as, m_p, use_attention| AblationVariant {
        name: name.into(),
        mode,
        ablation: Ablation {
            filter,
            include_m_o: m_o,
            include_m_as: m_as,
            include_m_p: m_p,
        },
        knowledge: KnowledgeMode {
            use_attention,
            use_distance: true,
        },
    };
    use Mode::{SemiSupervised as S, Unsupervised as U};
    vec![
        row("unsup_dist", U, false, false, false, false, false),
        row("unsup_dist_attn", U, false, false, false, false, true),
        row("unsup_mo_dist_attn", U, false, true, false, false, true),
        row(
            "semi_nofilter_mo_mas_dist",
            S,
            false,
            true,
            true,
            false,
            false,
        ),
        row("semi_mo_mas_dist", S, true, true, true, false, false),
        row("semi_mo_mas_dist_attn", S, true, true, true, false, true),
        row("semi_mo_mas_mp_dist", S, true, true, true, true, false),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: AblationVariant,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
}

impl AblationVariant {
    /// `base` with this variant's mode, components and knowledge, writing
    /// artifacts under `dir`.
    pub fn config(&self, base: &RunConfig, dir: &Path) -> RunConfig {
        let mut cfg = base.clone();
        if cfg.mode != self.mode {
            cfg.loss = RunConfig::for_mode(self.mode).loss;
        }
        cfg.mode = self.mode;
        cfg.train.mode = self.mode;
        cfg.ablation = self.ablation;
        cfg.knowledge = self.knowledge;
        cfg.paths.bank_dir = dir.join("banks");
        cfg.paths.checkpoint = dir.join("model.dmckpt");
        cfg.paths.loss_log = dir.join("loss.csv");
        cfg.paths.report = dir.join("report.json");
        cfg.paths.pixel_map_dir = None;
        cfg
    }
}

/// Builds, trains and evaluates every variant under `work_dir/<name>`.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[AblationVariant],
    work_dir: &Path,
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        log::info!("ablation variant {}", v.name);
        let cfg = v.config(base, &work_dir.join(&v.name));
        build_banks(&cfg)?;
        train_stage(&cfg)?;
        let report = evaluate(&cfg)?;
        out.push(AblationResult {
            variant: v.clone(),
            image_auroc: report.aggregate.image_auroc,
            pixel_auroc: report.aggregate.pixel_auroc,
        });
    }
    Ok(out)
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s =
        String::from("variant,mode,filter,m_o,m_as,m_p,dist,attn,image_auroc,pixel_auroc\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in results {
        let (a, k) = (r.variant.ablation, r.variant.knowledge);
        let mode = match r.variant.mode {
            Mode::Unsupervised => "unsupervised",
            Mode::SemiSupervised => "semi_supervised",
        };
        s.push_str(&format!(
            "{},{mode},{},{},{},{},{},{},{},{}\n",
            r.variant.name,
            a.filter,
            a.include_m_o,
            a.include_m_as && r.variant.mode == Mode::SemiSupervised,
            a.include_m_p && r.variant.mode == Mode::SemiSupervised,
            k.use_distance,
            k.use_attention,
            opt(r.image_auroc),
            opt(r.pixel_auroc)
        ));
    }
    s
}
