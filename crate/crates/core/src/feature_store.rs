//! On-disk feature grids, annotation masks and dataset manifests, plus the
//! mask downscaling and anomalous-patch filtering used for seen anomalies.
//!
//! Feature file (`.dmft`, little-endian):
//!
//! ```text
//! "DMFT" | version u16 = 1 | reserved u16 = 0 | h0 u32 | w0 u32 | c u32
//! | source_h u32 | source_w u32 | object_id (u16 len + utf8)
//! | image_id (u16 len + utf8) | h0*w0*c f32 (row, col, channel fastest)
//! ```
//!
//! Mask file (`.dmmk`): `"DMMK" | version u16 = 1 | h u32 | w u32 | h*w bytes in {0,1}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::imageops::bilinear_resize;

pub const FEATURE_MAGIC: &[u8; 4] = b"DMFT";
pub const MASK_MAGIC: &[u8; 4] = b"DMMK";
pub const FORMAT_VERSION: u16 = 1;

/// One image's patch features, `h0 x w0` patches of `c` channels each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub object_id: String,
    pub image_id: String,
    pub h0: usize,
    pub w0: usize,
    pub c: usize,
    pub source_h: usize,
    pub source_w: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        object_id: impl Into<String>,
        image_id: impl Into<String>,
        (h0, w0, c): (usize, usize, usize),
        (source_h, source_w): (usize, usize),
        data: Vec<f32>,
    ) -> Result<Self> {
        let grid = Self {
            object_id: object_id.into(),
            image_id: image_id.into(),
            h0,
            w0,
            c,
            source_h,
            source_w,
            data,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h0 == 0 || self.w0 == 0 || self.c == 0 {
            return Err(Error::validation(format!(
                "grid dims must be positive, got {}x{}x{}",
                self.h0, self.w0, self.c
            )));
        }
        if self.source_h == 0 || self.source_w == 0 {
            return Err(Error::validation("source image dims must be positive"));
        }
        if self.h0 > self.source_h || self.w0 > self.source_w {
            return Err(Error::validation(format!(
                "patch grid {}x{} exceeds source image {}x{}",
                self.h0, self.w0, self.source_h, self.source_w
            )));
        }
        let expected = self.h0 * self.w0 * self.c;
        if self.data.len() != expected {
            return Err(Error::validation(format!(
                "grid data has {} values, expected {expected}",
                self.data.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite feature value at element {i}"
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.h0 * self.w0
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        &self.data[index * self.c..(index + 1) * self.c]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.c)
    }
}

pub fn encode_feature_grid(grid: &FeatureGrid) -> Result<Vec<u8>> {
    grid.validate()?;
    let dim = |v: usize, name: &str| {
        u32::try_from(v).map_err(|_| Error::validation(format!("{name} = {v} does not fit in u32")))
    };
    let mut w = Writer::default();
    w.bytes(FEATURE_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u16(0);
    w.u32(dim(grid.h0, "h0")?);
    w.u32(dim(grid.w0, "w0")?);
    w.u32(dim(grid.c, "c")?);
    w.u32(dim(grid.source_h, "source_h")?);
    w.u32(dim(grid.source_w, "source_w")?);
    w.string(&grid.object_id)?;
    w.string(&grid.image_id)?;
    w.f32s(&grid.data);
    Ok(w.buf)
}

pub fn decode_feature_grid(bytes: &[u8]) -> Result<FeatureGrid> {
    let mut r = Reader::new(bytes, "feature file");
    r.magic(FEATURE_MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "feature file: unsupported version {version}"
        )));
    }
    let reserved = r.u16()?;
    if reserved != 0 {
        return Err(Error::format(format!(
            "feature file: reserved field is {reserved}, expected 0"
        )));
    }
    let h0 = r.u32()? as usize;
    let w0 = r.u32()? as usize;
    let c = r.u32()? as usize;
    let source_h = r.u32()? as usize;
    let source_w = r.u32()? as usize;
    let object_id = r.string()?;
    let image_id = r.string()?;
    let count = h0
        .checked_mul(w0)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format("feature file: declared size overflows"))?;
    let data = r.finite_f32s(count)?;
    r.finish()?;
    let grid = FeatureGrid {
        object_id,
        image_id,
        h0,
        w0,
        c,
        source_h,
        source_w,
        data,
    };
    grid.validate()
        .map_err(|e| Error::format(format!("feature file: {e}")))?;
    Ok(grid)
}

pub fn write_feature_file(grid: &FeatureGrid, path: &Path) -> Result<()> {
    write_file(path, &encode_feature_grid(grid)?)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureGrid> {
    decode_feature_grid(&read_file(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Full-resolution binary annotation, 1 = defective pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl AnnotationMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        let mask = Self { h, w, data };
        mask.validate()?;
        Ok(mask)
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::validation("mask dims must be positive"));
        }
        if self.data.len() != self.h * self.w {
            return Err(Error::validation(format!(
                "mask has {} values, expected {}",
                self.data.len(),
                self.h * self.w
            )));
        }
        if let Some(i) = self.data.iter().position(|&v| v > 1) {
            return Err(Error::validation(format!(
                "mask value at {i} is not 0 or 1"
            )));
        }
        Ok(())
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

pub fn encode_mask(mask: &AnnotationMask) -> Result<Vec<u8>> {
    mask.validate()?;
    let mut w = Writer::default();
    w.bytes(MASK_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u32(u32::try_from(mask.h).map_err(|_| Error::validation("mask height overflows u32"))?);
    w.u32(u32::try_from(mask.w).map_err(|_| Error::validation("mask width overflows u32"))?);
    w.bytes(&mask.data);
    Ok(w.buf)
}

pub fn decode_mask(bytes: &[u8]) -> Result<AnnotationMask> {
    let mut r = Reader::new(bytes, "mask file");
    r.magic(MASK_MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "mask file: unsupported version {version}"
        )));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::format("mask file: declared size overflows"))?;
    let data = r.take(n)?.to_vec();
    r.finish()?;
    let mask = AnnotationMask { h, w, data };
    mask.validate()
        .map_err(|e| Error::format(format!("mask file: {e}")))?;
    Ok(mask)
}

pub fn write_mask_file(mask: &AnnotationMask, path: &Path) -> Result<()> {
    write_file(path, &encode_mask(mask)?)
}

pub fn read_mask_file(path: &Path) -> Result<AnnotationMask> {
    decode_mask(&read_file(path)?)
}

/// Patch-resolution anomaly flags (true = anomalous patch).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub h0: usize,
    pub w0: usize,
    pub flags: Vec<bool>,
}

impl PatchMask {
    pub fn all(h0: usize, w0: usize, value: bool) -> Self {
        Self {
            h0,
            w0,
            flags: vec![value; h0 * w0],
        }
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Bilinearly resamples the mask to the patch grid; a patch is anomalous if
/// any interpolated mass lands on it.
pub fn downscale_mask(mask: &AnnotationMask, h0: usize, w0: usize) -> Result<PatchMask> {
    if h0 == 0 || w0 == 0 {
        return Err(Error::validation(format!(
            "target patch grid {h0}x{w0} has a zero dimension"
        )));
    }
    mask.validate()?;
    if h0 > mask.h || w0 > mask.w {
        return Err(Error::validation(format!(
            "target {h0}x{w0} is larger than mask {}x{}",
            mask.h, mask.w
        )));
    }
    let values: Vec<f64> = mask.data.iter().map(|&v| v as f64).collect();
    let resized = bilinear_resize(&values, mask.h, mask.w, h0, w0)?;
    Ok(PatchMask {
        h0,
        w0,
        flags: resized.into_iter().map(|v| v > 0.0).collect(),
    })
}

/// Patch vectors at flagged positions, in row-major order.
pub fn filter_anomalous(grid: &FeatureGrid, pmask: &PatchMask) -> Result<Vec<Vec<f32>>> {
    if grid.h0 != pmask.h0 || grid.w0 != pmask.w0 || pmask.flags.len() != grid.num_patches() {
        return Err(Error::validation(format!(
            "patch mask {}x{} does not match grid {}x{}",
            pmask.h0, pmask.w0, grid.h0, grid.w0
        )));
    }
    Ok(pmask
        .flags
        .iter()
        .zip(grid.patches())
        .filter(|(&flag, _)| flag)
        .map(|(_, p)| p.to_vec())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub feature_path: PathBuf,
    pub object_id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

/// A dataset split. Relative paths in entries resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub role: Role,
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path, role: Role) -> Result<Self> {
        let bytes = read_file(path)?;
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(format!("manifest {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self {
            role,
            base_dir,
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.entries)
            .map_err(|e| Error::format(format!("manifest serialization: {e}")))?;
        write_file(path, &json)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.object_id.is_empty() {
                return Err(Error::validation(format!(
                    "manifest entry {i} has empty object_id"
                )));
            }
            if self.role == Role::Train && e.label == Label::Anomalous && e.mask_path.is_none() {
                return Err(Error::validation(format!(
                    "anomalous train entry {i} ({}) has no mask_path",
                    e.feature_path.display()
                )));
            }
            let fp = self.resolve(&e.feature_path);
            if !fp.is_file() {
                return Err(Error::MissingArtifact {
                    path: fp,
                    what: format!("feature file of manifest entry {i}"),
                });
            }
            if let Some(mp) = &e.mask_path {
                let mp = self.resolve(mp);
                if !mp.is_file() {
                    return Err(Error::MissingArtifact {
                        path: mp,
                        what: format!("mask file of manifest entry {i}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.label == label)
    }

    pub fn load_grid(&self, entry: &ManifestEntry) -> Result<FeatureGrid> {
        read_feature_file(&self.resolve(&entry.feature_path))
    }

    pub fn load_mask(&self, entry: &ManifestEntry) -> Result<Option<AnnotationMask>> {
        entry
            .mask_path
            .as_ref()
            .map(|p| read_mask_file(&self.resolve(p)))
            .transpose()
    }

    /// Sorted distinct object ids.
    pub fn object_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.iter().map(|e| e.object_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}
