//! Synthetic multi-object feature datasets.
//!
//! Each object is a tight Gaussian cluster in feature space. Anomalous images
//! carry one square block of patches displaced along a defect direction; the
//! defect directions are drawn once and shared by every object unless
//! `shared_defects` is off. Outlier grids come from a broad isotropic
//! distribution around the origin.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{
    write_feature_file, write_mask_file, AnnotationMask, DatasetManifest, FeatureGrid, Label,
    ManifestEntry, Role,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagesPerObject {
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    /// Annotated anomalous images placed in the training split.
    pub seen_anomalies: usize,
}

impl Default for ImagesPerObject {
    fn default() -> Self {
        Self {
            train_normal: 40,
            test_normal: 10,
            test_anomalous: 10,
            seen_anomalies: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_objects: usize,
    pub images_per_object: ImagesPerObject,
    pub h0: usize,
    pub w0: usize,
    pub c: usize,
    pub cluster_spread: f64,
    pub anomaly_shift: f64,
    pub defect_patch_fraction: f64,
    pub outlier_images: usize,
    pub seed: u64,
    /// Source pixels per patch side; masks are `h0 * patch_pixels` tall.
    pub patch_pixels: usize,
    /// Distance of each object's cluster center from the origin.
    pub center_radius: f64,
    pub num_defect_types: usize,
    pub shared_defects: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_objects: 3,
            images_per_object: ImagesPerObject::default(),
            h0: 8,
            w0: 8,
            c: 16,
            cluster_spread: 0.1,
            anomaly_shift: 1.5,
            defect_patch_fraction: 0.05,
            outlier_images: 8,
            seed: 0,
            patch_pixels: 8,
            center_radius: 3.0,
            num_defect_types: 3,
            shared_defects: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c < 2 {
            return Err(Error::validation(format!(
                "synth c must be >= 2, got {}",
                self.c
            )));
        }
        if self.h0 == 0 || self.w0 == 0 || self.patch_pixels == 0 {
            return Err(Error::validation(
                "synth grid and patch sizes must be positive",
            ));
        }
        if !(self.defect_patch_fraction > 0.0 && self.defect_patch_fraction < 1.0) {
            return Err(Error::validation(format!(
                "defect_patch_fraction must lie in (0, 1), got {}",
                self.defect_patch_fraction
            )));
        }
        if !(self.cluster_spread >= 0.0
            && self.anomaly_shift.is_finite()
            && self.center_radius.is_finite())
        {
            return Err(Error::validation(
                "synth spread, shift and radius must be finite and spread >= 0",
            ));
        }
        if self.num_defect_types == 0 {
            return Err(Error::validation("num_defect_types must be >= 1"));
        }
        Ok(())
    }

    /// Side of the square defect block in patches.
    pub fn defect_side(&self) -> usize {
        let side = (self.defect_patch_fraction * (self.h0 * self.w0) as f64)
            .sqrt()
            .round() as usize;
        side.clamp(1, self.h0.min(self.w0))
    }
}

/// Top-left patch and side of a defect block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Defect {
    pub row: usize,
    pub col: usize,
    pub side: usize,
    pub kind: usize,
}

impl Defect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.side).contains(&r)
            && (self.col..self.col + self.side).contains(&c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub split: Split,
    pub grid: FeatureGrid,
    pub mask: Option<AnnotationMask>,
    pub defect: Option<Defect>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub images: Vec<SynthImage>,
    pub outliers: Vec<FeatureGrid>,
}

/// Paths of a dataset written to disk.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub outlier_dir: PathBuf,
}

fn unit_vector(c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn object_id(index: usize) -> String {
    format!("object_{index:02}")
}

struct ObjectModel<'a> {
    spec: &'a SynthSpec,
    id: String,
    center: Vec<f64>,
    directions: &'a [Vec<f64>],
}

impl ObjectModel<'_> {
    fn image(
        &self,
        image_id: String,
        anomalous: bool,
        split: Split,
        rng: &mut ChaCha8Rng,
    ) -> Result<SynthImage> {
        let s = self.spec;
        let defect = anomalous.then(|| {
            let side = s.defect_side();
            Defect {
                row: rng.random_range(0..=s.h0 - side),
                col: rng.random_range(0..=s.w0 - side),
                side,
                kind: rng.random_range(0..self.directions.len()),
            }
        });
        let mut data = Vec::with_capacity(s.h0 * s.w0 * s.c);
        for r in 0..s.h0 {
            for col in 0..s.w0 {
                let shifted = defect.filter(|d| d.contains(r, col));
                for (k, &mu) in self.center.iter().enumerate() {
                    let noise: f64 = rng.sample(StandardNormal);
                    let mut v = mu + s.cluster_spread * noise;
                    if let Some(d) = shifted {
                        v += s.anomaly_shift * self.directions[d.kind][k];
                    }
                    data.push(v as f32);
                }
            }
        }
        let (sh, sw) = (s.h0 * s.patch_pixels, s.w0 * s.patch_pixels);
        let grid = FeatureGrid::new(self.id.clone(), image_id, (s.h0, s.w0, s.c), (sh, sw), data)?;
        let mask = defect.map(|d| {
            let mut m = AnnotationMask::zeros(sh, sw);
            let p = s.patch_pixels;
            for y in d.row * p..(d.row + d.side) * p {
                for x in d.col * p..(d.col + d.side) * p {
                    m.data[y * sw + x] = 1;
                }
            }
            m
        });
        Ok(SynthImage {
            split,
            grid,
            mask,
            defect,
        })
    }
}

/// Draws the whole dataset in memory.
pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared: Vec<Vec<f64>> = (0..spec.num_defect_types)
        .map(|_| unit_vector(spec.c, &mut rng))
        .collect();
    let counts = spec.images_per_object;
    let mut images = Vec::new();
    for o in 0..spec.num_objects {
        let center: Vec<f64> = unit_vector(spec.c, &mut rng)
            .into_iter()
            .map(|x| x * spec.center_radius)
            .collect();
        let own: Vec<Vec<f64>>;
        let directions = if spec.shared_defects {
            &shared
        } else {
            own = (0..spec.num_defect_types)
                .map(|_| unit_vector(spec.c, &mut rng))
                .collect();
            &own
        };
        let model = ObjectModel {
            spec,
            id: object_id(o),
            center,
            directions,
        };
        let groups = [
            (Split::Train, "train_normal", counts.train_normal, false),
            (Split::Train, "train_seen", counts.seen_anomalies, true),
            (Split::Test, "test_normal", counts.test_normal, false),
            (Split::Test, "test_anomalous", counts.test_anomalous, true),
        ];
        for (split, tag, n, anomalous) in groups {
            for i in 0..n {
                let image_id = format!("{}_{tag}_{i:03}", model.id);
                images.push(model.image(image_id, anomalous, split, &mut rng)?);
            }
        }
    }
    let mut outliers = Vec::with_capacity(spec.outlier_images);
    for i in 0..spec.outlier_images {
        let data = (0..spec.h0 * spec.w0 * spec.c)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|v: f64| v as f32)
            .collect();
        let size = (spec.h0 * spec.patch_pixels, spec.w0 * spec.patch_pixels);
        outliers.push(FeatureGrid::new(
            "outlier",
            format!("outlier_{i:03}"),
            (spec.h0, spec.w0, spec.c),
            size,
            data,
        )?);
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        images,
        outliers,
    })
}

impl SynthDataset {
    /// Writes feature files, masks, manifests (`train.json`, `test.json`),
    /// outliers and the spec itself under `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<SynthOutput> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for img in &self.images {
            let split_dir = match img.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let rel = PathBuf::from(split_dir).join(&img.grid.object_id);
            let feature_path = rel.join(format!("{}.dmft", img.grid.image_id));
            write_feature_file(&img.grid, &out_dir.join(&feature_path))?;
            let mask_path = match &img.mask {
                Some(m) => {
                    let p = rel.join(format!("{}_mask.dmmk", img.grid.image_id));
                    write_mask_file(m, &out_dir.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            let entry = ManifestEntry {
                feature_path,
                object_id: img.grid.object_id.clone(),
                label: if img.defect.is_some() {
                    Label::Anomalous
                } else {
                    Label::Normal
                },
                mask_path,
            };
            match img.split {
                Split::Train => train.push(entry),
                Split::Test => test.push(entry),
            }
        }
        let outlier_dir = out_dir.join("outliers");
        std::fs::create_dir_all(&outlier_dir).map_err(|e| Error::storage(&outlier_dir, e))?;
        for g in &self.outliers {
            write_feature_file(g, &outlier_dir.join(format!("{}.dmft", g.image_id)))?;
        }
        let manifest = |role, entries| DatasetManifest {
            role,
            base_dir: out_dir.to_path_buf(),
            entries,
        };
        let train_manifest = out_dir.join("train.json");
        let test_manifest = out_dir.join("test.json");
        manifest(Role::Train, train).save(&train_manifest)?;
        manifest(Role::Test, test).save(&test_manifest)?;
        let spec_json = serde_json::to_vec_pretty(&self.spec)
            .map_err(|e| Error::format(format!("synth spec serialization: {e}")))?;
        crate::binio::write_file(&out_dir.join("synth_spec.json"), &spec_json)?;
        Ok(SynthOutput {
            train_manifest,
            test_manifest,
            outlier_dir,
        })
    }
}

pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    generate_dataset(spec)?.write(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::downscale_mask;

    fn small() -> SynthSpec {
        SynthSpec {
            num_objects: 2,
            images_per_object: ImagesPerObject {
                train_normal: 3,
                test_normal: 2,
                test_anomalous: 2,
                seen_anomalies: 1,
            },
            outlier_images: 2,
            ..Default::default()
        }
    }

    #[test]
    fn default_defect_is_two_by_two() {
        let spec = SynthSpec::default();
        assert_eq!(spec.defect_side(), 2);
        let ds = generate_dataset(&SynthSpec {
            num_objects: 1,
            ..small()
        })
        .unwrap();
        for img in ds.images.iter().filter(|i| i.defect.is_some()) {
            let m = img.mask.as_ref().unwrap();
            assert_eq!(m.count_ones(), 4 * 8 * 8);
            assert_eq!(downscale_mask(m, 8, 8).unwrap().count(), 4);
        }
    }

    #[test]
    fn patch_labels_follow_placement() {
        let ds = generate_dataset(&small()).unwrap();
        for img in &ds.images {
            match (img.defect, &img.mask) {
                (Some(d), Some(m)) => {
                    let pm = downscale_mask(m, 8, 8).unwrap();
                    for r in 0..8 {
                        for c in 0..8 {
                            assert_eq!(pm.flags[r * 8 + c], d.contains(r, c));
                        }
                    }
                }
                (None, None) => {}
                _ => panic!("mask and defect disagree for {}", img.grid.image_id),
            }
        }
    }

    #[test]
    fn zero_shift_leaves_block_on_cluster() {
        let spec = SynthSpec {
            anomaly_shift: 0.0,
            cluster_spread: 0.0,
            ..small()
        };
        let ds = generate_dataset(&spec).unwrap();
        let img = ds.images.iter().find(|i| i.defect.is_some()).unwrap();
        let first = img.grid.patch(0).to_vec();
        assert!(img.grid.patches().all(|p| p == first.as_slice()));
    }

    #[test]
    fn rejects_bad_fraction() {
        let spec = SynthSpec {
            defect_patch_fraction: 1.0,
            ..small()
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::Validation(_))));
    }
}
