use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{auroc, average_precision, f1max};
use super::pro::pro;
use super::scoring::ScoreMap;
use crate::binio::write_file;
use crate::error::{Error, Result};
use crate::feature_store::AnnotationMask;

/// Metrics for one object (or their macro average). A metric is `None`
/// when it is undefined for the data, e.g. a single-class test set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub image_f1max: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pixel_ap: Option<f64>,
    pub pixel_f1max: Option<f64>,
    pub pro: Option<f64>,
}

impl ObjectMetrics {
    pub const COLUMNS: [&'static str; 7] = [
        "image_auroc",
        "image_ap",
        "image_f1max",
        "pixel_auroc",
        "pixel_ap",
        "pixel_f1max",
        "pro",
    ];

    pub fn values(&self) -> [Option<f64>; 7] {
        [
            self.image_auroc,
            self.image_ap,
            self.image_f1max,
            self.pixel_auroc,
            self.pixel_ap,
            self.pixel_f1max,
            self.pro,
        ]
    }

    fn from_values(v: [Option<f64>; 7]) -> Self {
        Self {
            image_auroc: v[0],
            image_ap: v[1],
            image_f1max: v[2],
            pixel_auroc: v[3],
            pixel_ap: v[4],
            pixel_f1max: v[5],
            pro: v[6],
        }
    }
}

/// One scored test image with its ground truth.
#[derive(Debug, Clone)]
pub struct ScoredImage {
    pub object_id: String,
    pub image_id: String,
    pub anomalous: bool,
    pub scores: ScoreMap,
    /// Full-resolution mask; `None` for normal images.
    pub mask: Option<AnnotationMask>,
}

fn defined(r: Result<f64>) -> Option<f64> {
    r.ok()
}

/// Image-level metrics always; pixel-level metrics when every image carries
/// a pixel map and every anomalous image carries a mask.
pub fn object_metrics(images: &[ScoredImage], fpr_limit: f64) -> ObjectMetrics {
    let scores: Vec<f64> = images.iter().map(|i| i.scores.image_score).collect();
    let labels: Vec<bool> = images.iter().map(|i| i.anomalous).collect();
    let mut m = ObjectMetrics {
        image_auroc: defined(auroc(&scores, &labels)),
        image_ap: defined(average_precision(&scores, &labels)),
        image_f1max: defined(f1max(&scores, &labels)),
        ..Default::default()
    };

    let pixel_ready = images
        .iter()
        .all(|i| i.scores.pixel_map.is_some() && (!i.anomalous || i.mask.is_some()));
    if !pixel_ready {
        return m;
    }
    let masks: Vec<AnnotationMask> = images
        .iter()
        .map(|i| {
            i.mask
                .clone()
                .unwrap_or_else(|| AnnotationMask::zeros(i.scores.h, i.scores.w))
        })
        .collect();
    if images
        .iter()
        .zip(&masks)
        .any(|(i, mk)| (mk.h, mk.w) != (i.scores.h, i.scores.w))
    {
        log::warn!("mask and pixel map sizes disagree; pixel metrics skipped");
        return m;
    }
    let maps: Vec<&[f64]> = images
        .iter()
        .map(|i| i.scores.pixel_map.as_deref().expect("checked above"))
        .collect();
    let px_scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let px_labels: Vec<bool> = masks
        .iter()
        .flat_map(|mk| mk.data.iter().map(|&v| v == 1))
        .collect();
    m.pixel_auroc = defined(auroc(&px_scores, &px_labels));
    m.pixel_ap = defined(average_precision(&px_scores, &px_labels));
    m.pixel_f1max = defined(f1max(&px_scores, &px_labels));
    m.pro = defined(pro(&maps, &masks, fpr_limit));
    m
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_object: BTreeMap<String, ObjectMetrics>,
    pub aggregate: ObjectMetrics,
}

impl EvalReport {
    /// Per-object metrics and their unweighted mean over objects where each
    /// metric is defined.
    pub fn from_images(images: &[ScoredImage], fpr_limit: f64) -> Self {
        let mut by_object: BTreeMap<String, Vec<ScoredImage>> = BTreeMap::new();
        for img in images {
            by_object
                .entry(img.object_id.clone())
                .or_default()
                .push(img.clone());
        }
        let per_object: BTreeMap<String, ObjectMetrics> = by_object
            .into_iter()
            .map(|(id, mut imgs)| {
                // metrics must not depend on manifest order
                imgs.sort_by(|a, b| a.image_id.cmp(&b.image_id));
                (id, object_metrics(&imgs, fpr_limit))
            })
            .collect();
        let mut agg = [None; 7];
        for (k, slot) in agg.iter_mut().enumerate() {
            let vals: Vec<f64> = per_object.values().filter_map(|m| m.values()[k]).collect();
            if !vals.is_empty() {
                *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Self {
            per_object,
            aggregate: ObjectMetrics::from_values(agg),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format(format!("report: {e}")))
    }

    /// One row per object and a final `mean` row; undefined metrics are blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("object");
        for c in ObjectMetrics::COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        let rows = self
            .per_object
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(std::iter::once(("mean", &self.aggregate)));
        for (name, m) in rows {
            out.push_str(name);
            for v in m.values() {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        write_file(json_path, self.to_json()?.as_bytes())?;
        write_file(csv_path, self.to_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(obj: &str, id: &str, anomalous: bool, score: f64) -> ScoredImage {
        let sm = ScoreMap::new(vec![score; 4], 2, 2).unwrap();
        ScoredImage {
            object_id: obj.into(),
            image_id: id.into(),
            anomalous,
            scores: sm,
            mask: None,
        }
    }

    #[test]
    fn single_class_object_has_absent_metrics() {
        let imgs = vec![img("a", "1", false, 0.1), img("a", "2", false, 0.3)];
        let r = EvalReport::from_images(&imgs, 0.3);
        assert_eq!(r.per_object["a"].image_auroc, None);
        assert_eq!(r.aggregate.image_auroc, None);
    }

    #[test]
    fn aggregate_is_macro_mean() {
        let imgs = vec![
            img("a", "1", false, 0.1),
            img("a", "2", true, 0.9),
            img("b", "1", false, 0.9),
            img("b", "2", true, 0.1),
        ];
        let r = EvalReport::from_images(&imgs, 0.3);
        assert_eq!(r.per_object["a"].image_auroc, Some(1.0));
        assert_eq!(r.per_object["b"].image_auroc, Some(0.0));
        assert_eq!(r.aggregate.image_auroc, Some(0.5));
        let csv = r.to_csv();
        assert!(csv.lines().last().unwrap().starts_with("mean,0.500000"));
    }
}
