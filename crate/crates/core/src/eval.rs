//! Keypoints from fitted transforms, and the joint-distance metric expressed
//! in percent of image size.
//!
//! Distances are measured in normalized coordinates, where the image side is
//! 2 units, so a distance `d` scores `d / 2 * 100` percent.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_point, AffineTransform, Point};
use crate::template::Template;

/// Side length of the normalized image domain `[-1, 1]`.
pub const DOMAIN_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub id: String,
    pub position: Point,
}

pub fn keypoints_from_transforms(
    template: &Template,
    transforms: &[AffineTransform],
) -> Vec<Keypoint> {
    template
        .keypoints()
        .iter()
        .zip(template.resolved_keypoints())
        .map(|(def, r)| Keypoint {
            id: def.id.clone(),
            position: apply_point(&transforms[r.part], r.point),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean Euclidean joint distance, percent of image size.
    #[default]
    Distance,
    /// Mean squared normalized joint distance, times 100.
    SquaredDistance,
}

impl Metric {
    fn name(&self) -> &'static str {
        match self {
            Metric::Distance => "mean joint distance (% of image size)",
            Metric::SquaredDistance => "mean squared joint distance (image size = 1, x100)",
        }
    }

    fn per_joint(&self, d: f64) -> f64 {
        let rel = d / DOMAIN_WIDTH;
        match self {
            Metric::Distance => rel * 100.0,
            Metric::SquaredDistance => rel * rel * 100.0,
        }
    }
}

/// Keypoint id to group name.
pub type GroupMap = BTreeMap<String, String>;

/// Group names follow the usual per-body-part columns; anything unmatched is
/// `other`.
pub fn default_group(id: &str) -> &'static str {
    const RULES: [(&str, &str); 5] = [
        ("hip", "hips"),
        ("knee", "knees"),
        ("ankle", "feet"),
        ("shoulder", "shoulders"),
        ("wrist", "hands"),
    ];
    RULES
        .iter()
        .find(|(needle, _)| id.contains(needle))
        .map(|(_, g)| *g)
        .unwrap_or("other")
}

pub fn default_groups(template: &Template) -> GroupMap {
    template
        .keypoints()
        .iter()
        .map(|k| (k.id.clone(), default_group(&k.id).to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub overall: f64,
    pub per_group: BTreeMap<String, f64>,
    pub group_counts: BTreeMap<String, usize>,
    pub n_samples: usize,
    pub n_keypoints: usize,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "metric: {}", self.metric.name());
        let _ = writeln!(
            out,
            "samples: {}  keypoints: {}",
            self.n_samples, self.n_keypoints
        );
        let width = self
            .per_group
            .keys()
            .map(|k| k.len())
            .chain(["overall".len()])
            .max()
            .unwrap_or(7);
        let _ = writeln!(out, "{:<width$}  {:>10}", "overall", format!("{:.4}", self.overall));
        for (g, v) in &self.per_group {
            let _ = writeln!(out, "{:<width$}  {:>10}", g, format!("{v:.4}"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores predicted keypoints against ground truth. Keypoints are matched by
/// id within each sample; ids absent from `groups` count as `other`.
pub fn score(
    predictions: &[Vec<Keypoint>],
    ground_truth: &[Vec<Keypoint>],
    groups: &GroupMap,
    metric: Metric,
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    if predictions.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted samples vs {} ground truth",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut n_keypoints = 0;
    for (s, (pred, gt)) in predictions.iter().zip(ground_truth).enumerate() {
        if pred.len() != gt.len() {
            return Err(Error::Reference(format!(
                "sample {s}: {} predicted vs {} ground-truth keypoints",
                pred.len(),
                gt.len()
            )));
        }
        let by_id: HashMap<&str, Point> =
            pred.iter().map(|k| (k.id.as_str(), k.position)).collect();
        if by_id.len() != pred.len() {
            return Err(Error::Reference(format!("sample {s}: duplicate predicted ids")));
        }
        for k in gt {
            let p = by_id.get(k.id.as_str()).ok_or_else(|| {
                Error::Reference(format!("sample {s}: no prediction for `{}`", k.id))
            })?;
            let group = groups.get(&k.id).map(String::as_str).unwrap_or("other");
            let entry = sums.entry(group.to_string()).or_default();
            entry.0 += metric.per_joint(p.distance(k.position));
            entry.1 += 1;
            n_keypoints += 1;
        }
    }
    if n_keypoints == 0 {
        return Err(Error::InvalidArgument("no keypoints to score".into()));
    }
    let total: f64 = sums.values().map(|(s, _)| s).sum();
    Ok(EvalReport {
        metric,
        overall: total / n_keypoints as f64,
        per_group: sums
            .iter()
            .map(|(g, (s, n))| (g.clone(), s / *n as f64))
            .collect(),
        group_counts: sums.iter().map(|(g, (_, n))| (g.clone(), *n)).collect(),
        n_samples: predictions.len(),
        n_keypoints,
    })
}
