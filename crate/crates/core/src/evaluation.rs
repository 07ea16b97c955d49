//! Agreement between algorithm angles and manual measurements: cosine
//! similarity of the aligned angle vectors, the angle it implies, an absolute
//! difference outlier rule, and mean differences.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cosine similarity is undefined for an empty or all-zero vector")]
    ZeroVector,
    #[error("negative angle {0} in similarity input")]
    Negative(f64),
    #[error("measurement set `{label}`: duplicate image_id `{image_id}`")]
    DuplicateId { label: String, image_id: String },
    #[error("measurement set `{label}`: angle {angle} for `{image_id}` outside [0, 180]")]
    AngleRange {
        label: String,
        image_id: String,
        angle: f64,
    },
    #[error("`{first}` ({first_count} ids) and `{second}` ({second_count} ids) share no image_id")]
    EmptyJoin {
        first: String,
        first_count: usize,
        second: String,
        second_count: usize,
    },
}

/// Angles for a set of images from one source (the algorithm or a rater).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    label: String,
    angles: BTreeMap<String, f64>,
}

impl MeasurementSet {
    /// Angles must lie in `[0, 180]` and ids must be unique.
    pub fn new(
        label: impl Into<String>,
        entries: impl IntoIterator<Item = (String, f64)>,
    ) -> Result<Self, EvalError> {
        let label = label.into();
        let mut angles = BTreeMap::new();
        for (image_id, angle) in entries {
            if !(0.0..=180.0).contains(&angle) {
                return Err(EvalError::AngleRange {
                    label,
                    image_id,
                    angle,
                });
            }
            if angles.contains_key(&image_id) {
                return Err(EvalError::DuplicateId { label, image_id });
            }
            angles.insert(image_id, angle);
        }
        Ok(Self { label, angles })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<f64> {
        self.angles.get(image_id).copied()
    }

    /// Entries sorted by image_id.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.angles.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Ids whose angle exceeds 90 degrees. Accepted, but unusual.
    pub fn above_ninety(&self) -> Vec<&str> {
        self.iter()
            .filter(|(_, a)| *a > 90.0)
            .map(|(id, _)| id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub image_id: String,
    pub alg_deg: f64,
    pub manual_deg: f64,
    pub abs_diff_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// `"<first> vs <second>"`.
    pub pair: String,
    pub n_common: usize,
    pub cosine_similarity: f64,
    pub implied_angle_deg: f64,
    pub outlier_threshold_deg: f64,
    pub outliers: Vec<Outlier>,
    /// `sum(first - second) / n`
    pub mean_signed_diff_deg: f64,
    pub mean_abs_diff_deg: f64,
    /// Mean absolute difference over the non-outliers; `None` when every
    /// image is an outlier.
    pub non_outlier_mean_abs_diff_deg: Option<f64>,
    pub only_in_first: Vec<String>,
    pub only_in_second: Vec<String>,
    /// Ids above 90 degrees in either set.
    pub above_ninety: Vec<String>,
}

/// `a . b / (|a| |b|)` for non-negative vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if let Some(&v) = a.iter().chain(b).find(|v| **v < 0.0) {
        return Err(EvalError::Negative(v));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm_a = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok(dot / (norm_a * norm_b))
}

/// Angle between the two measurement vectors, `acos(similarity)` in degrees.
pub fn implied_angle_deg(similarity: f64) -> f64 {
    similarity.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Joins the two sets on image_id and computes every report statistic over
/// the shared ids.
pub fn compare(
    first: &MeasurementSet,
    second: &MeasurementSet,
    config: &PipelineConfig,
) -> Result<EvaluationReport, EvalError> {
    let mut pairs = Vec::new();
    let mut only_in_first = Vec::new();
    for (id, a) in first.iter() {
        match second.get(id) {
            Some(b) => pairs.push((id, a, b)),
            None => only_in_first.push(id.to_string()),
        }
    }
    let only_in_second: Vec<String> = second
        .iter()
        .filter(|(id, _)| first.get(id).is_none())
        .map(|(id, _)| id.to_string())
        .collect();
    if pairs.is_empty() {
        return Err(EvalError::EmptyJoin {
            first: first.label().to_string(),
            first_count: first.len(),
            second: second.label().to_string(),
            second_count: second.len(),
        });
    }

    let a: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let similarity = cosine_similarity(&a, &b)?;
    let n = pairs.len() as f64;

    let threshold = config.outlier_threshold_deg;
    let mut outliers = Vec::new();
    let mut signed_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut inlier_abs_sum = 0.0;
    let mut inliers = 0usize;
    for &(id, alg, manual) in &pairs {
        let diff = alg - manual;
        signed_sum += diff;
        abs_sum += diff.abs();
        if diff.abs() > threshold {
            outliers.push(Outlier {
                image_id: id.to_string(),
                alg_deg: alg,
                manual_deg: manual,
                abs_diff_deg: diff.abs(),
            });
        } else {
            inlier_abs_sum += diff.abs();
            inliers += 1;
        }
    }

    let above_ninety: BTreeSet<String> = first
        .above_ninety()
        .into_iter()
        .chain(second.above_ninety())
        .map(str::to_string)
        .collect();

    Ok(EvaluationReport {
        pair: format!("{} vs {}", first.label(), second.label()),
        n_common: pairs.len(),
        cosine_similarity: similarity,
        implied_angle_deg: implied_angle_deg(similarity),
        outlier_threshold_deg: threshold,
        outliers,
        mean_signed_diff_deg: signed_sum / n,
        mean_abs_diff_deg: abs_sum / n,
        non_outlier_mean_abs_diff_deg: (inliers > 0).then(|| inlier_abs_sum / inliers as f64),
        only_in_first,
        only_in_second,
        above_ninety: above_ninety.into_iter().collect(),
    })
}
