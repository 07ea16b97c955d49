//! Synthetic detection records with a known leaf angle.
//!
//! Each fixture contains leaf segments near the true angle, steep stem
//! segments hugging the left/right border (always removed by the stem
//! filter), and distractor segments in distinct orientation bins (each a bin
//! of one, so never the mode). All randomness comes from a ChaCha8 stream
//! seeded with `FixtureSpec::seed`, so a spec always yields the same record.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::detection::{DetectionRecord, InstanceDetection, LineSegment, MaskEncoding};

/// Distance kept between generated geometry and the filter's border threshold.
pub const BORDER_MARGIN_PX: f64 = 20.0;
/// Stem orientations are drawn from this range, degrees.
pub const STEM_BAND_DEG: (f64, f64) = (86.0, 90.0);
const MIN_SEGMENT_PX: f64 = 20.0;
/// Keeps leaf orientations off the bin edges.
const BIN_EDGE_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),
    #[error("fixture does not fit: {0}")]
    DoesNotFit(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    /// Ground-truth leaf orientation, degrees in (0, 80).
    pub true_angle_deg: f64,
    pub n_leaf_segments: usize,
    pub n_stem_segments: usize,
    pub n_distractors: usize,
    /// Leaf orientations deviate from the truth by at most this much.
    pub jitter_deg: f64,
    pub image_size: (u32, u32),
    pub seed: u64,
}

impl FixtureSpec {
    pub fn new(true_angle_deg: f64, seed: u64) -> Self {
        Self {
            true_angle_deg,
            n_leaf_segments: 3,
            n_stem_segments: 4,
            n_distractors: 2,
            jitter_deg: 0.3,
            image_size: (800, 600),
            seed,
        }
    }

    pub fn image_id(&self) -> String {
        format!("synth-{:020}", self.seed)
    }
}

/// Builds the record for `spec`. Returns the record and the true angle.
pub fn generate_fixture(
    spec: &FixtureSpec,
    config: &PipelineConfig,
) -> Result<(DetectionRecord, f64), SynthError> {
    let invalid = |m: String| Err(SynthError::InvalidSpec(m));
    let bin = config.orientation_bin_deg;
    if !(spec.true_angle_deg > 0.0 && spec.true_angle_deg < 80.0) {
        return invalid(format!(
            "true angle {} outside (0, 80)",
            spec.true_angle_deg
        ));
    }
    if !(spec.jitter_deg >= 0.0 && spec.jitter_deg < bin / 2.0) {
        return invalid(format!(
            "jitter {} must be in [0, {})",
            spec.jitter_deg,
            bin / 2.0
        ));
    }
    if config.slope_band_low_deg > STEM_BAND_DEG.0 || config.slope_band_high_deg < STEM_BAND_DEG.1 {
        return invalid(format!(
            "stem band [{}, {}] must contain {:?}",
            config.slope_band_low_deg, config.slope_band_high_deg, STEM_BAND_DEG
        ));
    }

    let (width, height) = spec.image_size;
    let (max_x, max_y) = (f64::from(width) - 1.0, f64::from(height) - 1.0);
    let leaf_margin = config.boundary_min_px + BORDER_MARGIN_PX;
    let inner_w = max_x - 2.0 * leaf_margin;
    let inner_h = max_y - 2.0 * leaf_margin;
    let needs_inner = spec.n_leaf_segments + spec.n_distractors > 0;
    if needs_inner && (inner_w < MIN_SEGMENT_PX || inner_h < MIN_SEGMENT_PX) {
        return Err(SynthError::DoesNotFit(format!(
            "{width}x{height} leaves no interior {leaf_margin} px from the border"
        )));
    }
    let stem_margin = config.boundary_min_px - BORDER_MARGIN_PX;
    if spec.n_stem_segments > 0 && (stem_margin <= 0.0 || max_y < 2.0 * MIN_SEGMENT_PX) {
        return Err(SynthError::DoesNotFit(format!(
            "cannot place stems within {stem_margin} px of the border of {width}x{height}"
        )));
    }

    let leaf_bin = (spec.true_angle_deg / bin).floor();
    let bin_count = (90.0 / bin).floor() as usize;
    let free_bins: Vec<usize> = (0..bin_count).filter(|&b| b as f64 != leaf_bin).collect();
    if spec.n_distractors > free_bins.len() {
        return Err(SynthError::DoesNotFit(format!(
            "{} distractors but only {} free orientation bins",
            spec.n_distractors,
            free_bins.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut segments =
        Vec::with_capacity(spec.n_leaf_segments + spec.n_stem_segments + spec.n_distractors);

    // leaf: within jitter of the truth and inside the truth's bin
    let lo = (spec.true_angle_deg - spec.jitter_deg).max(leaf_bin * bin + BIN_EDGE_EPS);
    let hi = (spec.true_angle_deg + spec.jitter_deg).min((leaf_bin + 1.0) * bin - BIN_EDGE_EPS);
    for _ in 0..spec.n_leaf_segments {
        let angle = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            spec.true_angle_deg
        };
        segments.push(interior_segment(
            &mut rng,
            angle,
            leaf_margin,
            inner_w,
            inner_h,
        ));
    }

    for b in index::sample(&mut rng, free_bins.len(), spec.n_distractors).iter() {
        let center = (free_bins[b] as f64 + 0.5) * bin;
        let angle = center + rng.random_range(-0.25 * bin..=0.25 * bin);
        segments.push(interior_segment(
            &mut rng,
            angle,
            leaf_margin,
            inner_w,
            inner_h,
        ));
    }

    for _ in 0..spec.n_stem_segments {
        let angle = rng.random_range(STEM_BAND_DEG.0..=STEM_BAND_DEG.1);
        let length = rng.random_range(MIN_SEGMENT_PX..=(max_y * 0.5).max(MIN_SEGMENT_PX));
        let (sin, cos) = angle.to_radians().sin_cos();
        let (dx, dy) = (length * cos, length * sin);
        let offset = rng.random_range(0.0..stem_margin);
        let y1 = rng.random_range(0.0..=(max_y - dy));
        let segment = if rng.random_bool(0.5) {
            LineSegment::new(offset, y1, offset + dx, y1 + dy)
        } else {
            LineSegment::new(max_x - offset, y1, max_x - offset - dx, y1 + dy)
        };
        segments.push(segment.with_score(rng.random_range(0.5..=1.0)));
    }

    segments.shuffle(&mut rng);

    let (w, h) = (f64::from(width), f64::from(height));
    let record = DetectionRecord {
        image_id: spec.image_id(),
        width,
        height,
        source: format!("synthetic fixture (seed={}, frame=image)", spec.seed),
        instances: vec![InstanceDetection {
            score: 0.99,
            bbox: [0.0, 0.0, w, h],
            mask: MaskEncoding::Polygon(vec![[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]),
        }],
        segments,
    };
    Ok((record, spec.true_angle_deg))
}

/// Segment at `angle` with both endpoints in the square-ish interior region
/// starting `margin` px from the border.
fn interior_segment(
    rng: &mut ChaCha8Rng,
    angle: f64,
    margin: f64,
    inner_w: f64,
    inner_h: f64,
) -> LineSegment {
    let max_len = inner_w.min(inner_h) * 0.6;
    let length = rng.random_range(MIN_SEGMENT_PX.min(max_len)..=max_len);
    let (sin, cos) = angle.to_radians().sin_cos();
    let (dx, dy) = (length * cos, length * sin);
    let x1 = margin + rng.random_range(0.0..=(inner_w - dx));
    let segment = if rng.random_bool(0.5) {
        // rising to the right (y decreases)
        let y1 = margin + dy + rng.random_range(0.0..=(inner_h - dy));
        LineSegment::new(x1, y1, x1 + dx, y1 - dy)
    } else {
        let y1 = margin + rng.random_range(0.0..=(inner_h - dy));
        LineSegment::new(x1, y1, x1 + dx, y1 + dy)
    };
    segment.with_score(rng.random_range(0.5..=1.0))
}

/// `count` fixtures with true angles uniform in `angle_range`, seeds
/// `base_seed, base_seed + 1, ...`. `template` supplies the other fields.
pub fn fixture_suite(
    count: usize,
    base_seed: u64,
    angle_range: (f64, f64),
    template: &FixtureSpec,
    config: &PipelineConfig,
) -> Result<Vec<(DetectionRecord, f64)>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    (0..count)
        .map(|i| {
            let spec = FixtureSpec {
                true_angle_deg: rng.random_range(angle_range.0..angle_range.1),
                seed: base_seed.wrapping_add(i as u64),
                ..template.clone()
            };
            generate_fixture(&spec, config)
        })
        .collect()
}
