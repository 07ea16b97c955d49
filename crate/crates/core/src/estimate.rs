//! Leaf angle estimation from detected line segments.
//!
//! 1. Drop stem lines: a segment is removed only when its orientation lies in
//!    the stem band *and* it is closer to the border than `boundary_min_px`.
//! 2. Quantize the surviving orientations into bins and take the most
//!    populated bin. If no bin holds two segments, fall back to the segment
//!    with the (lower) median orientation.
//! 3. Report the mean orientation of the selected segments.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::detection::{DetectionRecord, LineSegment};
use crate::geometry::{boundary_distance, orientation_deg, segment_length};
use crate::roi::RoiFrame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("no instance with score >= {min_score} in `{image_id}`")]
    NoInstance { image_id: String, min_score: f64 },
    #[error("no leaf line segments left in `{image_id}` ({total} detected)")]
    NoLeafLines { image_id: String, total: usize },
}

impl EstimateError {
    pub fn kind(&self) -> &'static str {
        match self {
            EstimateError::NoInstance { .. } => "NoInstance",
            EstimateError::NoLeafLines { .. } => "NoLeafLines",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Mode,
    Median,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Mode => "mode",
            Selection::Median => "median",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    LowSharpness,
    MultiInstance,
    MedianFallback,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::LowSharpness => "low_sharpness",
            Flag::MultiInstance => "multi_instance",
            Flag::MedianFallback => "median_fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleEstimate {
    pub image_id: String,
    /// Orientation of the leaf with the horizontal, degrees in `[0, 90]`.
    pub angle_deg: f64,
    pub segments_total: usize,
    pub segments_retained: usize,
    pub segments_in_mode: usize,
    pub selection: Selection,
    pub flags: BTreeSet<Flag>,
}

/// True when the segment looks like stem: steep and hugging the border.
pub fn is_stem_segment(
    segment: &LineSegment,
    width: u32,
    height: u32,
    config: &PipelineConfig,
) -> bool {
    let Ok(orientation) = orientation_deg(segment) else {
        return true;
    };
    let steep =
        (config.slope_band_low_deg..=config.slope_band_high_deg).contains(&orientation.value());
    steep && boundary_distance(segment, width, height) < config.boundary_min_px
}

/// Keeps every segment that is not a stem segment, in input order.
/// Zero-length segments have no orientation and are dropped as well.
pub fn filter_segments(
    segments: &[LineSegment],
    width: u32,
    height: u32,
    config: &PipelineConfig,
) -> Vec<LineSegment> {
    segments
        .iter()
        .filter(|s| !is_stem_segment(s, width, height, config))
        .copied()
        .collect()
}

pub fn orientation_bin(orientation: f64, bin_width: f64) -> i64 {
    (orientation / bin_width).floor() as i64
}

/// Segments chosen to represent the leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Dominant {
    pub segments: Vec<LineSegment>,
    pub selection: Selection,
    pub bin: i64,
}

struct Measured {
    segment: LineSegment,
    orientation: f64,
    length: f64,
    bin: i64,
}

#[derive(Default)]
struct BinStats {
    count: usize,
    longest: f64,
}

/// Picks the most populated orientation bin (ties: bin holding the longest
/// segment, then the lower bin index). Without any bin of two or more, returns
/// the single lower-median segment. `None` for empty input.
pub fn select_dominant_segments(
    retained: &[LineSegment],
    config: &PipelineConfig,
) -> Option<Dominant> {
    let measured: Vec<Measured> = retained
        .iter()
        .filter_map(|segment| {
            let orientation = orientation_deg(segment).ok()?.value();
            Some(Measured {
                segment: *segment,
                orientation,
                length: segment_length(segment),
                bin: orientation_bin(orientation, config.orientation_bin_deg),
            })
        })
        .collect();
    if measured.is_empty() {
        return None;
    }

    let mut bins: BTreeMap<i64, BinStats> = BTreeMap::new();
    for m in &measured {
        let stats = bins.entry(m.bin).or_default();
        stats.count += 1;
        stats.longest = stats.longest.max(m.length);
    }

    // BTreeMap iterates in ascending bin order, so a strict comparison keeps
    // the lowest bin among exact ties.
    let mut winner: Option<(i64, &BinStats)> = None;
    for (&bin, stats) in &bins {
        let better = match winner {
            None => true,
            Some((_, best)) => {
                stats.count > best.count
                    || (stats.count == best.count && stats.longest > best.longest)
            }
        };
        if better {
            winner = Some((bin, stats));
        }
    }
    let (bin, stats) = winner?;

    if stats.count >= 2 {
        return Some(Dominant {
            segments: measured
                .iter()
                .filter(|m| m.bin == bin)
                .map(|m| m.segment)
                .collect(),
            selection: Selection::Mode,
            bin,
        });
    }

    let mut order: Vec<&Measured> = measured.iter().collect();
    order.sort_by(|a, b| a.orientation.total_cmp(&b.orientation));
    let median = order[(order.len() - 1) / 2];
    Some(Dominant {
        segments: vec![median.segment],
        selection: Selection::Median,
        bin: median.bin,
    })
}

/// Mean orientation, summed in sorted order so the result does not depend on
/// the order of the input.
pub fn mean_orientation(segments: &[LineSegment]) -> Option<f64> {
    let mut values: Vec<f64> = segments
        .iter()
        .filter_map(|s| orientation_deg(s).ok().map(|o| o.value()))
        .collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Some(mean.clamp(0.0, 90.0))
}

/// Runs the full segment pipeline on one record.
///
/// When `roi` is given the segments are taken to be in the ROI frame and the
/// border test uses the ROI dimensions; its sharpness (if measured) drives the
/// `low_sharpness` flag.
pub fn estimate_angle(
    record: &DetectionRecord,
    roi: Option<&RoiFrame>,
    config: &PipelineConfig,
) -> Result<AngleEstimate, EstimateError> {
    if !record
        .instances
        .iter()
        .any(|i| i.score >= config.min_instance_score)
    {
        return Err(EstimateError::NoInstance {
            image_id: record.image_id.clone(),
            min_score: config.min_instance_score,
        });
    }

    let (width, height) = roi
        .map(|r| (r.width, r.height))
        .unwrap_or((record.width, record.height));
    let retained = filter_segments(&record.segments, width, height, config);
    let no_lines = || EstimateError::NoLeafLines {
        image_id: record.image_id.clone(),
        total: record.segments.len(),
    };
    let dominant = select_dominant_segments(&retained, config).ok_or_else(no_lines)?;
    let angle_deg = mean_orientation(&dominant.segments).ok_or_else(no_lines)?;

    let mut flags = BTreeSet::new();
    if dominant.selection == Selection::Median {
        flags.insert(Flag::MedianFallback);
    }
    if record.instances.len() > 1 {
        flags.insert(Flag::MultiInstance);
    }
    if roi
        .and_then(|r| r.sharpness)
        .is_some_and(|s| s < config.sharpness_warn_threshold)
    {
        flags.insert(Flag::LowSharpness);
    }

    Ok(AngleEstimate {
        image_id: record.image_id.clone(),
        angle_deg,
        segments_total: record.segments.len(),
        segments_retained: retained.len(),
        segments_in_mode: dominant.segments.len(),
        selection: dominant.selection,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{InstanceDetection, MaskEncoding};
    use proptest::prelude::*;

    /// Segment of the given orientation and length centred at (cx, cy).
    fn at_angle(cx: f64, cy: f64, deg: f64, length: f64) -> LineSegment {
        let (s, c) = deg.to_radians().sin_cos();
        let (hx, hy) = (0.5 * length * c, 0.5 * length * s);
        LineSegment::new(cx - hx, cy + hy, cx + hx, cy - hy)
    }

    fn record(segments: Vec<LineSegment>) -> DetectionRecord {
        DetectionRecord {
            image_id: "img".into(),
            width: 1000,
            height: 1000,
            source: "test".into(),
            instances: vec![InstanceDetection {
                score: 0.9,
                bbox: [0.0, 0.0, 1000.0, 1000.0],
                mask: MaskEncoding::Polygon(vec![[0.0, 0.0], [1000.0, 0.0], [1000.0, 1000.0]]),
            }],
            segments,
        }
    }

    #[test]
    fn filter_truth_table() {
        let config = PipelineConfig::default();
        // steep, 50 px from the left border: removed
        let steep_near =
            LineSegment::new(50.0, 400.0, 50.0 + 10.0 * 5f64.to_radians().tan(), 410.0);
        assert!((orientation_deg(&steep_near).unwrap().value() - 85.0).abs() < 1e-9);
        assert_eq!(boundary_distance(&steep_near, 1000, 1000), 50.0);
        // steep, 150 px away: kept
        let steep_far =
            LineSegment::new(150.0, 400.0, 150.0 + 10.0 * 5f64.to_radians().tan(), 410.0);
        // shallow, 50 px away: kept
        let shallow_near = at_angle(60.0, 500.0, 30.0, 10.0);
        assert!(boundary_distance(&shallow_near, 1000, 1000) < 100.0);
        let shallow_far = at_angle(500.0, 500.0, 30.0, 10.0);
        let kept = filter_segments(
            &[steep_near, steep_far, shallow_near, shallow_far],
            1000,
            1000,
            &config,
        );
        assert_eq!(kept, vec![steep_far, shallow_near, shallow_far]);
    }

    #[test]
    fn band_is_inclusive_at_both_ends() {
        let config = PipelineConfig::default();
        let vertical = LineSegment::new(10.0, 100.0, 10.0, 200.0);
        assert!(is_stem_segment(&vertical, 1000, 1000, &config));
        let eighty = LineSegment::new(10.0, 500.0, 10.0 + 100.0 / 80f64.to_radians().tan(), 400.0);
        let o = orientation_deg(&eighty).unwrap().value();
        let on_edge = if o < 80.0 {
            LineSegment {
                x2: eighty.x2 - 1e-9,
                ..eighty
            }
        } else {
            eighty
        };
        assert!(orientation_deg(&on_edge).unwrap().value() >= 80.0);
        assert!(is_stem_segment(&on_edge, 1000, 1000, &config));
        // exactly at boundary_min_px is not "within" the margin
        let at_margin = LineSegment::new(100.0, 300.0, 100.0, 400.0);
        assert!(!is_stem_segment(&at_margin, 1000, 1000, &config));
    }

    #[test]
    fn mode_bin_selected() {
        let segs = vec![
            at_angle(500.0, 500.0, 30.2, 40.0),
            at_angle(500.0, 500.0, 30.7, 40.0),
            at_angle(500.0, 500.0, 45.1, 40.0),
        ];
        let d = select_dominant_segments(&segs, &PipelineConfig::default()).unwrap();
        assert_eq!(d.selection, Selection::Mode);
        assert_eq!(d.bin, 30);
        assert_eq!(d.segments, segs[..2].to_vec());
    }

    #[test]
    fn median_fallback_without_mode() {
        let segs = vec![
            at_angle(500.0, 500.0, 30.0, 40.0),
            at_angle(500.0, 500.0, 10.0, 40.0),
            at_angle(500.0, 500.0, 20.0, 40.0),
        ];
        let d = select_dominant_segments(&segs, &PipelineConfig::default()).unwrap();
        assert_eq!(d.selection, Selection::Median);
        assert_eq!(d.segments, vec![segs[2]]);
        // even count: lower median
        let d = select_dominant_segments(&segs[..2], &PipelineConfig::default()).unwrap();
        assert_eq!(d.segments, vec![segs[1]]);
    }

    #[test]
    fn equal_counts_prefer_longest_segment() {
        let segs = vec![
            at_angle(500.0, 500.0, 12.1, 5.0),
            at_angle(500.0, 500.0, 12.4, 9.0),
            at_angle(500.0, 500.0, 33.0, 6.0),
            at_angle(500.0, 500.0, 33.2, 7.0),
        ];
        let d = select_dominant_segments(&segs, &PipelineConfig::default()).unwrap();
        assert_eq!(d.bin, 12);
        assert_eq!(d.segments, segs[..2].to_vec());
        // swap which bin holds the longest segment
        let mut swapped = segs.clone();
        swapped[3] = at_angle(500.0, 500.0, 33.2, 11.0);
        let d = select_dominant_segments(&swapped, &PipelineConfig::default()).unwrap();
        assert_eq!(d.bin, 33);
    }

    #[test]
    fn full_ties_go_to_lower_bin() {
        let segs = vec![
            at_angle(500.0, 500.0, 50.5, 8.0),
            at_angle(500.0, 500.0, 50.6, 8.0),
            at_angle(500.0, 500.0, 20.5, 8.0),
            at_angle(500.0, 500.0, 20.6, 8.0),
        ];
        let d = select_dominant_segments(&segs, &PipelineConfig::default()).unwrap();
        assert_eq!(d.bin, 20);
    }

    #[test]
    fn empty_selection_is_none() {
        assert_eq!(
            select_dominant_segments(&[], &PipelineConfig::default()),
            None
        );
    }

    #[test]
    fn single_segment_at_45() {
        let est = estimate_angle(
            &record(vec![LineSegment::new(400.0, 400.0, 500.0, 500.0)]),
            None,
            &PipelineConfig::default(),
        )
        .unwrap();
        assert_eq!(est.angle_deg, 45.0);
        assert_eq!(est.selection, Selection::Median);
        assert_eq!(est.segments_in_mode, 1);
        assert!(est.flags.contains(&Flag::MedianFallback));
    }

    #[test]
    fn stem_only_record_has_no_leaf_lines() {
        let stem = |x: f64| LineSegment::new(x, 300.0, x + 300.0 / 85f64.to_radians().tan(), 600.0);
        let err = estimate_angle(
            &record(vec![stem(20.0), stem(40.0)]),
            None,
            &PipelineConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "NoLeafLines");
        let err = estimate_angle(&record(vec![]), None, &PipelineConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "NoLeafLines");
    }

    #[test]
    fn missing_instance_is_reported_first() {
        let mut rec = record(vec![LineSegment::new(400.0, 400.0, 500.0, 500.0)]);
        rec.instances[0].score = 0.1;
        let err = estimate_angle(&rec, None, &PipelineConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "NoInstance");
    }

    #[test]
    fn flags_follow_inputs() {
        let mut rec = record(vec![
            at_angle(500.0, 500.0, 35.2, 50.0),
            at_angle(450.0, 520.0, 35.6, 60.0),
        ]);
        rec.instances.push(rec.instances[0].clone());
        let roi = RoiFrame {
            x: 0,
            y: 0,
            width: 1000,
            height: 1000,
            sharpness: Some(12.0),
        };
        let est = estimate_angle(&rec, Some(&roi), &PipelineConfig::default()).unwrap();
        assert_eq!(est.selection, Selection::Mode);
        assert_eq!(
            est.flags,
            BTreeSet::from([Flag::LowSharpness, Flag::MultiInstance])
        );
        assert!((est.angle_deg - 35.4).abs() < 1e-9);
    }

    #[test]
    fn roi_frame_changes_border_distances() {
        // 85 deg line 150 px from the border of the full image, but 50 px
        // from the border of a 300 px ROI
        let steep = LineSegment::new(
            150.0,
            100.0,
            150.0 + 100.0 / 85f64.to_radians().tan(),
            200.0,
        );
        let leaf = vec![
            at_angle(150.0, 150.0, 20.3, 30.0),
            at_angle(150.0, 160.0, 20.5, 30.0),
        ];
        let mut segs = leaf.clone();
        segs.push(steep);
        let rec = record(segs);
        let config = PipelineConfig::default();
        let full = estimate_angle(&rec, None, &config).unwrap();
        assert_eq!(full.segments_retained, 3);
        let roi = RoiFrame {
            x: 0,
            y: 0,
            width: 200,
            height: 300,
            sharpness: None,
        };
        let cropped = estimate_angle(&rec, Some(&roi), &config).unwrap();
        assert_eq!(cropped.segments_retained, 2);
        assert!(cropped.flags.is_empty());
    }

    proptest! {
        #[test]
        fn single_bin_angle_is_mean_of_all(
            base in 0u32..89,
            offsets in proptest::collection::vec((0.05f64..0.95, 5.0f64..200.0), 2..10),
        ) {
            let segs: Vec<_> = offsets
                .iter()
                .map(|&(o, len)| at_angle(500.0, 500.0, f64::from(base) + o, len))
                .collect();
            let config = PipelineConfig { slope_band_low_deg: 89.5, ..PipelineConfig::default() };
            let est = estimate_angle(&record(segs.clone()), None, &config).unwrap();
            let direct: f64 = segs.iter().map(|s| orientation_deg(s).unwrap().value()).sum::<f64>()
                / segs.len() as f64;
            prop_assert!((est.angle_deg - direct).abs() < 1e-9);
            prop_assert_eq!(est.segments_in_mode, segs.len());
        }

        #[test]
        fn angle_is_permutation_invariant(
            segs in proptest::collection::vec((0.0f64..90.0, 5.0f64..300.0), 1..12),
            seed in any::<u64>(),
        ) {
            let segs: Vec<_> = segs.iter().map(|&(a, l)| at_angle(500.0, 500.0, a, l)).collect();
            let mut shuffled = segs.clone();
            // deterministic Fisher-Yates driven by a simple LCG
            let mut state = seed;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            let config = PipelineConfig::default();
            let a = estimate_angle(&record(segs), None, &config).unwrap();
            let b = estimate_angle(&record(shuffled), None, &config).unwrap();
            prop_assert_eq!(a.angle_deg, b.angle_deg);
            prop_assert!((0.0..=90.0).contains(&a.angle_deg));
            prop_assert!(a.segments_in_mode <= a.segments_retained);
            prop_assert!(a.segments_retained <= a.segments_total);
        }
    }
}
