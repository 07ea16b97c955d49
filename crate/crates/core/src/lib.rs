//! Leaf-stem angle estimation from instance masks and detected line segments.
//!
//! The pipeline reads one [`detection::DetectionRecord`] per image, picks the
//! leaf-stem instance, removes stem lines, selects the dominant leaf
//! orientation and reports it as an [`estimate::AngleEstimate`]. The
//! [`evaluation`] module compares estimates with manual measurements.

pub mod batch;
pub mod config;
pub mod detection;
pub mod estimate;
pub mod evaluation;
pub mod geometry;
pub mod roi;
pub mod synth;

pub use config::{load_config, ConfigOverlay, PipelineConfig};
pub use detection::{
    decode_mask, parse_detection_record, DetectionRecord, InstanceDetection, InstanceMask,
    LineSegment, MaskEncoding,
};
pub use estimate::{estimate_angle, filter_segments, select_dominant_segments, AngleEstimate};
pub use evaluation::{
    compare, cosine_similarity, implied_angle_deg, EvaluationReport, MeasurementSet,
};
