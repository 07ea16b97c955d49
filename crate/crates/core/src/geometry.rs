//! Orientation, length and border distance of line segments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::LineSegment;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("segment has zero length")]
pub struct ZeroLengthSegment;

/// Unsigned orientation with the horizontal, in degrees, always in `[0, 90]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrientationDeg(f64);

impl OrientationDeg {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `atan2(|dy|, |dx|)` in degrees. Endpoint order and the direction of the y
/// axis do not matter.
pub fn orientation_deg(segment: &LineSegment) -> Result<OrientationDeg, ZeroLengthSegment> {
    let dx = (segment.x2 - segment.x1).abs();
    let dy = (segment.y2 - segment.y1).abs();
    if dx == 0.0 && dy == 0.0 {
        return Err(ZeroLengthSegment);
    }
    Ok(OrientationDeg(dy.atan2(dx).to_degrees().clamp(0.0, 90.0)))
}

pub fn segment_length(segment: &LineSegment) -> f64 {
    (segment.x2 - segment.x1).hypot(segment.y2 - segment.y1)
}

/// Distance of a point to the nearest border of a `width` x `height` pixel grid,
/// whose borders sit at indices 0 and `width - 1` / `height - 1`.
pub fn point_border_distance(x: f64, y: f64, width: u32, height: u32) -> f64 {
    let right = f64::from(width) - 1.0 - x;
    let bottom = f64::from(height) - 1.0 - y;
    x.min(y).min(right).min(bottom)
}

/// Smallest border distance over the whole segment.
///
/// Border distance is a minimum of affine functions and therefore concave
/// along the segment, so its minimum is attained at an endpoint.
pub fn boundary_distance(segment: &LineSegment, width: u32, height: u32) -> f64 {
    point_border_distance(segment.x1, segment.y1, width, height)
        .min(point_border_distance(segment.x2, segment.y2, width, height))
}
