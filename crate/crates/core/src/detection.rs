//! Detection-record interchange format.
//!
//! One JSON document per image carries the instance masks and line segments
//! emitted by the inference side:
//!
//! ```json
//! {"image_id": "plant_001", "width": 640, "height": 480, "source": "...",
//!  "instances": [{"score": 0.97, "bbox": [x, y, w, h], "mask": {"polygon": [[x, y], ...]}}],
//!  "segments": [{"x1": 1.0, "y1": 2.0, "x2": 3.0, "y2": 4.0, "score": 0.8}]}
//! ```
//!
//! Masks are either a polygon or an uncompressed COCO run-length encoding
//! (`{"rle": [counts...]}`, column-major, first run is background).
//! Coordinates are pixel coordinates with y pointing down; pixel `(x, y)`
//! has its center at the integer point `(x, y)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Segment endpoints may overshoot the image extent by this much before the
/// record is rejected.
pub const CLAMP_TOLERANCE_PX: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("record `{image_id}`: {message}")]
    Invalid { image_id: String, message: String },
    #[error("record `{image_id}`, instance {index}: {message}")]
    Instance {
        image_id: String,
        index: usize,
        message: String,
    },
    #[error("record `{image_id}`, segment {index}: {message}")]
    Geometry {
        image_id: String,
        index: usize,
        message: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("RLE counts sum to {actual}, expected {expected} (width x height)")]
    RleLength { expected: u64, actual: u64 },
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon vertex {0} is not finite")]
    NonFiniteVertex(usize),
    #[error("mask grid must be non-empty, got {width}x{height}")]
    EmptyGrid { width: u32, height: u32 },
}

/// A detected line segment in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl LineSegment {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// Same segment with the endpoints swapped.
    pub fn reversed(self) -> Self {
        Self {
            x1: self.x2,
            y1: self.y2,
            x2: self.x1,
            y2: self.y1,
            score: self.score,
        }
    }
}

/// COCO-style mask encoding. Compressed (string) RLE is not supported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", try_from = "RawMask")]
pub enum MaskEncoding {
    Polygon(Vec<[f64; 2]>),
    Rle(Vec<u64>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMask {
    polygon: Option<Vec<[f64; 2]>>,
    rle: Option<serde_json::Value>,
    counts: Option<serde_json::Value>,
    size: Option<serde_json::Value>,
}

impl TryFrom<RawMask> for MaskEncoding {
    type Error = String;

    fn try_from(raw: RawMask) -> Result<Self, Self::Error> {
        const COMPRESSED: &str =
            "compressed RLE is not supported; emit uncompressed counts as {\"rle\": [..]}";
        if raw.counts.is_some() || raw.size.is_some() {
            return Err(COMPRESSED.to_string());
        }
        match (raw.polygon, raw.rle) {
            (Some(polygon), None) => Ok(MaskEncoding::Polygon(polygon)),
            (None, Some(serde_json::Value::Array(items))) => items
                .into_iter()
                .map(|v| {
                    v.as_u64()
                        .ok_or_else(|| format!("RLE count {v} is not a non-negative integer"))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(MaskEncoding::Rle),
            (None, Some(_)) => Err(COMPRESSED.to_string()),
            (Some(_), Some(_)) => Err("mask has both `polygon` and `rle`".to_string()),
            (None, None) => Err("mask needs one of `polygon` or `rle`".to_string()),
        }
    }
}

impl MaskEncoding {
    /// Structural checks that do not need a target grid.
    fn check_shape(&self) -> Result<(), MaskError> {
        match self {
            MaskEncoding::Polygon(vertices) => {
                if vertices.len() < 3 {
                    return Err(MaskError::TooFewVertices(vertices.len()));
                }
                if let Some(i) = vertices
                    .iter()
                    .position(|v| !v[0].is_finite() || !v[1].is_finite())
                {
                    return Err(MaskError::NonFiniteVertex(i));
                }
                Ok(())
            }
            MaskEncoding::Rle(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDetection {
    pub score: f64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub mask: MaskEncoding,
}

/// Everything the inference side produced for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub source: String,
    pub instances: Vec<InstanceDetection>,
    pub segments: Vec<LineSegment>,
}

/// Decoded binary mask, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl InstanceMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    /// Builds a mask from row-major bits. Returns `None` on a length mismatch.
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width as usize * height as usize).then_some(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        self.bits[i] = value;
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Inclusive bounding box `(x_min, y_min, x_max, y_max)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bbox = Some(match bbox {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bbox
    }
}

/// Rasterizes `encoding` onto a `width` x `height` grid.
///
/// Polygons use the even-odd rule evaluated at pixel centers; a center lying
/// exactly on a left/top edge counts as inside and on a right/bottom edge as
/// outside, so axis-aligned polygons with integer corners cover exactly their
/// area. RLE counts are column-major and alternate background/foreground,
/// starting with background.
pub fn decode_mask(
    encoding: &MaskEncoding,
    width: u32,
    height: u32,
) -> Result<InstanceMask, MaskError> {
    if width == 0 || height == 0 {
        return Err(MaskError::EmptyGrid { width, height });
    }
    encoding.check_shape()?;
    match encoding {
        MaskEncoding::Rle(counts) => decode_rle(counts, width, height),
        MaskEncoding::Polygon(vertices) => Ok(rasterize_polygon(vertices, width, height)),
    }
}

fn decode_rle(counts: &[u64], width: u32, height: u32) -> Result<InstanceMask, MaskError> {
    let expected = u64::from(width) * u64::from(height);
    let actual = counts
        .iter()
        .try_fold(0u64, |acc, &c| acc.checked_add(c))
        .unwrap_or(u64::MAX);
    if actual != expected {
        return Err(MaskError::RleLength { expected, actual });
    }
    let mut mask = InstanceMask::empty(width, height);
    let mut pos = 0u64;
    for (run, &count) in counts.iter().enumerate() {
        if run % 2 == 1 {
            for p in pos..pos + count {
                let x = (p / u64::from(height)) as u32;
                let y = (p % u64::from(height)) as u32;
                mask.set(x, y, true);
            }
        }
        pos += count;
    }
    Ok(mask)
}

fn rasterize_polygon(vertices: &[[f64; 2]], width: u32, height: u32) -> InstanceMask {
    let mut mask = InstanceMask::empty(width, height);
    let mut crossings = Vec::new();
    for y in 0..height {
        let py = f64::from(y);
        crossings.clear();
        for (i, a) in vertices.iter().enumerate() {
            let b = &vertices[(i + 1) % vertices.len()];
            if (a[1] > py) != (b[1] > py) {
                crossings.push(a[0] + (py - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            // pixels with pair[0] <= x < pair[1]
            let start = pair[0].ceil().max(0.0);
            let end = (pair[1].ceil() - 1.0).min(f64::from(width) - 1.0);
            if start > end {
                continue;
            }
            for x in start as u32..=end as u32 {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

fn clamp_coordinate(value: f64, extent: u32) -> Option<f64> {
    let extent = f64::from(extent);
    if !value.is_finite() || value < -CLAMP_TOLERANCE_PX || value > extent + CLAMP_TOLERANCE_PX {
        return None;
    }
    Some(value.clamp(0.0, extent - 1.0))
}

fn validate(mut record: DetectionRecord) -> Result<DetectionRecord, RecordError> {
    let image_id = record.image_id.clone();
    let invalid = |message: &str| RecordError::Invalid {
        image_id: image_id.clone(),
        message: message.to_string(),
    };
    if record.image_id.is_empty() {
        return Err(RecordError::Schema("`image_id` must be non-empty".into()));
    }
    if record.width == 0 {
        return Err(invalid("`width` must be positive"));
    }
    if record.height == 0 {
        return Err(invalid("`height` must be positive"));
    }
    let (width, height) = (f64::from(record.width), f64::from(record.height));

    for (index, instance) in record.instances.iter().enumerate() {
        let fail = |message: String| RecordError::Instance {
            image_id: image_id.clone(),
            index,
            message,
        };
        if !(0.0..=1.0).contains(&instance.score) {
            return Err(fail(format!("score {} outside [0, 1]", instance.score)));
        }
        let [x, y, w, h] = instance.bbox;
        let inside = [x, y, w, h].iter().all(|v| v.is_finite())
            && x >= 0.0
            && y >= 0.0
            && w >= 0.0
            && h >= 0.0
            && x + w <= width
            && y + h <= height;
        if !inside {
            return Err(fail(format!("bbox {:?} outside the image", instance.bbox)));
        }
        instance
            .mask
            .check_shape()
            .map_err(|e| fail(e.to_string()))?;
        if let MaskEncoding::Rle(counts) = &instance.mask {
            let expected = u64::from(record.width) * u64::from(record.height);
            let actual: u64 = counts.iter().fold(0u64, |acc, &c| acc.saturating_add(c));
            if actual != expected {
                return Err(fail(MaskError::RleLength { expected, actual }.to_string()));
            }
        }
    }

    for (index, segment) in record.segments.iter_mut().enumerate() {
        let fail = |message: String| RecordError::Geometry {
            image_id: image_id.clone(),
            index,
            message,
        };
        if !(0.0..=1.0).contains(&segment.score) {
            return Err(fail(format!("score {} outside [0, 1]", segment.score)));
        }
        let clamped = (
            clamp_coordinate(segment.x1, record.width),
            clamp_coordinate(segment.y1, record.height),
            clamp_coordinate(segment.x2, record.width),
            clamp_coordinate(segment.y2, record.height),
        );
        let (Some(x1), Some(y1), Some(x2), Some(y2)) = clamped else {
            return Err(fail(format!(
                "endpoint ({}, {})-({}, {}) more than {CLAMP_TOLERANCE_PX} px outside {}x{}",
                segment.x1, segment.y1, segment.x2, segment.y2, record.width, record.height
            )));
        };
        if x1 == x2 && y1 == y2 {
            return Err(fail("zero-length segment after clamping".into()));
        }
        *segment = LineSegment {
            x1,
            y1,
            x2,
            y2,
            score: segment.score,
        };
    }
    Ok(record)
}

/// Parses and validates one record document. Segment endpoints up to
/// [`CLAMP_TOLERANCE_PX`] outside the image are clamped onto the pixel grid.
pub fn parse_detection_record(bytes: &[u8]) -> Result<DetectionRecord, RecordError> {
    let record: DetectionRecord =
        serde_json::from_slice(bytes).map_err(|e| RecordError::Schema(e.to_string()))?;
    validate(record)
}

/// Same as [`parse_detection_record`] for an already-parsed JSON value.
pub fn record_from_value(value: serde_json::Value) -> Result<DetectionRecord, RecordError> {
    let record: DetectionRecord =
        serde_json::from_value(value).map_err(|e| RecordError::Schema(e.to_string()))?;
    validate(record)
}

pub fn serialize_record(record: &DetectionRecord) -> String {
    serde_json::to_string(record).expect("records always serialize")
}

pub fn serialize_record_pretty(record: &DetectionRecord) -> String {
    serde_json::to_string_pretty(record).expect("records always serialize")
}
