//! Batch I/O and orchestration: reading record batches, running the estimator
//! over them in parallel, and the CSV tables exchanged between subcommands.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::detection::{record_from_value, DetectionRecord, RecordError};
use crate::estimate::{estimate_angle, AngleEstimate};
use crate::evaluation::{EvalError, MeasurementSet};
use crate::roi::{crop_roi, select_primary_instance, RoiError, RoiFrame};

pub const ANGLES_HEADER: [&str; 7] = [
    "image_id",
    "angle_deg",
    "segments_total",
    "segments_retained",
    "segments_in_mode",
    "selection",
    "flags",
];

/// Marker in a record's `source` declaring segments in the ROI crop frame.
pub const ROI_FRAME_MARKER: &str = "frame=roi";

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("failed to build worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: String, column: &'static str },
    #[error("{path}, line {line}: bad angle `{value}`")]
    BadValue {
        path: String,
        line: u64,
        value: String,
    },
    #[error("{path}: {source}")]
    Measurements {
        path: String,
        #[source]
        source: EvalError,
    },
}

/// One parsed (or unparseable) record and where it came from.
#[derive(Debug, Clone)]
pub struct BatchEntry {
    pub origin: String,
    pub record: Result<DetectionRecord, RecordError>,
}

/// A record that produced no angle.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reject {
    pub image_id: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    /// Sorted by image_id.
    pub estimates: Vec<AngleEstimate>,
    /// Sorted by image_id, then kind.
    pub rejects: Vec<Reject>,
}

/// Splits a JSON document holding one record or a list of records.
pub fn parse_batch_document(bytes: &[u8], origin: &str) -> Vec<BatchEntry> {
    match serde_json::from_slice::<serde_json::Value>(bytes) {
        Ok(serde_json::Value::Array(items)) => items
            .into_iter()
            .enumerate()
            .map(|(i, value)| BatchEntry {
                origin: format!("{origin}#{i}"),
                record: record_from_value(value),
            })
            .collect(),
        Ok(value) => vec![BatchEntry {
            origin: origin.to_string(),
            record: record_from_value(value),
        }],
        Err(e) => vec![BatchEntry {
            origin: origin.to_string(),
            record: Err(RecordError::Schema(e.to_string())),
        }],
    }
}

/// Reads a batch: either a directory of `*.json` documents (read in file-name
/// order) or a single document.
pub fn load_batch(path: &Path) -> Result<Vec<BatchEntry>, BatchError> {
    let io_err = |source| BatchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let meta = fs::metadata(path).map_err(io_err)?;
    let files = if meta.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut entries = Vec::new();
    for file in files {
        let bytes = fs::read(&file).map_err(|source| BatchError::Io {
            path: file.clone(),
            source,
        })?;
        entries.extend(parse_batch_document(&bytes, &file.display().to_string()));
    }
    Ok(entries)
}

#[derive(Debug, Clone, Default)]
pub struct EstimateOptions {
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Directory holding `<image_id>.png|jpg|jpeg` for sharpness measurement.
    pub images: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum Failure {
    #[error(transparent)]
    Estimate(#[from] crate::estimate::EstimateError),
    #[error(transparent)]
    Roi(#[from] RoiError),
    #[error("{0}")]
    Image(String),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Estimate(e) => e.kind(),
            Failure::Roi(RoiError::NoInstance { .. }) => "NoInstance",
            Failure::Roi(_) => "Roi",
            Failure::Image(_) => "Image",
        }
    }
}

fn find_image(dir: &Path, image_id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
}

fn measure_roi(
    record: &DetectionRecord,
    images: Option<&Path>,
    config: &PipelineConfig,
) -> Result<Option<RoiFrame>, Failure> {
    let roi_frame_segments = record.source.contains(ROI_FRAME_MARKER);
    if !roi_frame_segments && images.is_none() {
        return Ok(None);
    }
    let primary = select_primary_instance(record, config)?;
    let frame = match images {
        Some(dir) => {
            let path = find_image(dir, &record.image_id).ok_or_else(|| {
                Failure::Image(format!(
                    "no image for `{}` in {}",
                    record.image_id,
                    dir.display()
                ))
            })?;
            let image = image::open(&path)
                .map_err(|e| Failure::Image(format!("{}: {e}", path.display())))?;
            match image {
                DynamicImage::ImageLuma8(gray) => crop_roi(&gray, &primary.mask, config)?.frame(),
                other => crop_roi(&other.to_rgb8(), &primary.mask, config)?.frame(),
            }
        }
        None => crate::roi::roi_frame(&primary.mask, config)?,
    };
    if roi_frame_segments {
        Ok(Some(frame))
    } else {
        // segments are in the image frame; only the sharpness is borrowed
        Ok(Some(RoiFrame {
            x: 0,
            y: 0,
            width: record.width,
            height: record.height,
            sharpness: frame.sharpness,
        }))
    }
}

fn process_record(
    record: &DetectionRecord,
    images: Option<&Path>,
    config: &PipelineConfig,
) -> Result<AngleEstimate, Failure> {
    if !record
        .instances
        .iter()
        .any(|i| i.score >= config.min_instance_score)
    {
        // report NoInstance before any image or mask work
        return Ok(estimate_angle(record, None, config)?);
    }
    let roi = measure_roi(record, images, config)?;
    Ok(estimate_angle(record, roi.as_ref(), config)?)
}

fn fallback_id(origin: &str) -> String {
    Path::new(origin.split('#').next().unwrap_or(origin))
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| origin.to_string())
}

/// Estimates every record. Output order depends only on the records, never
/// on scheduling.
pub fn run_batch(
    entries: Vec<BatchEntry>,
    config: &PipelineConfig,
    options: &EstimateOptions,
) -> Result<BatchOutcome, BatchError> {
    let mut rejects = Vec::new();
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        match entry.record {
            Ok(record) => records.push(record),
            Err(e) => {
                let image_id = match &e {
                    RecordError::Invalid { image_id, .. }
                    | RecordError::Instance { image_id, .. }
                    | RecordError::Geometry { image_id, .. } => image_id.clone(),
                    RecordError::Schema(_) => fallback_id(&entry.origin),
                };
                rejects.push(Reject {
                    image_id,
                    kind: "Parse".into(),
                    message: e.to_string(),
                });
            }
        }
    }

    // a stable sort keeps the first occurrence of a duplicate id first
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut seen = BTreeSet::new();
    records.retain(|r| {
        if seen.insert(r.image_id.clone()) {
            true
        } else {
            rejects.push(Reject {
                image_id: r.image_id.clone(),
                kind: "DuplicateId".into(),
                message: "image_id already present in this batch".into(),
            });
            false
        }
    });

    let images = options.images.as_deref();
    let work = || -> Vec<Result<AngleEstimate, Reject>> {
        records
            .par_iter()
            .map(|record| {
                process_record(record, images, config).map_err(|f| Reject {
                    image_id: record.image_id.clone(),
                    kind: f.kind().to_string(),
                    message: f.to_string(),
                })
            })
            .collect()
    };
    let results = match options.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(work),
        None => work(),
    };

    let mut outcome = BatchOutcome::default();
    for result in results {
        match result {
            Ok(estimate) => outcome.estimates.push(estimate),
            Err(reject) => rejects.push(reject),
        }
    }
    rejects.sort();
    outcome.rejects = rejects;
    Ok(outcome)
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Vec<u8>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut writer = csv::Writer::from_writer(&mut buf);
        writer.write_record(header).expect("writing to memory");
        fill(&mut writer).expect("writing to memory");
        writer.flush().expect("writing to memory");
    }
    buf
}

/// The angles table: one row per estimate, angle rounded to 2 decimals,
/// flags joined with `;`.
pub fn angles_table(estimates: &[AngleEstimate]) -> Vec<u8> {
    csv_bytes(&ANGLES_HEADER, |w| {
        for e in estimates {
            let flags: Vec<&str> = e.flags.iter().map(|f| f.as_str()).collect();
            w.write_record([
                e.image_id.as_str(),
                &format!("{:.2}", e.angle_deg),
                &e.segments_total.to_string(),
                &e.segments_retained.to_string(),
                &e.segments_in_mode.to_string(),
                e.selection.as_str(),
                &flags.join(";"),
            ])?;
        }
        Ok(())
    })
}

pub fn rejects_table(rejects: &[Reject]) -> Vec<u8> {
    csv_bytes(&["image_id", "kind", "message"], |w| {
        for r in rejects {
            w.write_record([&r.image_id, &r.kind, &r.message])?;
        }
        Ok(())
    })
}

/// `image_id,true_angle_deg` with full precision.
pub fn ground_truth_table(rows: &[(String, f64)]) -> Vec<u8> {
    csv_bytes(&["image_id", "true_angle_deg"], |w| {
        for (id, angle) in rows {
            w.write_record([id.as_str(), &angle.to_string()])?;
        }
        Ok(())
    })
}

/// Reads an `image_id,angle_deg` table (other columns are ignored). The
/// angle column may also be called `true_angle_deg`.
pub fn read_measurements(
    bytes: &[u8],
    path: &str,
    label: &str,
) -> Result<MeasurementSet, TableError> {
    let csv_err = |source| TableError::Csv {
        path: path.to_string(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let column = |names: &[&str]| headers.iter().position(|h| names.contains(&h));
    let id_col = column(&["image_id"]).ok_or(TableError::MissingColumn {
        path: path.to_string(),
        column: "image_id",
    })?;
    let angle_col = column(&["angle_deg", "true_angle_deg"]).ok_or(TableError::MissingColumn {
        path: path.to_string(),
        column: "angle_deg",
    })?;
    let mut entries = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map_or(0, |p| p.line());
        let raw = row.get(angle_col).unwrap_or("");
        let angle: f64 = raw.parse().map_err(|_| TableError::BadValue {
            path: path.to_string(),
            line,
            value: raw.to_string(),
        })?;
        entries.push((row.get(id_col).unwrap_or("").to_string(), angle));
    }
    MeasurementSet::new(label, entries).map_err(|source| TableError::Measurements {
        path: path.to_string(),
        source,
    })
}

/// Written next to every output so a run can be reproduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: PipelineConfig,
    pub inputs: Vec<String>,
    pub processed: usize,
    pub rejected: usize,
    pub duration_ms: u128,
}
