use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::DynamicImage;
use leafangle_core::batch::{
    angles_table, ground_truth_table, load_batch, read_measurements, rejects_table, run_batch,
    EstimateOptions, RunManifest,
};
use leafangle_core::config::{ConfigOverlay, PipelineConfig};
use leafangle_core::detection::{parse_detection_record, serialize_record_pretty};
use leafangle_core::evaluation::{compare, EvalError, EvaluationReport, MeasurementSet};
use leafangle_core::roi::{crop_roi, select_primary_instance, RoiFrame};
use leafangle_core::synth::{fixture_suite, FixtureSpec};
use serde::Serialize;

/// Exit code when a run produced no usable result.
const EXIT_EMPTY: u8 = 2;

#[derive(Parser)]
#[command(
    name = "leafangle",
    version,
    about = "Leaf-stem angle estimation from detection records"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

/// Threshold flags; each overrides the same key from `--config`.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML file with threshold overrides
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    slope_band_low_deg: Option<f64>,
    #[arg(long, global = true)]
    slope_band_high_deg: Option<f64>,
    #[arg(long, global = true)]
    boundary_min_px: Option<f64>,
    #[arg(long, global = true)]
    orientation_bin_deg: Option<f64>,
    #[arg(long, global = true)]
    outlier_threshold_deg: Option<f64>,
    #[arg(long, global = true)]
    min_instance_score: Option<f64>,
    #[arg(long, global = true)]
    sharpness_warn_threshold: Option<f64>,
    #[arg(long, global = true)]
    roi_padding_px: Option<u32>,
}

impl ConfigArgs {
    /// defaults < config file < flags
    fn resolve(&self) -> Result<PipelineConfig> {
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                ConfigOverlay::from_toml(&text)
                    .with_context(|| format!("in config {}", path.display()))?
            }
            None => ConfigOverlay::default(),
        };
        let flags = ConfigOverlay {
            slope_band_low_deg: self.slope_band_low_deg,
            slope_band_high_deg: self.slope_band_high_deg,
            boundary_min_px: self.boundary_min_px,
            orientation_bin_deg: self.orientation_bin_deg,
            outlier_threshold_deg: self.outlier_threshold_deg,
            min_instance_score: self.min_instance_score,
            sharpness_warn_threshold: self.sharpness_warn_threshold,
            roi_padding_px: self.roi_padding_px,
        };
        Ok(PipelineConfig::layered(&[file, flags])?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate leaf angles for a batch of detection records
    Estimate {
        /// Directory of record documents, or one document (record or list)
        #[arg(long)]
        batch: PathBuf,
        /// Output directory for angles.csv, rejects.csv and manifest.json
        #[arg(long)]
        out: PathBuf,
        /// Directory with <image_id>.png/.jpg, enables the sharpness flag
        #[arg(long)]
        images: Option<PathBuf>,
        /// Worker threads (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare estimated angles with one or two manual measurement tables
    Evaluate {
        /// Angles table written by `estimate`
        #[arg(long)]
        angles: PathBuf,
        /// Manual table(s) with image_id,angle_deg columns
        #[arg(long, required = true, num_args = 1..=2)]
        manual: Vec<PathBuf>,
        /// Report document (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut the region of interest out of an image using its detection record
    ExtractRoi {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output PNG; a sidecar <out>.json holds offset and sharpness
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic detection records with known angles
    ///
    /// Records go to <out>/records/, the truth table and manifest to <out>.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        min_angle: f64,
        #[arg(long, default_value_t = 80.0)]
        max_angle: f64,
        #[arg(long, default_value_t = 3)]
        leaf_segments: usize,
        #[arg(long, default_value_t = 4)]
        stem_segments: usize,
        #[arg(long, default_value_t = 2)]
        distractors: usize,
        #[arg(long, default_value_t = 0.3)]
        jitter_deg: f64,
        #[arg(long, default_value_t = 800)]
        width: u32,
        #[arg(long, default_value_t = 600)]
        height: u32,
    },
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    write(path, serde_json::to_string_pretty(manifest)? + "\n")
}

fn manifest(
    subcommand: &str,
    config: &PipelineConfig,
    inputs: Vec<String>,
    processed: usize,
    rejected: usize,
    start: Instant,
) -> RunManifest {
    RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: subcommand.to_string(),
        config: *config,
        inputs,
        processed,
        rejected,
        duration_ms: start.elapsed().as_millis(),
    }
}

fn estimate(
    config: &PipelineConfig,
    batch: &Path,
    out: &Path,
    images: Option<PathBuf>,
    threads: Option<usize>,
) -> Result<u8> {
    let start = Instant::now();
    let entries = load_batch(batch)?;
    let mut inputs = vec![batch.display().to_string()];
    if let Some(dir) = &images {
        inputs.push(dir.display().to_string());
    }
    let outcome = run_batch(entries, config, &EstimateOptions { threads, images })?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("angles.csv"), angles_table(&outcome.estimates))?;
    write(&out.join("rejects.csv"), rejects_table(&outcome.rejects))?;
    let processed = outcome.estimates.len();
    write_manifest(
        &out.join("manifest.json"),
        &manifest(
            "estimate",
            config,
            inputs,
            processed,
            outcome.rejects.len(),
            start,
        ),
    )?;
    eprintln!(
        "{processed} estimated, {} rejected -> {}",
        outcome.rejects.len(),
        out.display()
    );
    Ok(if processed == 0 { EXIT_EMPTY } else { 0 })
}

fn load_measurements(path: &Path, label: &str) -> Result<MeasurementSet> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_measurements(
        &bytes,
        &path.display().to_string(),
        label,
    )?)
}

fn label_for(path: &Path, fallback: &str) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| fallback.to_string())
}

#[derive(Serialize)]
struct EvaluationDocument {
    reports: Vec<EvaluationReport>,
    /// First manual set against the second.
    inter_rater: Option<EvaluationReport>,
}

fn print_summary(report: &EvaluationReport) {
    println!("{}", report.pair);
    println!("  images compared       {}", report.n_common);
    println!(
        "  cosine similarity     {:.4} (angle {:.2} deg)",
        report.cosine_similarity, report.implied_angle_deg
    );
    println!(
        "  outliers (> {} deg)    {}",
        report.outlier_threshold_deg,
        report.outliers.len()
    );
    println!(
        "  mean signed diff      {:.3} deg",
        report.mean_signed_diff_deg
    );
    println!(
        "  mean abs diff         {:.3} deg",
        report.mean_abs_diff_deg
    );
    match report.non_outlier_mean_abs_diff_deg {
        Some(v) => println!("  non-outlier abs diff  {v:.3} deg"),
        None => println!("  non-outlier abs diff  n/a"),
    }
    if !report.only_in_first.is_empty() || !report.only_in_second.is_empty() {
        println!(
            "  unmatched             {} / {}",
            report.only_in_first.len(),
            report.only_in_second.len()
        );
    }
}

fn evaluate(config: &PipelineConfig, angles: &Path, manual: &[PathBuf], out: &Path) -> Result<u8> {
    let start = Instant::now();
    if manual.len() > 2 {
        bail!(
            "at most two manual tables are supported, got {}",
            manual.len()
        );
    }
    let algorithm = load_measurements(angles, "algorithm")?;
    let raters = manual
        .iter()
        .enumerate()
        .map(|(i, p)| load_measurements(p, &label_for(p, &format!("manual{}", i + 1))))
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::new();
    for rater in &raters {
        reports.push(compare(&algorithm, rater, config)?);
    }
    let inter_rater = match raters.as_slice() {
        [a, b] => Some(compare(a, b, config)?),
        _ => None,
    };
    for report in reports.iter().chain(&inter_rater) {
        print_summary(report);
    }
    let document = EvaluationDocument {
        reports,
        inter_rater,
    };
    write(out, serde_json::to_string_pretty(&document)? + "\n")?;
    let mut inputs = vec![angles.display().to_string()];
    inputs.extend(manual.iter().map(|p| p.display().to_string()));
    write_manifest(
        &out.with_extension("manifest.json"),
        &manifest("evaluate", config, inputs, document.reports.len(), 0, start),
    )?;
    Ok(0)
}

#[derive(Serialize)]
struct RoiSidecar {
    image_id: String,
    instance_index: usize,
    offset: (u32, u32),
    width: u32,
    height: u32,
    sharpness: f64,
    low_sharpness: bool,
}

fn extract_roi(config: &PipelineConfig, record: &Path, image: &Path, out: &Path) -> Result<u8> {
    let bytes = fs::read(record).with_context(|| format!("reading {}", record.display()))?;
    let record = parse_detection_record(&bytes)?;
    let picture = image::open(image).with_context(|| format!("opening {}", image.display()))?;
    if picture.width() != record.width || picture.height() != record.height {
        bail!(
            "image is {}x{} but record `{}` is {}x{}",
            picture.width(),
            picture.height(),
            record.image_id,
            record.width,
            record.height
        );
    }
    let primary = select_primary_instance(&record, config)?;
    let frame: RoiFrame = match picture {
        DynamicImage::ImageLuma8(gray) => {
            let roi = crop_roi(&gray, &primary.mask, config)?;
            roi.pixels.save(out)?;
            roi.frame()
        }
        other => {
            let roi = crop_roi(&other.to_rgb8(), &primary.mask, config)?;
            roi.pixels.save(out)?;
            roi.frame()
        }
    };
    let sharpness = frame.sharpness.unwrap_or(0.0);
    let sidecar = RoiSidecar {
        image_id: record.image_id,
        instance_index: primary.index,
        offset: (frame.x, frame.y),
        width: frame.width,
        height: frame.height,
        sharpness,
        low_sharpness: sharpness < config.sharpness_warn_threshold,
    };
    write(
        &out.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    Ok(0)
}

fn synth(
    config: &PipelineConfig,
    out: &Path,
    count: usize,
    seed: u64,
    angle_range: (f64, f64),
    template: FixtureSpec,
) -> Result<u8> {
    let start = Instant::now();
    if angle_range.0.partial_cmp(&angle_range.1) != Some(std::cmp::Ordering::Less) {
        bail!("--min-angle must be below --max-angle");
    }
    let suite = fixture_suite(count, seed, angle_range, &template, config)?;
    let records = out.join("records");
    fs::create_dir_all(&records).with_context(|| format!("creating {}", records.display()))?;
    let mut truth = Vec::with_capacity(suite.len());
    for (record, angle) in &suite {
        write(
            &records.join(format!("{}.json", record.image_id)),
            serialize_record_pretty(record) + "\n",
        )?;
        truth.push((record.image_id.clone(), *angle));
    }
    write(&out.join("ground_truth.csv"), ground_truth_table(&truth))?;
    write_manifest(
        &out.join("manifest.json"),
        &manifest("synth", config, vec![], suite.len(), 0, start),
    )?;
    eprintln!("{} records -> {}", suite.len(), out.display());
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    let config = cli.config.resolve()?;
    match cli.command {
        Command::Estimate {
            batch,
            out,
            images,
            threads,
        } => estimate(&config, &batch, &out, images, threads),
        Command::Evaluate {
            angles,
            manual,
            out,
        } => evaluate(&config, &angles, &manual, &out),
        Command::ExtractRoi { record, image, out } => extract_roi(&config, &record, &image, &out),
        Command::Synth {
            out,
            count,
            seed,
            min_angle,
            max_angle,
            leaf_segments,
            stem_segments,
            distractors,
            jitter_deg,
            width,
            height,
        } => {
            let template = FixtureSpec {
                true_angle_deg: 0.5 * (min_angle + max_angle),
                n_leaf_segments: leaf_segments,
                n_stem_segments: stem_segments,
                n_distractors: distractors,
                jitter_deg,
                image_size: (width, height),
                seed,
            };
            synth(&config, &out, count, seed, (min_angle, max_angle), template)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            let empty_join = err
                .downcast_ref::<EvalError>()
                .is_some_and(|e| matches!(e, EvalError::EmptyJoin { .. }));
            ExitCode::from(if empty_join { EXIT_EMPTY } else { 1 })
        }
    }
}
