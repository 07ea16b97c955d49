//! Region-of-interest extraction: pick the leaf-stem instance, AND its mask
//! with the image and crop around it.

use image::{ImageBuffer, Pixel};
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::detection::{decode_mask, DetectionRecord, InstanceMask, MaskError};

/// Luminance weights applied to R, G, B.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoiError {
    #[error("no instance with score >= {min_score} in `{image_id}`")]
    NoInstance { image_id: String, min_score: f64 },
    #[error("mask is empty")]
    EmptyMask,
    #[error("image is {image_width}x{image_height} but mask is {mask_width}x{mask_height}")]
    Shape {
        image_width: u32,
        image_height: u32,
        mask_width: u32,
        mask_height: u32,
    },
    #[error("sharpness needs at least 3x3 pixels, got {width}x{height}")]
    TooSmall { width: u32, height: u32 },
    #[error("instance {index}: {source}")]
    Mask {
        index: usize,
        #[source]
        source: MaskError,
    },
}

pub type Image<P> = ImageBuffer<P, Vec<<P as Pixel>::Subpixel>>;

/// The instance chosen as the leaf-stem junction.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryInstance {
    pub index: usize,
    pub mask: InstanceMask,
}

/// Chooses the instance with the largest mask area among those scoring at
/// least `min_instance_score`. Equal areas go to the lowest index.
pub fn select_primary_instance(
    record: &DetectionRecord,
    config: &PipelineConfig,
) -> Result<PrimaryInstance, RoiError> {
    let mut best: Option<(usize, InstanceMask, usize)> = None;
    for (index, instance) in record.instances.iter().enumerate() {
        if instance.score < config.min_instance_score {
            continue;
        }
        let mask = decode_mask(&instance.mask, record.width, record.height)
            .map_err(|source| RoiError::Mask { index, source })?;
        let area = mask.area();
        if best
            .as_ref()
            .is_none_or(|(_, _, best_area)| area > *best_area)
        {
            best = Some((index, mask, area));
        }
    }
    best.map(|(index, mask, _)| PrimaryInstance { index, mask })
        .ok_or_else(|| RoiError::NoInstance {
            image_id: record.image_id.clone(),
            min_score: config.min_instance_score,
        })
}

fn check_shape<P: Pixel>(image: &Image<P>, mask: &InstanceMask) -> Result<(), RoiError> {
    if image.dimensions() != (mask.width(), mask.height()) {
        return Err(RoiError::Shape {
            image_width: image.width(),
            image_height: image.height(),
            mask_width: mask.width(),
            mask_height: mask.height(),
        });
    }
    Ok(())
}

/// Pixelwise AND: keeps the pixel where the mask is set, zero elsewhere.
pub fn apply_mask<P: Pixel>(image: &Image<P>, mask: &InstanceMask) -> Result<Image<P>, RoiError> {
    check_shape(image, mask)?;
    let mut out: Image<P> = ImageBuffer::new(image.width(), image.height());
    for (x, y, pixel) in image.enumerate_pixels() {
        if mask.get(x, y) {
            out.put_pixel(x, y, *pixel);
        }
    }
    Ok(out)
}

/// Crop rectangle in source-image pixels plus an optional sharpness value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiFrame {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub sharpness: Option<f64>,
}

/// Bounding box of the set pixels grown by `roi_padding_px` and clipped to the
/// mask grid. Needs no pixel data.
pub fn roi_frame(mask: &InstanceMask, config: &PipelineConfig) -> Result<RoiFrame, RoiError> {
    let (x0, y0, x1, y1) = mask.bounding_box().ok_or(RoiError::EmptyMask)?;
    let pad = config.roi_padding_px;
    let (left, top) = (x0.saturating_sub(pad), y0.saturating_sub(pad));
    let right = x1.saturating_add(pad).min(mask.width() - 1);
    let bottom = y1.saturating_add(pad).min(mask.height() - 1);
    Ok(RoiFrame {
        x: left,
        y: top,
        width: right - left + 1,
        height: bottom - top + 1,
        sharpness: None,
    })
}

#[derive(Clone)]
pub struct RoiImage<P: Pixel> {
    /// Masked pixels inside the crop rectangle.
    pub pixels: Image<P>,
    pub offset: (u32, u32),
    /// Sharpness of the unmasked crop.
    pub sharpness: f64,
}

impl<P: Pixel> std::fmt::Debug for RoiImage<P> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RoiImage")
            .field("dimensions", &self.pixels.dimensions())
            .field("offset", &self.offset)
            .field("sharpness", &self.sharpness)
            .finish()
    }
}

impl<P: Pixel> RoiImage<P> {
    pub fn frame(&self) -> RoiFrame {
        RoiFrame {
            x: self.offset.0,
            y: self.offset.1,
            width: self.pixels.width(),
            height: self.pixels.height(),
            sharpness: Some(self.sharpness),
        }
    }
}

/// Masks the image and crops it to [`roi_frame`]. Sharpness is measured on
/// the unmasked crop so the mask outline does not register as detail.
pub fn crop_roi<P: Pixel>(
    image: &Image<P>,
    mask: &InstanceMask,
    config: &PipelineConfig,
) -> Result<RoiImage<P>, RoiError>
where
    P::Subpixel: ToPrimitive,
{
    check_shape(image, mask)?;
    let frame = roi_frame(mask, config)?;
    let masked = apply_mask(image, mask)?;
    let crop = |src: &Image<P>| -> Image<P> {
        ImageBuffer::from_fn(frame.width, frame.height, |x, y| {
            *src.get_pixel(frame.x + x, frame.y + y)
        })
    };
    let sharpness = sharpness_score(&crop(image))?;
    Ok(RoiImage {
        pixels: crop(&masked),
        offset: (frame.x, frame.y),
        sharpness,
    })
}

/// Luminance of every pixel, row-major. Single- and two-channel pixels use
/// their first channel; colour pixels use [`LUMA_WEIGHTS`].
pub fn luminance<P: Pixel>(image: &Image<P>) -> Vec<f64>
where
    P::Subpixel: ToPrimitive,
{
    image
        .pixels()
        .map(|p| {
            let c = p.channels();
            let v = |i: usize| c[i].to_f64().unwrap_or(0.0);
            if c.len() >= 3 {
                LUMA_WEIGHTS[0] * v(0) + LUMA_WEIGHTS[1] * v(1) + LUMA_WEIGHTS[2] * v(2)
            } else {
                v(0)
            }
        })
        .collect()
}

/// Variance of the 4-neighbour Laplacian over interior pixels.
pub fn sharpness_score<P: Pixel>(image: &Image<P>) -> Result<f64, RoiError>
where
    P::Subpixel: ToPrimitive,
{
    let (width, height) = image.dimensions();
    if width < 3 || height < 3 {
        return Err(RoiError::TooSmall { width, height });
    }
    let luma = luminance(image);
    let (w, h) = (width as usize, height as usize);
    let at = |x: usize, y: usize| luma[y * w + x];
    let responses: Vec<f64> = (1..h - 1)
        .flat_map(|y| (1..w - 1).map(move |x| (x, y)))
        .map(|(x, y)| at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y))
        .collect();
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    let variance = responses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(variance.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{InstanceDetection, MaskEncoding};
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn square(x0: f64, y0: f64, side: f64) -> MaskEncoding {
        MaskEncoding::Polygon(vec![
            [x0, y0],
            [x0 + side, y0],
            [x0 + side, y0 + side],
            [x0, y0 + side],
        ])
    }

    fn record(instances: Vec<(f64, MaskEncoding)>) -> DetectionRecord {
        DetectionRecord {
            image_id: "r".into(),
            width: 40,
            height: 40,
            source: "test".into(),
            instances: instances
                .into_iter()
                .map(|(score, mask)| InstanceDetection {
                    score,
                    bbox: [0.0, 0.0, 40.0, 40.0],
                    mask,
                })
                .collect(),
            segments: vec![],
        }
    }

    #[test]
    fn largest_area_wins() {
        // 12x10 = 120 px versus 8x10 = 80 px
        let a = MaskEncoding::Polygon(vec![[0.0, 0.0], [12.0, 0.0], [12.0, 10.0], [0.0, 10.0]]);
        let b = MaskEncoding::Polygon(vec![[20.0, 20.0], [28.0, 20.0], [28.0, 30.0], [20.0, 30.0]]);
        let rec = record(vec![(0.9, b), (0.9, a)]);
        let primary = select_primary_instance(&rec, &PipelineConfig::default()).unwrap();
        assert_eq!(primary.index, 1);
        assert_eq!(primary.mask.area(), 120);
    }

    #[test]
    fn equal_area_goes_to_first() {
        let rec = record(vec![
            (0.9, square(0.0, 0.0, 10.0)),
            (0.9, square(20.0, 20.0, 10.0)),
        ]);
        let primary = select_primary_instance(&rec, &PipelineConfig::default()).unwrap();
        assert_eq!(primary.index, 0);
        assert_eq!(primary.mask.area(), 100);
    }

    #[test]
    fn score_floor_drops_instances() {
        let rec = record(vec![
            (0.2, square(0.0, 0.0, 20.0)),
            (0.6, square(20.0, 20.0, 10.0)),
        ]);
        assert_eq!(
            select_primary_instance(&rec, &PipelineConfig::default())
                .unwrap()
                .index,
            1
        );
        let rec = record(vec![(0.2, square(0.0, 0.0, 20.0))]);
        assert!(matches!(
            select_primary_instance(&rec, &PipelineConfig::default()),
            Err(RoiError::NoInstance { ref image_id, .. }) if image_id == "r"
        ));
        assert!(matches!(
            select_primary_instance(&record(vec![]), &PipelineConfig::default()),
            Err(RoiError::NoInstance { .. })
        ));
    }

    #[test]
    fn mask_identity_and_annihilator() {
        let img = RgbImage::from_fn(5, 4, |x, y| Rgb([x as u8 * 10, y as u8 * 20, 7]));
        let ones = InstanceMask::from_bits(5, 4, vec![true; 20]).unwrap();
        assert_eq!(apply_mask(&img, &ones).unwrap(), img);
        let zeros = InstanceMask::empty(5, 4);
        assert!(apply_mask(&img, &zeros)
            .unwrap()
            .pixels()
            .all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn mask_shape_mismatch() {
        let img = GrayImage::new(5, 4);
        assert!(matches!(
            apply_mask(&img, &InstanceMask::empty(4, 5)),
            Err(RoiError::Shape { .. })
        ));
    }

    #[test]
    fn crop_single_pixel_with_padding() {
        let img = GrayImage::from_fn(100, 100, |x, y| Luma([((x * 7 + y * 3) % 256) as u8]));
        let mut mask = InstanceMask::empty(100, 100);
        mask.set(50, 50, true);
        let roi = crop_roi(&img, &mask, &PipelineConfig::default()).unwrap();
        assert_eq!(roi.offset, (40, 40));
        assert_eq!(roi.pixels.dimensions(), (21, 21));
        assert_eq!(roi.pixels.get_pixel(10, 10), img.get_pixel(50, 50));
        assert_eq!(roi.pixels.get_pixel(0, 0).0, [0]);
    }

    #[test]
    fn crop_clips_at_corner() {
        let img = GrayImage::new(100, 100);
        let mut mask = InstanceMask::empty(100, 100);
        mask.set(2, 3, true);
        mask.set(98, 99, true);
        let frame = roi_frame(&mask, &PipelineConfig::default()).unwrap();
        assert_eq!(
            (frame.x, frame.y, frame.width, frame.height),
            (0, 0, 100, 100)
        );
        let mut mask = InstanceMask::empty(100, 100);
        mask.set(0, 0, true);
        let roi = crop_roi(&img, &mask, &PipelineConfig::default()).unwrap();
        assert_eq!(roi.offset, (0, 0));
        assert_eq!(roi.pixels.dimensions(), (11, 11));
    }

    #[test]
    fn crop_of_empty_mask_fails() {
        let img = GrayImage::new(10, 10);
        assert_eq!(
            crop_roi(
                &img,
                &InstanceMask::empty(10, 10),
                &PipelineConfig::default()
            )
            .unwrap_err(),
            RoiError::EmptyMask
        );
    }

    #[test]
    fn sharpness_of_constant_and_impulse() {
        let flat = GrayImage::from_pixel(6, 6, Luma([90]));
        assert_eq!(sharpness_score(&flat).unwrap(), 0.0);
        let mut dot = GrayImage::new(5, 5);
        dot.put_pixel(2, 2, Luma([255]));
        assert!(sharpness_score(&dot).unwrap() > 0.0);
        assert!(matches!(
            sharpness_score(&GrayImage::new(2, 5)),
            Err(RoiError::TooSmall { .. })
        ));
    }

    #[test]
    fn sharpness_of_checkerboard_matches_direct_summation() {
        let board = GrayImage::from_fn(8, 8, |x, y| Luma([if (x + y) % 2 == 0 { 0 } else { 255 }]));
        // direct 3x3 convolution with the explicit kernel, then a two-pass variance
        let kernel = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
        let mut values = Vec::new();
        for y in 1..7u32 {
            for x in 1..7u32 {
                let mut acc = 0.0;
                for (ky, row) in kernel.iter().enumerate() {
                    for (kx, k) in row.iter().enumerate() {
                        let px = board.get_pixel(x + kx as u32 - 1, y + ky as u32 - 1).0[0];
                        acc += k * f64::from(px);
                    }
                }
                values.push(acc);
            }
        }
        let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
        let oracle =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        assert_eq!(oracle, 1_040_400.0); // responses are +-1020 with zero mean
        assert_eq!(sharpness_score(&board).unwrap(), oracle);
    }

    #[test]
    fn colour_uses_luminance_weights() {
        let mut img = RgbImage::from_pixel(5, 5, Rgb([10, 10, 10]));
        img.put_pixel(2, 2, Rgb([100, 0, 0]));
        let mut gray = GrayImage::new(5, 5);
        let luma = luminance(&img);
        assert!((luma[12] - 29.9).abs() < 1e-12);
        assert!((luma[0] - 10.0).abs() < 1e-12);
        gray.put_pixel(0, 0, Luma([1]));
        assert_eq!(luminance(&gray)[0], 1.0);
    }
}
