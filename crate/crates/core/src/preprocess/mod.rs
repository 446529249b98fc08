//! Slide preprocessing: tessellation into fixed-resolution tiles, edge-based
//! quality filtering, Macenko stain normalization, and resizing to network
//! input resolution.
//!
//! Per-tile operations are pure; the stage fans out over tiles and keys every
//! result by tile coordinates, so outputs are independent of scheduling.

mod edge;
mod macenko;
mod resample;

pub use edge::{canny_edges, edge_filter};
pub use macenko::{macenko_fit, macenko_normalize, od_transform, StainProfile};
pub use resample::{bilinear_resize_rgb, tessellate_grid, TileGeometry};

use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{SlideRecord, TileRecord};

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("cannot read slide image {path}: {message}")]
    UnreadableImage { path: String, message: String },
    #[error("slide resolution {slide_mpp} um/px needs a {factor:.2}x rescale to reach {target_mpp} um/px (limit 4x)")]
    ResolutionMismatch {
        slide_mpp: f64,
        target_mpp: f64,
        factor: f64,
    },
    #[error("fewer than {required} tissue pixels above the OD threshold (found {found})")]
    InsufficientTissue { required: usize, found: usize },
    #[error("degenerate stain geometry: second eigenvalue {second:.3e} below 1e-8 x first {first:.3e}")]
    DegenerateStains { first: f64, second: f64 },
    #[error("invalid preprocess config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Whether a stain profile is fitted per tile or once per slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StainScope {
    Tile,
    Slide,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Tile side length at the working resolution, in pixels.
    pub tile_native_px: u32,
    /// Working resolution in microns per pixel.
    pub target_mpp: f64,
    /// Network input side length after the final resize.
    pub output_px: u32,
    /// OD threshold below which a pixel counts as background (beta).
    pub od_background_threshold: f64,
    /// Robust angle percentile for stain extremes (alpha).
    pub angle_percentile: f64,
    /// Transmitted-light intensity I0.
    pub transmitted_light: u32,
    /// Percentile defining the per-stain maximum concentration.
    pub concentration_percentile: f64,
    /// Minimum fraction of edge pixels for a tile to pass QC.
    pub edge_fraction_min: f64,
    /// Canny hysteresis thresholds on Sobel gradient magnitude.
    pub canny_low: f32,
    pub canny_high: f32,
    pub stain_scope: StainScope,
    /// Normalization target.
    pub reference_profile: StainProfile,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            tile_native_px: 512,
            target_mpp: 0.5,
            output_px: 224,
            od_background_threshold: 0.15,
            angle_percentile: 1.0,
            transmitted_light: 255,
            concentration_percentile: 99.0,
            edge_fraction_min: 0.02,
            canny_low: 40.0,
            canny_high: 120.0,
            stain_scope: StainScope::Tile,
            reference_profile: StainProfile::reference(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.angle_percentile > 0.0 && self.angle_percentile < 50.0) {
            return Err(PreprocessError::InvalidConfig(format!(
                "angle_percentile must be in (0, 50), got {}",
                self.angle_percentile
            )));
        }
        if !(self.od_background_threshold > 0.0 && self.od_background_threshold < 1.0) {
            return Err(PreprocessError::InvalidConfig(format!(
                "od_background_threshold must be in (0, 1), got {}",
                self.od_background_threshold
            )));
        }
        if self.output_px > self.tile_native_px {
            return Err(PreprocessError::InvalidConfig(format!(
                "output_px {} exceeds tile_native_px {}",
                self.output_px, self.tile_native_px
            )));
        }
        self.reference_profile.validate().map_err(|e| {
            PreprocessError::InvalidConfig(format!("reference profile: {e}"))
        })
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage, PreprocessError> {
    let img = image::open(path).map_err(|e| PreprocessError::UnreadableImage {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// One preprocessed tile held in memory: record plus final pixels.
pub struct PreprocessedTile {
    pub record: TileRecord,
    pub pixels: Option<RgbImage>,
}

/// Runs the full stage for one slide: tessellate, QC, normalize, resize.
/// Tiles failing QC (blur/background or too little tissue for a stain fit)
/// keep their records with `qc_pass = false` and write no file.
pub fn preprocess_slide(
    slide: &SlideRecord,
    cfg: &PreprocessConfig,
    out_dir: &Path,
) -> Result<Vec<TileRecord>, PreprocessError> {
    cfg.validate()?;
    let img = load_image(Path::new(&slide.image_path))?;
    let geometry = tessellate_grid(
        img.width(),
        img.height(),
        slide.microns_per_pixel,
        cfg,
    )?;

    let slide_profile = match cfg.stain_scope {
        StainScope::Tile => None,
        StainScope::Slide => Some(fit_slide_profile(&img, cfg)?),
    };

    let tiles: Vec<PreprocessedTile> = geometry
        .par_iter()
        .map(|geo| preprocess_tile(slide, &img, *geo, cfg, slide_profile.as_ref(), out_dir))
        .collect();

    let mut records = Vec::with_capacity(tiles.len());
    for tile in tiles {
        if let Some(pixels) = &tile.pixels {
            let path = PathBuf::from(&tile.record.tile_path);
            save_png_atomic(pixels, &path)?;
        }
        records.push(tile.record);
    }
    Ok(records)
}

fn preprocess_tile(
    slide: &SlideRecord,
    img: &RgbImage,
    geo: TileGeometry,
    cfg: &PreprocessConfig,
    slide_profile: Option<&StainProfile>,
    out_dir: &Path,
) -> PreprocessedTile {
    let native = resample::crop_resample(img, geo, cfg.tile_native_px);
    let (qc_pass, edge_fraction) = edge_filter(&native, cfg);
    let mut record = TileRecord {
        slide_id: slide.slide_id.clone(),
        x: geo.x,
        y: geo.y,
        native_size: geo.native_size,
        output_size: cfg.output_px,
        qc_edge_fraction: edge_fraction,
        qc_pass,
        tissue_probs: None,
        selected: false,
        tile_path: String::new(),
    };
    if !qc_pass {
        return PreprocessedTile {
            record,
            pixels: None,
        };
    }
    let normalized = match slide_profile {
        Some(profile) => Ok(macenko_normalize(&native, profile, cfg)),
        None => {
            macenko_fit(&native, cfg).map(|profile| macenko_normalize(&native, &profile, cfg))
        }
    };
    match normalized {
        Ok(normalized) => {
            let resized = bilinear_resize_rgb(&normalized, cfg.output_px, cfg.output_px);
            let file = format!("{}_{}_{}.png", slide.slide_id, geo.x, geo.y);
            record.tile_path = out_dir.join(file).display().to_string();
            PreprocessedTile {
                record,
                pixels: Some(resized),
            }
        }
        Err(_) => {
            // Not enough tissue (or a degenerate stain cloud) to normalize:
            // the tile fails QC rather than the whole slide.
            record.qc_pass = false;
            PreprocessedTile {
                record,
                pixels: None,
            }
        }
    }
}

/// Fits one profile for the whole slide, downsampling large slides first.
fn fit_slide_profile(
    img: &RgbImage,
    cfg: &PreprocessConfig,
) -> Result<StainProfile, PreprocessError> {
    const MAX_SIDE: u32 = 1024;
    let longest = img.width().max(img.height());
    if longest <= MAX_SIDE {
        return macenko_fit(img, cfg);
    }
    let scale = MAX_SIDE as f64 / longest as f64;
    let small = bilinear_resize_rgb(
        img,
        (img.width() as f64 * scale).round() as u32,
        (img.height() as f64 * scale).round() as u32,
    );
    macenko_fit(&small, cfg)
}

fn save_png_atomic(img: &RgbImage, path: &Path) -> Result<(), PreprocessError> {
    let mut bytes: Vec<u8> = Vec::new();
    {
        let mut cursor = std::io::Cursor::new(&mut bytes);
        img.write_to(&mut cursor, image::ImageFormat::Png)
            .map_err(|e| PreprocessError::UnreadableImage {
                path: path.display().to_string(),
                message: format!("png encode: {e}"),
            })?;
    }
    crate::cohort::write_atomic(path, &bytes).map_err(|source| PreprocessError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        PreprocessConfig::default().validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PreprocessConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: PreprocessConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.tile_native_px, cfg.tile_native_px);
        assert_eq!(back.reference_profile, cfg.reference_profile);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = PreprocessConfig::default();
        cfg.angle_percentile = 50.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PreprocessConfig::default();
        cfg.output_px = 1024;
        assert!(cfg.validate().is_err());
    }
}
