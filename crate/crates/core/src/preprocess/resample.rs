//! Tessellation geometry and bilinear resampling.

use image::RgbImage;

use super::{PreprocessConfig, PreprocessError};

/// One tile's source square in native slide coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGeometry {
    pub x: u32,
    pub y: u32,
    pub native_size: u32,
}

/// Non-overlapping grid of native squares covering floor(W/s) x floor(H/s)
/// cells, where s rescales `tile_native_px` from the working resolution to
/// the slide's native resolution. Partial border cells are dropped.
pub fn tessellate_grid(
    width: u32,
    height: u32,
    slide_mpp: f64,
    cfg: &PreprocessConfig,
) -> Result<Vec<TileGeometry>, PreprocessError> {
    let factor = cfg.target_mpp / slide_mpp;
    if !(0.25..=4.0).contains(&factor) {
        return Err(PreprocessError::ResolutionMismatch {
            slide_mpp,
            target_mpp: cfg.target_mpp,
            factor,
        });
    }
    let native = (cfg.tile_native_px as f64 * factor).round() as u32;
    let nx = width / native;
    let ny = height / native;
    let mut tiles = Vec::with_capacity((nx * ny) as usize);
    for gy in 0..ny {
        for gx in 0..nx {
            tiles.push(TileGeometry {
                x: gx * native,
                y: gy * native,
                native_size: native,
            });
        }
    }
    Ok(tiles)
}

/// Crops a native square and resamples it to `out_px` with bilinear weights.
pub fn crop_resample(img: &RgbImage, geo: TileGeometry, out_px: u32) -> RgbImage {
    if geo.native_size == out_px {
        let mut out = RgbImage::new(out_px, out_px);
        for y in 0..out_px {
            for x in 0..out_px {
                out.put_pixel(x, y, *img.get_pixel(geo.x + x, geo.y + y));
            }
        }
        return out;
    }
    resize_region(
        img,
        geo.x,
        geo.y,
        geo.native_size,
        geo.native_size,
        out_px,
        out_px,
    )
}

/// Bilinear resize of a whole image.
pub fn bilinear_resize_rgb(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    if img.width() == out_w && img.height() == out_h {
        return img.clone();
    }
    resize_region(img, 0, 0, img.width(), img.height(), out_w, out_h)
}

fn resize_region(
    img: &RgbImage,
    x0: u32,
    y0: u32,
    in_w: u32,
    in_h: u32,
    out_w: u32,
    out_h: u32,
) -> RgbImage {
    let mut out = RgbImage::new(out_w, out_h);
    let sx = in_w as f64 / out_w as f64;
    let sy = in_h as f64 / out_h as f64;
    for oy in 0..out_h {
        // Pixel-center mapping: src = (dst + 0.5) * scale - 0.5.
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let iy = fy.floor() as u32;
        let iy1 = (iy + 1).min(in_h - 1);
        let wy = fy - iy as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
            let ix = fx.floor() as u32;
            let ix1 = (ix + 1).min(in_w - 1);
            let wx = fx - ix as f64;
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let p00 = img.get_pixel(x0 + ix, y0 + iy)[c] as f64;
                let p10 = img.get_pixel(x0 + ix1, y0 + iy)[c] as f64;
                let p01 = img.get_pixel(x0 + ix, y0 + iy1)[c] as f64;
                let p11 = img.get_pixel(x0 + ix1, y0 + iy1)[c] as f64;
                let top = p00 + (p10 - p00) * wx;
                let bottom = p01 + (p11 - p01) * wx;
                rgb[c] = (top + (bottom - top) * wy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox, oy, image::Rgb(rgb));
        }
    }
    out
}
