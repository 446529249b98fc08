//! Canny-style edge detection for tile quality filtering. Background and
//! blurry tiles carry too few edges and are rejected.

use image::RgbImage;

use super::PreprocessConfig;

const BLUR_SIGMA: f32 = 1.4;

fn grayscale(img: &RgbImage) -> Vec<f32> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
        .collect()
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur(src: &[f32], w: usize, h: usize, sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let v = (-(i * i) as f32 / denom).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }

    let clamp = |v: i64, max: usize| v.clamp(0, max as i64 - 1) as usize;
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = clamp(x as i64 + ki as i64 - radius, w);
                acc += src[y * w + sx] * kv;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = clamp(y as i64 + ki as i64 - radius, h);
                acc += tmp[sy * w + x] * kv;
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Binary edge map via blur, Sobel gradients, non-maximum suppression, and
/// two-threshold hysteresis.
pub fn canny_edges(img: &RgbImage, low: f32, high: f32) -> Vec<bool> {
    assert!(high >= low, "canny thresholds out of order");
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = grayscale(img);
    let blurred = gaussian_blur(&gray, w, h, BLUR_SIGMA);

    let mut gx = vec![0.0f32; w * h];
    let mut gy = vec![0.0f32; w * h];
    let at = |x: usize, y: usize| blurred[y * w + x];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            gx[y * w + x] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[y * w + x] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    let magnitude: Vec<f32> = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| a.hypot(*b))
        .collect();

    // Non-maximum suppression along the quantized gradient direction.
    let mut thin = vec![0.0f32; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (n1, n2) = if !(22.5..157.5).contains(&angle) {
                (magnitude[i - 1], magnitude[i + 1])
            } else if angle < 67.5 {
                (magnitude[(y - 1) * w + x + 1], magnitude[(y + 1) * w + x - 1])
            } else if angle < 112.5 {
                (magnitude[(y - 1) * w + x], magnitude[(y + 1) * w + x])
            } else {
                (magnitude[(y - 1) * w + x - 1], magnitude[(y + 1) * w + x + 1])
            };
            if magnitude[i] >= n1 && magnitude[i] >= n2 {
                thin[i] = magnitude[i];
            }
        }
    }

    // Hysteresis: strong edges seed a flood fill through weak neighbors.
    let mut edges = vec![false; w * h];
    let mut stack = Vec::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= high && !edges[i] {
            edges[i] = true;
            stack.push(i);
            while let Some(j) = stack.pop() {
                let (jx, jy) = (j % w, j / w);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let nx = jx as i64 + dx;
                        let ny = jy as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let k = ny as usize * w + nx as usize;
                        if !edges[k] && thin[k] >= low {
                            edges[k] = true;
                            stack.push(k);
                        }
                    }
                }
            }
        }
    }
    edges
}

/// QC gate: the fraction of edge pixels must reach `edge_fraction_min`.
pub fn edge_filter(tile: &RgbImage, cfg: &PreprocessConfig) -> (bool, f64) {
    let edges = canny_edges(tile, cfg.canny_low, cfg.canny_high);
    let count = edges.iter().filter(|&&e| e).count();
    let fraction = count as f64 / edges.len() as f64;
    (fraction >= cfg.edge_fraction_min, fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn checkerboard(size: u32, cell: u32) -> RgbImage {
        let mut img = RgbImage::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let on = ((x / cell) + (y / cell)) % 2 == 0;
                let v = if on { 230 } else { 90 };
                img.put_pixel(x, y, Rgb([v, v, v]));
            }
        }
        img
    }

    /// Box blur as a stand-in for optical defocus.
    fn blur_heavily(img: &RgbImage, radius: u32) -> RgbImage {
        let (w, h) = (img.width(), img.height());
        let mut out = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0u32; 3];
                let mut n = 0u32;
                for dy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                    for dx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                        let p = img.get_pixel(dx, dy);
                        for c in 0..3 {
                            acc[c] += p[c] as u32;
                        }
                        n += 1;
                    }
                }
                out.put_pixel(
                    x,
                    y,
                    Rgb([
                        (acc[0] / n) as u8,
                        (acc[1] / n) as u8,
                        (acc[2] / n) as u8,
                    ]),
                );
            }
        }
        out
    }

    #[test]
    fn uniform_white_tile_has_no_edges() {
        let img = RgbImage::from_pixel(512, 512, Rgb([255, 255, 255]));
        let (pass, fraction) = edge_filter(&img, &PreprocessConfig::default());
        assert_eq!(fraction, 0.0);
        assert!(!pass);
    }

    #[test]
    fn checkerboard_passes_qc() {
        let img = checkerboard(512, 8);
        let (pass, fraction) = edge_filter(&img, &PreprocessConfig::default());
        assert!(pass, "checkerboard edge fraction {fraction} should pass");
    }

    #[test]
    fn sharp_texture_kept_blurred_copy_rejected() {
        let sharp = checkerboard(128, 16);
        let blurred = blur_heavily(&sharp, 12);
        let cfg = PreprocessConfig::default();
        let (pass_sharp, f_sharp) = edge_filter(&sharp, &cfg);
        let (pass_blur, f_blur) = edge_filter(&blurred, &cfg);
        assert!(pass_sharp, "sharp fraction {f_sharp}");
        assert!(!pass_blur, "blurred fraction {f_blur} should fall below qc");
        assert!(f_sharp > f_blur);
    }

    #[test]
    fn edge_count_is_rotation_invariant_within_discretization() {
        let img = checkerboard(128, 16);
        let cfg = PreprocessConfig::default();
        let base = canny_edges(&img, cfg.canny_low, cfg.canny_high)
            .iter()
            .filter(|&&e| e)
            .count() as i64;
        let rotated = image::imageops::rotate90(&img);
        let rot = canny_edges(&rotated, cfg.canny_low, cfg.canny_high)
            .iter()
            .filter(|&&e| e)
            .count() as i64;
        assert!(
            (base - rot).abs() <= base / 100 + 1,
            "rotation changed edge count {base} -> {rot}"
        );
    }
}
