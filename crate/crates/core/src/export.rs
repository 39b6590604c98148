//! PNG exports: sample grids and score-map heatmaps with the proposed region.

use image::{Rgb, RgbImage};

use crate::data::tensor_to_image;
use crate::error::{Error, Result};
use crate::region_proposal::{Region, ScoreMap};
use crate::tensor::Tensor;

const BORDER: u32 = 2;
const RECT_COLOR: Rgb<u8> = Rgb([255, 32, 32]);

/// One row per sample, one column per batch in `columns` (each `(N, 3, H, W)`).
pub fn sample_grid(columns: &[&Tensor<f32>], max_samples: usize) -> Result<RgbImage> {
    let first = columns
        .first()
        .ok_or_else(|| Error::Shape("no columns for the sample grid".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 4 || columns.iter().any(|c| c.shape() != s.as_slice()) {
        return Err(Error::Shape("grid columns must share an (N, 3, H, W) shape".into()));
    }
    let rows = s[0].min(max_samples);
    let (h, w) = (s[2] as u32, s[3] as u32);
    let cols = columns.len() as u32;
    let mut out = RgbImage::from_pixel(
        cols * w + (cols + 1) * BORDER,
        rows as u32 * h + (rows as u32 + 1) * BORDER,
        Rgb([255, 255, 255]),
    );
    for r in 0..rows {
        for (c, col) in columns.iter().enumerate() {
            let img = tensor_to_image(&col.slice(&[r, 0, 0, 0], &[1, 3, s[2], s[3]]).reshape(&s[1..])?)?;
            let x0 = BORDER + c as u32 * (w + BORDER);
            let y0 = BORDER + r as u32 * (h + BORDER);
            image::imageops::replace(&mut out, &img, x0 as i64, y0 as i64);
        }
    }
    Ok(out)
}

/// Grayscale heatmap at image resolution (dark = fake) with the region outlined.
pub fn heatmap(map: &ScoreMap, region: Option<&Region>) -> RgbImage {
    let size = map.source_image_size.max(map.size()) as u32;
    let s = map.size() as u32;
    let mut img = RgbImage::from_fn(size, size, |x, y| {
        let (row, col) = ((y * s / size) as usize, (x * s / size) as usize);
        let v = (map.at(row, col) * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([v, v, v])
    });
    if let Some(r) = region {
        draw_rect(&mut img, r);
    }
    img
}

/// One-pixel outline of the region's closed-open box.
pub fn draw_rect(img: &mut RgbImage, r: &Region) {
    if r.side == 0 {
        return;
    }
    let (w, h) = img.dimensions();
    let (x0, y0) = (r.x0 as u32, r.y0 as u32);
    let (x1, y1) = ((r.x0 + r.side - 1) as u32, (r.y0 + r.side - 1) as u32);
    for x in x0..=x1.min(w - 1) {
        for y in [y0, y1] {
            if y < h {
                img.put_pixel(x, y, RECT_COLOR);
            }
        }
    }
    for y in y0..=y1.min(h - 1) {
        for x in [x0, x1] {
            if x < w {
                img.put_pixel(x, y, RECT_COLOR);
            }
        }
    }
}
