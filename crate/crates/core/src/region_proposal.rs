//! Discriminative region proposal: turns a patch-discriminator score map into
//! the single most-fake square region of the input image.
//!
//! The score map is scanned with a `w × w` window (stride 1) and the window with
//! the lowest mean probability wins. Its center is mapped back to image pixels
//! with the scale `τ = (w_i − w*) / (w_s − w)`, which sends the two extreme
//! window positions to boxes touching the image border exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Image, score-map and region sizes for one proposal geometry (all square).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryConfig {
    /// `w_i`, pixels.
    pub image_size: usize,
    /// `w_s`, score-map cells.
    pub scoremap_size: usize,
    /// `w*`, pixels.
    pub region_size: usize,
}

impl GeometryConfig {
    pub fn new(image_size: usize, scoremap_size: usize, region_size: usize) -> Result<Self> {
        let cfg = GeometryConfig {
            image_size,
            scoremap_size,
            region_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scoremap_size < 2 {
            return Err(Error::Config(format!(
                "score map size {} leaves no room for a sliding window (need >= 2)",
                self.scoremap_size
            )));
        }
        if self.region_size == 0 || self.region_size >= self.image_size {
            return Err(Error::Config(format!(
                "region size {} must be in [1, {})",
                self.region_size, self.image_size
            )));
        }
        Ok(())
    }
}

/// Per-sample grid of patch probabilities; low values mark fake patches.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    size: usize,
    values: Vec<f64>,
    pub source_image_size: usize,
}

impl ScoreMap {
    /// Row-major `size × size` probabilities.
    ///
    /// Values must be finite and within `[0, 1]`; an `f32` sigmoid can round
    /// to exactly 0 or 1, so the closed interval is accepted.
    pub fn new(size: usize, values: Vec<f64>, source_image_size: usize) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return Err(Error::Shape(format!(
                "score map of side {size} needs {} values, got {}",
                size * size,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("score map value {v} is not a probability")));
        }
        Ok(ScoreMap {
            size,
            values,
            source_image_size,
        })
    }

    /// Splits a `(N, 1, s, s)` discriminator output into per-sample maps.
    pub fn from_batch<T: Scalar>(scores: &Tensor<T>, source_image_size: usize) -> Result<Vec<Self>> {
        let shape = scores.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != shape[3] {
            return Err(Error::Shape(format!(
                "expected (N, 1, s, s) scores, got {shape:?}"
            )));
        }
        let cells = shape[2] * shape[3];
        scores
            .data()
            .chunks(cells)
            .map(|c| ScoreMap::new(shape[2], c.iter().map(|v| v.to_f64()).collect(), source_image_size))
            .collect()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Sliding-window hit on a score map, in cell coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub side: usize,
    pub mean_score: f64,
}

impl Window {
    /// `(x_c, y_c)`: the window center, half-integer for even sides.
    pub fn center(&self) -> (f64, f64) {
        let half = self.side as f64 / 2.0;
        (self.col as f64 + half, self.row as f64 + half)
    }
}

/// A proposed square region in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// Left column of the pixel box `[x0, x0 + side)`.
    pub x0: usize,
    /// Top row of the pixel box `[y0, y0 + side)`.
    pub y0: usize,
    pub side: usize,
    /// `(x_c*, y_c*)` before rounding and clamping.
    pub mapped_center: (f64, f64),
    pub window_center: (f64, f64),
    pub window_side: usize,
    pub mean_score: f64,
}

impl Region {
    /// A region given directly by its pixel box (no score map behind it).
    pub fn from_box(x0: usize, y0: usize, side: usize) -> Self {
        let c = (x0 as f64 + side as f64 / 2.0, y0 as f64 + side as f64 / 2.0);
        Region {
            x0,
            y0,
            side,
            mapped_center: c,
            window_center: c,
            window_side: side,
            mean_score: 0.5,
        }
    }

    /// Center of the final integer box.
    pub fn center(&self) -> (f64, f64) {
        let half = self.side as f64 / 2.0;
        (self.x0 as f64 + half, self.y0 as f64 + half)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.side && y >= self.y0 && y < self.y0 + self.side
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.side > 0 && self.x0 + self.side <= width && self.y0 + self.side <= height
    }

    /// `{"cx":…,"cy":…,"side":…,"mean_score":…}` as printed by the CLI.
    pub fn to_json(&self) -> String {
        let (cx, cy) = self.center();
        serde_json::json!({
            "cx": cx,
            "cy": cy,
            "side": self.side,
            "mean_score": self.mean_score,
        })
        .to_string()
    }
}

/// Integer round-half-to-even of `num / den`.
fn div_round_half_even(num: usize, den: usize) -> usize {
    let (q, r) = (num / den, num % den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q % 2),
    }
}

/// Sliding-window side `w = w* · w_s / w_i`, rounded half-to-even and clamped to `[1, w_s − 1]`.
pub fn window_size(cfg: &GeometryConfig) -> Result<usize> {
    if cfg.scoremap_size < 2 {
        return Err(Error::Config(format!(
            "score map size {} leaves no valid window",
            cfg.scoremap_size
        )));
    }
    if cfg.image_size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let w = div_round_half_even(cfg.region_size * cfg.scoremap_size, cfg.image_size);
    Ok(w.clamp(1, cfg.scoremap_size - 1))
}

/// Pixels per score-map cell, `τ = (w_i − w*) / (w_s − w)`.
pub fn scale_factor(cfg: &GeometryConfig, window: usize) -> Result<f64> {
    if window >= cfg.scoremap_size {
        return Err(Error::Config(format!(
            "window {window} leaves no travel on a {}-cell score map",
            cfg.scoremap_size
        )));
    }
    if cfg.region_size >= cfg.image_size {
        return Err(Error::Config(format!(
            "region {} does not fit a {}-pixel image",
            cfg.region_size, cfg.image_size
        )));
    }
    Ok((cfg.image_size - cfg.region_size) as f64 / (cfg.scoremap_size - window) as f64)
}

/// `(x_c*, y_c*) = (τ · x_c, τ · y_c)`.
pub fn map_center(window_center: (f64, f64), tau: f64) -> (f64, f64) {
    (tau * window_center.0, tau * window_center.1)
}

/// Lowest-mean `w × w` window, stride 1, first in row-major order on ties.
pub fn find_min_window(map: &ScoreMap, window: usize) -> Result<Window> {
    let s = map.size();
    if window == 0 || window > s {
        return Err(Error::Config(format!(
            "window {window} does not fit a {s}x{s} score map"
        )));
    }
    let cells = (window * window) as f64;
    let mut best: Option<Window> = None;
    for row in 0..=s - window {
        for col in 0..=s - window {
            let mut sum = 0.0;
            for r in row..row + window {
                sum += map.values[r * s + col..r * s + col + window].iter().sum::<f64>();
            }
            let mean = sum / cells;
            if best.is_none_or(|b| mean < b.mean_score) {
                best = Some(Window {
                    row,
                    col,
                    side: window,
                    mean_score: mean,
                });
            }
        }
    }
    Ok(best.expect("at least one window"))
}

/// Rounds a mapped box edge to pixels and keeps the whole box inside the image.
fn box_origin(center: f64, side: usize, image: usize) -> usize {
    let edge = (center - side as f64 / 2.0).round_ties_even();
    edge.clamp(0.0, (image - side) as f64) as usize
}

/// Full proposal: window size, minimum window, scale, and center mapping.
pub fn propose_region(map: &ScoreMap, cfg: &GeometryConfig) -> Result<Region> {
    cfg.validate()?;
    if map.size() != cfg.scoremap_size {
        return Err(Error::Shape(format!(
            "score map is {0}x{0}, geometry expects {1}x{1}",
            map.size(),
            cfg.scoremap_size
        )));
    }
    let w = window_size(cfg)?;
    let hit = find_min_window(map, w)?;
    let tau = scale_factor(cfg, w)?;
    let window_center = hit.center();
    let mapped = map_center(window_center, tau);
    Ok(Region {
        x0: box_origin(mapped.0, cfg.region_size, cfg.image_size),
        y0: box_origin(mapped.1, cfg.region_size, cfg.image_size),
        side: cfg.region_size,
        mapped_center: mapped,
        window_center,
        window_side: w,
        mean_score: hit.mean_score,
    })
}
