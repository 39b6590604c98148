//! Paired-image datasets: the side-by-side A|B format and a synthetic
//! outline → filled-shape toy task.
//!
//! Pixels are stored as `(3, H, W)` f32 tensors in `[-1, 1]`; `v = p / 127.5 − 1`
//! for an 8-bit level `p`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub condition: Tensor<f32>,
    pub target: Tensor<f32>,
    pub id: String,
}

/// Immutable list of samples sharing one square resolution.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    samples: Vec<PairedSample>,
    resolution: usize,
}

impl PairedDataset {
    pub fn new(samples: Vec<PairedSample>, resolution: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("no samples".into()));
        }
        for s in &samples {
            let expect = [3, resolution, resolution];
            if s.condition.shape() != expect || s.target.shape() != expect {
                return Err(Error::Shape(format!(
                    "sample {}: condition {:?}, target {:?}, expected {expect:?}",
                    s.id,
                    s.condition.shape(),
                    s.target.shape()
                )));
            }
        }
        Ok(PairedDataset { samples, resolution })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn samples(&self) -> &[PairedSample] {
        &self.samples
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(&self, n: usize) -> Result<(PairedDataset, PairedDataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n} of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - n;
        Ok((
            PairedDataset::new(self.samples[..cut].to_vec(), self.resolution)?,
            PairedDataset::new(self.samples[cut..].to_vec(), self.resolution)?,
        ))
    }

    /// Sample order for one epoch, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// Stacks samples into `(N, 3, H, W)` condition and target batches.
    /// With `flip`, each sample is mirrored horizontally with probability 1/2.
    pub fn batch(&self, indices: &[usize], flip: Option<&mut ChaCha8Rng>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut flips = vec![false; indices.len()];
        if let Some(rng) = flip {
            flips.iter_mut().for_each(|f| *f = rng.random::<bool>());
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (&i, &f) in indices.iter().zip(&flips) {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Range(format!("sample index {i} of {}", self.len())))?;
            let take = |t: &Tensor<f32>| if f { hflip(t) } else { t.clone() };
            xs.push(take(&s.condition));
            ys.push(take(&s.target));
        }
        let r = self.resolution;
        let stack = |v: Vec<Tensor<f32>>| {
            let data: Vec<f32> = v.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::from_vec(vec![v.len(), 3, r, r], data)
        };
        Ok((stack(xs)?, stack(ys)?))
    }
}

fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    let data = (0..c * h * w)
        .map(|i| {
            let (row, x) = (i / w, i % w);
            d[row * w + (w - 1 - x)]
        })
        .collect();
    Tensor::from_vec(vec![c, h, w], data).expect("same shape")
}

/// 8-bit RGB image → `(3, H, W)` in `[-1, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data).expect("consistent shape")
}

/// `(3, H, W)` in `[-1, 1]` → 8-bit RGB, rounding to the nearest level.
pub fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected (3, H, W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| to_level(d[(c * h + y as usize) * w + x as usize]);
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn to_level(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Splits one A|B file into a sample, resizing each half to `resolution`.
pub fn load_pair(path: &Path, resolution: usize) -> Result<PairedSample> {
    let img = read_rgb(path)?;
    let (w, h) = img.dimensions();
    if w % 2 != 0 {
        return Err(Error::Shape(format!(
            "{}: width {w} is odd, cannot split A|B",
            path.display()
        )));
    }
    let half = |x0: u32| {
        let part = image::imageops::crop_imm(&img, x0, 0, w / 2, h).to_image();
        if part.dimensions() == (resolution as u32, resolution as u32) {
            part
        } else {
            image::imageops::resize(&part, resolution as u32, resolution as u32, FilterType::Triangle)
        }
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PairedSample {
        condition: image_to_tensor(&half(0)),
        target: image_to_tensor(&half(w / 2)),
        id,
    })
}

/// PNG files of `dir`, sorted by file name.
pub fn list_pairs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let is_png = p
            .extension()
            .is_some_and(|x| x.eq_ignore_ascii_case("png"));
        if p.is_file() && is_png {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_paired_dir(dir: &Path, resolution: usize) -> Result<PairedDataset> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let files = list_pairs(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no PNG pairs in {}", dir.display())));
    }
    let samples = files
        .iter()
        .map(|f| load_pair(f, resolution))
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(samples, resolution)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTaskKind {
    /// Condition: dark outlines on white. Target: the same shapes filled.
    EdgesToFilled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTaskSpec {
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Fill colors; rectangles use entry 0, ellipses entry 1 (modulo the length),
    /// so the fill is a function of the outline.
    pub palette: Vec<[u8; 3]>,
    pub kind: ToyTaskKind,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            image_size: 64,
            min_shapes: 1,
            max_shapes: 3,
            palette: vec![[220, 60, 40], [40, 90, 210]],
            kind: ToyTaskKind::EdgesToFilled,
            seed: 0,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!("toy image_size {} < 16", self.image_size)));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "toy shape count range [{}, {}] is empty or starts at 0",
                self.min_shapes, self.max_shapes
            )));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("toy palette is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

const STROKE: f64 = 1.5;
const SUPERSAMPLE: usize = 4;

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Shape {
        let min = size * 0.2;
        let max = size * 0.55;
        let (w, h) = (rng.random_range(min..max), rng.random_range(min..max));
        let x0 = rng.random_range(2.0..size - w - 2.0);
        let y0 = rng.random_range(2.0..size - h - 2.0);
        if rng.random::<bool>() {
            Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        } else {
            Shape::Ellipse {
                cx: x0 + w / 2.0,
                cy: y0 + h / 2.0,
                rx: w / 2.0,
                ry: h / 2.0,
            }
        }
    }

    fn palette_slot(&self) -> usize {
        match self {
            Shape::Rect { .. } => 0,
            Shape::Ellipse { .. } => 1,
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn on_outline(&self, x: f64, y: f64) -> bool {
        let t = STROKE / 2.0;
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => {
                let outer = x >= x0 - t && x <= x1 + t && y >= y0 - t && y <= y1 + t;
                let inner = x > x0 + t && x < x1 - t && y > y0 + t && y < y1 - t;
                outer && !inner
            }
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                let r = (dx * dx + dy * dy).sqrt();
                (r - 1.0).abs() * rx.min(ry) <= t
            }
        }
    }
}

fn coverage(size: usize, px: usize, py: usize, test: impl Fn(f64, f64) -> bool) -> f64 {
    let _ = size;
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            if test(x, y) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn blend(dst: &mut [f64; 3], color: [u8; 3], alpha: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + color[c] as f64 * alpha;
    }
}

/// Renders one `(condition, target)` pair side by side.
fn render_pair(spec: &ToyTaskSpec, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = spec.image_size;
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(rng, s as f64)).collect();
    let mut out = RgbImage::new(2 * s as u32, s as u32);
    for py in 0..s {
        for px in 0..s {
            let mut cond = [255.0; 3];
            let mut target = [255.0; 3];
            for shape in &shapes {
                let fill = spec.palette[shape.palette_slot() % spec.palette.len()];
                blend(&mut target, fill, coverage(s, px, py, |x, y| shape.inside(x, y)));
                blend(&mut cond, [0, 0, 0], coverage(s, px, py, |x, y| shape.on_outline(x, y)));
            }
            let q = |v: [f64; 3]| Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8));
            out.put_pixel(px as u32, py as u32, q(cond));
            out.put_pixel((s + px) as u32, py as u32, q(target));
        }
    }
    out
}

/// Writes `n` toy pairs as `toy_00000.png …` plus a manifest of identifiers.
pub fn make_toy_dataset(spec: &ToyTaskSpec, n: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    match spec.kind {
        ToyTaskKind::EdgesToFilled => {}
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut paths = Vec::with_capacity(n);
    let mut manifest = String::new();
    for i in 0..n {
        let id = format!("toy_{i:05}");
        let path = dir.join(format!("{id}.png"));
        write_png(&render_pair(spec, &mut rng), &path)?;
        manifest.push_str(&id);
        manifest.push('\n');
        paths.push(path);
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(paths)
}
