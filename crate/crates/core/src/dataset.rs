//! Datasets on disk: a JSON manifest next to PNG / binary PPM images, a
//! synthetic quadrilateral generator, and heatmap overlay rendering.
//!
//! Manifest layout (paths relative to the manifest's directory, landmark
//! coordinates in original-image pixels, origin top-left):
//!
//! ```json
//! {"landmark_names": ["p0", "p1"],
//!  "entries": [{"id": "a", "image": "images/a.png", "landmarks": [[3, 4], [10, 2]]}]}
//! ```

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::bilinear;
use crate::codec::{rescale_coord, HeatmapStack, LandmarkSet, Point};
use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `3 x S x S`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// In image pixel space (grid `S`).
    pub landmarks: LandmarkSet,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub landmark_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmark_names.len()
    }

    /// Image side, if the dataset is non-empty.
    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.shape()[1])
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            landmark_names: self.landmark_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub landmark_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub landmarks: Vec<[i64; 2]>,
}

/// Decode an image as `3 x H x W` RGB in `[0, 1]`; alpha is dropped.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("buffer sized from image")
}

pub fn tensor_to_rgb(image: &Tensor<f32>) -> Result<RgbImage> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::Dimension {
            op: "tensor_to_rgb",
            reason: format!("expected 3 x H x W, got {:?}", image.shape()),
        });
    };
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[c * w * h + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    }))
}

pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let rgb = tensor_to_rgb(image)?;
    let mut buf = Cursor::new(Vec::new());
    rgb.write_to(&mut buf, ImageFormat::Png).map_err(|e| Error::Image {
        path: PathBuf::from("<memory>"),
        reason: e.to_string(),
    })?;
    Ok(buf.into_inner())
}

pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    fsio::write_atomic(path, &encode_png(image)?)
}

/// Align-corners bilinear resize of every plane of a `C x H x W` tensor,
/// consistent with the endpoint-preserving landmark rescale.
pub fn resize_bilinear(image: &Tensor<f32>, out_w: usize, out_h: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::Dimension {
            op: "resize",
            reason: format!("expected C x H x W, got {:?}", image.shape()),
        });
    };
    if (w, h) == (out_w, out_h) {
        return Ok(image.clone());
    }
    let sx = if out_w > 1 { (w as f64 - 1.0) / (out_w as f64 - 1.0) } else { 0.0 };
    let sy = if out_h > 1 { (h as f64 - 1.0) / (out_h as f64 - 1.0) } else { 0.0 };
    let mut out = vec![0.0f32; c * out_w * out_h];
    for ch in 0..c {
        let plane = &image.data()[ch * w * h..(ch + 1) * w * h];
        for y in 0..out_h {
            for x in 0..out_w {
                out[ch * out_w * out_h + y * out_w + x] =
                    bilinear(plane, w, h, x as f64 * sx, y as f64 * sy).unwrap_or(0.0);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

fn manifest_error(entry: &str, reason: impl Into<String>) -> Error {
    Error::Manifest {
        entry: entry.to_string(),
        reason: reason.into(),
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| manifest_error("<manifest>", format!("malformed JSON: {e}")))
}

/// Load every manifest entry, resizing images to `image_size` squared and
/// rescaling landmarks to match. Entries keep manifest order.
pub fn load_manifest(path: &Path, image_size: usize) -> Result<Dataset> {
    let manifest = read_manifest(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let n = manifest.landmark_names.len();
    if n == 0 {
        return Err(manifest_error("<manifest>", "landmark_names is empty"));
    }
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if entry.landmarks.len() != n {
            return Err(manifest_error(
                &entry.id,
                format!("{} landmarks but {} landmark names", entry.landmarks.len(), n),
            ));
        }
        let image_path = root.join(&entry.image);
        if !image_path.is_file() {
            return Err(manifest_error(&entry.id, format!("missing image file {}", image_path.display())));
        }
        let raw = load_image(&image_path).map_err(|e| manifest_error(&entry.id, e.to_string()))?;
        let (h, w) = (raw.shape()[1], raw.shape()[2]);
        for (i, &[x, y]) in entry.landmarks.iter().enumerate() {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                return Err(manifest_error(
                    &entry.id,
                    format!("landmark {i} at ({x}, {y}) is outside the {w}x{h} image"),
                ));
            }
        }
        let points = entry
            .landmarks
            .iter()
            .map(|&[x, y]| Point::new(rescale_coord(x, w, image_size), rescale_coord(y, h, image_size)))
            .collect();
        samples.push(Sample {
            id: entry.id.clone(),
            image: resize_bilinear(&raw, image_size, image_size)?,
            landmarks: LandmarkSet::new(points, image_size)?,
        });
    }
    Ok(Dataset {
        landmark_names: manifest.landmark_names,
        samples,
    })
}

/// Write `dataset` as `dir/manifest.json` plus `dir/images/<id>.png`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let rel = format!("images/{}.png", s.id);
        save_png(&s.image, &dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image: rel,
            landmarks: s.landmarks.points().iter().map(|p| [p.x, p.y]).collect(),
        });
    }
    let manifest = Manifest {
        landmark_names: dataset.landmark_names.clone(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fsio::write_atomic(&path, &json)?;
    Ok(path)
}

pub const SYNTH_LANDMARKS: [&str; 4] = ["top_left", "top_right", "bottom_right", "bottom_left"];
/// Minimum luminance difference between shape and background.
pub const SYNTH_MIN_CONTRAST: f64 = 0.3;

fn luminance(c: [u8; 3]) -> f64 {
    (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0
}

fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Corner positions of one synthetic rectangle, in landmark order.
fn synth_corners(rng: &mut ChaCha8Rng, size: usize) -> [Point; 4] {
    let s = size as f64;
    let margin = (size / 8) as i64;
    let hi = size as i64 - 1 - margin;
    loop {
        let w = rng.random_range(0.35 * s..=0.6 * s);
        let h = w * rng.random_range(0.45..=0.7);
        let (sin, cos) = rng.random_range(-25.0f64..=25.0).to_radians().sin_cos();
        let cx = rng.random_range(0.3 * s..=0.7 * s);
        let cy = rng.random_range(0.3 * s..=0.7 * s);
        let local = [(-w / 2.0, -h / 2.0), (w / 2.0, -h / 2.0), (w / 2.0, h / 2.0), (-w / 2.0, h / 2.0)];
        let corners = local.map(|(x, y)| {
            Point::new(
                (cx + cos * x - sin * y).round() as i64,
                (cy + sin * x + cos * y).round() as i64,
            )
        });
        if corners.iter().all(|p| (margin..=hi).contains(&p.x) && (margin..=hi).contains(&p.y)) {
            return corners;
        }
    }
}

fn inside_convex(corners: &[Point; 4], x: i64, y: i64) -> bool {
    (0..4).all(|i| {
        let (a, b) = (corners[i], corners[(i + 1) % 4]);
        (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x) >= 0
    })
}

/// Deterministic in-memory synthetic dataset: a filled, rotated rectangle
/// per image whose four corners (clockwise on screen, starting top-left in
/// the shape's own frame) are the landmarks.
pub fn synth_dataset(count: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("synthetic dataset needs at least one sample".into()));
    }
    if image_size < 16 {
        return Err(Error::Config(format!("synthetic images must be at least 16 px, got {image_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = image_size;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let corners = synth_corners(&mut rng, s);
        let (bg, fg) = loop {
            let (bg, fg) = (random_color(&mut rng), random_color(&mut rng));
            if (luminance(bg) - luminance(fg)).abs() >= SYNTH_MIN_CONTRAST {
                break (bg, fg);
            }
        };
        let img = RgbImage::from_fn(s as u32, s as u32, |x, y| {
            image::Rgb(if inside_convex(&corners, x as i64, y as i64) { fg } else { bg })
        });
        samples.push(Sample {
            id: format!("synth_{i:05}"),
            image: rgb_to_tensor(&img),
            landmarks: LandmarkSet::new(corners.to_vec(), s)?,
        });
    }
    Ok(Dataset {
        landmark_names: SYNTH_LANDMARKS.iter().map(|s| s.to_string()).collect(),
        samples,
    })
}

/// Generate a synthetic dataset and write it under `dir`.
pub fn synth_generate(count: usize, image_size: usize, seed: u64, dir: &Path) -> Result<(Dataset, PathBuf)> {
    let dataset = synth_dataset(count, image_size, seed)?;
    let manifest = save_dataset(&dataset, dir)?;
    Ok((dataset, manifest))
}

/// Heatmap colormap: 0 black, 0.5 red, 1 yellow, linear in between.
pub fn heat_color(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.5 {
        [2.0 * v, 0.0, 0.0]
    } else {
        [1.0, 2.0 * v - 1.0, 0.0]
    }
}

pub const OVERLAY_ALPHA: f32 = 0.6;

/// Tile every heatmap, upscaled and colormapped, over the input image in a
/// `rows x cols` grid. Returns a `3 x (rows*S) x (cols*S)` image.
pub fn overlay(image: &Tensor<f32>, heatmaps: &HeatmapStack, (rows, cols): (usize, usize)) -> Result<Tensor<f32>> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::Dimension {
            op: "overlay",
            reason: format!("expected 3 x H x W, got {:?}", image.shape()),
        });
    };
    if rows * cols < heatmaps.len() {
        return Err(Error::Config(format!(
            "a {rows}x{cols} grid cannot hold {} heatmaps",
            heatmaps.len()
        )));
    }
    let g = heatmaps.grid_size();
    let (ow, oh) = (cols * w, rows * h);
    let mut out = vec![0.0f32; 3 * ow * oh];
    for tile in 0..rows * cols {
        let heat = if tile < heatmaps.len() {
            let plane = Tensor::new(&[1, g, g], heatmaps.map(tile).to_vec())?;
            Some(resize_bilinear(&plane, w, h)?)
        } else {
            None
        };
        let (tx, ty) = ((tile % cols) * w, (tile / cols) * h);
        for y in 0..h {
            for x in 0..w {
                let v = heat.as_ref().map_or(0.0, |t| t.data()[y * w + x]);
                let color = heat_color(v);
                for c in 0..3 {
                    let base = image.data()[c * w * h + y * w + x];
                    out[c * ow * oh + (ty + y) * ow + tx + x] = (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * color[c];
                }
            }
        }
    }
    Tensor::new(&[3, oh, ow], out)
}

/// Smallest near-square grid holding `n` tiles.
pub fn grid_layout(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (n.div_ceil(cols), cols)
}

pub fn render_overlay(
    image: &Tensor<f32>,
    heatmaps: &HeatmapStack,
    grid: (usize, usize),
    path: &Path,
) -> Result<()> {
    save_png(&overlay(image, heatmaps, grid)?, path)
}
