//! Landmark <-> heatmap conversion.
//!
//! Ground truth for landmark `a` is a linear cone: `max(0, 1 - d(p, a) / r)`
//! with `d` the Euclidean distance between pixel centres. Cones are clipped
//! at the grid border, never shifted. Decoding is a first-occurrence argmax
//! in row-major order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{max_with_index, Tensor};

/// Integer pixel position: `x` is the column, `y` the row, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: i64,
    pub y: i64,
}

impl Point {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        let dx = (self.x - other.x) as f64;
        let dy = (self.y - other.y) as f64;
        (dx * dx + dy * dy).sqrt()
    }
}

impl From<(i64, i64)> for Point {
    fn from((x, y): (i64, i64)) -> Self {
        Self { x, y }
    }
}

/// Ordered landmarks on a square grid; index `i` is landmark `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LandmarkSet {
    points: Vec<Point>,
    grid_size: usize,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>, grid_size: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("a landmark set needs at least one point".into()));
        }
        for (index, p) in points.iter().enumerate() {
            if !in_grid(*p, grid_size) {
                return Err(Error::LandmarkOutOfGrid {
                    index,
                    x: p.x,
                    y: p.y,
                    grid: grid_size,
                });
            }
        }
        Ok(Self { points, grid_size })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn in_grid(p: Point, grid: usize) -> bool {
    p.x >= 0 && p.y >= 0 && (p.x as usize) < grid && (p.y as usize) < grid
}

/// `n x G x G` stack of heatmaps with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    maps: Tensor<f32>,
}

impl HeatmapStack {
    pub fn new(maps: Tensor<f32>) -> Result<Self> {
        match *maps.shape() {
            [n, h, w] if n >= 1 && h == w && h >= 1 => Ok(Self { maps }),
            _ => Err(Error::Dimension {
                op: "heatmap stack",
                reason: format!("expected n x G x G with n >= 1, got {:?}", maps.shape()),
            }),
        }
    }

    pub fn maps(&self) -> &Tensor<f32> {
        &self.maps
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid_size(&self) -> usize {
        self.maps.shape()[1]
    }

    /// Row-major `G x G` slice of heatmap `i`.
    pub fn map(&self, i: usize) -> &[f32] {
        let plane = self.grid_size() * self.grid_size();
        &self.maps.data()[i * plane..(i + 1) * plane]
    }
}

/// Binary support masks of a ground-truth stack.
#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorMask {
    masks: Tensor<f32>,
}

impl IndicatorMask {
    pub fn masks(&self) -> &Tensor<f32> {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask(&self, i: usize) -> &[f32] {
        let g = self.masks.shape()[1];
        &self.masks.data()[i * g * g..(i + 1) * g * g]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Cone radius in heatmap pixels.
    pub radius: f64,
    pub grid_size: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            radius: 10.0,
            grid_size: 128,
        }
    }
}

impl CodecConfig {
    pub fn new(radius: f64, grid_size: usize) -> Result<Self> {
        let config = Self { radius, grid_size };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 1.0) || !self.radius.is_finite() {
            return Err(Error::Config(format!("cone radius must be >= 1, got {}", self.radius)));
        }
        if self.grid_size < 2 {
            return Err(Error::Config(format!("grid size must be >= 2, got {}", self.grid_size)));
        }
        Ok(())
    }

    /// Grids smaller than the cone diameter leave little background; still
    /// valid, but worth a warning.
    pub fn is_cramped(&self) -> bool {
        (self.grid_size as f64) < 2.0 * self.radius
    }
}

/// Cone value at Euclidean distance `d` for radius `r`.
pub fn cone_value(d: f64, r: f64) -> f64 {
    (1.0 - d / r).max(0.0)
}

/// Ground-truth heatmaps for `landmarks` on the configured grid.
pub fn encode(landmarks: &LandmarkSet, config: &CodecConfig) -> Result<HeatmapStack> {
    config.validate()?;
    let g = config.grid_size;
    for (index, p) in landmarks.points().iter().enumerate() {
        if !in_grid(*p, g) {
            return Err(Error::LandmarkOutOfGrid {
                index,
                x: p.x,
                y: p.y,
                grid: g,
            });
        }
    }
    let n = landmarks.len();
    let mut data = vec![0.0f32; n * g * g];
    let reach = config.radius.ceil() as i64;
    for (i, a) in landmarks.points().iter().enumerate() {
        let plane = &mut data[i * g * g..(i + 1) * g * g];
        let (y0, y1) = ((a.y - reach).max(0), (a.y + reach).min(g as i64 - 1));
        let (x0, x1) = ((a.x - reach).max(0), (a.x + reach).min(g as i64 - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = a.distance(Point::new(x, y));
                plane[y as usize * g + x as usize] = cone_value(d, config.radius) as f32;
            }
        }
    }
    HeatmapStack::new(Tensor::new(&[n, g, g], data)?)
}

/// `1` where the ground truth is strictly positive, `0` elsewhere.
pub fn indicator(gt: &HeatmapStack) -> IndicatorMask {
    IndicatorMask {
        masks: gt.maps().map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
    }
}

/// Argmax of every heatmap, ties resolved to the first pixel in row-major order.
pub fn decode(pred: &HeatmapStack) -> LandmarkSet {
    decode_with_values(pred).0
}

/// Like [`decode`], also returning each map's peak value.
pub fn decode_with_values(pred: &HeatmapStack) -> (LandmarkSet, Vec<f32>) {
    let g = pred.grid_size();
    let (points, values) = (0..pred.len())
        .map(|i| {
            let (v, idx) = max_with_index(pred.map(i)).expect("heatmaps are non-empty");
            (Point::new((idx % g) as i64, (idx / g) as i64), v)
        })
        .unzip();
    (
        LandmarkSet {
            points,
            grid_size: g,
        },
        values,
    )
}

/// Endpoint-preserving rescale of one coordinate: `round(c * (to-1) / (from-1))`,
/// rounding half away from zero, clamped to `[0, to-1]`.
pub fn rescale_coord(c: i64, from_size: usize, to_size: usize) -> i64 {
    if from_size == to_size {
        return c.clamp(0, to_size as i64 - 1);
    }
    let scaled = c as f64 * (to_size as f64 - 1.0) / (from_size as f64 - 1.0);
    (scaled.round() as i64).clamp(0, to_size as i64 - 1)
}

pub fn rescale(landmarks: &LandmarkSet, from_size: usize, to_size: usize) -> Result<LandmarkSet> {
    rescale_xy(landmarks, (from_size, from_size), to_size)
}

/// Rescale landmarks from a `width x height` frame onto a square grid.
pub fn rescale_xy(landmarks: &LandmarkSet, (from_w, from_h): (usize, usize), to_size: usize) -> Result<LandmarkSet> {
    if from_w < 2 || from_h < 2 || to_size < 2 {
        return Err(Error::Config(format!(
            "rescale needs sizes >= 2, got {from_w}x{from_h} -> {to_size}"
        )));
    }
    let points = landmarks
        .points()
        .iter()
        .map(|p| Point::new(rescale_coord(p.x, from_w, to_size), rescale_coord(p.y, from_h, to_size)))
        .collect();
    Ok(LandmarkSet {
        points,
        grid_size: to_size,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Peak {
    pub x: i64,
    pub y: i64,
    pub value: f32,
}

/// Local maxima (8-neighbourhood, `>=` every neighbour) at or above
/// `threshold`, thinned greedily from the strongest so that survivors are
/// at least `min_separation` pixels apart. More than one peak means the
/// heatmap attends to several places at once.
pub fn detect_double_attention(map: &[f32], grid_size: usize, threshold: f32, min_separation: f64) -> Vec<Peak> {
    let g = grid_size;
    assert_eq!(map.len(), g * g, "map must be grid_size x grid_size");
    let mut candidates = Vec::new();
    for y in 0..g {
        for x in 0..g {
            let v = map[y * g + x];
            if !(v >= threshold) {
                continue;
            }
            let mut is_max = true;
            'nbrs: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= g as i64 || ny >= g as i64 {
                        continue;
                    }
                    if map[ny as usize * g + nx as usize] > v {
                        is_max = false;
                        break 'nbrs;
                    }
                }
            }
            if is_max {
                candidates.push(Peak {
                    x: x as i64,
                    y: y as i64,
                    value: v,
                });
            }
        }
    }
    // Stable sort keeps row-major order among equal values.
    candidates.sort_by(|a, b| b.value.total_cmp(&a.value));
    let mut kept: Vec<Peak> = Vec::new();
    for c in candidates {
        let far = kept.iter().all(|k| {
            Point::new(k.x, k.y).distance(Point::new(c.x, c.y)) >= min_separation
        });
        if far {
            kept.push(c);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[(i64, i64)], grid: usize) -> LandmarkSet {
        LandmarkSet::new(points.iter().map(|&p| p.into()).collect(), grid).unwrap()
    }

    fn at(stack: &HeatmapStack, i: usize, x: usize, y: usize) -> f32 {
        stack.map(i)[y * stack.grid_size() + x]
    }

    #[test]
    fn cone_reference_values() {
        let hm = encode(&set(&[(64, 64)], 128), &CodecConfig::default()).unwrap();
        assert_eq!(at(&hm, 0, 64, 64), 1.0);
        assert_eq!(at(&hm, 0, 69, 64), 0.5);
        assert_eq!(at(&hm, 0, 74, 64), 0.0);
        assert_eq!(at(&hm, 0, 64, 54), 0.0);
    }

    #[test]
    fn corner_cone_is_clipped() {
        let hm = encode(&set(&[(0, 0)], 128), &CodecConfig::default()).unwrap();
        assert_eq!(at(&hm, 0, 0, 0), 1.0);
        let nonzero = hm.map(0).iter().filter(|&&v| v > 0.0).count();
        let quarter = (0..10i64)
            .flat_map(|dy| (0..10i64).map(move |dx| dx * dx + dy * dy))
            .filter(|&d2| d2 < 100)
            .count();
        assert_eq!(nonzero, quarter);
    }

    #[test]
    fn out_of_grid_landmark_names_index() {
        let err = LandmarkSet::new(vec![Point::new(1, 1), Point::new(-1, 5)], 16).unwrap_err();
        assert!(matches!(err, Error::LandmarkOutOfGrid { index: 1, .. }));
        let ok = set(&[(20, 3)], 32);
        let err = encode(&ok, &CodecConfig::new(10.0, 16).unwrap()).unwrap_err();
        assert!(matches!(err, Error::LandmarkOutOfGrid { index: 0, .. }));
    }

    #[test]
    fn indicator_edge_cases() {
        let zeros = HeatmapStack::new(Tensor::zeros(&[1, 4, 4])).unwrap();
        assert_eq!(indicator(&zeros).masks().sum(), 0.0);
        let mut one = Tensor::zeros(&[1, 4, 4]);
        one.data_mut()[6] = 1.0;
        let ind = indicator(&HeatmapStack::new(one).unwrap());
        assert_eq!(ind.masks().sum(), 1.0);
        assert_eq!(ind.mask(0)[6], 1.0);
    }

    #[test]
    fn decode_tie_breaks() {
        let uniform = HeatmapStack::new(Tensor::full(&[1, 8, 8], 0.3)).unwrap();
        assert_eq!(decode(&uniform).points(), &[Point::new(0, 0)]);

        let mut t = Tensor::zeros(&[1, 12, 12]);
        t.data_mut()[7 * 12 + 3] = 0.9;
        t.data_mut()[2 * 12 + 9] = 0.9;
        let two = HeatmapStack::new(t).unwrap();
        assert_eq!(decode(&two).points(), &[Point::new(9, 2)]);
    }

    #[test]
    fn rescale_examples() {
        let l = set(&[(0, 0), (511, 511), (255, 255)], 512);
        let r = rescale(&l, 512, 128).unwrap();
        assert_eq!(r.points(), &[Point::new(0, 0), Point::new(127, 127), Point::new(63, 63)]);
        assert_eq!(rescale(&l, 512, 512).unwrap(), l);
        assert!(rescale(&l, 1, 128).is_err());
    }

    #[test]
    fn double_attention_examples() {
        let cfg = CodecConfig::new(10.0, 64).unwrap();
        let single = encode(&set(&[(30, 20)], 64), &cfg).unwrap();
        let peaks = detect_double_attention(single.map(0), 64, 0.5, 10.0);
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks[0].x, peaks[0].y), (30, 20));
        assert!(detect_double_attention(&[0.0; 64 * 64], 64, 0.5, 10.0).is_empty());
    }

    #[test]
    fn plateau_collapses_to_one_peak() {
        let mut map = vec![0.0f32; 100];
        for y in 4..6 {
            for x in 4..6 {
                map[y * 10 + x] = 0.8;
            }
        }
        let peaks = detect_double_attention(&map, 10, 0.5, 3.0);
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks[0].x, peaks[0].y), (4, 4));
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::new(0.5, 128).is_err());
        assert!(CodecConfig::new(10.0, 1).is_err());
        assert!(CodecConfig::new(10.0, 16).unwrap().is_cramped());
        assert!(!CodecConfig::default().is_cramped());
    }
}
