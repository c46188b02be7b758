//! Ways of producing an edited attention map: brush strokes, bubble
//! annotations (kernel density), segmentation labels, and the heat overlay
//! shown to the person doing the editing.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::map::{resize_map, AttentionMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BrushMode {
    Add,
    Remove,
}

/// A mouse drag on the display-resolution canvas. Points are pixel
/// coordinates `(x, y)`; pixel `(col, row)` is centred at `(col, row)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BrushStroke {
    pub mode: BrushMode,
    pub points: Vec<(f32, f32)>,
    pub radius: f32,
    pub strength: f32,
}

/// Fraction of the radius painted at full strength before the cosine taper.
pub const BRUSH_CORE: f32 = 0.5;

/// Brush weight at `distance` from the stroke path: 1 inside the core,
/// cosine taper to 0 at `radius`, and exactly 0 at or beyond `radius`.
pub fn brush_falloff(distance: f32, radius: f32) -> f32 {
    let t = distance / radius;
    if t >= 1.0 {
        0.0
    } else if t <= BRUSH_CORE {
        1.0
    } else {
        let u = (t - BRUSH_CORE) / (1.0 - BRUSH_CORE);
        0.5 * (1.0 + (std::f32::consts::PI * u).cos())
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

impl BrushStroke {
    /// Shortest distance from `p` to the polyline through the stroke points.
    pub fn distance_to_path(&self, p: (f32, f32)) -> f32 {
        match self.points.as_slice() {
            [] => f32::INFINITY,
            [only] => segment_distance(p, *only, *only),
            pts => pts
                .windows(2)
                .map(|w| segment_distance(p, w[0], w[1]))
                .fold(f32::INFINITY, f32::min),
        }
    }

    fn validate(&self, (height, width): (usize, usize)) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("stroke has no points".into()));
        }
        if !(self.radius >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "brush radius must be >= 1, got {}",
                self.radius
            )));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "brush strength must lie in (0, 1], got {}",
                self.strength
            )));
        }
        let (max_x, max_y) = ((width - 1) as f32, (height - 1) as f32);
        if let Some(&(x, y)) = self
            .points
            .iter()
            .find(|&&(x, y)| !(0.0..=max_x).contains(&x) || !(0.0..=max_y).contains(&y))
        {
            return Err(Error::InvalidArgument(format!(
                "stroke point ({x}, {y}) outside {width}x{height} canvas"
            )));
        }
        Ok(())
    }
}

/// Paints one stroke onto a display-resolution map.
pub fn apply_stroke(
    map: &AttentionMap,
    stroke: &BrushStroke,
    display_size: (usize, usize),
) -> Result<AttentionMap> {
    if map.dims() != display_size {
        return Err(Error::shape(
            "apply_stroke",
            format!("map is {:?}, display is {display_size:?}", map.dims()),
        ));
    }
    stroke.validate(display_size)?;
    let (height, width) = display_size;
    let mut values = map.values().to_vec();
    for row in 0..height {
        for col in 0..width {
            let d = stroke.distance_to_path((col as f32, row as f32));
            let w = stroke.strength * brush_falloff(d, stroke.radius);
            if w <= 0.0 {
                continue;
            }
            let v = &mut values[row * width + col];
            *v = match stroke.mode {
                BrushMode::Add => *v + w * (1.0 - *v),
                BrushMode::Remove => *v * (1.0 - w),
            };
        }
    }
    Ok(AttentionMap::from_clamped(height, width, values))
}

pub fn apply_strokes(
    map: &AttentionMap,
    strokes: &[BrushStroke],
    display_size: (usize, usize),
) -> Result<AttentionMap> {
    strokes
        .iter()
        .try_fold(map.clone(), |m, s| apply_stroke(&m, s, display_size))
}

/// A circular region marked as discriminative; coordinates normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BubbleAnnotation {
    pub center: (f64, f64),
    pub radius: f64,
    pub annotator_id: String,
}

impl BubbleAnnotation {
    pub fn new(x: f64, y: f64, radius: f64, annotator_id: impl Into<String>) -> Result<Self> {
        if !(radius > 0.0) || !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::InvalidArgument(format!(
                "bubble at ({x}, {y}) radius {radius} out of bounds"
            )));
        }
        Ok(BubbleAnnotation {
            center: (x, y),
            radius,
            annotator_id: annotator_id.into(),
        })
    }
}

pub const DEFAULT_BANDWIDTH: f64 = 0.5;

/// Unnormalized Gaussian kernel density sampled at cell centres.
/// Each bubble contributes a normalized 2-D Gaussian with
/// standard deviation `bandwidth * radius`.
pub fn bubble_density(
    bubbles: &[BubbleAnnotation],
    height: usize,
    width: usize,
    bandwidth: f64,
) -> Vec<f64> {
    let mut density = vec![0.0; height * width];
    for b in bubbles {
        let sigma = bandwidth * b.radius;
        let norm = 1.0 / (2.0 * PI * sigma * sigma);
        for row in 0..height {
            let dy = (row as f64 + 0.5) / height as f64 - b.center.1;
            for col in 0..width {
                let dx = (col as f64 + 0.5) / width as f64 - b.center.0;
                density[row * width + col] +=
                    norm * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    density
}

pub fn bubbles_to_map(
    bubbles: &[BubbleAnnotation],
    height: usize,
    width: usize,
    bandwidth: f64,
) -> Result<AttentionMap> {
    if bubbles.is_empty() {
        return Err(Error::InvalidArgument("no bubbles to build a map from".into()));
    }
    if !(bandwidth > 0.0) || height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "bandwidth {bandwidth} on a {height}x{width} grid"
        )));
    }
    let density = bubble_density(bubbles, height, width, bandwidth);
    Ok(AttentionMap::from_clamped(
        height,
        width,
        min_max_normalize(&density),
    ))
}

/// Parses `x y radius annotator_id` lines; blank lines and `#` comments are skipped.
pub fn parse_bubbles(text: &str, path: &Path) -> Result<Vec<BubbleAnnotation>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let location = format!("line {}", lineno + 1);
        let mut parts = line.splitn(4, char::is_whitespace);
        let mut num = |name: &str| -> Result<f64> {
            parts
                .next()
                .ok_or_else(|| Error::parse(path, &location, format!("missing {name}")))?
                .parse()
                .map_err(|e| Error::parse(path, &location, format!("{name}: {e}")))
        };
        let (x, y, r) = (num("x")?, num("y")?, num("radius")?);
        let id = parts
            .next()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::parse(path, &location, "missing annotator_id"))?;
        out.push(
            BubbleAnnotation::new(x, y, r, id)
                .map_err(|e| Error::parse(path, &location, e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn load_bubbles(path: impl AsRef<Path>) -> Result<Vec<BubbleAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bubbles(&text, path)
}

/// Binary raster where 1 marks the annotated region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(
                "segmentation_mask",
                format!("{height}x{width} mask with {} values", values.len()),
            ));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(SegmentationMask { height, width, values })
    }

    /// Thresholds a gray image: nonzero pixels are foreground.
    pub fn from_image(img: &Image) -> Result<Self> {
        let gray: Vec<u8> = img
            .data()
            .chunks(img.channels())
            .map(|px| u8::from(px.iter().any(|&v| v > 0)))
            .collect();
        SegmentationMask::new(img.height(), img.width(), gray)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// Overlap of destination cell `i` with each source index when `src_len`
/// cells are averaged onto `dst_len` cells; weights per cell sum to 1.
fn area_weights(src_len: usize, dst_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src_len {
                let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((s, overlap / scale));
                }
                s += 1;
            }
            w
        })
        .collect()
}

/// Area-average resampling of a mask before normalization.
pub fn area_downsample(mask: &SegmentationMask, height: usize, width: usize) -> Vec<f64> {
    let (ry, rx) = (area_weights(mask.height, height), area_weights(mask.width, width));
    let mut out = vec![0.0; height * width];
    for (i, wy) in ry.iter().enumerate() {
        for (j, wx) in rx.iter().enumerate() {
            let mut acc = 0.0;
            for &(sy, fy) in wy {
                for &(sx, fx) in wx {
                    acc += fy * fx * mask.values[sy * mask.width + sx] as f64;
                }
            }
            out[i * width + j] = acc;
        }
    }
    out
}

pub fn segmentation_to_map(mask: &SegmentationMask, height: usize, width: usize) -> Result<AttentionMap> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("target size {height}x{width}")));
    }
    let averaged = area_downsample(mask, height, width);
    Ok(AttentionMap::from_clamped(
        height,
        width,
        min_max_normalize(&averaged),
    ))
}

/// Min-max scaling to `[0, 1]`. A constant positive input maps to all ones,
/// an all-zero input stays zero.
pub fn min_max_normalize(values: &[f64]) -> Vec<f32> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range > 1e-12 * max.abs().max(1e-300) {
        values.iter().map(|&v| ((v - min) / range) as f32).collect()
    } else if max > 0.0 {
        vec![1.0; values.len()]
    } else {
        vec![0.0; values.len()]
    }
}

/// Jet colormap: blue (0) through cyan, yellow, to dark red (1).
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel = |offset: f64| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0);
    [channel(3.0), channel(2.0), channel(1.0)]
}

/// Alpha-blends a jet-coloured map over an image, producing RGB.
pub fn overlay(image: &Image, map: &AttentionMap, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let map = resize_map(map, image.height(), image.width())?;
    let rgb = image.to_rgb();
    let data = rgb
        .data()
        .chunks(3)
        .zip(map.values())
        .flat_map(|(px, &m)| {
            let heat = jet(m as f64);
            [0, 1, 2].map(|c| blend(px[c], heat[c], alpha))
        })
        .collect();
    Image::new(image.width(), image.height(), 3, data)
}

fn blend(pixel: u8, heat: f64, alpha: f64) -> u8 {
    (((1.0 - alpha) * pixel as f64 / 255.0 + alpha * heat) * 255.0)
        .round()
        .clamp(0.0, 255.0) as u8
}
