//! Single-channel attention maps and their binary `AMAP` encoding.

use std::path::Path;

use crate::error::{Error, Result};

const AMAP_MAGIC: &[u8; 4] = b"AMAP";

/// Row-major raster of attention values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl AttentionMap {
    /// Validates dimensions and that every value is finite and inside `[0, 1]`.
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(
                "attention_map",
                format!("{height}x{width} map with {} values", values.len()),
            ));
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::MapRange { index, value });
        }
        Ok(AttentionMap { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        AttentionMap::new(height, width, vec![value; height * width])
    }

    /// Clamps into `[0, 1]`; NaN becomes 0.
    pub(crate) fn from_clamped(height: usize, width: usize, values: Vec<f32>) -> Self {
        let values = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        AttentionMap { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(AMAP_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes, Path::new("<memory>"))
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, msg: &str| Error::parse(path, format!("byte {offset}"), msg);
        if bytes.len() < 12 {
            return Err(err(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != AMAP_MAGIC {
            return Err(err(0, "bad magic, expected AMAP"));
        }
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(12))
            .ok_or_else(|| err(4, "dimensions overflow"))?;
        if bytes.len() != expected {
            return Err(err(
                bytes.len().min(expected),
                &format!("expected {expected} bytes for {height}x{width}, found {}", bytes.len()),
            ));
        }
        let values = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        AttentionMap::new(height, width, values).map_err(|e| err(12, &e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_map(map: &AttentionMap, height: usize, width: usize) -> Result<AttentionMap> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize to {height}x{width}"
        )));
    }
    if map.dims() == (height, width) {
        return Ok(map.clone());
    }
    let values = resize_bilinear(map.values(), map.height, map.width, height, width);
    Ok(AttentionMap::from_clamped(height, width, values))
}

/// Bilinear resize of a single `f32` plane (same convention as [`resize_map`]).
pub fn resize_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let ys: Vec<_> = (0..dh).map(|i| sample_axis(i, sh, dh)).collect();
    let xs: Vec<_> = (0..dw).map(|j| sample_axis(j, sw, dw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = src[y0 * sw + x0] as f64 * (1.0 - tx) + src[y0 * sw + x1] as f64 * tx;
            let bottom = src[y1 * sw + x0] as f64 * (1.0 - tx) + src[y1 * sw + x1] as f64 * tx;
            out.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    out
}

fn sample_axis(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
        .clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}
