//! 8-bit rasters with binary PGM (P5) and PPM (P6) encoding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    /// `channels` is 1 (gray) or 3 (RGB); `data` is interleaved row-major.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::shape(
                "image",
                format!("{width}x{height}x{channels} image with {} bytes", data.len()),
            ));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Planar `[1, C, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, plane) = (self.channels, self.width * self.height);
        let mut out = vec![0.0f32; c * plane];
        for (p, px) in self.data.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * plane + p] = v as f32 / 255.0;
            }
        }
        Tensor::new(vec![1, c, self.height, self.width], out).expect("image tensor shape")
    }

    /// Inverse of [`Image::to_tensor`] for a single-sample tensor, rounding to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::shape("image", format!("expected [1,C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let plane = h * w;
        let mut data = vec![0u8; c * plane];
        for p in 0..plane {
            for ch in 0..c {
                data[p * c + ch] = (t.data()[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Image::new(w, h, c, data)
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image::new(self.width, self.height, 3, data).expect("rgb conversion")
    }

    /// Encodes as PGM for gray images, PPM for RGB, with maxval 255.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        parse_pnm(bytes, Path::new("<memory>"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pnm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pnm(&bytes, path)
    }
}

fn parse_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |pos: usize, msg: String| Error::parse(path, format!("byte {pos}"), msg);
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(err(0, "expected P5 or P6 magic".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected an unsigned integer header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| err(start, format!("{e}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, format!("unsupported maxval {maxval}, expected 255")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(err(pos, "expected a single whitespace byte after maxval".into()));
    }
    pos += 1;
    let expected = width * height * channels;
    let body = &bytes[pos..];
    if body.len() != expected {
        return Err(err(
            pos + body.len().min(expected),
            format!("expected {expected} pixel bytes, found {}", body.len()),
        ));
    }
    Image::new(width, height, channels, body.to_vec()).map_err(|e| err(pos, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_byte_layout() {
        let img = Image::new(2, 2, 1, vec![0, 64, 128, 255]).unwrap();
        let bytes = img.to_pnm();
        let mut expected = b"P5\n2 2\n255\n".to_vec();
        expected.extend_from_slice(&[0, 64, 128, 255]);
        assert_eq!(bytes, expected);
        assert_eq!(Image::from_pnm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_with_comment_parses() {
        let mut bytes = b"P6 # made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let img = Image::from_pnm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), &[1, 2, 3]);
    }

    #[test]
    fn truncated_pixels_rejected() {
        let img = Image::new(3, 2, 1, vec![9; 6]).unwrap();
        let bytes = img.to_pnm();
        let e = Image::from_pnm(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(e.to_string().contains("byte"), "{e}");
        assert!(Image::from_pnm(b"P5\n2").is_err());
        assert!(Image::from_pnm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::new(2, 1, 3, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }
}
