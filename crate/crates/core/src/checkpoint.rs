//! `ABNM` checkpoint files.
//!
//! Layout (all integers u32 little-endian):
//! magic `ABNM`, format version, config block, parameter count, then per
//! parameter: name length, UTF-8 name, rank, dims, f32 little-endian data.
//! The config block is: input height, input width, input channels, classes,
//! extractor stage count and channels, map height, map width, attention
//! channels, perception stage count and channels, mechanism (0 residual,
//! 1 product).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{AbnModel, Mechanism, ModelConfig, Param, ParamGroup};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ABNM";
pub const FORMAT_VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_list(out: &mut Vec<u8>, vs: &[usize]) {
    put(out, vs.len());
    vs.iter().for_each(|&v| put(out, v));
}

pub fn encode(model: &AbnModel) -> Vec<u8> {
    let c = model.config();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [c.input_size.0, c.input_size.1, c.input_channels, c.num_classes] {
        put(&mut out, v);
    }
    put_list(&mut out, &c.extractor_channels);
    for v in [c.map_size.0, c.map_size.1, c.attention_channels] {
        put(&mut out, v);
    }
    put_list(&mut out, &c.perception_channels);
    put(
        &mut out,
        match c.mechanism {
            Mechanism::Residual => 0,
            Mechanism::Product => 1,
        },
    );
    put(&mut out, model.params().count());
    for p in model.params() {
        put(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_list(&mut out, p.tensor.shape());
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, format!("byte {}", self.pos), msg)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn list(&mut self, max: usize) -> Result<Vec<usize>> {
        let n = self.u32()?;
        if n > max {
            return Err(self.fail(format!("list length {n} exceeds {max}")));
        }
        (0..n).map(|_| self.u32()).collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<AbnModel> {
    decode_from(bytes, Path::new("<memory>"))
}

fn decode_from(bytes: &[u8], path: &Path) -> Result<AbnModel> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, expected ABNM"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(r.fail(format!("unsupported format version {version}")));
    }
    let (ih, iw, ic, classes) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let extractor_channels = r.list(64)?;
    let (mh, mw, k) = (r.u32()?, r.u32()?, r.u32()?);
    let perception_channels = r.list(64)?;
    let mechanism = match r.u32()? {
        0 => Mechanism::Residual,
        1 => Mechanism::Product,
        m => return Err(r.fail(format!("unknown mechanism code {m}"))),
    };
    let config = ModelConfig {
        input_size: (ih, iw),
        input_channels: ic,
        num_classes: classes,
        extractor_channels,
        map_size: (mh, mw),
        attention_channels: k,
        perception_channels,
        mechanism,
    };
    config.validate().map_err(|e| r.fail(e.to_string()))?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()?;
        let raw_name = r.take(len)?.to_vec();
        let name = String::from_utf8(raw_name).map_err(|e| r.fail(format!("parameter name: {e}")))?;
        let shape = r.list(8)?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| r.fail("parameter size overflows"))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.fail("parameter size overflows"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| r.fail(e.to_string()))?;
        params.push(Param {
            name,
            tensor: tensor.with_grad(true),
        });
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last parameter"));
    }
    // split back into groups by name prefix
    let mut groups: [Vec<Param>; 3] = Default::default();
    for p in params {
        let idx = ParamGroup::ALL
            .iter()
            .position(|g| p.name.starts_with(group_prefix(*g)))
            .ok_or_else(|| r.fail(format!("parameter `{}` belongs to no group", p.name)))?;
        groups[idx].push(p);
    }
    let [e, a, pc] = groups;
    AbnModel::from_parts(config, e, a, pc).map_err(|e| r.fail(e.to_string()))
}

fn group_prefix(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Extractor => "extractor.",
        ParamGroup::Attention => "attention.",
        ParamGroup::Perception => "perception.",
    }
}

pub fn save(model: &AbnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(model)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<AbnModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_from(&bytes, path)
}

/// Hex SHA-256 of the encoded checkpoint.
pub fn checksum(model: &AbnModel) -> String {
    checksum_bytes(&encode(model))
}

pub fn checksum_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 over one parameter group's names, shapes and values.
pub fn group_checksum(model: &AbnModel, group: ParamGroup) -> String {
    let mut h = Sha256::new();
    for p in model.group(group) {
        h.update(p.name.as_bytes());
        for &d in p.tensor.shape() {
            h.update((d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
