//! Synthetic two-object images, oracle edited maps and on-disk datasets.
//!
//! Every image holds one labeled glyph and, with probability
//! `distractor_rate`, a second glyph of a different class. The labeled glyph
//! tends to be larger and brighter than the distractor, but the ranges
//! overlap, so some images are genuinely ambiguous to a classifier that does
//! not know which object to look at.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::editing::min_max_normalize;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::map::AttentionMap;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const MAX_CLASSES: usize = 6;
/// Smoothing of oracle maps, in map cells.
pub const ORACLE_SIGMA: f64 = 1.0;

/// Axis-aligned pixel box, `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn intersects(&self, other: &Region) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }

    fn parse(s: &str) -> Option<Region> {
        let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        match v.as_slice() {
            &[x0, y0, x1, y1] if x0 < x1 && y0 < y1 => Some(Region { x0, y0, x1, y1 }),
            _ => None,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Class-specific glyph shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

impl Glyph {
    pub fn for_class(class: usize) -> Glyph {
        [
            Glyph::Disk,
            Glyph::Square,
            Glyph::Triangle,
            Glyph::Cross,
            Glyph::Ring,
            Glyph::Diamond,
        ][class % MAX_CLASSES]
    }

    /// Whether offset `(dx, dy)` from the glyph centre lies inside a glyph of half-size `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Glyph::Disk => dx * dx + dy * dy <= r * r,
            Glyph::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Glyph::Triangle => {
                // apex at (0, -r), base y = r spanning x in [-r, r]
                dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0
            }
            Glyph::Cross => {
                (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r)
            }
            Glyph::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
            Glyph::Diamond => dx.abs() + dy.abs() <= r,
        }
    }

    /// Exact area of the continuous shape.
    pub fn area(self, r: f64) -> f64 {
        match self {
            Glyph::Disk => std::f64::consts::PI * r * r,
            Glyph::Square => (1.6 * r).powi(2),
            Glyph::Triangle => 2.0 * r * r,
            Glyph::Cross => 2.0 * (0.6 * r) * (2.0 * r) - (0.6 * r).powi(2),
            Glyph::Ring => 0.75 * std::f64::consts::PI * r * r,
            Glyph::Diamond => 2.0 * r * r,
        }
    }

    /// Boundary length, used to bound rasterization error.
    pub fn perimeter(self, r: f64) -> f64 {
        match self {
            Glyph::Disk => 2.0 * std::f64::consts::PI * r,
            Glyph::Square => 4.0 * 1.6 * r,
            Glyph::Triangle => 2.0 * r + 2.0 * (r * r + 4.0 * r * r).sqrt(),
            Glyph::Cross => 8.0 * 0.7 * r + 4.0 * 0.6 * r,
            Glyph::Ring => 3.0 * std::f64::consts::PI * r,
            Glyph::Diamond => 4.0 * std::f64::consts::SQRT_2 * r,
        }
    }

    /// Pixel mask of a glyph centred at `(cx, cy)`, sampled at pixel centres.
    pub fn rasterize(self, cx: f64, cy: f64, r: f64, size: usize) -> Vec<bool> {
        let mut mask = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                mask[y * size + x] = self.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            }
        }
        mask
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: usize,
    pub target_region: Region,
    pub distractor_region: Option<Region>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Stacks the images at `indices` into an `[N, C, H, W]` tensor.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = indices.iter().map(|&i| self.samples[i].image.to_tensor()).collect();
        Tensor::stack(&items)
    }

    /// Per-channel mean intensity in `[0, 1]`.
    pub fn mean_intensity(&self) -> Vec<f32> {
        let Some(first) = self.samples.first() else { return vec![0.0] };
        let c = first.image.channels();
        let mut sums = vec![0.0f64; c];
        let mut count = 0usize;
        for s in &self.samples {
            for px in s.image.data().chunks(c) {
                for (acc, &v) in sums.iter_mut().zip(px) {
                    *acc += v as f64 / 255.0;
                }
            }
            count += s.image.width() * s.image.height();
        }
        sums.into_iter().map(|s| (s / count as f64) as f32).collect()
    }

    /// Splits off the first `n` samples.
    pub fn split_at(self, n: usize) -> (Dataset, Dataset) {
        let mut head = self.samples;
        let tail = head.split_off(n.min(head.len()));
        (
            Dataset { samples: head, num_classes: self.num_classes },
            Dataset { samples: tail, num_classes: self.num_classes },
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }
}

fn place(rng: &mut ChaCha8Rng, r: f64, avoid: Option<&Region>) -> Option<(f64, f64, Region)> {
    let margin = 2.0;
    for _ in 0..200 {
        let cx = rng.random_range(r + margin..IMAGE_SIZE as f64 - r - margin);
        let cy = rng.random_range(r + margin..IMAGE_SIZE as f64 - r - margin);
        let region = Region {
            x0: (cx - r).floor() as usize,
            y0: (cy - r).floor() as usize,
            x1: ((cx + r).ceil() as usize).min(IMAGE_SIZE),
            y1: ((cy + r).ceil() as usize).min(IMAGE_SIZE),
        };
        let clear = avoid.is_none_or(|a| {
            let grown = Region {
                x0: a.x0.saturating_sub(4),
                y0: a.y0.saturating_sub(4),
                x1: a.x1 + 4,
                y1: a.y1 + 4,
            };
            !grown.intersects(&region)
        });
        if clear {
            return Some((cx, cy, region));
        }
    }
    None
}

/// Generates `n` synthetic samples; deterministic in all arguments.
pub fn generate(n: usize, num_classes: usize, seed: u64, distractor_rate: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot generate an empty dataset".into()));
    }
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(Error::InvalidArgument(format!(
            "num_classes must lie in 2..={MAX_CLASSES}, got {num_classes}"
        )));
    }
    if !(0.0..=1.0).contains(&distractor_rate) {
        return Err(Error::InvalidArgument(format!(
            "distractor rate {distractor_rate} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let label = samples.len() % num_classes;
        let r_t = rng.random_range(7.0..11.0);
        let i_t = rng.random_range(0.65..1.0);
        let has_distractor = rng.random_bool(distractor_rate);
        let d_class = (label + rng.random_range(1..num_classes)) % num_classes;
        let r_d = rng.random_range(5.0..9.5);
        let i_d = rng.random_range(0.4..0.8);

        let Some((tx, ty, target_region)) = place(&mut rng, r_t, None) else { continue };
        let distractor = if has_distractor {
            match place(&mut rng, r_d, Some(&target_region)) {
                Some(d) => Some(d),
                None => continue,
            }
        } else {
            None
        };

        let mut pixels: Vec<f64> = (0..IMAGE_SIZE * IMAGE_SIZE).map(|_| 0.08).collect();
        let mut paint = |glyph: Glyph, cx: f64, cy: f64, r: f64, intensity: f64| {
            for (p, inside) in pixels.iter_mut().zip(glyph.rasterize(cx, cy, r, IMAGE_SIZE)) {
                if inside {
                    *p = intensity;
                }
            }
        };
        paint(Glyph::for_class(label), tx, ty, r_t, i_t);
        if let Some((dx, dy, _)) = distractor {
            paint(Glyph::for_class(d_class), dx, dy, r_d, i_d);
        }
        let data = pixels
            .into_iter()
            .map(|v| ((v + noise.sample(&mut rng)).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        samples.push(Sample {
            id: format!("s{:05}", samples.len()),
            image: Image::new(IMAGE_SIZE, IMAGE_SIZE, 1, data)?,
            label,
            target_region,
            distractor_region: distractor.map(|d| d.2),
        });
    }
    // interleave classes without a fixed period
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut samples: Vec<Sample> = order.into_iter().map(|i| samples[i].clone()).collect();
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = format!("s{i:05}");
    }
    Ok(Dataset { samples, num_classes })
}

/// Fraction of each unit cell `[k, k+1)` covered by `[lo, hi)`.
fn coverage(lo: f64, hi: f64, cells: usize) -> Vec<f64> {
    (0..cells)
        .map(|k| (hi.min(k as f64 + 1.0) - lo.max(k as f64)).clamp(0.0, 1.0))
        .collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable convolution with edge replication.
fn smooth(values: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kw)| kw * values[y * w + clamp(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kw)| kw * tmp[clamp(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Machine stand-in for a human edit: the labeled object's box rasterized
/// at map resolution, Gaussian-smoothed and rescaled to `[0, 1]`.
pub fn oracle_map(sample: &Sample, height: usize, width: usize) -> Result<AttentionMap> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("map size {height}x{width}")));
    }
    let (iw, ih) = (sample.image.width() as f64, sample.image.height() as f64);
    let t = sample.target_region;
    let sx = width as f64 / iw;
    let sy = height as f64 / ih;
    let cx = coverage(t.x0 as f64 * sx, t.x1 as f64 * sx, width);
    let cy = coverage(t.y0 as f64 * sy, t.y1 as f64 * sy, height);
    let boxed: Vec<f64> = cy.iter().flat_map(|&a| cx.iter().map(move |&b| a * b)).collect();
    let smoothed = smooth(&boxed, height, width, &gaussian_kernel(ORACLE_SIGMA));
    AttentionMap::new(height, width, min_max_normalize(&smoothed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub target_region: Region,
    pub distractor_region: Option<Region>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# split={} seed={} classes={}\n",
            self.split.as_str(),
            self.seed,
            self.num_classes
        );
        for e in &self.entries {
            let d = e.distractor_region.map_or_else(|| "-".to_string(), |r| r.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.path.display(),
                e.label,
                e.target_region,
                d
            ));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, "line 1", "empty manifest"))?;
        let mut split = None;
        let mut seed = None;
        let mut classes = None;
        for kv in header.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("split", v)) => split = v.parse::<Split>().ok(),
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("classes", v)) => classes = v.parse().ok(),
                _ => {}
            }
        }
        let (Some(split), Some(seed), Some(num_classes)) = (split, seed, classes) else {
            return Err(Error::parse(path, "line 1", "header must carry split=, seed= and classes="));
        };
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let loc = format!("line {}", i + 1);
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::parse(path, loc, format!("expected 5 tab-separated fields, found {}", cols.len())));
            }
            let label: usize = cols[2]
                .parse()
                .map_err(|e| Error::parse(path, &loc, format!("label: {e}")))?;
            if label >= num_classes {
                return Err(Error::parse(path, &loc, format!("label {label} >= classes {num_classes}")));
            }
            let target_region = Region::parse(cols[3])
                .ok_or_else(|| Error::parse(path, &loc, "malformed target box"))?;
            let distractor_region = match cols[4] {
                "-" => None,
                s => Some(Region::parse(s).ok_or_else(|| Error::parse(path, &loc, "malformed distractor box"))?),
            };
            if !seen.insert(cols[0].to_string()) {
                return Err(Error::parse(path, &loc, format!("duplicate id `{}`", cols[0])));
            }
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                path: PathBuf::from(cols[1]),
                label,
                target_region,
                distractor_region,
            });
        }
        Ok(DatasetManifest { split, seed, num_classes, entries })
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::parse(&text, path)
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    image.save(path)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    Image::load(path)
}

/// Writes images under `dir/<split>/` and the manifest to `dir/<split>.tsv`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>, split: Split, seed: u64) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let img_dir = dir.join(split.as_str());
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let rel = PathBuf::from(split.as_str()).join(format!("{}.pgm", s.id));
        s.image.save(dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            path: rel,
            label: s.label,
            target_region: s.target_region,
            distractor_region: s.distractor_region,
        });
    }
    let manifest = DatasetManifest {
        split,
        seed,
        num_classes: dataset.num_classes,
        entries,
    };
    let path = dir.join(format!("{}.tsv", split.as_str()));
    save_manifest(&manifest, &path)?;
    Ok(path)
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .entries
        .into_iter()
        .map(|e| {
            Ok(Sample {
                image: Image::load(base.join(&e.path))?,
                id: e.id,
                label: e.label,
                target_region: e.target_region,
                distractor_region: e.distractor_region,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, num_classes: manifest.num_classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_distractors_at_rate_zero() {
        let d = generate(40, 4, 3, 0.0).unwrap();
        assert!(d.samples.iter().all(|s| s.distractor_region.is_none()));
        let d = generate(40, 4, 3, 1.0).unwrap();
        assert!(d.samples.iter().all(|s| s.distractor_region.is_some()));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(20, 4, 9, 0.5).unwrap(), generate(20, 4, 9, 0.5).unwrap());
        assert_ne!(generate(20, 4, 9, 0.5).unwrap(), generate(20, 4, 10, 0.5).unwrap());
    }

    #[test]
    fn regions_in_bounds_and_disjoint() {
        let d = generate(100, 4, 1, 0.5).unwrap();
        for s in &d.samples {
            assert!(s.target_region.x1 <= IMAGE_SIZE && s.target_region.y1 <= IMAGE_SIZE);
            if let Some(dr) = s.distractor_region {
                assert!(!dr.intersects(&s.target_region));
                assert!(dr.x1 <= IMAGE_SIZE && dr.y1 <= IMAGE_SIZE);
            }
        }
    }

    #[test]
    fn classes_are_balanced() {
        let d = generate(80, 4, 0, 0.5).unwrap();
        for c in 0..4 {
            assert_eq!(d.samples.iter().filter(|s| s.label == c).count(), 20);
        }
    }

    #[test]
    fn bad_arguments_rejected() {
        assert!(generate(0, 4, 0, 0.5).is_err());
        assert!(generate(4, 1, 0, 0.5).is_err());
        assert!(generate(4, 4, 0, 1.5).is_err());
    }

    #[test]
    fn whole_image_target_gives_ones() {
        let mut s = generate(1, 2, 0, 0.0).unwrap().samples.remove(0);
        s.target_region = Region { x0: 0, y0: 0, x1: 64, y1: 64 };
        let m = oracle_map(&s, 16, 16).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn oracle_map_peaks_inside_target_box() {
        for s in generate(40, 4, 5, 0.5).unwrap().samples {
            let m = oracle_map(&s, 16, 16).unwrap();
            let t = s.target_region;
            let inside = |i: usize| {
                let (x, y) = ((i % 16) as f64 * 4.0 + 2.0, (i / 16) as f64 * 4.0 + 2.0);
                t.contains(x, y)
            };
            let peak = (0..256).max_by(|&a, &b| m.values()[a].total_cmp(&m.values()[b])).unwrap();
            assert!(inside(peak), "{}: peak cell {peak} outside {t:?}", s.id);
            let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0, 0.0, 0);
            for (i, &v) in m.values().iter().enumerate() {
                if inside(i) {
                    sum_in += v as f64;
                    n_in += 1;
                } else {
                    sum_out += v as f64;
                    n_out += 1;
                }
            }
            assert!(sum_in / n_in as f64 > 2.0 * sum_out / n_out.max(1) as f64, "{}", s.id);
        }
    }

    #[test]
    fn manifest_rejects_garbage() {
        let p = Path::new("m.tsv");
        assert!(DatasetManifest::parse("", p).is_err());
        assert!(DatasetManifest::parse("# split=train seed=1 classes=4\na\tb\t1\n", p).is_err());
        let e = DatasetManifest::parse("# split=train seed=1 classes=4\na\tb\t9\t0,0,1,1\t-\n", p).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let dup = "# split=test seed=1 classes=4\na\tb\t1\t0,0,1,1\t-\na\tc\t1\t0,0,1,1\t-\n";
        assert!(DatasetManifest::parse(dup, p).is_err());
    }
}
