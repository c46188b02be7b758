//! Deletion and insertion curves, map similarity, and dataset-level reports.

use std::collections::HashMap;
use std::io::Write;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::map::{resize_map, AttentionMap};
use crate::model::{softmax, AbnModel};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 50;
const SCORE_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub fraction_modified: f64,
    pub class_score: f64,
}

/// Value that stands in for a removed (or not yet inserted) pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Baseline {
    /// Per-channel mean intensity of the evaluated dataset.
    #[default]
    Mean,
    Zero,
    Gray,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Mean => "mean",
            Baseline::Zero => "zero",
            Baseline::Gray => "gray",
        }
    }

    /// Per-channel fill values for `dataset`.
    pub fn values(self, dataset: &Dataset) -> Vec<f32> {
        let channels = dataset.samples.first().map_or(1, |s| s.image.channels());
        match self {
            Baseline::Mean => dataset.mean_intensity(),
            Baseline::Zero => vec![0.0; channels],
            Baseline::Gray => vec![0.5; channels],
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Baseline::Mean),
            "zero" => Ok(Baseline::Zero),
            "gray" => Ok(Baseline::Gray),
            other => Err(Error::InvalidArgument(format!("unknown baseline `{other}`"))),
        }
    }
}

/// Pixel indices in descending map value, ties broken by raster order.
pub fn pixel_order(map: &AttentionMap) -> Vec<usize> {
    let v = map.values();
    let mut order: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps raster order among equal values
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    order
}

/// Number of pixels modified after step `k` of `steps`.
fn modified_count(k: usize, steps: usize, pixels: usize) -> usize {
    k * pixels / steps
}

/// Trapezoidal area under a curve.
pub fn auc(curve: &[CurvePoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fraction_modified - w[0].fraction_modified) * (w[0].class_score + w[1].class_score) / 2.0)
        .sum()
}

fn check_args(model: &AbnModel, image: &Tensor, steps: usize, class: usize, baseline: &[f32]) -> Result<()> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("steps must be >= 2, got {steps}")));
    }
    let classes = model.config().num_classes;
    if class >= classes {
        return Err(Error::LabelOutOfRange { label: class, classes });
    }
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape("deletion/insertion", format!("expected one [1, C, H, W] image, got {s:?}")));
    }
    if baseline.len() != s[1] {
        return Err(Error::shape(
            "deletion/insertion",
            format!("{} baseline values for {} channels", baseline.len(), s[1]),
        ));
    }
    Ok(())
}

/// Softmax probability of `class` from the perception logits of each image.
fn class_scores(model: &AbnModel, images: &[Tensor], class: usize) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(images.len());
    for chunk in images.chunks(SCORE_BATCH) {
        let logits = model.forward(&Tensor::stack(chunk)?)?.per_logits;
        let c = logits.shape()[1];
        scores.extend(logits.data().chunks(c).map(|row| softmax(row)[class]));
    }
    Ok(scores)
}

/// Builds the `steps + 1` images of a sweep. `start` is the image at fraction
/// 0; pixels are copied from `fill` in `order`.
fn sweep_images(start: &Tensor, fill: &Tensor, order: &[usize], steps: usize) -> Vec<Tensor> {
    let s = start.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut current = start.clone();
    let mut out = vec![current.clone()];
    let mut done = 0;
    for k in 1..=steps {
        let upto = modified_count(k, steps, plane);
        for &p in &order[done..upto] {
            for ch in 0..c {
                current.data_mut()[ch * plane + p] = fill.data()[ch * plane + p];
            }
        }
        done = upto;
        out.push(current.clone());
    }
    out
}

fn baseline_image(image: &Tensor, baseline: &[f32]) -> Tensor {
    let s = image.shape();
    let plane = s[2] * s[3];
    let data = baseline.iter().flat_map(|&b| std::iter::repeat_n(b, plane)).collect();
    Tensor::new(s.to_vec(), data).expect("same shape as image")
}

fn run_sweep(
    model: &AbnModel,
    image: &Tensor,
    map: &AttentionMap,
    steps: usize,
    class: usize,
    baseline: &[f32],
    insert: bool,
) -> Result<(f64, Vec<CurvePoint>)> {
    check_args(model, image, steps, class, baseline)?;
    let s = image.shape();
    let order = pixel_order(&resize_map(map, s[2], s[3])?);
    let base = baseline_image(image, baseline);
    let images = if insert {
        sweep_images(&base, image, &order, steps)
    } else {
        sweep_images(image, &base, &order, steps)
    };
    let scores = class_scores(model, &images, class)?;
    let curve: Vec<CurvePoint> = scores
        .into_iter()
        .enumerate()
        .map(|(k, class_score)| CurvePoint {
            fraction_modified: k as f64 / steps as f64,
            class_score,
        })
        .collect();
    Ok((auc(&curve), curve))
}

/// Class score as the highest-ranked pixels of `map` are replaced by the baseline.
/// `image` is a single `[1, C, H, W]` tensor; `map` is resized to `H x W`.
pub fn deletion_score(
    model: &AbnModel,
    image: &Tensor,
    map: &AttentionMap,
    steps: usize,
    class: usize,
    baseline: &[f32],
) -> Result<(f64, Vec<CurvePoint>)> {
    run_sweep(model, image, map, steps, class, baseline, false)
}

/// Class score as the highest-ranked pixels of `map` are restored onto a baseline image.
pub fn insertion_score(
    model: &AbnModel,
    image: &Tensor,
    map: &AttentionMap,
    steps: usize,
    class: usize,
    baseline: &[f32],
) -> Result<(f64, Vec<CurvePoint>)> {
    run_sweep(model, image, map, steps, class, baseline, true)
}

pub fn map_similarity_mse(produced: &AttentionMap, reference: &AttentionMap) -> Result<f64> {
    if produced.dims() != reference.dims() {
        return Err(Error::shape(
            "map_similarity_mse",
            format!("{:?} vs {:?}", produced.dims(), reference.dims()),
        ));
    }
    let sum: f64 = produced
        .values()
        .iter()
        .zip(reference.values())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / produced.values().len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub deletion_auc: f64,
    pub insertion_auc: f64,
    pub map_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub deletion_auc: f64,
    pub insertion_auc: f64,
    /// Mean over the samples that have a reference map; `None` without references.
    pub map_mse: Option<f64>,
    /// Sorted by sample id.
    pub rows: Vec<MetricRow>,
    pub curves: HashMap<String, (Vec<CurvePoint>, Vec<CurvePoint>)>,
}

impl MetricReport {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "sample_id,deletion_auc,insertion_auc,map_mse")?;
        for r in &self.rows {
            let mse = r.map_mse.map(|m| m.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.sample_id, r.deletion_auc, r.insertion_auc, mse)?;
        }
        Ok(())
    }
}

pub fn write_curve_csv(curve: &[CurvePoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "fraction,score")?;
    for p in curve {
        writeln!(out, "{},{}", p.fraction_modified, p.class_score)?;
    }
    Ok(())
}

/// Deletion and insertion AUCs of the model's own attention maps, evaluated
/// on the true class of every sample, plus MSE against `reference_maps`
/// (keyed by sample id) where present.
pub fn evaluate_model(
    model: &AbnModel,
    dataset: &Dataset,
    reference_maps: Option<&HashMap<String, AttentionMap>>,
    steps: usize,
    baseline: Baseline,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let fill = baseline.values(dataset);
    let mut rows = Vec::with_capacity(dataset.len());
    let mut curves = HashMap::new();
    for (i, sample) in dataset.samples.iter().enumerate() {
        let image = dataset.images(&[i])?;
        let map = model.forward(&image)?.maps().remove(0);
        let (del, del_curve) = deletion_score(model, &image, &map, steps, sample.label, &fill)?;
        let (ins, ins_curve) = insertion_score(model, &image, &map, steps, sample.label, &fill)?;
        let map_mse = match reference_maps.and_then(|r| r.get(&sample.id)) {
            Some(reference) => {
                let reference = resize_map(reference, map.height(), map.width())?;
                Some(map_similarity_mse(&map, &reference)?)
            }
            None => None,
        };
        rows.push(MetricRow {
            sample_id: sample.id.clone(),
            deletion_auc: del,
            insertion_auc: ins,
            map_mse,
        });
        curves.insert(sample.id.clone(), (del_curve, ins_curve));
    }
    rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let n = rows.len() as f64;
    let mses: Vec<f64> = rows.iter().filter_map(|r| r.map_mse).collect();
    Ok(MetricReport {
        deletion_auc: rows.iter().map(|r| r.deletion_auc).sum::<f64>() / n,
        insertion_auc: rows.iter().map(|r| r.insertion_auc).sum::<f64>() / n,
        map_mse: (!mses.is_empty()).then(|| mses.iter().sum::<f64>() / mses.len() as f64),
        rows,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn small_model() -> AbnModel {
        let cfg = ModelConfig {
            input_size: (8, 8),
            extractor_channels: vec![4, 4],
            map_size: (4, 4),
            attention_channels: 4,
            perception_channels: vec![4],
            ..ModelConfig::default()
        };
        build_model(cfg, 3).unwrap()
    }

    fn ramp_image() -> Tensor {
        Tensor::new(vec![1, 1, 8, 8], (0..64).map(|i| i as f32 / 63.0).collect()).unwrap()
    }

    #[test]
    fn trapezoid_by_hand() {
        let pts = |s: [f64; 3]| {
            s.iter()
                .enumerate()
                .map(|(k, &c)| CurvePoint { fraction_modified: k as f64 / 2.0, class_score: c })
                .collect::<Vec<_>>()
        };
        let (s0, s1, s2) = (0.9, 0.4, 0.1);
        assert!((auc(&pts([s0, s1, s2])) - (0.25 * s0 + 0.5 * s1 + 0.25 * s2)).abs() < 1e-12);
    }

    #[test]
    fn ties_keep_raster_order() {
        let m = AttentionMap::new(2, 2, vec![0.5, 0.9, 0.5, 0.9]).unwrap();
        assert_eq!(pixel_order(&m), vec![1, 3, 0, 2]);
    }

    #[test]
    fn curves_have_steps_plus_one_points_and_full_endpoints() {
        let model = small_model();
        let image = ramp_image();
        let map = AttentionMap::new(4, 4, (0..16).map(|i| i as f32 / 15.0).collect()).unwrap();
        let (_, del) = deletion_score(&model, &image, &map, 5, 2, &[0.3]).unwrap();
        let (_, ins) = insertion_score(&model, &image, &map, 5, 2, &[0.3]).unwrap();
        assert_eq!(del.len(), 6);
        assert_eq!(ins.len(), 6);
        let plain = softmax(model.forward(&image).unwrap().per_logits.data())[2];
        assert!((ins[5].class_score - plain).abs() < 1e-12);
        assert!((del[0].class_score - plain).abs() < 1e-12);
        assert!((del[5].class_score - ins[0].class_score).abs() < 1e-12);
    }

    #[test]
    fn bad_arguments_rejected() {
        let model = small_model();
        let map = AttentionMap::filled(4, 4, 0.5).unwrap();
        assert!(deletion_score(&model, &ramp_image(), &map, 1, 0, &[0.0]).is_err());
        assert!(matches!(
            insertion_score(&model, &ramp_image(), &map, 4, 4, &[0.0]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn mse_extremes() {
        let z = AttentionMap::filled(3, 3, 0.0).unwrap();
        let o = AttentionMap::filled(3, 3, 1.0).unwrap();
        assert_eq!(map_similarity_mse(&z, &o).unwrap(), 1.0);
        assert_eq!(map_similarity_mse(&o, &o).unwrap(), 0.0);
        assert!(map_similarity_mse(&z, &AttentionMap::filled(2, 3, 0.0).unwrap()).is_err());
    }
}
