//! Base training with `L_abn = L_att + L_per` and fine-tuning with
//! `L = L_abn + L_map`, where `L_map = gamma * ||M' - M||_2` pulls the
//! produced attention map `M` toward an edited map `M'`.

use std::collections::HashMap;
use std::io::Write;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::map::{resize_map, AttentionMap};
use crate::model::{argmax_rows, maps_from_tensor, AbnModel, ParamGroup};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 0.1;
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if self.batch_size > dataset_len {
            return Err(Error::InvalidArgument(format!(
                "batch size {} exceeds dataset size {dataset_len}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    pub freeze_extractor: bool,
    /// Train only on samples that have an edited map instead of the full set.
    pub edited_only: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            gamma: DEFAULT_GAMMA,
            epochs: 6,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            freeze_extractor: true,
            edited_only: false,
        }
    }
}

impl FinetuneConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed: self.seed,
        }
    }
}

/// Loss terms of one optimization step, batch-averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_att: f64,
    pub l_per: f64,
    pub l_abn: f64,
    pub l_map: f64,
    pub total: f64,
}

/// `gamma * ||target_i - map_i||_2`, averaged over the batch with per-sample
/// weights (0 drops a sample's term, 1 keeps it).
pub fn loss_map(g: &mut Graph, map: Var, target: Var, gamma: f64, weights: &[f64]) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    let norm = g.weighted_l2_norm_loss(map, target, weights)?;
    Ok(g.scale(norm, gamma))
}

/// Value of [`loss_map`] for two map batches with every sample weighted 1.
pub fn loss_map_value(maps: &[AttentionMap], targets: &[AttentionMap], gamma: f64) -> Result<f64> {
    if maps.len() != targets.len() || maps.is_empty() {
        return Err(Error::shape(
            "loss_map",
            format!("{} maps vs {} targets", maps.len(), targets.len()),
        ));
    }
    let mut g = Graph::new();
    let (m, t) = (stack_maps(&mut g, maps)?, stack_maps(&mut g, targets)?);
    let loss = loss_map(&mut g, m, t, gamma, &vec![1.0; maps.len()])?;
    Ok(g.scalar(loss))
}

fn stack_maps(g: &mut Graph, maps: &[AttentionMap]) -> Result<Var> {
    let (h, w) = maps[0].dims();
    if maps.iter().any(|m| m.dims() != (h, w)) {
        return Err(Error::shape("loss_map", "maps differ in size"));
    }
    let data = maps.iter().flat_map(|m| m.values().iter().map(|&v| v as f64)).collect();
    g.leaf(&[maps.len(), 1, h, w], data, false)
}

/// Per-batch inputs for one step.
struct Batch {
    labels: Vec<usize>,
    /// Either raw images or precomputed (frozen) extractor features.
    input: Tensor,
    input_is_features: bool,
    targets: Option<(Tensor, Vec<f64>)>,
}

fn step(model: &mut AbnModel, batch: &Batch, gamma: f64, opt: &mut OptimizerState) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.tensor(&batch.input);
    let features = if batch.input_is_features {
        x
    } else {
        model.trace_features(&mut g, &bound, x)?
    };
    let (att_logits, map) = model.trace_attention(&mut g, &bound, features)?;
    let attended = model.trace_mechanism(&mut g, features, map)?;
    let per_logits = model.trace_perception(&mut g, &bound, attended)?;
    let l_att = g.softmax_cross_entropy(att_logits, &batch.labels)?;
    let l_per = g.softmax_cross_entropy(per_logits, &batch.labels)?;
    let l_abn = g.add(l_att, l_per)?;
    let (total, l_map) = match &batch.targets {
        Some((targets, weights)) => {
            let t = g.tensor(targets);
            let l_map = loss_map(&mut g, map, t, gamma, weights)?;
            (g.add(l_abn, l_map)?, Some(l_map))
        }
        None => (l_abn, None),
    };
    g.backward(total)?;
    model.accumulate_grads(&g, &bound)?;
    opt.step(model.trainable_mut())?;
    Ok(LossBreakdown {
        l_att: g.scalar(l_att),
        l_per: g.scalar(l_per),
        l_abn: g.scalar(l_abn),
        l_map: l_map.map_or(0.0, |v| g.scalar(v)),
        total: g.scalar(total),
    })
}

fn epoch_order(rng: &mut ChaCha8Rng, indices: &[usize]) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order
}

/// Trains every parameter group on `L_abn`. The step history is
/// deterministic given `cfg.seed`.
pub fn train_abn(model: &mut AbnModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<LossBreakdown>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate(dataset.len())?;
    for grp in ParamGroup::ALL {
        model.set_trainable(grp, true);
    }
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.momentum, model.trainable().map(|p| &p.tensor))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::new();
    for _ in 0..cfg.epochs {
        for chunk in epoch_order(&mut rng, &all).chunks(cfg.batch_size) {
            let batch = Batch {
                labels: dataset.labels(chunk),
                input: dataset.images(chunk)?,
                input_is_features: false,
                targets: None,
            };
            history.push(step(model, &batch, 0.0, &mut opt)?);
        }
    }
    Ok(history)
}

/// Runs the extractor alone over `indices`, batched.
fn extract_features(model: &AbnModel, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let bound = model.bind_frozen(&mut g);
        let x = g.tensor(&dataset.images(chunk)?);
        let f = model.trace_features(&mut g, &bound, x)?;
        let t = g.to_tensor(f);
        for i in 0..chunk.len() {
            out.push(t.batch_item(i)?);
        }
    }
    Ok(out)
}

/// Fine-tunes the attention and perception branches on `L_abn + L_map`.
///
/// `edited` maps sample ids to edited maps; samples without one contribute
/// no map term. With `freeze_extractor` the extractor parameters are left
/// bit-identical (its features are computed once up front).
pub fn finetune_with_maps(
    model: &mut AbnModel,
    dataset: &Dataset,
    edited: &HashMap<String, AttentionMap>,
    cfg: &FinetuneConfig,
) -> Result<Vec<LossBreakdown>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mh, mw) = model.config().map_size;
    let mut targets: Vec<Option<AttentionMap>> = vec![None; dataset.len()];
    for (id, map) in edited {
        let idx = dataset.index_of(id).ok_or_else(|| Error::UnknownSample(id.clone()))?;
        targets[idx] = Some(resize_map(map, mh, mw)?);
    }
    let pool: Vec<usize> = if cfg.edited_only {
        (0..dataset.len()).filter(|&i| targets[i].is_some()).collect()
    } else {
        (0..dataset.len()).collect()
    };
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no edited samples to fine-tune on".into()));
    }
    let tcfg = cfg.train_config();
    tcfg.validate(pool.len())?;
    if !(cfg.gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {}", cfg.gamma)));
    }

    model.set_trainable(ParamGroup::Extractor, !cfg.freeze_extractor);
    model.set_trainable(ParamGroup::Attention, true);
    model.set_trainable(ParamGroup::Perception, true);
    let features = if cfg.freeze_extractor {
        let all: Vec<usize> = (0..dataset.len()).collect();
        Some(extract_features(model, dataset, &all)?)
    } else {
        None
    };

    let result = (|| {
        let mut opt = OptimizerState::new(tcfg.learning_rate, tcfg.momentum, model.trainable().map(|p| &p.tensor))?;
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        let mut history = Vec::new();
        for _ in 0..tcfg.epochs {
            for chunk in epoch_order(&mut rng, &pool).chunks(tcfg.batch_size) {
                let mut data = Vec::with_capacity(chunk.len() * mh * mw);
                let mut weights = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    match &targets[i] {
                        Some(m) => {
                            data.extend_from_slice(m.values());
                            weights.push(1.0);
                        }
                        None => {
                            data.extend(std::iter::repeat_n(0.0, mh * mw));
                            weights.push(0.0);
                        }
                    }
                }
                let (input, input_is_features) = match &features {
                    Some(f) => (Tensor::stack(&chunk.iter().map(|&i| f[i].clone()).collect::<Vec<_>>())?, true),
                    None => (dataset.images(chunk)?, false),
                };
                let batch = Batch {
                    labels: dataset.labels(chunk),
                    input,
                    input_is_features,
                    targets: Some((Tensor::new(vec![chunk.len(), 1, mh, mw], data)?, weights)),
                    };
                history.push(step(model, &batch, cfg.gamma, &mut opt)?);
            }
        }
        Ok(history)
    })();
    model.set_trainable(ParamGroup::Extractor, true);
    result
}

/// A training sample whose top-1 prediction disagrees with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Misclassified {
    pub sample_id: String,
    pub index: usize,
    pub attention_map: AttentionMap,
    pub predicted: usize,
    pub label: usize,
}

/// Perception-branch predictions and produced maps for every sample.
pub fn predict_dataset(model: &AbnModel, dataset: &Dataset) -> Result<(Vec<usize>, Vec<AttentionMap>)> {
    let mut preds = Vec::with_capacity(dataset.len());
    let mut maps = Vec::with_capacity(dataset.len());
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let out = model.forward(&dataset.images(chunk)?)?;
        preds.extend(argmax_rows(&out.per_logits));
        maps.extend(maps_from_tensor(&out.attention_map));
    }
    Ok((preds, maps))
}

pub fn accuracy(model: &AbnModel, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (preds, _) = predict_dataset(model, dataset)?;
    let correct = preds.iter().zip(&dataset.samples).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / dataset.len() as f64)
}

pub fn collect_misclassified(model: &AbnModel, dataset: &Dataset) -> Result<Vec<Misclassified>> {
    let (preds, maps) = predict_dataset(model, dataset)?;
    Ok(preds
        .into_iter()
        .zip(maps)
        .zip(&dataset.samples)
        .enumerate()
        .filter(|(_, ((p, _), s))| *p != s.label)
        .map(|(index, ((predicted, attention_map), s))| Misclassified {
            sample_id: s.id.clone(),
            index,
            attention_map,
            predicted,
            label: s.label,
        })
        .collect())
}

/// Gamma that makes the mean map term match the mean per-branch
/// classification loss over the edited samples at the current parameters.
pub fn calibrate_gamma(model: &AbnModel, dataset: &Dataset, edited: &HashMap<String, AttentionMap>) -> Result<f64> {
    let (mh, mw) = model.config().map_size;
    let mut ids: Vec<&String> = edited.keys().collect();
    ids.sort();
    let indices = ids
        .iter()
        .map(|id| dataset.index_of(id).ok_or_else(|| Error::UnknownSample((*id).clone())))
        .collect::<Result<Vec<_>>>()?;
    if indices.is_empty() {
        return Err(Error::InvalidArgument("no edited maps to calibrate on".into()));
    }
    let (mut ce, mut norm) = (0.0, 0.0);
    for (chunk_ids, chunk) in ids.chunks(EVAL_BATCH).zip(indices.chunks(EVAL_BATCH)) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let x = g.tensor(&dataset.images(chunk)?);
        let vars = model.trace(&mut g, &bound, x, None)?;
        let labels = dataset.labels(chunk);
        let l_att = g.softmax_cross_entropy(vars.att_logits, &labels)?;
        let l_per = g.softmax_cross_entropy(vars.per_logits, &labels)?;
        ce += (g.scalar(l_att) + g.scalar(l_per)) / 2.0 * chunk.len() as f64;
        let targets: Vec<AttentionMap> = chunk_ids
            .iter()
            .map(|id| resize_map(&edited[*id], mh, mw))
            .collect::<Result<_>>()?;
        let t = stack_maps(&mut g, &targets)?;
        let l2 = g.l2_norm_loss(vars.map, t)?;
        norm += g.scalar(l2) * chunk.len() as f64;
    }
    if norm == 0.0 {
        return Ok(DEFAULT_GAMMA);
    }
    Ok(ce / norm)
}

pub fn write_history_csv(history: &[LossBreakdown], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,l_att,l_per,l_abn,l_map,total")?;
    for (i, h) in history.iter().enumerate() {
        writeln!(out, "{i},{},{},{},{},{}", h.l_att, h.l_per, h.l_abn, h.l_map, h.total)?;
    }
    Ok(())
}
