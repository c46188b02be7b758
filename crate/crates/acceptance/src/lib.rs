//! Reference oracles, gradient checks and the directional experiment used by
//! the acceptance suite.

pub mod gradcheck;
pub mod oracle;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use abn_core::checkpoint::group_checksum;
use abn_core::data::{generate, oracle_map, Dataset};
use abn_core::metrics::{evaluate_model, map_similarity_mse, Baseline, MetricReport, DEFAULT_STEPS};
use abn_core::model::argmax_rows;
use abn_core::train::{
    accuracy, calibrate_gamma, collect_misclassified, finetune_with_maps, predict_dataset, train_abn,
    FinetuneConfig, LossBreakdown, TrainConfig,
};
use abn_core::{build_model, AbnModel, AttentionMap, ModelConfig, ParamGroup, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const SAMPLES: usize = 1000;
pub const TRAIN_SAMPLES: usize = 800;
pub const NUM_CLASSES: usize = 4;
pub const DISTRACTOR_RATE: f64 = 0.5;

/// Uniform values in `[-1, 1]`.
pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Base model plus everything measured before any map editing.
pub struct BaseRun {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub model: AbnModel,
    pub history: Vec<LossBreakdown>,
    pub test_accuracy: f64,
    pub misclassified: usize,
    /// Misclassified training samples whose prediction becomes correct when
    /// the oracle map replaces the produced one.
    pub fixed_by_substitution: usize,
    /// Oracle edits for every misclassified training sample.
    pub edits: HashMap<String, AttentionMap>,
    pub elapsed: Duration,
}

/// Outcome of fine-tuning a [`BaseRun`] on its oracle edits.
pub struct FinetuneRun {
    pub gamma: f64,
    pub model: AbnModel,
    pub history: Vec<LossBreakdown>,
    pub extractor_unchanged: bool,
    pub test_accuracy: f64,
    pub mse_before: f64,
    pub mse_after: f64,
    pub elapsed: Duration,
}

pub fn run_base(seed: u64) -> Result<BaseRun> {
    let start = Instant::now();
    let (train, test) = generate(SAMPLES, NUM_CLASSES, seed, DISTRACTOR_RATE)?.split_at(TRAIN_SAMPLES);
    let mut model = build_model(ModelConfig::default(), seed)?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let history = train_abn(&mut model, &train, &cfg)?;
    let test_accuracy = accuracy(&model, &test)?;
    let (mh, mw) = model.config().map_size;
    let missed = collect_misclassified(&model, &train)?;
    let mut edits = HashMap::new();
    let mut fixed_by_substitution = 0;
    for m in &missed {
        let sample = &train.samples[m.index];
        let oracle = oracle_map(sample, mh, mw)?;
        let logits = model.infer_with_map(&train.images(&[m.index])?, std::slice::from_ref(&oracle))?;
        if argmax_rows(&logits)[0] == sample.label {
            fixed_by_substitution += 1;
        }
        edits.insert(sample.id.clone(), oracle);
    }
    Ok(BaseRun {
        seed,
        train,
        test,
        model,
        history,
        test_accuracy,
        misclassified: missed.len(),
        fixed_by_substitution,
        edits,
        elapsed: start.elapsed(),
    })
}

fn mean_oracle_mse(model: &AbnModel, dataset: &Dataset) -> Result<f64> {
    let (mh, mw) = model.config().map_size;
    let (_, maps) = predict_dataset(model, dataset)?;
    let mut total = 0.0;
    for (map, sample) in maps.iter().zip(&dataset.samples) {
        total += map_similarity_mse(map, &oracle_map(sample, mh, mw)?)?;
    }
    Ok(total / dataset.len() as f64)
}

pub fn run_finetune(base: &BaseRun) -> Result<FinetuneRun> {
    let start = Instant::now();
    let gamma = calibrate_gamma(&base.model, &base.train, &base.edits)?;
    let mut model = base.model.clone();
    let cfg = FinetuneConfig {
        gamma,
        seed: base.seed,
        ..FinetuneConfig::default()
    };
    let history = finetune_with_maps(&mut model, &base.train, &base.edits, &cfg)?;
    let extractor_unchanged =
        group_checksum(&model, ParamGroup::Extractor) == group_checksum(&base.model, ParamGroup::Extractor);
    Ok(FinetuneRun {
        gamma,
        extractor_unchanged,
        test_accuracy: accuracy(&model, &base.test)?,
        mse_before: mean_oracle_mse(&base.model, &base.test)?,
        mse_after: mean_oracle_mse(&model, &base.test)?,
        model,
        history,
        elapsed: start.elapsed(),
    })
}

/// Deletion and insertion sweeps of the base and fine-tuned models on the test set.
pub fn run_xai(base: &BaseRun, tuned: &FinetuneRun) -> Result<(MetricReport, MetricReport)> {
    Ok((
        evaluate_model(&base.model, &base.test, None, DEFAULT_STEPS, Baseline::Mean)?,
        evaluate_model(&tuned.model, &base.test, None, DEFAULT_STEPS, Baseline::Mean)?,
    ))
}
