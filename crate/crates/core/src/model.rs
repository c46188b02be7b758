//! Attention branch network: a shared feature extractor, an attention branch
//! that emits class logits and a single-channel attention map, the attention
//! mechanism that reweights the features with that map, and a perception
//! branch that produces the final logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::map::{resize_map, AttentionMap};
use crate::tensor::Tensor;

/// How the attention map is applied to the extracted features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mechanism {
    /// `g' = (1 + M) * g`
    #[default]
    Residual,
    /// `g' = M * g`
    Product,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Residual => "residual",
            Mechanism::Product => "product",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(Mechanism::Residual),
            "product" => Ok(Mechanism::Product),
            other => Err(Error::InvalidArgument(format!("unknown mechanism `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub num_classes: usize,
    /// Output channels of each 3x3 extractor stage.
    pub extractor_channels: Vec<usize>,
    pub map_size: (usize, usize),
    /// Width `K` of the attention branch's class-response feature map.
    pub attention_channels: usize,
    /// Output channels of the perception branch's 3x3 convolutions.
    pub perception_channels: Vec<usize>,
    pub mechanism: Mechanism,
}

impl Default for ModelConfig {
    /// 64x64 grayscale input, four classes, 16x16 attention map.
    fn default() -> Self {
        ModelConfig {
            input_size: (64, 64),
            input_channels: 1,
            num_classes: 4,
            extractor_channels: vec![8, 16, 16],
            map_size: (16, 16),
            attention_channels: 8,
            perception_channels: vec![16, 32],
            mechanism: Mechanism::Residual,
        }
    }
}

impl ModelConfig {
    /// Stride of each extractor stage: stride 2 until the map size is reached, then 1.
    pub fn extractor_strides(&self) -> Result<Vec<usize>> {
        let bad = |why: String| Err(Error::InvalidArgument(format!("model config: {why}")));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.attention_channels < self.num_classes {
            return bad(format!(
                "attention channels K={} must be >= classes C={}",
                self.attention_channels, self.num_classes
            ));
        }
        if self.input_channels == 0
            || self.extractor_channels.is_empty()
            || self.perception_channels.is_empty()
            || self.extractor_channels.iter().chain(&self.perception_channels).any(|&c| c == 0)
        {
            return bad("channel lists must be nonempty and positive".into());
        }
        let (ih, iw) = self.input_size;
        let (mh, mw) = self.map_size;
        if mh == 0 || mw == 0 || ih % mh != 0 || iw % mw != 0 || ih / mh != iw / mw {
            return bad(format!(
                "map size {mh}x{mw} is not an isotropic integer reduction of input {ih}x{iw}"
            ));
        }
        let ratio = ih / mh;
        if !ratio.is_power_of_two() {
            return bad(format!("input/map ratio {ratio} is not a power of two"));
        }
        let halvings = ratio.trailing_zeros() as usize;
        if halvings > self.extractor_channels.len() {
            return bad(format!(
                "ratio {ratio} needs {halvings} stride-2 stages, extractor has {}",
                self.extractor_channels.len()
            ));
        }
        Ok((0..self.extractor_channels.len())
            .map(|i| if i < halvings { 2 } else { 1 })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor_strides().map(|_| ())
    }

    fn feature_channels(&self) -> usize {
        *self.extractor_channels.last().expect("validated")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Extractor,
    Attention,
    Perception,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Extractor, ParamGroup::Attention, ParamGroup::Perception];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbnModel {
    config: ModelConfig,
    extractor: Vec<Param>,
    attention: Vec<Param>,
    perception: Vec<Param>,
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub att_logits: Tensor,
    /// `[N, 1, h, w]`, values in `[0, 1]`.
    pub attention_map: Tensor,
    pub per_logits: Tensor,
}

impl ForwardResult {
    pub fn maps(&self) -> Vec<AttentionMap> {
        maps_from_tensor(&self.attention_map)
    }
}

pub(crate) fn maps_from_tensor(t: &Tensor) -> Vec<AttentionMap> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    t.data()
        .chunks(h * w)
        .map(|c| AttentionMap::from_clamped(h, w, c.to_vec()))
        .collect()
}

/// Graph handles for a model's parameters, grouped like the model.
pub struct Bound {
    groups: [Vec<Var>; 3],
}

/// Graph handles for the intermediate results of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub att_logits: Var,
    pub map: Var,
    pub attended: Var,
    pub per_logits: Var,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn conv_params(rng: &mut ChaCha8Rng, prefix: &str, out: usize, inp: usize, k: usize) -> [Param; 2] {
    [
        Param {
            name: format!("{prefix}.weight"),
            tensor: he_uniform(rng, &[out, inp, k, k], inp * k * k).with_grad(true),
        },
        Param {
            name: format!("{prefix}.bias"),
            tensor: Tensor::zeros(&[out]).with_grad(true),
        },
    ]
}

fn linear_params(rng: &mut ChaCha8Rng, prefix: &str, inp: usize, out: usize) -> [Param; 2] {
    [
        Param {
            name: format!("{prefix}.weight"),
            tensor: he_uniform(rng, &[inp, out], inp).with_grad(true),
        },
        Param {
            name: format!("{prefix}.bias"),
            tensor: Tensor::zeros(&[out]).with_grad(true),
        },
    ]
}

/// Deterministic He-uniform initialization with zero biases.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<AbnModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extractor = Vec::new();
    let mut prev = config.input_channels;
    for (i, &ch) in config.extractor_channels.iter().enumerate() {
        extractor.extend(conv_params(&mut rng, &format!("extractor.conv{i}"), ch, prev, 3));
        prev = ch;
    }
    let (f, k, c) = (config.feature_channels(), config.attention_channels, config.num_classes);
    let mut attention = Vec::new();
    attention.extend(conv_params(&mut rng, "attention.conv", f, f, 3));
    attention.extend(conv_params(&mut rng, "attention.response", k, f, 1));
    attention.extend(linear_params(&mut rng, "attention.fc", k, c));
    attention.extend(conv_params(&mut rng, "attention.map", 1, k, 1));
    let mut perception = Vec::new();
    let mut prev = f;
    for (i, &ch) in config.perception_channels.iter().enumerate() {
        perception.extend(conv_params(&mut rng, &format!("perception.conv{i}"), ch, prev, 3));
        prev = ch;
    }
    perception.extend(linear_params(&mut rng, "perception.fc", prev, c));
    Ok(AbnModel {
        config,
        extractor,
        attention,
        perception,
    })
}

impl AbnModel {
    pub(crate) fn from_parts(
        config: ModelConfig,
        extractor: Vec<Param>,
        attention: Vec<Param>,
        perception: Vec<Param>,
    ) -> Result<Self> {
        let reference = build_model(config.clone(), 0)?;
        let parts = [&extractor, &attention, &perception];
        for (got, want) in parts.iter().zip(ParamGroup::ALL.map(|g| reference.group(g))) {
            if got.len() != want.len()
                || got
                    .iter()
                    .zip(want)
                    .any(|(a, b)| a.name != b.name || a.tensor.shape() != b.tensor.shape())
            {
                return Err(Error::InvalidArgument(
                    "parameters do not match the architecture described by the config".into(),
                ));
            }
        }
        Ok(AbnModel {
            config,
            extractor,
            attention,
            perception,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn group(&self, group: ParamGroup) -> &[Param] {
        match group {
            ParamGroup::Extractor => &self.extractor,
            ParamGroup::Attention => &self.attention,
            ParamGroup::Perception => &self.perception,
        }
    }

    fn group_mut(&mut self, group: ParamGroup) -> &mut Vec<Param> {
        match group {
            ParamGroup::Extractor => &mut self.extractor,
            ParamGroup::Attention => &mut self.attention,
            ParamGroup::Perception => &mut self.perception,
        }
    }

    /// All parameters in declaration order: extractor, attention, perception.
    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.extractor.iter().chain(&self.attention).chain(&self.perception)
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.tensor.numel()).sum()
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.group_mut(group) {
            p.tensor.set_requires_grad(trainable);
        }
    }

    /// Parameters that currently require gradients.
    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params().filter(|p| p.tensor.requires_grad())
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.extractor
            .iter_mut()
            .chain(self.attention.iter_mut())
            .chain(self.perception.iter_mut())
            .filter(|p| p.tensor.requires_grad())
            .map(|p| (p.name.as_str(), &mut p.tensor))
    }

    /// Inserts every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let groups = ParamGroup::ALL.map(|grp| self.group(grp).iter().map(|p| g.tensor(&p.tensor)).collect());
        Bound { groups }
    }

    /// Adds the graph gradients of every trainable parameter into its tensor.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        for (gi, grp) in ParamGroup::ALL.into_iter().enumerate() {
            for (p, &v) in self.group_mut(grp).iter_mut().zip(&bound.groups[gi]) {
                if !p.tensor.requires_grad() {
                    continue;
                }
                match g.grad(v) {
                    Some(grad) => p.tensor.accumulate_grad(grad)?,
                    None => p.tensor.accumulate_grad(&vec![0.0; p.tensor.numel()])?,
                }
            }
        }
        Ok(())
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let want = [c.input_channels, c.input_size.0, c.input_size.1];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape(
                "forward",
                format!("images {shape:?}, model expects [N, {}, {}, {}]", want[0], want[1], want[2]),
            ));
        }
        Ok(())
    }

    /// Records the extractor on the graph and returns the feature map `g`.
    pub fn trace_features(&self, g: &mut Graph, bound: &Bound, images: Var) -> Result<Var> {
        self.check_images(g.shape(images))?;
        let strides = self.config.extractor_strides()?;
        let p = &bound.groups[0];
        let mut x = images;
        for (i, stride) in strides.into_iter().enumerate() {
            x = g.conv2d(x, p[2 * i], p[2 * i + 1], stride, 1)?;
            x = g.relu(x);
        }
        Ok(x)
    }

    /// Attention branch on features: returns `(att_logits, map)`.
    pub fn trace_attention(&self, g: &mut Graph, bound: &Bound, features: Var) -> Result<(Var, Var)> {
        let p = &bound.groups[1];
        let x = g.conv2d(features, p[0], p[1], 1, 1)?;
        let x = g.relu(x);
        let response = g.conv2d(x, p[2], p[3], 1, 0)?;
        let response = g.relu(response);
        let pooled = g.global_average_pool(response)?;
        let att_logits = g.linear(pooled, p[4], p[5])?;
        let raw = g.conv2d(response, p[6], p[7], 1, 0)?;
        let map = g.sigmoid(raw);
        Ok((att_logits, map))
    }

    /// Applies the attention mechanism and returns the reweighted features.
    pub fn trace_mechanism(&self, g: &mut Graph, features: Var, map: Var) -> Result<Var> {
        match self.config.mechanism {
            Mechanism::Residual => {
                let scale = g.add_scalar(map, 1.0);
                g.mul(scale, features)
            }
            Mechanism::Product => g.mul(map, features),
        }
    }

    pub fn trace_perception(&self, g: &mut Graph, bound: &Bound, attended: Var) -> Result<Var> {
        let p = &bound.groups[2];
        let mut x = attended;
        for i in 0..self.config.perception_channels.len() {
            let stride = if i == 0 { 2 } else { 1 };
            x = g.conv2d(x, p[2 * i], p[2 * i + 1], stride, 1)?;
            x = g.relu(x);
        }
        let pooled = g.global_average_pool(x)?;
        let n = p.len();
        g.linear(pooled, p[n - 2], p[n - 1])
    }

    /// Full forward pass on the graph. `map_override`, when given, replaces
    /// the produced map in the attention mechanism.
    pub fn trace(&self, g: &mut Graph, bound: &Bound, images: Var, map_override: Option<Var>) -> Result<ForwardVars> {
        let features = self.trace_features(g, bound, images)?;
        let (att_logits, produced) = self.trace_attention(g, bound, features)?;
        let map = match map_override {
            Some(m) => {
                let want = [g.shape(features)[0], 1, self.config.map_size.0, self.config.map_size.1];
                if g.shape(m) != want {
                    return Err(Error::shape(
                        "infer_with_map",
                        format!("map {:?}, expected {want:?}", g.shape(m)),
                    ));
                }
                m
            }
            None => produced,
        };
        let attended = self.trace_mechanism(g, features, map)?;
        let per_logits = self.trace_perception(g, bound, attended)?;
        Ok(ForwardVars {
            features,
            att_logits,
            map,
            attended,
            per_logits,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<ForwardResult> {
        self.run(images, None)
    }

    /// Re-infers with externally supplied maps in place of the produced ones.
    /// Maps at another resolution are resized to the map size first; the
    /// attention-branch logits are those of the unmodified pass.
    pub fn forward_with_maps(&self, images: &Tensor, maps: &[AttentionMap]) -> Result<ForwardResult> {
        let n = images.shape().first().copied().unwrap_or(0);
        if maps.len() != n {
            return Err(Error::shape(
                "infer_with_map",
                format!("{} maps for a batch of {n}", maps.len()),
            ));
        }
        let (h, w) = self.config.map_size;
        let mut data = Vec::with_capacity(n * h * w);
        for m in maps {
            // AttentionMap construction already rejects values outside [0, 1]
            data.extend_from_slice(resize_map(m, h, w)?.values());
        }
        let map = Tensor::new(vec![n, 1, h, w], data)?;
        self.run(images, Some(&map))
    }

    pub fn infer_with_map(&self, images: &Tensor, maps: &[AttentionMap]) -> Result<Tensor> {
        Ok(self.forward_with_maps(images, maps)?.per_logits)
    }

    fn run(&self, images: &Tensor, map: Option<&Tensor>) -> Result<ForwardResult> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let x = g.tensor(images);
        let features = self.trace_features(&mut g, &bound, x)?;
        let (att_logits, produced) = self.trace_attention(&mut g, &bound, features)?;
        // the produced map goes through f32 storage exactly like a substituted
        // one, so re-inferring with an unchanged map reproduces the logits
        let attention_map = match map {
            Some(t) => {
                let want = [g.shape(features)[0], 1, self.config.map_size.0, self.config.map_size.1];
                if t.shape() != want {
                    return Err(Error::shape(
                        "infer_with_map",
                        format!("map {:?}, expected {want:?}", t.shape()),
                    ));
                }
                t.clone()
            }
            None => g.to_tensor(produced),
        };
        let m = g.tensor(&attention_map);
        let attended = self.trace_mechanism(&mut g, features, m)?;
        let per_logits = self.trace_perception(&mut g, &bound, attended)?;
        Ok(ForwardResult {
            att_logits: g.to_tensor(att_logits),
            attention_map,
            per_logits: g.to_tensor(per_logits),
        })
    }

    /// Binds parameters without gradient tracking, for inference.
    pub(crate) fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let groups = ParamGroup::ALL.map(|grp| {
            self.group(grp)
                .iter()
                .map(|p| {
                    let v = p.tensor.data().iter().map(|&x| x as f64).collect();
                    g.leaf(p.tensor.shape(), v, false).expect("param shape")
                })
                .collect()
        });
        Bound { groups }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probability: f32,
}

/// Softmax row probabilities.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Top-`k` classes by softmax probability; ties go to the lower class index.
/// `k` larger than the class count is truncated.
pub fn predict_topk(logits: &[f32], k: usize) -> Vec<Prediction> {
    let probs = softmax(logits);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|class| Prediction {
            class,
            probability: probs[class] as f32,
        })
        .collect()
}

/// Index of the largest logit per row (first wins on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
