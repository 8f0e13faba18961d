//! Hybrid classifier: a width-scaled MobileNetV1-style backbone produces a
//! feature vector, the vector is repeated into a constant sequence, a GRU
//! consumes it, and the final hidden state feeds a fully connected head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::check::{relative_error, GradCheck, RELATIVE_FLOOR};
use crate::numerics::{softmax_rows, BatchStats, Graph, Tensor, Var};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;

/// `(output channels, stride)` of the depthwise-separable blocks of MobileNetV1.
pub const MOBILENET_V1_BLOCKS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];
pub const MOBILENET_V1_STEM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_classes: usize,
    /// Square input side in pixels.
    pub input_size: usize,
    pub feature_dim: usize,
    pub seq_len: usize,
    pub gru_units: usize,
    pub fc_units: usize,
    /// Hidden fully connected layers between the GRU and the output layer.
    pub fc_layers: usize,
    pub activation: Activation,
    pub dropout_p: f64,
    /// Parameter-name prefix → L2 coefficient, applied to kernels only.
    pub l2_scopes: BTreeMap<String, f64>,
    pub backbone_width: f64,
    /// How many of the 13 depthwise-separable blocks to keep.
    pub backbone_blocks: usize,
    /// Project pooled backbone features to `feature_dim` with a dense layer.
    /// Without it `feature_dim` must equal the last block's width.
    pub project_features: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 2,
            input_size: crate::scalogram::IMAGE_SIZE,
            feature_dim: 1280,
            seq_len: 49,
            gru_units: 128,
            fc_units: 128,
            fc_layers: 1,
            activation: Activation::Relu,
            dropout_p: 0.0,
            l2_scopes: BTreeMap::new(),
            backbone_width: 1.0,
            backbone_blocks: 13,
            project_features: true,
        }
    }
}

impl ModelConfig {
    /// Channel count after width scaling.
    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.backbone_width).round() as usize).max(1)
    }

    pub fn stem_channels(&self) -> usize {
        self.scaled(MOBILENET_V1_STEM)
    }

    /// `(input channels, output channels, stride)` of every kept block.
    pub fn blocks(&self) -> Vec<(usize, usize, usize)> {
        let mut c_in = self.stem_channels();
        MOBILENET_V1_BLOCKS[..self.backbone_blocks]
            .iter()
            .map(|&(c, s)| {
                let c_out = self.scaled(c);
                let b = (c_in, c_out, s);
                c_in = c_out;
                b
            })
            .collect()
    }

    pub fn backbone_channels(&self) -> usize {
        self.blocks().last().map_or(self.stem_channels(), |b| b.1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return fail(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.seq_len == 0 || self.gru_units == 0 || self.fc_units == 0 || self.feature_dim == 0 {
            return fail("seq_len, gru_units, fc_units and feature_dim must be positive".into());
        }
        if self.backbone_blocks > MOBILENET_V1_BLOCKS.len() {
            return fail(format!("at most {} backbone blocks", MOBILENET_V1_BLOCKS.len()));
        }
        if !(self.backbone_width > 0.0 && self.backbone_width.is_finite()) {
            return fail(format!("backbone_width must be positive, got {}", self.backbone_width));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.input_size < 2 {
            return fail("input_size too small".into());
        }
        if !self.project_features && self.feature_dim != self.backbone_channels() {
            return fail(format!(
                "feature_dim {} does not match backbone width {} and projection is disabled",
                self.feature_dim,
                self.backbone_channels()
            ));
        }
        if let Some((k, v)) = self.l2_scopes.iter().find(|(_, v)| !(**v >= 0.0)) {
            return fail(format!("L2 coefficient for {k} must be non-negative, got {v}"));
        }
        Ok(())
    }

    /// Stable 64-bit digest of the configuration.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// How a tensor participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Convolution, dense and recurrent weight matrices.
    Kernel,
    Bias,
    /// Batch-norm scale and shift.
    Norm,
    /// Batch-norm running statistics; updated outside of gradient descent.
    Buffer,
}

pub fn tensor_role(name: &str) -> TensorRole {
    if name.ends_with("running_mean") || name.ends_with("running_var") {
        TensorRole::Buffer
    } else if name.ends_with("gamma") || name.ends_with("beta") {
        TensorRole::Norm
    } else if name.ends_with("bias") {
        TensorRole::Bias
    } else {
        TensorRole::Kernel
    }
}

/// Named model tensors in construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
    /// Bumped on every update.
    pub version: u64,
    pub fingerprint: u64,
}

impl ParameterSet {
    pub fn new(entries: Vec<(String, Tensor)>, fingerprint: u64) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::domain(format!("duplicate tensor name {name}")));
            }
        }
        Ok(Self {
            entries,
            version: 0,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| tensor_role(n) != TensorRole::Buffer)
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Same names, order and shapes.
    pub fn check_structure(&self, other: &ParameterSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::domain(format!(
                "parameter sets hold {} and {} tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::domain(format!("tensor {na} vs {nb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Shape {
                    op: "parameter structure",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }
}

fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

fn uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(vec![fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

fn push_bn(entries: &mut Vec<(String, Tensor)>, prefix: &str, c: usize) {
    entries.push((format!("{prefix}.gamma"), Tensor::full(vec![c], 1.0)));
    entries.push((format!("{prefix}.beta"), Tensor::zeros(vec![c])));
    entries.push((format!("{prefix}.running_mean"), Tensor::zeros(vec![c])));
    entries.push((format!("{prefix}.running_var"), Tensor::full(vec![c], 1.0)));
}

/// Deterministically initialized parameters for `config`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    let stem = config.stem_channels();
    entries.push((
        "stem.conv.weight".to_string(),
        he_normal(vec![stem, 3, 3, 3], 27, &mut rng),
    ));
    push_bn(&mut entries, "stem.bn", stem);
    for (i, (c_in, c_out, _)) in config.blocks().into_iter().enumerate() {
        entries.push((
            format!("blocks.{i}.dw.weight"),
            he_normal(vec![c_in, 1, 3, 3], 9, &mut rng),
        ));
        push_bn(&mut entries, &format!("blocks.{i}.dw_bn"), c_in);
        entries.push((
            format!("blocks.{i}.pw.weight"),
            he_normal(vec![c_out, c_in], c_in, &mut rng),
        ));
        push_bn(&mut entries, &format!("blocks.{i}.pw_bn"), c_out);
    }
    let backbone = config.backbone_channels();
    if config.project_features {
        entries.push((
            "proj.weight".into(),
            he_normal(vec![backbone, config.feature_dim], backbone, &mut rng),
        ));
        entries.push(("proj.bias".into(), Tensor::zeros(vec![config.feature_dim])));
    }
    let h = config.gru_units;
    entries.push(("gru.w_input".into(), glorot(config.feature_dim, 3 * h, &mut rng)));
    entries.push((
        "gru.w_hidden".into(),
        uniform(vec![h, 3 * h], 1.0 / (h as f64).sqrt(), &mut rng),
    ));
    entries.push(("gru.bias".into(), Tensor::zeros(vec![3 * h])));
    let mut width = h;
    for j in 0..config.fc_layers {
        entries.push((format!("fc{}.weight", j + 1), glorot(width, config.fc_units, &mut rng)));
        entries.push((format!("fc{}.bias", j + 1), Tensor::zeros(vec![config.fc_units])));
        width = config.fc_units;
    }
    entries.push(("head.weight".into(), glorot(width, config.n_classes, &mut rng)));
    entries.push(("head.bias".into(), Tensor::zeros(vec![config.n_classes])));
    ParameterSet::new(entries, config.fingerprint())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Handles into a forward pass recorded on a graph.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub features: Var,
    pub hidden_seq: Var,
    /// `(parameter index, graph variable)` for every tensor that was placed
    /// on the tape as a differentiable leaf.
    pub param_vars: Vec<(usize, Var)>,
    /// `(index of running_mean, batch statistics)` from training-mode batch norm.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

struct Builder<'a> {
    g: &'a mut Graph,
    params: &'a ParameterSet,
    mode: Mode,
    differentiable: bool,
    param_vars: Vec<(usize, Var)>,
    bn_stats: Vec<(usize, BatchStats)>,
}

impl Builder<'_> {
    fn leaf(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .position(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let t = self.params.tensor(idx).clone();
        let v = if self.differentiable {
            let v = self.g.param(t);
            self.param_vars.push((idx, v));
            v
        } else {
            self.g.constant(t)
        };
        Ok(v)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.leaf(&format!("{prefix}.gamma"))?;
        let beta = self.leaf(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm(x, gamma, beta, None)?;
                let idx = self
                    .params
                    .position(&format!("{prefix}.running_mean"))
                    .ok_or_else(|| Error::Config(format!("missing {prefix}.running_mean")))?;
                self.bn_stats
                    .push((idx, stats.expect("training batch norm reports stats")));
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.params.require(&format!("{prefix}.running_mean"))?.data().to_vec();
                let rv = self.params.require(&format!("{prefix}.running_var"))?.data().to_vec();
                Ok(self.g.batch_norm(x, gamma, beta, Some((&rm, &rv)))?.0)
            }
        }
    }
}

/// Records the full classifier on `g` for `input: (b, 3, s, s)`.
///
/// With `differentiable_params` the parameters become gradient leaves;
/// otherwise they are constants and only `input` can receive gradients.
pub fn forward_graph(
    g: &mut Graph,
    params: &ParameterSet,
    config: &ModelConfig,
    input: Var,
    mode: Mode,
    differentiable_params: bool,
    dropout_seed: u64,
) -> Result<ForwardPass> {
    let xs = g.shape(input).to_vec();
    let expected = [
        xs.first().copied().unwrap_or(0),
        3,
        config.input_size,
        config.input_size,
    ];
    if xs.len() != 4 || xs[1..] != expected[1..] || xs[0] == 0 {
        return Err(Error::Shape {
            op: "model input",
            lhs: xs,
            rhs: expected.to_vec(),
        });
    }
    if params.fingerprint != config.fingerprint() {
        return Err(Error::Fingerprint {
            expected: config.fingerprint(),
            found: params.fingerprint,
        });
    }
    let batch = xs[0];
    let mut b = Builder {
        g,
        params,
        mode,
        differentiable: differentiable_params,
        param_vars: Vec::new(),
        bn_stats: Vec::new(),
    };

    let w = b.leaf("stem.conv.weight")?;
    let mut x = b.g.conv2d(input, w, 2, 1)?;
    x = b.bn(x, "stem.bn")?;
    x = b.g.relu(x);
    for (i, (_, _, stride)) in config.blocks().into_iter().enumerate() {
        let w = b.leaf(&format!("blocks.{i}.dw.weight"))?;
        x = b.g.depthwise_conv2d(x, w, stride, 1)?;
        x = b.bn(x, &format!("blocks.{i}.dw_bn"))?;
        x = b.g.relu(x);
        let w = b.leaf(&format!("blocks.{i}.pw.weight"))?;
        x = b.g.pointwise_conv(x, w)?;
        x = b.bn(x, &format!("blocks.{i}.pw_bn"))?;
        x = b.g.relu(x);
    }
    let mut features = b.g.global_avg_pool(x)?;
    if config.project_features {
        let w = b.leaf("proj.weight")?;
        let bias = b.leaf("proj.bias")?;
        features = b.g.linear(features, w, bias)?;
        features = b.g.relu(features);
    }

    let seq = b.g.reshape(features, vec![batch, 1, config.feature_dim])?;
    let seq = b.g.repeat_seq(seq, config.seq_len)?;
    let wi = b.leaf("gru.w_input")?;
    let wh = b.leaf("gru.w_hidden")?;
    let gb = b.leaf("gru.bias")?;
    let (hidden_seq, last) = b.g.gru_layer(seq, wi, wh, gb)?;

    let mut y = b.g.dropout(last, config.dropout_p, mode == Mode::Train, dropout_seed)?;
    for j in 0..config.fc_layers {
        let w = b.leaf(&format!("fc{}.weight", j + 1))?;
        let bias = b.leaf(&format!("fc{}.bias", j + 1))?;
        y = b.g.linear(y, w, bias)?;
        y = match config.activation {
            Activation::Relu => b.g.relu(y),
            Activation::LeakyRelu => b.g.leaky_relu(y, LEAKY_RELU_SLOPE),
        };
    }
    let w = b.leaf("head.weight")?;
    let bias = b.leaf("head.bias")?;
    let logits = b.g.linear(y, w, bias)?;

    Ok(ForwardPass {
        logits,
        features,
        hidden_seq,
        param_vars: b.param_vars,
        bn_stats: b.bn_stats,
    })
}

/// Class probabilities `(b, n_classes)` for a batch `(b, 3, s, s)`.
/// Training mode uses batch statistics and dropout but leaves `params`
/// untouched.
pub fn forward(params: &ParameterSet, config: &ModelConfig, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::new();
    let input = g.constant(batch.clone());
    let pass = forward_graph(&mut g, params, config, input, mode, false, 0)?;
    let logits = g.value(pass.logits);
    let c = config.n_classes;
    Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), c))
}

/// Central finite differences of the cross-entropy in `mode` against
/// every trainable tensor (by name) and the input (as `"input"`), with up
/// to `coords` coordinates per tensor. A coordinate whose `±h` evaluations
/// change the sign of any ReLU input is skipped, since the difference
/// quotient then straddles a kink.
#[allow(clippy::too_many_arguments)]
pub fn model_gradient_check(
    params: &ParameterSet,
    config: &ModelConfig,
    x: &Tensor,
    labels: &[usize],
    mode: Mode,
    h: f64,
    coords: usize,
    dropout_seed: u64,
) -> Result<Vec<(String, GradCheck)>> {
    let loss_at = |p: &ParameterSet, x: &Tensor| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let pass = forward_graph(&mut g, p, config, input, mode, false, dropout_seed)?;
        let loss = g.softmax_cross_entropy(pass.logits, labels, None)?;
        Ok((g.value(loss).item(), g.activation_pattern()))
    };
    let mut g = Graph::new();
    let input = g.param(x.clone());
    let pass = forward_graph(&mut g, params, config, input, mode, true, dropout_seed)?;
    let loss = g.softmax_cross_entropy(pass.logits, labels, None)?;
    let pattern = g.activation_pattern();
    let grads = g.backward(loss)?;

    let mut targets: Vec<(String, Option<usize>, Tensor)> = vec![(
        "input".into(),
        None,
        grads
            .get(input)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())),
    )];
    for (idx, var) in &pass.param_vars {
        let t = params.tensor(*idx);
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        targets.push((params.name(*idx).to_string(), Some(*idx), analytic));
    }
    let mut out = Vec::with_capacity(targets.len());
    for (name, idx, analytic) in targets {
        let n = analytic.len();
        let stride = (n / coords.max(1)).max(1);
        let mut check = GradCheck {
            max_relative_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for j in (0..n).step_by(stride).take(coords) {
            let shifted = |delta: f64| -> Result<(f64, Vec<bool>)> {
                match idx {
                    Some(i) => {
                        let mut p = params.clone();
                        p.tensor_mut(i).data_mut()[j] += delta;
                        loss_at(&p, x)
                    }
                    None => {
                        let mut xs = x.clone();
                        xs.data_mut()[j] += delta;
                        loss_at(params, &xs)
                    }
                }
            };
            let (plus, pp) = shifted(h)?;
            let (minus, pm) = shifted(-h)?;
            if pp != pattern || pm != pattern {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            check.max_relative_error =
                check
                    .max_relative_error
                    .max(relative_error(analytic.data()[j], numeric, RELATIVE_FLOOR));
            check.checked += 1;
        }
        out.push((name, check));
    }
    Ok(out)
}

/// Blends training-mode batch statistics into the running estimates.
pub fn apply_bn_stats(params: &mut ParameterSet, stats: &[(usize, BatchStats)]) {
    for (mean_idx, s) in stats {
        let mean = params.tensor_mut(*mean_idx);
        for (r, b) in mean.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let var = params.tensor_mut(mean_idx + 1);
        for (r, b) in var.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Per-row labels by descending probability, ties to the lower index.
pub fn rank_row(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

pub fn predict_topk(probs: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    if probs.rank() != 2 {
        return Err(Error::Shape {
            op: "predict_topk",
            lhs: probs.shape().to_vec(),
            rhs: vec![k],
        });
    }
    let c = probs.shape()[1];
    if k == 0 || k > c {
        return Err(Error::domain(format!("k must lie in 1..={c}, got {k}")));
    }
    Ok(probs
        .data()
        .chunks(c)
        .map(|row| {
            let mut r = rank_row(row);
            r.truncate(k);
            r
        })
        .collect())
}
