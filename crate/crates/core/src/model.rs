//! The CNN-Transformer classifier.
//!
//! Three stages: a weight-shared per-sensor 1D CNN encoder (four
//! conv3-bn-relu-maxpool blocks, channels 32-64-128-128, then adaptive
//! average pooling to a 128-dim embedding), a two-layer post-norm
//! Transformer encoder over the 28-sensor sequence (4 heads, feed-forward
//! 256), and an attention classification head whose query is the dense+ReLU
//! transform of the mean sensor embedding. The head's 4-head attention over
//! the 28 sensors is returned with the logits; those weights are what the
//! sensor-importance analysis consumes.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::ops::{positional_encoding, BnRunning};
use crate::tensor::tape::{Mode, Tape, VarId};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Positional-information variants for the sensor sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    Sinusoidal,
    Learned,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub sensors: usize,
    pub sequence_length: usize,
    pub conv_channels: [usize; 4],
    pub embedding_dim: usize,
    pub transformer_layers: usize,
    pub attention_heads: usize,
    pub feedforward_dim: usize,
    pub classifier_hidden_dim: usize,
    pub dropout_p: f64,
    pub classes: usize,
    pub positional: PositionalKind,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sensors: crate::SENSOR_COUNT,
            sequence_length: crate::FREQ_POINTS,
            conv_channels: [32, 64, 128, 128],
            embedding_dim: 128,
            transformer_layers: 2,
            attention_heads: 4,
            feedforward_dim: 256,
            classifier_hidden_dim: 128,
            dropout_p: 0.1,
            classes: crate::CLASS_COUNT,
            positional: PositionalKind::Sinusoidal,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks and fast tests.
    pub fn tiny(sensors: usize, sequence_length: usize) -> Self {
        ModelConfig {
            sensors,
            sequence_length,
            conv_channels: [4, 8, 16, 16],
            embedding_dim: 16,
            transformer_layers: 2,
            attention_heads: 4,
            feedforward_dim: 32,
            classifier_hidden_dim: 16,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "embedding_dim {} not divisible by attention_heads {}",
                self.embedding_dim, self.attention_heads
            )));
        }
        if self.conv_channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("conv_channels must be non-decreasing".into()));
        }
        if self.embedding_dim != self.conv_channels[3] {
            return Err(Error::Config(format!(
                "embedding_dim {} must equal the last conv width {}",
                self.embedding_dim, self.conv_channels[3]
            )));
        }
        if self.sequence_length >> 4 == 0 {
            return Err(Error::Config(format!(
                "sequence_length {} collapses to zero after four pooling stages",
                self.sequence_length
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must be in [0, 1)".into()));
        }
        if self.positional != PositionalKind::None && self.embedding_dim % 2 != 0 {
            return Err(Error::Config("positional encodings need an even embedding_dim".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.transformer_layers == 0 {
            return Err(Error::Config("need at least one transformer layer".into()));
        }
        Ok(())
    }

    /// Sequence lengths after each pooling stage.
    pub fn pooled_lengths(&self) -> [usize; 4] {
        let l0 = self.sequence_length / 2;
        let l1 = l0 / 2;
        let l2 = l1 / 2;
        [l0, l1, l2, l2 / 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: BnRunning<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub attn: AttentionParams<T>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub ff_w1: Tensor<T>,
    pub ff_b1: Tensor<T>,
    pub ff_w2: Tensor<T>,
    pub ff_b2: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub query_w: Tensor<T>,
    pub query_b: Tensor<T>,
    pub attn: AttentionParams<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

/// All model state: learnable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub conv: Vec<ConvBlockParams<T>>,
    pub layers: Vec<EncoderLayerParams<T>>,
    pub classifier: ClassifierParams<T>,
    /// Learned positional table, present only for `PositionalKind::Learned`.
    pub positional: Option<Tensor<T>>,
}

fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_in(-bound, bound)))
}

fn init_attention<T: Scalar>(d: usize, rng: &mut RngStream) -> AttentionParams<T> {
    AttentionParams {
        wq: fan_in_uniform(&[d, d], d, rng),
        bq: Tensor::zeros(&[d]),
        wk: fan_in_uniform(&[d, d], d, rng),
        bk: Tensor::zeros(&[d]),
        wv: fan_in_uniform(&[d, d], d, rng),
        bv: Tensor::zeros(&[d]),
        wo: fan_in_uniform(&[d, d], d, rng),
        bo: Tensor::zeros(&[d]),
    }
}

/// Fan-in-scaled uniform initialization for weights, zeros for biases, ones
/// and zeros for the normalization affine pairs. Deterministic in the seed.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = RngStream::new(seed).derive_named("init", 0);
    let d = config.embedding_dim;

    let mut conv = Vec::with_capacity(4);
    let mut c_in = 1usize;
    for &c_out in &config.conv_channels {
        conv.push(ConvBlockParams {
            weight: fan_in_uniform(&[c_out, c_in, 3], c_in * 3, &mut rng),
            bias: Tensor::zeros(&[c_out]),
            gamma: Tensor::full(&[c_out], T::one()),
            beta: Tensor::zeros(&[c_out]),
            running: BnRunning::new(c_out),
        });
        c_in = c_out;
    }

    let layers = (0..config.transformer_layers)
        .map(|_| EncoderLayerParams {
            attn: init_attention(d, &mut rng),
            ln1_gamma: Tensor::full(&[d], T::one()),
            ln1_beta: Tensor::zeros(&[d]),
            ff_w1: fan_in_uniform(&[config.feedforward_dim, d], d, &mut rng),
            ff_b1: Tensor::zeros(&[config.feedforward_dim]),
            ff_w2: fan_in_uniform(&[d, config.feedforward_dim], config.feedforward_dim, &mut rng),
            ff_b2: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], T::one()),
            ln2_beta: Tensor::zeros(&[d]),
        })
        .collect();

    let classifier = ClassifierParams {
        query_w: fan_in_uniform(&[config.classifier_hidden_dim, d], d, &mut rng),
        query_b: Tensor::zeros(&[config.classifier_hidden_dim]),
        attn: init_attention(d, &mut rng),
        fc_w: fan_in_uniform(&[config.classifier_hidden_dim, d], d, &mut rng),
        fc_b: Tensor::zeros(&[config.classifier_hidden_dim]),
        out_w: fan_in_uniform(&[config.classes, config.classifier_hidden_dim], config.classifier_hidden_dim, &mut rng),
        out_b: Tensor::zeros(&[config.classes]),
    };

    let positional = match config.positional {
        PositionalKind::Learned => Some(Tensor::from_fn(&[config.sensors, d], |_| {
            T::from_f64(0.02 * rng.normal())
        })),
        _ => None,
    };

    Ok(ModelParams { config: config.clone(), conv, layers, classifier, positional })
}

impl<T: Scalar> ModelParams<T> {
    /// Visits every learnable tensor in a fixed order.
    pub fn visit_learnable(&self, mut f: impl FnMut(String, &Tensor<T>)) {
        for (i, b) in self.conv.iter().enumerate() {
            f(format!("conv{i}.weight"), &b.weight);
            f(format!("conv{i}.bias"), &b.bias);
            f(format!("conv{i}.bn.gamma"), &b.gamma);
            f(format!("conv{i}.bn.beta"), &b.beta);
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in attn_named(&l.attn) {
                f(format!("layer{i}.attn.{name}"), t);
            }
            f(format!("layer{i}.ln1.gamma"), &l.ln1_gamma);
            f(format!("layer{i}.ln1.beta"), &l.ln1_beta);
            f(format!("layer{i}.ff.w1"), &l.ff_w1);
            f(format!("layer{i}.ff.b1"), &l.ff_b1);
            f(format!("layer{i}.ff.w2"), &l.ff_w2);
            f(format!("layer{i}.ff.b2"), &l.ff_b2);
            f(format!("layer{i}.ln2.gamma"), &l.ln2_gamma);
            f(format!("layer{i}.ln2.beta"), &l.ln2_beta);
        }
        for (name, t) in attn_named(&self.classifier.attn) {
            f(format!("classifier.attn.{name}"), t);
        }
        f("classifier.query.weight".into(), &self.classifier.query_w);
        f("classifier.query.bias".into(), &self.classifier.query_b);
        f("classifier.fc.weight".into(), &self.classifier.fc_w);
        f("classifier.fc.bias".into(), &self.classifier.fc_b);
        f("classifier.out.weight".into(), &self.classifier.out_w);
        f("classifier.out.bias".into(), &self.classifier.out_b);
        if let Some(p) = &self.positional {
            f("positional.table".into(), p);
        }
    }

    /// Mutable access to the learnable tensors, same order as
    /// [`Self::visit_learnable`].
    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for b in &mut self.conv {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        for l in &mut self.layers {
            out.push(&mut l.attn.wq);
            out.push(&mut l.attn.bq);
            out.push(&mut l.attn.wk);
            out.push(&mut l.attn.bk);
            out.push(&mut l.attn.wv);
            out.push(&mut l.attn.bv);
            out.push(&mut l.attn.wo);
            out.push(&mut l.attn.bo);
            out.push(&mut l.ln1_gamma);
            out.push(&mut l.ln1_beta);
            out.push(&mut l.ff_w1);
            out.push(&mut l.ff_b1);
            out.push(&mut l.ff_w2);
            out.push(&mut l.ff_b2);
            out.push(&mut l.ln2_gamma);
            out.push(&mut l.ln2_beta);
        }
        let c = &mut self.classifier;
        out.push(&mut c.attn.wq);
        out.push(&mut c.attn.bq);
        out.push(&mut c.attn.wk);
        out.push(&mut c.attn.bk);
        out.push(&mut c.attn.wv);
        out.push(&mut c.attn.bv);
        out.push(&mut c.attn.wo);
        out.push(&mut c.attn.bo);
        out.push(&mut c.query_w);
        out.push(&mut c.query_b);
        out.push(&mut c.fc_w);
        out.push(&mut c.fc_b);
        out.push(&mut c.out_w);
        out.push(&mut c.out_b);
        if let Some(p) = &mut self.positional {
            out.push(p);
        }
        out
    }

    /// Batch-norm running statistics (state, not learnable).
    pub fn visit_state(&self, mut f: impl FnMut(String, &[T])) {
        for (i, b) in self.conv.iter().enumerate() {
            f(format!("conv{i}.bn.running_mean"), &b.running.mean);
            f(format!("conv{i}.bn.running_var"), &b.running.var);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_learnable(|_, t| total += t.numel());
        total
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            conv: self
                .conv
                .iter()
                .map(|b| ConvBlockParams {
                    weight: b.weight.cast(),
                    bias: b.bias.cast(),
                    gamma: b.gamma.cast(),
                    beta: b.beta.cast(),
                    running: BnRunning {
                        mean: b.running.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        var: b.running.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    },
                })
                .collect(),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayerParams {
                    attn: cast_attn(&l.attn),
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    ff_w1: l.ff_w1.cast(),
                    ff_b1: l.ff_b1.cast(),
                    ff_w2: l.ff_w2.cast(),
                    ff_b2: l.ff_b2.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                })
                .collect(),
            classifier: ClassifierParams {
                query_w: self.classifier.query_w.cast(),
                query_b: self.classifier.query_b.cast(),
                attn: cast_attn(&self.classifier.attn),
                fc_w: self.classifier.fc_w.cast(),
                fc_b: self.classifier.fc_b.cast(),
                out_w: self.classifier.out_w.cast(),
                out_b: self.classifier.out_b.cast(),
            },
            positional: self.positional.as_ref().map(|p| p.cast()),
        }
    }
}

fn cast_attn<T: Scalar, U: Scalar>(a: &AttentionParams<T>) -> AttentionParams<U> {
    AttentionParams {
        wq: a.wq.cast(),
        bq: a.bq.cast(),
        wk: a.wk.cast(),
        bk: a.bk.cast(),
        wv: a.wv.cast(),
        bv: a.bv.cast(),
        wo: a.wo.cast(),
        bo: a.bo.cast(),
    }
}

fn attn_named<T>(a: &AttentionParams<T>) -> [(&'static str, &Tensor<T>); 8] {
    [
        ("wq", &a.wq),
        ("bq", &a.bq),
        ("wk", &a.wk),
        ("bk", &a.bk),
        ("wv", &a.wv),
        ("bv", &a.bv),
        ("wo", &a.wo),
        ("bo", &a.bo),
    ]
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct AttnVars {
    wq: VarId,
    bq: VarId,
    wk: VarId,
    bk: VarId,
    wv: VarId,
    bv: VarId,
    wo: VarId,
    bo: VarId,
}

/// Tape handles produced by a forward pass.
pub struct ForwardPass {
    pub logits: VarId,
    /// Classification-head attention, `[B, heads, sensors]`.
    pub attention: VarId,
    /// Post-transformer sensor embeddings, `[B, sensors, d]`.
    pub embeddings: VarId,
    /// Every learnable tensor's leaf, in `visit_learnable` order.
    pub param_vars: Vec<VarId>,
    /// The classification head's four attention projection matrices
    /// (wq, wk, wv, wo), the tensors the sparsity penalty acts on.
    pub classifier_attention_weights: Vec<VarId>,
}

fn leaf_attn<T: Scalar>(tape: &mut Tape<T>, a: &AttentionParams<T>, flat: &mut Vec<VarId>) -> AttnVars {
    let wq = tape.leaf(a.wq.clone());
    let bq = tape.leaf(a.bq.clone());
    let wk = tape.leaf(a.wk.clone());
    let bk = tape.leaf(a.bk.clone());
    let wv = tape.leaf(a.wv.clone());
    let bv = tape.leaf(a.bv.clone());
    let wo = tape.leaf(a.wo.clone());
    let bo = tape.leaf(a.bo.clone());
    flat.extend([wq, bq, wk, bk, wv, bv, wo, bo]);
    AttnVars { wq, bq, wk, bk, wv, bv, wo, bo }
}

/// Multi-head attention block; returns (output `[B, n_q, d]`, attention
/// weights `[B, h, n_q, n_k]`).
fn attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    query: VarId,
    keys_values: VarId,
    vars: &AttnVars,
    heads: usize,
) -> (VarId, VarId) {
    let d = tape.value(query).shape()[2];
    let dh = d / heads;
    let q = tape.linear(query, vars.wq, vars.bq);
    let k = tape.linear(keys_values, vars.wk, vars.bk);
    let v = tape.linear(keys_values, vars.wv, vars.bv);
    let qh = tape.split_heads(q, heads);
    let kh = tape.split_heads(k, heads);
    let vh = tape.split_heads(v, heads);
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let scores = tape.batched_matmul(qh, kh, true, scale);
    let attn = tape.softmax(scores);
    let ctx = tape.batched_matmul(attn, vh, false, T::one());
    let merged = tape.merge_heads(ctx);
    let out = tape.linear(merged, vars.wo, vars.bo);
    (out, attn)
}

/// Runs the full model on `x: [B, sensors, sequence_length]`. Train mode
/// updates batch-norm running statistics and applies dropout from `rng`.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    params: &mut ModelParams<T>,
    rng: &mut RngStream,
) -> Result<ForwardPass> {
    let cfg = params.config.clone();
    let shape = x.shape().to_vec();
    if shape.len() != 3 || shape[1] != cfg.sensors || shape[2] != cfg.sequence_length {
        return Err(Error::Data(format!(
            "input shape {shape:?} does not match [B, {}, {}]",
            cfg.sensors, cfg.sequence_length
        )));
    }
    let b = shape[0];
    let mut flat: Vec<VarId> = Vec::new();

    // --- Sensor encoder: each sensor row through the shared conv stack.
    let rows = b * cfg.sensors;
    let input = tape.leaf(x.reshape(&[rows, cfg.sequence_length, 1]));
    let mut h = input;
    for block in &mut params.conv {
        let w = tape.leaf(block.weight.clone());
        let bias = tape.leaf(block.bias.clone());
        let gamma = tape.leaf(block.gamma.clone());
        let beta = tape.leaf(block.beta.clone());
        flat.extend([w, bias, gamma, beta]);
        h = tape.conv1d_rlc(h, w, bias);
        h = tape.batch_norm(h, gamma, beta, &mut block.running, cfg.bn_momentum, cfg.bn_eps);
        h = tape.relu(h);
        h = tape.max_pool2(h);
    }
    let pooled = tape.global_avg_pool(h); // [rows, d]
    let mut z = tape.reshape(pooled, &[b, cfg.sensors, cfg.embedding_dim]);

    // --- Positional information.
    match cfg.positional {
        PositionalKind::Sinusoidal => {
            let pe = tape.leaf(positional_encoding(cfg.sensors, cfg.embedding_dim));
            z = tape.add_broadcast_rows(z, pe);
        }
        PositionalKind::Learned => {
            let table = params.positional.as_ref().expect("learned positional table").clone();
            let pe = tape.leaf(table);
            flat.push(pe);
            z = tape.add_broadcast_rows(z, pe);
        }
        PositionalKind::None => {}
    }

    // --- Transformer integration, post-norm layers.
    for layer in &params.layers {
        let attn_vars = leaf_attn(tape, &layer.attn, &mut flat);
        let ln1_g = tape.leaf(layer.ln1_gamma.clone());
        let ln1_b = tape.leaf(layer.ln1_beta.clone());
        let w1 = tape.leaf(layer.ff_w1.clone());
        let b1 = tape.leaf(layer.ff_b1.clone());
        let w2 = tape.leaf(layer.ff_w2.clone());
        let b2 = tape.leaf(layer.ff_b2.clone());
        let ln2_g = tape.leaf(layer.ln2_gamma.clone());
        let ln2_b = tape.leaf(layer.ln2_beta.clone());
        flat.extend([ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b]);

        let (attn_out, _) = attention_block(tape, z, z, &attn_vars, cfg.attention_heads);
        let res1 = tape.add(z, attn_out);
        let h1 = tape.layer_norm(res1, ln1_g, ln1_b, cfg.ln_eps);

        let f1 = tape.linear(h1, w1, b1);
        let f1 = tape.relu(f1);
        let f2 = tape.linear(f1, w2, b2);
        let res2 = tape.add(h1, f2);
        z = tape.layer_norm(res2, ln2_g, ln2_b, cfg.ln_eps);
    }
    let embeddings = z;

    // --- Attention classification head.
    let attn_vars = leaf_attn(tape, &params.classifier.attn, &mut flat);
    let classifier_attention_weights = vec![attn_vars.wq, attn_vars.wk, attn_vars.wv, attn_vars.wo];
    let qw = tape.leaf(params.classifier.query_w.clone());
    let qb = tape.leaf(params.classifier.query_b.clone());
    let fcw = tape.leaf(params.classifier.fc_w.clone());
    let fcb = tape.leaf(params.classifier.fc_b.clone());
    let ow = tape.leaf(params.classifier.out_w.clone());
    let ob = tape.leaf(params.classifier.out_b.clone());
    flat.extend([qw, qb, fcw, fcb, ow, ob]);

    let mean = tape.mean_axis1(z); // [B, d]
    let q = tape.linear(mean, qw, qb);
    let q = tape.relu(q);
    let q = tape.reshape(q, &[b, 1, cfg.classifier_hidden_dim]);
    let (ctx, attn) = attention_block(tape, q, z, &attn_vars, cfg.attention_heads);
    // attn: [B, h, 1, sensors] -> [B, h, sensors]
    let attention = tape.reshape(attn, &[b, cfg.attention_heads, cfg.sensors]);
    let ctx = tape.reshape(ctx, &[b, cfg.embedding_dim]);
    let hcls = tape.linear(ctx, fcw, fcb);
    let hcls = tape.relu(hcls);
    let hcls = tape.dropout(hcls, cfg.dropout_p, rng);
    let logits = tape.linear(hcls, ow, ob);

    Ok(ForwardPass { logits, attention, embeddings, param_vars: flat, classifier_attention_weights })
}

/// Eval-mode forward returning concrete tensors.
pub struct ForwardOutput<T> {
    /// `[B, classes]`
    pub logits: Tensor<T>,
    /// `[B, heads, sensors]`, rows normalized per head.
    pub sensor_attention: Tensor<T>,
    /// `[B, sensors, embedding_dim]`
    pub embeddings: Tensor<T>,
}

/// Convenience eval-mode forward; batch-norm running stats are read, not
/// updated, and dropout is disabled.
pub fn forward_eval<T: Scalar>(x: &Tensor<T>, params: &ModelParams<T>) -> Result<ForwardOutput<T>> {
    let mut tape = Tape::new(Mode::Eval);
    let mut rng = RngStream::new(0);
    let mut scratch = params.clone();
    let pass = model_forward(&mut tape, x, &mut scratch, &mut rng)?;
    Ok(ForwardOutput {
        logits: tape.value(pass.logits).clone(),
        sensor_attention: tape.value(pass.attention).clone(),
        embeddings: tape.value(pass.embeddings).clone(),
    })
}

/// Softmax probabilities per row of a logits matrix.
pub fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    crate::tensor::ops::softmax_forward(logits)
}

/// Argmax with lowest-index tie-breaking.
pub fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per sample.
pub fn predict<T: Scalar>(x: &Tensor<T>, params: &ModelParams<T>) -> Result<Vec<usize>> {
    let out = forward_eval(x, params)?;
    let c = params.config.classes;
    Ok(out.logits.data().chunks_exact(c).map(argmax_row).collect())
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + weights.bin
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into weights.bin, in bytes.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    schema_version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` + `weights.bin` (little-endian raw values).
/// Batch-norm running statistics are stored alongside the learnables.
pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let push = |name: String, shape: Vec<usize>, data: &[T], blob: &mut Vec<u8>, entries: &mut Vec<TensorEntry>| {
        let offset = blob.len();
        for &v in data {
            v.to_le_bytes(blob);
        }
        entries.push(TensorEntry { name, shape, offset, len: data.len() });
    };
    params.visit_learnable(|name, t| push(name, t.shape().to_vec(), t.data(), &mut blob, &mut entries));
    params.visit_state(|name, data| push(name, vec![data.len()], data, &mut blob, &mut entries));

    let manifest = CheckpointManifest {
        schema_version: 1,
        dtype: T::DTYPE.to_string(),
        config: params.config.clone(),
        tensors: entries,
    };
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.json"))?),
        &manifest,
    )?;
    std::fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`]. The round-trip is
/// bit-exact.
pub fn load_checkpoint<T: Scalar>(dir: &std::path::Path) -> Result<ModelParams<T>> {
    let manifest: CheckpointManifest =
        serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Data(format!(
            "checkpoint dtype {} does not match requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let blob = std::fs::read(dir.join("weights.bin"))?;
    let read_tensor = |entry: &TensorEntry| -> Result<Tensor<T>> {
        let bytes = entry.len * T::BYTE_WIDTH;
        let end = entry.offset + bytes;
        if end > blob.len() {
            return Err(Error::Data(format!("tensor {} overruns weights.bin", entry.name)));
        }
        let data: Vec<T> = blob[entry.offset..end]
            .chunks_exact(T::BYTE_WIDTH)
            .map(T::from_le_bytes)
            .collect();
        Ok(Tensor::new(&entry.shape, data))
    };

    let mut params = init_params::<T>(&manifest.config, 0)?;
    let mut by_name: std::collections::HashMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();

    // Learnables.
    let mut names: Vec<String> = Vec::new();
    params.visit_learnable(|name, _| names.push(name));
    {
        let mut slots = params.learnable_mut();
        for (name, slot) in names.iter().zip(slots.iter_mut()) {
            let entry = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))?;
            **slot = read_tensor(entry)?;
        }
    }
    // Running statistics.
    for (i, block) in params.conv.iter_mut().enumerate() {
        for (field, target) in [("running_mean", &mut block.running.mean), ("running_var", &mut block.running.var)]
        {
            let name = format!("conv{i}.bn.{field}");
            let entry = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))?;
            *target = read_tensor(entry)?.into_data();
        }
    }
    if !by_name.is_empty() {
        let extra: Vec<&str> = by_name.keys().copied().collect();
        return Err(Error::Data(format!("checkpoint has unexpected tensors: {extra:?}")));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Mode;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn default_param_count_is_frozen() {
        let params = init_params::<f32>(&ModelConfig::default(), 1).unwrap();
        // 4 conv blocks (81 024) + 2 transformer layers (264 960) +
        // classification head (99 459).
        assert_eq!(params.param_count(), 445_443);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params::<f64>(&ModelConfig::default(), 9).unwrap();
        let b = init_params::<f64>(&ModelConfig::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f64>(&ModelConfig::default(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forward_shapes_match_contract() {
        let cfg = ModelConfig::tiny(6, 32);
        let mut params = init_params::<f64>(&cfg, 2).unwrap();
        let x = rand_input(&[5, 6, 32], 3);
        let mut tape = Tape::new(Mode::Eval);
        let mut rng = RngStream::new(0);
        let pass = model_forward(&mut tape, &x, &mut params, &mut rng).unwrap();
        assert_eq!(tape.value(pass.logits).shape(), &[5, 3]);
        assert_eq!(tape.value(pass.attention).shape(), &[5, 4, 6]);
        assert_eq!(tape.value(pass.embeddings).shape(), &[5, 6, 16]);
    }

    #[test]
    fn default_shapes_B_28_150() {
        let cfg = ModelConfig::default();
        let params = init_params::<f32>(&cfg, 4).unwrap();
        let x = Tensor::<f32>::zeros(&[2, 28, 150]);
        let out = forward_eval(&x, &params).unwrap();
        assert_eq!(out.logits.shape(), &[2, 3]);
        assert_eq!(out.sensor_attention.shape(), &[2, 4, 28]);
        assert_eq!(out.embeddings.shape(), &[2, 28, 128]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = ModelConfig::tiny(8, 32);
        let params = init_params::<f64>(&cfg, 5).unwrap();
        let x = rand_input(&[3, 8, 32], 6);
        let out = forward_eval(&x, &params).unwrap();
        for row in out.sensor_attention.data().chunks_exact(8) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "attention row sums to {s}");
        }
        // Softmax of logits sums to 1 as well.
        let probs = probabilities(&out.logits);
        for row in probs.data().chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = ModelConfig::tiny(4, 32);
        let params = init_params::<f64>(&cfg, 7).unwrap();
        let x = rand_input(&[2, 4, 32], 8);
        let a = forward_eval(&x, &params).unwrap();
        let b = forward_eval(&x, &params).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.sensor_attention, b.sensor_attention);
    }

    #[test]
    fn encoder_is_sensor_equivariant() {
        // The conv encoder is weight-shared per sensor: permuting sensors
        // permutes embeddings identically. Check through a PE-free model's
        // embeddings with identical per-sensor processing.
        let cfg = ModelConfig { positional: PositionalKind::None, ..ModelConfig::tiny(5, 32) };
        let params = init_params::<f64>(&cfg, 9).unwrap();
        let x = rand_input(&[2, 5, 32], 10);

        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = Tensor::<f64>::zeros(&[2, 5, 32]);
        for b in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                for l in 0..32 {
                    permuted.data_mut()[(b * 5 + dst) * 32 + l] = x.data()[(b * 5 + src) * 32 + l];
                }
            }
        }
        let out = forward_eval(&x, &params).unwrap();
        let out_p = forward_eval(&permuted, &params).unwrap();

        // Logits invariant under sensor permutation (within fp tolerance).
        for (a, b) in out.logits.data().iter().zip(out_p.logits.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        // Attention permutes along the sensor axis.
        for b in 0..2 {
            for h in 0..4 {
                for (dst, &src) in perm.iter().enumerate() {
                    let a = out.sensor_attention.data()[(b * 4 + h) * 5 + src];
                    let p = out_p.sensor_attention.data()[(b * 4 + h) * 5 + dst];
                    assert!((a - p).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn positional_encoding_breaks_permutation_invariance() {
        let cfg = ModelConfig { positional: PositionalKind::Sinusoidal, ..ModelConfig::tiny(5, 32) };
        let params = init_params::<f64>(&cfg, 9).unwrap();
        let x = rand_input(&[1, 5, 32], 10);
        let perm = [4usize, 2, 0, 3, 1];
        let mut permuted = Tensor::<f64>::zeros(&[1, 5, 32]);
        for (dst, &src) in perm.iter().enumerate() {
            for l in 0..32 {
                permuted.data_mut()[dst * 32 + l] = x.data()[src * 32 + l];
            }
        }
        let out = forward_eval(&x, &params).unwrap();
        let out_p = forward_eval(&permuted, &params).unwrap();
        let diff: f64 = out
            .logits
            .data()
            .iter()
            .zip(out_p.logits.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "logits unchanged by permutation despite positional encodings");
    }

    #[test]
    fn zeroed_attention_and_ffn_reduce_layer_to_stacked_layernorm() {
        let cfg = ModelConfig { transformer_layers: 1, positional: PositionalKind::None, ..ModelConfig::tiny(4, 32) };
        let mut params = init_params::<f64>(&cfg, 11).unwrap();
        // Zero the attention output projection and the second FFN weight:
        // both sub-layer contributions vanish, residuals pass through.
        params.layers[0].attn.wo = Tensor::zeros(params.layers[0].attn.wo.shape());
        params.layers[0].attn.bo = Tensor::zeros(params.layers[0].attn.bo.shape());
        params.layers[0].ff_w2 = Tensor::zeros(params.layers[0].ff_w2.shape());
        params.layers[0].ff_b2 = Tensor::zeros(params.layers[0].ff_b2.shape());

        let x = rand_input(&[2, 4, 32], 12);
        let out = forward_eval(&x, &params).unwrap();

        // With both sub-layer outputs zeroed the layer is LN2(LN1(e)), and
        // the affine pairs are identity at init, so every embedding row must
        // come out standardized.
        for row in out.embeddings.data().chunks_exact(32 / 2) {
            let d = row.len() as f64;
            let mean: f64 = row.iter().sum::<f64>() / d;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            assert!(mean.abs() < 1e-9, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row var {var}");
        }
    }

    #[test]
    fn identical_sensor_rows_give_uniform_attention() {
        let cfg = ModelConfig { positional: PositionalKind::None, ..ModelConfig::tiny(6, 32) };
        let params = init_params::<f64>(&cfg, 13).unwrap();
        // Same signal on every sensor: keys identical, attention uniform.
        let mut x = Tensor::<f64>::zeros(&[1, 6, 32]);
        let mut rng = RngStream::new(14);
        let row: Vec<f64> = (0..32).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        for s in 0..6 {
            x.data_mut()[s * 32..(s + 1) * 32].copy_from_slice(&row);
        }
        let out = forward_eval(&x, &params).unwrap();
        for &w in out.sensor_attention.data() {
            assert!((w - 1.0 / 6.0).abs() < 1e-9, "weight {w}");
        }
    }

    #[test]
    fn predict_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_row(&[0.4f64, 0.4, 0.2]), 0);
        assert_eq!(argmax_row(&[0.1f64, 0.5, 0.5]), 1);
        assert_eq!(argmax_row(&[1.0f64, 2.0, 3.0]), 2);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let cfg = ModelConfig::tiny(4, 32);
        let mut params = init_params::<f32>(&cfg, 15).unwrap();
        // Give running stats non-default values.
        let x = Tensor::<f32>::from_fn(&[3, 4, 32], |i| (i as f32 * 0.37).sin());
        let mut tape = Tape::new(Mode::Train);
        let mut rng = RngStream::new(16);
        model_forward(&mut tape, &x, &mut params, &mut rng).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, dir.path()).unwrap();
        let loaded = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(params, loaded);

        let out_a = forward_eval(&x, &params).unwrap();
        let out_b = forward_eval(&x, &loaded).unwrap();
        assert_eq!(out_a.logits, out_b.logits);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_heads = ModelConfig { attention_heads: 5, ..ModelConfig::default() };
        assert!(bad_heads.validate().is_err());
        let bad_channels =
            ModelConfig { conv_channels: [64, 32, 128, 128], ..ModelConfig::default() };
        assert!(bad_channels.validate().is_err());
        let bad_input = ModelConfig { sequence_length: 8, ..ModelConfig::default() };
        assert!(bad_input.validate().is_err());
    }

    #[test]
    fn wrong_input_length_rejected() {
        let params = init_params::<f64>(&ModelConfig::tiny(4, 32), 1).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 4, 31]);
        assert!(forward_eval(&x, &params).is_err());
    }

    #[test]
    fn full_model_gradient_check() {
        // 64-bit, eval-mode dropout (dropout_p = 0), train-mode batch norm,
        // batch 2, reduced geometry.
        let cfg = ModelConfig {
            dropout_p: 0.0,
            positional: PositionalKind::Sinusoidal,
            ..ModelConfig::tiny(4, 20)
        };
        let base = init_params::<f64>(&cfg, 17).unwrap();
        let x = rand_input(&[2, 4, 20], 18);
        let targets = [0usize, 2];
        let weights = [1.0f64, 0.8, 1.3];
        let lambda = 1e-3;

        // Analytic gradients for every learnable tensor.
        let (analytic, inputs, names) = {
            let mut params = base.clone();
            let mut tape = Tape::new(Mode::Train);
            let mut rng = RngStream::new(0);
            let pass = model_forward(&mut tape, &x, &mut params, &mut rng).unwrap();
            let ce = tape.cross_entropy(pass.logits, &targets, &weights);
            let l1 = tape.l1_penalty(&pass.classifier_attention_weights, lambda);
            let loss = tape.add(ce, l1);
            let grads = tape.backward(loss);
            let mut analytic = Vec::new();
            let mut inputs = Vec::new();
            let mut names = Vec::new();
            base.visit_learnable(|name, t| names.push((name, t.clone())));
            for (id, (name, tensor)) in pass.param_vars.iter().zip(&names) {
                analytic.push(grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(tensor.shape())));
                inputs.push(tensor.clone());
                let _ = name;
            }
            (analytic, inputs, names.into_iter().map(|(n, _)| n).collect::<Vec<_>>())
        };

        let mut f = |xs: &[Tensor<f64>]| {
            let mut params = base.clone();
            {
                let mut slots = params.learnable_mut();
                for (slot, value) in slots.iter_mut().zip(xs) {
                    **slot = value.clone();
                }
            }
            let mut tape = Tape::new(Mode::Train);
            let mut rng = RngStream::new(0);
            let pass = model_forward(&mut tape, &x, &mut params, &mut rng).unwrap();
            let ce = tape.cross_entropy(pass.logits, &targets, &weights);
            let l1 = tape.l1_penalty(&pass.classifier_attention_weights, lambda);
            let loss = tape.add(ce, l1);
            tape.value(loss).item()
        };

        let mut rng = RngStream::new(19);
        let report = crate::tensor::grad_check::gradient_check(
            &mut f,
            &inputs,
            &analytic,
            12,
            crate::tensor::grad_check::DEFAULT_STEP,
            &mut rng,
        );
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at tensor {} ({:?})",
            report.max_rel_err,
            names[report.worst.0],
            report.worst,
        );
    }
}
