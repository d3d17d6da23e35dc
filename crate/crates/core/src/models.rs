//! Model zoo: logistic regression, MLPs and small CNNs, all expressed as tape
//! programs over a flat [`ParamVector`].
//!
//! The same forward builder serves three consumers: loss evaluation, gradient
//! computation (one reverse sweep) and exact Hessian-vector products (the
//! forward-over-reverse sweep), which is what makes the unbiased-gradient
//! client update exact rather than approximated.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::fed::Objective;
use crate::params::{ParamLayout, ParamVector};
use crate::tape::{ConvWindow, NodeId, PoolWindow, Tape};
use crate::tensor::Tensor;

/// Network architecture. CNN layers are `kernel x kernel` valid convolutions
/// (stride 1), each followed by ReLU and 2x2 max pooling; dense hidden layers
/// use ReLU, optionally followed by dropout (CNN head only, off by default).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Logreg {
        inputs: usize,
        classes: usize,
    },
    Mlp {
        inputs: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    Cnn {
        height: usize,
        width: usize,
        in_channels: usize,
        conv_channels: Vec<usize>,
        kernel: usize,
        dense: Vec<usize>,
        classes: usize,
        #[serde(default)]
        dropout: Option<f64>,
    },
}

impl Architecture {
    pub fn classes(&self) -> usize {
        match self {
            Architecture::Logreg { classes, .. }
            | Architecture::Mlp { classes, .. }
            | Architecture::Cnn { classes, .. } => *classes,
        }
    }

    /// Flattened per-example feature count this architecture consumes.
    pub fn input_len(&self) -> usize {
        match self {
            Architecture::Logreg { inputs, .. } | Architecture::Mlp { inputs, .. } => *inputs,
            Architecture::Cnn {
                height,
                width,
                in_channels,
                ..
            } => height * width * in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes() < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        match self {
            Architecture::Logreg { inputs, .. } => {
                if *inputs == 0 {
                    return Err(Error::Config("logreg needs inputs >= 1".into()));
                }
            }
            Architecture::Mlp { inputs, hidden, .. } => {
                if *inputs == 0 {
                    return Err(Error::Config("mlp needs inputs >= 1".into()));
                }
                if hidden.iter().any(|&h| h == 0) {
                    return Err(Error::Config("mlp hidden widths must be >= 1".into()));
                }
            }
            Architecture::Cnn {
                height,
                width,
                in_channels,
                conv_channels,
                kernel,
                dense,
                dropout,
                ..
            } => {
                if *in_channels == 0 || conv_channels.is_empty() {
                    return Err(Error::Config(
                        "cnn needs in_channels >= 1 and at least one conv layer".into(),
                    ));
                }
                if conv_channels.iter().any(|&c| c == 0) || dense.iter().any(|&d| d == 0) {
                    return Err(Error::Config("cnn layer widths must be >= 1".into()));
                }
                if *kernel == 0 {
                    return Err(Error::Config("cnn kernel must be >= 1".into()));
                }
                if let Some(p) = dropout {
                    if !(p.is_finite() && (0.0..1.0).contains(p)) {
                        return Err(Error::Config(format!(
                            "dropout must lie in [0,1), got {p}"
                        )));
                    }
                }
                // The spatial chain must stay poolable after every conv.
                let (mut h, mut w) = (*height, *width);
                for (i, _) in conv_channels.iter().enumerate() {
                    if h < *kernel || w < *kernel {
                        return Err(Error::Config(format!(
                            "conv layer {} cannot fit a {kernel}x{kernel} kernel on a {h}x{w} map",
                            i + 1
                        )));
                    }
                    h = h - kernel + 1;
                    w = w - kernel + 1;
                    if h < 2 || w < 2 {
                        return Err(Error::Config(format!(
                            "conv layer {} leaves a {h}x{w} map, too small to pool",
                            i + 1
                        )));
                    }
                    h /= 2;
                    w /= 2;
                }
            }
        }
        Ok(())
    }

    /// Named parameter layout; order defines flattening and init draw order.
    /// Rank-2 entries are weights `[fan_in, fan_out]`, rank-1 entries biases.
    pub fn layout(&self) -> Result<Arc<ParamLayout>> {
        self.validate()?;
        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        let dense_chain = |entries: &mut Vec<(String, Vec<usize>)>,
                               mut width: usize,
                               hidden: &[usize],
                               classes: usize| {
            for (i, &h) in hidden.iter().enumerate() {
                entries.push((format!("dense{}.weight", i + 1), vec![width, h]));
                entries.push((format!("dense{}.bias", i + 1), vec![h]));
                width = h;
            }
            entries.push(("out.weight".to_string(), vec![width, classes]));
            entries.push(("out.bias".to_string(), vec![classes]));
        };

        match self {
            Architecture::Logreg { inputs, classes } => {
                dense_chain(&mut entries, *inputs, &[], *classes);
            }
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                dense_chain(&mut entries, *inputs, hidden, *classes);
            }
            Architecture::Cnn {
                height,
                width,
                in_channels,
                conv_channels,
                kernel,
                dense,
                classes,
                ..
            } => {
                let (mut h, mut w, mut ch) = (*height, *width, *in_channels);
                for (i, &out_ch) in conv_channels.iter().enumerate() {
                    entries.push((
                        format!("conv{}.weight", i + 1),
                        vec![kernel * kernel * ch, out_ch],
                    ));
                    entries.push((format!("conv{}.bias", i + 1), vec![out_ch]));
                    h = (h - kernel + 1) / 2;
                    w = (w - kernel + 1) / 2;
                    ch = out_ch;
                }
                dense_chain(&mut entries, h * w * ch, dense, *classes);
            }
        }
        let refs: Vec<(&str, Vec<usize>)> =
            entries.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
        Ok(Arc::new(ParamLayout::new(refs)?))
    }

    /// Deterministic initialisation: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// drawn from one seeded stream in layout order, biases zero (no draws).
    pub fn init_params(&self, seed: u64) -> Result<ParamVector> {
        let layout = self.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(layout.total());
        for entry in layout.entries() {
            if entry.shape.len() == 2 {
                let bound = 1.0 / (entry.shape[0] as f64).sqrt();
                values.extend((0..entry.len()).map(|_| rng.gen_range(-bound..bound)));
            } else {
                values.extend(std::iter::repeat(0.0).take(entry.len()));
            }
        }
        ParamVector::from_values(layout, values)
    }
}

/// A recorded forward pass: the tape plus handles to the loss, the logits and
/// the parameter leaves (in layout order).
pub struct TracedModel {
    pub tape: Tape,
    pub loss: NodeId,
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
}

/// Record the forward pass for one batch. `features` is `[B, dims...]` with
/// `prod(dims) == arch.input_len()`. `dropout_seed` enables the (CNN-only)
/// dropout masks; pass `None` for evaluation or when dropout is configured off.
pub fn forward_loss(
    arch: &Architecture,
    params: &ParamVector,
    features: &Tensor,
    labels: &[usize],
    dropout_seed: Option<u64>,
) -> Result<TracedModel> {
    let layout = arch.layout()?;
    if **params.layout() != *layout {
        return Err(Error::LayoutMismatch(
            "parameters do not match this architecture".into(),
        ));
    }
    let batch = features.rows();
    if batch == 0 || labels.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a feature batch of {batch}",
            labels.len()
        )));
    }
    if features.row_len() != arch.input_len() {
        return Err(Error::ShapeMismatch(format!(
            "architecture consumes {} features per example, batch provides {}",
            arch.input_len(),
            features.row_len()
        )));
    }

    let mut tape = Tape::new();
    let param_nodes: Vec<NodeId> = params
        .to_tensors()
        .into_iter()
        .map(|t| tape.param(t))
        .collect();
    let x = tape.leaf(features.clone());

    let logits = match arch {
        Architecture::Logreg { inputs, .. } => {
            let x = tape.reshape(x, vec![batch, *inputs])?;
            let z = tape.matmul(x, param_nodes[0])?;
            tape.add_bias(z, param_nodes[1])?
        }
        Architecture::Mlp { inputs, hidden, .. } => {
            let mut a = tape.reshape(x, vec![batch, *inputs])?;
            let mut node = 0;
            for _ in hidden {
                let z = tape.matmul(a, param_nodes[node])?;
                let z = tape.add_bias(z, param_nodes[node + 1])?;
                a = tape.relu(z)?;
                node += 2;
            }
            let z = tape.matmul(a, param_nodes[node])?;
            tape.add_bias(z, param_nodes[node + 1])?
        }
        Architecture::Cnn {
            height,
            width,
            in_channels,
            conv_channels,
            kernel,
            dense,
            dropout,
            ..
        } => {
            let (mut h, mut w, mut ch) = (*height, *width, *in_channels);
            let mut a = tape.reshape(x, vec![batch, h, w, ch])?;
            let mut node = 0;
            for &out_ch in conv_channels {
                let win = ConvWindow {
                    batch,
                    height: h,
                    width: w,
                    channels: ch,
                    kernel: *kernel,
                };
                let col = tape.im2col(a, win)?;
                let z = tape.matmul(col, param_nodes[node])?;
                let z = tape.add_bias(z, param_nodes[node + 1])?;
                let z = tape.relu(z)?;
                h = h - kernel + 1;
                w = w - kernel + 1;
                let maps = tape.reshape(z, vec![batch, h, w, out_ch])?;
                let pooled = tape.max_pool2(
                    maps,
                    PoolWindow {
                        batch,
                        height: h,
                        width: w,
                        channels: out_ch,
                    },
                )?;
                h /= 2;
                w /= 2;
                ch = out_ch;
                a = pooled;
                node += 2;
            }
            let mut a = tape.reshape(a, vec![batch, h * w * ch])?;
            let mut mask_rng = match (dropout, dropout_seed) {
                (Some(p), Some(seed)) => Some((*p, ChaCha8Rng::seed_from_u64(seed))),
                _ => None,
            };
            for (i, &d) in dense.iter().enumerate() {
                let _ = i;
                let z = tape.matmul(a, param_nodes[node])?;
                let z = tape.add_bias(z, param_nodes[node + 1])?;
                a = tape.relu(z)?;
                if let Some((p, rng)) = mask_rng.as_mut() {
                    // Inverted dropout: kept units scaled by 1/(1-p). The mask
                    // is recorded on the tape, so reverse sweeps replay it.
                    let keep = 1.0 - *p;
                    let mask: Vec<f64> = (0..batch * d)
                        .map(|_| if rng.gen::<f64>() < *p { 0.0 } else { 1.0 / keep })
                        .collect();
                    a = tape.mul_mask(a, mask)?;
                }
                node += 2;
            }
            let z = tape.matmul(a, param_nodes[node])?;
            tape.add_bias(z, param_nodes[node + 1])?
        }
    };

    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok(TracedModel {
        tape,
        loss,
        logits,
        param_nodes,
    })
}

/// Accuracy and mean loss over a whole dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// Evaluate in chunks of `eval_batch` examples (memory bound, not semantics:
/// the reported loss is the exact mean over all examples). Predictions use
/// argmax with lowest-index tie-breaking; dropout is always off here.
pub fn evaluate(
    arch: &Architecture,
    params: &ParamVector,
    data: &Dataset,
    eval_batch: usize,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    if data.class_count() > arch.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model only emits {}",
            data.class_count(),
            arch.classes()
        )));
    }
    let chunk_size = eval_batch.max(1);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for chunk in all.chunks(chunk_size) {
        let (features, labels) = data.gather(chunk)?;
        let traced = forward_loss(arch, params, &features, &labels, None)?;
        loss_sum += traced.tape.value(traced.loss).item()? * chunk.len() as f64;
        let logits = traced.tape.value(traced.logits);
        let classes = arch.classes();
        for (row, &label) in labels.iter().enumerate() {
            let scores = &logits.data()[row * classes..(row + 1) * classes];
            let mut best = 0;
            for (c, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = c; // strict >: ties keep the lowest index
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}

/// Binds an architecture to a dataset, exposing loss/gradient/HVP as pure
/// functions of `(params, batch indices)` — the interface every federated
/// update rule consumes.
#[derive(Clone)]
pub struct ModelObjective {
    arch: Architecture,
    data: Arc<Dataset>,
    layout: Arc<ParamLayout>,
    /// Base seed for dropout masks; `None` disables dropout even if the
    /// architecture declares it (evaluation semantics).
    dropout_base: Option<u64>,
}

impl ModelObjective {
    pub fn new(arch: Architecture, data: Arc<Dataset>) -> Result<Self> {
        let layout = arch.layout()?;
        if data.feature_len() != arch.input_len() {
            return Err(Error::Config(format!(
                "architecture consumes {} features, dataset provides {}",
                arch.input_len(),
                data.feature_len()
            )));
        }
        if data.class_count() > arch.classes() {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model only emits {}",
                data.class_count(),
                arch.classes()
            )));
        }
        Ok(ModelObjective {
            arch,
            data,
            layout,
            dropout_base: None,
        })
    }

    /// Enable dropout (if the architecture declares it) with a base seed.
    pub fn with_dropout_base(mut self, seed: u64) -> Self {
        self.dropout_base = Some(seed);
        self
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn data(&self) -> &Arc<Dataset> {
        &self.data
    }

    /// Dropout masks must be a pure function of the batch so that re-tracing
    /// the same step (as the keep-trace update does) replays the same masks.
    fn mask_seed(&self, batch: &[usize]) -> Option<u64> {
        let base = self.dropout_base?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325; // FNV-1a over the batch indices
        for &i in batch {
            for b in (i as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        Some(base ^ h)
    }

    fn trace(&self, params: &ParamVector, batch: &[usize]) -> Result<TracedModel> {
        let (features, labels) = self.data.gather(batch)?;
        forward_loss(&self.arch, params, &features, &labels, self.mask_seed(batch))
    }
}

impl Objective for ModelObjective {
    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn loss(&self, params: &ParamVector, batch: &[usize]) -> Result<f64> {
        let traced = self.trace(params, batch)?;
        traced.tape.value(traced.loss).item()
    }

    fn grad(&self, params: &ParamVector, batch: &[usize]) -> Result<ParamVector> {
        let traced = self.trace(params, batch)?;
        let grads = traced.tape.backward(traced.loss)?;
        let tensors: Result<Vec<Tensor>> = traced
            .param_nodes
            .iter()
            .map(|&id| grads.wrt(id))
            .collect();
        ParamVector::from_tensors(Arc::clone(&self.layout), &tensors?)
    }

    fn hvp(&self, params: &ParamVector, batch: &[usize], v: &ParamVector) -> Result<ParamVector> {
        if **v.layout() != *self.layout {
            return Err(Error::LayoutMismatch(
                "hvp direction does not match the model layout".into(),
            ));
        }
        let traced = self.trace(params, batch)?;
        let seeds: Vec<(NodeId, Tensor)> = traced
            .param_nodes
            .iter()
            .copied()
            .zip(v.to_tensors())
            .collect();
        let (_, hv) = traced.tape.grad_and_hvp(traced.loss, &seeds)?;
        let tensors: Result<Vec<Tensor>> =
            traced.param_nodes.iter().map(|&id| hv.wrt(id)).collect();
        ParamVector::from_tensors(Arc::clone(&self.layout), &tensors?)
    }
}
