//! Minibatch SGD training for the fixed desk architecture.
//!
//! Cross-entropy on softmax logits, momentum updates, one RNG substream per
//! epoch for shuffling so the whole run is a pure function of (dataset,
//! config). Epoch statistics are computed on the fly during the pass.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{Layer, Model};
use crate::rng;
use rand::seq::SliceRandom;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Stop after the first epoch whose training accuracy reaches this.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 7,
            stop_at_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

/// Train the desk CNN from scratch on `dataset`. The config seed drives both
/// weight initialization and epoch shuffling through disjoint substreams.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainResult> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let n_classes = dataset.class_names.len();
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidTargetClass { class: bad, n_classes });
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let shape = dataset.images[0].shape();
    let input_shape = [shape[0], shape[1], shape[2]];
    let mut model = Model::desk_cnn(input_shape, dataset.class_names.clone(), config.seed)?;

    let trainable = model.trainable_indices();
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = trainable
        .iter()
        .map(|&li| match &model.layers[li] {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                (vec![0.0; weight.len()], vec![0.0; bias.len()])
            }
            _ => unreachable!("trainable_indices returns only parameterized layers"),
        })
        .collect();

    let n = dataset.len();
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::substream(config.seed, "shuffle", epoch as u64));

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grad_acc: Vec<(Vec<f64>, Vec<f64>)> = velocity
                .iter()
                .map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
                .collect();
            for &idx in batch {
                let image = &dataset.images[idx];
                let label = dataset.labels[idx];
                let trace = model.forward(image).map_err(divergence)?;
                let (loss, d_logits) = softmax_cross_entropy(trace.logits().data(), label);
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged(format!(
                        "loss became non-finite at epoch {epoch}"
                    )));
                }
                loss_sum += loss;
                if argmax(trace.logits().data()) == label {
                    correct += 1;
                }
                let grads = model.backward(&trace, &d_logits).map_err(divergence)?;
                for (slot, &li) in trainable.iter().enumerate() {
                    let pg = grads.params[li].as_ref().expect("trainable layer has gradients");
                    for (a, &g) in grad_acc[slot].0.iter_mut().zip(pg.weight.data()) {
                        *a += f64::from(g);
                    }
                    for (a, &g) in grad_acc[slot].1.iter_mut().zip(pg.bias.data()) {
                        *a += f64::from(g);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (slot, &li) in trainable.iter().enumerate() {
                let (vw, vb) = &mut velocity[slot];
                let (gw, gb) = &grad_acc[slot];
                let (weight, bias) = match &mut model.layers[li] {
                    Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => (weight, bias),
                    _ => unreachable!(),
                };
                for ((v, &g), w) in vw.iter_mut().zip(gw).zip(weight.data_mut()) {
                    *v = config.momentum * *v - config.learning_rate * g * scale;
                    *w = (f64::from(*w) + *v) as f32;
                }
                for ((v, &g), b) in vb.iter_mut().zip(gb).zip(bias.data_mut()) {
                    *v = config.momentum * *v - config.learning_rate * g * scale;
                    *b = (f64::from(*b) + *v) as f32;
                }
            }
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        };
        history.push(stats);
        if config.stop_at_accuracy.is_some_and(|t| stats.accuracy >= t) {
            break;
        }
    }
    Ok(TrainResult { model, history })
}

/// Non-finite activations during training are a divergence, not a model bug.
fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite(ctx) => Error::TrainingDiverged(format!("non-finite values in {ctx}")),
        other => other,
    }
}

/// Mean-free softmax cross-entropy in f64: returns the loss and the gradient
/// w.r.t. the logits (p - onehot), as an f32 tensor.
fn softmax_cross_entropy(logits: &[f32], label: usize) -> (f64, crate::Tensor) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (f64::from(logits[label]) - max);
    let grad: Vec<f32> = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| (e / z - if i == label { 1.0 } else { 0.0 }) as f32)
        .collect();
    (loss, crate::Tensor::from_raw(vec![logits.len()], grad))
}

pub(crate) fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
