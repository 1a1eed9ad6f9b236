//! Training loop (SGD + step schedule + optional warmup), evaluation with
//! top-1/top-k metrics, and two-stream score fusion.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::stream::StreamModel;
use crate::error::{ConfigError, Error, TensorError};
use crate::layers::LayerCtx;
use crate::tensor::kernels::softmax_axis;
use crate::tensor::optim::{learning_rate, Sgd, SgdConfig};
use crate::tensor::tape::GradTape;
use crate::tensor::{Real, Tensor};

/// One labeled sequence; multi-person recordings carry one (C, T, V) view
/// per tracked person.
#[derive(Debug, Clone)]
pub struct Example<F: Real> {
    pub persons: Vec<Tensor<F>>,
    pub label: usize,
}

impl<F: Real> Example<F> {
    pub fn single(x: Tensor<F>, label: usize) -> Self {
        Self { persons: vec![x], label }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    /// Scheduled rate at the start of the epoch.
    pub lr: f64,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Training top-1 accuracy over the epoch.
    pub top1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Learning rate at every optimizer step, in order.
    pub step_lrs: Vec<f64>,
}

fn stack_views<F: Real>(views: &[&Tensor<F>]) -> Result<Tensor<F>, TensorError> {
    let first = views[0].shape().to_vec();
    let mut data = Vec::with_capacity(views.len() * views[0].numel());
    for v in views {
        if v.shape() != first {
            return Err(TensorError::DimMismatch {
                op: "stack",
                lhs: first,
                rhs: v.shape().to_vec(),
            });
        }
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![views.len()];
    shape.extend_from_slice(&first);
    Ok(Tensor::from_parts(shape, data))
}

fn argmax_row<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains one stream in place. Persons are flattened into independent
/// training samples; order is reshuffled each epoch from the config seed,
/// so a run is fully reproducible.
pub fn train<F: Real>(
    model: &mut StreamModel<F>,
    data: &[Example<F>],
    cfg: &TrainConfig,
) -> Result<History, Error> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ConfigError("training dataset is empty".into()).into());
    }
    model.set_drop_rate(cfg.drop_rate)?;
    let warmup = cfg.warmup.unwrap_or_else(|| model.has_agcn());
    let sched = SgdConfig {
        base_lr: cfg.base_lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        drop_epochs: cfg.drop_epochs.clone(),
        warmup_epochs: usize::from(warmup),
    };
    let mut sgd: Sgd<F> = Sgd::new(sched.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut order: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| (0..ex.persons.len()).map(move |p| (i, p)))
        .collect();
    if order.is_empty() {
        return Err(ConfigError("training dataset has no person views".into()).into());
    }

    let mut history = History::default();
    let steps_per_epoch = order.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = learning_rate(&sched, epoch, step as f64 / steps_per_epoch as f64);
            history.step_lrs.push(lr);

            let views: Vec<&Tensor<F>> =
                chunk.iter().map(|&(i, p)| &data[i].persons[p]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&(i, _)| data[i].label).collect();
            let x = stack_views(&views)?;

            let mut tape = GradTape::new();
            let xv = tape.input(&x);
            let mut ctx = LayerCtx::train(&mut rng);
            let logits = model.forward(&mut tape, xv, &mut ctx)?;
            let loss = tape.cross_entropy(logits, &labels)?;

            let lv = tape.value(loss).data()[0].to_f64();
            if !lv.is_finite() {
                return Err(TensorError::NonFinite("training loss").into());
            }
            loss_sum += lv * chunk.len() as f64;
            let out = tape.value(logits);
            for (row, &label) in out.data().chunks(model.classes()).zip(&labels) {
                if argmax_row(row) == label {
                    hits += 1;
                }
            }

            let grads = tape.backward(loss)?;
            sgd.step(model, &grads, lr);
        }
        history.epochs.push(EpochStats {
            epoch,
            lr: learning_rate(&sched, epoch, 0.0),
            loss: loss_sum / order.len() as f64,
            top1: hits as f64 / order.len() as f64,
        });
    }
    Ok(history)
}

/// Per-stream evaluation result. `scores` holds one probability row per
/// example: softmax of the logits, averaged over the example's persons.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub top1: f64,
    pub topk: f64,
    /// k used for the secondary metric: min(5, classes).
    pub k: usize,
    pub scores: Tensor<f64>,
    pub labels: Vec<usize>,
}

/// Accuracy of score rows against labels. Ties resolve to the lowest class
/// index: a class beats the label only with a strictly higher score, or an
/// equal score at a lower index.
pub fn metrics_from_scores(scores: &Tensor<f64>, labels: &[usize], k: usize) -> (f64, f64) {
    let classes = scores.shape()[1];
    let mut top1 = 0usize;
    let mut topk = 0usize;
    for (row, &label) in scores.data().chunks(classes).zip(labels) {
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(i, &s)| s > row[label] || (s == row[label] && i < label))
            .count();
        if rank == 0 {
            top1 += 1;
        }
        if rank < k {
            topk += 1;
        }
    }
    (top1 as f64 / labels.len() as f64, topk as f64 / labels.len() as f64)
}

/// Runs the stream over the dataset in eval mode.
pub fn evaluate<F: Real>(
    model: &mut StreamModel<F>,
    data: &[Example<F>],
    batch_size: usize,
) -> Result<Evaluation, Error> {
    if data.is_empty() {
        return Err(ConfigError("evaluation dataset is empty".into()).into());
    }
    if batch_size == 0 {
        return Err(ConfigError("batch size must be at least 1".into()).into());
    }
    let classes = model.classes();
    let flat: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| (0..ex.persons.len()).map(move |p| (i, p)))
        .collect();
    let mut sums = vec![0.0f64; data.len() * classes];
    for chunk in flat.chunks(batch_size) {
        let views: Vec<&Tensor<F>> = chunk.iter().map(|&(i, p)| &data[i].persons[p]).collect();
        let x = stack_views(&views)?;
        let mut tape = GradTape::new();
        let xv = tape.input(&x);
        let logits = model.forward(&mut tape, xv, &mut LayerCtx::eval())?;
        let out = tape.value(logits);
        let probs = softmax_axis(out.data(), out.shape(), 1);
        for (row, &(i, _)) in probs.chunks(classes).zip(chunk) {
            for (s, &v) in sums[i * classes..(i + 1) * classes].iter_mut().zip(row) {
                *s += v.to_f64();
            }
        }
    }
    for (i, ex) in data.iter().enumerate() {
        let m = ex.persons.len() as f64;
        for s in &mut sums[i * classes..(i + 1) * classes] {
            *s /= m;
        }
    }
    let scores = Tensor::from_parts(vec![data.len(), classes], sums);
    let labels: Vec<usize> = data.iter().map(|ex| ex.label).collect();
    let k = classes.min(5);
    let (top1, topk) = metrics_from_scores(&scores, &labels, k);
    Ok(Evaluation { top1, topk, k, scores, labels })
}

/// Sum of the two streams' softmax score vectors: each input row is a
/// logit vector, so every fused row sums to 2.
pub fn fuse_streams(s: &Tensor<f64>, t: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
    if s.shape() != t.shape() || s.rank() != 2 {
        return Err(TensorError::DimMismatch {
            op: "fuse_streams",
            lhs: s.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let ps = softmax_axis(s.data(), s.shape(), 1);
    let pt = softmax_axis(t.data(), t.shape(), 1);
    let fused: Vec<f64> = ps.iter().zip(&pt).map(|(a, b)| a + b).collect();
    Ok(Tensor::from_parts(s.shape().to_vec(), fused))
}

/// Element-wise sum of two already-softmaxed score tables (the fusion rule
/// applied to `Evaluation::scores`).
pub fn add_scores(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimMismatch {
            op: "add_scores",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let sum: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), sum))
}
