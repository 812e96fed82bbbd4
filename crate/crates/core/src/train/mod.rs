//! Training loop, evaluation and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod metrics;

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;

pub use adam::{Adam, AdamConfig};
pub use metrics::EvalReport;

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::{derive_index, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-3,
            adam: AdamConfig::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Per-epoch curves. Train loss/accuracy are running means over the epoch's
/// minibatches (before each update); validation numbers are measured after
/// the epoch with frozen weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Whether to keep training after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Check that labels fit the model and image sizes match its input.
pub fn check_dataset(model: &Model<f32>, ds: &Dataset) -> Result<()> {
    let k = model.config().num_classes;
    let s = model.config().input_size;
    for sample in &ds.samples {
        if sample.label >= k {
            return Err(Error::data(
                &sample.path,
                format!("label {} outside the model's {k} classes", sample.label),
            ));
        }
        let sh = sample.image.shape();
        if sh != [3, s, s] {
            return Err(Error::data(
                &sample.path,
                format!("image shape {sh:?}, model expects [3, {s}, {s}]"),
            ));
        }
    }
    Ok(())
}

pub fn train(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    train_with(model, train_set, val_set, cfg, |_, _| Control::Continue)
}

/// Train with a per-epoch callback that can stop the run early.
pub fn train_with(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &Model<f32>) -> Control,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    check_dataset(model, train_set)?;
    if let Some(v) = val_set {
        check_dataset(model, v)?;
    }
    let mut opt = Adam::new(cfg.adam, cfg.learning_rate, model.params().tensors());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let diverged = |cause: String| Error::Diverged {
            epoch,
            last_good: epoch.checked_sub(1),
            cause,
        };
        if cfg.shuffle {
            order.sort_unstable();
            order.shuffle(&mut rng_for(
                derive_index(cfg.seed, epoch as u64),
                "shuffle",
            ));
        }
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = train_set.batch(chunk)?;
            let mut g = Graph::new();
            let x = g.constant(images);
            let step = (|| {
                let pass = model.forward(&mut g, x)?;
                let loss = g.cross_entropy(pass.logits, &labels)?;
                g.backward(loss)?;
                Ok::<_, Error>((pass, loss))
            })();
            let (pass, loss) = match step {
                Ok(v) => v,
                Err(Error::NumericOverflow { op }) => {
                    return Err(diverged(format!("non-finite value in `{op}`")))
                }
                Err(e) => return Err(e),
            };
            let l = g.value(loss).data()[0] as f64;
            if !l.is_finite() {
                return Err(diverged("loss is not finite".into()));
            }
            loss_sum += l * chunk.len() as f64;
            correct += count_correct(g.value(pass.logits), &labels);
            let grads: Vec<Option<Tensor<f32>>> = pass.params.iter().map(|&v| g.grad(v)).collect();
            if grads.iter().flatten().any(|t| !t.all_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            opt.step(model.params_mut().tensors_mut(), &grads);
        }
        let n = train_set.len() as f64;
        let (val_loss, val_accuracy) = match val_set {
            Some(v) if !v.is_empty() => {
                let (l, a) = loss_and_accuracy(model, v, cfg.batch_size)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        };
        info!(
            "epoch {epoch}: train loss {:.4} acc {:.4} val acc {:?}",
            stats.train_loss, stats.train_accuracy, stats.val_accuracy
        );
        let control = on_epoch(&stats, model);
        history.push(stats);
        if control == Control::Stop {
            break;
        }
    }
    Ok(history)
}

/// Index of the largest logit per row; ties go to the lower class.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, t)| p == t)
        .count()
}

/// Mean cross-entropy and accuracy with frozen weights.
pub fn loss_and_accuracy(model: &Model<f32>, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
    check_dataset(model, ds)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in idx.chunks(batch.max(1)) {
        let (images, labels) = ds.batch(chunk)?;
        let mut g = Graph::inference();
        let x = g.constant(images);
        let pass = model.forward(&mut g, x)?;
        let l = g.cross_entropy(pass.logits, &labels)?;
        loss += g.value(l).data()[0] as f64 * chunk.len() as f64;
        correct += count_correct(g.value(pass.logits), &labels);
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Predicted class per sample, one forward pass per image. Returns the
/// predictions and the forward-pass wall time in seconds.
pub fn predict(model: &Model<f32>, ds: &Dataset) -> Result<(Vec<usize>, f64)> {
    check_dataset(model, ds)?;
    let mut preds = Vec::with_capacity(ds.len());
    let mut seconds = 0.0;
    for sample in &ds.samples {
        let img = sample.image.clone().reshape(&{
            let s = sample.image.shape();
            [1, s[0], s[1], s[2]]
        })?;
        let t0 = Instant::now();
        let logits = model.predict_logits(&img)?;
        seconds += t0.elapsed().as_secs_f64();
        preds.push(argmax_rows(&logits)[0]);
    }
    Ok((preds, seconds))
}

/// Batch-1 evaluation over a labelled set.
pub fn evaluate(model: &Model<f32>, ds: &Dataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let (preds, seconds) = predict(model, ds)?;
    let throughput = if seconds > 0.0 {
        ds.len() as f64 / seconds
    } else {
        f64::INFINITY
    };
    debug!("evaluated {} images in {seconds:.3}s", ds.len());
    let names: Vec<String> = if ds.class_names.len() == model.config().num_classes {
        ds.class_names.clone()
    } else {
        (0..model.config().num_classes)
            .map(|c| format!("class{c}"))
            .collect()
    };
    EvalReport::from_predictions(&names, &ds.labels(), &preds, throughput)
}
