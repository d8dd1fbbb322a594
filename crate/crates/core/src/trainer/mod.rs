//! Mini-batch Adam training with plateau scheduling, early stopping and
//! best-weight restoration.

mod adam;
mod callbacks;
mod split;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use callbacks::{early_stopping, reduce_lr_on_plateau, EarlyStopping, ReduceLrOnPlateau};
pub use split::stratified_split;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::ParamStore;
use crate::config::{parse_value, KeyValues};
use crate::datagen::LabeledImageSet;
use crate::error::{Error, Result};
use crate::layers::{images_to_tensor, FeatureTap, Model};
use crate::losses::{cross_entropy, total_loss_graph, DEFAULT_LAMBDA_FS};
use crate::tensor::{Graph, Tensor};

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lambda_fs: f64,
    /// Activation the smoothing loss acts on; `None` picks the model's
    /// default tap.
    pub fsl_layer: Option<FeatureTap>,
    pub rlrop_patience: usize,
    pub rlrop_factor: f64,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 30,
            lambda_fs: DEFAULT_LAMBDA_FS,
            fsl_layer: None,
            rlrop_patience: 5,
            rlrop_factor: 0.5,
            early_stop_patience: 10,
            min_delta: 1e-4,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "learning_rate",
        "batch_size",
        "max_epochs",
        "lambda_fs",
        "fsl_layer",
        "rlrop_patience",
        "rlrop_factor",
        "early_stop_patience",
        "min_delta",
        "val_fraction",
        "seed",
    ];

    /// Applies one setting; returns `false` if the key is not a trainer key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "lambda_fs" => self.lambda_fs = parse_value(key, value)?,
            "fsl_layer" => {
                self.fsl_layer = match value {
                    "auto" => None,
                    other => Some(other.parse()?),
                }
            }
            "rlrop_patience" => self.rlrop_patience = parse_value(key, value)?,
            "rlrop_factor" => self.rlrop_factor = parse_value(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse_value(key, value)?,
            "min_delta" => self.min_delta = parse_value(key, value)?,
            "val_fraction" => self.val_fraction = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn write_into(&self, kv: &mut KeyValues) {
        kv.set("learning_rate", self.learning_rate);
        kv.set("batch_size", self.batch_size);
        kv.set("max_epochs", self.max_epochs);
        kv.set("lambda_fs", self.lambda_fs);
        kv.set("fsl_layer", self.fsl_layer.map_or("auto", FeatureTap::name));
        kv.set("rlrop_patience", self.rlrop_patience);
        kv.set("rlrop_factor", self.rlrop_factor);
        kv.set("early_stop_patience", self.early_stop_patience);
        kv.set("min_delta", self.min_delta);
        kv.set("val_fraction", self.val_fraction);
        kv.set("seed", self.seed);
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if !(self.lambda_fs >= 0.0 && self.lambda_fs.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_fs must be non-negative, got {}",
                self.lambda_fs
            )));
        }
        if self.min_delta.is_nan() || self.min_delta < 0.0 {
            return Err(Error::Config("min_delta must be non-negative".into()));
        }
        ReduceLrOnPlateau::new(self.rlrop_patience, self.rlrop_factor, self.min_delta)?;
        EarlyStopping::new(self.early_stop_patience, self.min_delta)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss; 0 if no epoch
    /// completed.
    pub best_epoch: usize,
    pub best_weights: ParamStore,
    pub stopped_early: bool,
}

impl TrainRun {
    pub fn val_losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.val_loss).collect()
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.history.get(self.best_epoch.checked_sub(1)?)
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.history {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
            );
        }
        out
    }
}

/// Splits `data` with `config.val_fraction` and trains on the larger part.
pub fn fit(model: &mut Model, data: &LabeledImageSet, config: &TrainConfig) -> Result<TrainRun> {
    let (train, val) = stratified_split(data, config.val_fraction, config.seed)?;
    fit_split(model, &train, &val, config, |_| {})
}

fn batch_pixels(set: &LabeledImageSet, idx: &[usize]) -> Vec<f32> {
    let mut px = Vec::with_capacity(idx.len() * set.image_len());
    for &i in idx {
        px.extend_from_slice(set.image(i));
    }
    px
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Cross-entropy and accuracy of `model` in inference mode.
pub fn evaluate_loss(model: &Model, set: &LabeledImageSet) -> Result<(f64, f64)> {
    let inf = model.infer(&set.pixels, set.len())?;
    let probs = Tensor::new(vec![set.len(), inf.classes], inf.probs.clone())?;
    Ok((
        cross_entropy(&probs, &set.labels)?,
        accuracy(&inf.predictions(), &set.labels),
    ))
}

/// Trains `model` on `train`, monitoring `val`. `on_epoch` sees each
/// finished epoch. On return the model holds the best-epoch weights.
pub fn fit_split(
    model: &mut Model,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    if (train.height, train.width) != model.spec.input_hw || (val.height, val.width) != model.spec.input_hw {
        return Err(Error::shape(
            "fit",
            &[model.spec.input_hw.0, model.spec.input_hw.1],
            &[train.height, train.width],
        ));
    }
    let tap = config.fsl_layer.unwrap_or_else(|| model.spec.feature_tap());
    if !model.spec.has_tap(tap) {
        return Err(Error::Config(format!(
            "model has no `{tap}` layer for the smoothing loss"
        )));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let sizes: Vec<usize> = model.spec.trainable().iter().map(|(_, s)| s.iter().product()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut plateau = ReduceLrOnPlateau::new(config.rlrop_patience, config.rlrop_factor, config.min_delta)?;
    let mut stopper = EarlyStopping::new(config.early_stop_patience, config.min_delta)?;
    let (h, w) = model.spec.input_hw;

    let mut run = TrainRun {
        history: Vec::new(),
        best_epoch: 0,
        best_weights: model.params.clone(),
        stopped_early: false,
    };
    let diverged = |run: &TrainRun, epoch: usize, reason: String| Error::Diverged {
        epoch,
        reason,
        partial: Box::new(run.clone()),
    };

    let mut lr = config.learning_rate;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for idx in order.chunks(config.batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(images_to_tensor(&batch_pixels(train, idx), idx.len(), h, w)?);
            let fwd = model.forward(&mut g, x, true, true, &mut dropout_rng)?;
            let features = fwd.tap(tap).expect("tap presence checked");
            let loss = total_loss_graph(&mut g, fwd.probs, features, &labels, config.lambda_fs)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(diverged(&run, epoch, format!("batch loss is {value}")));
            }
            g.backward(loss)?;

            let probs = g.value(fwd.probs).data();
            let classes = model.spec.classes();
            for (row, &label) in probs.chunks_exact(classes).zip(&labels) {
                let pred = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &p)| if p > b.1 { (i, p) } else { b })
                    .0;
                hits += usize::from(pred == label);
            }
            loss_sum += value * idx.len() as f64;

            let grads: Vec<&[f64]> = fwd
                .params
                .iter()
                .map(|(_, v)| g.grad(*v).expect("parameters are tracked"))
                .collect();
            let names: Vec<&str> = fwd.params.iter().map(|(n, _)| n.as_str()).collect();
            let mut slices = model.params.slices_mut(&names)?;
            if let Err(e) = adam_step(&mut slices, &grads, &mut adam, lr) {
                return Err(diverged(&run, epoch, e.to_string()));
            }
            model.update_running_stats(&g, &fwd);
        }

        let (val_loss, val_acc) = evaluate_loss(model, val)?;
        if !val_loss.is_finite() {
            return Err(diverged(&run, epoch, format!("validation loss is {val_loss}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            val_loss,
            val_acc,
            lr,
        };
        on_epoch(&record);
        run.history.push(record);
        let stop = stopper.update(epoch, val_loss);
        if stopper.best_epoch() == epoch {
            run.best_epoch = epoch;
            run.best_weights = model.params.clone();
        }
        lr = plateau.step(val_loss, lr);
        if stop {
            run.stopped_early = true;
            break;
        }
    }
    model.params = run.best_weights.clone();
    Ok(run)
}
