//! Training loop: loss, optimizers, early stopping and resumable state.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use transdae_tensor::{Graph, Scalar, Tensor, Var};

use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::metrics::{mean_foreground_dice, LabelMask};
use crate::model::{Model, ModelConfig, Network};
use crate::nn::{InitScheme, ModelParams};

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum.
    #[default]
    Sgd,
    /// Adam with decoupled weight decay: the decay shrinks weights directly
    /// instead of entering the moment estimates, where the per-coordinate
    /// normalisation would turn it into a full-size step on any parameter
    /// whose loss gradient is small.
    Adam,
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at epoch 1 down to zero after `max_epochs`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// L2 penalty added to every gradient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Validation Dice changes smaller than this count as "unchanged".
    pub early_stop_tolerance: f64,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 1e-4,
            batch_size: 8,
            max_epochs: 400,
            early_stop_patience: 10,
            early_stop_tolerance: 1e-4,
            lambda_ce: 0.5,
            lambda_dice: 0.5,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            init: InitScheme::Default,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate used during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.max_epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if self.early_stop_tolerance.is_nan() || self.early_stop_tolerance < 0.0 {
            return bad("early_stop_tolerance must be >= 0".into());
        }
        if self.lambda_ce < 0.0 || self.lambda_dice < 0.0 || self.lambda_ce + self.lambda_dice <= 0.0 {
            return bad(format!(
                "loss weights ({}, {}) must be >= 0 and not both zero",
                self.lambda_ce, self.lambda_dice
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

/// `1 - mean_{b,k} (2 |P_bk G_bk| + s) / (|P_bk| + |G_bk| + s)` over every
/// sample `b` (leading axis of rank-3+ logits) and every class `k`, with `P`
/// the softmax probabilities and `G` the one-hot labels.
///
/// Scoring each image separately mirrors the evaluation metric, where a class
/// absent from an image scores 1 only if nothing is predicted for it. The
/// unit smoothing term keeps a gradient on stray probability mass in that case.
pub fn soft_dice_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let k = *shape.last().unwrap_or(&0);
    let rows = shape.iter().product::<usize>() / k.max(1);
    if labels.len() != rows || k == 0 {
        return Err(Error::Dimension(format!(
            "{} labels for logits {shape:?}",
            labels.len()
        )));
    }
    let samples = if shape.len() > 2 { shape[0] } else { 1 };
    let per = rows / samples.max(1);
    let flat = g.reshape(logits, &[samples, per, k])?;
    let probs = g.softmax(flat, 2)?;
    let mut onehot = Tensor::zeros([samples, per, k]);
    let mut counts = vec![T::zero(); samples * k];
    for (r, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Contract(format!("label {l} out of range for {k} classes")));
        }
        onehot.data_mut()[r * k + l] = T::one();
        counts[(r / per) * k + l] += T::one();
    }
    let onehot = g.constant(onehot);
    let counts = g.constant(Tensor::new([samples, k], counts)?);
    let inter = g.mul(probs, onehot)?;
    let inter = g.sum_axis(inter, 1)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let psum = g.sum_axis(probs, 1)?;
    let den = g.add(psum, counts)?;
    let den = g.add_scalar(den, DICE_SMOOTH)?;
    let ratio = g.div(num, den)?;
    let mean = g.mean(ratio)?;
    let neg = g.scale(mean, -1.0)?;
    Ok(g.add_scalar(neg, 1.0)?)
}

/// `lambda_ce * CE + lambda_dice * soft Dice`.
pub fn segmentation_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    lambda_ce: f64,
    lambda_dice: f64,
) -> Result<Var> {
    let ce = g.cross_entropy(logits, labels)?;
    let dice = soft_dice_loss(g, logits, labels)?;
    let a = g.scale(ce, lambda_ce)?;
    let b = g.scale(dice, lambda_dice)?;
    Ok(g.add(a, b)?)
}

/// Optimizer hyperparameters plus per-parameter slot buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T: Scalar> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// SGD: `momentum/<name>`; Adam: `m/<name>` and `v/<name>`.
    pub slots: ModelParams<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: ModelParams::new(),
        }
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn apply(&mut self, params: &mut ModelParams<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let lr = T::from_f64(self.lr);
        let wd = T::from_f64(self.weight_decay);
        let mu = T::from_f64(self.momentum);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let bias1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let eps = T::from_f64(self.eps);
        for (name, p) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            if grad.shape() != p.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    grad.shape(),
                    p.shape()
                )));
            }
            let slot = |prefix: &str| format!("{prefix}/{name}");
            match self.kind {
                OptimizerKind::Sgd => {
                    let key = slot("momentum");
                    if self.slots.get(&key).is_none() {
                        self.slots.insert(key.clone(), Tensor::zeros(p.shape().to_vec()));
                    }
                    let buf = self.slots.get_mut(&key).expect("inserted").data_mut();
                    for ((w, &g), b) in p.data_mut().iter_mut().zip(grad.data()).zip(buf) {
                        let g = g + wd * *w;
                        *b = mu * *b + g;
                        *w -= lr * *b;
                    }
                }
                OptimizerKind::Adam => {
                    let (km, kv) = (slot("m"), slot("v"));
                    for k in [&km, &kv] {
                        if self.slots.get(k).is_none() {
                            self.slots.insert(k.clone(), Tensor::zeros(p.shape().to_vec()));
                        }
                    }
                    let mut m = self.slots.get(&km).expect("inserted").clone();
                    let mut v = self.slots.get(&kv).expect("inserted").clone();
                    for (((w, &g), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *w -= lr * wd * *w;
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mhat = *m / bias1;
                        let vhat = *v / bias2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                    self.slots.insert(km, m);
                    self.slots.insert(kv, v);
                }
            }
        }
        Ok(())
    }
}

/// Stops once the monitored value has stayed within `tolerance` of the
/// previous epoch's value for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub tolerance: f64,
    pub last: Option<f64>,
    pub unchanged: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, tolerance: f64) -> Self {
        EarlyStopping {
            patience,
            tolerance,
            last: None,
            unchanged: 0,
        }
    }

    /// Records one epoch's value; returns true when training should stop.
    pub fn observe(&mut self, value: f64) -> bool {
        match self.last {
            Some(prev) if (value - prev).abs() < self.tolerance => self.unchanged += 1,
            _ => self.unchanged = 0,
        }
        self.last = Some(value);
        self.unchanged >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

impl RunLog {
    /// Equality ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &RunLog) -> bool {
        let strip = |r: &RunLog| {
            let mut r = r.clone();
            r.epochs.iter_mut().for_each(|e| e.wall_seconds = 0.0);
            r
        };
        strip(self) == strip(other)
    }
}

/// Everything besides parameters and history needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub train: TrainConfig,
    pub optimizer_step: u64,
    pub early_stop: EarlyStopping,
    pub best_val_dice: Option<f64>,
    pub best_epoch: usize,
    pub stopped: Option<StopReason>,
}

/// Shuffle seed for one epoch, a pure function of the run seed and epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Mean loss and argmax predictions of `model` over `data`.
pub fn evaluate_loss<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    batch_size: usize,
    lambda_ce: f64,
    lambda_dice: f64,
) -> Result<(f64, Vec<LabelMask>)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(data.len());
    for batch in batch_iter(data.len(), batch_size, None)? {
        let mut g = Graph::new();
        let bound = model.params.bind_frozen(&mut g);
        let net = Network::bind(&model.config, &bound)?;
        let x = g.constant(data.images::<T>(&batch)?);
        let out = net.forward(&mut g, x)?;
        let loss = segmentation_loss(&mut g, out.logits, &data.labels(&batch), lambda_ce, lambda_dice)?;
        total += g.value(loss).item()?.as_f64() * batch.len() as f64;
        let logits = g.value(out.logits);
        let (h, w) = model.config.input_size;
        for chunk in logits.argmax_last().chunks(h * w) {
            preds.push(LabelMask::new(vec![h, w], chunk.iter().map(|&l| l as u8).collect())?);
        }
    }
    Ok((total / data.len() as f64, preds))
}

pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    pub early_stop: EarlyStopping,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub best_val_dice: Option<f64>,
    pub best_epoch: usize,
    /// Parameters at the best validation epoch seen by this process.
    pub best_params: Option<ModelParams<T>>,
    pub stopped: Option<StopReason>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone(), config.seed, config.init)?;
        Ok(Trainer {
            optimizer: Optimizer::new(&config),
            early_stop: EarlyStopping::new(config.early_stop_patience, config.early_stop_tolerance),
            model,
            config,
            epoch: 0,
            history: Vec::new(),
            best_val_dice: None,
            best_epoch: 0,
            best_params: None,
            stopped: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint<T>) -> Result<Self> {
        let state = ckpt.header.training.clone().ok_or_else(|| {
            Error::Contract("checkpoint carries no training state; it cannot be resumed".into())
        })?;
        let mut optimizer = Optimizer::new(&state.train);
        optimizer.step = state.optimizer_step;
        optimizer.slots = ckpt.optimizer.clone();
        Ok(Trainer {
            model: ckpt.model()?,
            config: state.train,
            optimizer,
            early_stop: state.early_stop,
            epoch: ckpt.header.epoch,
            history: ckpt.header.history.clone(),
            best_val_dice: state.best_val_dice,
            best_epoch: state.best_epoch,
            best_params: None,
            stopped: state.stopped,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ckpt = Checkpoint::new(&self.model, self.epoch, self.config.seed);
        ckpt.header.history = self.history.clone();
        ckpt.header.training = Some(TrainingState {
            train: self.config.clone(),
            optimizer_step: self.optimizer.step,
            early_stop: self.early_stop.clone(),
            best_val_dice: self.best_val_dice,
            best_epoch: self.best_epoch,
            stopped: self.stopped,
        });
        ckpt.optimizer = self.optimizer.slots.clone();
        ckpt
    }

    /// One pass over `train`; returns the mean training loss.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<f64> {
        self.optimizer.lr = self.config.lr_at(self.epoch);
        let cfg = &self.config;
        let shuffle = epoch_seed(cfg.seed, self.epoch);
        let batches = batch_iter(train.len(), cfg.batch_size, Some(shuffle))?;
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let loss = self.train_step(train, batch).map_err(|e| {
                if e.is_numeric() {
                    Error::Numeric(format!(
                        "epoch {}, batch {bi} (shuffle seed {shuffle}, samples {batch:?}): {e}",
                        self.epoch + 1
                    ))
                } else {
                    e
                }
            })?;
            total += loss * batch.len() as f64;
        }
        Ok(total / train.len() as f64)
    }

    fn train_step(&mut self, data: &Dataset, batch: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.model.params.bind(&mut g);
        let net = Network::bind(&self.model.config, &bound)?;
        let x = g.constant(data.images::<T>(batch)?);
        let out = net.forward(&mut g, x)?;
        let labels = data.labels(batch);
        let loss = segmentation_loss(&mut g, out.logits, &labels, self.config.lambda_ce, self.config.lambda_dice)?;
        let value = g.value(loss).item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        let grads = g.backward(loss)?;
        let named = bound
            .iter()
            .map(|(name, v)| Ok((name.to_string(), grads.wrt(v)?.clone())))
            .collect::<Result<BTreeMap<_, _>>>()?;
        self.optimizer.apply(&mut self.model.params, &named)?;
        Ok(value)
    }

    /// Trains one epoch, validates and updates early stopping. Returns the
    /// epoch's log entry.
    pub fn step_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochLog> {
        let start = Instant::now();
        let lr = self.config.lr_at(self.epoch);
        let train_loss = self.train_epoch(train)?;
        let (val_loss, preds) = evaluate_loss(
            &self.model,
            val,
            self.config.batch_size,
            self.config.lambda_ce,
            self.config.lambda_dice,
        )?;
        let val_dice = mean_foreground_dice(&preds, &val.masks(), self.model.config.num_classes)?;
        self.epoch += 1;
        if self.best_val_dice.is_none_or(|b| val_dice > b) {
            self.best_val_dice = Some(val_dice);
            self.best_epoch = self.epoch;
            self.best_params = Some(self.model.params.clone());
        }
        if self.early_stop.observe(val_dice) {
            self.stopped = Some(StopReason::EarlyStop);
        } else if self.epoch >= self.config.max_epochs {
            self.stopped = Some(StopReason::MaxEpochs);
        }
        let log = EpochLog {
            epoch: self.epoch,
            train_loss,
            val_loss,
            val_dice,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.history.push(log.clone());
        Ok(log)
    }

    /// Runs until early stopping or `max_epochs`. `on_epoch` sees the trainer
    /// after every epoch (e.g. to write checkpoints).
    pub fn run(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        mut on_epoch: impl FnMut(&Trainer<T>) -> Result<()>,
    ) -> Result<RunLog> {
        while self.stopped.is_none() && self.epoch < self.config.max_epochs {
            self.step_epoch(train, val)?;
            on_epoch(self)?;
        }
        Ok(self.run_log())
    }

    pub fn run_log(&self) -> RunLog {
        RunLog {
            epochs: self.history.clone(),
            stop_reason: self.stopped.unwrap_or(StopReason::MaxEpochs),
            best_epoch: self.best_epoch,
            best_val_dice: self.best_val_dice.unwrap_or(0.0),
        }
    }
}
