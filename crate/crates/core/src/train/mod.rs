//! SGD with momentum, step learning-rate schedule, the epoch loop, checkpoints and resume.

mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{gradcheck, gradcheck_with_fault, GradcheckOptions, GradcheckReport, TensorCheck};

use crate::autograd::Graph;
use crate::data::{augment, AugmentPolicy, LabeledDataset};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::{Model, Param};
use crate::ops::BnMode;
use crate::tensor::Tensor;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_decay`.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "TrainConfig::default_decay")]
    pub lr_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub augment: Option<AugmentPolicy>,
    /// Keep attention parameters at their initial values.
    #[serde(default)]
    pub freeze_attention: bool,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Run each step on a single-threaded pool.
    #[serde(default = "default_true")]
    pub deterministic: bool,
}

impl TrainConfig {
    fn default_decay() -> f64 {
        0.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay must be in (0, 1), got {}", self.lr_decay));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    pub fn hyper(&self, epoch: usize) -> SgdHyper {
        SgdHyper { lr: self.lr_at(epoch), momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 30,
            lr_milestones: Vec::new(),
            lr_decay: 0.1,
            seed: 0,
            augment: None,
            freeze_attention: false,
            shuffle: true,
            deterministic: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One velocity buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T: Element = f32> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Element> SgdState<T> {
    pub fn zeros(params: &[Param<T>]) -> Self {
        Self { velocity: params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect() }
    }
}

/// `v ← μv + g + λp` (λ only on decaying weights), then `p ← p − lr·v`.
/// Parameters whose gradient is `None` are left untouched, velocity included.
pub fn sgd_step<T: Element>(params: &mut [Param<T>], grads: &[Option<Vec<T>>], state: &mut SgdState<T>, hyper: SgdHyper) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::SizeMismatch(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if let Some(g) = g {
            if g.len() != p.value.numel() || v.len() != p.value.numel() {
                return Err(Error::SizeMismatch(format!("gradient or velocity of {} has the wrong length", p.name)));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::DivergedTraining(format!("non-finite gradient for {}", p.name)));
            }
        }
    }
    let lr = T::from_f64_lossy(hyper.lr);
    let mu = T::from_f64_lossy(hyper.momentum);
    let wd = T::from_f64_lossy(hyper.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let Some(g) = g else { continue };
        let decay = p.role.decays() && hyper.weight_decay != 0.0;
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            let mut step = mu * *vi + gi;
            if decay {
                step = step + wd * *w;
            }
            *vi = step;
            *w = *w - lr * step;
        }
    }
    Ok(())
}

/// Mean loss and gradients of one training-mode step. Batch statistics are folded into the model.
pub fn loss_and_grads(model: &mut Model<f32>, images: &Tensor<f32>, labels: &[usize]) -> Result<(f32, usize, Vec<Option<Vec<f32>>>)> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(images.clone());
    let out = model.forward_graph(&mut g, x, BnMode::Train)?;
    let logits = out.forward.logits;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let value = g.value(loss)?.data()[0];
    let correct = count_correct(g.value(logits)?.data(), labels);
    let mut grads = g.backward(loss)?;
    let grads = out.forward.params.iter().map(|&v| grads.take(v)).collect();
    model.apply_batch_stats(&out.batch_stats)?;
    Ok((value, correct, grads))
}

fn count_correct(logits: &[f32], labels: &[usize]) -> usize {
    let k = logits.len() / labels.len().max(1);
    logits
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b }) == l)
        .count()
}

/// Evaluation-mode error rate, in batches.
pub fn evaluate(model: &Model<f32>, data: &LabeledDataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.logits(&x)?;
        correct += count_correct(logits.data(), &y);
    }
    Ok(1.0 - correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
    pub lr: f64,
    /// Wall-clock time; not persisted, so saved state stays reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// `epoch,train_loss,train_err,test_err,lr`. Wall-clock time is left out so the file is
    /// reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_err,test_err,lr\n");
        for r in &self.epochs {
            let test = r.test_err.map(|e| format!("{e:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{:.6},{:.6},{},{:.6e}\n", r.epoch, r.train_loss, r.train_err, test, r.lr));
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    config: TrainConfig,
    next_epoch: usize,
    best_err: Option<f64>,
    history: TrainHistory,
}

const LAST_DIR: &str = "last";
const BEST_DIR: &str = "best";
const STATE_FILE: &str = "trainer.json";
pub const HISTORY_FILE: &str = "history.csv";

/// Owns a model, its optimizer state and the history of one run.
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub state: SgdState<f32>,
    pub history: TrainHistory,
    next_epoch: usize,
    best_err: Option<f64>,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = SgdState::zeros(model.params());
        Ok(Self { model, config, state, history: TrainHistory::default(), next_epoch: 0, best_err: None, out_dir: None })
    }

    /// Writes `last/` after every epoch, `best/` whenever the monitored error improves, and the
    /// history CSV under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    /// Runs one epoch. The shuffle and augmentation streams depend only on the seed and the
    /// epoch index, so a resumed run continues exactly.
    pub fn run_epoch(&mut self, train: &LabeledDataset, test: Option<&LabeledDataset>) -> Result<&EpochRecord> {
        if self.config.deterministic {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| Error::InvalidConfig(e.to_string()))?;
            pool.install(|| self.epoch(train, test))?;
        } else {
            self.epoch(train, test)?;
        }
        Ok(self.history.epochs.last().expect("epoch ran"))
    }

    fn epoch(&mut self, train: &LabeledDataset, test: Option<&LabeledDataset>) -> Result<()> {
        if train.num_classes > self.model.num_classes() {
            return Err(Error::InvalidConfig(format!(
                "dataset has {} classes, model outputs {}",
                train.num_classes,
                self.model.num_classes()
            )));
        }
        let epoch = self.next_epoch;
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        if self.config.shuffle {
            order.shuffle(&mut rng);
        }
        let hyper = self.config.hyper(epoch);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let (mut x, y) = train.batch(chunk)?;
            if let Some(policy) = self.config.augment {
                x = augment(&x, policy, &mut rng)?;
            }
            let (loss, ok, mut grads) = loss_and_grads(&mut self.model, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::DivergedTraining(format!("loss is {loss} in epoch {epoch}")));
            }
            if self.config.freeze_attention {
                for (g, p) in grads.iter_mut().zip(self.model.params()) {
                    if p.role.is_attention() {
                        *g = None;
                    }
                }
            }
            sgd_step(self.model.params_mut(), &grads, &mut self.state, hyper)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += ok;
        }
        let n = train.len().max(1) as f64;
        let test_err = test.map(|t| evaluate(&self.model, t, self.config.batch_size)).transpose()?;
        self.history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_err: 1.0 - correct as f64 / n,
            test_err,
            lr: hyper.lr,
            seconds: start.elapsed().as_secs_f64(),
        });
        self.next_epoch += 1;
        let record = self.history.epochs.last().expect("just pushed");
        let monitored = record.test_err.unwrap_or(record.train_err);
        let improved = self.best_err.is_none_or(|b| monitored < b);
        if improved {
            self.best_err = Some(monitored);
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save_state(&dir.join(LAST_DIR))?;
            if improved {
                self.model.save(dir.join(BEST_DIR))?;
            }
            fs::write(dir.join(HISTORY_FILE), self.history.to_csv())?;
        }
        Ok(())
    }

    /// Trains until `config.epochs` epochs have run.
    pub fn run(&mut self, train: &LabeledDataset, test: Option<&LabeledDataset>) -> Result<&TrainHistory> {
        while self.next_epoch < self.config.epochs {
            self.run_epoch(train, test)?;
        }
        Ok(&self.history)
    }

    /// Model checkpoint plus velocity buffers and loop state.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        for (i, (v, p)) in self.state.velocity.iter().zip(self.model.params()).enumerate() {
            Tensor::new(p.value.shape().to_vec(), v.clone())?.save(dir.join(format!("v{i:04}.crat")))?;
        }
        let state = TrainerState {
            config: self.config.clone(),
            next_epoch: self.next_epoch,
            best_err: self.best_err,
            history: self.history.clone(),
        };
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&state)?)?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save_state`] (or the `last/` directory of a run).
    pub fn resume(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let model = Model::load(dir)?;
        let state: TrainerState = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)?;
        let mut velocity = Vec::with_capacity(model.params().len());
        for (i, p) in model.params().iter().enumerate() {
            let v: Tensor<f32> = Tensor::load(dir.join(format!("v{i:04}.crat")))?;
            if v.shape() != p.value.shape() {
                return Err(Error::CorruptTensorFile(format!("velocity {i} does not match {}", p.name)));
            }
            velocity.push(v.into_data());
        }
        let mut t = Trainer::new(model, state.config)?;
        t.state = SgdState { velocity };
        t.next_epoch = state.next_epoch;
        t.best_err = state.best_err;
        t.history = state.history;
        Ok(t)
    }
}
