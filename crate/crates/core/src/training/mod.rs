//! Optimization over a generated dataset: the three-term magnitude loss,
//! single-clip Adam steps, seeded epochs with validation, and checkpoints
//! that carry everything needed to resume bit-exactly.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointConfig, ModelCheckpoint, Precision,
    RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::stft;
use crate::error::{Error, Result};
use crate::model::{magnitude_tensor, Model, ModelConfig, ModelInput};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::scene::{Dataset, Sample, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Seeds parameter initialization, epoch shuffling and drop-path draws.
    pub seed: u64,
    /// Clips whose gradients are averaged before each optimizer step.
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            epochs: 50,
            seed: 0,
            batch: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it freezes the parameters, which is useful for
        // checking the bookkeeping around an optimizer step.
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// `MSE(Ŝ_M, S_M) + MSE(Ŝ_L, S_L) + MSE(Ŝ_R, S_R)` where the mid channel is
/// the average of left and right.
pub fn compute_loss(g: &mut Graph, pred_l: Var, pred_r: Var, target_l: Var, target_r: Var) -> Result<Var> {
    let shape = g.shape(pred_l).to_vec();
    for v in [pred_r, target_l, target_r] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::shape("compute_loss", &shape, g.shape(v)));
        }
    }
    let pm = g.add(pred_l, pred_r)?;
    let pm = g.scale(pm, 0.5);
    let tm = g.add(target_l, target_r)?;
    let tm = g.scale(tm, 0.5);
    let mid = g.mse(pm, tm)?;
    let left = g.mse(pred_l, target_l)?;
    let right = g.mse(pred_r, target_r)?;
    let lr = g.add(left, right)?;
    g.add(mid, lr)
}

/// Loss of plain tensors, evaluated without recording gradients.
pub fn loss_value(pred_l: &Tensor, pred_r: &Tensor, target_l: &Tensor, target_r: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let vars = [pred_l, pred_r, target_l, target_r].map(|t| g.constant(t.clone()));
    let loss = compute_loss(&mut g, vars[0], vars[1], vars[2], vars[3])?;
    Ok(g.value(loss).item())
}

/// A sample turned into network inputs and target magnitudes.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: usize,
    pub input: ModelInput,
    pub target_left: Tensor,
    pub target_right: Tensor,
}

impl Example {
    pub fn new(cfg: &ModelConfig, sample: &Sample, diagonal: f64) -> Result<Self> {
        if sample.target.num_channels() != 2 {
            return Err(Error::Data(format!("sample {} target is not binaural", sample.id)));
        }
        let input = ModelInput::from_audio(cfg, &sample.priors, &sample.pose, diagonal, sample.source.channel(0))?;
        let mag = |ch: usize| -> Result<Tensor> { Ok(magnitude_tensor(&stft(sample.target.channel(ch), cfg.stft)?.magnitude())) };
        Ok(Self {
            id: sample.id,
            input,
            target_left: mag(0)?,
            target_right: mag(1)?,
        })
    }

    /// Prepares every sample of `split`, in dataset order.
    pub fn from_split(cfg: &ModelConfig, ds: &Dataset, split: Split) -> Result<Vec<Self>> {
        let diag = ds.scene.room.diagonal();
        ds.split(split).into_iter().map(|s| Self::new(cfg, s, diag)).collect()
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// One-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,train_loss,val_loss";

pub fn format_loss_log(rows: &[EpochLog]) -> String {
    let mut s = format!("{LOSS_LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:e},{:e}\n", r.epoch, r.train_loss, r.val_loss));
    }
    s
}

/// What [`Trainer::fit`] reports back.
#[derive(Clone, Debug)]
pub struct FitReport {
    /// Validation loss of the parameters before the first optimizer step.
    pub initial_val_loss: f64,
    /// Rows of every epoch so far, including those from before a resume.
    pub log: Vec<EpochLog>,
    /// Parameters with the lowest validation loss reached during this call.
    pub best: Option<ModelCheckpoint>,
}

/// Model, optimizer and random state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_loss: f64,
    pub initial_val_loss: Option<f64>,
    pub log: Vec<EpochLog>,
    /// Total train steps taken, one per clip.
    pub steps: u64,
    pending: usize,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, cfg.seed)?;
        Ok(Self::with_model(model, cfg.clone()))
    }

    /// Starts from an existing model, e.g. one modified after construction.
    pub fn with_model(model: Model, cfg: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let adam = AdamState::new(&model.store);
        Self {
            model,
            cfg,
            adam,
            rng,
            epoch: 0,
            best_val_loss: f64::INFINITY,
            initial_val_loss: None,
            log: Vec::new(),
            steps: 0,
            pending: 0,
        }
    }

    /// Runs the forward pass and the loss for one example.
    fn forward_loss(&mut self, g: &mut Graph, ex: &Example, training: bool) -> Result<Var> {
        let out = self.model.net.forward(g, &self.model.store, &ex.input, training, &mut self.rng)?;
        let tl = g.constant(ex.target_left.clone());
        let tr = g.constant(ex.target_right.clone());
        compute_loss(g, out.left, out.right, tl, tr)
    }

    /// Forward, loss, backward and (once `batch` clips have accumulated) an
    /// Adam update. Returns the clip's loss.
    pub fn train_step(&mut self, ex: &Example) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.forward_loss(&mut g, ex, true)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is {value} at epoch {}, step {}, sample {}",
                self.epoch + 1,
                self.steps + 1,
                ex.id
            )));
        }
        g.backward_params(loss, &mut self.model.store)?;
        drop(g);
        self.model.store.grads_finite().map_err(|e| {
            Error::Numeric(format!("{e} at epoch {}, step {}, sample {}", self.epoch + 1, self.steps + 1, ex.id))
        })?;
        self.steps += 1;
        self.pending += 1;
        if self.pending == self.cfg.batch {
            self.apply_update()?;
        }
        Ok(value)
    }

    fn apply_update(&mut self) -> Result<()> {
        if self.pending == 0 {
            return Ok(());
        }
        if self.pending > 1 {
            let s = 1.0 / self.pending as f64;
            for p in self.model.store.params_mut() {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        adam_step(&mut self.model.store, &mut self.adam, &self.cfg.adam())?;
        self.model.store.zero_grads();
        self.pending = 0;
        Ok(())
    }

    /// Mean eval-mode loss over `examples`. Draws no random numbers.
    pub fn validation_loss(&mut self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Data("validation split is empty".into()));
        }
        let mut total = 0.0;
        for ex in examples {
            let mut g = Graph::new();
            let loss = self.forward_loss(&mut g, ex, false)?;
            total += g.value(loss).item();
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("validation loss is {mean}")));
        }
        Ok(mean)
    }

    /// One shuffled pass over `train` followed by validation.
    pub fn run_epoch(&mut self, train: &[Example], val: &[Example]) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for &i in &order {
            total += self.train_step(&train[i])?;
        }
        self.apply_update()?;
        let val_loss = self.validation_loss(val)?;
        self.epoch += 1;
        let row = EpochLog {
            epoch: self.epoch,
            train_loss: total / train.len() as f64,
            val_loss,
        };
        self.log.push(row);
        Ok(row)
    }

    /// Trains until `cfg.epochs` epochs are complete. `on_epoch` sees the
    /// trainer after every epoch together with whether validation improved.
    pub fn fit(
        &mut self,
        train: &[Example],
        val: &[Example],
        mut on_epoch: impl FnMut(&Trainer, &EpochLog, bool) -> Result<()>,
    ) -> Result<FitReport> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let initial = match self.initial_val_loss {
            Some(v) => v,
            None => {
                let v = self.validation_loss(val)?;
                self.initial_val_loss = Some(v);
                v
            }
        };
        let mut best = None;
        while self.epoch < self.cfg.epochs {
            let row = self.run_epoch(train, val)?;
            let improved = row.val_loss < self.best_val_loss;
            if improved {
                self.best_val_loss = row.val_loss;
                best = Some(self.checkpoint()?);
            }
            log::info!(
                "epoch {}/{}: train {:.6e} val {:.6e}{}",
                row.epoch,
                self.cfg.epochs,
                row.train_loss,
                row.val_loss,
                if improved { " (best)" } else { "" }
            );
            on_epoch(self, &row, improved)?;
        }
        Ok(FitReport {
            initial_val_loss: initial,
            log: self.log.clone(),
            best,
        })
    }

    /// Snapshot of the complete training state.
    pub fn checkpoint(&self) -> Result<ModelCheckpoint> {
        if self.pending != 0 {
            return Err(Error::Checkpoint("cannot snapshot between accumulated steps".into()));
        }
        Ok(ModelCheckpoint {
            config: CheckpointConfig {
                model: self.model.cfg().clone(),
                train: self.cfg.clone(),
            },
            params: self
                .model
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
            epoch: self.epoch as u64,
            steps: self.steps,
            best_val_loss: self.best_val_loss,
            initial_val_loss: self.initial_val_loss,
            log: self.log.clone(),
        })
    }

    /// Rebuilds a trainer from a snapshot. The stored training config is
    /// used unless `cfg` overrides it; only the epoch budget may differ.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint, cfg: Option<&TrainConfig>) -> Result<Self> {
        let train_cfg = match cfg {
            Some(c) => {
                let mut expect = ckpt.config.train.clone();
                expect.epochs = c.epochs;
                if *c != expect {
                    return Err(Error::Config(format!(
                        "training config differs from the checkpoint's:\n  checkpoint: {:?}\n  requested: {c:?}",
                        ckpt.config.train
                    )));
                }
                c.clone()
            }
            None => ckpt.config.train.clone(),
        };
        train_cfg.validate()?;
        let model = ckpt.to_model()?;
        if ckpt.adam.m.len() != model.store.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameter list".into()));
        }
        Ok(Self {
            model,
            cfg: train_cfg,
            adam: ckpt.adam.clone(),
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch as usize,
            best_val_loss: ckpt.best_val_loss,
            initial_val_loss: ckpt.initial_val_loss,
            log: ckpt.log.clone(),
            steps: ckpt.steps,
            pending: 0,
        })
    }
}

/// Prepares both splits and trains from scratch.
pub fn fit(model_cfg: &ModelConfig, ds: &Dataset, cfg: &TrainConfig) -> Result<(Trainer, FitReport)> {
    let train = Example::from_split(model_cfg, ds, Split::Train)?;
    let val = Example::from_split(model_cfg, ds, Split::Val)?;
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    let report = trainer.fit(&train, &val, |_, _, _| Ok(()))?;
    Ok((trainer, report))
}
