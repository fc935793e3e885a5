//! Teacher-forced training with Adam, early stopping and checkpoints.

mod batch;
mod checkpoint;
mod loss;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use slyt_tensor::{Adam, AdamConfig, Tape, Tensor, TensorError};

pub use batch::{build_batch, make_batches, pack_lengths, BatchPlan, ElementOrder, SequenceOptions, TrainBatch};
pub use checkpoint::{write_atomic, Checkpoint, OptimizerState, LOG_TAIL, MAGIC, VERSION};
pub use loss::{
    log_softmax_at, sequence_loss, smoothed_target, token_nlls, ContinuousTargets, KlDirection, LossConfig, LossMode,
};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::layout::{CategoryVocab, Layout};
use crate::model::{Mode, Model};
use crate::sample::{corpus_per_token_nll, score_corpus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub loss: LossConfig,
    /// Upper bound on `batch_size * padded_length`.
    pub token_budget: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
    pub permute_prefix: bool,
    pub order: ElementOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 30,
            loss: LossConfig::default(),
            token_budget: 8192,
            patience: 5,
            seed: 0,
            max_steps: None,
            clip_norm: None,
            permute_prefix: false,
            order: ElementOrder::Raster,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if self.token_budget == 0 {
            return Err(Error::InvalidConfig("token_budget must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidConfig("clip_norm must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Per-token NLL over the epoch's training batches (train mode).
    pub train_nll: f64,
    /// Per-token NLL of the validation set (eval mode).
    pub val_nll: f64,
    pub seconds: f64,
}

/// Where a training run stands, so it can be resumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_val_nll: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
}

/// Statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Sum of target-token NLLs in the batch.
    pub nll_sum: f64,
    pub targets: usize,
}

/// Result of [`Trainer::fit`].
pub struct FitOutcome {
    /// Parameters with the lowest validation NLL.
    pub best: Checkpoint,
    /// Final state including optimizer moments, for resuming.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Owns the model and optimizer for a training run.
pub struct Trainer {
    pub model: Model<f32>,
    pub categories: CategoryVocab,
    pub config: TrainConfig,
    adam: Adam<f32>,
    progress: Progress,
    log: Vec<EpochLog>,
    best: Option<Model<f32>>,
}

impl Trainer {
    pub fn new(model: Model<f32>, categories: CategoryVocab, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if categories.len() != model.config.num_categories {
            return Err(Error::Vocab(format!(
                "{} category names for a model with {} categories",
                categories.len(),
                model.config.num_categories
            )));
        }
        let adam = Adam::new(config.adam(), model.params());
        Ok(Self {
            model,
            categories,
            config,
            adam,
            progress: Progress {
                epoch: 0,
                step: 0,
                best_val_nll: None,
                best_epoch: None,
                stale_epochs: 0,
            },
            log: Vec::new(),
            best: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        let Checkpoint {
            model,
            categories,
            optimizer,
            progress,
            log,
            ..
        } = checkpoint;
        let mut t = Self::new(model, categories, config)?;
        if let Some(opt) = optimizer {
            t.adam = Adam::with_state(t.config.adam(), opt.state);
        }
        if let Some(p) = progress {
            t.progress = p;
        }
        t.log = log;
        t.best = None;
        Ok(t)
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    fn sequence_options(&self) -> SequenceOptions {
        SequenceOptions {
            order: self.config.order,
            permute_prefix: self.config.permute_prefix,
            n_continuous: self.model.config.n_continuous,
        }
    }

    /// One forward/backward pass and Adam update.
    pub fn step(&mut self, batch: &TrainBatch) -> Result<StepStats> {
        let step = self.progress.step;
        let numerical = |message: String| Error::Numerical { step, message };
        let (stats, grads) = {
            let mut tape = Tape::new();
            let mode = Mode::Train {
                seed: derive_seed(self.config.seed, step),
            };
            let fw = self.model.forward(&mut tape, &batch.input, mode, true)?;
            let continuous = fw.continuous.map(|predictions| ContinuousTargets {
                predictions,
                rows: &batch.cont_rows,
                targets: &batch.cont_targets,
            });
            let loss = sequence_loss(&mut tape, fw.logits, &batch.targets, &batch.mask, continuous, &self.config.loss)?;
            let nlls = token_nlls(tape.value(fw.logits), &batch.targets, &batch.mask);
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(numerical(format!("loss is {value}")));
            }
            let mut g = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = fw
                .params
                .iter()
                .zip(self.model.params())
                .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let stats = StepStats {
                loss: value,
                nll_sum: nlls.iter().sum(),
                targets: nlls.len(),
            };
            (stats, grads)
        };
        let mut grads = grads;
        if let Some(max) = self.config.clip_norm {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let s = (max / norm) as f32;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
            }
        }
        self.adam
            .step(self.model.params_mut(), &grads)
            .map_err(|e| match e {
                TensorError::Numerical(m) => numerical(m),
                other => other.into(),
            })?;
        self.progress.step += 1;
        Ok(stats)
    }

    fn steps_exhausted(&self) -> bool {
        matches!(self.config.max_steps, Some(m) if self.progress.step >= m)
    }

    /// Runs one pass over `train` and returns its per-token NLL. Stops early
    /// if the step limit is reached.
    pub fn run_epoch(&mut self, train: &[Layout]) -> Result<f64> {
        let epoch = self.progress.epoch as u64;
        let vocab = self.model.vocab();
        let plans = make_batches(train, &vocab, self.config.token_budget, derive_seed(self.config.seed ^ 0xBA7C, epoch))?;
        let options = self.sequence_options();
        let (mut nll, mut count) = (0.0, 0usize);
        for (k, plan) in plans.iter().enumerate() {
            if self.steps_exhausted() {
                break;
            }
            let members: Vec<&Layout> = plan.indices.iter().map(|&i| &train[i]).collect();
            let seed = derive_seed(derive_seed(self.config.seed ^ 0x0D3E, epoch), k as u64);
            let batch = build_batch(&members, &vocab, &options, seed)?;
            let s = self.step(&batch)?;
            nll += s.nll_sum;
            count += s.targets;
        }
        Ok(if count == 0 { f64::NAN } else { nll / count as f64 })
    }

    /// Trains until `epochs`, the step limit, or early stopping.
    pub fn fit(self, train: &[Layout], val: &[Layout]) -> Result<FitOutcome> {
        self.fit_with(train, val, |_| {})
    }

    /// Like [`Trainer::fit`], calling `on_epoch` after each logged epoch.
    pub fn fit_with(mut self, train: &[Layout], val: &[Layout], mut on_epoch: impl FnMut(&EpochLog)) -> Result<FitOutcome> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidConfig("training and validation sets must be non-empty".into()));
        }
        while self.progress.epoch < self.config.epochs && !self.steps_exhausted() {
            if self.progress.best_val_nll.is_some() && self.progress.stale_epochs >= self.config.patience {
                break;
            }
            let start = Instant::now();
            let train_nll = self.run_epoch(train)?;
            let val_nll = self.validate(val)?;
            self.progress.epoch += 1;
            let entry = EpochLog {
                epoch: self.progress.epoch,
                train_nll,
                val_nll,
                seconds: start.elapsed().as_secs_f64(),
            };
            if self.progress.best_val_nll.is_none_or(|b| val_nll < b) {
                self.progress.best_val_nll = Some(val_nll);
                self.progress.best_epoch = Some(self.progress.epoch);
                self.progress.stale_epochs = 0;
                self.best = Some(self.model.clone());
            } else {
                self.progress.stale_epochs += 1;
            }
            on_epoch(&entry);
            self.log.push(entry);
        }
        let last = self.checkpoint();
        let best_model = self.best.take().unwrap_or_else(|| self.model.clone());
        let mut best = Checkpoint::new(best_model, self.categories.clone());
        best.progress = Some(self.progress.clone());
        best.train_config = Some(self.config.clone());
        best.log = self.log.clone();
        Ok(FitOutcome {
            best,
            last,
            log: self.log,
        })
    }

    /// Per-token NLL of `layouts` under the current parameters.
    pub fn validate(&self, layouts: &[Layout]) -> Result<f64> {
        let scores = score_corpus(&self.model, layouts, self.config.token_budget)?;
        let v = corpus_per_token_nll(&scores);
        if !v.is_finite() {
            return Err(Error::Numerical {
                step: self.progress.step,
                message: format!("validation NLL is {v}"),
            });
        }
        Ok(v)
    }

    /// Current parameters with optimizer state and progress.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.model.clone(), self.categories.clone());
        c.optimizer = Some(OptimizerState {
            config: self.adam.config,
            state: self.adam.state.clone(),
        });
        c.progress = Some(self.progress.clone());
        c.train_config = Some(self.config.clone());
        c.log = self.log.clone();
        c
    }
}
