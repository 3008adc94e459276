use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{lr_schedule, Adam, Checkpoint, DecayUnit, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore};
use crate::rng::derive;
use crate::tensor::{Tensor, Var};

/// Something the generic loop can optimize: a parameter store plus a
/// per-example loss over an indexed training set.
pub trait TrainTask: Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn train_len(&self) -> usize;

    /// Bucketing key for example `i` (usually its source length).
    fn length_key(&self, _i: usize) -> usize {
        0
    }

    /// Loss for training example `i` and two reported components, logged as
    /// `audio` and `text`.
    fn example_loss(&self, g: &mut Graph<'_>, i: usize) -> Result<(Var, [f64; 2])>;

    fn validation_loss(&self) -> Result<f64>;

    fn end_of_epoch(&mut self, _epoch: usize, _adam: &mut Adam) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub audio: f64,
    pub text: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: u64,
    pub val_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    /// Reached the requested step; call `run` again to continue.
    Paused,
    Finished { early_stopped: bool },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Progress {
    step: u64,
    epoch: usize,
    batch_in_epoch: usize,
    periods_after_warmup: u64,
    best_val: Option<f64>,
    best_step: Option<u64>,
    stale: usize,
    last_val_step: Option<u64>,
    finished: bool,
    early_stopped: bool,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    progress: Progress,
    pub adam: Adam,
    best_params: Option<BTreeMap<String, Tensor>>,
    pub losses: Vec<LossRecord>,
    pub validations: Vec<ValRecord>,
}

impl TrainState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            progress: Progress::default(),
            adam: Adam::new(store),
            best_params: None,
            losses: Vec::new(),
            validations: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.progress.step
    }

    pub fn epoch(&self) -> usize {
        self.progress.epoch
    }

    pub fn best_val(&self) -> Option<f64> {
        self.progress.best_val
    }

    pub fn best_step(&self) -> Option<u64> {
        self.progress.best_step
    }

    pub fn is_finished(&self) -> bool {
        self.progress.finished
    }

    pub fn early_stopped(&self) -> bool {
        self.progress.early_stopped
    }

    /// Serializes the run: current parameters, optimizer moments, best
    /// parameters so far, counters and logs.
    pub fn to_checkpoint(&self, store: &ParamStore, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint {
            config: serde_json::json!({
                "train": cfg,
                "progress": self.progress,
                "losses": self.losses,
                "validations": self.validations,
            }),
            step: self.progress.step,
            rng_state: cfg.seed,
            tensors: store.to_named("param."),
        };
        ck.tensors.extend(self.adam.to_named(store));
        if let Some(best) = &self.best_params {
            ck.insert_section("best.", best.clone());
        }
        ck
    }

    /// Restores a run into `store`, returning the state and the training
    /// configuration it was saved with.
    pub fn from_checkpoint(ck: &Checkpoint, store: &mut ParamStore) -> Result<(Self, TrainConfig)> {
        let field = |name: &str| {
            ck.config
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("checkpoint config lacks `{name}`")))
        };
        let parse_err = |e: serde_json::Error| Error::Contract(format!("checkpoint config: {e}"));
        let cfg: TrainConfig = serde_json::from_value(field("train")?).map_err(parse_err)?;
        let progress: Progress = serde_json::from_value(field("progress")?).map_err(parse_err)?;
        let losses = serde_json::from_value(field("losses")?).map_err(parse_err)?;
        let validations = serde_json::from_value(field("validations")?).map_err(parse_err)?;
        store.load_named(&ck.tensors, "param.")?;
        let mut adam = Adam::new(store);
        adam.load_named(store, &ck.tensors, progress.step)?;
        let best = ck.section("best.");
        let best_params = if best.is_empty() { None } else { Some(best) };
        Ok((
            Self {
                progress,
                adam,
                best_params,
                losses,
                validations,
            },
            cfg,
        ))
    }
}

/// Batches for one epoch: a seeded shuffle, a stable sort by length key so
/// batches hold similar lengths, then a seeded shuffle of batch order.
pub fn epoch_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = derive(seed, &format!("batches/{epoch}"));
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut rng);
    batches
}

pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("loss record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub struct Trainer {
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Trains from scratch to completion and leaves the best parameters in
    /// the task.
    pub fn train<T: TrainTask>(&self, task: &mut T) -> Result<TrainState> {
        let mut state = TrainState::new(task.params());
        self.run(task, &mut state, None)?;
        Ok(state)
    }

    /// Continues `state` until `until_step` optimizer steps have been taken
    /// or training finishes.
    pub fn run<T: TrainTask>(&self, task: &mut T, state: &mut TrainState, until_step: Option<u64>) -> Result<RunStatus> {
        let cfg = &self.cfg;
        if task.train_len() == 0 {
            return Err(Error::Contract("empty training set".into()));
        }
        let lengths: Vec<usize> = (0..task.train_len()).map(|i| task.length_key(i)).collect();
        loop {
            if state.progress.finished {
                return Ok(RunStatus::Finished {
                    early_stopped: state.progress.early_stopped,
                });
            }
            if state.progress.epoch >= cfg.max_epochs {
                self.finish(task, state, false)?;
                continue;
            }
            let batches = epoch_batches(&lengths, cfg.batch_size, cfg.seed, state.progress.epoch);
            while state.progress.batch_in_epoch < batches.len() {
                if until_step.is_some_and(|u| state.progress.step >= u) {
                    return Ok(RunStatus::Paused);
                }
                if cfg.max_steps.is_some_and(|m| state.progress.step >= m) {
                    self.finish(task, state, false)?;
                    return Ok(RunStatus::Finished { early_stopped: false });
                }
                let batch = &batches[state.progress.batch_in_epoch];
                self.optimizer_step(task, state, batch)?;
                state.progress.batch_in_epoch += 1;
                if state.progress.step.is_multiple_of(cfg.validate_every) && self.validate(task, state)? {
                    self.finish(task, state, true)?;
                    return Ok(RunStatus::Finished { early_stopped: true });
                }
            }
            task.end_of_epoch(state.progress.epoch, &mut state.adam)?;
            state.progress.epoch += 1;
            state.progress.batch_in_epoch = 0;
            if cfg.decay_unit == DecayUnit::Epoch && state.progress.step > cfg.warmup_steps {
                state.progress.periods_after_warmup += 1;
            }
        }
    }

    fn optimizer_step<T: TrainTask>(&self, task: &mut T, state: &mut TrainState, batch: &[usize]) -> Result<()> {
        let shared: &T = task;
        let results: Vec<Result<(f64, [f64; 2], Vec<(ParamId, Vec<f64>)>)>> = batch
            .par_iter()
            .map(|&i| {
                let mut g = Graph::new(shared.params());
                let (loss, parts) = shared.example_loss(&mut g, i)?;
                let value = g.item(loss);
                g.backward(loss)?;
                Ok((value, parts, g.param_grads()))
            })
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let (mut loss, mut audio, mut text) = (0.0, 0.0, 0.0);
        let store = task.params_mut();
        store.zero_grads();
        for r in results {
            let (l, parts, grads) = r?;
            loss += l * scale;
            audio += parts[0] * scale;
            text += parts[1] * scale;
            store.accumulate(&grads, scale);
        }
        if !loss.is_finite() {
            if let Some(best) = &state.best_params {
                store.load_named(best, "")?;
            }
            return Err(Error::Numeric(format!(
                "loss became {loss} at step {}; best parameters restored",
                state.progress.step + 1
            )));
        }
        let step = state.progress.step + 1;
        let lr = lr_schedule(step, state.progress.periods_after_warmup, &self.cfg);
        state.adam.step(store, lr)?;
        state.progress.step = step;
        state.losses.push(LossRecord {
            step,
            loss,
            audio,
            text,
            lr,
        });
        Ok(())
    }

    /// Records a validation; returns true when patience is exhausted.
    fn validate<T: TrainTask>(&self, task: &mut T, state: &mut TrainState) -> Result<bool> {
        let val = task.validation_loss()?;
        if !val.is_finite() {
            if let Some(best) = &state.best_params {
                task.params_mut().load_named(best, "")?;
            }
            return Err(Error::Numeric(format!(
                "validation loss became {val} at step {}; best parameters restored",
                state.progress.step
            )));
        }
        let p = &mut state.progress;
        p.last_val_step = Some(p.step);
        state.validations.push(ValRecord {
            step: p.step,
            val_loss: val,
        });
        match p.best_val {
            Some(best) if val >= best - self.cfg.min_delta => {
                p.stale += 1;
                if val < best {
                    p.best_val = Some(val);
                    p.best_step = Some(p.step);
                    state.best_params = Some(task.params().to_named(""));
                }
            }
            _ => {
                p.best_val = Some(val);
                p.best_step = Some(p.step);
                p.stale = 0;
                state.best_params = Some(task.params().to_named(""));
            }
        }
        if self.cfg.decay_unit == DecayUnit::Validation && p.step > self.cfg.warmup_steps {
            p.periods_after_warmup += 1;
        }
        Ok(p.stale >= self.cfg.patience)
    }

    fn finish<T: TrainTask>(&self, task: &mut T, state: &mut TrainState, early: bool) -> Result<()> {
        if state.progress.last_val_step != Some(state.progress.step) {
            self.validate(task, state)?;
        }
        if let Some(best) = &state.best_params {
            task.params_mut().load_named(best, "")?;
        }
        state.progress.finished = true;
        state.progress.early_stopped = early;
        Ok(())
    }
}
