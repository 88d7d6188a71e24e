//! Mini-batch training with Adamax, the warm-up/decay schedule, early
//! stopping on validation accuracy, and resumable checkpoints.

mod adamax;
mod checkpoint;

pub use adamax::{AdamaxConfig, AdamaxState};
pub use checkpoint::{checkpoint_precision, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnswerVocab, Dataset, Family, FeatureConfig, Split, TokenVocab, VocabRule};
use crate::error::{Error, Result};
use crate::metrics::{simple_accuracy, PredictionRecord};
use crate::model::{argmax_rows, Batch, RamenConfig, RamenModel, RegionSet, Targets};
use crate::nn::{RunningStats, Session};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub warmup_epochs: usize,
    /// Warm-up rate per epoch: epoch `e <= warmup_epochs` runs at `e` times this.
    pub warmup_lr: f64,
    pub plateau_lr: f64,
    pub plateau_until_epoch: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            warmup_epochs: 4,
            warmup_lr: 2.5e-4,
            plateau_lr: 5e-4,
            plateau_until_epoch: 10,
            decay_factor: 0.25,
            decay_every: 2,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let positive = self.warmup_lr > 0.0 && self.plateau_lr > 0.0 && self.decay_factor > 0.0;
        if !positive || self.decay_every == 0 {
            return Err(Error::Config(format!("schedule values must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Learning rate of a 1-based epoch: linear warm-up, a plateau, then
/// multiplication by `decay_factor` every `decay_every` epochs.
pub fn lr_at_epoch(s: &Schedule, epoch: usize) -> f64 {
    let epoch = epoch.max(1);
    if epoch <= s.warmup_epochs {
        s.warmup_lr * epoch as f64
    } else if epoch <= s.plateau_until_epoch {
        s.plateau_lr
    } else {
        let k = (epoch - s.plateau_until_epoch).div_ceil(s.decay_every);
        s.plateau_lr * s.decay_factor.powi(k as i32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub precision: Precision,
    pub vocab_rule: VocabRule,
    pub adamax: AdamaxConfig,
    /// Scan every op output for NaN/Inf.
    pub nan_guard: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 64,
            max_epochs: 20,
            early_stop_patience: 5,
            seed: 0,
            precision: Precision::F32,
            vocab_rule: VocabRule::MinCount(9),
            adamax: AdamaxConfig::default(),
            nan_guard: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} < 2; batch normalization needs two rows",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// One question ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    /// Index into [`Prepared::regions`].
    pub scene: usize,
    pub tokens: Vec<usize>,
    pub family: Family,
    pub answer: String,
    /// Answer index, `None` when the answer is outside the vocabulary.
    pub target: Option<usize>,
}

/// A dataset featurized and indexed against an answer vocabulary.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub regions: Vec<RegionSet>,
    pub vocab: AnswerVocab,
    pub num_tokens: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Prepared {
    /// Featurizes every scene and builds the answer vocabulary from the
    /// train and validation answers.
    pub fn new(data: &Dataset, features: &FeatureConfig, rule: VocabRule) -> Result<Self> {
        let answers = data
            .items
            .iter()
            .filter(|i| i.split != Split::Test)
            .map(|i| i.answer.as_str());
        let vocab = AnswerVocab::build(answers, rule)?;
        Self::with_vocab(data, features, vocab)
    }

    pub fn with_vocab(data: &Dataset, features: &FeatureConfig, vocab: AnswerVocab) -> Result<Self> {
        let mut by_id = data.featurize(features)?;
        let mut regions = Vec::with_capacity(data.scenes.len());
        let mut index = HashMap::new();
        for s in &data.scenes {
            index.insert(s.id, regions.len());
            regions.push(by_id.remove(&s.id).expect("featurized"));
        }
        let mut prepared = Prepared {
            regions,
            vocab,
            num_tokens: TokenVocab::new().len(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for it in &data.items {
            let scene = *index
                .get(&it.scene_id)
                .ok_or_else(|| Error::Data(format!("item {} refers to unknown scene {}", it.id, it.scene_id)))?;
            let ex = Example {
                id: it.id,
                scene,
                tokens: it.tokens.clone(),
                family: it.family,
                answer: it.answer.clone(),
                target: prepared.vocab.index_of(&it.answer),
            };
            match it.split {
                Split::Train => prepared.train.push(ex),
                Split::Val => prepared.val.push(ex),
                Split::Test => prepared.test.push(ex),
            }
        }
        Ok(prepared)
    }

    /// Model configuration sized for this data.
    pub fn desk_config(&self) -> RamenConfig {
        RamenConfig::desk(self.num_tokens, self.vocab.len())
    }

    /// Replaces every region vector with zeros (question-only baseline).
    pub fn zero_regions(&mut self) {
        for r in &mut self.regions {
            r.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn batch<T: Real>(&self, examples: &[&Example]) -> Result<Batch<T>> {
        let sets: Vec<&RegionSet> = examples.iter().map(|e| &self.regions[e.scene]).collect();
        Batch::new(&sets, examples.iter().map(|e| e.tokens.clone()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Parameter values and batch-norm statistics at one point in training.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub params: Vec<Vec<T>>,
    pub running: RunningStats<T>,
}

impl<T: Real> Snapshot<T> {
    pub fn of(model: &RamenModel<T>) -> Self {
        Snapshot {
            params: model.params.iter().map(|p| p.values.clone()).collect(),
            running: model.input_bn.running(),
        }
    }

    pub fn apply(&self, model: &mut RamenModel<T>) -> Result<()> {
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint("snapshot does not fit the model".into()));
        }
        for (p, v) in model.params.iter_mut().zip(&self.params) {
            if p.values.len() != v.len() {
                return Err(Error::Checkpoint(format!("snapshot size mismatch for {}", p.name)));
            }
            p.values.clone_from(v);
        }
        model.input_bn.set_running(self.running.clone())
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: RamenModel<T>,
    pub optimizer: AdamaxState<T>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub since_best: usize,
    pub best: Option<Snapshot<T>>,
    pub log: Vec<EpochLog>,
}

fn shuffle_seed(seed: u64) -> u64 {
    seed ^ 0x5348_5546_464c_4521
}

impl<T: Real> TrainState<T> {
    pub fn new(config: RamenConfig, cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let model = RamenModel::new(config, cfg.seed)?;
        let optimizer = AdamaxState::new(&model.params, cfg.adamax);
        Ok(TrainState {
            model,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seed)),
            epoch: 0,
            best_val: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
            best: None,
            log: Vec::new(),
        })
    }

    /// The model with the best validation accuracy seen so far.
    pub fn best_model(&self) -> Result<RamenModel<T>> {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            b.apply(&mut m)?;
        }
        Ok(m)
    }

    fn stopped_early(&self, cfg: &TrainerConfig) -> bool {
        self.epoch > 0 && self.since_best >= cfg.early_stop_patience
    }
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const CURVE_FILE: &str = "curve.csv";

/// Learning curve as CSV, ten significant digits per value.
pub fn curve_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
    for e in log {
        writeln!(
            s,
            "{},{:.9e},{:.9e},{:.9e},{:.9e}",
            e.epoch, e.lr, e.train_loss, e.train_acc, e.val_acc
        )
        .unwrap();
    }
    s
}

/// Trains until `cfg.max_epochs` epochs are complete or validation accuracy
/// has not improved for `cfg.early_stop_patience` epochs. Picks up from
/// `state.epoch`, so a loaded checkpoint resumes exactly. With `out`, the
/// last and best checkpoints and the learning curve are written after every
/// epoch.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    data: &Prepared,
    cfg: &TrainerConfig,
    schedule: &Schedule,
    out: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    schedule.validate()?;
    if state.epoch >= cfg.max_epochs || state.stopped_early(cfg) {
        return Ok(());
    }
    let usable: Vec<&Example> = data.train.iter().filter(|e| e.target.is_some()).collect();
    if usable.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "{} usable training items, fewer than one batch of {}",
            usable.len(),
            cfg.batch_size
        )));
    }
    if data.val.is_empty() {
        return Err(Error::Data("empty validation split".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    while state.epoch < cfg.max_epochs && !state.stopped_early(cfg) {
        let epoch = state.epoch + 1;
        let lr = lr_at_epoch(schedule, epoch);
        let (train_loss, train_acc) = run_epoch(state, data, &usable, cfg, lr, epoch)?;
        let val_acc = accuracy(&mut state.model, data, &data.val)?;
        state.epoch = epoch;
        state.log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            train_acc,
            val_acc,
        });
        let improved = val_acc > state.best_val;
        if improved {
            state.best_val = val_acc;
            state.best_epoch = epoch;
            state.since_best = 0;
            state.best = Some(Snapshot::of(&state.model));
        } else {
            state.since_best += 1;
        }
        if let Some(dir) = out {
            save_checkpoint(&dir.join(LAST_CHECKPOINT), &Checkpoint::training(state, &data.vocab))?;
            if improved {
                save_checkpoint(
                    &dir.join(BEST_CHECKPOINT),
                    &Checkpoint::model(&state.model, &data.vocab),
                )?;
            }
            let path = dir.join(CURVE_FILE);
            fs::write(&path, curve_csv(&state.log)).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
    }
    Ok(())
}

fn run_epoch<T: Real>(
    state: &mut TrainState<T>,
    data: &Prepared,
    usable: &[&Example],
    cfg: &TrainerConfig,
    lr: f64,
    epoch: usize,
) -> Result<(f64, f64)> {
    state.model.set_training(true);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut state.rng);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let steps = order.len() / cfg.batch_size;
    for (step, chunk) in order.chunks_exact(cfg.batch_size).enumerate() {
        let examples: Vec<&Example> = chunk.iter().map(|&i| usable[i]).collect();
        let targets: Vec<usize> = examples.iter().map(|e| e.target.unwrap()).collect();
        let batch = data.batch::<T>(&examples)?;
        let model = &state.model;
        let mut sess = Session::new(&model.params);
        sess.tape.set_nan_guard(cfg.nan_guard);
        let logits = model.forward(&mut sess, &batch)?;
        let loss = model.loss(&mut sess, logits, &Targets::Single(targets.clone()))?;
        let value = sess.tape.value(loss)[0].to_f64_lossless();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {epoch}, step {}/{steps}",
                step + 1
            )));
        }
        let predicted = argmax_rows(sess.tape.value(logits), model.config.num_answers);
        sess.tape.backward(loss)?;
        let grads = sess.param_grads();
        drop(sess);
        state
            .optimizer
            .step(&mut state.model.params, &grads, lr)
            .map_err(|e| Error::Numeric(format!("epoch {epoch}, step {}: {e}", step + 1)))?;
        loss_sum += value;
        correct += predicted.iter().zip(&targets).filter(|(p, t)| p == t).count();
        seen += targets.len();
    }
    Ok((loss_sum / steps as f64, correct as f64 / seen as f64))
}

/// Predictions in batch-norm eval mode, batches of 64, the last one
/// partial.
pub fn predict<T: Real>(
    model: &mut RamenModel<T>,
    data: &Prepared,
    examples: &[Example],
) -> Result<Vec<PredictionRecord>> {
    let was_training = model.is_training();
    model.set_training(false);
    let mut records = Vec::with_capacity(examples.len());
    let result = (|| {
        for chunk in examples.chunks(64) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let batch = data.batch::<T>(&refs)?;
            for (e, p) in chunk.iter().zip(model.predict(&batch)?) {
                records.push(PredictionRecord::single(
                    e.id,
                    e.family.name(),
                    data.vocab.answer(p),
                    &e.answer,
                ));
            }
        }
        Ok(())
    })();
    model.set_training(was_training);
    result.map(|()| records)
}

/// Simple accuracy; answers outside the vocabulary count as wrong.
pub fn accuracy<T: Real>(model: &mut RamenModel<T>, data: &Prepared, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to score".into()));
    }
    simple_accuracy(&predict(model, data, examples)?)
}

#[cfg(test)]
mod tests;
