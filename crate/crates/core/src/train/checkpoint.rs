//! Binary checkpoints: magic, version, CRC-32 and a bincode payload.
//!
//! Values are stored as `f64`, which holds `f32` parameters exactly.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamaxConfig, AdamaxState, EpochLog, Precision, Snapshot, TrainState};
use crate::data::AnswerVocab;
use crate::error::{Error, Result};
use crate::model::{RamenConfig, RamenModel};
use crate::nn::RunningStats;
use crate::tensor::Real;

const MAGIC: &[u8; 8] = b"RAMENCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 4;

#[derive(Serialize, Deserialize)]
struct Payload {
    precision: String,
    config_json: String,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Vec<f64>>,
    bn_mean: Vec<f64>,
    bn_var: Vec<f64>,
    vocab_json: String,
    training: Option<TrainingPayload>,
}

/// Best-so-far parameters with BatchNorm running means and variances.
type BestSnapshot = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>);

#[derive(Serialize, Deserialize)]
struct TrainingPayload {
    adamax: (f64, f64, f64),
    t: u64,
    m: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    epoch: usize,
    best_val: f64,
    best_epoch: usize,
    since_best: usize,
    best: Option<BestSnapshot>,
    log: Vec<EpochLog>,
}

/// A model with its answer vocabulary, and optionally the full training
/// state.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: RamenModel<T>,
    pub vocab: AnswerVocab,
    pub training: Option<TrainState<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn model(model: &RamenModel<T>, vocab: &AnswerVocab) -> Self {
        Checkpoint {
            model: model.clone(),
            vocab: vocab.clone(),
            training: None,
        }
    }

    pub fn training(state: &TrainState<T>, vocab: &AnswerVocab) -> Self {
        Checkpoint {
            model: state.model.clone(),
            vocab: vocab.clone(),
            training: Some(state.clone()),
        }
    }
}

fn widen<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossless()).collect()
}

fn narrow<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

fn widen_all<T: Real>(v: &[Vec<T>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| widen(x)).collect()
}

fn narrow_all<T: Real>(v: &[Vec<f64>]) -> Vec<Vec<T>> {
    v.iter().map(|x| narrow(x)).collect()
}

pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let model = &ckpt.model;
    let running = model.input_bn.running();
    let training = ckpt.training.as_ref().map(|s| TrainingPayload {
        adamax: (
            s.optimizer.config.beta1,
            s.optimizer.config.beta2,
            s.optimizer.config.eps,
        ),
        t: s.optimizer.t,
        m: widen_all(&s.optimizer.m),
        u: widen_all(&s.optimizer.u),
        rng: s.rng.clone(),
        epoch: s.epoch,
        best_val: s.best_val,
        best_epoch: s.best_epoch,
        since_best: s.since_best,
        best: s
            .best
            .as_ref()
            .map(|b| (widen_all(&b.params), widen(&b.running.mean), widen(&b.running.var))),
        log: s.log.clone(),
    });
    let payload = Payload {
        precision: T::NAME.to_string(),
        config_json: serde_json::to_string(&model.config)?,
        names: model.params.iter().map(|p| p.name.clone()).collect(),
        shapes: model.params.iter().map(|p| p.shape.clone()).collect(),
        params: model.params.iter().map(|p| widen(&p.values)).collect(),
        bn_mean: widen(&running.mean),
        bn_var: widen(&running.var),
        vocab_json: serde_json::to_string(&ckpt.vocab)?,
        training,
    };
    let body = bincode::serialize(&payload).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(HEADER + body.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    bytes.extend_from_slice(&body);
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_payload(path: &Path) -> Result<Payload> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let corrupt = |why: &str| Error::Checkpoint(format!("{} is corrupt: {why}", path.display()));
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} has format version {version}, this build reads {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let crc = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let body = &bytes[HEADER..];
    if crc32fast::hash(body) != crc {
        return Err(corrupt("checksum mismatch"));
    }
    bincode::deserialize(body).map_err(|e| corrupt(&e.to_string()))
}

/// Precision the parameters in a checkpoint were trained at.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let p = read_payload(path)?;
    match p.precision.as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Checkpoint(format!(
            "{} holds unknown precision {other}",
            path.display()
        ))),
    }
}

/// Reads a checkpoint. With `expected`, a stored configuration that
/// differs is rejected with the names of the differing fields.
pub fn load_checkpoint<T: Real>(path: &Path, expected: Option<&RamenConfig>) -> Result<Checkpoint<T>> {
    let corrupt = |why: &str| Error::Checkpoint(format!("{} is corrupt: {why}", path.display()));
    let p = read_payload(path)?;
    if p.precision != T::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, requested {}",
            p.precision,
            T::NAME
        )));
    }
    let config: RamenConfig = serde_json::from_str(&p.config_json)?;
    if let Some(want) = expected {
        let diff = want.differing_fields(&config);
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "configuration mismatch in: {}",
                diff.join(", ")
            )));
        }
    }
    let mut model = RamenModel::<T>::new(config, 0)?;
    if p.names.len() != model.params.len() {
        return Err(corrupt("parameter count does not match its configuration"));
    }
    for (i, param) in model.params.iter_mut().enumerate() {
        if p.names[i] != param.name || p.shapes[i] != param.shape || p.params[i].len() != param.values.len() {
            return Err(corrupt(&format!("parameter {} does not match", param.name)));
        }
        param.values = narrow(&p.params[i]);
    }
    model.input_bn.set_running(RunningStats {
        mean: narrow(&p.bn_mean),
        var: narrow(&p.bn_var),
    })?;
    let vocab: AnswerVocab = serde_json::from_str::<AnswerVocab>(&p.vocab_json)?.reindex();
    let training = match p.training {
        None => None,
        Some(t) => {
            let (beta1, beta2, eps) = t.adamax;
            let optimizer = AdamaxState {
                config: AdamaxConfig { beta1, beta2, eps },
                t: t.t,
                m: narrow_all(&t.m),
                u: narrow_all(&t.u),
            };
            let best = t.best.map(|(params, mean, var)| Snapshot {
                params: narrow_all(&params),
                running: RunningStats {
                    mean: narrow(&mean),
                    var: narrow(&var),
                },
            });
            Some(TrainState {
                model: model.clone(),
                optimizer,
                rng: t.rng,
                epoch: t.epoch,
                best_val: t.best_val,
                best_epoch: t.best_epoch,
                since_best: t.since_best,
                best,
                log: t.log,
            })
        }
    };
    Ok(Checkpoint { model, vocab, training })
}
