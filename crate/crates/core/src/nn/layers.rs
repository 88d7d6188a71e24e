use std::cell::RefCell;
use std::collections::HashMap;
use std::io::BufRead;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{xavier_uniform, ParamId, ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::{Real, TensorError, Var};

/// `y = x W^T + b` with `W: [out x in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            vec![output, input],
            xavier_uniform(rng, output, input),
        );
        let bias = store.add(format!("{name}.bias"), vec![output], vec![T::zero(); output]);
        Linear {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let w = sess.param(self.weight);
        let b = sess.param(self.bias);
        let y = sess.tape.matmul_bt(x, w)?;
        sess.tape.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch normalization over the rows of a `[rows x d]` matrix.
///
/// Running statistics are interior-mutable; `forward` takes `&self`.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    running: RefCell<RunningStats<T>>,
    pub momentum: T,
    pub eps: T,
    pub mode: BnMode,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), vec![dim], vec![T::one(); dim]);
        let beta = store.add(format!("{name}.beta"), vec![dim], vec![T::zero(); dim]);
        BatchNorm {
            gamma,
            beta,
            running: RefCell::new(RunningStats {
                mean: vec![T::zero(); dim],
                var: vec![T::one(); dim],
            }),
            momentum: T::from_f64_lossy(0.1),
            eps: T::from_f64_lossy(1e-5),
            mode: BnMode::Train,
        }
    }

    pub fn dim(&self) -> usize {
        self.running.borrow().mean.len()
    }

    pub fn running(&self) -> RunningStats<T> {
        self.running.borrow().clone()
    }

    pub fn set_running(&self, stats: RunningStats<T>) -> Result<()> {
        if stats.mean.len() != self.dim() || stats.var.len() != self.dim() {
            return Err(Error::Checkpoint(format!(
                "running statistics of length {} for a {}-wide batch norm",
                stats.mean.len(),
                self.dim()
            )));
        }
        if stats.var.iter().any(|&v| v < T::zero()) {
            return Err(Error::Checkpoint("negative running variance".into()));
        }
        *self.running.borrow_mut() = stats;
        Ok(())
    }

    /// Normalizes `x`. In train mode the batch statistics are used and the
    /// running statistics move toward them by `momentum`; the running
    /// variance tracks the unbiased batch variance.
    pub fn forward(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        match self.mode {
            BnMode::Train => {
                let (y, stats) = sess.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let n = T::from_usize(stats.rows).unwrap();
                let unbias = n / (n - T::one());
                let m = self.momentum;
                let keep = T::one() - m;
                let mut running = self.running.borrow_mut();
                for (r, &b) in running.mean.iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in running.var.iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * b * unbias;
                }
                Ok(y)
            }
            BnMode::Eval => {
                let running = self.running.borrow();
                sess.tape
                    .batch_norm_eval(x, gamma, beta, &running.mean, &running.var, self.eps)
            }
        }
    }
}

/// Lookup table of `vocab` row vectors.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, vocab: usize, dim: usize) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        let values = (0..vocab * dim)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect();
        let table = store.add(format!("{name}.table"), vec![vocab, dim], values);
        Embedding { table, vocab, dim }
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, ids: &[usize]) -> Result<Var, TensorError> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(TensorError::invalid(
                "embedding",
                format!("token id {bad} outside vocabulary of {}", self.vocab),
            ));
        }
        let table = sess.param(self.table);
        sess.tape.gather_rows(table, ids)
    }

    /// Overwrites rows for tokens found in `vectors`; other rows keep their
    /// random initialization. Returns the number of rows replaced.
    pub fn load_pretrained<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        tokens: &[String],
        vectors: &HashMap<String, Vec<f32>>,
    ) -> Result<usize> {
        let table = store.get_mut(self.table);
        let mut hits = 0;
        for (row, tok) in tokens.iter().enumerate().take(self.vocab) {
            if let Some(v) = vectors.get(tok) {
                if v.len() != self.dim {
                    return Err(Error::Data(format!(
                        "vector for {tok:?} has {} values, expected {}",
                        v.len(),
                        self.dim
                    )));
                }
                for (dst, &src) in table.values[row * self.dim..(row + 1) * self.dim].iter_mut().zip(v) {
                    *dst = T::from_f32(src).unwrap();
                }
                hits += 1;
            }
        }
        Ok(hits)
    }
}

/// Reads a plain-text vector file: each line is a token followed by `dim`
/// whitespace-separated reals.
pub fn read_text_embeddings(reader: impl BufRead, dim: usize) -> Result<HashMap<String, Vec<f32>>> {
    let mut out = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading embedding file", e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: std::result::Result<Vec<f32>, _> = fields.map(str::parse).collect();
        let values = values.map_err(|e| Error::Parse {
            path: "<embeddings>".into(),
            line: i + 1,
            message: format!("bad value: {e}"),
        })?;
        if values.len() != dim {
            return Err(Error::Parse {
                path: "<embeddings>".into(),
                line: i + 1,
                message: format!("expected {dim} values, got {}", values.len()),
            });
        }
        out.insert(token.to_string(), values);
    }
    Ok(out)
}

/// Four swish layers; layers 2-4 add their input back (residual).
#[derive(Clone, Debug)]
pub struct ResidualMlp {
    pub layers: Vec<Linear>,
}

impl ResidualMlp {
    pub const DEPTH: usize = 4;

    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        width: usize,
    ) -> Self {
        let layers = (0..Self::DEPTH)
            .map(|i| {
                let fan_in = if i == 0 { input } else { width };
                Linear::new(store, rng, &format!("{name}.{i}"), fan_in, width)
            })
            .collect();
        ResidualMlp { layers }
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn width(&self) -> usize {
        self.layers[0].output
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, c: Var) -> Result<Var, TensorError> {
        let first = self.layers[0].forward(sess, c)?;
        let mut y = sess.tape.swish(first)?;
        for layer in &self.layers[1..] {
            let z = layer.forward(sess, y)?;
            let a = sess.tape.swish(z)?;
            y = sess.tape.add(a, y)?;
        }
        Ok(y)
    }
}
