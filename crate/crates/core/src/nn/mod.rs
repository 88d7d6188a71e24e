//! Parameter storage and the layer library the model is assembled from.

mod gru;
mod layers;

pub use gru::{bigru_final, bigru_final_seq, GateInputs, GruCell};
pub use layers::{read_text_embeddings, BatchNorm, BnMode, Embedding, Linear, ResidualMlp, RunningStats};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Flat, ordered list of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            values,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }
}

/// One forward pass: a tape plus the parameters bound onto it so far.
///
/// Parameters are bound lazily, so a parameter the pass never touches has
/// no node on the tape and receives no gradient.
pub struct Session<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    track_params: bool,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track_params: true,
        }
    }

    /// Session whose parameters do not require gradients.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Session {
            track_params: false,
            ..Session::new(store)
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let t = Tensor::new(p.shape.clone(), p.values.clone()).expect("parameter shape");
        let t = if self.track_params { t.with_grad() } else { t };
        let v = self.tape.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient of every parameter after `tape.backward`; `None` for
    /// parameters that were never bound or not reached.
    pub fn param_grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(<[T]>::to_vec)))
            .collect()
    }
}

pub(crate) fn xavier_uniform<T: Real>(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_out * fan_in)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect()
}

/// Square matrix with orthonormal rows: modified Gram-Schmidt (a QR
/// factorization) of a Gaussian matrix.
pub(crate) fn orthogonal<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    let mut m: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    for i in 0..n {
        for j in 0..i {
            let (done, rest) = m.split_at_mut(i * n);
            let prev = &done[j * n..(j + 1) * n];
            let row = &mut rest[..n];
            let dot: f64 = prev.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            for (r, p) in row.iter_mut().zip(prev) {
                *r -= dot * p;
            }
        }
        let row = &mut m[i * n..(i + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for r in row.iter_mut() {
            *r /= norm;
        }
    }
    m.into_iter().map(T::from_f64_lossy).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let q: Vec<f64> = orthogonal(&mut rng, n);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unbound_params_have_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", vec![2], vec![1.0, 2.0]);
        let _b = store.add("b", vec![2], vec![3.0, 4.0]);
        let mut sess = Session::new(&store);
        let va = sess.param(a);
        assert_eq!(sess.param(a), va);
        let s = sess.tape.sum(va).unwrap();
        sess.tape.backward(s).unwrap();
        let grads = sess.param_grads();
        assert_eq!(grads[0].as_deref(), Some(&[1.0, 1.0][..]));
        assert!(grads[1].is_none());
    }
}
