use rand_chacha::ChaCha8Rng;

use super::{orthogonal, xavier_uniform, ParamId, ParamStore, Session};
use crate::tensor::{Real, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// Gated recurrent unit with the reset gate applied before the candidate
/// projection:
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

/// Input-side gate pre-activations `x W^T + b` for a block of rows.
#[derive(Clone, Copy, Debug)]
pub struct GateInputs {
    pub z: Var,
    pub r: Var,
    pub h: Var,
}

impl GruCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let mut w = |gate: &str, rng: &mut ChaCha8Rng| {
            store.add(
                format!("{name}.w_{gate}"),
                vec![hidden, input],
                xavier_uniform(rng, hidden, input),
            )
        };
        let (w_z, w_r, w_h) = (w("z", rng), w("r", rng), w("h", rng));
        let mut u = |gate: &str, rng: &mut ChaCha8Rng| {
            store.add(
                format!("{name}.u_{gate}"),
                vec![hidden, hidden],
                orthogonal(rng, hidden),
            )
        };
        let (u_z, u_r, u_h) = (u("z", rng), u("r", rng), u("h", rng));
        let mut b = |gate: &str| store.add(format!("{name}.b_{gate}"), vec![hidden], vec![T::zero(); hidden]);
        let (b_z, b_r, b_h) = (b("z"), b("r"), b("h"));
        GruCell {
            input,
            hidden,
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h,
        ]
    }

    /// Projects every row of `xs[rows x input]` through the three input
    /// matrices at once, so a whole sequence costs one product per gate.
    pub fn project<T: Real>(&self, sess: &mut Session<'_, T>, xs: Var) -> Result<GateInputs> {
        let mut gate = |w: ParamId, b: ParamId| -> Result<Var> {
            let wv = sess.param(w);
            let bv = sess.param(b);
            let y = sess.tape.matmul_bt(xs, wv)?;
            sess.tape.add_bias(y, bv)
        };
        Ok(GateInputs {
            z: gate(self.w_z, self.b_z)?,
            r: gate(self.w_r, self.b_r)?,
            h: gate(self.w_h, self.b_h)?,
        })
    }

    /// One recurrent update from projected inputs, `h[rows x hidden]`.
    pub fn step_projected<T: Real>(&self, sess: &mut Session<'_, T>, x: GateInputs, h: Var) -> Result<Var> {
        let u_z = sess.param(self.u_z);
        let u_r = sess.param(self.u_r);
        let u_h = sess.param(self.u_h);
        let t = &mut sess.tape;
        let hz = t.matmul_bt(h, u_z)?;
        let z = t.add(x.z, hz)?;
        let z = t.sigmoid(z)?;
        let hr = t.matmul_bt(h, u_r)?;
        let r = t.add(x.r, hr)?;
        let r = t.sigmoid(r)?;
        let rh = t.mul(r, h)?;
        let hh = t.matmul_bt(rh, u_h)?;
        let cand = t.add(x.h, hh)?;
        let cand = t.tanh(cand)?;
        // (1 - z) * h + z * cand == h + z * (cand - h)
        let diff = t.sub(cand, h)?;
        let upd = t.mul(z, diff)?;
        t.add(h, upd)
    }

    /// `gru_step` on row-batched inputs `x[rows x input]`, `h[rows x hidden]`.
    pub fn step<T: Real>(&self, sess: &mut Session<'_, T>, x: Var, h: Var) -> Result<Var> {
        let xs = sess.tape.shape(x).to_vec();
        let hs = sess.tape.shape(h).to_vec();
        if xs.len() != 2 || hs.len() != 2 || xs[1] != self.input || hs[1] != self.hidden || xs[0] != hs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "gru_step",
                left: xs,
                right: hs,
            });
        }
        let gates = self.project(sess, x)?;
        self.step_projected(sess, gates, h)
    }
}

/// Final states of a bidirectional GRU over `batch` sequences of `steps`
/// rows each, stored in `xs[(batch * steps) x input]` with row
/// `b * steps + t` holding element `t` of sequence `b`.
///
/// Both directions start from zero; the result is
/// `[final forward state, final backward state]`, shape `[batch x 2h]`.
pub fn bigru_final<T: Real>(
    fwd: &GruCell,
    bwd: &GruCell,
    sess: &mut Session<'_, T>,
    xs: Var,
    batch: usize,
    steps: usize,
) -> Result<Var> {
    if steps == 0 || batch == 0 {
        return Err(TensorError::invalid("bigru", "empty sequence"));
    }
    let shape = sess.tape.shape(xs).to_vec();
    if shape.len() != 2 || shape[0] != batch * steps || shape[1] != fwd.input || bwd.input != fwd.input {
        return Err(TensorError::ShapeMismatch {
            op: "bigru",
            left: shape,
            right: vec![batch * steps, fwd.input],
        });
    }
    let run = |cell: &GruCell, sess: &mut Session<'_, T>, order: &mut dyn Iterator<Item = usize>| -> Result<Var> {
        let proj = cell.project(sess, xs)?;
        let mut h = sess
            .tape
            .constant(vec![batch, cell.hidden], vec![T::zero(); batch * cell.hidden])?;
        for t in order {
            let rows: Vec<usize> = (0..batch).map(|b| b * steps + t).collect();
            let gates = GateInputs {
                z: sess.tape.gather_rows(proj.z, &rows)?,
                r: sess.tape.gather_rows(proj.r, &rows)?,
                h: sess.tape.gather_rows(proj.h, &rows)?,
            };
            h = cell.step_projected(sess, gates, h)?;
        }
        Ok(h)
    };
    let hf = run(fwd, sess, &mut (0..steps))?;
    let hb = run(bwd, sess, &mut (0..steps).rev())?;
    sess.tape.concat(&[hf, hb], 1)
}

/// [`bigru_final`] for a single sequence given as a list of vectors.
pub fn bigru_final_seq<T: Real>(fwd: &GruCell, bwd: &GruCell, sess: &mut Session<'_, T>, seq: &[Var]) -> Result<Var> {
    if seq.is_empty() {
        return Err(TensorError::invalid("bigru", "empty sequence"));
    }
    let rows = seq
        .iter()
        .map(|&v| {
            let n = sess.tape.tensor(v).len();
            sess.tape.reshape(v, vec![1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    let xs = sess.tape.concat(&rows, 0)?;
    let out = bigru_final(fwd, bwd, sess, xs, 1, seq.len())?;
    let n = sess.tape.tensor(out).len();
    sess.tape.reshape(out, vec![n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};

    fn zero_cell(store: &mut ParamStore<f64>, input: usize, hidden: usize) -> GruCell {
        let cell = GruCell::new(store, &mut ChaCha8Rng::seed_from_u64(1), "g", input, hidden);
        for id in cell.param_ids() {
            store.get_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
        }
        cell
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store, 3, 2);
        let mut sess = Session::new(&store);
        let x = sess.tape.constant(vec![1, 3], vec![0.3, -2.0, 5.0]).unwrap();
        let h = sess.tape.constant(vec![1, 2], vec![0.8, -1.4]).unwrap();
        let out = cell.step(&mut sess, x, h).unwrap();
        assert_eq!(sess.tape.value(out), &[0.4, -0.7]);

        let h0 = sess.tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let out = cell.step(&mut sess, x, h0).unwrap();
        assert_eq!(sess.tape.value(out), &[0.0, 0.0]);
    }

    #[test]
    fn step_rejects_bad_shapes() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), "g", 3, 2);
        let mut sess = Session::new(&store);
        let x = sess.tape.constant(vec![1, 4], vec![0.; 4]).unwrap();
        let h = sess.tape.constant(vec![1, 2], vec![0.; 2]).unwrap();
        assert!(cell.step(&mut sess, x, h).is_err());
    }

    #[test]
    fn state_stays_bounded() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), "g", 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut sess = Session::new(&store);
            let xv: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let hv: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let x = sess.tape.constant(vec![1, 4], xv).unwrap();
            let h = sess.tape.constant(vec![1, 5], hv.clone()).unwrap();
            let out = cell.step(&mut sess, x, h).unwrap();
            for (&o, &p) in sess.tape.value(out).iter().zip(&hv) {
                assert!(o.abs() <= p.abs().max(1.0) + 1e-12);
            }
        }
    }

    #[test]
    fn bigru_symmetry_and_reversal() {
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, &mut ChaCha8Rng::seed_from_u64(4), "g", 3, 2);
        let mut sess = Session::new(&store);
        let a = sess.tape.constant(vec![3], vec![0.1, 0.2, -0.3]).unwrap();
        let out = bigru_final_seq(&cell, &cell, &mut sess, &[a]).unwrap();
        let v = sess.tape.value(out);
        assert_eq!(v.len(), 4);
        assert_eq!(v[..2], v[2..]);

        let b = sess.tape.constant(vec![3], vec![1.0, -0.5, 0.7]).unwrap();
        let c = sess.tape.constant(vec![3], vec![-0.2, 0.9, 0.4]).unwrap();
        let fwd = bigru_final_seq(&cell, &cell, &mut sess, &[a, b, c]).unwrap();
        let rev = bigru_final_seq(&cell, &cell, &mut sess, &[c, b, a]).unwrap();
        let (fv, rv) = (sess.tape.value(fwd).to_vec(), sess.tape.value(rev).to_vec());
        assert_eq!(fv[..2], rv[2..]);
        assert_eq!(fv[2..], rv[..2]);

        assert!(bigru_final_seq(&cell, &cell, &mut sess, &[]).is_err());
    }
}
