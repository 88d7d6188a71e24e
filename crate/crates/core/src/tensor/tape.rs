use super::{sigmoid, Real, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

enum Op<T> {
    Leaf,
    /// `a * b`, or `a * b^T` when `trans_b` is set. Both operands are matrices.
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    Map {
        x: Var,
        derivative: fn(T) -> T,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    MeanGroups {
        x: Var,
        group: usize,
    },
    Sum(Var),
    Reshape(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
    name: &'static str,
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Population (biased) variance of each column.
    pub var: Vec<T>,
    pub rows: usize,
}

/// Single-owner record of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    nan_guard: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::invalid(
            op,
            format!("expected a matrix, got shape {:?}", t.shape),
        )),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            nan_guard: false,
        }
    }

    /// Scan every op output for NaN/Inf and fail on the first one.
    pub fn set_nan_guard(&mut self, on: bool) {
        self.nan_guard = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
            name: "leaf",
        });
        Var(id)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values)?.with_grad()))
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].tensor.values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tensor.requires_grad)
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op<T>,
        shape: Vec<usize>,
        values: Vec<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        if self.nan_guard && values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                values,
                requires_grad,
                grad: None,
            },
            op,
            name,
        });
        Ok(Var(id))
    }

    /// Matrix product `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product against a transposed right operand, `a[m x k] * b[n x k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_bt" } else { "matmul" };
        let (m, k) = matrix(self.tensor(a), name)?;
        let (br, bc) = matrix(self.tensor(b), name)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, false);
        let rg = self.needs_grad(&[a, b]);
        self.push(name, Op::MatMul { a, b, trans_b }, vec![m, n], out, rg)
    }

    /// Adds a length-`d` bias to every row of `x[rows x d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, d) = matrix(self.tensor(x), "add_bias")?;
        if self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            for (o, &bv) in out[r * d..(r + 1) * d].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.needs_grad(&[x, bias]);
        self.push("add_bias", Op::AddBias { x, bias }, vec![rows, d], out, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        self.push(name, op, shape, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(name, op, shape, out, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary("swish", x, |v| v * sigmoid(v), Op::Swish(x))
    }

    /// Elementwise map with a caller-supplied derivative (evaluated at the
    /// input). Used for one-off functions and for negative-control checks.
    pub fn map(&mut self, name: &'static str, x: Var, f: fn(T) -> T, derivative: fn(T) -> T) -> Result<Var> {
        self.unary(name, x, f, Op::Map { x, derivative })
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "empty list of parts"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range for shape {base:?}"),
            ));
        }
        let mut along = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            along += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = along;
        let mut out = Vec::with_capacity(outer * along * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.needs_grad(parts);
        self.push(
            "concat",
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
            out,
            rg,
        )
    }

    /// `x[b x d] -> [(b * times) x d]` with row `i * times + j` equal to `x[i]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (rows, d) = matrix(self.tensor(x), "repeat_rows")?;
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * times * d);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let rg = self.needs_grad(&[x]);
        self.push(
            "repeat_rows",
            Op::RepeatRows { x, times },
            vec![rows * times, d],
            out,
            rg,
        )
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = matrix(self.tensor(x), "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {n} rows"),
            ));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.needs_grad(&[x]);
        self.push(
            "gather_rows",
            Op::GatherRows { x, rows: rows.to_vec() },
            vec![rows.len(), d],
            out,
            rg,
        )
    }

    /// Means over consecutive groups of `group` rows: `[(b * group) x d] -> [b x d]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, d) = matrix(self.tensor(x), "mean_groups")?;
        if group == 0 || n % group != 0 {
            return Err(TensorError::invalid(
                "mean_groups",
                format!("{n} rows do not split into groups of {group}"),
            ));
        }
        let b = n / group;
        let inv = T::one() / T::from_usize(group).unwrap();
        let src = self.value(x);
        let mut out = vec![T::zero(); b * d];
        for g in 0..b {
            let dst = &mut out[g * d..(g + 1) * d];
            for r in 0..group {
                let row = &src[(g * group + r) * d..(g * group + r + 1) * d];
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.needs_grad(&[x]);
        self.push("mean_groups", Op::MeanGroups { x, group }, vec![b, d], out, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.needs_grad(&[x]);
        self.push("sum", Op::Sum(x), vec![], vec![s], rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.tensor(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push("reshape", Op::Reshape(x), shape, out, rg)
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let (rows, d) = matrix(self.tensor(x), op)?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op,
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        Ok((rows, d))
    }

    /// Train-mode batch normalization over the rows of `x[rows x d]`.
    /// Returns the output together with the batch statistics it used.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (rows, d) = self.check_affine("batch_norm", x, gamma, beta)?;
        if rows < 2 {
            return Err(TensorError::invalid(
                "batch_norm",
                format!("train mode needs at least 2 rows, got {rows}"),
            ));
        }
        let xs = self.value(x);
        let n = T::from_usize(rows).unwrap();
        let mut mean = vec![T::zero(); d];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(&xs[r * d..(r + 1) * d]) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![T::zero(); d];
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(&xs[r * d..(r + 1) * d]).zip(&mean) {
                let c = v - m;
                *s += c * c;
            }
        }
        for s in var.iter_mut() {
            *s /= n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![T::zero(); rows * d];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            for j in 0..d {
                let i = r * d + j;
                xhat[i] = (xs[i] - mean[j]) * inv_std[j];
                out[i] = g[j] * xhat[i] + b[j];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        let stats = BatchStats { mean, var, rows };
        let v = self.push(
            "batch_norm",
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            vec![rows, d],
            out,
            rg,
        )?;
        Ok((v, stats))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (rows, d) = self.check_affine("batch_norm_eval", x, gamma, beta)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(TensorError::invalid(
                "batch_norm_eval",
                format!("running statistics must have length {d}"),
            ));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            for j in 0..d {
                let i = r * d + j;
                out[i] = g[j] * (xs[i] - running_mean[j]) * inv_std[j] + b[j];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        self.push(
            "batch_norm_eval",
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            vec![rows, d],
            out,
            rg,
        )
    }

    /// Mean softmax cross-entropy of `logits[b x c]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = matrix(self.tensor(logits), "softmax_cross_entropy")?;
        if targets.len() != b {
            return Err(TensorError::invalid(
                "softmax_cross_entropy",
                format!("{} targets for {b} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::invalid(
                "softmax_cross_entropy",
                format!("target {t} out of range for {c} classes"),
            ));
        }
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &xs[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            for p in probs[r * c..(r + 1) * c].iter_mut() {
                *p /= z;
            }
            loss += z.ln() + mx - row[targets[r]];
        }
        loss /= T::from_usize(b.max(1)).unwrap();
        let rg = self.needs_grad(&[logits]);
        self.push(
            "softmax_cross_entropy",
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            vec![],
            vec![loss],
            rg,
        )
    }

    /// Mean binary cross-entropy with logits against per-element targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        if targets.len() != self.tensor(logits).len() {
            return Err(TensorError::invalid(
                "bce_with_logits",
                format!("{} targets for {} logits", targets.len(), self.tensor(logits).len()),
            ));
        }
        let xs = self.value(logits);
        let mut loss = T::zero();
        for (&x, &t) in xs.iter().zip(targets) {
            loss += x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
        }
        loss /= T::from_usize(xs.len().max(1)).unwrap();
        let rg = self.needs_grad(&[logits]);
        self.push(
            "bce_with_logits",
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            vec![],
            vec![loss],
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Overwrites the gradient slot of
    /// every node: reachable nodes that require a gradient get
    /// `d loss / d node`, all others are left empty.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_empty() && shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        if !self.nodes[loss.0].tensor.requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].tensor.grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let with = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            let t = &nodes[v.0].tensor;
            if t.requires_grad {
                let len = t.values.len();
                f(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]));
            }
        };
        let value = |v: Var| nodes[v.0].tensor.values.as_slice();
        let out = &nodes[i].tensor.values;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (nodes[a.0].tensor.shape[0], nodes[a.0].tensor.shape[1]);
                let n = nodes[i].tensor.shape[1];
                let (a, b, trans_b) = (*a, *b, *trans_b);
                // C = A B:    dA = G B^T, dB = A^T G
                // C = A B^T:  dA = G B,   dB = G^T A
                with(grads, a, &mut |da| {
                    T::gemm(m, n, k, g, false, value(b), !trans_b, da, true);
                });
                with(grads, b, &mut |db| {
                    if trans_b {
                        T::gemm(n, m, k, g, true, value(a), false, db, true);
                    } else {
                        T::gemm(k, m, n, value(a), true, g, false, db, true);
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let d = nodes[bias.0].tensor.values.len();
                with(grads, *x, &mut |dx| add_into(dx, g));
                with(grads, *bias, &mut |db| {
                    for row in g.chunks_exact(d) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                with(grads, *a, &mut |da| add_into(da, g));
                with(grads, *b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                with(grads, *a, &mut |da| add_into(da, g));
                with(grads, *b, &mut |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                with(grads, a, &mut |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(value(b)) {
                        *d += gv * bv;
                    }
                });
                with(grads, b, &mut |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(value(a)) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                with(grads, *x, &mut |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * s;
                    }
                });
            }
            Op::Sigmoid(x) => with(grads, *x, &mut |dx| {
                for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gv * y * (T::one() - y);
                }
            }),
            Op::Tanh(x) => with(grads, *x, &mut |dx| {
                for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gv * (T::one() - y * y);
                }
            }),
            Op::Swish(x) => {
                let x = *x;
                with(grads, x, &mut |dx| {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(value(x)) {
                        let s = sigmoid(xv);
                        *d += gv * (s + xv * s * (T::one() - s));
                    }
                })
            }
            Op::Map { x, derivative } => {
                let (x, derivative) = (*x, *derivative);
                with(grads, x, &mut |dx| {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(value(x)) {
                        *d += gv * derivative(xv);
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let shape = &nodes[i].tensor.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p.0].tensor.shape[*axis] * inner;
                    with(grads, p, &mut |dp| {
                        for o in 0..outer {
                            add_into(
                                &mut dp[o * chunk..(o + 1) * chunk],
                                &g[o * row + offset..o * row + offset + chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::RepeatRows { x, times } => {
                let d = nodes[x.0].tensor.shape[1];
                let times = *times;
                with(grads, *x, &mut |dx| {
                    for (r, dst) in dx.chunks_exact_mut(d).enumerate() {
                        for t in 0..times {
                            let src = (r * times + t) * d;
                            add_into(dst, &g[src..src + d]);
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let d = nodes[x.0].tensor.shape[1];
                with(grads, *x, &mut |dx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * d..(r + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::MeanGroups { x, group } => {
                let d = nodes[x.0].tensor.shape[1];
                let group = *group;
                let inv = T::one() / T::from_usize(group).unwrap();
                with(grads, *x, &mut |dx| {
                    for (r, dst) in dx.chunks_exact_mut(d).enumerate() {
                        let src = &g[(r / group) * d..(r / group + 1) * d];
                        for (o, &gv) in dst.iter_mut().zip(src) {
                            *o += gv * inv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                with(grads, *x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Reshape(x) => with(grads, *x, &mut |dx| add_into(dx, g)),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = inv_std.len();
                let rows = xhat.len() / d;
                let mut sum_g = vec![T::zero(); d];
                let mut sum_gx = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        let k = r * d + j;
                        sum_g[j] += g[k];
                        sum_gx[j] += g[k] * xhat[k];
                    }
                }
                with(grads, *gamma, &mut |dg| add_into(dg, &sum_gx));
                with(grads, *beta, &mut |db| add_into(db, &sum_g));
                let gam = value(*gamma);
                let n = T::from_usize(rows).unwrap();
                with(grads, *x, &mut |dx| {
                    for r in 0..rows {
                        for j in 0..d {
                            let k = r * d + j;
                            dx[k] += gam[j] * inv_std[j] / n * (n * g[k] - sum_g[j] - xhat[k] * sum_gx[j]);
                        }
                    }
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let d = inv_std.len();
                let xs = value(*x);
                let gam = value(*gamma);
                with(grads, *gamma, &mut |dg| {
                    for (k, &gv) in g.iter().enumerate() {
                        let j = k % d;
                        dg[j] += gv * (xs[k] - mean[j]) * inv_std[j];
                    }
                });
                with(grads, *beta, &mut |db| {
                    for row in g.chunks_exact(d) {
                        add_into(db, row);
                    }
                });
                with(grads, *x, &mut |dx| {
                    for (k, &gv) in g.iter().enumerate() {
                        let j = k % d;
                        dx[k] += gv * gam[j] * inv_std[j];
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let c = nodes[logits.0].tensor.shape[1];
                let scale = g[0] / T::from_usize(targets.len().max(1)).unwrap();
                with(grads, *logits, &mut |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let logits = *logits;
                let scale = g[0] / T::from_usize(targets.len().max(1)).unwrap();
                with(grads, logits, &mut |dl| {
                    for ((d, &x), &t) in dl.iter_mut().zip(value(logits)).zip(targets) {
                        *d += scale * (sigmoid(x) - t);
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut t = Tape::<f64>::new();
        let i2 = t.constant(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let m = t.constant(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p), &[1., 2., 3., 4.]);

        let proj = t.constant(vec![2, 2], vec![1., 0., 0., 0.]).unwrap();
        let m = t.constant(vec![2, 2], vec![5., 6., 7., 8.]).unwrap();
        let p = t.matmul(proj, m).unwrap();
        assert_eq!(t.value(p), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(vec![2, 3], vec![0.; 6]).unwrap();
        let b = t.constant(vec![2, 2], vec![0.; 4]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn concat_single_part_and_widths() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![3], vec![1., 2., 3.]).unwrap();
        let c = t.concat(&[x], 0).unwrap();
        assert_eq!(t.value(c), t.value(x));

        let v = t.constant(vec![2048], vec![0.; 2048]).unwrap();
        let s = t.constant(vec![512], vec![0.; 512]).unwrap();
        let r = t.concat(&[v, s], 0).unwrap();
        assert_eq!(t.shape(r), &[2560]);
        let q = t.constant(vec![1024], vec![0.; 1024]).unwrap();
        let c = t.concat(&[r, q], 0).unwrap();
        assert_eq!(t.shape(c), &[3584]);
    }

    #[test]
    fn concat_errors() {
        let mut t = Tape::<f64>::new();
        assert!(t.concat(&[], 0).is_err());
        let a = t.constant(vec![2, 3], vec![0.; 6]).unwrap();
        let b = t.constant(vec![3, 3], vec![0.; 9]).unwrap();
        assert!(matches!(t.concat(&[a, b], 1), Err(TensorError::ShapeMismatch { .. })));
        assert!(t.concat(&[a, b], 0).is_ok());
    }

    #[test]
    fn concat_matrix_columns() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(vec![2, 1], vec![1., 2.]).unwrap();
        let b = t.constant(vec![2, 2], vec![3., 4., 5., 6.]).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c), &[1., 3., 4., 2., 5., 6.]);
    }

    #[test]
    fn swish_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![1], vec![0.]).unwrap();
        let y = t.swish(x).unwrap();
        assert_eq!(t.value(y), &[0.]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut t = Tape::<f64>::new();
        let x = t.variable(vec![5], vec![0.3, -1., 2., 4., 0.]).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.; 5]);

        let mut t = Tape::<f64>::new();
        let x = t.variable(vec![3], vec![1., 2., 3.]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert!(close(t.grad(x).unwrap(), &[2., 4., 6.]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let x = t.variable(vec![2], vec![1., 2.]).unwrap();
        let y = t.scale(x, 2.).unwrap();
        assert_eq!(t.backward(y), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn unreachable_nodes_keep_empty_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.variable(vec![2], vec![1., 2.]).unwrap();
        let unused = t.variable(vec![2], vec![3., 4.]).unwrap();
        let s = t.sum(x).unwrap();
        let after = t.scale(unused, 2.).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).is_some());
        assert!(t.grad(unused).is_none());
        assert!(t.grad(after).is_none());
    }

    #[test]
    fn nan_guard_fires() {
        let mut t = Tape::<f64>::new();
        t.set_nan_guard(true);
        let x = t.constant(vec![1], vec![-1.]).unwrap();
        let err = t.map("sqrt", x, f64::sqrt, |v| 0.5 / v.sqrt()).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "sqrt" });
    }

    #[test]
    fn batch_norm_two_rows() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![2, 1], vec![1., 3.]).unwrap();
        let g = t.constant(vec![1], vec![1.]).unwrap();
        let b = t.constant(vec![1], vec![0.]).unwrap();
        let (y, stats) = t.batch_norm_train(x, g, b, 0.).unwrap();
        assert!(close(t.value(y), &[-1., 1.]));
        assert!(close(&stats.mean, &[2.]));
        assert!(close(&stats.var, &[1.]));

        let x1 = t.constant(vec![1, 1], vec![1.]).unwrap();
        assert!(t.batch_norm_train(x1, g, b, 1e-5).is_err());
    }

    #[test]
    fn softmax_cross_entropy_uniform() {
        let mut t = Tape::<f64>::new();
        let l = t.variable(vec![1, 4], vec![0.; 4]).unwrap();
        let loss = t.softmax_cross_entropy(l, &[2]).unwrap();
        assert!((t.value(loss)[0] - 4f64.ln()).abs() < 1e-12);
        t.backward(loss).unwrap();
        assert!(close(t.grad(l).unwrap(), &[0.25, 0.25, -0.75, 0.25]));
    }
}
