//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever calls the forward function, so it stays
//! independent of the backward rules it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, TensorError, Var};

pub type Loss = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate(inputs: &[Tensor<f64>], f: &Loss) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss)[0])
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_gradients(inputs: &[Tensor<f64>], f: &Loss) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.tensor(v).len()])
        })
        .collect())
}

/// Central differences of `f` with respect to every input element.
pub fn numeric_gradients(inputs: &[Tensor<f64>], f: &Loss, step: f64) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].values()[j];
            work[i] = perturbed(&inputs[i], j, orig + step);
            let plus = evaluate(&work, f)?;
            work[i] = perturbed(&inputs[i], j, orig - step);
            let minus = evaluate(&work, f)?;
            g.push((plus - minus) / (2.0 * step));
        }
        work[i] = inputs[i].clone();
        out.push(g);
    }
    Ok(out)
}

fn perturbed(t: &Tensor<f64>, j: usize, v: f64) -> Tensor<f64> {
    let mut values = t.values().to_vec();
    values[j] = v;
    Tensor::new(t.shape().to_vec(), values).expect("same shape")
}

/// Largest elementwise relative error between analytic and numeric gradients.
pub fn max_relative_error(inputs: &[Tensor<f64>], f: &Loss, step: f64) -> Result<(f64, usize), TensorError> {
    let analytic = analytic_gradients(inputs, f)?;
    let numeric = numeric_gradients(inputs, f, step)?;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.iter().zip(n) {
            worst = worst.max(relative_error(x, y));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// A named function of random inputs whose gradients can be checked.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub loss: Box<Loss>,
    pub tolerance: f64,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        tolerance: f64,
        loss: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + 'static,
    ) -> Self {
        GradCase {
            name: name.into(),
            inputs,
            loss: Box::new(loss),
            tolerance,
        }
    }

    pub fn run(&self) -> GradCheckReport {
        match max_relative_error(&self.inputs, &*self.loss, STEP) {
            Ok((err, checked)) => GradCheckReport {
                name: self.name.clone(),
                max_rel_error: err,
                checked,
                tolerance: self.tolerance,
                passed: err < self.tolerance,
            },
            Err(_) => GradCheckReport {
                name: self.name.clone(),
                max_rel_error: f64::INFINITY,
                checked: 0,
                tolerance: self.tolerance,
                passed: false,
            },
        }
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, values).expect("consistent shape")
}

/// Reduces `x` to a scalar through fixed pseudo-random weights so that
/// every output element carries a distinct, nonzero upstream gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let n = tape.tensor(x).len();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let w = tape.constant(shape, w)?;
    let prod = tape.mul(x, w)?;
    tape.sum(prod)
}

/// Finite-difference cases for every differentiable tape op.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-6;
    let mut r = |shape: Vec<usize>| random_tensor(&mut rng, shape, 1.0);
    vec![
        GradCase::new("matmul", vec![r(vec![3, 4]), r(vec![4, 2])], tol, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }),
        GradCase::new("matmul_bt", vec![r(vec![3, 4]), r(vec![5, 4])], tol, |t, v| {
            let y = t.matmul_bt(v[0], v[1])?;
            weighted_sum(t, y, 2)
        }),
        GradCase::new("add_bias", vec![r(vec![3, 4]), r(vec![4])], tol, |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            weighted_sum(t, y, 3)
        }),
        GradCase::new("add", vec![r(vec![2, 3]), r(vec![2, 3])], tol, |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 4)
        }),
        GradCase::new("sub", vec![r(vec![2, 3]), r(vec![2, 3])], tol, |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 5)
        }),
        GradCase::new("mul", vec![r(vec![2, 3]), r(vec![2, 3])], tol, |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 6)
        }),
        GradCase::new("scale", vec![r(vec![4])], tol, |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y, 7)
        }),
        GradCase::new("sigmoid", vec![r(vec![20])], tol, |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, 8)
        }),
        GradCase::new("tanh", vec![r(vec![20])], tol, |t, v| {
            let y = t.tanh(v[0])?;
            weighted_sum(t, y, 9)
        }),
        GradCase::new(
            "swish",
            vec![random_tensor(
                &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5157),
                vec![20],
                3.0,
            )],
            tol,
            |t, v| {
                let y = t.swish(v[0])?;
                weighted_sum(t, y, 10)
            },
        ),
        GradCase::new(
            "concat",
            vec![r(vec![2, 3]), r(vec![2, 1]), r(vec![2, 2])],
            tol,
            |t, v| {
                let y = t.concat(v, 1)?;
                weighted_sum(t, y, 11)
            },
        ),
        GradCase::new("repeat_rows", vec![r(vec![2, 3])], tol, |t, v| {
            let y = t.repeat_rows(v[0], 3)?;
            weighted_sum(t, y, 12)
        }),
        GradCase::new("gather_rows", vec![r(vec![4, 3])], tol, |t, v| {
            let y = t.gather_rows(v[0], &[3, 0, 3, 1])?;
            weighted_sum(t, y, 13)
        }),
        GradCase::new("mean_groups", vec![r(vec![6, 2])], tol, |t, v| {
            let y = t.mean_groups(v[0], 3)?;
            weighted_sum(t, y, 14)
        }),
        GradCase::new(
            "batch_norm",
            vec![r(vec![5, 3]), r(vec![3]), r(vec![3])],
            tol,
            |t, v| {
                let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, 15)
            },
        ),
        GradCase::new(
            "batch_norm_eval",
            vec![r(vec![4, 3]), r(vec![3]), r(vec![3])],
            tol,
            |t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
                weighted_sum(t, y, 16)
            },
        ),
        GradCase::new("softmax_cross_entropy", vec![r(vec![3, 5])], tol, |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 4, 2])
        }),
        GradCase::new("bce_with_logits", vec![r(vec![2, 3])], tol, |t, v| {
            t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 0.5, 1.0])
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for case in op_cases(7) {
            let report = case.run();
            assert!(report.passed, "{}: max rel err {}", report.name, report.max_rel_error);
            assert!(report.checked > 0);
        }
    }

    #[test]
    fn wrong_derivative_is_caught() {
        let case = GradCase::new(
            "bad_square",
            vec![Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()],
            1e-6,
            |t, v| {
                // derivative should be 2x
                let y = t.map("bad_square", v[0], |x| x * x, |x| 3.0 * x)?;
                t.sum(y)
            },
        );
        let report = case.run();
        assert!(!report.passed);
        assert_eq!(report.name, "bad_square");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 0.1).abs() < 1e-15);
    }
}
