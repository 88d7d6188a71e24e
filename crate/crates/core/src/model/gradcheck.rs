//! Finite-difference validation of every model parameter gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Ablation, Batch, RamenConfig, RamenModel, RegionSet, Targets};
use crate::error::Result;
use crate::nn::Session;
use crate::tensor::gradcheck::{relative_error, GradCheckReport, STEP};

pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Tiny widths for end-to-end checks: 5 answers, 7 tokens.
pub fn toy_config(ablation: Ablation) -> RamenConfig {
    RamenConfig {
        visual_dim: 6,
        spatial_dim: 8,
        vocab_size: 7,
        embedding_dim: 4,
        question_dim: 4,
        projector_width: 4,
        aggregator_hidden: 4,
        pre_classifier_width: 6,
        num_answers: 5,
        ablation,
        ..RamenConfig::default()
    }
}

/// A toy model plus a batch of three items, each with 2 regions and a
/// 3-token question, and their answer targets. With only two items the
/// batch norm would map every question column to exactly +-1.
pub fn toy_instance(ablation: Ablation, seed: u64) -> (RamenModel<f64>, Batch<f64>, Targets) {
    let config = toy_config(ablation);
    let model = RamenModel::new(config.clone(), seed).expect("toy config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let dim = config.region_dim();
    let sets: Vec<RegionSet> = (0..3)
        .map(|_| {
            let values = (0..2 * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            RegionSet::new(2, dim, values).unwrap()
        })
        .collect();
    let questions = vec![vec![1, 4, 2], vec![3, 5, 6], vec![2, 2, 4]];
    let refs: Vec<&RegionSet> = sets.iter().collect();
    let batch = Batch::new(&refs, questions).unwrap();
    (model, batch, Targets::Single(vec![1, 3, 0]))
}

fn loss_value(model: &RamenModel<f64>, batch: &Batch<f64>, targets: &Targets) -> Result<f64> {
    let mut sess = Session::new(&model.params);
    let logits = model.forward(&mut sess, batch)?;
    let loss = model.loss(&mut sess, logits, targets)?;
    Ok(sess.tape.value(loss)[0])
}

/// Analytic gradient of the loss for every parameter (`None` when the
/// parameter is not reached).
pub fn model_gradients(
    model: &RamenModel<f64>,
    batch: &Batch<f64>,
    targets: &Targets,
) -> Result<Vec<Option<Vec<f64>>>> {
    let mut sess = Session::new(&model.params);
    let logits = model.forward(&mut sess, batch)?;
    let loss = model.loss(&mut sess, logits, targets)?;
    sess.tape.backward(loss)?;
    Ok(sess.param_grads())
}

/// Compares every parameter gradient against central differences; one
/// report per parameter tensor.
pub fn check_model(model: &mut RamenModel<f64>, batch: &Batch<f64>, targets: &Targets) -> Result<Vec<GradCheckReport>> {
    let analytic = model_gradients(model, batch, targets)?;
    let mut reports = Vec::new();
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.get(id).name.clone();
        let n = model.params.get(id).values.len();
        let grad = analytic[id.index()].clone().unwrap_or_else(|| vec![0.0; n]);
        let mut worst: f64 = 0.0;
        for (j, &g) in grad.iter().enumerate() {
            let orig = model.params.get(id).values[j];
            model.params.get_mut(id).values[j] = orig + STEP;
            let plus = loss_value(model, batch, targets)?;
            model.params.get_mut(id).values[j] = orig - STEP;
            let minus = loss_value(model, batch, targets)?;
            model.params.get_mut(id).values[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(g, numeric));
        }
        reports.push(GradCheckReport {
            name: format!("{}/{}", model.config.ablation.name(), name),
            max_rel_error: worst,
            checked: n,
            tolerance: MODEL_TOLERANCE,
            passed: worst < MODEL_TOLERANCE,
        });
    }
    Ok(reports)
}
