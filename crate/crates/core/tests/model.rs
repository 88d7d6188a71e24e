use ramen::model::{Ablation, Batch, RamenConfig, RamenModel, RegionSet};
use ramen::nn::Session;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(rng: &mut ChaCha8Rng, dim: usize, regions: &[usize]) -> (Vec<RegionSet>, Vec<Vec<usize>>) {
    let sets = regions
        .iter()
        .map(|&n| RegionSet::new(n, dim, (0..n * dim).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let qs = regions
        .iter()
        .map(|_| (0..rng.gen_range(2..7)).map(|_| rng.gen_range(2..40)).collect())
        .collect();
    (sets, qs)
}

#[test]
fn full_size_widths_follow_the_configuration() {
    let cfg = RamenConfig {
        vocab_size: 43,
        num_answers: 28,
        ..RamenConfig::default()
    };
    let model = RamenModel::<f32>::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (sets, qs) = batch(&mut rng, cfg.region_dim(), &[15, 15]);
    let refs: Vec<&RegionSet> = sets.iter().collect();
    let b = Batch::<f32>::new(&refs, qs).unwrap();
    let mut sess = Session::inference(&model.params);
    let (logits, t) = model.forward_traced(&mut sess, &b).unwrap();
    assert_eq!(
        [t.region, t.fused, t.projected, t.late_fused, t.aggregated, t.logits],
        [2560, 3584, 1024, 2048, 2048, 28]
    );
    assert_eq!(sess.tape.shape(logits), &[2, 28]);
}

#[test]
fn every_variant_yields_one_row_per_question() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for ablation in [
        Ablation::Full,
        Ablation::NoEarlyFusion,
        Ablation::NoLateFusion,
        Ablation::MeanPool,
    ] {
        let cfg = RamenConfig {
            ablation,
            ..RamenConfig::desk(43, 9)
        };
        let mut model = RamenModel::<f32>::new(cfg.clone(), 3).unwrap();
        model.set_training(false);
        let (sets, qs) = batch(&mut rng, cfg.region_dim(), &[5, 5, 5]);
        let refs: Vec<&RegionSet> = sets.iter().collect();
        let b = Batch::<f32>::new(&refs, qs).unwrap();
        let preds = model.predict(&b).unwrap();
        assert_eq!(preds.len(), 3, "{ablation:?}");
        assert!(preds.iter().all(|&p| p < 9));
    }
}

#[test]
fn batches_reject_mixed_region_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (sets, qs) = batch(&mut rng, 16, &[3, 4]);
    let refs: Vec<&RegionSet> = sets.iter().collect();
    assert!(Batch::<f32>::new(&refs, qs).is_err());
}
