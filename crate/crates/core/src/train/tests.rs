use super::*;
use crate::data::{generate_corpus, generate_questions, generate_scene, DataConfig, QaItem};

fn small_features() -> FeatureConfig {
    FeatureConfig {
        visual_dim: 64,
        spatial_dim: 32,
        ..FeatureConfig::default()
    }
}

fn small_model(data: &Prepared) -> RamenConfig {
    RamenConfig {
        visual_dim: 64,
        spatial_dim: 32,
        embedding_dim: 16,
        question_dim: 16,
        projector_width: 16,
        aggregator_hidden: 16,
        pre_classifier_width: 32,
        ..data.desk_config()
    }
}

fn corpus(n: usize) -> Prepared {
    let cfg = DataConfig {
        num_questions: n,
        seed: 2,
        features: small_features(),
        ..DataConfig::default()
    };
    let (data, _) = generate_corpus(&cfg).unwrap();
    Prepared::new(&data, &cfg.features, VocabRule::MinCount(1)).unwrap()
}

fn quick(epochs: usize) -> TrainerConfig {
    TrainerConfig {
        batch_size: 32,
        max_epochs: epochs,
        seed: 4,
        ..TrainerConfig::default()
    }
}

#[test]
fn schedule_values() {
    let s = Schedule::default();
    let got: Vec<f64> = (1..=10).map(|e| lr_at_epoch(&s, e)).collect();
    assert_eq!(
        got,
        vec![2.5e-4, 5e-4, 7.5e-4, 1.0e-3, 5e-4, 5e-4, 5e-4, 5e-4, 5e-4, 5e-4]
    );
    assert_eq!(lr_at_epoch(&s, 11), 1.25e-4);
    assert_eq!(lr_at_epoch(&s, 12), 1.25e-4);
    assert_eq!(lr_at_epoch(&s, 13), 5e-4 * 0.25 * 0.25);
    assert!((1..500).all(|e| lr_at_epoch(&s, e) > 0.0));
}

#[test]
fn zero_epochs_do_nothing() {
    let data = corpus(300);
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::<f32>::new(small_model(&data), &quick(0)).unwrap();
    train(&mut state, &data, &quick(0), &Schedule::default(), Some(dir.path())).unwrap();
    assert!(state.log.is_empty());
    assert!(!dir.path().join(LAST_CHECKPOINT).exists());
    assert!(!dir.path().join(BEST_CHECKPOINT).exists());
}

#[test]
fn small_batches_are_rejected() {
    let cfg = TrainerConfig {
        batch_size: 1,
        ..TrainerConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn runs_are_bit_identical() {
    let data = corpus(400);
    let run = || {
        let mut s = TrainState::<f32>::new(small_model(&data), &quick(2)).unwrap();
        train(&mut s, &data, &quick(2), &Schedule::default(), None).unwrap();
        (curve_csv(&s.log), Snapshot::of(&s.model))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.lines().count(), 3);
    assert!(a.starts_with("epoch,lr,train_loss,train_acc,val_acc\n1,2.500000000e-4,"));
}

#[test]
fn resume_matches_straight_through() {
    let data = corpus(400);
    let schedule = Schedule::default();
    let mut straight = TrainState::<f32>::new(small_model(&data), &quick(3)).unwrap();
    train(&mut straight, &data, &quick(3), &schedule, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = TrainState::<f32>::new(small_model(&data), &quick(2)).unwrap();
    train(&mut first, &data, &quick(2), &schedule, Some(dir.path())).unwrap();
    let ckpt = load_checkpoint::<f32>(&dir.path().join(LAST_CHECKPOINT), None).unwrap();
    let mut resumed = ckpt.training.unwrap();
    assert_eq!(resumed.epoch, 2);
    train(&mut resumed, &data, &quick(3), &schedule, Some(dir.path())).unwrap();

    assert_eq!(Snapshot::of(&resumed.model), Snapshot::of(&straight.model));
    assert_eq!(resumed.log, straight.log);
    assert_eq!(resumed.optimizer, straight.optimizer);
    assert_eq!(resumed.best, straight.best);
    let csv = std::fs::read_to_string(dir.path().join(CURVE_FILE)).unwrap();
    assert_eq!(csv, curve_csv(&straight.log));
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let data = corpus(300);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut state = TrainState::<f64>::new(small_model(&data), &quick(1)).unwrap();
    train(&mut state, &data, &quick(1), &Schedule::default(), None).unwrap();
    save_checkpoint(&path, &Checkpoint::training(&state, &data.vocab)).unwrap();

    let back = load_checkpoint::<f64>(&path, Some(&state.model.config)).unwrap();
    assert_eq!(back.model.params, state.model.params);
    assert_eq!(back.model.input_bn.running(), state.model.input_bn.running());
    assert_eq!(back.vocab, data.vocab);
    let t = back.training.unwrap();
    assert_eq!(t.optimizer, state.optimizer);
    assert_eq!(t.log, state.log);
    assert_eq!(t.best, state.best);

    let other = RamenConfig {
        num_answers: state.model.config.num_answers + 1,
        question_dim: 8,
        ..state.model.config.clone()
    };
    let err = load_checkpoint::<f64>(&path, Some(&other)).unwrap_err().to_string();
    assert!(err.contains("num_answers") && err.contains("question_dim"), "{err}");
    assert!(load_checkpoint::<f32>(&path, None).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint::<f64>(&path, None).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");

    bytes[last] ^= 1;
    bytes[8] = 9;
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint::<f64>(&path, None).unwrap_err().to_string();
    assert!(err.contains("version 9"), "{err}");

    std::fs::write(&path, b"hello").unwrap();
    assert!(load_checkpoint::<f64>(&path, None).is_err());
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let data = corpus(400);
    let cfg = TrainerConfig {
        early_stop_patience: 1,
        ..quick(12)
    };
    let mut state = TrainState::<f32>::new(small_model(&data), &cfg).unwrap();
    train(&mut state, &data, &cfg, &Schedule::default(), None).unwrap();
    let best = state.log.iter().map(|e| e.val_acc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(state.best_val, best);
    assert_eq!(state.log[state.best_epoch - 1].val_acc, best);
    let mut model = state.best_model().unwrap();
    assert_eq!(accuracy(&mut model, &data, &data.val).unwrap(), best);
    if state.log.len() < 12 {
        assert_eq!(state.since_best, 1);
    }
}

/// 200 exist questions, trained and scored on themselves. Batches of 8
/// and a plateau held for all 30 epochs give the optimizer enough steps to
/// overfit at desk widths.
#[test]
fn memorizes_a_small_single_family_corpus() {
    let features = small_features();
    let mut scenes = Vec::new();
    let mut items = Vec::new();
    let tokens = TokenVocab::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut id = 0;
    while items.len() < 200 {
        let scene = generate_scene(6, id, 10).unwrap();
        for p in generate_questions(&scene, &[Family::Exist], 2, &mut rng).unwrap() {
            items.push(QaItem {
                id: items.len() as u64,
                scene_id: scene.id,
                family: Family::Exist,
                question: p.text(),
                tokens: tokens.encode(&p.text()),
                answer: p.answer(&scene).unwrap(),
                split: Split::Train,
            });
        }
        scenes.push(scene);
        id += 1;
    }
    items.truncate(200);
    let dataset = Dataset { scenes, items };
    let mut data = Prepared::new(&dataset, &features, VocabRule::MinCount(1)).unwrap();
    data.val = data.train.clone();
    let cfg = TrainerConfig {
        batch_size: 8,
        max_epochs: 30,
        early_stop_patience: 30,
        ..TrainerConfig::default()
    };
    let schedule = Schedule {
        plateau_until_epoch: 30,
        ..Schedule::default()
    };
    let model = RamenConfig {
        visual_dim: 64,
        spatial_dim: 32,
        ..data.desk_config()
    };
    let mut state = TrainState::<f32>::new(model, &cfg).unwrap();
    train(&mut state, &data, &cfg, &schedule, None).unwrap();
    let train_acc = accuracy(&mut state.model, &data, &data.train).unwrap();
    assert!(train_acc >= 0.99, "train accuracy {train_acc}");
}
