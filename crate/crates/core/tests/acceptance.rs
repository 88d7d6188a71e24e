//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The training criteria (5-7) take most of the time; set
//! `RAMEN_ACCEPTANCE_SKIP_TRAINING=1` to report them as skipped. The
//! process exits 0 after printing every verdict so that a known shortfall
//! does not hide the other results; set `RAMEN_ACCEPTANCE_STRICT=1` to exit
//! 1 when any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ramen::data::{generate_corpus, parse_question, read_dataset, write_dataset, DataConfig, Split, SplitRegime};
use ramen::model::{Ablation, Batch, RamenConfig, RamenModel, RegionSet};
use ramen::nn::Session;
use ramen::run::{self, Corpus, RunConfig, TrainReport};
use ramen::train::{lr_at_epoch, Schedule};

struct Verdict {
    passed: Option<bool>,
    detail: String,
}

impl Verdict {
    fn check(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed: Some(passed),
            detail: detail.into(),
        }
    }

    fn skipped(detail: impl Into<String>) -> Self {
        Verdict {
            passed: None,
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Verdict::check(false, format!("error: {e}"))
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    let summary = match run::grad_check(0) {
        Ok(s) => s,
        Err(e) => return Verdict::error(e),
    };
    let elapsed = t.elapsed();
    let worst_model = summary
        .reports
        .iter()
        .filter(|r| r.name.contains('/'))
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let failed: Vec<&str> = summary.failures().map(|r| r.name.as_str()).collect();
    let ok = failed.is_empty() && worst_model < 1e-4 && elapsed < Duration::from_secs(60);
    Verdict::check(
        ok,
        format!(
            "{} checks, worst model rel err {worst_model:.2e}, {} failed {failed:?}, {}",
            summary.reports.len(),
            failed.len(),
            secs(elapsed)
        ),
    )
}

fn shape_contract() -> Verdict {
    let cfg = RamenConfig {
        vocab_size: 43,
        num_answers: 28,
        ..RamenConfig::default()
    };
    let result = (|| -> ramen::Result<(Vec<usize>, Vec<usize>)> {
        let model = RamenModel::<f32>::new(cfg.clone(), 0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sets: Vec<RegionSet> = (0..2)
            .map(|_| {
                let values = (0..15 * 2560).map(|_| rng.gen_range(0.0..1.0)).collect();
                RegionSet::new(15, 2560, values)
            })
            .collect::<ramen::Result<_>>()?;
        let refs: Vec<&RegionSet> = sets.iter().collect();
        let batch = Batch::<f32>::new(&refs, vec![vec![5, 6, 7], vec![8, 9]])?;
        let mut sess = Session::inference(&model.params);
        let (logits, trace) = model.forward_traced(&mut sess, &batch)?;
        let got = vec![
            trace.region,
            trace.fused,
            trace.projected,
            trace.late_fused,
            trace.aggregated,
            trace.logits,
        ];
        Ok((got, sess.tape.shape(logits).to_vec()))
    })();
    match result {
        Ok((got, logits)) => {
            let want = vec![2560, 3584, 1024, 2048, 2048, 28];
            Verdict::check(
                got == want && logits == [2, 28],
                format!("region, fused, projected, late, aggregated, logits = {got:?}; logits {logits:?}"),
            )
        }
        Err(e) => Verdict::error(e),
    }
}

fn schedule_exactness() -> Verdict {
    let s = Schedule::default();
    let got: Vec<f64> = (1..=10).map(|e| lr_at_epoch(&s, e)).collect();
    let want = [2.5e-4, 5e-4, 7.5e-4, 1.0e-3, 5e-4, 5e-4, 5e-4, 5e-4, 5e-4, 5e-4];
    Verdict::check(got == want, format!("epochs 1-10 -> {got:?}"))
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let worst = (0..50)
        .map(|_| common::metric_discrepancy(&mut rng, 200))
        .fold(0.0, f64::max);
    Verdict::check(
        worst <= 1e-12,
        format!("50 corpora x 200 records, max |diff| {worst:.1e}"),
    )
}

/// Config for the training criteria: the defaults (10k questions, 15
/// regions, sigma 0.1, desk widths, 20 epochs, default schedule).
fn training_config(regime: SplitRegime) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.split_regime = regime;
    cfg
}

fn train_once(cfg: &RunConfig, zero_regions: bool) -> ramen::Result<(TrainReport, Duration)> {
    let t = Instant::now();
    let corpus = Corpus::load(cfg)?;
    let mut prepared = corpus.prepare(cfg)?;
    if zero_regions {
        prepared.zero_regions();
    }
    let rep = run::train_prepared(cfg, &prepared, &corpus.families, None, false)?;
    Ok((rep, t.elapsed()))
}

fn learning_sanity(iid: &ramen::Result<(TrainReport, Duration)>) -> Verdict {
    let (full, took) = match iid {
        Ok(r) => r,
        Err(e) => return Verdict::error(e),
    };
    let baseline = match train_once(&training_config(SplitRegime::Iid), true) {
        Ok((r, _)) => r,
        Err(e) => return Verdict::error(e),
    };
    let (f, q) = (full.best_val, baseline.best_val);
    let ok = f >= 0.90 && f - q >= 0.20 && *took < Duration::from_secs(30 * 60);
    Verdict::check(
        ok,
        format!(
            "full val {f:.4} (need >= 0.90), question-only val {q:.4}, margin {:.1} points (need >= 20), \
             full run {} (need < 30 min)",
            100.0 * (f - q),
            secs(*took)
        ),
    )
}

fn ablation_structure() -> Verdict {
    let cfg = training_config(SplitRegime::Compositional);
    let table = (|| {
        let corpus = Corpus::load(&cfg)?;
        let prepared = corpus.prepare(&cfg)?;
        run::ablate_prepared(&cfg, &prepared, &corpus.families, None, run::worker_threads())
    })();
    let table = match table {
        Ok(t) => t,
        Err(e) => return Verdict::error(e),
    };
    let test = |a: Ablation| table.median_of(a).and_then(|(_, t)| t).unwrap_or(f64::NAN);
    let (full, mean, no_ef, no_lf) = (
        test(Ablation::Full),
        test(Ablation::MeanPool),
        test(Ablation::NoEarlyFusion),
        test(Ablation::NoLateFusion),
    );
    let ef_gap = full - no_ef;
    let lf_gap = (full - no_lf).abs();
    let ok = full > mean && mean > no_ef && ef_gap >= 3.0 * lf_gap;
    Verdict::check(
        ok,
        format!(
            "median compositional test acc over {} seeds: full {full:.4}, mean_pool {mean:.4}, \
             no_early_fusion {no_ef:.4}, no_late_fusion {no_lf:.4}; early gap {ef_gap:.4} vs 3 x late gap {:.4}",
            cfg.ablation_seeds,
            3.0 * lf_gap
        ),
    )
}

fn generalization_gap(iid: &ramen::Result<(TrainReport, Duration)>) -> Verdict {
    let iid = match iid {
        Ok((r, _)) => r,
        Err(e) => return Verdict::error(e),
    };
    let cp = match train_once(&training_config(SplitRegime::ChangingPriors), false) {
        Ok((r, _)) => r,
        Err(e) => return Verdict::error(e),
    };
    let (Some(a), Some(b)) = (iid.test_accuracy(), cp.test_accuracy()) else {
        return Verdict::check(false, "a run has no test split");
    };
    Verdict::check(
        a - b >= 0.10,
        format!(
            "test acc iid {a:.4}, changing priors {b:.4}: drop {:.1} points (need >= 10); \
             val acc iid {:.4}, changing priors {:.4}",
            100.0 * (a - b),
            iid.best_val,
            cp.best_val
        ),
    )
}

fn determinism_and_resume() -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.data.num_questions = 1500;
    cfg.trainer.max_epochs = 3;
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let result = (|| -> ramen::Result<(bool, bool)> {
        run::train_command(&cfg, dirs[0].path(), false)?;
        run::train_command(&cfg, dirs[1].path(), false)?;
        let curve = |d: &tempfile::TempDir| std::fs::read(d.path().join(ramen::train::CURVE_FILE)).unwrap();
        let same_curves = curve(&dirs[0]) == curve(&dirs[1]);
        let mut short = cfg.clone();
        short.trainer.max_epochs = 2;
        run::train_command(&short, dirs[2].path(), false)?;
        run::train_command(&cfg, dirs[2].path(), true)?;
        let ckpt = |d: &tempfile::TempDir| std::fs::read(d.path().join(ramen::train::LAST_CHECKPOINT)).unwrap();
        let same_resume = ckpt(&dirs[0]) == ckpt(&dirs[2]) && curve(&dirs[0]) == curve(&dirs[2]);
        Ok((same_curves, same_resume))
    })();
    match result {
        Ok((curves, resume)) => Verdict::check(
            curves && resume,
            format!("identical curves across runs: {curves}; 2 + resume 1 == 3 straight (checkpoint bytes): {resume}"),
        ),
        Err(e) => Verdict::error(e),
    }
}

fn data_integrity() -> Verdict {
    let result = (|| -> ramen::Result<String> {
        let iid = DataConfig::default();
        let (data, _) = generate_corpus(&iid)?;
        let bad = data.validate_answers()?;
        let comp_cfg = DataConfig {
            split_regime: SplitRegime::Compositional,
            ..DataConfig::default()
        };
        let (comp, _) = generate_corpus(&comp_cfg)?;
        let scenes: std::collections::HashMap<u64, &ramen::data::Scene> =
            comp.scenes.iter().map(|s| (s.id, s)).collect();
        let mut train_pairs = BTreeSet::new();
        let mut test_pairs = BTreeSet::new();
        for it in &comp.items {
            let pairs = parse_question(&it.question)?.referenced_pairs(scenes[&it.scene_id]);
            match it.split {
                Split::Train | Split::Val => train_pairs.extend(pairs),
                Split::Test => test_pairs.extend(pairs),
            }
        }
        let overlap = train_pairs.intersection(&test_pairs).count();
        let dir = tempfile::tempdir().map_err(|e| ramen::Error::io("tempdir", e))?;
        write_dataset(dir.path(), &data, None)?;
        let back = read_dataset(dir.path())?;
        let dir2 = tempfile::tempdir().map_err(|e| ramen::Error::io("tempdir", e))?;
        write_dataset(dir2.path(), &back, None)?;
        let bytes_same = ["scenes.jsonl", "questions.jsonl"]
            .iter()
            .all(|f| std::fs::read(dir.path().join(f)).unwrap() == std::fs::read(dir2.path().join(f)).unwrap());
        let ok = bad.is_empty() && overlap == 0 && !test_pairs.is_empty() && back == data && bytes_same;
        let msg = format!(
            "{} items, {} oracle mismatches; compositional train/test pair overlap {overlap} \
             ({} test pairs); round trip equal {}, bytes equal {bytes_same}",
            data.items.len(),
            bad.len(),
            test_pairs.len(),
            back == data
        );
        if ok {
            Ok(msg)
        } else {
            Err(ramen::Error::Data(msg))
        }
    })();
    match result {
        Ok(msg) => Verdict::check(true, msg),
        Err(ramen::Error::Data(msg)) => Verdict::check(false, msg),
        Err(e) => Verdict::error(e),
    }
}

fn main() -> ExitCode {
    run::tune_allocator();
    let skip_training = std::env::var_os("RAMEN_ACCEPTANCE_SKIP_TRAINING").is_some();
    let strict = std::env::var_os("RAMEN_ACCEPTANCE_STRICT").is_some();
    let start = Instant::now();
    let mut verdicts: Vec<(u8, &str, Verdict)> = Vec::new();
    let mut report = |n: u8, name: &'static str, v: Verdict| {
        let tag = match v.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        println!("criterion {n} [{tag}] {name}: {}", v.detail);
        verdicts.push((n, name, v));
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "shape contract", shape_contract());
    report(3, "schedule exactness", schedule_exactness());
    report(4, "metric oracle equivalence", metric_oracles());
    if skip_training {
        for (n, name) in [
            (5, "learning sanity"),
            (6, "ablation structure"),
            (7, "generalization gap"),
        ] {
            report(n, name, Verdict::skipped("RAMEN_ACCEPTANCE_SKIP_TRAINING is set"));
        }
    } else {
        let iid = train_once(&training_config(SplitRegime::Iid), false);
        report(5, "learning sanity", learning_sanity(&iid));
        report(6, "ablation structure", ablation_structure());
        report(7, "generalization gap", generalization_gap(&iid));
    }
    report(8, "determinism and persistence", determinism_and_resume());
    report(9, "data integrity", data_integrity());
    let failed = verdicts.iter().filter(|(_, _, v)| v.passed == Some(false)).count();
    let passed = verdicts.iter().filter(|(_, _, v)| v.passed == Some(true)).count();
    println!(
        "acceptance: {passed} passed, {failed} failed, {} skipped in {}",
        verdicts.len() - passed - failed,
        secs(start.elapsed())
    );
    if strict && failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
