//! Brute-force metric oracles and random record corpora shared by the
//! integration tests. Written with plain loops over the records and no
//! code from the metrics module.

#![allow(dead_code)]

use ramen::metrics::{Gold, PredictionRecord};
use rand::seq::SliceRandom;
use rand::Rng;

pub const FAMILIES: [&str; 5] = [
    "exist",
    "count",
    "query_attribute",
    "compare_attribute",
    "integer_comparison",
];
const ANSWERS: [&str; 8] = ["yes", "no", "0", "1", "2", "red", "cube", "small"];

/// Random spelling of an answer: case and surrounding blanks vary.
fn spell(rng: &mut impl Rng, a: &str) -> String {
    let mut s = if rng.gen_bool(0.2) {
        a.to_uppercase()
    } else {
        a.to_string()
    };
    if rng.gen_bool(0.1) {
        s = format!(" {s}");
    }
    if rng.gen_bool(0.1) {
        s.push(' ');
    }
    s
}

fn canon(s: &str) -> String {
    s.trim().to_lowercase()
}

/// `n` records with one gold answer each; predictions are right about
/// half the time.
pub fn single_corpus(rng: &mut impl Rng, n: usize) -> Vec<PredictionRecord> {
    (0..n)
        .map(|i| {
            let family = FAMILIES[rng.gen_range(0..FAMILIES.len())];
            let gold = *ANSWERS[..rng.gen_range(2..=ANSWERS.len())].choose(rng).unwrap();
            let predicted = if rng.gen_bool(0.5) {
                gold
            } else {
                ANSWERS.choose(rng).unwrap()
            };
            PredictionRecord {
                question_id: i as u64,
                family: family.to_string(),
                predicted: spell(rng, predicted),
                gold: Gold::Single(spell(rng, gold)),
            }
        })
        .collect()
}

/// `n` records with ten annotator answers each.
pub fn multi_corpus(rng: &mut impl Rng, n: usize) -> Vec<PredictionRecord> {
    (0..n)
        .map(|i| {
            let family = FAMILIES[rng.gen_range(0..FAMILIES.len())];
            let pool = &ANSWERS[..rng.gen_range(1..=4)];
            let gold: Vec<String> = (0..10)
                .map(|_| {
                    let a = *pool.choose(rng).unwrap();
                    spell(rng, a)
                })
                .collect();
            let predicted = ANSWERS.choose(rng).unwrap();
            PredictionRecord {
                question_id: i as u64,
                family: family.to_string(),
                predicted: spell(rng, predicted),
                gold: Gold::Multi(gold),
            }
        })
        .collect()
}

pub fn brute_score(r: &PredictionRecord) -> f64 {
    let p = canon(&r.predicted);
    match &r.gold {
        Gold::Single(g) => {
            if canon(g) == p {
                1.0
            } else {
                0.0
            }
        }
        Gold::Multi(gs) => {
            let mut hits = 0;
            for g in gs {
                if canon(g) == p {
                    hits += 1;
                }
            }
            if hits >= 3 {
                1.0
            } else {
                hits as f64 / 3.0
            }
        }
    }
}

/// Most frequent canonical gold answer; ties go to the smallest string.
pub fn brute_key(r: &PredictionRecord) -> String {
    match &r.gold {
        Gold::Single(g) => canon(g),
        Gold::Multi(gs) => {
            let all: Vec<String> = gs.iter().map(|g| canon(g)).collect();
            let mut best = String::new();
            let mut best_count = 0;
            for cand in &all {
                let c = all.iter().filter(|x| *x == cand).count();
                if c > best_count || (c == best_count && *cand < best) {
                    best = cand.clone();
                    best_count = c;
                }
            }
            best
        }
    }
}

pub fn brute_mean_score(records: &[PredictionRecord]) -> f64 {
    let mut total = 0.0;
    for r in records {
        total += brute_score(r);
    }
    total / records.len() as f64
}

fn distinct(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v.dedup();
    v
}

pub fn brute_mpt(records: &[PredictionRecord]) -> f64 {
    let families = distinct(records.iter().map(|r| r.family.clone()).collect());
    let mut sum = 0.0;
    for f in &families {
        let mine: Vec<&PredictionRecord> = records.iter().filter(|r| &r.family == f).collect();
        let mut s = 0.0;
        for r in &mine {
            s += brute_score(r);
        }
        sum += s / mine.len() as f64;
    }
    sum / families.len() as f64
}

pub fn brute_nmpt(records: &[PredictionRecord]) -> f64 {
    let families = distinct(records.iter().map(|r| r.family.clone()).collect());
    let mut sum = 0.0;
    for f in &families {
        let mine: Vec<&PredictionRecord> = records.iter().filter(|r| &r.family == f).collect();
        let keys = distinct(mine.iter().map(|r| brute_key(r)).collect());
        let mut fam = 0.0;
        for k in &keys {
            let group: Vec<&&PredictionRecord> = mine.iter().filter(|r| &brute_key(r) == k).collect();
            let mut s = 0.0;
            for r in &group {
                s += brute_score(r);
            }
            fam += s / group.len() as f64;
        }
        sum += fam / keys.len() as f64;
    }
    sum / families.len() as f64
}

/// Largest absolute difference between the library metrics and the brute
/// force over one corpus of each kind.
pub fn metric_discrepancy(rng: &mut impl Rng, n: usize) -> f64 {
    use ramen::metrics::*;
    let single = single_corpus(rng, n);
    let multi = multi_corpus(rng, n);
    let pairs = [
        (simple_accuracy(&single).unwrap(), brute_mean_score(&single)),
        (mean_per_type(&single).unwrap(), brute_mpt(&single)),
        (normalized_mean_per_type(&single).unwrap(), brute_nmpt(&single)),
        (vqa_10choose3(&multi).unwrap(), brute_mean_score(&multi)),
        (mean_per_type(&multi).unwrap(), brute_mpt(&multi)),
        (normalized_mean_per_type(&multi).unwrap(), brute_nmpt(&multi)),
    ];
    pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
