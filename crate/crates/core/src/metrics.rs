//! Evaluation metrics: simple accuracy, 10-choose-3 consensus accuracy,
//! mean-per-type (MPT) and normalized mean-per-type (N-MPT).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Single(String),
    /// Ten annotator answers.
    Multi(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub question_id: u64,
    pub family: String,
    pub predicted: String,
    pub gold: Gold,
}

fn norm(s: &str) -> String {
    s.trim().to_lowercase()
}

impl PredictionRecord {
    pub fn single(question_id: u64, family: &str, predicted: &str, gold: &str) -> Self {
        PredictionRecord {
            question_id,
            family: family.to_string(),
            predicted: predicted.to_string(),
            gold: Gold::Single(gold.to_string()),
        }
    }

    /// 1 or 0 against a single answer, `min(matches / 3, 1)` against ten.
    pub fn score(&self) -> Result<f64> {
        let p = norm(&self.predicted);
        match &self.gold {
            Gold::Single(g) => Ok(if norm(g) == p { 1.0 } else { 0.0 }),
            Gold::Multi(gs) => {
                if gs.len() != 10 {
                    return Err(Error::Data(format!(
                        "question {} has {} gold answers, expected 10",
                        self.question_id,
                        gs.len()
                    )));
                }
                let matches = gs.iter().filter(|g| norm(g) == p).count();
                Ok((matches as f64 / 3.0).min(1.0))
            }
        }
    }

    /// The answer a record counts toward in N-MPT: the single gold answer,
    /// or the most common of ten (ties go to the lexicographically first).
    pub fn gold_key(&self) -> String {
        match &self.gold {
            Gold::Single(g) => norm(g),
            Gold::Multi(gs) => {
                let mut counts: BTreeMap<String, usize> = BTreeMap::new();
                for g in gs {
                    *counts.entry(norm(g)).or_default() += 1;
                }
                let best = counts.values().copied().max().unwrap_or(0);
                counts
                    .into_iter()
                    .find(|&(_, c)| c == best)
                    .map(|(k, _)| k)
                    .unwrap_or_default()
            }
        }
    }
}

fn non_empty(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Data("no prediction records".into()));
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Fraction of exact answer matches over single-answer records.
pub fn simple_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    non_empty(records)?;
    let mut scores = Vec::with_capacity(records.len());
    for r in records {
        if matches!(r.gold, Gold::Multi(_)) {
            return Err(Error::Data(format!(
                "question {} has several gold answers; simple accuracy needs one",
                r.question_id
            )));
        }
        scores.push(r.score()?);
    }
    Ok(mean(scores.into_iter()))
}

/// Mean of `min(#annotators agreeing / 3, 1)` over ten-answer records.
pub fn vqa_10choose3(records: &[PredictionRecord]) -> Result<f64> {
    non_empty(records)?;
    let mut scores = Vec::with_capacity(records.len());
    for r in records {
        if !matches!(r.gold, Gold::Multi(_)) {
            return Err(Error::Data(format!(
                "question {} has a single gold answer; 10-choose-3 needs ten",
                r.question_id
            )));
        }
        scores.push(r.score()?);
    }
    Ok(mean(scores.into_iter()))
}

/// family -> gold answer -> (score sum, count).
type Tally = BTreeMap<String, BTreeMap<String, (f64, usize)>>;

fn tally(records: &[PredictionRecord]) -> Result<Tally> {
    let mut t: Tally = BTreeMap::new();
    for r in records {
        let s = r.score()?;
        let e = t.entry(r.family.clone()).or_default().entry(r.gold_key()).or_default();
        e.0 += s;
        e.1 += 1;
    }
    Ok(t)
}

fn family_accuracy(answers: &BTreeMap<String, (f64, usize)>) -> f64 {
    let (s, n) = answers.values().fold((0.0, 0), |(s, n), &(a, b)| (s + a, n + b));
    s / n as f64
}

fn family_normalized(answers: &BTreeMap<String, (f64, usize)>) -> f64 {
    mean(answers.values().map(|&(s, n)| s / n as f64))
}

/// Unweighted mean of per-family accuracies.
pub fn mean_per_type(records: &[PredictionRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(mean(tally(records)?.values().map(family_accuracy)))
}

/// Per family, the unweighted mean of per-answer accuracies; then the
/// unweighted mean over families. An answer that was never predicted
/// correctly contributes 0.
pub fn normalized_mean_per_type(records: &[PredictionRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(mean(tally(records)?.values().map(family_normalized)))
}

/// Harmonic mean of per-family accuracies; 0 if any family scores 0.
pub fn harmonic_mean_per_type(records: &[PredictionRecord]) -> Result<f64> {
    non_empty(records)?;
    let accs: Vec<f64> = tally(records)?.values().map(family_accuracy).collect();
    if accs.contains(&0.0) {
        return Ok(0.0);
    }
    Ok(accs.len() as f64 / accs.iter().map(|a| 1.0 / a).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    /// Mean per-record score (exact match, or 10-choose-3 for ten answers).
    pub simple: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vqa10c3: Option<f64>,
    pub mpt: f64,
    pub nmpt: f64,
    pub harmonic_mpt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub simple: f64,
    pub count: usize,
    pub per_answer: BTreeMap<String, AnswerScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Overall,
    pub per_family: BTreeMap<String, FamilyReport>,
    /// Expected families with no records; they are left out of MPT and
    /// N-MPT.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Every metric at once. `expected_families` only feeds the warnings.
pub fn report(records: &[PredictionRecord], expected_families: &[&str]) -> Result<MetricsReport> {
    non_empty(records)?;
    let t = tally(records)?;
    let all_multi = records.iter().all(|r| matches!(r.gold, Gold::Multi(_)));
    let scores: Vec<f64> = records.iter().map(PredictionRecord::score).collect::<Result<_>>()?;
    let per_family = t
        .iter()
        .map(|(f, answers)| {
            let per_answer = answers
                .iter()
                .map(|(a, &(s, n))| {
                    (
                        a.clone(),
                        AnswerScore {
                            accuracy: s / n as f64,
                            count: n,
                        },
                    )
                })
                .collect();
            let report = FamilyReport {
                simple: family_accuracy(answers),
                count: answers.values().map(|&(_, n)| n).sum(),
                per_answer,
            };
            (f.clone(), report)
        })
        .collect();
    let warnings = expected_families
        .iter()
        .filter(|f| !t.contains_key(**f))
        .map(|f| format!("family {f} has no records and is excluded"))
        .collect();
    Ok(MetricsReport {
        overall: Overall {
            simple: mean(scores.into_iter()),
            vqa10c3: if all_multi { Some(vqa_10choose3(records)?) } else { None },
            mpt: mean_per_type(records)?,
            nmpt: normalized_mean_per_type(records)?,
            harmonic_mpt: harmonic_mean_per_type(records)?,
        },
        per_family,
        warnings,
    })
}
