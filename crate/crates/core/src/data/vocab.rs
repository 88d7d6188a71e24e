//! Closed answer vocabulary built by frequency thresholding.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabRule {
    /// Keep answers seen at least this many times.
    MinCount(usize),
    /// Keep the `k` most frequent answers.
    TopK(usize),
}

/// Answers in index order: most frequent first, ties lexicographic.
///
/// Answers outside the vocabulary are dropped from training batches and
/// scored as wrong at evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerVocab {
    pub rule: VocabRule,
    pub answers: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn build<'a>(answers: impl IntoIterator<Item = &'a str>, rule: VocabRule) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for a in answers {
            *counts.entry(a).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Data("no answers to build a vocabulary from".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        // BTreeMap order is lexicographic, and the sort is stable
        ranked.sort_by_key(|&(_, c)| std::cmp::Reverse(c));
        let kept: Vec<String> = match rule {
            VocabRule::MinCount(min) => ranked
                .into_iter()
                .filter(|&(_, c)| c >= min)
                .map(|(a, _)| a.to_string())
                .collect(),
            VocabRule::TopK(k) => ranked.into_iter().take(k).map(|(a, _)| a.to_string()).collect(),
        };
        if kept.is_empty() {
            return Err(Error::Data(format!("answer vocabulary is empty under {rule:?}")));
        }
        Ok(Self::from_answers(rule, kept))
    }

    pub fn from_answers(rule: VocabRule, answers: Vec<String>) -> Self {
        let index = answers.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        AnswerVocab { rule, answers, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_answers(self.rule, self.answers)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, index: usize) -> &str {
        &self.answers[index]
    }
}
