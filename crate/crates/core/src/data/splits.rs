//! Train/val/test assignment under the three split regimes.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::questions::{parse_question, Family};
use super::scene::{Color, Scene, Shape};
use super::{QaItem, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRegime {
    /// Uniformly random 70/15/15.
    #[default]
    Iid,
    /// Some (shape, color) combinations are only ever referenced by test
    /// questions.
    Compositional,
    /// Per family, train and test answer distributions differ.
    ChangingPriors,
}

impl SplitRegime {
    pub const ALL: [SplitRegime; 3] = [
        SplitRegime::Iid,
        SplitRegime::Compositional,
        SplitRegime::ChangingPriors,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitRegime::Iid => "iid",
            SplitRegime::Compositional => "compositional",
            SplitRegime::ChangingPriors => "changing_priors",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// What a split produced, for the manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitReport {
    pub regime: SplitRegime,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Items referring to both held-out and regular combinations.
    pub dropped: usize,
    pub heldout_pairs: Vec<(Shape, Color)>,
    /// Per family: total-variation distance between train and test answer
    /// distributions.
    pub tv_train_test: BTreeMap<String, f64>,
    /// Per family: the same distance between train and val.
    pub tv_train_val: BTreeMap<String, f64>,
}

const TRAIN_FRACTION: f64 = 0.70;
const VAL_FRACTION: f64 = 0.15;
/// Share of the non-test pool that becomes validation data.
const VAL_OF_POOL: f64 = VAL_FRACTION / (TRAIN_FRACTION + VAL_FRACTION);
/// Chance that an item whose answer is favoured in training stays out of
/// the test split under changing priors.
const FAVOURED_KEEP: f64 = 0.95;

/// Total-variation distance between two empirical distributions.
pub fn total_variation<K: Ord>(a: &BTreeMap<K, usize>, b: &BTreeMap<K, usize>) -> f64 {
    let na: usize = a.values().sum();
    let nb: usize = b.values().sum();
    if na == 0 || nb == 0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    let keys: BTreeSet<&K> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| {
            let p = *a.get(k).unwrap_or(&0) as f64 / na as f64;
            let q = *b.get(k).unwrap_or(&0) as f64 / nb as f64;
            (p - q).abs()
        })
        .sum::<f64>()
}

fn histogram<'a>(items: impl Iterator<Item = &'a QaItem>) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for it in items {
        *h.entry(it.answer.clone()).or_default() += 1;
    }
    h
}

/// (shape, color) pairs withheld from training: two colors per shape,
/// chosen by `seed`.
pub fn heldout_pairs(seed: u64) -> Vec<(Shape, Color)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for &shape in Shape::ALL {
        let mut colors = Color::ALL.to_vec();
        colors.shuffle(&mut rng);
        let mut two = colors[..2].to_vec();
        two.sort();
        pairs.extend(two.into_iter().map(|c| (shape, c)));
    }
    pairs
}

/// Labels every item with a split. Under the compositional regime items
/// referring to both held-out and regular combinations are removed.
pub fn make_splits(
    mut items: Vec<QaItem>,
    scenes: &[Scene],
    regime: SplitRegime,
    seed: u64,
    tv_target: f64,
) -> Result<(Vec<QaItem>, SplitReport)> {
    let families: BTreeSet<Family> = items.iter().map(|i| i.family).collect();
    if families.len() < 2 {
        return Err(Error::Data(format!(
            "splitting needs at least two question families, found {}",
            families.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SplitReport {
        regime,
        ..SplitReport::default()
    };
    match regime {
        SplitRegime::Iid => {
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.shuffle(&mut rng);
            let n = items.len();
            let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
            let n_val = (n as f64 * VAL_FRACTION).round() as usize;
            for (rank, &i) in order.iter().enumerate() {
                items[i].split = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        SplitRegime::Compositional => {
            let heldout: BTreeSet<(Shape, Color)> = heldout_pairs(seed).into_iter().collect();
            let by_id: HashMap<u64, &Scene> = scenes.iter().map(|s| (s.id, s)).collect();
            let mut kept = Vec::with_capacity(items.len());
            for mut it in items {
                let scene = by_id
                    .get(&it.scene_id)
                    .ok_or_else(|| Error::Data(format!("item {} refers to unknown scene {}", it.id, it.scene_id)))?;
                let pairs = parse_question(&it.question)?.referenced_pairs(scene);
                let held = pairs.iter().filter(|p| heldout.contains(p)).count();
                if held == 0 {
                    it.split = if rng.gen_bool(VAL_OF_POOL) {
                        Split::Val
                    } else {
                        Split::Train
                    };
                } else if held == pairs.len() {
                    it.split = Split::Test;
                } else {
                    report.dropped += 1;
                    continue;
                }
                kept.push(it);
            }
            items = kept;
            report.heldout_pairs = heldout.into_iter().collect();
        }
        SplitRegime::ChangingPriors => {
            for family in &families {
                assign_shifted(&mut items, *family, seed, tv_target)?;
            }
        }
    }
    for it in &items {
        match it.split {
            Split::Train => report.train += 1,
            Split::Val => report.val += 1,
            Split::Test => report.test += 1,
        }
    }
    for family in &families {
        let of = |s: Split| histogram(items.iter().filter(|i| i.family == *family && i.split == s));
        let train = of(Split::Train);
        report
            .tv_train_test
            .insert(family.name().into(), total_variation(&train, &of(Split::Test)));
        report
            .tv_train_val
            .insert(family.name().into(), total_variation(&train, &of(Split::Val)));
    }
    if report.train == 0 || report.test == 0 {
        return Err(Error::Data(format!(
            "{} split left {} train and {} test items",
            regime.name(),
            report.train,
            report.test
        )));
    }
    Ok((items, report))
}

/// Changing priors for one family. Its answers are ranked by frequency and
/// dealt alternately into a train-favoured and a test-favoured group; items
/// with favoured answers stay in train/val with high probability, the rest
/// with a probability that is lowered until the train/test distance reaches
/// `tv_target`. Validation takes the same share of every answer in the pool.
fn assign_shifted(items: &mut [QaItem], family: Family, seed: u64, tv_target: f64) -> Result<()> {
    let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].family == family).collect();
    let hist = histogram(idx.iter().map(|&i| &items[i]));
    let mut ranked: Vec<(&String, &usize)> = hist.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1));
    let favoured: BTreeSet<&str> = ranked.iter().step_by(2).map(|(a, _)| a.as_str()).collect();
    let mut achieved = 0.0;
    for step in 0..=7u64 {
        let other_keep = 0.7 - 0.1 * step as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (family as u64) << 32 ^ step);
        let mut pool: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in &idx {
            let answer = items[i].answer.as_str();
            let keep = if favoured.contains(answer) {
                FAVOURED_KEEP
            } else {
                other_keep.max(0.0)
            };
            if rng.gen_bool(keep) {
                pool.entry(answer).or_default().push(i);
            } else {
                items[i].split = Split::Test;
            }
        }
        // stratified by answer so validation mirrors the train distribution
        for mut group in pool.into_values() {
            group.shuffle(&mut rng);
            let n_val = (group.len() as f64 * VAL_OF_POOL).round() as usize;
            for (rank, i) in group.into_iter().enumerate() {
                items[i].split = if rank < n_val { Split::Val } else { Split::Train };
            }
        }
        let of = |s: Split| histogram(idx.iter().map(|&i| &items[i]).filter(|i| i.split == s));
        achieved = total_variation(&of(Split::Train), &of(Split::Test));
        if achieved >= tv_target {
            return Ok(());
        }
    }
    Err(Error::Data(format!(
        "changing priors unachievable for family {}: train/test total variation {achieved:.4} < {tv_target}",
        family.name()
    )))
}
