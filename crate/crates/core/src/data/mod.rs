//! Synthetic benchmark: scenes, region features, template questions with
//! oracle answers, answer vocabularies and split regimes.

mod features;
mod io;
mod questions;
mod scene;
mod splits;
mod vocab;

pub use features::{featurize_scene, triple_index, Codebook, FeatureConfig, NUM_TRIPLES};
pub use io::{
    read_dataset, read_jsonl, read_manifest, write_dataset, write_jsonl, MANIFEST_FILE, QUESTIONS_FILE, SCENES_FILE,
};
pub use questions::{
    generate_questions, oracle_answer, parse_question, Attribute, Comparison, Family, Filter, Program, TokenVocab, PAD,
    UNK,
};
pub use scene::{generate_scene, Color, ObjectSpec, Scene, Shape, Size, MAX_IOU, MAX_OBJECTS};
pub use splits::{heldout_pairs, make_splits, total_variation, SplitRegime, SplitReport};
pub use vocab::{AnswerVocab, VocabRule};

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RegionSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaItem {
    pub id: u64,
    pub scene_id: u64,
    pub family: Family,
    pub question: String,
    pub tokens: Vec<usize>,
    pub answer: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub num_questions: usize,
    /// Questions drawn per family for every scene.
    pub questions_per_family: usize,
    pub max_objects: usize,
    pub families: Vec<Family>,
    pub features: FeatureConfig,
    pub split_regime: SplitRegime,
    /// Minimum per-family train/test total variation under changing priors.
    pub tv_target: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            num_questions: 10_000,
            questions_per_family: 2,
            max_objects: MAX_OBJECTS,
            families: Family::ALL.to_vec(),
            features: FeatureConfig::default(),
            split_regime: SplitRegime::Iid,
            tv_target: 0.3,
        }
    }
}

/// Scenes plus their labelled questions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub items: Vec<QaItem>,
}

/// Corpus statistics written next to the data files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DataConfig,
    pub num_scenes: usize,
    pub num_items: usize,
    pub regenerated_scenes: usize,
    /// family -> answer -> count over the whole corpus.
    pub answer_histogram: BTreeMap<String, BTreeMap<String, usize>>,
    pub split: SplitReport,
    pub tokens: Vec<String>,
}

fn question_seed(seed: u64) -> u64 {
    seed ^ 0x5155_4553_5449_4f4e
}

/// Seed of the per-scene feature noise streams.
pub fn feature_seed(seed: u64) -> u64 {
    seed ^ 0x4645_4154_5552_4553
}

/// Generates scenes until `num_questions` questions exist, then labels
/// splits. Scene `k` only depends on `(seed, k)`.
pub fn generate_corpus(cfg: &DataConfig) -> Result<(Dataset, Manifest)> {
    if cfg.num_questions == 0 || cfg.questions_per_family == 0 {
        return Err(Error::Config(
            "num_questions and questions_per_family must be positive".into(),
        ));
    }
    let tokens = TokenVocab::new();
    let mut scenes = Vec::new();
    let mut items = Vec::with_capacity(cfg.num_questions);
    let mut id = 0u64;
    while items.len() < cfg.num_questions {
        let mut scene = generate_scene(cfg.seed, id, cfg.max_objects)?;
        scene.feature_seed = feature_seed(cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(question_seed(cfg.seed));
        rng.set_stream(id);
        for p in generate_questions(&scene, &cfg.families, cfg.questions_per_family, &mut rng)? {
            if items.len() == cfg.num_questions {
                break;
            }
            let question = p.text();
            items.push(QaItem {
                id: items.len() as u64,
                scene_id: scene.id,
                family: p.family(),
                tokens: tokens.encode(&question),
                question,
                answer: p.answer(&scene)?,
                split: Split::Train,
            });
        }
        scenes.push(scene);
        id += 1;
        if id > 100 * cfg.num_questions as u64 {
            return Err(Error::Data("question generation is not making progress".into()));
        }
    }
    let (items, split) = make_splits(items, &scenes, cfg.split_regime, cfg.seed, cfg.tv_target)?;
    let mut answer_histogram: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for it in &items {
        *answer_histogram
            .entry(it.family.name().into())
            .or_default()
            .entry(it.answer.clone())
            .or_default() += 1;
    }
    let manifest = Manifest {
        config: cfg.clone(),
        num_scenes: scenes.len(),
        num_items: items.len(),
        regenerated_scenes: scenes.iter().filter(|s| s.regenerations > 0).count(),
        answer_histogram,
        split,
        tokens: tokens.words().iter().map(|w| w.to_string()).collect(),
    };
    Ok((Dataset { scenes, items }, manifest))
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&QaItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    /// Region features for every scene, keyed by scene id.
    pub fn featurize(&self, cfg: &FeatureConfig) -> Result<HashMap<u64, RegionSet>> {
        let codebook = Codebook::new(cfg.visual_dim, cfg.codebook_seed);
        self.scenes
            .iter()
            .map(|s| Ok((s.id, featurize_scene(s, &codebook, cfg, s.feature_seed)?)))
            .collect()
    }

    /// Checks every stored answer against the oracle; returns the ids of
    /// the items that disagree.
    pub fn validate_answers(&self) -> Result<Vec<u64>> {
        let scenes: HashMap<u64, &Scene> = self.scenes.iter().map(|s| (s.id, s)).collect();
        let mut bad = Vec::new();
        for it in &self.items {
            let scene = scenes
                .get(&it.scene_id)
                .ok_or_else(|| Error::Data(format!("item {} refers to unknown scene {}", it.id, it.scene_id)))?;
            match oracle_answer(&it.question, scene) {
                Ok(a) if a == it.answer => {}
                _ => bad.push(it.id),
            }
        }
        Ok(bad)
    }
}
