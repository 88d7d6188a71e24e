//! The commands behind the `ramen` binary, usable as a library: corpus
//! generation, training, evaluation, ablation tables and gradient checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_corpus, read_dataset, read_manifest, write_dataset, DataConfig, Dataset, FeatureConfig, Manifest,
    SplitRegime, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::metrics::{report, MetricsReport, PredictionRecord};
use crate::model::gradcheck::{check_model, toy_instance};
use crate::model::{Ablation, RamenConfig};
use crate::tensor::gradcheck::{op_cases, GradCheckReport};
use crate::tensor::Real;
use crate::train::{
    checkpoint_precision, load_checkpoint, predict, train, Example, Precision, Prepared, Schedule, TrainState,
    TrainerConfig, LAST_CHECKPOINT,
};

pub const CONFIG_ECHO: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRAD_CHECK_FILE: &str = "grad_check.json";

/// Everything a command reads from its JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Corpus written by `gen-data`; without it the corpus is generated
    /// in memory from `data`.
    pub data_dir: Option<PathBuf>,
    /// Model widths. `vocab_size` and `num_answers` of 0 are filled in from
    /// the data; other values must match it.
    pub model: RamenConfig,
    pub trainer: TrainerConfig,
    pub schedule: Schedule,
    /// Seeds per variant in `ablate`.
    pub ablation_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            data_dir: None,
            model: RamenConfig::desk(0, 0),
            trainer: TrainerConfig::default(),
            schedule: Schedule::default(),
            ablation_seeds: 3,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// Sets both the corpus seed and the training seed.
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
    pub split_regime: Option<SplitRegime>,
    pub data_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Strict JSON: unknown keys are errors. `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.data.seed = seed;
            self.trainer.seed = seed;
        }
        if let Some(a) = o.ablation {
            self.model.ablation = a;
        }
        if let Some(r) = o.split_regime {
            self.data.split_regime = r;
        }
        if let Some(d) = &o.data_dir {
            self.data_dir = Some(d.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.schedule.validate()?;
        if self.ablation_seeds == 0 {
            return Err(Error::Config("ablation_seeds must be at least 1".into()));
        }
        Ok(())
    }

    /// Writes the effective configuration as `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_text(&dir.join(CONFIG_ECHO), &(serde_json::to_string_pretty(self)? + "\n"))
    }

    /// Model configuration for `prepared`, checking any fixed sizes.
    pub fn model_for(&self, prepared: &Prepared) -> Result<RamenConfig> {
        let mut m = self.model.clone();
        for (name, slot, actual) in [
            ("vocab_size", &mut m.vocab_size, prepared.num_tokens),
            ("num_answers", &mut m.num_answers, prepared.vocab.len()),
        ] {
            if *slot == 0 {
                *slot = actual;
            } else if *slot != actual {
                return Err(Error::Config(format!(
                    "model.{name} is {slot} but the data needs {actual}"
                )));
            }
        }
        m.validate()?;
        Ok(m)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// The corpus a run trains on, plus the feature settings it was made with.
pub struct Corpus {
    pub data: Dataset,
    pub features: FeatureConfig,
    pub families: Vec<String>,
}

impl Corpus {
    /// Reads `cfg.data_dir` when set (its manifest, if present, supplies the
    /// feature settings), else generates from `cfg.data`.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        match &cfg.data_dir {
            Some(dir) => {
                let data = read_dataset(dir)?;
                let data_cfg = if dir.join(MANIFEST_FILE).exists() {
                    read_manifest(dir)?.config
                } else {
                    cfg.data.clone()
                };
                Ok(Corpus::new(data, &data_cfg))
            }
            None => {
                let (data, _) = generate_corpus(&cfg.data)?;
                Ok(Corpus::new(data, &cfg.data))
            }
        }
    }

    fn new(data: Dataset, cfg: &DataConfig) -> Self {
        Corpus {
            data,
            features: cfg.features.clone(),
            families: cfg.families.iter().map(|f| f.name().to_string()).collect(),
        }
    }

    pub fn prepare(&self, cfg: &RunConfig) -> Result<Prepared> {
        Prepared::new(&self.data, &self.features, cfg.trainer.vocab_rule)
    }
}

/// `gen-data`: writes the corpus, its manifest and the effective config.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let (data, manifest) = generate_corpus(&cfg.data)?;
    create_dir(out)?;
    write_dataset(out, &data, Some(&manifest))?;
    cfg.echo(out)?;
    Ok(manifest)
}

/// Result of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub ablation: Ablation,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub val: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricsReport>,
}

impl TrainReport {
    pub fn test_accuracy(&self) -> Option<f64> {
        self.test.as_ref().map(|t| t.overall.simple)
    }
}

fn score_split<T: Real>(
    model: &mut crate::model::RamenModel<T>,
    prepared: &Prepared,
    examples: &[Example],
    families: &[String],
) -> Result<Option<MetricsReport>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let records = predict(model, prepared, examples)?;
    let expected: Vec<&str> = families.iter().map(String::as_str).collect();
    report(&records, &expected).map(Some)
}

/// Trains on prepared data and scores the best model on val and test. With
/// `out`, checkpoints, the learning curve and `report.json` land there;
/// with `resume`, training continues from `out/last.ckpt`.
pub fn train_prepared(
    cfg: &RunConfig,
    prepared: &Prepared,
    families: &[String],
    out: Option<&Path>,
    resume: bool,
) -> Result<TrainReport> {
    match cfg.trainer.precision {
        Precision::F32 => train_typed::<f32>(cfg, prepared, families, out, resume),
        Precision::F64 => train_typed::<f64>(cfg, prepared, families, out, resume),
    }
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    prepared: &Prepared,
    families: &[String],
    out: Option<&Path>,
    resume: bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    let model_cfg = cfg.model_for(prepared)?;
    let mut state = match (resume, out) {
        (true, Some(dir)) => {
            let ckpt = load_checkpoint::<T>(&dir.join(LAST_CHECKPOINT), Some(&model_cfg))?;
            if ckpt.vocab.answers != prepared.vocab.answers {
                return Err(Error::Checkpoint("answer vocabulary differs from the data".into()));
            }
            ckpt.training
                .ok_or_else(|| Error::Checkpoint("last checkpoint has no training state".into()))?
        }
        (true, None) => return Err(Error::Config("resuming needs an output directory".into())),
        (false, _) => TrainState::<T>::new(model_cfg, &cfg.trainer)?,
    };
    if let Some(dir) = out {
        cfg.echo(dir)?;
    }
    train(&mut state, prepared, &cfg.trainer, &cfg.schedule, out)?;
    let mut best = state.best_model()?;
    let val = score_split(&mut best, prepared, &prepared.val, families)?
        .ok_or_else(|| Error::Data("empty validation split".into()))?;
    let test = score_split(&mut best, prepared, &prepared.test, families)?;
    let rep = TrainReport {
        ablation: cfg.model.ablation,
        seed: cfg.trainer.seed,
        epochs_run: state.epoch,
        best_epoch: state.best_epoch,
        best_val: state.best_val,
        val,
        test,
    };
    if let Some(dir) = out {
        write_text(&dir.join(REPORT_FILE), &(serde_json::to_string_pretty(&rep)? + "\n"))?;
    }
    Ok(rep)
}

/// `train`: loads or generates the corpus and trains one model.
pub fn train_command(cfg: &RunConfig, out: &Path, resume: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let corpus = Corpus::load(cfg)?;
    let prepared = corpus.prepare(cfg)?;
    train_prepared(cfg, &prepared, &corpus.families, Some(out), resume)
}

/// Split scored by `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Val,
    Test,
}

impl EvalSplit {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "val" => Some(EvalSplit::Val),
            "test" => Some(EvalSplit::Test),
            _ => None,
        }
    }
}

/// `eval`: scores a saved model on one split of the corpus, writing the
/// metrics report and per-question predictions.
pub fn eval_command(cfg: &RunConfig, checkpoint: &Path, split: EvalSplit, out: &Path) -> Result<MetricsReport> {
    match checkpoint_precision(checkpoint)? {
        Precision::F32 => eval_typed::<f32>(cfg, checkpoint, split, out),
        Precision::F64 => eval_typed::<f64>(cfg, checkpoint, split, out),
    }
}

fn eval_typed<T: Real>(cfg: &RunConfig, checkpoint: &Path, split: EvalSplit, out: &Path) -> Result<MetricsReport> {
    let ckpt = load_checkpoint::<T>(checkpoint, None)?;
    let corpus = Corpus::load(cfg)?;
    let prepared = Prepared::with_vocab(&corpus.data, &corpus.features, ckpt.vocab)?;
    let mut model = ckpt.model;
    if model.config.vocab_size != prepared.num_tokens {
        return Err(Error::Config(format!(
            "checkpoint expects {} question tokens, the data has {}",
            model.config.vocab_size, prepared.num_tokens
        )));
    }
    let examples = match split {
        EvalSplit::Val => &prepared.val,
        EvalSplit::Test => &prepared.test,
    };
    if examples.is_empty() {
        return Err(Error::Data("the requested split is empty".into()));
    }
    let records = predict(&mut model, &prepared, examples)?;
    let expected: Vec<&str> = corpus.families.iter().map(String::as_str).collect();
    let rep = report(&records, &expected)?;
    cfg.echo(out)?;
    write_text(&out.join(REPORT_FILE), &(serde_json::to_string_pretty(&rep)? + "\n"))?;
    crate::data::write_jsonl::<PredictionRecord>(&out.join(PREDICTIONS_FILE), &records)?;
    Ok(rep)
}

/// One trained variant in an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub seed: u64,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Variant-major, seeds ascending.
    pub rows: Vec<AblationRow>,
    /// Per variant: (median val, median test).
    pub medians: BTreeMap<String, (f64, Option<f64>)>,
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

impl AblationTable {
    pub fn median_of(&self, variant: Ablation) -> Option<(f64, Option<f64>)> {
        self.medians.get(variant.name()).copied()
    }

    /// `4 * S` run rows, then one median row per variant.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("variant,seed,val_acc,test_acc\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.6},{}",
                r.variant.name(),
                r.seed,
                r.val_acc,
                fmt(r.test_acc)
            )
            .unwrap();
        }
        for a in Ablation::ALL {
            if let Some((val, test)) = self.median_of(a) {
                writeln!(s, "{},median,{val:.6},{}", a.name(), fmt(test)).unwrap();
            }
        }
        s
    }
}

/// Worker threads: `RAMEN_THREADS` when set and positive, else the
/// machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("RAMEN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains every variant for `cfg.ablation_seeds` seeds starting at
/// `cfg.trainer.seed`, on one shared prepared corpus. Runs go to
/// `out/<variant>-<seed>/` when `out` is given. Each run is deterministic
/// on its own, so the thread count does not change the table.
pub fn ablate_prepared(
    cfg: &RunConfig,
    prepared: &Prepared,
    families: &[String],
    out: Option<&Path>,
    threads: usize,
) -> Result<AblationTable> {
    cfg.validate()?;
    let jobs: Vec<(Ablation, u64)> = Ablation::ALL
        .into_iter()
        .flat_map(|a| (0..cfg.ablation_seeds as u64).map(move |k| (a, cfg.trainer.seed + k)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(variant, seed)) = jobs.get(i) else { break };
        let mut run_cfg = cfg.clone();
        run_cfg.model.ablation = variant;
        run_cfg.trainer.seed = seed;
        let dir = out.map(|d| d.join(format!("{}-{seed}", variant.name())));
        let row = train_prepared(&run_cfg, prepared, families, dir.as_deref(), false).map(|rep| AblationRow {
            variant,
            seed,
            val_acc: rep.val.overall.simple,
            test_acc: rep.test_accuracy(),
        });
        results.lock().unwrap()[i] = Some(row);
    };
    let threads = threads.clamp(1, jobs.len());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(worker);
        }
    });
    let rows = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let mut medians = BTreeMap::new();
    for a in Ablation::ALL {
        let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == a).collect();
        let val = median(&mine.iter().map(|r| r.val_acc).collect::<Vec<_>>()).unwrap_or(f64::NAN);
        let tests: Option<Vec<f64>> = mine.iter().map(|r| r.test_acc).collect();
        medians.insert(a.name().to_string(), (val, tests.and_then(|t| median(&t))));
    }
    Ok(AblationTable { rows, medians })
}

/// `ablate`: the variant-by-seed table as `ablation.csv` in `out`.
pub fn ablate_command(cfg: &RunConfig, out: &Path, threads: usize) -> Result<AblationTable> {
    cfg.validate()?;
    let corpus = Corpus::load(cfg)?;
    let prepared = corpus.prepare(cfg)?;
    cfg.echo(out)?;
    let table = ablate_prepared(cfg, &prepared, &corpus.families, Some(out), threads)?;
    write_text(&out.join(ABLATION_FILE), &table.to_csv())?;
    Ok(table)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub reports: Vec<GradCheckReport>,
    pub passed: bool,
}

impl GradCheckSummary {
    pub fn failures(&self) -> impl Iterator<Item = &GradCheckReport> {
        self.reports.iter().filter(|r| !r.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.reports {
            let verdict = if r.passed { "ok" } else { "FAIL" };
            writeln!(
                s,
                "{verdict:>4}  {:<48} max rel err {:.3e} (tol {:.0e}, {} values)",
                r.name, r.max_rel_error, r.tolerance, r.checked
            )
            .unwrap();
        }
        s
    }
}

/// `grad-check`: finite differences for every tape op and for every
/// parameter of all four variants on the toy instance, in f64.
pub fn grad_check(seed: u64) -> Result<GradCheckSummary> {
    let mut reports: Vec<GradCheckReport> = op_cases(seed).iter().map(|c| c.run()).collect();
    for a in Ablation::ALL {
        let (mut model, batch, targets) = toy_instance(a, seed);
        reports.extend(check_model(&mut model, &batch, &targets)?);
    }
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradCheckSummary { reports, passed })
}

/// Keeps glibc from returning large activation buffers to the kernel after
/// every step; the remapping page faults otherwise cost about a fifth of
/// training time. No effect elsewhere.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
