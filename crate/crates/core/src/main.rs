use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ramen::data::SplitRegime;
use ramen::model::Ablation;
use ramen::run::{self, EvalSplit, Overrides, RunConfig};
use ramen::Error;

/// Exit statuses besides 0 (success) and clap's 2 for usage errors, which
/// config errors share.
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;
const EXIT_IO: u8 = 6;

#[derive(Parser)]
#[command(
    name = "ramen",
    version,
    about = "Recurrent aggregation VQA on a synthetic compositional benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for both corpus generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Architecture variant: full, no_early_fusion, no_late_fusion, mean_pool.
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// Split regime: iid, compositional, changing_priors.
    #[arg(long, value_parser = parse_regime)]
    split_regime: Option<SplitRegime>,
}

#[derive(Args)]
struct DataArg {
    /// Corpus directory from gen-data; without it the corpus is generated
    /// in memory from the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model; writes checkpoints, curve.csv and report.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Continue from <out>/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one split; writes report.json and predictions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// val or test.
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: EvalSplit,
    },
    /// Train all four variants over several seeds; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Seeds per variant (overrides ablation_seeds).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Finite-difference check of every op and of the model's gradients.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for grad_check.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| format!("unknown ablation {s:?}"))
}

fn parse_regime(s: &str) -> Result<SplitRegime, String> {
    SplitRegime::parse(s).ok_or_else(|| format!("unknown split regime {s:?}"))
}

fn parse_split(s: &str) -> Result<EvalSplit, String> {
    EvalSplit::parse(s).ok_or_else(|| format!("split must be val or test, not {s:?}"))
}

fn config(common: &Common, data: Option<&DataArg>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: common.seed,
        ablation: common.ablation,
        split_regime: common.split_regime,
        data_dir: data.and_then(|d| d.data.clone()),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Parse { .. } | Error::Json(_) => EXIT_DATA,
        Error::Numeric(_) | Error::Tensor(_) => EXIT_NUMERIC,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Io { .. } => EXIT_IO,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = config(&common, None)?;
            let m = run::gen_data(&cfg, &common.out)?;
            println!(
                "{} scenes, {} questions (train {}, val {}, test {}) -> {}",
                m.num_scenes,
                m.num_items,
                m.split.train,
                m.split.val,
                m.split.test,
                common.out.display()
            );
        }
        Command::Train { common, data, resume } => {
            let cfg = config(&common, Some(&data))?;
            let rep = run::train_command(&cfg, &common.out, resume)?;
            print!(
                "{} epochs, best val {:.4} at epoch {}",
                rep.epochs_run, rep.best_val, rep.best_epoch
            );
            if let Some(t) = rep.test_accuracy() {
                print!(", test {t:.4}");
            }
            println!(" -> {}", common.out.display());
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
        } => {
            let cfg = config(&common, Some(&data))?;
            let rep = run::eval_command(&cfg, &checkpoint, split, &common.out)?;
            let o = &rep.overall;
            println!("simple {:.4}  MPT {:.4}  N-MPT {:.4}", o.simple, o.mpt, o.nmpt);
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Ablate { common, data, seeds } => {
            if common.ablation.is_some() {
                return Err(Error::Config("ablate trains every variant; drop --ablation".into()));
            }
            let mut cfg = config(&common, Some(&data))?;
            if let Some(s) = seeds {
                cfg.ablation_seeds = s;
                cfg.validate()?;
            }
            let table = run::ablate_command(&cfg, &common.out, run::worker_threads())?;
            print!("{}", table.to_csv());
        }
        Command::GradCheck { seed, out } => {
            let summary = run::grad_check(seed)?;
            print!("{}", summary.to_text());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
                let path = dir.join(run::GRAD_CHECK_FILE);
                std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
                    .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            }
            if !summary.passed {
                let names: Vec<&str> = summary.failures().map(|r| r.name.as_str()).collect();
                eprintln!("gradient check failed: {}", names.join(", "));
                return Ok(ExitCode::from(EXIT_NUMERIC));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    run::tune_allocator();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
