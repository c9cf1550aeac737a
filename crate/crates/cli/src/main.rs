//! `mmst`: generate corpora, extract features, train, evaluate, search and predict.
//!
//! Results go to stdout as one JSON line per command; progress goes to stderr.
//! Failures print `{"command", "module", "kind", "message"}` and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use mmst_core::models::ModelKind;
use mmst_core::pipeline::{self, RunConfig};
use mmst_core::synth::PlantSpec;

#[derive(Debug, Parser)]
#[command(name = "mmst", version, about = "Multimodal symptom-severity estimation pipeline")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Work directory holding features, checkpoints and reports.
    #[arg(long, global = true, env = "MMST_WORKDIR")]
    workdir: Option<PathBuf>,

    /// Print the full default configuration and exit.
    #[arg(long)]
    emit_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted signals.
    Synth {
        /// Number of sessions.
        #[arg(long)]
        n: Option<usize>,
        /// Number of subjects, assigned round-robin.
        #[arg(long)]
        subjects: Option<usize>,
        /// Output directory (default: the configured corpus location).
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON list of plants replacing the configured ones.
        #[arg(long, conflicts_with = "no_plants")]
        plants: Option<PathBuf>,
        /// Generate a corpus without any planted signal.
        #[arg(long)]
        no_plants: bool,
    },
    /// Extract per-session feature matrices from a raw corpus.
    Featurize {
        /// Corpus manifest (default: the configured corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Retrain the VQ-VAE on the extracted FVTC features.
    TrainCart,
    /// Train one model per held-out fold.
    Train {
        #[arg(long, default_value = "multimodal")]
        model: ModelKind,
    },
    /// Score the stored fold models on their held-out folds.
    Eval {
        #[arg(long, default_value = "multimodal")]
        model: ModelKind,
    },
    /// Grid search over learning rate, restart period, kernel and pooling.
    Gridsearch {
        #[arg(long, default_value = "multimodal")]
        model: ModelKind,
        /// Fold excluded from the search.
        #[arg(long)]
        test_fold: Option<usize>,
    },
    /// Predict severity classes with the ensemble of fold models.
    Predict {
        #[arg(long, default_value = "multimodal")]
        model: ModelKind,
        /// Features manifest to predict (default: the work directory's).
        #[arg(long)]
        features: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Featurize { .. } => "featurize",
            Command::TrainCart => "train-cart",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Gridsearch { .. } => "gridsearch",
            Command::Predict { .. } => "predict",
        }
    }

    /// Library module doing the command's main work, reported with failures.
    fn module(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Featurize { .. } => "session",
            Command::TrainCart => "cart",
            Command::Train { .. } | Command::Predict { .. } => "models",
            Command::Eval { .. } | Command::Gridsearch { .. } => "eval",
        }
    }
}

struct Failure {
    module: &'static str,
    kind: String,
    message: String,
}

impl Failure {
    fn cli(kind: &str, message: impl Into<String>) -> Self {
        Failure {
            module: "cli",
            kind: kind.into(),
            message: message.into(),
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::cli("config", e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.workdir {
        cfg.paths.workdir = dir.clone();
    }
    Ok(cfg)
}

fn read_plants(path: &PathBuf) -> Result<Vec<PlantSpec>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::cli("io", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::cli("config", format!("{}: {e}", path.display())))
}

fn run(command: &Command, mut cfg: RunConfig) -> Result<Value, Failure> {
    // command-specific flags override the file before validation
    match command {
        Command::Synth {
            n,
            subjects,
            plants,
            no_plants,
            ..
        } => {
            if let Some(n) = n {
                cfg.synth.n_sessions = *n;
            }
            if let Some(s) = subjects {
                cfg.synth.n_subjects = *s;
            }
            if let Some(p) = plants {
                cfg.synth.plants = read_plants(p)?;
            }
            if *no_plants {
                cfg.synth.plants.clear();
            }
        }
        Command::Featurize { corpus: Some(c) } => {
            cfg.paths.corpus = std::path::absolute(c).map_err(|e| Failure::cli("io", e.to_string()))?;
        }
        Command::Gridsearch {
            test_fold: Some(f), ..
        } => cfg.eval.grid_test_fold = *f,
        _ => {}
    }
    let cfg = cfg.resolved().map_err(|e| Failure::cli(e.kind(), e.to_string()))?;
    let module = command.module();
    let fail = |e: mmst_core::Error| Failure {
        module,
        kind: e.kind().into(),
        message: e.to_string(),
    };
    let out = match command {
        Command::Synth { out, .. } => {
            let manifest = pipeline::synthesize(&cfg, out.as_deref()).map_err(fail)?;
            json!({ "sessions": cfg.synth.n_sessions, "manifest": manifest })
        }
        Command::Featurize { .. } => {
            let s = pipeline::featurize(&cfg).map_err(fail)?;
            json!({ "sessions": s.sessions, "cart_trained": s.cart_trained, "manifest": s.manifest })
        }
        Command::TrainCart => {
            let dir = pipeline::retrain_cart(&cfg).map_err(fail)?;
            json!({ "checkpoint": dir, "manifest": cfg.workspace().features_manifest() })
        }
        Command::Train { model } => {
            let s = pipeline::train(&cfg, *model).map_err(fail)?;
            json!({
                "model": s.model,
                "checkpoints": s.checkpoints,
                "overall_acc": s.report.mean("overall_acc").map_err(fail)?,
            })
        }
        Command::Eval { model } => {
            let (report, path) = pipeline::evaluate(&cfg, *model).map_err(fail)?;
            json!({
                "model": report.model,
                "report": path,
                "overall_acc": report.aggregate["overall_acc"],
                "weighted_f1": report.aggregate["weighted_f1"],
            })
        }
        Command::Gridsearch { model, .. } => {
            let (result, path) = pipeline::gridsearch(&cfg, *model).map_err(fail)?;
            json!({
                "model": result.model,
                "evaluated": result.leaderboard.len(),
                "best": result.best,
                "leaderboard": path,
            })
        }
        Command::Predict { model, features } => {
            let (preds, path) = pipeline::predict(&cfg, *model, features.as_deref()).map_err(fail)?;
            json!({ "model": preds.model, "sessions": preds.sessions.len(), "predictions": path })
        }
    };
    Ok(out)
}

fn print_failure(command: &str, f: &Failure) {
    let v = json!({
        "command": command,
        "module": f.module,
        "kind": f.kind,
        "message": f.message,
    });
    println!("{v}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            print_failure("", &Failure::cli("usage", e.to_string().trim_end()));
            return ExitCode::from(2);
        }
    };

    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            print_failure("", &Failure::cli("usage", e.to_string()));
            return ExitCode::from(2);
        }
    }

    if cli.emit_default_config {
        return match load_config(&cli).and_then(|c| c.to_json().map_err(|e| Failure::cli(e.kind(), e.to_string()))) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(f) => {
                print_failure("", &f);
                ExitCode::FAILURE
            }
        };
    }

    let Some(command) = &cli.command else {
        print_failure("", &Failure::cli("usage", "no command given; see --help"));
        return ExitCode::from(2);
    };
    let result = load_config(&cli).and_then(|cfg| run(command, cfg));
    match result {
        Ok(mut v) => {
            v["command"] = json!(command.name());
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            print_failure(command.name(), &f);
            ExitCode::FAILURE
        }
    }
}
