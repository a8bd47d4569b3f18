//! Command-line driver. [`run`] maps every failure to an exit code:
//! 0 success, 2 usage or configuration, 3 data or format, 4 numerical.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use jigmil::data::{generate_synthetic_dataset, load_dataset, SynthSpec, SynthTask};
use jigmil::gradsuite::run_gradcheck_suite;
use jigmil::graph::{build_slide_graph, SigmaRule};
use jigmil::trainer::{
    attention_csv, cross_validate, evaluate, export_attention, history_csv, metrics_csv, sig9,
};
use jigmil::{Error, ModelParams, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "jigmil",
    version,
    about = "Spatially-aware multiple-instance learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted signal.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "spatial")]
        task: SynthTask,
        #[arg(long, default_value_t = 120)]
        slides: usize,
        #[arg(long, default_value_t = 150)]
        patches: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Print per-slide graph statistics as CSV.
    Graph {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value = "main")]
        sigma_rule: SigmaRule,
    },
    /// Cross-validate and write logs, metrics and one model per fold.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the AUC of a saved model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Export per-patch attention of one slide as CSV.
    Attn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        slide: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
enum Failure {
    Lib(Error),
    GradCheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::GradCheck(_) => EXIT_NUMERICAL,
            Failure::Lib(e) if e.is_numerical() => EXIT_NUMERICAL,
            Failure::Lib(Error::Config(_) | Error::Unsupported(_)) => EXIT_USAGE,
            Failure::Lib(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::GradCheck(msg) => write!(f, "gradient check failed: {msg}"),
        }
    }
}

/// Parses `argv` (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = out.flush();
            eprintln!("error: {f}");
            f.code()
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Synth {
            out: dir,
            task,
            slides,
            patches,
            dim,
            seed,
        } => {
            let spec = SynthSpec {
                task,
                n_slides: slides,
                patches_per_slide: patches,
                d1: dim,
                seed,
                ..SynthSpec::default()
            };
            let data = generate_synthetic_dataset(&spec)?;
            let path = jigmil::data::write_dataset(&dir, &data.manifest, &data.bags)?;
            emit(out, &format!("{}\n", path.display()))
        }
        Command::Graph {
            manifest,
            k,
            sigma_rule,
        } => {
            let (_, bags) = load_dataset(&manifest)?;
            let grid = TrainConfig::default().grid_g;
            let mut text =
                String::from("slide_id,n,edges,min_degree,max_degree,sigma,degenerate_sigma\n");
            for bag in &bags {
                let s = build_slide_graph(bag, k, grid, sigma_rule)?.stats();
                text.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    bag.slide_id,
                    s.n,
                    s.edges,
                    s.min_degree,
                    s.max_degree,
                    sig9(s.sigma),
                    s.degenerate_sigma
                ));
            }
            emit(out, &text)
        }
        Command::Train {
            manifest,
            config,
            folds,
            out: dir,
        } => {
            let config = match config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            config.validate()?;
            let (manifest, bags) = load_dataset(&manifest)?;
            let outcome = cross_validate(&manifest, &bags, &config, folds)?;
            std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
            write_file(&dir.join("train_log.csv"), &history_csv(&outcome.history))?;
            write_file(&dir.join("metrics.csv"), &metrics_csv(&outcome.history))?;
            for (f, model) in outcome.models.iter().enumerate() {
                model.save(dir.join(format!("model_fold{f}.bin")))?;
            }
            emit(
                out,
                &format!("mean_test_auc,{}\n", sig9(outcome.mean_test_auc())),
            )
        }
        Command::Eval { model, manifest } => {
            let model = ModelParams::load(model)?;
            let (_, bags) = load_dataset(&manifest)?;
            let (auc, _) = evaluate(&model, &bags)?;
            emit(out, &format!("{}\n", sig9(auc)))
        }
        Command::Attn {
            model,
            manifest,
            slide,
            out: path,
        } => {
            let model = ModelParams::load(model)?;
            let (_, bags) = load_dataset(&manifest)?;
            let bag = bags
                .iter()
                .find(|b| b.slide_id == slide)
                .ok_or_else(|| Error::Data(format!("slide `{slide}` is not in the manifest")))?;
            let rows = export_attention(&model, bag)?;
            write_file(&path, &attention_csv(&rows))
        }
        Command::Gradcheck { trials, seed } => {
            let report = run_gradcheck_suite(trials, seed)?;
            let mut text = String::from("check,trials,max_rel_error\n");
            for c in &report.checks {
                text.push_str(&format!(
                    "{},{},{}\n",
                    c.name,
                    c.trials,
                    sig9(c.max_rel_error)
                ));
            }
            text.push_str(&format!("max,{trials},{}\n", sig9(report.max_error())));
            emit(out, &text)?;
            if report.passed() {
                Ok(())
            } else {
                let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
                Err(Failure::GradCheck(names.join(", ")))
            }
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes())
        .map_err(|e| io_error(Path::new("<stdout>"), e).into())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_error(path, e).into())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}
