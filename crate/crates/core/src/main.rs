use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tcpm::config::{Protocol, RunConfig};
use tcpm::dataset::Dataset;
use tcpm::error::{Error, Result};
use tcpm::eval::{
    evaluate, evaluate_single_gallery, random_baseline, split_descriptors, write_rankings, Summary,
};
use tcpm::gradcheck::{loss_gradient_report, LossCheckSpec, GRADCHECK_TOLERANCE};
use tcpm::io::Checkpoint;
use tcpm::synth::{synth_generate, write_dataset};
use tcpm::trainer::{load_model, train, OutputDir};

#[derive(Parser, Debug)]
#[command(name = "tcpm", version, about = "Part-aware re-identification with an exemplar memory")]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BranchesArg {
    One,
    Two,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SwitchArg {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Triplet,
    Tc,
}

#[derive(Args, Debug)]
struct GlobalFlags {
    /// key=value settings file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    p1: Option<usize>,
    #[arg(long, global = true)]
    p2: Option<usize>,
    #[arg(long, global = true, value_enum)]
    branches: Option<BranchesArg>,
    #[arg(long, global = true, value_enum)]
    memory: Option<SwitchArg>,
    #[arg(long, global = true, value_enum)]
    loss: Option<LossArg>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra key=value setting; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl GlobalFlags {
    fn pairs(&self) -> Result<Vec<(&'static str, String)>> {
        let mut out: Vec<(&'static str, String)> = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch", self.batch.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("beta", self.beta.map(|v| v.to_string()));
        push("delta", self.delta.map(|v| v.to_string()));
        push("p1", self.p1.map(|v| v.to_string()));
        push("p2", self.p2.map(|v| v.to_string()));
        push(
            "branches",
            self.branches.map(|b| match b {
                BranchesArg::One => "one".into(),
                BranchesArg::Two => "two".into(),
            }),
        );
        push(
            "memory",
            self.memory.map(|m| match m {
                SwitchArg::On => "on".into(),
                SwitchArg::Off => "off".into(),
            }),
        );
        push(
            "loss",
            self.loss.map(|l| match l {
                LossArg::Triplet => "triplet".into(),
                LossArg::Tc => "tc".into(),
            }),
        );
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
            let key = RunConfig::KEYS
                .iter()
                .find(|&&known| known == k.trim())
                .ok_or_else(|| Error::Config(format!("unknown setting `{}`", k.trim())))?;
            out.push((key, v.to_string()));
        }
        Ok(out)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (manifest plus feature files) under --out
    Synth,
    /// Train on a manifest; checkpoints and the iteration log go to --out
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from the checkpoint in --out
        #[arg(long)]
        resume: bool,
    },
    /// Rank queries against the gallery; rankings and summary go to --out
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also estimate the random-ranking mAP
        #[arg(long)]
        baseline: bool,
    },
    /// Finite-difference checks of the loss gradients
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        configs: usize,
    },
    /// Side-by-side table of metrics summaries
    Report {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
}

fn required(value: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    value
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("missing --{what}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let flags = cli.global.pairs()?;
    let config = RunConfig::resolve(cli.global.config.as_deref(), &flags)?;
    match cli.command {
        Command::Synth => {
            let data = synth_generate(&config.synth)?;
            let manifest = write_dataset(&config.out, &data)?;
            println!("{}", manifest.display());
        }
        Command::Train { manifest, resume } => {
            let manifest = required(manifest, &config.manifest, "manifest")?;
            let dataset = Dataset::load(&manifest)?;
            let out = OutputDir {
                dir: config.out.clone(),
                resume,
            };
            let state = train(&config.effective_train(), &dataset, Some(&out))?;
            println!(
                "trained {} epochs, {} iterations -> {}",
                state.epoch,
                state.iteration,
                out.checkpoint().display()
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            baseline,
        } => {
            let checkpoint = required(checkpoint, &config.checkpoint, "checkpoint")?;
            let manifest = required(manifest, &config.manifest, "manifest")?;
            let model = load_model(&Checkpoint::read(&checkpoint)?)?;
            let dataset = Dataset::load(&manifest)?;
            if dataset.source_kind()? != model.kind() {
                return Err(Error::Config(format!(
                    "checkpoint expects {} inputs",
                    model.kind().as_str()
                )));
            }
            let (queries, gallery) = split_descriptors(&model, &dataset)?;
            let mut evaluation = match config.protocol {
                Protocol::Standard => evaluate(&queries, &gallery, config.metric)?,
                Protocol::SingleGallery => evaluate_single_gallery(
                    &queries,
                    &gallery,
                    config.metric,
                    config.trials,
                    config.train.seed,
                )?,
            };
            if baseline {
                evaluation.summary.random_baseline_map = Some(random_baseline(
                    &evaluation.results,
                    config.baseline_shuffles,
                    config.train.seed,
                )?);
            }
            write_rankings(&config.out.join("rankings.csv"), &evaluation.results)?;
            write_text(&config.out.join("metrics.json"), &evaluation.summary.to_json())?;
            print!("{}", evaluation.summary.to_json());
        }
        Command::Gradcheck { configs } => {
            let spec = LossCheckSpec {
                configs,
                ..Default::default()
            };
            let rows = loss_gradient_report(config.train.seed, &spec)?;
            println!("{:<18} {:>12} {:>8} result", "loss", "max_rel_err", "configs");
            for r in &rows {
                println!(
                    "{:<18} {:>12.3e} {:>8} {}",
                    r.name,
                    r.max_error,
                    r.configs,
                    if r.passed() { "pass" } else { "FAIL" }
                );
            }
            if let Some(bad) = rows.iter().find(|r| !r.passed()) {
                return Err(Error::Numeric(format!(
                    "{} gradient error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
                    bad.name, bad.max_error
                )));
            }
        }
        Command::Report { summaries } => {
            println!(
                "{:<32} {:>8} {:>8} {:>8} {:>8} {:>7}",
                "run", "mAP", "CMC@1", "CMC@5", "CMC@10", "trials"
            );
            for path in summaries {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let s = Summary::from_json(&text)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                let name = path
                    .parent()
                    .and_then(|p| p.file_name())
                    .unwrap_or(path.as_os_str())
                    .to_string_lossy();
                println!(
                    "{:<32} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>7}",
                    name, s.map, s.cmc1, s.cmc5, s.cmc10, s.trials
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error kind={} code={} message={message}", e.kind(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
