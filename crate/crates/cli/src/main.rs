use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gtrans::config::{self, ConfigSources, RunConfig, ENV_DATA_ROOT, ENV_WEIGHT_CACHE};
use gtrans::runner::{self, AblationAxis};
use gtrans::{Error, ErrorKind};

/// Exit codes by error class.
const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "gtrans", version, about = "Guided-Transformer anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Dotted-path override, e.g. `score.mode=P4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset root for MVTec-style data.
    #[arg(long, env = ENV_DATA_ROOT)]
    data_root: Option<PathBuf>,
    /// Directory holding `<family>.safetensors` pretrained weights.
    #[arg(long, env = ENV_WEIGHT_CACHE)]
    weight_cache: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Preset (`default`, `toy`) or TOML file merged onto `default`.
    #[arg(long, default_value = "default")]
    config: String,
    /// Shorthand for `data.source`.
    #[arg(long)]
    dataset: Option<String>,
    /// Shorthand for `data.category`.
    #[arg(long)]
    category: Option<String>,
    /// Shorthand for `training.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Shorthand for `seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

impl RunArgs {
    fn sources(&self) -> ConfigSources {
        let mut overrides = Vec::new();
        if let Some(d) = &self.dataset {
            overrides.push(format!("data.source={d}"));
        }
        if let Some(c) = &self.category {
            overrides.push(format!("data.category=\"{c}\""));
        }
        if let Some(e) = self.epochs {
            overrides.push(format!("training.epochs={e}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        overrides.extend(self.common.overrides.iter().cloned());
        ConfigSources {
            base: Some(self.config.clone()),
            overrides,
            data_root: self.common.data_root.clone(),
            weight_cache: self.common.weight_cache.clone(),
        }
    }
}

fn checkpoint_sources(common: &Common) -> ConfigSources {
    ConfigSources {
        base: None,
        overrides: common.overrides.clone(),
        data_root: common.data_root.clone(),
        weight_cache: common.weight_cache.clone(),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one category and write checkpoint, λ calibration, TrainLog, and config snapshot.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Run directory; defaults to `paths.out_dir` or `runs/<category>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint's test split and write JSON/CSV reports.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Also write raw maps, heatmaps, and overlays per test image.
        #[arg(long)]
        emit_maps: bool,
    },
    /// Recompute λ on validation normals and store it in the checkpoint.
    CalibrateLambda {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one ablation axis and write a comparison CSV.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// layers, tfm_depth, decoder, weights, or modes.
        #[arg(long)]
        axis: String,
        /// Reused by the scoring axes (weights, modes) instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic dataset as an MVTec-style tree.
    MakeSynthetic {
        #[command(flatten)]
        run: RunArgs,
        /// Dataset root; the category directory is created inside it.
        #[arg(long)]
        out: PathBuf,
    },
}

fn out_dir(given: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    given
        .or_else(|| cfg.paths.out_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.data.category))
}

fn run(cli: Cli) -> gtrans::Result<()> {
    match cli.command {
        Command::Train { run, out } => {
            let cfg = config::resolve(&run.sources())?;
            let out = out_dir(out, &cfg);
            let a = runner::cmd_train(&cfg, &out)?;
            println!("checkpoint {}", a.checkpoint.display());
            println!("trainlog   {}", a.train_log.display());
            println!("lambdas    {:?}", a.calibration.lambdas);
        }
        Command::Evaluate { checkpoint, common, out, emit_maps } => {
            let a = runner::cmd_evaluate(&checkpoint, &checkpoint_sources(&common), &out, emit_maps)?;
            for r in &a.report.categories {
                println!(
                    "{}: image_auroc {:.4}  pixel_auroc {:.4}  aupro {:.4}  ({} images, {} anomalous)",
                    r.category, r.image_auroc, r.pixel_auroc, r.aupro, r.n_images, r.n_anomalous
                );
            }
            println!("report {}", a.json.display());
        }
        Command::CalibrateLambda { checkpoint, common } => {
            let c = runner::cmd_calibrate_lambda(&checkpoint, &checkpoint_sources(&common))?;
            println!("lambdas {:?}", c.lambdas);
        }
        Command::Ablate { run, axis, checkpoint, out } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = config::resolve(&run.sources())?;
            let out = out_dir(out, &cfg);
            let (rows, path) = runner::cmd_ablate(&cfg, axis, checkpoint.as_deref(), &out)?;
            for r in &rows {
                println!("{:<24} {:.4} {:.4} {:.4}", r.variant, r.image_auroc, r.pixel_auroc, r.aupro);
            }
            println!("table {}", path.display());
        }
        Command::MakeSynthetic { run, out } => {
            let cfg = config::resolve(&run.sources())?;
            let dir = runner::cmd_make_synthetic(&cfg.data.synthetic, &out, &cfg.data.category)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Diverged => EXIT_DIVERGED,
        ErrorKind::Runtime => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
