//! `sourcespace` command-line driver.
//!
//! Pipeline stages are separate commands sharing one on-disk cache; each
//! stage refuses to run when its upstream output is missing unless `--build`
//! is given. Modelling commands write reports under `--out`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sourcespace::config::Config;
use sourcespace::data::Cache;

#[derive(Parser, Debug)]
#[command(
    name = "sourcespace",
    version,
    about = "Simulated MEG speech-detection pipeline in sensor and source space"
)]
struct Cli {
    /// Config file (TOML); may `extends` a built-in preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override a config value, e.g. `--set source.snr=2` or `--set method=lcmv`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Recompute and overwrite cached outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Compute missing upstream stages instead of failing.
    #[arg(long, global = true)]
    build: bool,
    /// Number of training seeds per model.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Cache root.
    #[arg(
        long,
        global = true,
        env = "SOURCESPACE_CACHE",
        default_value = "cache"
    )]
    cache: PathBuf,
    /// Report directory.
    #[arg(long, global = true, default_value = "reports")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate raw sensor recordings for every session.
    Simulate,
    /// Band-pass, notch and resample the raw recordings.
    Preprocess,
    /// Apply the inverse operator to the preprocessed recordings.
    Reconstruct,
    /// Morph and standardize sessions into model-ready tensors.
    Assemble,
    /// Train one model family on one domain, once per seed.
    Train(commands::ModelArgs),
    /// Random hyperparameter search on one domain.
    Search {
        #[command(flatten)]
        model: commands::ModelArgs,
        /// Trials (defaults to `search.n_trials`).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Evaluate checkpoints written by `train`.
    Eval {
        #[command(flatten)]
        model: commands::ModelArgs,
        /// Evaluate on another dataset's test sessions instead of in-domain.
        #[arg(long, value_name = "DATASET")]
        on: Option<String>,
    },
    /// Run a named experiment.
    Experiment { name: String },
    /// Vary one setting, retrain the inter-subject MLP per value.
    Ablate {
        axis: String,
        /// Comma-separated values.
        #[arg(value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
    /// Verify and print reports (a directory or one `.json` file).
    Report { path: Option<PathBuf> },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut overrides = cli.set.clone();
    if let Some(n) = cli.seeds {
        overrides.push(format!("experiment.seeds={n}"));
    }
    let cfg = match (&cli.config, &cli.preset) {
        (Some(_), Some(_)) => bail!("give either --config or --preset, not both"),
        (Some(path), None) => Config::load(path, &overrides)?,
        (None, preset) => {
            let name = preset.as_deref().unwrap_or("paper_final");
            Config::from_toml_str(&format!("extends = {name:?}"), &overrides)
                .with_context(|| format!("loading preset `{name}`"))?
        }
    };
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    sourcespace::par::set_workers(cli.workers)?;
    let cache = Cache::new(&cli.cache);
    if let Cmd::Report { path } = &cli.cmd {
        return commands::report(path.as_deref().unwrap_or(&cli.out));
    }
    let cfg = load_config(&cli)?;
    let ctx = commands::Ctx {
        cfg,
        cache,
        force: cli.force,
        build: cli.build,
        out: cli.out.clone(),
    };
    match cli.cmd {
        Cmd::Simulate => ctx.stage(sourcespace::pipeline::Stage::Simulate),
        Cmd::Preprocess => ctx.stage(sourcespace::pipeline::Stage::Resample),
        Cmd::Reconstruct => ctx.stage(sourcespace::pipeline::Stage::Reconstruct),
        Cmd::Assemble => ctx.stage(sourcespace::pipeline::Stage::Standardize),
        Cmd::Train(m) => ctx.train(&m),
        Cmd::Search { model, trials } => ctx.search(&model, trials),
        Cmd::Eval { model, on } => ctx.eval(&model, on.as_deref()),
        Cmd::Experiment { name } => ctx.experiment(&name),
        Cmd::Ablate { axis, values } => ctx.ablate(&axis, &values),
        Cmd::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
