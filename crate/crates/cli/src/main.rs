//! `ecgauth`: reproducible ECG biometric experiments from the command line.
//!
//! Every command resolves an [`ExperimentConfig`] (profile defaults, then an
//! optional TOML file, then `--set` overrides, then dedicated flags), writes
//! its outputs into `<root>/<command>-<hash>/` and finishes with `run.json`.
//! The run directory is printed on stdout.

mod commands;
mod plots;
mod runs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ecgauth::data_io::Split;
use ecgauth::experiment::{ExperimentConfig, Profile};
use ecgauth::Error;

use runs::{existing, Inputs, RunSpec};

#[derive(Parser)]
#[command(name = "ecgauth", version, about = "ECG biometric authentication experiments")]
struct Cli {
    /// Directory under which run directories are created.
    #[arg(long, global = true, env = "ECGAUTH_OUTPUT_ROOT", default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Dataset profile supplying defaults: ecgid, mitbih, cybhi, ptb or synthetic.
    #[arg(long)]
    profile: Option<String>,

    /// TOML file layered over the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(v) = self.epochs {
            o.push(format!("train.epochs={v}"));
        }
        if let Some(v) = self.lr {
            o.push(format!("train.lr={v:?}"));
        }
        if let Some(v) = self.batch_size {
            o.push(format!("train.batch_size={v}"));
        }
        o
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic multi-subject raw records and a manifest.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of subjects.
        #[arg(long)]
        subjects: Option<usize>,
        /// Beats per subject.
        #[arg(long)]
        beats: Option<usize>,
        /// Sampling rate in Hz.
        #[arg(long)]
        fs: Option<f64>,
    },
    /// Filter, segment and transform the records of a manifest into an image set.
    Preprocess {
        #[command(flatten)]
        config: ConfigArgs,
        /// Manifest file, or a `synth` run directory.
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the first N scalograms of every record as PNG.
        #[arg(long, default_value_t = 0)]
        png: usize,
    },
    /// Train the CNN+GRU classifier.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: TrainFlags,
        /// Image set file or `preprocess` run directory. Omitted: in-process synthetic data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compute accuracy, top-5, macro P/R/F1, ROC-AUC and EER for a trained model.
    Eval {
        /// `train` or `fedsim` run directory.
        #[arg(long)]
        model: PathBuf,
        /// Image set to evaluate on; defaults to the model's training data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to evaluate.
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Override a config value. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Sweep FGSM perturbation sizes against a trained model.
    Attack {
        /// `train` or `fedsim` run directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated, strictly increasing epsilons.
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Override a config value. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Simulate federated averaging across clients.
    Fedsim {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        local_epochs: Option<usize>,
        /// `iid` or `by_subject`.
        #[arg(long)]
        partition: Option<String>,
    },
    /// Render SVG plots from the CSV outputs of earlier runs.
    Report {
        /// Run directories to plot.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Execute a run again from its `run.json`.
    Rerun {
        /// A `run.json` file or the directory holding it.
        spec: PathBuf,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|v| v.as_str() == s)
        .ok_or_else(|| format!("expected train, val or test, got {s:?}"))
}

fn resolve_config(args: &ConfigArgs, extra: Vec<String>) -> Result<ExperimentConfig> {
    let profile = args.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?,
        None => String::new(),
    };
    let mut config = ExperimentConfig::from_toml(&text, profile)?;
    let seed = args.seed.map(|s| format!("seed={s}"));
    for o in args.set.iter().cloned().chain(seed).chain(extra) {
        config = config.with_override(&o)?;
    }
    Ok(config)
}

fn apply_overrides(mut config: ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    for o in overrides {
        config = config.with_override(o)?;
    }
    Ok(config)
}

fn data_path(path: Option<PathBuf>) -> Result<Option<PathBuf>> {
    path.map(|p| {
        let p = existing(&p)?;
        Ok(if p.is_dir() { p.join(commands::IMAGESET_FILE) } else { p })
    })
    .transpose()
}

fn run_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(runs::RUN_FILE)
    } else {
        path.to_path_buf()
    }
}

fn build_spec(command: Command) -> Result<RunSpec> {
    Ok(match command {
        Command::Synth {
            config,
            subjects,
            beats,
            fs,
        } => {
            let mut extra = Vec::new();
            extra.extend(subjects.map(|v| format!("synth.subjects={v}")));
            extra.extend(beats.map(|v| format!("synth.beats_per_subject={v}")));
            extra.extend(fs.map(|v| format!("synth.fs={v:?}")));
            RunSpec::new("synth", resolve_config(&config, extra)?, Inputs::default())
        }
        Command::Preprocess { config, manifest, png } => {
            let mut manifest = existing(&manifest)?;
            if manifest.is_dir() {
                manifest = manifest.join("manifest.tsv");
            }
            let inputs = Inputs {
                manifest: Some(manifest),
                png,
                ..Inputs::default()
            };
            RunSpec::new("preprocess", resolve_config(&config, Vec::new())?, inputs)
        }
        Command::Train { config, flags, data } => {
            let inputs = Inputs {
                data: data_path(data)?,
                ..Inputs::default()
            };
            RunSpec::new("train", resolve_config(&config, flags.overrides())?, inputs)
        }
        Command::Eval {
            model,
            data,
            split,
            set,
        } => {
            let (config, mut inputs) = commands::inherit_data(&existing(&model)?, data_path(data)?)?;
            inputs.split = Some(split);
            RunSpec::new("eval", apply_overrides(config, &set)?, inputs)
        }
        Command::Attack {
            model,
            data,
            epsilons,
            split,
            mut set,
        } => {
            let (config, mut inputs) = commands::inherit_data(&existing(&model)?, data_path(data)?)?;
            inputs.split = Some(split);
            if let Some(eps) = epsilons {
                let list: Vec<String> = eps.iter().map(|e| format!("{e:?}")).collect();
                set.push(format!("attack.epsilons=[{}]", list.join(", ")));
            }
            RunSpec::new("attack", apply_overrides(config, &set)?, inputs)
        }
        Command::Fedsim {
            config,
            flags,
            data,
            clients,
            rounds,
            local_epochs,
            partition,
        } => {
            let mut extra = flags.overrides();
            extra.extend(clients.map(|v| format!("federated.n_clients={v}")));
            extra.extend(rounds.map(|v| format!("federated.rounds={v}")));
            extra.extend(local_epochs.map(|v| format!("federated.local_epochs={v}")));
            extra.extend(partition.map(|v| format!("federated.partition={v:?}")));
            let inputs = Inputs {
                data: data_path(data)?,
                ..Inputs::default()
            };
            RunSpec::new("fedsim", resolve_config(&config, extra)?, inputs)
        }
        Command::Report { runs } => {
            let runs = runs.iter().map(|r| existing(r)).collect::<Result<Vec<_>>>()?;
            let inputs = Inputs {
                runs,
                ..Inputs::default()
            };
            // Plots have no parameters of their own.
            let config = ExperimentConfig::profile(Profile::Synthetic).resolve()?;
            RunSpec::new("report", config, inputs)
        }
        Command::Rerun { spec } => RunSpec::read(&run_file(&spec))?,
    })
}

fn run(cli: Cli) -> Result<()> {
    let spec = build_spec(cli.command)?;
    let dir = commands::execute(&spec, &cli.out_root).with_context(|| format!("{} failed", spec.command))?;
    println!("{}", dir.display());
    Ok(())
}

/// 2 usage, 3 data or format, 4 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Usage(_) | Error::Config(_) | Error::Unsupported(_) => 2,
                Error::Numeric(_) => 4,
                Error::Domain(_)
                | Error::Shape { .. }
                | Error::Format { .. }
                | Error::Fingerprint { .. }
                | Error::Io { .. } => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
